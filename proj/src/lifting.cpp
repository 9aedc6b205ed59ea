#include "mvacon/lifting.hpp"

#include <stdexcept>

namespace mvacon {

LiftConfig::Mode lift_mode_from_string(const std::string& s) {
  if (s == "petr") return LiftConfig::Mode::kPetr;
  if (s == "bevformer") return LiftConfig::Mode::kBevformer;
  throw std::invalid_argument("unknown lift mode: " + s);
}

std::string to_string(LiftConfig::Mode m) {
  return m == LiftConfig::Mode::kPetr ? "petr" : "bevformer";
}

PetrLift::PetrLift(ParamRegistry& reg, const std::string& prefix, int channels, int depth_levels,
                   int d, Rng& rng)
    : depth_levels_(depth_levels) {
  wf_ = reg.create(prefix + ".feat.w", {channels, d}, InitScheme::kUniformFanIn, rng);
  bf_ = reg.create(prefix + ".feat.b", {d}, InitScheme::kZeros, rng);
  w1_ = reg.create(prefix + ".pos.w1", {4 * depth_levels, d}, InitScheme::kUniformFanIn, rng);
  b1_ = reg.create(prefix + ".pos.b1", {d}, InitScheme::kZeros, rng);
  w2_ = reg.create(prefix + ".pos.w2", {d, d}, InitScheme::kUniformFanIn, rng);
  b2_ = reg.create(prefix + ".pos.b2", {d}, InitScheme::kZeros, rng);
}

Tensor PetrLift::forward(const std::vector<FeatureMap>& views, const std::vector<Tensor>& volumes) const {
  if (views.empty() || views.size() != volumes.size())
    throw std::invalid_argument("petr_lift: one frustum volume per view required");
  std::vector<Tensor> tokens;
  tokens.reserve(views.size());
  for (size_t i = 0; i < views.size(); ++i) {
    const FeatureMap& fm = views[i];
    const Tensor& vol = volumes[i];
    if (vol.rank() != 3 || vol.dim(0) != fm.h || vol.dim(1) != fm.w)
      throw std::invalid_argument("petr_lift: volume spatial size mismatch");
    if (vol.dim(2) != 4 * depth_levels_)
      throw std::invalid_argument("petr_lift: volume depth channels do not match the MLP input width");
    Tensor f = add_row_bias(matmul(fm.tokens, wf_), bf_);
    Tensor p = reshape(vol, {fm.h * fm.w, 4 * depth_levels_});
    p = add_row_bias(matmul(relu(add_row_bias(matmul(p, w1_), b1_)), w2_), b2_);
    tokens.push_back(add(f, p));
  }
  return tokens.size() == 1 ? tokens[0] : concat_rows(tokens);
}

DeformSpec make_deform_spec(const Tensor& queries, const DeformHeadParams& head,
                            const ProjectionTable& table) {
  if (queries.rank() != 2 || queries.dim(0) != table.cells)
    throw std::invalid_argument("make_deform_spec: query count must match BEV cells");
  const int nq = table.cells, v = table.views, l = table.levels, p = table.pillars;
  const int s = head.sample_points;
  const int per_view = l * p * s;
  Tensor off_all = add_row_bias(matmul(queries, head.w_off), head.b_off);
  Tensor wt_all = add_row_bias(matmul(queries, head.w_wt), head.b_wt);
  if (off_all.dim(1) != v * per_view * 2 || wt_all.dim(1) != v * per_view)
    throw std::invalid_argument("make_deform_spec: head output width mismatch");

  DeformSpec spec;
  spec.points_per_ref = s;
  for (int vi = 0; vi < v; ++vi) {
    std::vector<uint8_t> mask(static_cast<size_t>(nq) * per_view, 0);
    std::vector<uint8_t> hit(static_cast<size_t>(nq), 0);
    for (int q = 0; q < nq; ++q)
      for (int li = 0; li < l; ++li)
        for (int pi = 0; pi < p; ++pi) {
          const bool vis = table.at(q, pi, vi, li).visible;
          if (!vis) continue;
          hit[static_cast<size_t>(q)] = 1;
          for (int si = 0; si < s; ++si)
            mask[static_cast<size_t>(q) * per_view + (li * p + pi) * s + si] = 1;
        }
    spec.offsets.push_back(slice_cols(off_all, vi * per_view * 2, (vi + 1) * per_view * 2));
    Tensor wt_raw = slice_cols(wt_all, vi * per_view, (vi + 1) * per_view);
    spec.weights.push_back(masked_softmax_rows(wt_raw, mask));
    spec.active.push_back(std::move(mask));
    spec.hit.push_back(std::move(hit));
  }
  return spec;
}

DeformSampleResult deformable_sample(const Pyramid& maps, const ProjectionTable& table, int view,
                                     const DeformSpec& spec) {
  if (static_cast<int>(maps.size()) != table.levels)
    throw std::invalid_argument("deformable_sample: pyramid level count mismatch");
  const int nq = table.cells, l = table.levels, p = table.pillars, s = spec.points_per_ref;
  DeformSampleResult out;
  out.hit = spec.hit[static_cast<size_t>(view)];
  Tensor acc;
  for (int li = 0; li < l; ++li) {
    const FeatureMap& fm = maps[static_cast<size_t>(li)];
    std::vector<double> base(static_cast<size_t>(nq) * p * s * 2, 0.0);
    std::vector<uint8_t> active(static_cast<size_t>(nq) * p * s, 0);
    for (int q = 0; q < nq; ++q)
      for (int pi = 0; pi < p; ++pi) {
        const ProjEntry& e = table.at(q, pi, view, li);
        for (int si = 0; si < s; ++si) {
          const size_t k = (static_cast<size_t>(q) * p + pi) * s + si;
          base[k * 2] = e.u;
          base[k * 2 + 1] = e.v;
          active[k] = e.visible ? 1 : 0;
        }
      }
    Tensor off = slice_cols(spec.offsets[static_cast<size_t>(view)], li * p * s * 2, (li + 1) * p * s * 2);
    Tensor wt = slice_cols(spec.weights[static_cast<size_t>(view)], li * p * s, (li + 1) * p * s);
    Tensor map3 = reshape(fm.tokens, {fm.h, fm.w, fm.c});
    Tensor lvl = deform_gather(map3, base, off, wt, active);
    acc = acc.defined() ? add(acc, lvl) : lvl;
  }
  out.features = acc;
  return out;
}

Tensor spatial_cross_attention(const Tensor& queries, const std::vector<Pyramid>& views,
                               const ProjectionTable& table, const SpatialCrossAttentionParams& params,
                               std::vector<DeformPoint>* trace_points, int trace_query) {
  if (static_cast<int>(views.size()) != table.views)
    throw std::invalid_argument("spatial_cross_attention: view count mismatch");
  DeformSpec spec = make_deform_spec(queries, params.head, table);
  const int nq = table.cells;
  std::vector<double> hits(static_cast<size_t>(nq), 0.0);
  Tensor acc;
  for (int vi = 0; vi < table.views; ++vi) {
    DeformSampleResult r = deformable_sample(views[static_cast<size_t>(vi)], table, vi, spec);
    for (int q = 0; q < nq; ++q) hits[static_cast<size_t>(q)] += r.hit[static_cast<size_t>(q)] ? 1.0 : 0.0;
    acc = acc.defined() ? add(acc, r.features) : r.features;
  }
  std::vector<double> inv_hits(static_cast<size_t>(nq), 0.0), indicator(static_cast<size_t>(nq), 0.0);
  for (int q = 0; q < nq; ++q)
    if (hits[static_cast<size_t>(q)] > 0.0) {
      inv_hits[static_cast<size_t>(q)] = 1.0 / hits[static_cast<size_t>(q)];
      indicator[static_cast<size_t>(q)] = 1.0;
    }
  Tensor avg = scale_rows(acc, inv_hits);
  Tensor update = scale_rows(add_row_bias(matmul(avg, params.w_out), params.b_out), indicator);

  if (trace_points && trace_query >= 0 && trace_query < nq) {
    const int l = table.levels, p = table.pillars, s = spec.points_per_ref;
    const int per_view = l * p * s;
    const double norm = hits[static_cast<size_t>(trace_query)] > 0.0
                            ? 1.0 / hits[static_cast<size_t>(trace_query)]
                            : 0.0;
    for (int vi = 0; vi < table.views; ++vi)
      for (int li = 0; li < l; ++li)
        for (int pi = 0; pi < p; ++pi)
          for (int si = 0; si < s; ++si) {
            const int k = (li * p + pi) * s + si;
            if (!spec.active[static_cast<size_t>(vi)][static_cast<size_t>(trace_query) * per_view + k])
              continue;
            const ProjEntry& e = table.at(trace_query, pi, vi, li);
            DeformPoint pt;
            pt.view = vi;
            pt.level = li;
            pt.pillar = pi;
            pt.sample = si;
            pt.u = e.u + spec.offsets[static_cast<size_t>(vi)]
                             .data()[static_cast<size_t>(trace_query) * per_view * 2 + 2 * k];
            pt.v = e.v + spec.offsets[static_cast<size_t>(vi)]
                             .data()[static_cast<size_t>(trace_query) * per_view * 2 + 2 * k + 1];
            pt.weight =
                spec.weights[static_cast<size_t>(vi)].data()[static_cast<size_t>(trace_query) * per_view + k] *
                norm;
            trace_points->push_back(pt);
          }
  }
  return add(queries, update);
}

BevEncoder::BevEncoder(ParamRegistry& reg, const std::string& prefix, int channels, int layers,
                       int sample_points, int views, int levels, int pillars, Rng& rng) {
  if (layers < 1) throw std::invalid_argument("bev_encoder: layers must be >= 1");
  const int c = channels;
  const int per_view = levels * pillars * sample_points;
  for (int i = 0; i < layers; ++i) {
    const std::string p = prefix + ".layer" + std::to_string(i);
    Layer layer;
    layer.sca.head.sample_points = sample_points;
    // zero-initialized heads: sampling starts exactly at the projected
    // references with uniform weights over visible points
    layer.sca.head.w_off = reg.create(p + ".off.w", {c, views * per_view * 2}, InitScheme::kZeros, rng);
    layer.sca.head.b_off = reg.create(p + ".off.b", {views * per_view * 2}, InitScheme::kZeros, rng);
    layer.sca.head.w_wt = reg.create(p + ".wt.w", {c, views * per_view}, InitScheme::kZeros, rng);
    layer.sca.head.b_wt = reg.create(p + ".wt.b", {views * per_view}, InitScheme::kZeros, rng);
    layer.sca.w_out = reg.create(p + ".out.w", {c, c}, InitScheme::kUniformFanIn, rng);
    layer.sca.b_out = reg.create(p + ".out.b", {c}, InitScheme::kZeros, rng);
    layer.ffn_w1 = reg.create(p + ".ffn.w1", {c, c}, InitScheme::kUniformFanIn, rng);
    layer.ffn_b1 = reg.create(p + ".ffn.b1", {c}, InitScheme::kZeros, rng);
    layer.ffn_w2 = reg.create(p + ".ffn.w2", {c, c}, InitScheme::kUniformFanIn, rng);
    layer.ffn_b2 = reg.create(p + ".ffn.b2", {c}, InitScheme::kZeros, rng);
    layers_.push_back(std::move(layer));
  }
}

Tensor BevEncoder::forward(const Tensor& bev_init, const PyramidProvider& views,
                           const ProjectionTable& table,
                           std::vector<std::vector<DeformPoint>>* traces, int trace_query) const {
  Tensor q = bev_init;
  if (traces) traces->assign(layers_.size(), {});
  for (size_t i = 0; i < layers_.size(); ++i) {
    const Layer& layer = layers_[i];
    std::vector<DeformPoint>* tp = traces ? &(*traces)[i] : nullptr;
    q = spatial_cross_attention(q, views(static_cast<int>(i)), table, layer.sca, tp, trace_query);
    Tensor hidden = relu(add_row_bias(matmul(q, layer.ffn_w1), layer.ffn_b1));
    q = add(q, add_row_bias(matmul(hidden, layer.ffn_w2), layer.ffn_b2));
  }
  return q;
}

}  // namespace mvacon
