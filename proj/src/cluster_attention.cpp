#include "mvacon/cluster_attention.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace mvacon {

ClusteringOp clustering_op_from_string(const std::string& s) {
  if (s == "linear") return ClusteringOp::kLinear;
  if (s == "mlp") return ClusteringOp::kMlp;
  if (s == "conv") return ClusteringOp::kConv;
  throw std::invalid_argument("unknown clustering op: " + s);
}

std::string to_string(ClusteringOp op) {
  switch (op) {
    case ClusteringOp::kLinear: return "linear";
    case ClusteringOp::kMlp: return "mlp";
    case ClusteringOp::kConv: return "conv";
  }
  return "?";
}

void ClusterConfig::validate(int channels) const {
  if (clusters < 1) throw std::invalid_argument("cluster config: clusters must be >= 1");
  if (layers < 1) throw std::invalid_argument("cluster config: layers must be >= 1");
  if (heads < 1 || channels % heads != 0)
    throw std::invalid_argument("cluster config: heads must divide channel width");
}

Tensor cluster_assign(const Tensor& tokens, const ClusteringParams& params, int h, int w) {
  if (tokens.rank() != 2) throw std::invalid_argument("cluster_assign: tokens must be [N, c]");
  const int n = tokens.dim(0);
  if (n < 1) throw std::invalid_argument("cluster_assign: N must be >= 1");
  // Per-cluster constant shifts cancel in the token-axis softmax, so the
  // final projection bias is optional (undefined means zero).
  auto bias_or_id = [](Tensor t, const Tensor& b) { return b.defined() ? add_row_bias(t, b) : t; };
  Tensor logits;
  switch (params.op) {
    case ClusteringOp::kLinear:
      logits = bias_or_id(matmul(tokens, params.w1), params.b1);
      break;
    case ClusteringOp::kMlp: {
      Tensor hidden = relu(add_row_bias(matmul(tokens, params.w1), params.b1));
      logits = bias_or_id(matmul(hidden, params.w2), params.b2);
      break;
    }
    case ClusteringOp::kConv: {
      if (h < 1 || w < 1 || h * w != n)
        throw std::invalid_argument("cluster_assign: conv clustering requires (h, w) metadata");
      const int c = tokens.dim(1);
      Tensor map = reshape(tokens, {h, w, c});
      Tensor mixed = conv2d(map, params.w1, params.b1, 1, 1);  // 3x3, same padding
      Tensor b2 = params.b2.defined() ? params.b2 : Tensor::zeros({params.w2.dim(3)});
      Tensor proj = conv2d(mixed, params.w2, b2, 1, 0);  // 1x1 to M channels
      logits = reshape(proj, {n, proj.dim(2)});
      break;
    }
  }
  // softmax along the token dimension: each cluster column sums to 1
  return softmax_axis(logits, 0);
}

Tensor compute_clusters(const Tensor& tokens, const Tensor& assign, const Tensor& gamma,
                        const Tensor& beta, double eps) {
  if (tokens.rank() != 2 || assign.rank() != 2 || tokens.dim(0) != assign.dim(0))
    throw std::invalid_argument("compute_clusters: token/assignment shape mismatch");
  return layer_norm(matmul(transpose2d(assign), tokens), gamma, beta, eps);
}

namespace {

Tensor concat_cols(const std::vector<Tensor>& parts) {
  std::vector<Tensor> t;
  t.reserve(parts.size());
  for (const auto& p : parts) t.push_back(transpose2d(p));
  return transpose2d(concat_rows(t));
}

Tensor multihead(const Tensor& q, const Tensor& k, const Tensor& v, int heads) {
  const int c = q.dim(1);
  const int dh = c / heads;
  const double scl = 1.0 / std::sqrt(static_cast<double>(dh));
  std::vector<Tensor> outs;
  outs.reserve(static_cast<size_t>(heads));
  for (int hh = 0; hh < heads; ++hh) {
    Tensor qh = heads == 1 ? q : slice_cols(q, hh * dh, (hh + 1) * dh);
    Tensor kh = heads == 1 ? k : slice_cols(k, hh * dh, (hh + 1) * dh);
    Tensor vh = heads == 1 ? v : slice_cols(v, hh * dh, (hh + 1) * dh);
    Tensor attn = softmax_axis(scale(matmul(qh, transpose2d(kh)), scl), 1);
    outs.push_back(matmul(attn, vh));
  }
  return heads == 1 ? outs[0] : concat_cols(outs);
}

}  // namespace

Tensor paca_attend(const Tensor& tokens, const Tensor& clusters, const AttnParams& params) {
  if (tokens.rank() != 2 || clusters.rank() != 2 || tokens.dim(1) != clusters.dim(1))
    throw std::invalid_argument("paca_attend: channel widths disagree");
  if (clusters.dim(0) < 1) throw std::invalid_argument("paca_attend: empty cluster set");
  const int c = tokens.dim(1);
  if (params.heads < 1 || c % params.heads != 0)
    throw std::invalid_argument("paca_attend: heads must divide channel width");
  Tensor q = add_row_bias(matmul(tokens, params.wq), params.bq);
  Tensor k = add_row_bias(matmul(clusters, params.wk), params.bk);
  Tensor v = add_row_bias(matmul(clusters, params.wv), params.bv);
  Tensor mixed = multihead(q, k, v, params.heads);
  Tensor out = add_row_bias(matmul(mixed, params.wo), params.bo);
  return add(out, tokens);  // shortcut
}

Tensor dense_attend(const Tensor& tokens, const AttnParams& params) {
  Tensor q = add_row_bias(matmul(tokens, params.wq), params.bq);
  Tensor k = add_row_bias(matmul(tokens, params.wk), params.bk);
  Tensor v = add_row_bias(matmul(tokens, params.wv), params.bv);
  Tensor mixed = multihead(q, k, v, params.heads);
  Tensor out = add_row_bias(matmul(mixed, params.wo), params.bo);
  return add(out, tokens);
}

Tensor concat_levels(const std::vector<ClusterSet>& sets) {
  if (sets.empty()) throw std::invalid_argument("concat_levels: no cluster sets");
  std::vector<std::pair<int, size_t>> order;
  for (size_t i = 0; i < sets.size(); ++i) {
    if (sets[i].clusters.dim(1) != sets[0].clusters.dim(1))
      throw std::invalid_argument("concat_levels: channel width mismatch");
    if (sets[i].view != sets[0].view)
      throw std::invalid_argument("concat_levels: cluster sets from different views");
    order.emplace_back(sets[i].level, i);
  }
  std::sort(order.begin(), order.end());
  std::vector<Tensor> zs;
  zs.reserve(sets.size());
  for (const auto& [lvl, i] : order) zs.push_back(sets[i].clusters);
  return concat_rows(zs);
}

MvACon::MvACon(ParamRegistry& reg, const std::string& prefix, const ClusterConfig& cfg, int channels,
               int levels, Rng& rng)
    : cfg_(cfg), channels_(channels) {
  cfg.validate(channels);
  const int c = channels, m = cfg.clusters;
  for (int b = 0; b < cfg.layers; ++b) {
    Block block;
    for (int l = 0; l < levels; ++l) {
      const std::string p = prefix + ".block" + std::to_string(b) + ".level" + std::to_string(l);
      LevelParams lp;
      lp.assign.op = cfg.op;
      // the final per-cluster bias is inert under the token-axis softmax
      // and is not a learned parameter
      switch (cfg.op) {
        case ClusteringOp::kLinear:
          lp.assign.w1 = reg.create(p + ".assign.w1", {c, m}, InitScheme::kUniformFanIn, rng);
          break;
        case ClusteringOp::kMlp:
          lp.assign.w1 = reg.create(p + ".assign.w1", {c, c}, InitScheme::kUniformFanIn, rng);
          lp.assign.b1 = reg.create(p + ".assign.b1", {c}, InitScheme::kZeros, rng);
          lp.assign.w2 = reg.create(p + ".assign.w2", {c, m}, InitScheme::kUniformFanIn, rng);
          break;
        case ClusteringOp::kConv:
          lp.assign.w1 = reg.create(p + ".assign.w1", {3, 3, c, c}, InitScheme::kUniformFanIn, rng);
          lp.assign.b1 = reg.create(p + ".assign.b1", {c}, InitScheme::kZeros, rng);
          lp.assign.w2 = reg.create(p + ".assign.w2", {1, 1, c, m}, InitScheme::kUniformFanIn, rng);
          break;
      }
      lp.ln_gamma = reg.create(p + ".ln.gamma", {c}, InitScheme::kOnes, rng);
      lp.ln_beta = reg.create(p + ".ln.beta", {c}, InitScheme::kZeros, rng);
      lp.attn.heads = cfg.heads;
      lp.attn.wq = reg.create(p + ".attn.wq", {c, c}, InitScheme::kUniformFanIn, rng);
      lp.attn.bq = reg.create(p + ".attn.bq", {c}, InitScheme::kZeros, rng);
      lp.attn.wk = reg.create(p + ".attn.wk", {c, c}, InitScheme::kUniformFanIn, rng);
      lp.attn.bk = reg.create(p + ".attn.bk", {c}, InitScheme::kZeros, rng);
      lp.attn.wv = reg.create(p + ".attn.wv", {c, c}, InitScheme::kUniformFanIn, rng);
      lp.attn.bv = reg.create(p + ".attn.bv", {c}, InitScheme::kZeros, rng);
      lp.attn.wo = reg.create(p + ".attn.wo", {c, c}, InitScheme::kUniformFanIn, rng);
      lp.attn.bo = reg.create(p + ".attn.bo", {c}, InitScheme::kZeros, rng);
      block.levels.push_back(std::move(lp));
    }
    blocks_.push_back(std::move(block));
  }
}

Pyramid MvACon::forward_view(const Pyramid& pyramid) const {
  Pyramid cur = pyramid;
  for (const auto& block : blocks_) {
    if (pyramid.size() > block.levels.size())
      throw std::invalid_argument("mvacon: more pyramid levels than configured");
    std::vector<ClusterSet> sets;
    sets.reserve(cur.size());
    for (size_t l = 0; l < cur.size(); ++l) {
      const auto& lp = block.levels[l];
      ClusterSet cs;
      cs.level = static_cast<int>(l);
      cs.assign = cluster_assign(cur[l].tokens, lp.assign, cur[l].h, cur[l].w);
      cs.clusters = compute_clusters(cur[l].tokens, cs.assign, lp.ln_gamma, lp.ln_beta);
      sets.push_back(std::move(cs));
    }
    Tensor shared_kv;
    if (cfg_.cross_level) shared_kv = concat_levels(sets);
    Pyramid next;
    next.reserve(cur.size());
    for (size_t l = 0; l < cur.size(); ++l) {
      const auto& lp = block.levels[l];
      const Tensor& kv = cfg_.cross_level ? shared_kv : sets[l].clusters;
      FeatureMap fm = cur[l];
      fm.tokens = paca_attend(cur[l].tokens, kv, lp.attn);
      next.push_back(std::move(fm));
    }
    cur = std::move(next);
  }
  return cur;
}

std::vector<Pyramid> MvACon::forward(const std::vector<Pyramid>& views) const {
  std::vector<Pyramid> out;
  out.reserve(views.size());
  for (const auto& v : views) out.push_back(forward_view(v));
  return out;
}

std::vector<ClusterSet> MvACon::cluster_sets(const Pyramid& pyramid) const {
  std::vector<ClusterSet> sets;
  const auto& block = blocks_.front();
  for (size_t l = 0; l < pyramid.size(); ++l) {
    const auto& lp = block.levels[l];
    ClusterSet cs;
    cs.level = static_cast<int>(l);
    cs.assign = cluster_assign(pyramid[l].tokens, lp.assign, pyramid[l].h, pyramid[l].w);
    cs.clusters = compute_clusters(pyramid[l].tokens, cs.assign, lp.ln_gamma, lp.ln_beta);
    sets.push_back(std::move(cs));
  }
  return sets;
}

}  // namespace mvacon
