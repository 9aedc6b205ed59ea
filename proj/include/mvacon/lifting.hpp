#pragma once

#include <functional>
#include <string>
#include <vector>

#include "mvacon/bev.hpp"
#include "mvacon/cluster_attention.hpp"
#include "mvacon/tensor.hpp"

namespace mvacon {

struct LiftConfig {
  enum class Mode { kPetr, kBevformer };
  Mode mode = Mode::kBevformer;
  int layers = 6;
  int sample_points = 4;  // S offsets per reference point
  int d = 32;             // token width of the PETR path
  int depth_levels = 8;   // D frustum depth bins
  bool recontextualize_per_layer = false;
};

LiftConfig::Mode lift_mode_from_string(const std::string& s);
std::string to_string(LiftConfig::Mode m);

/// PETR-style dense lifting: linear(F) + MLP(position volume), summed
/// element-wise, all views concatenated along tokens.
class PetrLift {
 public:
  PetrLift(ParamRegistry& reg, const std::string& prefix, int channels, int depth_levels, int d,
           Rng& rng);

  /// One contextualized single-level FeatureMap and one frustum volume per
  /// view; returns [sum(h*w), d] tokens.
  Tensor forward(const std::vector<FeatureMap>& views, const std::vector<Tensor>& volumes) const;

 private:
  int depth_levels_;
  Tensor wf_, bf_;          // linear c -> d
  Tensor w1_, b1_, w2_, b2_;  // MLP (4D) -> d -> d with ReLU
};

/// Per-query deformable sampling state for one encoder layer: offsets and
/// attention weights predicted from the BEV query states.
struct DeformSpec {
  int points_per_ref = 4;
  std::vector<Tensor> offsets;               // per view: [Nq, L*P*S*2] feature-pixel offsets
  std::vector<Tensor> weights;               // per view: [Nq, L*P*S], visible entries sum to 1 per row
  std::vector<std::vector<uint8_t>> active;  // per view: Nq*L*P*S visibility mask
  std::vector<std::vector<uint8_t>> hit;     // per view: Nq flags (any visible reference)
};

struct DeformHeadParams {
  Tensor w_off, b_off;  // zero-initialized: sampling starts at the references
  Tensor w_wt, b_wt;
  int sample_points = 4;
};

DeformSpec make_deform_spec(const Tensor& queries, const DeformHeadParams& head,
                            const ProjectionTable& table);

struct DeformSampleResult {
  Tensor features;            // [Nq, c]; zero rows for queries with no visible reference
  std::vector<uint8_t> hit;   // per query
};

/// Weighted bilinear lifting of one view's pyramid at reference+offset
/// locations; invisible references are masked out of the weights upstream.
DeformSampleResult deformable_sample(const Pyramid& maps, const ProjectionTable& table, int view,
                                     const DeformSpec& spec);

/// Raw per-point sampling data for one query, for visualization dumps.
struct DeformPoint {
  int view = 0, level = 0, pillar = 0, sample = 0;
  double u = 0, v = 0;
  double weight = 0;  // hit-count-normalized; sums to 1 per query across views
};

struct SpatialCrossAttentionParams {
  DeformHeadParams head;
  Tensor w_out, b_out;
};

/// One spatial cross-attention update: deformable sampling over all views,
/// hit-count-normalized view average, output projection, residual add.
/// Queries hit by no view pass through unchanged.
Tensor spatial_cross_attention(const Tensor& queries, const std::vector<Pyramid>& views,
                               const ProjectionTable& table, const SpatialCrossAttentionParams& params,
                               std::vector<DeformPoint>* trace_points = nullptr, int trace_query = -1);

/// Stack of {spatial cross-attention, residual FFN} blocks refining the
/// BEV queries.
class BevEncoder {
 public:
  BevEncoder(ParamRegistry& reg, const std::string& prefix, int channels, int layers,
             int sample_points, int views, int levels, int pillars, Rng& rng);

  using PyramidProvider = std::function<const std::vector<Pyramid>&(int layer)>;

  Tensor forward(const Tensor& bev_init, const PyramidProvider& views, const ProjectionTable& table,
                 std::vector<std::vector<DeformPoint>>* traces = nullptr, int trace_query = -1) const;

  int layers() const { return static_cast<int>(layers_.size()); }

 private:
  struct Layer {
    SpatialCrossAttentionParams sca;
    Tensor ffn_w1, ffn_b1, ffn_w2, ffn_b2;
  };
  std::vector<Layer> layers_;
};

}  // namespace mvacon
