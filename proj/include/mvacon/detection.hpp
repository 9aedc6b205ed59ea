#pragma once

#include <string>
#include <vector>

#include "mvacon/tensor.hpp"

namespace mvacon {

struct HeadConfig {
  int queries = 16;
  int layers = 2;
  int classes = 3;
  double lambda_cls = 1.0;
  double lambda_box = 0.25;

  void validate() const;
};

/// DETR-style decoder: object queries attend densely over lifted tokens,
/// each layer {cross-attention, FFN}, both residual.
class Decoder {
 public:
  Decoder(ParamRegistry& reg, const std::string& prefix, int query_dim, int kv_dim, int layers,
          Rng& rng);

  Tensor forward(const Tensor& queries, const Tensor& kv) const;

  int layers() const { return static_cast<int>(layers_.size()); }

 private:
  struct Layer {
    Tensor wq, bq, wk, bk, wv, bv, wo, bo;
    Tensor ffn_w1, ffn_b1, ffn_w2, ffn_b2;
  };
  int query_dim_;
  std::vector<Layer> layers_;
};

/// Per-query predictions: class logits over `classes` categories plus a
/// trailing no-object slot, and a 10-channel box regression
/// (cx,cy,cz, l,w,h, sin yaw, cos yaw, vx,vz).
struct DetectionSet {
  Tensor logits;  // [O, classes+1]
  Tensor boxes;   // [O, 10]; sizes already through softplus
};

class PredictHeads {
 public:
  PredictHeads(ParamRegistry& reg, const std::string& prefix, int query_dim, int query_count,
               int classes, Rng& rng);

  /// `now` and `prev` are decoded query states from the two rendered frames;
  /// the velocity head reads their concatenation. Pass the same tensor twice
  /// for single-frame inference.
  DetectionSet forward(const Tensor& now, const Tensor& prev) const;

  const Tensor& references() const { return ref_; }

 private:
  Tensor ref_;              // learned per-query 3D reference points
  Tensor w_cls_, b_cls_;
  Tensor w_ctr_, b_ctr_;
  Tensor w_size_, b_size_;
  Tensor w_yaw_, b_yaw_;
  Tensor w_vel_, b_vel_;    // on [now, prev] concatenation
};

struct GtBox {
  int cls = 0;
  double x = 0, y = 0, z = 0;
  double l = 1, w = 1, h = 1;
  double yaw = 0;
  double vx = 0, vz = 0;
};

struct MatchResult {
  Tensor loss;                  // scalar
  std::vector<int> assignment;  // per gt: matched query index
  double best_center_err = 0;   // min matched center L2 error (0 if no gt)
  double mean_center_err = 0;
  double cls_acc = 0;           // argmax accuracy over all queries
};

/// Optimal one-to-one matching (exact, bitmask DP over ground-truth boxes)
/// minimizing per-pair lambda_cls*CE + lambda_box*L1, then the training loss:
/// matched and unmatched classification averaged over queries plus the L1 box
/// term averaged over ground-truth boxes.
MatchResult match_and_loss(const DetectionSet& pred, const std::vector<GtBox>& gt,
                           const HeadConfig& cfg);

/// The 10-channel regression target for a ground-truth box.
std::vector<double> box_target(const GtBox& b);

}  // namespace mvacon
