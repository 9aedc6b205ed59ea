#pragma once

#include <string>
#include <vector>

#include "mvacon/tensor.hpp"

namespace mvacon {

/// Per-view, per-level dense feature map; tokens is the flattened
/// [h*w, c] view of the spatial map.
struct FeatureMap {
  Tensor tokens;
  int h = 0, w = 0, c = 0;
};

using Pyramid = std::vector<FeatureMap>;

enum class ClusteringOp { kLinear, kMlp, kConv };

ClusteringOp clustering_op_from_string(const std::string& s);
std::string to_string(ClusteringOp op);

struct ClusterConfig {
  int clusters = 100;
  int heads = 8;
  ClusteringOp op = ClusteringOp::kLinear;
  bool cross_level = true;
  int layers = 6;

  void validate(int channels) const;
};

/// Parameters of one clustering operator instance.
///   linear: w1 [c,M], b1 [M]
///   mlp:    w1 [c,c], b1 [c], w2 [c,M], b2 [M]   (ReLU between)
///   conv:   w1 [3,3,c,c], b1 [c], w2 [1,1,c,M], b2 [M]
struct ClusteringParams {
  ClusteringOp op = ClusteringOp::kLinear;
  Tensor w1, b1, w2, b2;
};

struct AttnParams {
  Tensor wq, bq, wk, bk, wv, bv, wo, bo;
  int heads = 1;
};

struct ClusterSet {
  Tensor assign;    // C [N, M], columns softmax-normalized over tokens
  Tensor clusters;  // z [M, c], rows layer-normalized
  int view = 0;
  int level = 0;
};

/// Token-to-cluster assignment: Clustering(F) then softmax over the token
/// axis per cluster column. Conv clustering needs the (h, w) layout.
Tensor cluster_assign(const Tensor& tokens, const ClusteringParams& params, int h = -1, int w = -1);

/// z = LN(C^T F) with learnable affine over channels.
Tensor compute_clusters(const Tensor& tokens, const Tensor& assign, const Tensor& gamma,
                        const Tensor& beta, double eps = 1e-5);

/// Multi-head cluster attention with residual shortcut:
/// softmax(Q K^T / sqrt(c/heads)) V per head, concat, output projection, +F.
Tensor paca_attend(const Tensor& tokens, const Tensor& clusters, const AttnParams& params);

/// Row-stack of cluster tensors in ascending level order.
Tensor concat_levels(const std::vector<ClusterSet>& sets);

/// Dense token-to-token attention with the same projection structure;
/// the quadratic baseline for the complexity benchmark.
Tensor dense_attend(const Tensor& tokens, const AttnParams& params);

/// The MvACon module: `layers` stacked contextualization blocks, each with
/// per-level clustering, cluster normalization, and cluster attention.
/// Clusters never mix across views.
class MvACon {
 public:
  MvACon(ParamRegistry& reg, const std::string& prefix, const ClusterConfig& cfg, int channels,
         int levels, Rng& rng);

  std::vector<Pyramid> forward(const std::vector<Pyramid>& views) const;
  Pyramid forward_view(const Pyramid& pyramid) const;

  /// Assignment matrices of the first block for one view (visualization).
  std::vector<ClusterSet> cluster_sets(const Pyramid& pyramid) const;

  const ClusterConfig& config() const { return cfg_; }

 private:
  struct LevelParams {
    ClusteringParams assign;
    Tensor ln_gamma, ln_beta;
    AttnParams attn;
  };
  struct Block {
    std::vector<LevelParams> levels;
  };

  ClusterConfig cfg_;
  int channels_ = 0;
  std::vector<Block> blocks_;
};

}  // namespace mvacon
