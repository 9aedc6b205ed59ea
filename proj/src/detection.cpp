#include "mvacon/detection.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace mvacon {

void HeadConfig::validate() const {
  if (queries < 1) throw std::invalid_argument("head config: queries must be >= 1");
  if (layers < 1) throw std::invalid_argument("head config: layers must be >= 1");
  if (classes < 1) throw std::invalid_argument("head config: classes must be >= 1");
  if (lambda_cls < 0 || lambda_box < 0)
    throw std::invalid_argument("head config: loss weights must be non-negative");
}

Decoder::Decoder(ParamRegistry& reg, const std::string& prefix, int query_dim, int kv_dim,
                 int layers, Rng& rng)
    : query_dim_(query_dim) {
  if (layers < 1) throw std::invalid_argument("decoder: layers must be >= 1");
  for (int i = 0; i < layers; ++i) {
    const std::string p = prefix + ".layer" + std::to_string(i);
    Layer l;
    l.wq = reg.create(p + ".wq", {query_dim, query_dim}, InitScheme::kUniformFanIn, rng);
    l.bq = reg.create(p + ".bq", {query_dim}, InitScheme::kZeros, rng);
    l.wk = reg.create(p + ".wk", {kv_dim, query_dim}, InitScheme::kUniformFanIn, rng);
    l.bk = reg.create(p + ".bk", {query_dim}, InitScheme::kZeros, rng);
    l.wv = reg.create(p + ".wv", {kv_dim, query_dim}, InitScheme::kUniformFanIn, rng);
    l.bv = reg.create(p + ".bv", {query_dim}, InitScheme::kZeros, rng);
    l.wo = reg.create(p + ".wo", {query_dim, query_dim}, InitScheme::kUniformFanIn, rng);
    l.bo = reg.create(p + ".bo", {query_dim}, InitScheme::kZeros, rng);
    l.ffn_w1 = reg.create(p + ".ffn.w1", {query_dim, query_dim}, InitScheme::kUniformFanIn, rng);
    l.ffn_b1 = reg.create(p + ".ffn.b1", {query_dim}, InitScheme::kZeros, rng);
    l.ffn_w2 = reg.create(p + ".ffn.w2", {query_dim, query_dim}, InitScheme::kUniformFanIn, rng);
    l.ffn_b2 = reg.create(p + ".ffn.b2", {query_dim}, InitScheme::kZeros, rng);
    layers_.push_back(std::move(l));
  }
}

Tensor Decoder::forward(const Tensor& queries, const Tensor& kv) const {
  if (kv.rank() != 2 || kv.dim(0) < 1) throw std::invalid_argument("decoder: empty key/value set");
  const double scl = 1.0 / std::sqrt(static_cast<double>(query_dim_));
  Tensor x = queries;
  for (const Layer& l : layers_) {
    Tensor q = add_row_bias(matmul(x, l.wq), l.bq);
    Tensor k = add_row_bias(matmul(kv, l.wk), l.bk);
    Tensor v = add_row_bias(matmul(kv, l.wv), l.bv);
    Tensor attn = softmax_axis(scale(matmul(q, transpose2d(k)), scl), 1);
    Tensor out = add_row_bias(matmul(matmul(attn, v), l.wo), l.bo);
    x = add(x, out);
    Tensor hidden = relu(add_row_bias(matmul(x, l.ffn_w1), l.ffn_b1));
    x = add(x, add_row_bias(matmul(hidden, l.ffn_w2), l.ffn_b2));
  }
  return x;
}

namespace {

Tensor concat_cols(const std::vector<Tensor>& parts) {
  std::vector<Tensor> t;
  t.reserve(parts.size());
  for (const auto& p : parts) t.push_back(transpose2d(p));
  return transpose2d(concat_rows(t));
}

}  // namespace

PredictHeads::PredictHeads(ParamRegistry& reg, const std::string& prefix, int query_dim,
                           int query_count, int classes, Rng& rng) {
  ref_ = reg.create(prefix + ".ref", {query_count, 3}, InitScheme::kUniformFanIn, rng);
  w_cls_ = reg.create(prefix + ".cls.w", {query_dim, classes + 1}, InitScheme::kUniformFanIn, rng);
  b_cls_ = reg.create(prefix + ".cls.b", {classes + 1}, InitScheme::kZeros, rng);
  w_ctr_ = reg.create(prefix + ".ctr.w", {query_dim, 3}, InitScheme::kUniformFanIn, rng);
  b_ctr_ = reg.create(prefix + ".ctr.b", {3}, InitScheme::kZeros, rng);
  w_size_ = reg.create(prefix + ".size.w", {query_dim, 3}, InitScheme::kUniformFanIn, rng);
  b_size_ = reg.create(prefix + ".size.b", {3}, InitScheme::kZeros, rng);
  w_yaw_ = reg.create(prefix + ".yaw.w", {query_dim, 2}, InitScheme::kUniformFanIn, rng);
  b_yaw_ = reg.create(prefix + ".yaw.b", {2}, InitScheme::kZeros, rng);
  w_vel_ = reg.create(prefix + ".vel.w", {2 * query_dim, 2}, InitScheme::kUniformFanIn, rng);
  b_vel_ = reg.create(prefix + ".vel.b", {2}, InitScheme::kZeros, rng);
}

DetectionSet PredictHeads::forward(const Tensor& now, const Tensor& prev) const {
  if (now.rank() != 2 || now.dim(0) != ref_.dim(0))
    throw std::invalid_argument("predict: decoded state count must match the query count");
  DetectionSet out;
  out.logits = add_row_bias(matmul(now, w_cls_), b_cls_);
  Tensor ctr = add(ref_, add_row_bias(matmul(now, w_ctr_), b_ctr_));
  Tensor size = softplus(add_row_bias(matmul(now, w_size_), b_size_));
  Tensor yaw = add_row_bias(matmul(now, w_yaw_), b_yaw_);
  Tensor vel = add_row_bias(matmul(concat_cols({now, prev}), w_vel_), b_vel_);
  out.boxes = concat_cols({ctr, size, yaw, vel});
  return out;
}

std::vector<double> box_target(const GtBox& b) {
  return {b.x, b.y, b.z, b.l, b.w, b.h, std::sin(b.yaw), std::cos(b.yaw), b.vx, b.vz};
}

MatchResult match_and_loss(const DetectionSet& pred, const std::vector<GtBox>& gt,
                           const HeadConfig& cfg) {
  cfg.validate();
  const int o = pred.logits.dim(0);
  const int ng = static_cast<int>(gt.size());
  if (ng > o) throw std::invalid_argument("match_and_loss: more ground-truth boxes than queries");
  if (ng > 20) throw std::invalid_argument("match_and_loss: ground-truth count too large for exact matching");
  const int nc = pred.logits.dim(1);
  if (nc != cfg.classes + 1) throw std::invalid_argument("match_and_loss: class logit width mismatch");

  Tensor logsm = log_softmax_rows(pred.logits);
  const auto& lsd = logsm.data();
  const auto& bxd = pred.boxes.data();

  // per-pair matching cost
  std::vector<double> cost(static_cast<size_t>(ng) * o, 0.0);
  std::vector<std::vector<double>> targets;
  for (int g = 0; g < ng; ++g) {
    if (gt[static_cast<size_t>(g)].cls < 0 || gt[static_cast<size_t>(g)].cls >= cfg.classes)
      throw std::invalid_argument("match_and_loss: ground-truth class out of range");
    targets.push_back(box_target(gt[static_cast<size_t>(g)]));
    for (int q = 0; q < o; ++q) {
      double c = -cfg.lambda_cls * lsd[static_cast<size_t>(q) * nc + gt[static_cast<size_t>(g)].cls];
      double l1 = 0;
      for (int j = 0; j < 10; ++j)
        l1 += std::fabs(bxd[static_cast<size_t>(q) * 10 + j] - targets.back()[static_cast<size_t>(j)]);
      cost[static_cast<size_t>(g) * o + q] = c + cfg.lambda_box * l1;
    }
  }

  // exact assignment: process queries in order, DP over the set of matched gts
  MatchResult res;
  res.assignment.assign(static_cast<size_t>(ng), -1);
  if (ng > 0) {
    const int full = (1 << ng) - 1;
    const double inf = 1e300;
    std::vector<double> dp(static_cast<size_t>(full + 1), inf);
    std::vector<int8_t> choice(static_cast<size_t>(o + 1) * (full + 1), -2);
    dp[0] = 0;
    std::vector<double> next(static_cast<size_t>(full + 1));
    for (int q = 0; q < o; ++q) {
      next = dp;  // query q left unmatched
      for (int mask = 0; mask <= full; ++mask) {
        if (dp[static_cast<size_t>(mask)] >= inf) continue;
        for (int g = 0; g < ng; ++g) {
          if (mask & (1 << g)) continue;
          const double cand = dp[static_cast<size_t>(mask)] + cost[static_cast<size_t>(g) * o + q];
          const int m2 = mask | (1 << g);
          if (cand < next[static_cast<size_t>(m2)]) {
            next[static_cast<size_t>(m2)] = cand;
            choice[static_cast<size_t>(q + 1) * (full + 1) + m2] = static_cast<int8_t>(g);
          }
        }
      }
      dp.swap(next);
    }
    // reconstruct: walk queries backwards; a query matched gt g iff it set choice
    int mask = full;
    for (int q = o; q >= 1 && mask; --q) {
      const int8_t g = choice[static_cast<size_t>(q) * (full + 1) + mask];
      if (g >= 0) {
        res.assignment[static_cast<size_t>(g)] = q - 1;
        mask &= ~(1 << g);
      }
    }
    if (mask != 0) throw std::logic_error("match_and_loss: assignment reconstruction failed");
  }

  // differentiable loss
  std::vector<int> target_cls(static_cast<size_t>(o), cfg.classes);  // no-object by default
  for (int g = 0; g < ng; ++g) target_cls[static_cast<size_t>(res.assignment[static_cast<size_t>(g)])] =
      gt[static_cast<size_t>(g)].cls;
  std::vector<double> onehot(static_cast<size_t>(o) * nc, 0.0);
  for (int q = 0; q < o; ++q) onehot[static_cast<size_t>(q) * nc + target_cls[static_cast<size_t>(q)]] = 1.0;
  Tensor cls_loss = scale(sum_all(mul(logsm, Tensor::from({o, nc}, std::move(onehot)))), -1.0 / o);
  Tensor loss = scale(cls_loss, cfg.lambda_cls);
  if (ng > 0) {
    std::vector<int> matched;
    std::vector<double> tgt;
    for (int g = 0; g < ng; ++g) {
      matched.push_back(res.assignment[static_cast<size_t>(g)]);
      tgt.insert(tgt.end(), targets[static_cast<size_t>(g)].begin(), targets[static_cast<size_t>(g)].end());
    }
    Tensor diff = sub(gather_rows(pred.boxes, matched), Tensor::from({ng, 10}, std::move(tgt)));
    Tensor box_loss = scale(sum_all(abs_elem(diff)), 1.0 / ng);
    loss = add(loss, scale(box_loss, cfg.lambda_box));
  }
  res.loss = loss;

  // metrics
  double best = 0, mean = 0;
  if (ng > 0) {
    best = 1e300;
    for (int g = 0; g < ng; ++g) {
      const int q = res.assignment[static_cast<size_t>(g)];
      double e2 = 0;
      for (int j = 0; j < 3; ++j) {
        const double d = bxd[static_cast<size_t>(q) * 10 + j] - targets[static_cast<size_t>(g)][static_cast<size_t>(j)];
        e2 += d * d;
      }
      const double e = std::sqrt(e2);
      best = std::min(best, e);
      mean += e / ng;
    }
  }
  res.best_center_err = best;
  res.mean_center_err = mean;
  int correct = 0;
  for (int q = 0; q < o; ++q) {
    int arg = 0;
    for (int j = 1; j < nc; ++j)
      if (lsd[static_cast<size_t>(q) * nc + j] > lsd[static_cast<size_t>(q) * nc + arg]) arg = j;
    if (arg == target_cls[static_cast<size_t>(q)]) ++correct;
  }
  res.cls_acc = static_cast<double>(correct) / o;
  return res;
}

}  // namespace mvacon
