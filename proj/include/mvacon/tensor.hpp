#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <string>
#include <vector>

namespace mvacon {

namespace detail {

struct Node {
  std::vector<int> shape;
  std::vector<double> val;
  std::vector<double> grad;  // allocated lazily, same length as val
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void()> backward_fn;  // reads this->grad, accumulates into parents

  void ensure_grad();
};

}  // namespace detail

/// Dense row-major tensor of 64-bit floats with reverse-mode autodiff.
/// Values are immutable once produced by an op; leaves may be edited
/// through mutable_data() (optimizer steps, finite-difference probes).
class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(std::vector<int> shape, bool requires_grad = false);
  static Tensor full(std::vector<int> shape, double value, bool requires_grad = false);
  static Tensor from(std::vector<int> shape, std::vector<double> data, bool requires_grad = false);
  static Tensor scalar(double v);

  bool defined() const { return node_ != nullptr; }
  const std::vector<int>& shape() const { return node_->shape; }
  int rank() const { return static_cast<int>(node_->shape.size()); }
  int size() const { return static_cast<int>(node_->val.size()); }
  int dim(int i) const { return node_->shape[static_cast<size_t>(i)]; }

  const std::vector<double>& data() const { return node_->val; }
  std::vector<double>& mutable_data() { return node_->val; }
  double item() const;

  bool requires_grad() const { return node_->requires_grad; }
  const std::vector<double>& grad() const;
  void zero_grad();

  /// Reverse pass from a scalar tensor; accumulates into leaf grads.
  void backward() const;

  std::shared_ptr<detail::Node> node() const { return node_; }
  static Tensor wrap(std::shared_ptr<detail::Node> n);

 private:
  std::shared_ptr<detail::Node> node_;
};

// ---- elementwise and structural ops ----

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double c);
Tensor add_scalar(const Tensor& a, double c);
Tensor relu(const Tensor& a);
Tensor softplus(const Tensor& a);
Tensor abs_elem(const Tensor& a);
Tensor sum_all(const Tensor& a);  // -> shape {1}
Tensor reshape(const Tensor& a, std::vector<int> new_shape);
Tensor transpose2d(const Tensor& a);
Tensor concat_rows(const std::vector<Tensor>& parts);
Tensor slice_rows(const Tensor& a, int r0, int r1);
Tensor slice_cols(const Tensor& a, int c0, int c1);
Tensor gather_rows(const Tensor& a, const std::vector<int>& idx);
Tensor add_row_bias(const Tensor& a, const Tensor& bias);          // [N,c] + [c]
Tensor scale_rows(const Tensor& a, const std::vector<double>& s);  // row i times s[i]

// ---- linear algebra / nn ----

Tensor matmul(const Tensor& a, const Tensor& b);
Tensor softmax_axis(const Tensor& x, int axis);
Tensor log_softmax_rows(const Tensor& x);
/// Row-wise softmax over entries with mask=true; fully-masked rows are all-zero.
Tensor masked_softmax_rows(const Tensor& x, const std::vector<uint8_t>& mask);
Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps);

/// Bilinear read of map[h,w,c] at continuous (u,v) = (col,row) pixel
/// coordinates; out-of-bounds neighbors contribute zero. Differentiable in
/// the map and in (u,v).
Tensor bilinear_sample(const Tensor& map, const Tensor& uv);
Tensor bilinear_sample(const Tensor& map, double u, double v);

/// Batched weighted deformable gather: for each of N queries, sample K
/// points at base[q,k] + offsets[q,k] from map[h,w,c] and reduce with
/// weights[q,k]. Entries with active[q*K+k]==0 are skipped entirely.
/// base is a constant [N*K*2] (u,v) table; offsets is [N, K*2]; weights
/// is [N, K]; result is [N, c].
Tensor deform_gather(const Tensor& map, const std::vector<double>& base,
                     const Tensor& offsets, const Tensor& weights,
                     const std::vector<uint8_t>& active);

/// 2D convolution over x[h,w,ci] with kernel[kh,kw,ci,co] and bias[co],
/// zero padding `pad`, stride `stride`.
Tensor conv2d(const Tensor& x, const Tensor& kernel, const Tensor& bias, int stride, int pad);

// ---- parameters ----

enum class InitScheme { kUniformFanIn, kZeros, kOnes };

struct Param {
  std::string name;
  Tensor tensor;
  InitScheme init;
};

/// Deterministic RNG; bit-identical streams for a given seed regardless of
/// the standard library's distribution implementations.
class Rng {
 public:
  explicit Rng(uint64_t seed) : state_(seed ? seed : 0x9e3779b97f4a7c15ull) {}
  uint64_t next();
  double uniform();  // [0,1)
  double uniform(double lo, double hi);
  int uniform_int(int lo, int hi);  // inclusive

 private:
  uint64_t state_;
};

class ParamRegistry {
 public:
  Tensor create(const std::string& name, std::vector<int> shape, InitScheme scheme, Rng& rng);
  const std::vector<Param>& items() const { return params_; }
  std::vector<Param>& items() { return params_; }
  void zero_grads();
  void sgd_step(double lr);
  void save(const std::string& path) const;
  void load(const std::string& path);

 private:
  std::vector<Param> params_;
};

// ---- gradient verification ----

struct GradCheckOptions {
  double h = 1e-6;
  int max_coords_per_param = -1;  // -1: every coordinate
  uint64_t sample_seed = 17;
};

/// Central-difference check of reverse-mode gradients of a scalar-valued
/// computation w.r.t. the given leaf tensors. Returns the max relative
/// error with denominator max(|analytic|, |numeric|, 1e-8).
double grad_check(const std::function<Tensor()>& f, const std::vector<Tensor>& params,
                  const GradCheckOptions& opts = {});

}  // namespace mvacon
