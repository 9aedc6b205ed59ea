#include "mvacon/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <stdexcept>
#include <unordered_set>

namespace mvacon {

namespace detail {

void Node::ensure_grad() {
  if (grad.size() != val.size()) grad.assign(val.size(), 0.0);
}

}  // namespace detail

using detail::Node;

namespace {

int shape_size(const std::vector<int>& shape) {
  int n = 1;
  for (int e : shape) {
    if (e <= 0) throw std::invalid_argument("tensor extents must be positive");
    n *= e;
  }
  return n;
}

void check_finite(const std::vector<double>& v, const char* op) {
  for (double x : v) {
    if (!std::isfinite(x)) throw std::runtime_error(std::string("non-finite value produced by ") + op);
  }
}

std::shared_ptr<Node> make_node(std::vector<int> shape, std::vector<std::shared_ptr<Node>> parents) {
  auto n = std::make_shared<Node>();
  n->shape = std::move(shape);
  n->val.resize(static_cast<size_t>(shape_size(n->shape)));
  n->parents = std::move(parents);
  for (const auto& p : n->parents) {
    if (p->requires_grad) n->requires_grad = true;
  }
  // Inference-only nodes never run a backward pass: dropping the parent
  // links lets large intermediates free as soon as they go out of scope.
  if (!n->requires_grad) n->parents.clear();
  return n;
}

void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape()) throw std::invalid_argument(std::string(op) + ": shape mismatch");
}

}  // namespace

Tensor Tensor::wrap(std::shared_ptr<Node> n) {
  Tensor t;
  t.node_ = std::move(n);
  return t;
}

Tensor Tensor::zeros(std::vector<int> shape, bool requires_grad) {
  auto n = make_node(std::move(shape), {});
  n->requires_grad = requires_grad;
  return wrap(n);
}

Tensor Tensor::full(std::vector<int> shape, double value, bool requires_grad) {
  Tensor t = zeros(std::move(shape), requires_grad);
  std::fill(t.node_->val.begin(), t.node_->val.end(), value);
  return t;
}

Tensor Tensor::from(std::vector<int> shape, std::vector<double> data, bool requires_grad) {
  Tensor t = zeros(std::move(shape), requires_grad);
  if (data.size() != t.node_->val.size()) throw std::invalid_argument("data length does not match shape");
  check_finite(data, "from");
  t.node_->val = std::move(data);
  return t;
}

Tensor Tensor::scalar(double v) { return from({1}, {v}); }

double Tensor::item() const {
  if (size() != 1) throw std::invalid_argument("item(): tensor is not scalar");
  return node_->val[0];
}

const std::vector<double>& Tensor::grad() const {
  node_->ensure_grad();
  return node_->grad;
}

void Tensor::zero_grad() {
  node_->grad.assign(node_->val.size(), 0.0);
}

void Tensor::backward() const {
  if (size() != 1) throw std::invalid_argument("backward(): root must be scalar");
  // Iterative topological order over the reachable graph.
  std::vector<Node*> order;
  std::unordered_set<Node*> visited;
  std::vector<std::pair<Node*, size_t>> stack;
  stack.emplace_back(node_.get(), 0);
  visited.insert(node_.get());
  while (!stack.empty()) {
    auto& [n, idx] = stack.back();
    if (idx < n->parents.size()) {
      Node* p = n->parents[idx++].get();
      if (p->requires_grad && !visited.count(p)) {
        visited.insert(p);
        stack.emplace_back(p, 0);
      }
    } else {
      order.push_back(n);
      stack.pop_back();
    }
  }
  for (Node* n : order) n->ensure_grad();
  node_->grad[0] += 1.0;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    if ((*it)->backward_fn) (*it)->backward_fn();
  }
}

// ---- elementwise ----

namespace {

template <typename Fwd, typename Bwd>
Tensor unary_op(const Tensor& a, const char* name, Fwd fwd, Bwd bwd) {
  auto n = make_node(a.shape(), {a.node()});
  const auto& x = a.node()->val;
  for (size_t i = 0; i < x.size(); ++i) n->val[i] = fwd(x[i]);
  check_finite(n->val, name);
  if (n->requires_grad) {
    auto pa = a.node();
    Node* raw = n.get();
    n->backward_fn = [raw, pa, bwd]() {
      pa->ensure_grad();
      for (size_t i = 0; i < raw->val.size(); ++i)
        pa->grad[i] += raw->grad[i] * bwd(pa->val[i], raw->val[i]);
    };
  }
  return Tensor::wrap(n);
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "add");
  auto n = make_node(a.shape(), {a.node(), b.node()});
  const auto& x = a.node()->val;
  const auto& y = b.node()->val;
  for (size_t i = 0; i < x.size(); ++i) n->val[i] = x[i] + y[i];
  check_finite(n->val, "add");
  if (n->requires_grad) {
    auto pa = a.node(), pb = b.node();
    Node* raw = n.get();
    n->backward_fn = [raw, pa, pb]() {
      if (pa->requires_grad) {
        pa->ensure_grad();
        for (size_t i = 0; i < raw->grad.size(); ++i) pa->grad[i] += raw->grad[i];
      }
      if (pb->requires_grad) {
        pb->ensure_grad();
        for (size_t i = 0; i < raw->grad.size(); ++i) pb->grad[i] += raw->grad[i];
      }
    };
  }
  return Tensor::wrap(n);
}

Tensor sub(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "sub");
  auto n = make_node(a.shape(), {a.node(), b.node()});
  const auto& x = a.node()->val;
  const auto& y = b.node()->val;
  for (size_t i = 0; i < x.size(); ++i) n->val[i] = x[i] - y[i];
  check_finite(n->val, "sub");
  if (n->requires_grad) {
    auto pa = a.node(), pb = b.node();
    Node* raw = n.get();
    n->backward_fn = [raw, pa, pb]() {
      if (pa->requires_grad) {
        pa->ensure_grad();
        for (size_t i = 0; i < raw->grad.size(); ++i) pa->grad[i] += raw->grad[i];
      }
      if (pb->requires_grad) {
        pb->ensure_grad();
        for (size_t i = 0; i < raw->grad.size(); ++i) pb->grad[i] -= raw->grad[i];
      }
    };
  }
  return Tensor::wrap(n);
}

Tensor mul(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "mul");
  auto n = make_node(a.shape(), {a.node(), b.node()});
  const auto& x = a.node()->val;
  const auto& y = b.node()->val;
  for (size_t i = 0; i < x.size(); ++i) n->val[i] = x[i] * y[i];
  check_finite(n->val, "mul");
  if (n->requires_grad) {
    auto pa = a.node(), pb = b.node();
    Node* raw = n.get();
    n->backward_fn = [raw, pa, pb]() {
      if (pa->requires_grad) {
        pa->ensure_grad();
        for (size_t i = 0; i < raw->grad.size(); ++i) pa->grad[i] += raw->grad[i] * pb->val[i];
      }
      if (pb->requires_grad) {
        pb->ensure_grad();
        for (size_t i = 0; i < raw->grad.size(); ++i) pb->grad[i] += raw->grad[i] * pa->val[i];
      }
    };
  }
  return Tensor::wrap(n);
}

Tensor scale(const Tensor& a, double c) {
  return unary_op(a, "scale", [c](double x) { return x * c; },
                  [c](double, double) { return c; });
}

Tensor add_scalar(const Tensor& a, double c) {
  return unary_op(a, "add_scalar", [c](double x) { return x + c; },
                  [](double, double) { return 1.0; });
}

Tensor relu(const Tensor& a) {
  return unary_op(a, "relu", [](double x) { return x > 0.0 ? x : 0.0; },
                  [](double x, double) { return x > 0.0 ? 1.0 : 0.0; });
}

Tensor softplus(const Tensor& a) {
  return unary_op(a, "softplus",
                  [](double x) { return x > 30.0 ? x : std::log1p(std::exp(x)); },
                  [](double x, double) { return 1.0 / (1.0 + std::exp(-x)); });
}

Tensor abs_elem(const Tensor& a) {
  return unary_op(a, "abs", [](double x) { return std::fabs(x); },
                  [](double x, double) { return x > 0.0 ? 1.0 : (x < 0.0 ? -1.0 : 0.0); });
}

Tensor sum_all(const Tensor& a) {
  auto n = make_node({1}, {a.node()});
  double s = 0.0;
  for (double x : a.node()->val) s += x;
  n->val[0] = s;
  check_finite(n->val, "sum_all");
  if (n->requires_grad) {
    auto pa = a.node();
    Node* raw = n.get();
    n->backward_fn = [raw, pa]() {
      pa->ensure_grad();
      for (size_t i = 0; i < pa->grad.size(); ++i) pa->grad[i] += raw->grad[0];
    };
  }
  return Tensor::wrap(n);
}

Tensor reshape(const Tensor& a, std::vector<int> new_shape) {
  if (shape_size(new_shape) != a.size()) throw std::invalid_argument("reshape: size mismatch");
  auto n = make_node(std::move(new_shape), {a.node()});
  n->val = a.node()->val;
  if (n->requires_grad) {
    auto pa = a.node();
    Node* raw = n.get();
    n->backward_fn = [raw, pa]() {
      pa->ensure_grad();
      for (size_t i = 0; i < raw->grad.size(); ++i) pa->grad[i] += raw->grad[i];
    };
  }
  return Tensor::wrap(n);
}

Tensor transpose2d(const Tensor& a) {
  if (a.rank() != 2) throw std::invalid_argument("transpose2d: rank-2 tensor required");
  const int r = a.dim(0), c = a.dim(1);
  auto n = make_node({c, r}, {a.node()});
  const auto& x = a.node()->val;
  for (int i = 0; i < r; ++i)
    for (int j = 0; j < c; ++j) n->val[static_cast<size_t>(j) * r + i] = x[static_cast<size_t>(i) * c + j];
  if (n->requires_grad) {
    auto pa = a.node();
    Node* raw = n.get();
    n->backward_fn = [raw, pa, r, c]() {
      pa->ensure_grad();
      for (int i = 0; i < r; ++i)
        for (int j = 0; j < c; ++j)
          pa->grad[static_cast<size_t>(i) * c + j] += raw->grad[static_cast<size_t>(j) * r + i];
    };
  }
  return Tensor::wrap(n);
}

Tensor concat_rows(const std::vector<Tensor>& parts) {
  if (parts.empty()) throw std::invalid_argument("concat_rows: empty input");
  const int cols = parts[0].rank() == 2 ? parts[0].dim(1) : -1;
  if (cols < 0) throw std::invalid_argument("concat_rows: rank-2 tensors required");
  int rows = 0;
  std::vector<std::shared_ptr<Node>> ps;
  for (const auto& p : parts) {
    if (p.rank() != 2 || p.dim(1) != cols) throw std::invalid_argument("concat_rows: width mismatch");
    rows += p.dim(0);
    ps.push_back(p.node());
  }
  auto n = make_node({rows, cols}, std::move(ps));
  size_t off = 0;
  for (const auto& p : parts) {
    std::copy(p.data().begin(), p.data().end(), n->val.begin() + static_cast<long>(off));
    off += p.data().size();
  }
  if (n->requires_grad) {
    Node* raw = n.get();
    n->backward_fn = [raw]() {
      size_t off2 = 0;
      for (auto& p : raw->parents) {
        if (p->requires_grad) {
          p->ensure_grad();
          for (size_t i = 0; i < p->val.size(); ++i) p->grad[i] += raw->grad[off2 + i];
        }
        off2 += p->val.size();
      }
    };
  }
  return Tensor::wrap(n);
}

Tensor slice_rows(const Tensor& a, int r0, int r1) {
  if (a.rank() != 2 || r0 < 0 || r1 > a.dim(0) || r0 >= r1) throw std::invalid_argument("slice_rows: bad range");
  const int c = a.dim(1);
  auto n = make_node({r1 - r0, c}, {a.node()});
  std::copy(a.data().begin() + static_cast<long>(r0) * c, a.data().begin() + static_cast<long>(r1) * c,
            n->val.begin());
  if (n->requires_grad) {
    auto pa = a.node();
    Node* raw = n.get();
    n->backward_fn = [raw, pa, r0, c]() {
      pa->ensure_grad();
      for (size_t i = 0; i < raw->grad.size(); ++i) pa->grad[static_cast<size_t>(r0) * c + i] += raw->grad[i];
    };
  }
  return Tensor::wrap(n);
}

Tensor slice_cols(const Tensor& a, int c0, int c1) {
  if (a.rank() != 2 || c0 < 0 || c1 > a.dim(1) || c0 >= c1) throw std::invalid_argument("slice_cols: bad range");
  const int r = a.dim(0), c = a.dim(1), w = c1 - c0;
  auto n = make_node({r, w}, {a.node()});
  for (int i = 0; i < r; ++i)
    for (int j = 0; j < w; ++j)
      n->val[static_cast<size_t>(i) * w + j] = a.data()[static_cast<size_t>(i) * c + c0 + j];
  if (n->requires_grad) {
    auto pa = a.node();
    Node* raw = n.get();
    n->backward_fn = [raw, pa, r, c, c0, w]() {
      pa->ensure_grad();
      for (int i = 0; i < r; ++i)
        for (int j = 0; j < w; ++j)
          pa->grad[static_cast<size_t>(i) * c + c0 + j] += raw->grad[static_cast<size_t>(i) * w + j];
    };
  }
  return Tensor::wrap(n);
}

Tensor gather_rows(const Tensor& a, const std::vector<int>& idx) {
  if (a.rank() != 2) throw std::invalid_argument("gather_rows: rank-2 tensor required");
  const int c = a.dim(1);
  for (int i : idx)
    if (i < 0 || i >= a.dim(0)) throw std::invalid_argument("gather_rows: index out of range");
  auto n = make_node({static_cast<int>(idx.size()), c}, {a.node()});
  for (size_t k = 0; k < idx.size(); ++k)
    std::copy(a.data().begin() + static_cast<long>(idx[k]) * c,
              a.data().begin() + static_cast<long>(idx[k] + 1) * c, n->val.begin() + static_cast<long>(k) * c);
  if (n->requires_grad) {
    auto pa = a.node();
    Node* raw = n.get();
    auto ids = idx;
    n->backward_fn = [raw, pa, ids, c]() {
      pa->ensure_grad();
      for (size_t k = 0; k < ids.size(); ++k)
        for (int j = 0; j < c; ++j)
          pa->grad[static_cast<size_t>(ids[k]) * c + j] += raw->grad[k * static_cast<size_t>(c) + j];
    };
  }
  return Tensor::wrap(n);
}

Tensor add_row_bias(const Tensor& a, const Tensor& bias) {
  if (a.rank() != 2 || bias.rank() != 1 || bias.dim(0) != a.dim(1))
    throw std::invalid_argument("add_row_bias: shape mismatch");
  const int r = a.dim(0), c = a.dim(1);
  auto n = make_node({r, c}, {a.node(), bias.node()});
  for (int i = 0; i < r; ++i)
    for (int j = 0; j < c; ++j)
      n->val[static_cast<size_t>(i) * c + j] = a.data()[static_cast<size_t>(i) * c + j] + bias.data()[static_cast<size_t>(j)];
  check_finite(n->val, "add_row_bias");
  if (n->requires_grad) {
    auto pa = a.node(), pb = bias.node();
    Node* raw = n.get();
    n->backward_fn = [raw, pa, pb, r, c]() {
      if (pa->requires_grad) {
        pa->ensure_grad();
        for (size_t i = 0; i < raw->grad.size(); ++i) pa->grad[i] += raw->grad[i];
      }
      if (pb->requires_grad) {
        pb->ensure_grad();
        for (int i = 0; i < r; ++i)
          for (int j = 0; j < c; ++j) pb->grad[static_cast<size_t>(j)] += raw->grad[static_cast<size_t>(i) * c + j];
      }
    };
  }
  return Tensor::wrap(n);
}

Tensor scale_rows(const Tensor& a, const std::vector<double>& s) {
  if (a.rank() != 2 || static_cast<int>(s.size()) != a.dim(0))
    throw std::invalid_argument("scale_rows: shape mismatch");
  const int r = a.dim(0), c = a.dim(1);
  auto n = make_node({r, c}, {a.node()});
  for (int i = 0; i < r; ++i)
    for (int j = 0; j < c; ++j)
      n->val[static_cast<size_t>(i) * c + j] = a.data()[static_cast<size_t>(i) * c + j] * s[static_cast<size_t>(i)];
  check_finite(n->val, "scale_rows");
  if (n->requires_grad) {
    auto pa = a.node();
    Node* raw = n.get();
    auto sv = s;
    n->backward_fn = [raw, pa, sv, r, c]() {
      pa->ensure_grad();
      for (int i = 0; i < r; ++i)
        for (int j = 0; j < c; ++j)
          pa->grad[static_cast<size_t>(i) * c + j] += raw->grad[static_cast<size_t>(i) * c + j] * sv[static_cast<size_t>(i)];
    };
  }
  return Tensor::wrap(n);
}

// ---- matmul ----

namespace {

// C[m,n] += A[m,k] * B[k,n], cache-friendly i-k-j ordering.
void gemm_acc(const double* a, const double* b, double* c, int m, int k, int n) {
  for (int i = 0; i < m; ++i) {
    const double* arow = a + static_cast<size_t>(i) * k;
    double* crow = c + static_cast<size_t>(i) * n;
    for (int p = 0; p < k; ++p) {
      const double av = arow[p];
      if (av == 0.0) continue;
      const double* brow = b + static_cast<size_t>(p) * n;
      for (int j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

}  // namespace

Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.rank() != 2 || b.rank() != 2) throw std::invalid_argument("matmul: rank-2 tensors required");
  if (a.dim(1) != b.dim(0)) throw std::invalid_argument("matmul: inner extents disagree");
  const int m = a.dim(0), k = a.dim(1), nn = b.dim(1);
  auto n = make_node({m, nn}, {a.node(), b.node()});
  gemm_acc(a.data().data(), b.data().data(), n->val.data(), m, k, nn);
  check_finite(n->val, "matmul");
  if (n->requires_grad) {
    auto pa = a.node(), pb = b.node();
    Node* raw = n.get();
    n->backward_fn = [raw, pa, pb, m, k, nn]() {
      if (pa->requires_grad) {
        pa->ensure_grad();
        // dA = dY * B^T
        for (int i = 0; i < m; ++i)
          for (int p = 0; p < k; ++p) {
            double s = 0.0;
            const double* gy = raw->grad.data() + static_cast<size_t>(i) * nn;
            const double* brow = pb->val.data() + static_cast<size_t>(p) * nn;
            for (int j = 0; j < nn; ++j) s += gy[j] * brow[j];
            pa->grad[static_cast<size_t>(i) * k + p] += s;
          }
      }
      if (pb->requires_grad) {
        pb->ensure_grad();
        // dB = A^T * dY
        for (int i = 0; i < m; ++i) {
          const double* arow = pa->val.data() + static_cast<size_t>(i) * k;
          const double* gy = raw->grad.data() + static_cast<size_t>(i) * nn;
          for (int p = 0; p < k; ++p) {
            const double av = arow[p];
            if (av == 0.0) continue;
            double* gb = pb->grad.data() + static_cast<size_t>(p) * nn;
            for (int j = 0; j < nn; ++j) gb[j] += av * gy[j];
          }
        }
      }
    };
  }
  return Tensor::wrap(n);
}

// ---- softmax / layer norm ----

Tensor softmax_axis(const Tensor& x, int axis) {
  if (axis < 0 || axis >= x.rank()) throw std::invalid_argument("softmax_axis: axis out of range");
  const auto& shape = x.shape();
  const int len = shape[static_cast<size_t>(axis)];
  if (len <= 0) throw std::invalid_argument("softmax_axis: empty axis");
  int inner = 1, outer = 1;
  for (int i = axis + 1; i < x.rank(); ++i) inner *= shape[static_cast<size_t>(i)];
  for (int i = 0; i < axis; ++i) outer *= shape[static_cast<size_t>(i)];

  auto n = make_node(shape, {x.node()});
  const auto& xv = x.data();
  for (int o = 0; o < outer; ++o)
    for (int in = 0; in < inner; ++in) {
      const size_t base = static_cast<size_t>(o) * len * inner + in;
      double mx = -1e300;
      for (int t = 0; t < len; ++t) mx = std::max(mx, xv[base + static_cast<size_t>(t) * inner]);
      double z = 0.0;
      for (int t = 0; t < len; ++t) {
        double e = std::exp(xv[base + static_cast<size_t>(t) * inner] - mx);
        n->val[base + static_cast<size_t>(t) * inner] = e;
        z += e;
      }
      for (int t = 0; t < len; ++t) n->val[base + static_cast<size_t>(t) * inner] /= z;
    }
  check_finite(n->val, "softmax_axis");
  if (n->requires_grad) {
    auto pa = x.node();
    Node* raw = n.get();
    n->backward_fn = [raw, pa, outer, inner, len]() {
      pa->ensure_grad();
      for (int o = 0; o < outer; ++o)
        for (int in = 0; in < inner; ++in) {
          const size_t base = static_cast<size_t>(o) * len * inner + in;
          double dot = 0.0;
          for (int t = 0; t < len; ++t) {
            const size_t i = base + static_cast<size_t>(t) * inner;
            dot += raw->grad[i] * raw->val[i];
          }
          for (int t = 0; t < len; ++t) {
            const size_t i = base + static_cast<size_t>(t) * inner;
            pa->grad[i] += raw->val[i] * (raw->grad[i] - dot);
          }
        }
    };
  }
  return Tensor::wrap(n);
}

Tensor log_softmax_rows(const Tensor& x) {
  if (x.rank() != 2) throw std::invalid_argument("log_softmax_rows: rank-2 tensor required");
  const int r = x.dim(0), c = x.dim(1);
  auto n = make_node({r, c}, {x.node()});
  const auto& xv = x.data();
  for (int i = 0; i < r; ++i) {
    const size_t base = static_cast<size_t>(i) * c;
    double mx = -1e300;
    for (int j = 0; j < c; ++j) mx = std::max(mx, xv[base + j]);
    double z = 0.0;
    for (int j = 0; j < c; ++j) z += std::exp(xv[base + j] - mx);
    const double lz = std::log(z) + mx;
    for (int j = 0; j < c; ++j) n->val[base + j] = xv[base + j] - lz;
  }
  check_finite(n->val, "log_softmax_rows");
  if (n->requires_grad) {
    auto pa = x.node();
    Node* raw = n.get();
    n->backward_fn = [raw, pa, r, c]() {
      pa->ensure_grad();
      for (int i = 0; i < r; ++i) {
        const size_t base = static_cast<size_t>(i) * c;
        double gsum = 0.0;
        for (int j = 0; j < c; ++j) gsum += raw->grad[base + j];
        for (int j = 0; j < c; ++j)
          pa->grad[base + j] += raw->grad[base + j] - std::exp(raw->val[base + j]) * gsum;
      }
    };
  }
  return Tensor::wrap(n);
}

Tensor masked_softmax_rows(const Tensor& x, const std::vector<uint8_t>& mask) {
  if (x.rank() != 2) throw std::invalid_argument("masked_softmax_rows: rank-2 tensor required");
  const int r = x.dim(0), c = x.dim(1);
  if (static_cast<int>(mask.size()) != r * c) throw std::invalid_argument("masked_softmax_rows: mask size mismatch");
  auto n = make_node({r, c}, {x.node()});
  const auto& xv = x.data();
  for (int i = 0; i < r; ++i) {
    const size_t base = static_cast<size_t>(i) * c;
    double mx = -1e300;
    bool any = false;
    for (int j = 0; j < c; ++j)
      if (mask[base + j]) {
        any = true;
        mx = std::max(mx, xv[base + j]);
      }
    if (!any) {
      for (int j = 0; j < c; ++j) n->val[base + j] = 0.0;
      continue;
    }
    double z = 0.0;
    for (int j = 0; j < c; ++j) {
      if (mask[base + j]) {
        n->val[base + j] = std::exp(xv[base + j] - mx);
        z += n->val[base + j];
      } else {
        n->val[base + j] = 0.0;
      }
    }
    for (int j = 0; j < c; ++j) n->val[base + j] /= z;
  }
  check_finite(n->val, "masked_softmax_rows");
  if (n->requires_grad) {
    auto pa = x.node();
    Node* raw = n.get();
    auto m = mask;
    n->backward_fn = [raw, pa, m, r, c]() {
      pa->ensure_grad();
      for (int i = 0; i < r; ++i) {
        const size_t base = static_cast<size_t>(i) * c;
        double dot = 0.0;
        for (int j = 0; j < c; ++j) dot += raw->grad[base + j] * raw->val[base + j];
        for (int j = 0; j < c; ++j)
          if (m[base + j]) pa->grad[base + j] += raw->val[base + j] * (raw->grad[base + j] - dot);
      }
    };
  }
  return Tensor::wrap(n);
}

Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps) {
  if (eps <= 0.0) throw std::invalid_argument("layer_norm: eps must be positive");
  if (x.rank() < 1) throw std::invalid_argument("layer_norm: rank >= 1 required");
  const int c = x.shape().back();
  if (c == 0 || gamma.rank() != 1 || gamma.dim(0) != c || beta.rank() != 1 || beta.dim(0) != c)
    throw std::invalid_argument("layer_norm: channel extent mismatch");
  const int rows = x.size() / c;
  auto n = make_node(x.shape(), {x.node(), gamma.node(), beta.node()});
  const auto& xv = x.data();
  std::vector<double> inv_std(static_cast<size_t>(rows)), means(static_cast<size_t>(rows));
  for (int i = 0; i < rows; ++i) {
    const size_t base = static_cast<size_t>(i) * c;
    double mu = 0.0;
    for (int j = 0; j < c; ++j) mu += xv[base + j];
    mu /= c;
    double var = 0.0;
    for (int j = 0; j < c; ++j) {
      const double d = xv[base + j] - mu;
      var += d * d;
    }
    var /= c;
    const double is = 1.0 / std::sqrt(var + eps);
    means[static_cast<size_t>(i)] = mu;
    inv_std[static_cast<size_t>(i)] = is;
    for (int j = 0; j < c; ++j)
      n->val[base + j] = gamma.data()[static_cast<size_t>(j)] * (xv[base + j] - mu) * is + beta.data()[static_cast<size_t>(j)];
  }
  check_finite(n->val, "layer_norm");
  if (n->requires_grad) {
    auto px = x.node(), pg = gamma.node(), pb = beta.node();
    Node* raw = n.get();
    n->backward_fn = [raw, px, pg, pb, rows, c, means, inv_std]() {
      for (int i = 0; i < rows; ++i) {
        const size_t base = static_cast<size_t>(i) * c;
        const double mu = means[static_cast<size_t>(i)], is = inv_std[static_cast<size_t>(i)];
        // dgamma, dbeta
        if (pg->requires_grad || pb->requires_grad) {
          if (pg->requires_grad) pg->ensure_grad();
          if (pb->requires_grad) pb->ensure_grad();
          for (int j = 0; j < c; ++j) {
            const double xhat = (px->val[base + j] - mu) * is;
            if (pg->requires_grad) pg->grad[static_cast<size_t>(j)] += raw->grad[base + j] * xhat;
            if (pb->requires_grad) pb->grad[static_cast<size_t>(j)] += raw->grad[base + j];
          }
        }
        if (px->requires_grad) {
          px->ensure_grad();
          double m1 = 0.0, m2 = 0.0;  // mean(dxhat), mean(dxhat * xhat)
          for (int j = 0; j < c; ++j) {
            const double xhat = (px->val[base + j] - mu) * is;
            const double dxhat = raw->grad[base + j] * pg->val[static_cast<size_t>(j)];
            m1 += dxhat;
            m2 += dxhat * xhat;
          }
          m1 /= c;
          m2 /= c;
          for (int j = 0; j < c; ++j) {
            const double xhat = (px->val[base + j] - mu) * is;
            const double dxhat = raw->grad[base + j] * pg->val[static_cast<size_t>(j)];
            px->grad[base + j] += is * (dxhat - m1 - xhat * m2);
          }
        }
      }
    };
  }
  return Tensor::wrap(n);
}

// ---- sampling ----

namespace {

struct BilinWeights {
  int x0, y0, x1, y1;
  double w00, w01, w10, w11;  // (y,x) order: w[yi][xi]
  double fx, fy;
};

BilinWeights bilin_weights(double u, double v) {
  BilinWeights b;
  const double xf = std::floor(u), yf = std::floor(v);
  b.x0 = static_cast<int>(xf);
  b.y0 = static_cast<int>(yf);
  b.x1 = b.x0 + 1;
  b.y1 = b.y0 + 1;
  b.fx = u - xf;
  b.fy = v - yf;
  b.w00 = (1.0 - b.fy) * (1.0 - b.fx);
  b.w01 = (1.0 - b.fy) * b.fx;
  b.w10 = b.fy * (1.0 - b.fx);
  b.w11 = b.fy * b.fx;
  return b;
}

inline bool in_bounds(int y, int x, int h, int w) { return y >= 0 && y < h && x >= 0 && x < w; }

}  // namespace

Tensor bilinear_sample(const Tensor& map, const Tensor& uv) {
  if (map.rank() != 3) throw std::invalid_argument("bilinear_sample: map must be [h,w,c]");
  if (uv.size() != 2) throw std::invalid_argument("bilinear_sample: uv must have 2 entries");
  const int h = map.dim(0), w = map.dim(1), c = map.dim(2);
  auto n = make_node({c}, {map.node(), uv.node()});
  const double u = uv.data()[0], v = uv.data()[1];
  const BilinWeights b = bilin_weights(u, v);
  auto pix = [&](int y, int x) -> const double* {
    return in_bounds(y, x, h, w) ? map.data().data() + (static_cast<size_t>(y) * w + x) * c : nullptr;
  };
  const double* p00 = pix(b.y0, b.x0);
  const double* p01 = pix(b.y0, b.x1);
  const double* p10 = pix(b.y1, b.x0);
  const double* p11 = pix(b.y1, b.x1);
  for (int j = 0; j < c; ++j) {
    double s = 0.0;
    if (p00) s += b.w00 * p00[j];
    if (p01) s += b.w01 * p01[j];
    if (p10) s += b.w10 * p10[j];
    if (p11) s += b.w11 * p11[j];
    n->val[static_cast<size_t>(j)] = s;
  }
  check_finite(n->val, "bilinear_sample");
  if (n->requires_grad) {
    auto pm = map.node(), puv = uv.node();
    Node* raw = n.get();
    n->backward_fn = [raw, pm, puv, b, h, w, c]() {
      auto gpix = [&](int y, int x) -> double* {
        return in_bounds(y, x, h, w) ? pm->grad.data() + (static_cast<size_t>(y) * w + x) * c : nullptr;
      };
      auto vpix = [&](int y, int x, int j) -> double {
        return in_bounds(y, x, h, w) ? pm->val[(static_cast<size_t>(y) * w + x) * c + j] : 0.0;
      };
      if (pm->requires_grad) {
        pm->ensure_grad();
        double* g00 = gpix(b.y0, b.x0);
        double* g01 = gpix(b.y0, b.x1);
        double* g10 = gpix(b.y1, b.x0);
        double* g11 = gpix(b.y1, b.x1);
        for (int j = 0; j < c; ++j) {
          const double g = raw->grad[static_cast<size_t>(j)];
          if (g00) g00[j] += b.w00 * g;
          if (g01) g01[j] += b.w01 * g;
          if (g10) g10[j] += b.w10 * g;
          if (g11) g11[j] += b.w11 * g;
        }
      }
      if (puv->requires_grad) {
        puv->ensure_grad();
        double du = 0.0, dv = 0.0;
        for (int j = 0; j < c; ++j) {
          const double g = raw->grad[static_cast<size_t>(j)];
          const double v00 = vpix(b.y0, b.x0, j), v01 = vpix(b.y0, b.x1, j);
          const double v10 = vpix(b.y1, b.x0, j), v11 = vpix(b.y1, b.x1, j);
          du += g * ((1.0 - b.fy) * (v01 - v00) + b.fy * (v11 - v10));
          dv += g * ((1.0 - b.fx) * (v10 - v00) + b.fx * (v11 - v01));
        }
        puv->grad[0] += du;
        puv->grad[1] += dv;
      }
    };
  }
  return Tensor::wrap(n);
}

Tensor bilinear_sample(const Tensor& map, double u, double v) {
  return bilinear_sample(map, Tensor::from({2}, {u, v}));
}

Tensor deform_gather(const Tensor& map, const std::vector<double>& base, const Tensor& offsets,
                     const Tensor& weights, const std::vector<uint8_t>& active) {
  if (map.rank() != 3) throw std::invalid_argument("deform_gather: map must be [h,w,c]");
  if (offsets.rank() != 2 || weights.rank() != 2) throw std::invalid_argument("deform_gather: rank-2 offsets/weights required");
  const int nq = weights.dim(0), kpts = weights.dim(1);
  if (offsets.dim(0) != nq || offsets.dim(1) != kpts * 2)
    throw std::invalid_argument("deform_gather: offsets shape mismatch");
  if (static_cast<int>(base.size()) != nq * kpts * 2 || static_cast<int>(active.size()) != nq * kpts)
    throw std::invalid_argument("deform_gather: base/active size mismatch");
  const int h = map.dim(0), w = map.dim(1), c = map.dim(2);
  auto n = make_node({nq, c}, {map.node(), offsets.node(), weights.node()});
  const double* mv = map.data().data();
  for (int q = 0; q < nq; ++q) {
    double* out = n->val.data() + static_cast<size_t>(q) * c;
    for (int k = 0; k < kpts; ++k) {
      const size_t ak = static_cast<size_t>(q) * kpts + k;
      if (!active[ak]) continue;
      const double u = base[ak * 2] + offsets.data()[static_cast<size_t>(q) * kpts * 2 + 2 * k];
      const double v = base[ak * 2 + 1] + offsets.data()[static_cast<size_t>(q) * kpts * 2 + 2 * k + 1];
      const double wt = weights.data()[ak];
      const BilinWeights b = bilin_weights(u, v);
      for (int j = 0; j < c; ++j) {
        double s = 0.0;
        if (in_bounds(b.y0, b.x0, h, w)) s += b.w00 * mv[(static_cast<size_t>(b.y0) * w + b.x0) * c + j];
        if (in_bounds(b.y0, b.x1, h, w)) s += b.w01 * mv[(static_cast<size_t>(b.y0) * w + b.x1) * c + j];
        if (in_bounds(b.y1, b.x0, h, w)) s += b.w10 * mv[(static_cast<size_t>(b.y1) * w + b.x0) * c + j];
        if (in_bounds(b.y1, b.x1, h, w)) s += b.w11 * mv[(static_cast<size_t>(b.y1) * w + b.x1) * c + j];
        out[j] += wt * s;
      }
    }
  }
  check_finite(n->val, "deform_gather");
  if (n->requires_grad) {
    auto pm = map.node(), po = offsets.node(), pw = weights.node();
    Node* raw = n.get();
    auto bs = base;
    auto act = active;
    n->backward_fn = [raw, pm, po, pw, bs, act, nq, kpts, h, w, c]() {
      if (pm->requires_grad) pm->ensure_grad();
      if (po->requires_grad) po->ensure_grad();
      if (pw->requires_grad) pw->ensure_grad();
      for (int q = 0; q < nq; ++q) {
        const double* gout = raw->grad.data() + static_cast<size_t>(q) * c;
        for (int k = 0; k < kpts; ++k) {
          const size_t ak = static_cast<size_t>(q) * kpts + k;
          if (!act[ak]) continue;
          const double u = bs[ak * 2] + po->val[static_cast<size_t>(q) * kpts * 2 + 2 * k];
          const double v = bs[ak * 2 + 1] + po->val[static_cast<size_t>(q) * kpts * 2 + 2 * k + 1];
          const double wt = pw->val[ak];
          const BilinWeights b = bilin_weights(u, v);
          auto vpix = [&](int y, int x, int j) -> double {
            return in_bounds(y, x, h, w) ? pm->val[(static_cast<size_t>(y) * w + x) * c + j] : 0.0;
          };
          double sdot = 0.0, du = 0.0, dv = 0.0;
          for (int j = 0; j < c; ++j) {
            const double g = gout[j];
            const double v00 = vpix(b.y0, b.x0, j), v01 = vpix(b.y0, b.x1, j);
            const double v10 = vpix(b.y1, b.x0, j), v11 = vpix(b.y1, b.x1, j);
            const double sample = b.w00 * v00 + b.w01 * v01 + b.w10 * v10 + b.w11 * v11;
            sdot += g * sample;
            du += g * ((1.0 - b.fy) * (v01 - v00) + b.fy * (v11 - v10));
            dv += g * ((1.0 - b.fx) * (v10 - v00) + b.fx * (v11 - v01));
            if (pm->requires_grad) {
              const double gw = wt * g;
              if (in_bounds(b.y0, b.x0, h, w)) pm->grad[(static_cast<size_t>(b.y0) * w + b.x0) * c + j] += b.w00 * gw;
              if (in_bounds(b.y0, b.x1, h, w)) pm->grad[(static_cast<size_t>(b.y0) * w + b.x1) * c + j] += b.w01 * gw;
              if (in_bounds(b.y1, b.x0, h, w)) pm->grad[(static_cast<size_t>(b.y1) * w + b.x0) * c + j] += b.w10 * gw;
              if (in_bounds(b.y1, b.x1, h, w)) pm->grad[(static_cast<size_t>(b.y1) * w + b.x1) * c + j] += b.w11 * gw;
            }
          }
          if (pw->requires_grad) pw->grad[ak] += sdot;
          if (po->requires_grad) {
            po->grad[static_cast<size_t>(q) * kpts * 2 + 2 * k] += wt * du;
            po->grad[static_cast<size_t>(q) * kpts * 2 + 2 * k + 1] += wt * dv;
          }
        }
      }
    };
  }
  return Tensor::wrap(n);
}

// ---- convolution ----

Tensor conv2d(const Tensor& x, const Tensor& kernel, const Tensor& bias, int stride, int pad) {
  if (x.rank() != 3 || kernel.rank() != 4) throw std::invalid_argument("conv2d: x[h,w,ci], kernel[kh,kw,ci,co] required");
  const int h = x.dim(0), w = x.dim(1), ci = x.dim(2);
  const int kh = kernel.dim(0), kw = kernel.dim(1), co = kernel.dim(3);
  if (kernel.dim(2) != ci) throw std::invalid_argument("conv2d: input channel mismatch");
  if (bias.rank() != 1 || bias.dim(0) != co) throw std::invalid_argument("conv2d: bias shape mismatch");
  if (stride < 1 || pad < 0) throw std::invalid_argument("conv2d: bad stride/pad");
  const int oh = (h + 2 * pad - kh) / stride + 1;
  const int ow = (w + 2 * pad - kw) / stride + 1;
  if (oh < 1 || ow < 1) throw std::invalid_argument("conv2d: kernel larger than padded input");
  auto n = make_node({oh, ow, co}, {x.node(), kernel.node(), bias.node()});
  const double* xv = x.data().data();
  const double* kv = kernel.data().data();
  for (int oy = 0; oy < oh; ++oy)
    for (int ox = 0; ox < ow; ++ox) {
      double* out = n->val.data() + (static_cast<size_t>(oy) * ow + ox) * co;
      for (int j = 0; j < co; ++j) out[j] = bias.data()[static_cast<size_t>(j)];
      for (int ky = 0; ky < kh; ++ky) {
        const int iy = oy * stride - pad + ky;
        if (iy < 0 || iy >= h) continue;
        for (int kx = 0; kx < kw; ++kx) {
          const int ix = ox * stride - pad + kx;
          if (ix < 0 || ix >= w) continue;
          const double* xin = xv + (static_cast<size_t>(iy) * w + ix) * ci;
          const double* kin = kv + ((static_cast<size_t>(ky) * kw + kx) * ci) * co;
          for (int ic = 0; ic < ci; ++ic) {
            const double xval = xin[ic];
            if (xval == 0.0) continue;
            const double* krow = kin + static_cast<size_t>(ic) * co;
            for (int j = 0; j < co; ++j) out[j] += xval * krow[j];
          }
        }
      }
    }
  check_finite(n->val, "conv2d");
  if (n->requires_grad) {
    auto px = x.node(), pk = kernel.node(), pb = bias.node();
    Node* raw = n.get();
    n->backward_fn = [raw, px, pk, pb, h, w, ci, kh, kw, co, oh, ow, stride, pad]() {
      if (px->requires_grad) px->ensure_grad();
      if (pk->requires_grad) pk->ensure_grad();
      if (pb->requires_grad) pb->ensure_grad();
      for (int oy = 0; oy < oh; ++oy)
        for (int ox = 0; ox < ow; ++ox) {
          const double* g = raw->grad.data() + (static_cast<size_t>(oy) * ow + ox) * co;
          if (pb->requires_grad)
            for (int j = 0; j < co; ++j) pb->grad[static_cast<size_t>(j)] += g[j];
          for (int ky = 0; ky < kh; ++ky) {
            const int iy = oy * stride - pad + ky;
            if (iy < 0 || iy >= h) continue;
            for (int kx = 0; kx < kw; ++kx) {
              const int ix = ox * stride - pad + kx;
              if (ix < 0 || ix >= w) continue;
              const size_t xoff = (static_cast<size_t>(iy) * w + ix) * ci;
              const size_t koff = (static_cast<size_t>(ky) * kw + kx) * ci * co;
              for (int ic = 0; ic < ci; ++ic) {
                double gx = 0.0;
                const double xval = px->val[xoff + ic];
                for (int j = 0; j < co; ++j) {
                  const double kval = pk->val[koff + static_cast<size_t>(ic) * co + j];
                  gx += g[j] * kval;
                  if (pk->requires_grad) pk->grad[koff + static_cast<size_t>(ic) * co + j] += g[j] * xval;
                }
                if (px->requires_grad) px->grad[xoff + ic] += gx;
              }
            }
          }
        }
    };
  }
  return Tensor::wrap(n);
}

// ---- rng / params ----

uint64_t Rng::next() {
  // splitmix64
  state_ += 0x9e3779b97f4a7c15ull;
  uint64_t z = state_;
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
  return z ^ (z >> 31);
}

double Rng::uniform() { return static_cast<double>(next() >> 11) * 0x1.0p-53; }

double Rng::uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

int Rng::uniform_int(int lo, int hi) {
  return lo + static_cast<int>(next() % static_cast<uint64_t>(hi - lo + 1));
}

Tensor ParamRegistry::create(const std::string& name, std::vector<int> shape, InitScheme scheme, Rng& rng) {
  for (const auto& p : params_)
    if (p.name == name) throw std::invalid_argument("duplicate parameter name: " + name);
  Tensor t = Tensor::zeros(std::move(shape), true);
  auto& d = t.mutable_data();
  switch (scheme) {
    case InitScheme::kZeros:
      break;
    case InitScheme::kOnes:
      std::fill(d.begin(), d.end(), 1.0);
      break;
    case InitScheme::kUniformFanIn: {
      const int fan_in = t.size() / t.shape().back();
      const double bound = 1.0 / std::sqrt(static_cast<double>(std::max(1, fan_in)));
      for (auto& x : d) x = rng.uniform(-bound, bound);
      break;
    }
  }
  params_.push_back({name, t, scheme});
  return t;
}

void ParamRegistry::zero_grads() {
  for (auto& p : params_) p.tensor.zero_grad();
}

void ParamRegistry::sgd_step(double lr) {
  for (auto& p : params_) {
    auto& d = p.tensor.mutable_data();
    const auto& g = p.tensor.grad();
    for (size_t i = 0; i < d.size(); ++i) d[i] -= lr * g[i];
  }
}

void ParamRegistry::save(const std::string& path) const {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot open checkpoint for writing: " + path);
  const char magic[8] = {'M', 'V', 'A', 'C', 'K', 'P', 'T', '1'};
  f.write(magic, 8);
  uint64_t count = params_.size();
  f.write(reinterpret_cast<const char*>(&count), 8);
  for (const auto& p : params_) {
    uint64_t nlen = p.name.size();
    f.write(reinterpret_cast<const char*>(&nlen), 8);
    f.write(p.name.data(), static_cast<long>(nlen));
    uint64_t rank = p.tensor.shape().size();
    f.write(reinterpret_cast<const char*>(&rank), 8);
    for (int e : p.tensor.shape()) {
      uint64_t ee = static_cast<uint64_t>(e);
      f.write(reinterpret_cast<const char*>(&ee), 8);
    }
    f.write(reinterpret_cast<const char*>(p.tensor.data().data()),
            static_cast<long>(p.tensor.data().size() * sizeof(double)));
  }
}

void ParamRegistry::load(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot open checkpoint: " + path);
  char magic[8];
  f.read(magic, 8);
  if (std::memcmp(magic, "MVACKPT1", 8) != 0) throw std::runtime_error("bad checkpoint magic");
  uint64_t count = 0;
  f.read(reinterpret_cast<char*>(&count), 8);
  if (count != params_.size()) throw std::runtime_error("checkpoint parameter count mismatch");
  for (auto& p : params_) {
    uint64_t nlen = 0;
    f.read(reinterpret_cast<char*>(&nlen), 8);
    std::string name(nlen, '\0');
    f.read(name.data(), static_cast<long>(nlen));
    if (name != p.name) throw std::runtime_error("checkpoint parameter order mismatch at " + name);
    uint64_t rank = 0;
    f.read(reinterpret_cast<char*>(&rank), 8);
    if (rank != p.tensor.shape().size()) throw std::runtime_error("checkpoint rank mismatch at " + name);
    for (int e : p.tensor.shape()) {
      uint64_t ee = 0;
      f.read(reinterpret_cast<char*>(&ee), 8);
      if (ee != static_cast<uint64_t>(e)) throw std::runtime_error("checkpoint shape mismatch at " + name);
    }
    f.read(reinterpret_cast<char*>(p.tensor.mutable_data().data()),
           static_cast<long>(p.tensor.data().size() * sizeof(double)));
  }
  if (!f) throw std::runtime_error("truncated checkpoint: " + path);
}

// ---- gradient verification ----

double grad_check(const std::function<Tensor()>& f, const std::vector<Tensor>& params,
                  const GradCheckOptions& opts) {
  if (opts.h <= 0.0) throw std::invalid_argument("grad_check: h must be positive");
  for (auto p : params) p.zero_grad();
  Tensor out = f();
  if (!std::isfinite(out.item())) throw std::runtime_error("grad_check: non-finite objective");
  // roundoff floor of the central difference: eps * |f| / (2h)
  const double noise_floor =
      64.0 * std::numeric_limits<double>::epsilon() * std::max(1.0, std::fabs(out.item())) / (2.0 * opts.h);
  out.backward();
  std::vector<std::vector<double>> analytic;
  analytic.reserve(params.size());
  for (const auto& p : params) analytic.push_back(p.grad());

  Rng rng(opts.sample_seed);
  double max_rel = 0.0;
  for (size_t pi = 0; pi < params.size(); ++pi) {
    Tensor p = params[pi];
    std::vector<int> coords;
    const int n = p.size();
    if (opts.max_coords_per_param < 0 || opts.max_coords_per_param >= n) {
      coords.resize(static_cast<size_t>(n));
      for (int i = 0; i < n; ++i) coords[static_cast<size_t>(i)] = i;
    } else {
      for (int i = 0; i < opts.max_coords_per_param; ++i) coords.push_back(rng.uniform_int(0, n - 1));
    }
    for (int ci : coords) {
      auto& d = p.mutable_data();
      const double orig = d[static_cast<size_t>(ci)];
      d[static_cast<size_t>(ci)] = orig + opts.h;
      const double fp = f().item();
      d[static_cast<size_t>(ci)] = orig - opts.h;
      const double fm = f().item();
      d[static_cast<size_t>(ci)] = orig;
      if (!std::isfinite(fp) || !std::isfinite(fm)) throw std::runtime_error("grad_check: non-finite objective");
      const double numeric = (fp - fm) / (2.0 * opts.h);
      const double a = analytic[pi][static_cast<size_t>(ci)];
      // both sides below the roundoff floor: a zero gradient measured as zero
      if (std::fabs(a) < noise_floor && std::fabs(numeric) < noise_floor) continue;
      const double rel = std::fabs(a - numeric) / std::max({std::fabs(a), std::fabs(numeric), 1e-8});
      max_rel = std::max(max_rel, rel);
    }
  }
  return max_rel;
}

}  // namespace mvacon
