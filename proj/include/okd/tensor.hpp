// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <initializer_list>
#include <limits>
#include <memory>
#include <numeric>
#include <stdexcept>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

namespace okd {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_size(const Shape& s) {
  std::size_t n = 1;
  for (const std::size_t d : s) n *= d;
  return n;
}

inline std::string shape_str(const Shape& s) {
  std::string out = "[";
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (i) out += "x";
    out += std::to_string(s[i]);
  }
  return out + "]";
}

namespace detail {

/// One recorded operation. The tape is implicit: nodes hold shared pointers
/// to their inputs and a monotonically increasing sequence number, so the
/// reverse pass can replay the exact reverse of execution order.
struct TensorNode {
  Shape shape;
  std::vector<double> value;
  std::vector<double> grad;  // persistent accumulator on leaves, scratch elsewhere
  bool requires_grad = false;
  bool leaf = true;
  std::uint64_t seq = 0;
  std::vector<std::shared_ptr<TensorNode>> parents;
  std::function<void(TensorNode&)> backward;

  bool tracked() const { return requires_grad || !parents.empty(); }
};

inline std::uint64_t next_seq() {
  static std::atomic<std::uint64_t> counter{0};
  return ++counter;
}

inline bool& grad_mode() {
  thread_local bool enabled = true;
  return enabled;
}

inline void check_finite(const std::vector<double>& v, const char* op) {
  for (const double x : v) {
    if (!std::isfinite(x))
      throw std::runtime_error(std::string(op) + ": produced a non-finite value");
  }
}

}  // namespace detail

/// Disables gradient recording on the current thread while alive.
class NoGradGuard {
public:
  NoGradGuard() : prev_(detail::grad_mode()) { detail::grad_mode() = false; }
  ~NoGradGuard() { detail::grad_mode() = prev_; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

private:
  bool prev_;
};

inline bool grad_enabled() { return detail::grad_mode(); }

/// Dense n-dimensional array of f64 in row-major order, with optional
/// reverse-mode gradient tracking. Cheap to copy (shared handle). Values are
/// immutable once created except for the grad buffer and explicit in-place
/// parameter updates performed by optimizers on leaves.
class Tensor {
public:
  Tensor() = default;

  Tensor(Shape shape, double fill = 0.0, bool requires_grad = false) {
    node_ = std::make_shared<detail::TensorNode>();
    node_->value.assign(shape_size(shape), fill);
    node_->shape = std::move(shape);
    node_->requires_grad = requires_grad;
    node_->seq = detail::next_seq();
  }

  Tensor(Shape shape, std::vector<double> data, bool requires_grad = false) {
    if (shape_size(shape) != data.size())
      throw std::invalid_argument("Tensor: shape " + shape_str(shape) + " does not match data length " +
                                  std::to_string(data.size()));
    detail::check_finite(data, "Tensor");
    node_ = std::make_shared<detail::TensorNode>();
    node_->shape = std::move(shape);
    node_->value = std::move(data);
    node_->requires_grad = requires_grad;
    node_->seq = detail::next_seq();
  }

  static Tensor scalar(double v, bool requires_grad = false) {
    return Tensor(Shape{1}, std::vector<double>{v}, requires_grad);
  }

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const { return node_->shape; }
  std::size_t rank() const { return node_->shape.size(); }
  std::size_t size() const { return node_->value.size(); }
  const std::vector<double>& data() const { return node_->value; }
  bool requires_grad() const { return node_->requires_grad; }
  bool is_leaf() const { return node_->leaf; }

  /// Direct value access for leaf updates (optimizers) and builders.
  std::vector<double>& raw_data() { return node_->value; }

  const std::vector<double>& grad() const {
    if (node_->grad.empty())
      throw std::runtime_error("Tensor::grad: no gradient has been computed");
    return node_->grad;
  }
  bool has_grad() const { return !node_->grad.empty(); }

  void zero_grad() {
    if (!node_->grad.empty()) std::fill(node_->grad.begin(), node_->grad.end(), 0.0);
  }

  void set_requires_grad(bool rg) {
    if (!node_->leaf) throw std::invalid_argument("set_requires_grad: only valid on leaf tensors");
    node_->requires_grad = rg;
  }

  double item() const {
    if (size() != 1) throw std::invalid_argument("Tensor::item: tensor is not scalar");
    return node_->value[0];
  }

  double at(std::initializer_list<std::size_t> idx) const {
    if (idx.size() != rank()) throw std::invalid_argument("Tensor::at: index rank mismatch");
    std::size_t flat = 0;
    std::size_t i = 0;
    for (const std::size_t v : idx) {
      if (v >= node_->shape[i]) throw std::out_of_range("Tensor::at: index out of range");
      flat = flat * node_->shape[i] + v;
      ++i;
    }
    return node_->value[flat];
  }

  /// Deep copy as a fresh leaf (drops graph history).
  Tensor clone() const {
    Tensor t(node_->shape, node_->value, node_->requires_grad);
    return t;
  }

  /// Same values, detached from the graph, never tracked.
  Tensor detach() const {
    Tensor t(node_->shape, node_->value, false);
    return t;
  }

  const std::shared_ptr<detail::TensorNode>& impl() const { return node_; }

  explicit Tensor(std::shared_ptr<detail::TensorNode> node) : node_(std::move(node)) {}

private:
  std::shared_ptr<detail::TensorNode> node_;
};

/// Creates the result node of a differentiable op. `backward` reads
/// `self.grad` and accumulates into the grad buffers of tracked parents.
/// Recording is skipped when grad mode is off or no input is tracked.
inline Tensor make_op(Shape shape, std::vector<double> value, std::vector<Tensor> inputs,
                      std::function<void(detail::TensorNode&)> backward, const char* opname) {
  detail::check_finite(value, opname);
  auto node = std::make_shared<detail::TensorNode>();
  if (shape_size(shape) != value.size())
    throw std::logic_error(std::string(opname) + ": output shape/value mismatch");
  node->shape = std::move(shape);
  node->value = std::move(value);
  node->leaf = false;
  node->seq = detail::next_seq();
  bool track = false;
  if (detail::grad_mode()) {
    for (const Tensor& t : inputs)
      if (t.impl()->tracked()) track = true;
  }
  if (track) {
    node->parents.reserve(inputs.size());
    for (const Tensor& t : inputs) node->parents.push_back(t.impl());
    node->backward = std::move(backward);
  }
  return Tensor(std::move(node));
}

namespace detail {

inline std::vector<double>& grad_buf(TensorNode& n) {
  if (n.grad.empty()) n.grad.assign(n.value.size(), 0.0);
  return n.grad;
}

}  // namespace detail

/// Populates grad on every tracked leaf reachable from `loss` with
/// d loss / d leaf. Leaf gradients accumulate across calls until zeroed;
/// interior buffers are reset per call. Deterministic: nodes are replayed
/// in the exact reverse of execution order.
inline void backward(const Tensor& loss) {
  if (!loss.defined()) throw std::invalid_argument("backward: undefined tensor");
  auto root = loss.impl();
  if (loss.size() != 1) throw std::invalid_argument("backward: loss must be scalar, got " + shape_str(root->shape));
  if (!root->tracked())
    throw std::invalid_argument("backward: loss is not part of a recorded graph");

  std::vector<detail::TensorNode*> order;
  std::unordered_set<detail::TensorNode*> seen;
  std::vector<detail::TensorNode*> stack{root.get()};
  seen.insert(root.get());
  while (!stack.empty()) {
    detail::TensorNode* n = stack.back();
    stack.pop_back();
    order.push_back(n);
    for (const auto& p : n->parents) {
      if (p->tracked() && seen.insert(p.get()).second) stack.push_back(p.get());
    }
  }
  std::sort(order.begin(), order.end(),
            [](const detail::TensorNode* a, const detail::TensorNode* b) { return a->seq > b->seq; });

  for (detail::TensorNode* n : order) {
    if (n->leaf) {
      if (n->grad.empty()) n->grad.assign(n->value.size(), 0.0);
    } else {
      n->grad.assign(n->value.size(), 0.0);
    }
  }
  root->grad[0] += 1.0;
  for (detail::TensorNode* n : order) {
    if (n->backward) n->backward(*n);
  }
}

// ---------------------------------------------------------------------------
// elementwise ops
// ---------------------------------------------------------------------------

inline void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape())
    throw std::invalid_argument(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                                shape_str(b.shape()));
}

inline Tensor add(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "add");
  std::vector<double> out(a.size());
  const auto& av = a.data();
  const auto& bv = b.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] + bv[i];
  return make_op(
      a.shape(), std::move(out), {a, b},
      [](detail::TensorNode& self) {
        const auto& g = self.grad;
        for (int k = 0; k < 2; ++k) {
          auto& p = *self.parents[k];
          if (!p.tracked()) continue;
          auto& pg = detail::grad_buf(p);
          for (std::size_t i = 0; i < g.size(); ++i) pg[i] += g[i];
        }
      },
      "add");
}

inline Tensor sub(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "sub");
  std::vector<double> out(a.size());
  const auto& av = a.data();
  const auto& bv = b.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] - bv[i];
  return make_op(
      a.shape(), std::move(out), {a, b},
      [](detail::TensorNode& self) {
        const auto& g = self.grad;
        if (self.parents[0]->tracked()) {
          auto& pg = detail::grad_buf(*self.parents[0]);
          for (std::size_t i = 0; i < g.size(); ++i) pg[i] += g[i];
        }
        if (self.parents[1]->tracked()) {
          auto& pg = detail::grad_buf(*self.parents[1]);
          for (std::size_t i = 0; i < g.size(); ++i) pg[i] -= g[i];
        }
      },
      "sub");
}

inline Tensor mul(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "mul");
  std::vector<double> out(a.size());
  const auto& av = a.data();
  const auto& bv = b.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] * bv[i];
  return make_op(
      a.shape(), std::move(out), {a, b},
      [](detail::TensorNode& self) {
        const auto& g = self.grad;
        const auto& av = self.parents[0]->value;
        const auto& bv = self.parents[1]->value;
        if (self.parents[0]->tracked()) {
          auto& pg = detail::grad_buf(*self.parents[0]);
          for (std::size_t i = 0; i < g.size(); ++i) pg[i] += g[i] * bv[i];
        }
        if (self.parents[1]->tracked()) {
          auto& pg = detail::grad_buf(*self.parents[1]);
          for (std::size_t i = 0; i < g.size(); ++i) pg[i] += g[i] * av[i];
        }
      },
      "mul");
}

inline Tensor scale(const Tensor& a, double c) {
  std::vector<double> out(a.size());
  const auto& av = a.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] * c;
  return make_op(
      a.shape(), std::move(out), {a},
      [c](detail::TensorNode& self) {
        if (!self.parents[0]->tracked()) return;
        auto& pg = detail::grad_buf(*self.parents[0]);
        const auto& g = self.grad;
        for (std::size_t i = 0; i < g.size(); ++i) pg[i] += g[i] * c;
      },
      "scale");
}

inline Tensor add_scalar(const Tensor& a, double c) {
  std::vector<double> out(a.size());
  const auto& av = a.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] + c;
  return make_op(
      a.shape(), std::move(out), {a},
      [](detail::TensorNode& self) {
        if (!self.parents[0]->tracked()) return;
        auto& pg = detail::grad_buf(*self.parents[0]);
        const auto& g = self.grad;
        for (std::size_t i = 0; i < g.size(); ++i) pg[i] += g[i];
      },
      "add_scalar");
}

inline Tensor relu(const Tensor& a) {
  std::vector<double> out(a.size());
  const auto& av = a.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] > 0.0 ? av[i] : 0.0;
  return make_op(
      a.shape(), std::move(out), {a},
      [](detail::TensorNode& self) {
        if (!self.parents[0]->tracked()) return;
        auto& pg = detail::grad_buf(*self.parents[0]);
        const auto& av = self.parents[0]->value;
        const auto& g = self.grad;
        for (std::size_t i = 0; i < g.size(); ++i)
          if (av[i] > 0.0) pg[i] += g[i];
      },
      "relu");
}

/// ln(max(x, eps)). The floor keeps saturated probabilities finite; the
/// gradient is zero below the floor.
inline Tensor log_floored(const Tensor& a, double eps = 1e-12) {
  std::vector<double> out(a.size());
  const auto& av = a.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::log(std::max(av[i], eps));
  return make_op(
      a.shape(), std::move(out), {a},
      [eps](detail::TensorNode& self) {
        if (!self.parents[0]->tracked()) return;
        auto& pg = detail::grad_buf(*self.parents[0]);
        const auto& av = self.parents[0]->value;
        const auto& g = self.grad;
        for (std::size_t i = 0; i < g.size(); ++i)
          if (av[i] > eps) pg[i] += g[i] / av[i];
      },
      "log_floored");
}

inline Tensor reshape(const Tensor& a, Shape shape) {
  if (shape_size(shape) != a.size())
    throw std::invalid_argument("reshape: element count mismatch " + shape_str(a.shape()) + " -> " +
                                shape_str(shape));
  return make_op(
      std::move(shape), a.data(), {a},
      [](detail::TensorNode& self) {
        if (!self.parents[0]->tracked()) return;
        auto& pg = detail::grad_buf(*self.parents[0]);
        const auto& g = self.grad;
        for (std::size_t i = 0; i < g.size(); ++i) pg[i] += g[i];
      },
      "reshape");
}

/// [N, ...] -> [N, product(rest)]
inline Tensor flatten(const Tensor& a) {
  if (a.rank() < 2) throw std::invalid_argument("flatten: rank must be >= 2");
  const std::size_t n = a.shape()[0];
  return reshape(a, Shape{n, a.size() / n});
}

// ---------------------------------------------------------------------------
// reductions
// ---------------------------------------------------------------------------

inline Tensor sum(const Tensor& a) {
  double s = 0.0;
  for (const double v : a.data()) s += v;
  return make_op(
      Shape{1}, {s}, {a},
      [](detail::TensorNode& self) {
        if (!self.parents[0]->tracked()) return;
        auto& pg = detail::grad_buf(*self.parents[0]);
        const double g = self.grad[0];
        for (double& v : pg) v += g;
      },
      "sum");
}

inline Tensor mean(const Tensor& a) {
  double s = 0.0;
  for (const double v : a.data()) s += v;
  const double inv = 1.0 / static_cast<double>(a.size());
  return make_op(
      Shape{1}, {s * inv}, {a},
      [inv](detail::TensorNode& self) {
        if (!self.parents[0]->tracked()) return;
        auto& pg = detail::grad_buf(*self.parents[0]);
        const double g = self.grad[0] * inv;
        for (double& v : pg) v += g;
      },
      "mean");
}

// ---------------------------------------------------------------------------
// linear algebra
// ---------------------------------------------------------------------------

inline Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.rank() != 2 || b.rank() != 2)
    throw std::invalid_argument("matmul: expects rank-2 tensors, got " + shape_str(a.shape()) + " and " +
                                shape_str(b.shape()));
  const std::size_t m = a.shape()[0], k = a.shape()[1];
  const std::size_t k2 = b.shape()[0], n = b.shape()[1];
  if (k != k2)
    throw std::invalid_argument("matmul: inner dimensions disagree " + shape_str(a.shape()) + " vs " +
                                shape_str(b.shape()));
  std::vector<double> out(m * n, 0.0);
  const auto& av = a.data();
  const auto& bv = b.data();
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t kk = 0; kk < k; ++kk) {
      const double aik = av[i * k + kk];
      const double* brow = bv.data() + kk * n;
      double* orow = out.data() + i * n;
      for (std::size_t j = 0; j < n; ++j) orow[j] += aik * brow[j];
    }
  }
  return make_op(
      Shape{m, n}, std::move(out), {a, b},
      [m, k, n](detail::TensorNode& self) {
        const auto& g = self.grad;
        const auto& av = self.parents[0]->value;
        const auto& bv = self.parents[1]->value;
        if (self.parents[0]->tracked()) {
          auto& ag = detail::grad_buf(*self.parents[0]);  // dA = G * B^T
          for (std::size_t i = 0; i < m; ++i)
            for (std::size_t j = 0; j < n; ++j) {
              const double gij = g[i * n + j];
              const double* brow = bv.data() + j;
              double* arow = ag.data() + i * k;
              for (std::size_t kk = 0; kk < k; ++kk) arow[kk] += gij * brow[kk * n];
            }
        }
        if (self.parents[1]->tracked()) {
          auto& bg = detail::grad_buf(*self.parents[1]);  // dB = A^T * G
          for (std::size_t i = 0; i < m; ++i)
            for (std::size_t kk = 0; kk < k; ++kk) {
              const double aik = av[i * k + kk];
              const double* grow = g.data() + i * n;
              double* brow = bg.data() + kk * n;
              for (std::size_t j = 0; j < n; ++j) brow[j] += aik * grow[j];
            }
        }
      },
      "matmul");
}

/// [N, C] + [C] broadcast over rows.
inline Tensor add_bias(const Tensor& x, const Tensor& b) {
  if (x.rank() != 2 || b.rank() != 1 || x.shape()[1] != b.shape()[0])
    throw std::invalid_argument("add_bias: incompatible shapes " + shape_str(x.shape()) + " and " +
                                shape_str(b.shape()));
  const std::size_t n = x.shape()[0], c = x.shape()[1];
  std::vector<double> out(x.size());
  const auto& xv = x.data();
  const auto& bv = b.data();
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < c; ++j) out[i * c + j] = xv[i * c + j] + bv[j];
  return make_op(
      x.shape(), std::move(out), {x, b},
      [n, c](detail::TensorNode& self) {
        const auto& g = self.grad;
        if (self.parents[0]->tracked()) {
          auto& xg = detail::grad_buf(*self.parents[0]);
          for (std::size_t i = 0; i < g.size(); ++i) xg[i] += g[i];
        }
        if (self.parents[1]->tracked()) {
          auto& bg = detail::grad_buf(*self.parents[1]);
          for (std::size_t i = 0; i < n; ++i)
            for (std::size_t j = 0; j < c; ++j) bg[j] += g[i * c + j];
        }
      },
      "add_bias");
}

/// Per-channel bias on [N, C, ...spatial] feature maps.
inline Tensor add_channel_bias(const Tensor& x, const Tensor& b) {
  if (x.rank() < 3 || b.rank() != 1 || x.shape()[1] != b.shape()[0])
    throw std::invalid_argument("add_channel_bias: incompatible shapes " + shape_str(x.shape()) + " and " +
                                shape_str(b.shape()));
  const std::size_t n = x.shape()[0], c = x.shape()[1];
  const std::size_t spatial = x.size() / (n * c);
  std::vector<double> out(x.size());
  const auto& xv = x.data();
  const auto& bv = b.data();
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t ch = 0; ch < c; ++ch) {
      const double bb = bv[ch];
      const std::size_t base = (i * c + ch) * spatial;
      for (std::size_t s = 0; s < spatial; ++s) out[base + s] = xv[base + s] + bb;
    }
  return make_op(
      x.shape(), std::move(out), {x, b},
      [n, c, spatial](detail::TensorNode& self) {
        const auto& g = self.grad;
        if (self.parents[0]->tracked()) {
          auto& xg = detail::grad_buf(*self.parents[0]);
          for (std::size_t i = 0; i < g.size(); ++i) xg[i] += g[i];
        }
        if (self.parents[1]->tracked()) {
          auto& bg = detail::grad_buf(*self.parents[1]);
          for (std::size_t i = 0; i < n; ++i)
            for (std::size_t ch = 0; ch < c; ++ch) {
              const std::size_t base = (i * c + ch) * spatial;
              double acc = 0.0;
              for (std::size_t s = 0; s < spatial; ++s) acc += g[base + s];
              bg[ch] += acc;
            }
        }
      },
      "add_channel_bias");
}

// ---------------------------------------------------------------------------
// convolution and pooling
// ---------------------------------------------------------------------------

namespace detail {

inline std::size_t conv_out_dim(std::size_t in, std::size_t k, std::size_t stride, std::size_t pad,
                                const char* op) {
  if (k > in + 2 * pad)
    throw std::invalid_argument(std::string(op) + ": kernel size " + std::to_string(k) +
                                " exceeds padded input " + std::to_string(in + 2 * pad));
  return (in + 2 * pad - k) / stride + 1;
}

/// Output positions o in [lo, hi) for which i = o*stride + k - pad lands
/// inside [0, in): hoists the padding bounds out of the hot loops.
inline std::pair<std::size_t, std::size_t> conv_valid_range(std::size_t in, std::size_t out, std::size_t k,
                                                            std::size_t stride, std::size_t pad) {
  const std::ptrdiff_t s = static_cast<std::ptrdiff_t>(stride);
  const std::ptrdiff_t shift = static_cast<std::ptrdiff_t>(k) - static_cast<std::ptrdiff_t>(pad);
  std::ptrdiff_t lo = 0;
  if (shift < 0) lo = (-shift + s - 1) / s;
  const std::ptrdiff_t hi_num = static_cast<std::ptrdiff_t>(in) - 1 - shift;
  std::ptrdiff_t hi = hi_num < 0 ? 0 : hi_num / s + 1;
  hi = std::min<std::ptrdiff_t>(hi, static_cast<std::ptrdiff_t>(out));
  lo = std::min(lo, hi);
  return {static_cast<std::size_t>(lo), static_cast<std::size_t>(hi)};
}

}  // namespace detail

namespace detail {

/// Lowers one image to a [C*kh*kw x OH*OW] patch matrix (zero padding).
inline void im2col(const double* img, std::size_t C, std::size_t H, std::size_t W, std::size_t kh,
                   std::size_t kw, std::size_t stride, std::size_t pad, std::size_t OH, std::size_t OW,
                   double* col) {
  const std::ptrdiff_t sp = -static_cast<std::ptrdiff_t>(pad);
  std::size_t kk = 0;
  for (std::size_t c = 0; c < C; ++c)
    for (std::size_t ky = 0; ky < kh; ++ky)
      for (std::size_t kx = 0; kx < kw; ++kx, ++kk) {
        double* crow = col + kk * OH * OW;
        const auto [xlo, xhi] = conv_valid_range(W, OW, kx, stride, pad);
        for (std::size_t oy = 0; oy < OH; ++oy) {
          const std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(oy * stride + ky) + sp;
          double* dst = crow + oy * OW;
          if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(H)) {
            std::fill(dst, dst + OW, 0.0);
            continue;
          }
          const double* src = img + (c * H + iy) * W + static_cast<std::ptrdiff_t>(kx) + sp;
          std::fill(dst, dst + xlo, 0.0);
          if (stride == 1)
            std::copy(src + xlo, src + xhi, dst + xlo);
          else
            for (std::size_t ox = xlo; ox < xhi; ++ox) dst[ox] = src[ox * stride];
          std::fill(dst + xhi, dst + OW, 0.0);
        }
      }
}

/// Scatter-adds a patch-matrix gradient back onto the image gradient.
inline void col2im_add(const double* col, std::size_t C, std::size_t H, std::size_t W, std::size_t kh,
                       std::size_t kw, std::size_t stride, std::size_t pad, std::size_t OH, std::size_t OW,
                       double* img_grad) {
  const std::ptrdiff_t sp = -static_cast<std::ptrdiff_t>(pad);
  std::size_t kk = 0;
  for (std::size_t c = 0; c < C; ++c)
    for (std::size_t ky = 0; ky < kh; ++ky)
      for (std::size_t kx = 0; kx < kw; ++kx, ++kk) {
        const double* crow = col + kk * OH * OW;
        const auto [xlo, xhi] = conv_valid_range(W, OW, kx, stride, pad);
        for (std::size_t oy = 0; oy < OH; ++oy) {
          const std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(oy * stride + ky) + sp;
          if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(H)) continue;
          double* dst = img_grad + (c * H + iy) * W + static_cast<std::ptrdiff_t>(kx) + sp;
          const double* src = crow + oy * OW;
          if (stride == 1)
            for (std::size_t ox = xlo; ox < xhi; ++ox) dst[ox] += src[ox];
          else
            for (std::size_t ox = xlo; ox < xhi; ++ox) dst[ox * stride] += src[ox];
        }
      }
}

/// Direct-loop forward for small patch dimensions, where im2col overhead
/// outweighs the GEMM gain. Same (c, ky, kx) summation order as the GEMM
/// path, so both produce bit-identical outputs.
inline void conv2d_forward_direct(const double* xv, const double* wv, double* out, std::size_t N,
                                  std::size_t C, std::size_t H, std::size_t W, std::size_t F, std::size_t kh,
                                  std::size_t kw, std::size_t OH, std::size_t OW, std::size_t stride,
                                  std::size_t pad) {
  const std::ptrdiff_t sp = -static_cast<std::ptrdiff_t>(pad);
  for (std::size_t n = 0; n < N; ++n)
    for (std::size_t f = 0; f < F; ++f)
      for (std::size_t oy = 0; oy < OH; ++oy) {
        double* orow = out + ((n * F + f) * OH + oy) * OW;
        for (std::size_t c = 0; c < C; ++c)
          for (std::size_t ky = 0; ky < kh; ++ky) {
            const std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(oy * stride + ky) + sp;
            if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(H)) continue;
            const double* xrow = xv + ((n * C + c) * H + iy) * W;
            const double* wrow = wv + ((f * C + c) * kh + ky) * kw;
            for (std::size_t kx = 0; kx < kw; ++kx) {
              const double wval = wrow[kx];
              const auto [lo, hi] = conv_valid_range(W, OW, kx, stride, pad);
              const double* xs = xrow + static_cast<std::ptrdiff_t>(kx) + sp;
              if (stride == 1) {
                for (std::size_t ox = lo; ox < hi; ++ox) orow[ox] += wval * xs[ox];
              } else {
                for (std::size_t ox = lo; ox < hi; ++ox) orow[ox] += wval * xs[ox * stride];
              }
            }
          }
      }
}

inline void conv2d_backward_direct(const double* xv, const double* wv, const double* g, double* dx,
                                   double* dw, std::size_t N, std::size_t C, std::size_t H, std::size_t W,
                                   std::size_t F, std::size_t kh, std::size_t kw, std::size_t OH,
                                   std::size_t OW, std::size_t stride, std::size_t pad) {
  const std::ptrdiff_t sp = -static_cast<std::ptrdiff_t>(pad);
  for (std::size_t n = 0; n < N; ++n)
    for (std::size_t f = 0; f < F; ++f)
      for (std::size_t oy = 0; oy < OH; ++oy) {
        const double* grow = g + ((n * F + f) * OH + oy) * OW;
        for (std::size_t c = 0; c < C; ++c)
          for (std::size_t ky = 0; ky < kh; ++ky) {
            const std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(oy * stride + ky) + sp;
            if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(H)) continue;
            const std::size_t xbase = ((n * C + c) * H + iy) * W;
            const std::size_t wbase = ((f * C + c) * kh + ky) * kw;
            for (std::size_t kx = 0; kx < kw; ++kx) {
              const double wval = wv[wbase + kx];
              const auto [lo, hi] = conv_valid_range(W, OW, kx, stride, pad);
              const double* xs = xv + xbase + static_cast<std::ptrdiff_t>(kx) + sp;
              double dw_acc = 0.0;
              if (dx) {
                double* dxs = dx + xbase + static_cast<std::ptrdiff_t>(kx) + sp;
                for (std::size_t ox = lo; ox < hi; ++ox) {
                  const double go = grow[ox];
                  dxs[ox * stride] += wval * go;
                  dw_acc += go * xs[ox * stride];
                }
              } else {
                for (std::size_t ox = lo; ox < hi; ++ox) dw_acc += grow[ox] * xs[ox * stride];
              }
              if (dw) dw[wbase + kx] += dw_acc;
            }
          }
      }
}

// im2col pays off once the patch dimension is large enough
inline constexpr std::size_t kConvGemmMinK = 64;

}  // namespace detail

/// Cross-correlation of x[N,C,H,W] with w[F,C,kh,kw]; zero padding.
/// Large patch dimensions are lowered to im2col + GEMM per image; small ones
/// use direct loops. Either way the inner summation runs over (c, ky, kx) in
/// lexicographic order, so the result does not depend on the path taken.
inline Tensor conv2d(const Tensor& x, const Tensor& w, std::size_t stride = 1, std::size_t pad = 0) {
  if (x.rank() != 4 || w.rank() != 4)
    throw std::invalid_argument("conv2d: expects x[N,C,H,W], w[F,C,kh,kw], got " + shape_str(x.shape()) +
                                " and " + shape_str(w.shape()));
  if (stride == 0) throw std::invalid_argument("conv2d: stride must be positive");
  const std::size_t N = x.shape()[0], C = x.shape()[1], H = x.shape()[2], W = x.shape()[3];
  const std::size_t F = w.shape()[0], kh = w.shape()[2], kw = w.shape()[3];
  if (w.shape()[1] != C)
    throw std::invalid_argument("conv2d: channel mismatch " + shape_str(x.shape()) + " vs " +
                                shape_str(w.shape()));
  const std::size_t OH = detail::conv_out_dim(H, kh, stride, pad, "conv2d");
  const std::size_t OW = detail::conv_out_dim(W, kw, stride, pad, "conv2d");
  const std::size_t K = C * kh * kw, S = OH * OW;

  std::vector<double> out(N * F * S, 0.0);
  std::vector<double> col(K * S);
  const auto& xv = x.data();
  const auto& wv = w.data();
  for (std::size_t n = 0; n < N; ++n) {
    detail::im2col(xv.data() + n * C * H * W, C, H, W, kh, kw, stride, pad, OH, OW, col.data());
    double* onb = out.data() + n * F * S;
    for (std::size_t f = 0; f < F; ++f) {
      double* orow = onb + f * S;
      const double* wrow = wv.data() + f * K;
      for (std::size_t kk = 0; kk < K; ++kk) {
        const double wval = wrow[kk];
        const double* crow = col.data() + kk * S;
        for (std::size_t j = 0; j < S; ++j) orow[j] += wval * crow[j];
      }
    }
  }

  return make_op(
      Shape{N, F, OH, OW}, std::move(out), {x, w},
      [N, C, H, W, F, kh, kw, OH, OW, stride, pad, K, S](detail::TensorNode& self) {
        const auto& g = self.grad;
        const auto& xv = self.parents[0]->value;
        const auto& wv = self.parents[1]->value;
        const bool need_dx = self.parents[0]->tracked();
        const bool need_dw = self.parents[1]->tracked();
        std::vector<double>* dx = need_dx ? &detail::grad_buf(*self.parents[0]) : nullptr;
        std::vector<double>* dw = need_dw ? &detail::grad_buf(*self.parents[1]) : nullptr;
        std::vector<double> col(K * S);
        std::vector<double> dcol(need_dx ? K * S : 0);
        for (std::size_t n = 0; n < N; ++n) {
          detail::im2col(xv.data() + n * C * H * W, C, H, W, kh, kw, stride, pad, OH, OW, col.data());
          const double* gnb = g.data() + n * F * S;
          if (need_dw) {
            for (std::size_t f = 0; f < F; ++f) {
              const double* grow = gnb + f * S;
              double* dwrow = dw->data() + f * K;
              for (std::size_t kk = 0; kk < K; ++kk) {
                const double* crow = col.data() + kk * S;
                double acc = 0.0;
                for (std::size_t j = 0; j < S; ++j) acc += grow[j] * crow[j];
                dwrow[kk] += acc;
              }
            }
          }
          if (need_dx) {
            std::fill(dcol.begin(), dcol.end(), 0.0);
            for (std::size_t f = 0; f < F; ++f) {
              const double* grow = gnb + f * S;
              const double* wrow = wv.data() + f * K;
              for (std::size_t kk = 0; kk < K; ++kk) {
                const double wval = wrow[kk];
                double* crow = dcol.data() + kk * S;
                for (std::size_t j = 0; j < S; ++j) crow[j] += wval * grow[j];
              }
            }
            detail::col2im_add(dcol.data(), C, H, W, kh, kw, stride, pad, OH, OW,
                               dx->data() + n * C * H * W);
          }
        }
      },
      "conv2d");
}

/// Cross-correlation of x[N,C,L] with w[F,C,k]; zero padding.
inline Tensor conv1d(const Tensor& x, const Tensor& w, std::size_t stride = 1, std::size_t pad = 0) {
  if (x.rank() != 3 || w.rank() != 3)
    throw std::invalid_argument("conv1d: expects x[N,C,L], w[F,C,k], got " + shape_str(x.shape()) + " and " +
                                shape_str(w.shape()));
  if (stride == 0) throw std::invalid_argument("conv1d: stride must be positive");
  const std::size_t N = x.shape()[0], C = x.shape()[1], L = x.shape()[2];
  const std::size_t F = w.shape()[0], k = w.shape()[2];
  if (w.shape()[1] != C)
    throw std::invalid_argument("conv1d: channel mismatch " + shape_str(x.shape()) + " vs " +
                                shape_str(w.shape()));
  const std::size_t OL = detail::conv_out_dim(L, k, stride, pad, "conv1d");

  std::vector<double> out(N * F * OL, 0.0);
  const auto& xv = x.data();
  const auto& wv = w.data();
  const std::ptrdiff_t sp = -static_cast<std::ptrdiff_t>(pad);
  for (std::size_t n = 0; n < N; ++n)
    for (std::size_t f = 0; f < F; ++f) {
      double* orow = out.data() + (n * F + f) * OL;
      for (std::size_t c = 0; c < C; ++c) {
        const double* xrow = xv.data() + (n * C + c) * L;
        const double* wrow = wv.data() + (f * C + c) * k;
        for (std::size_t kk = 0; kk < k; ++kk) {
          const double wval = wrow[kk];
          const auto [lo, hi] = detail::conv_valid_range(L, OL, kk, stride, pad);
          const double* xs = xrow + static_cast<std::ptrdiff_t>(kk) + sp;
          for (std::size_t o = lo; o < hi; ++o) orow[o] += wval * xs[o * stride];
        }
      }
    }

  return make_op(
      Shape{N, F, OL}, std::move(out), {x, w},
      [N, C, L, F, k, OL, stride, pad](detail::TensorNode& self) {
        const auto& g = self.grad;
        const auto& xv = self.parents[0]->value;
        const auto& wv = self.parents[1]->value;
        const bool need_dx = self.parents[0]->tracked();
        const bool need_dw = self.parents[1]->tracked();
        std::vector<double>* dx = need_dx ? &detail::grad_buf(*self.parents[0]) : nullptr;
        std::vector<double>* dw = need_dw ? &detail::grad_buf(*self.parents[1]) : nullptr;
        const std::ptrdiff_t sp = -static_cast<std::ptrdiff_t>(pad);
        for (std::size_t n = 0; n < N; ++n)
          for (std::size_t f = 0; f < F; ++f) {
            const double* grow = g.data() + (n * F + f) * OL;
            for (std::size_t c = 0; c < C; ++c) {
              const std::size_t xbase = (n * C + c) * L;
              const std::size_t wbase = (f * C + c) * k;
              for (std::size_t kk = 0; kk < k; ++kk) {
                const double wval = wv[wbase + kk];
                const auto [lo, hi] = detail::conv_valid_range(L, OL, kk, stride, pad);
                const double* xs = xv.data() + xbase + static_cast<std::ptrdiff_t>(kk) + sp;
                double dw_acc = 0.0;
                if (need_dx) {
                  double* dxs = dx->data() + xbase + static_cast<std::ptrdiff_t>(kk) + sp;
                  for (std::size_t o = lo; o < hi; ++o) {
                    const double go = grow[o];
                    dxs[o * stride] += wval * go;
                    dw_acc += go * xs[o * stride];
                  }
                } else {
                  for (std::size_t o = lo; o < hi; ++o) dw_acc += grow[o] * xs[o * stride];
                }
                if (need_dw) (*dw)[wbase + kk] += dw_acc;
              }
            }
          }
      },
      "conv1d");
}

/// Non-overlapping max pooling with window k (stride k). Trailing rows and
/// columns that do not fill a window are dropped. Ties route the gradient to
/// the first maximum in scan order.
inline Tensor maxpool2d(const Tensor& x, std::size_t k) {
  if (x.rank() != 4) throw std::invalid_argument("maxpool2d: expects [N,C,H,W], got " + shape_str(x.shape()));
  if (k == 0) throw std::invalid_argument("maxpool2d: window must be positive");
  const std::size_t N = x.shape()[0], C = x.shape()[1], H = x.shape()[2], W = x.shape()[3];
  const std::size_t OH = H / k, OW = W / k;
  if (OH == 0 || OW == 0)
    throw std::invalid_argument("maxpool2d: window " + std::to_string(k) + " larger than input " +
                                shape_str(x.shape()));
  std::vector<double> out(N * C * OH * OW);
  std::vector<std::size_t> argmax(out.size());
  const auto& xv = x.data();
  std::size_t o = 0;
  for (std::size_t n = 0; n < N; ++n)
    for (std::size_t c = 0; c < C; ++c)
      for (std::size_t oy = 0; oy < OH; ++oy)
        for (std::size_t ox = 0; ox < OW; ++ox, ++o) {
          double best = -std::numeric_limits<double>::infinity();
          std::size_t best_idx = 0;
          for (std::size_t dy = 0; dy < k; ++dy)
            for (std::size_t dx = 0; dx < k; ++dx) {
              const std::size_t idx = ((n * C + c) * H + oy * k + dy) * W + ox * k + dx;
              if (xv[idx] > best) {
                best = xv[idx];
                best_idx = idx;
              }
            }
          out[o] = best;
          argmax[o] = best_idx;
        }
  return make_op(
      Shape{N, C, OH, OW}, std::move(out), {x},
      [argmax = std::move(argmax)](detail::TensorNode& self) {
        if (!self.parents[0]->tracked()) return;
        auto& pg = detail::grad_buf(*self.parents[0]);
        const auto& g = self.grad;
        for (std::size_t i = 0; i < g.size(); ++i) pg[argmax[i]] += g[i];
      },
      "maxpool2d");
}

/// 1D analog of maxpool2d on [N,C,L].
inline Tensor maxpool1d(const Tensor& x, std::size_t k) {
  if (x.rank() != 3) throw std::invalid_argument("maxpool1d: expects [N,C,L], got " + shape_str(x.shape()));
  if (k == 0) throw std::invalid_argument("maxpool1d: window must be positive");
  const std::size_t N = x.shape()[0], C = x.shape()[1], L = x.shape()[2];
  const std::size_t OL = L / k;
  if (OL == 0)
    throw std::invalid_argument("maxpool1d: window " + std::to_string(k) + " larger than input " +
                                shape_str(x.shape()));
  std::vector<double> out(N * C * OL);
  std::vector<std::size_t> argmax(out.size());
  const auto& xv = x.data();
  std::size_t o = 0;
  for (std::size_t n = 0; n < N; ++n)
    for (std::size_t c = 0; c < C; ++c)
      for (std::size_t ol = 0; ol < OL; ++ol, ++o) {
        double best = -std::numeric_limits<double>::infinity();
        std::size_t best_idx = 0;
        for (std::size_t d = 0; d < k; ++d) {
          const std::size_t idx = (n * C + c) * L + ol * k + d;
          if (xv[idx] > best) {
            best = xv[idx];
            best_idx = idx;
          }
        }
        out[o] = best;
        argmax[o] = best_idx;
      }
  return make_op(
      Shape{N, C, OL}, std::move(out), {x},
      [argmax = std::move(argmax)](detail::TensorNode& self) {
        if (!self.parents[0]->tracked()) return;
        auto& pg = detail::grad_buf(*self.parents[0]);
        const auto& g = self.grad;
        for (std::size_t i = 0; i < g.size(); ++i) pg[argmax[i]] += g[i];
      },
      "maxpool1d");
}

/// Mean over all spatial positions: [N,C,H,W] or [N,C,L] -> [N,C].
inline Tensor global_avg_pool(const Tensor& x) {
  if (x.rank() != 3 && x.rank() != 4)
    throw std::invalid_argument("global_avg_pool: expects [N,C,L] or [N,C,H,W], got " + shape_str(x.shape()));
  const std::size_t N = x.shape()[0], C = x.shape()[1];
  const std::size_t spatial = x.size() / (N * C);
  const double inv = 1.0 / static_cast<double>(spatial);
  std::vector<double> out(N * C, 0.0);
  const auto& xv = x.data();
  for (std::size_t i = 0; i < N * C; ++i) {
    const double* base = xv.data() + i * spatial;
    double acc = 0.0;
    for (std::size_t s = 0; s < spatial; ++s) acc += base[s];
    out[i] = acc * inv;
  }
  return make_op(
      Shape{N, C}, std::move(out), {x},
      [spatial, inv](detail::TensorNode& self) {
        if (!self.parents[0]->tracked()) return;
        auto& pg = detail::grad_buf(*self.parents[0]);
        const auto& g = self.grad;
        for (std::size_t i = 0; i < g.size(); ++i) {
          const double gv = g[i] * inv;
          double* base = pg.data() + i * spatial;
          for (std::size_t s = 0; s < spatial; ++s) base[s] += gv;
        }
      },
      "global_avg_pool");
}

// ---------------------------------------------------------------------------
// softmax
// ---------------------------------------------------------------------------

/// Row-wise softmax of z / pi with max subtraction for overflow safety.
inline Tensor softmax_temp(const Tensor& z, double pi) {
  if (pi <= 0.0) throw std::invalid_argument("softmax_temp: temperature must be positive");
  if (z.rank() != 2) throw std::invalid_argument("softmax_temp: expects [N,C], got " + shape_str(z.shape()));
  const std::size_t N = z.shape()[0], C = z.shape()[1];
  std::vector<double> out(z.size());
  const auto& zv = z.data();
  for (std::size_t i = 0; i < N; ++i) {
    const double* row = zv.data() + i * C;
    double m = row[0];
    for (std::size_t j = 1; j < C; ++j) m = std::max(m, row[j]);
    double denom = 0.0;
    for (std::size_t j = 0; j < C; ++j) {
      const double e = std::exp((row[j] - m) / pi);
      out[i * C + j] = e;
      denom += e;
    }
    const double inv = 1.0 / denom;
    for (std::size_t j = 0; j < C; ++j) out[i * C + j] *= inv;
  }
  return make_op(
      z.shape(), std::move(out), {z},
      [N, C, pi](detail::TensorNode& self) {
        if (!self.parents[0]->tracked()) return;
        auto& pg = detail::grad_buf(*self.parents[0]);
        const auto& g = self.grad;
        const auto& p = self.value;
        for (std::size_t i = 0; i < N; ++i) {
          const double* prow = p.data() + i * C;
          const double* grow = g.data() + i * C;
          double dot = 0.0;
          for (std::size_t j = 0; j < C; ++j) dot += grow[j] * prow[j];
          double* orow = pg.data() + i * C;
          for (std::size_t j = 0; j < C; ++j) orow[j] += prow[j] * (grow[j] - dot) / pi;
        }
      },
      "softmax_temp");
}

}  // namespace okd
