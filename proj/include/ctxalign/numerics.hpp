#pragma once

// Dense row-major tensors with reverse-mode gradients.
//
// Every op returns a new Tensor. When any input requires a gradient the
// result keeps a reference to its inputs plus a closure that pushes the
// output gradient back into them; backward() replays those closures in
// reverse creation order. Gradients accumulate (+=), so a tensor used
// several times in one graph receives the sum of its contributions.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <initializer_list>
#include <memory>
#include <numbers>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include <Eigen/Core>

#include "ctxalign/error.hpp"

namespace ctxalign {

using Shape = std::vector<std::size_t>;

inline std::string shape_string(const Shape& shape) {
  std::ostringstream out;
  out << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    out << (i ? "x" : "") << shape[i];
  }
  out << ']';
  return out.str();
}

inline std::size_t shape_size(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1},
                         std::multiplies<>());
}

struct TensorNode {
  Shape shape;
  std::vector<double> value;
  std::vector<double> grad;
  bool requires_grad = false;
  bool consumed = false;
  std::uint64_t sequence = 0;
  std::string op = "leaf";
  std::string name;
  std::vector<std::shared_ptr<TensorNode>> inputs;
  std::function<void(TensorNode&)> backward;

  void ensure_grad() {
    if (grad.size() != value.size()) grad.assign(value.size(), 0.0);
  }
};

namespace detail {

// Creation order within the current thread. Only relative order matters.
inline std::uint64_t next_sequence() {
  thread_local std::uint64_t counter = 0;
  return ++counter;
}

inline void check_finite(const std::string& op, const std::vector<double>& v) {
  for (std::size_t i = 0; i < v.size(); ++i) {
    if (!std::isfinite(v[i])) {
      throw NumericError(op + ": non-finite value at flat index " +
                         std::to_string(i));
    }
  }
}

}  // namespace detail

class Tensor {
 public:
  Tensor() = default;

  Tensor(Shape shape, std::vector<double> values, bool requires_grad = false)
      : node_(std::make_shared<TensorNode>()) {
    if (shape.empty()) throw DimensionError("tensor: rank must be >= 1");
    for (auto extent : shape) {
      if (extent == 0) throw DimensionError("tensor: extents must be positive");
    }
    if (shape_size(shape) != values.size()) {
      throw DimensionError("tensor: shape " + shape_string(shape) +
                           " does not match " + std::to_string(values.size()) +
                           " values");
    }
    detail::check_finite("tensor", values);
    node_->shape = std::move(shape);
    node_->value = std::move(values);
    node_->requires_grad = requires_grad;
    node_->sequence = detail::next_sequence();
  }

  static Tensor zeros(Shape shape) {
    auto n = shape_size(shape);
    return Tensor(std::move(shape), std::vector<double>(n, 0.0));
  }
  static Tensor filled(Shape shape, double v) {
    auto n = shape_size(shape);
    return Tensor(std::move(shape), std::vector<double>(n, v));
  }
  static Tensor scalar(double v, bool requires_grad = false) {
    return Tensor({1}, {v}, requires_grad);
  }
  static Tensor matrix(std::size_t rows, std::size_t cols,
                       std::vector<double> values, bool requires_grad = false) {
    return Tensor({rows, cols}, std::move(values), requires_grad);
  }
  static Tensor vector(std::vector<double> values, bool requires_grad = false) {
    auto n = values.size();
    return Tensor({n}, std::move(values), requires_grad);
  }
  static Tensor identity(std::size_t n) {
    auto t = zeros({n, n});
    for (std::size_t i = 0; i < n; ++i) t.node_->value[i * n + i] = 1.0;
    return t;
  }

  // Internal: wrap an op result.
  static Tensor from_node(std::shared_ptr<TensorNode> node) {
    Tensor t;
    t.node_ = std::move(node);
    return t;
  }

  bool defined() const { return static_cast<bool>(node_); }
  const Shape& shape() const { return node_->shape; }
  std::size_t rank() const { return node_->shape.size(); }
  std::size_t size() const { return node_->value.size(); }
  std::size_t rows() const { return node_->shape[0]; }
  std::size_t cols() const {
    return rank() >= 2 ? node_->shape[1] : node_->shape[0];
  }

  std::span<const double> values() const { return node_->value; }
  double operator[](std::size_t i) const { return node_->value[i]; }
  double at(std::size_t r, std::size_t c) const {
    return node_->value[r * cols() + c];
  }
  double item() const {
    if (size() != 1) throw DimensionError("item: tensor is not a scalar");
    return node_->value[0];
  }

  // Direct writes are reserved for leaves (parameters and inputs).
  std::span<double> mutable_values() {
    if (!node_->inputs.empty() || node_->backward) {
      throw ContractError("mutable_values: only leaf tensors may be written");
    }
    return node_->value;
  }

  bool requires_grad() const { return node_->requires_grad; }
  void set_requires_grad(bool on) { node_->requires_grad = on; }

  // Empty span until a backward pass has reached this tensor.
  std::span<const double> grad() const { return node_->grad; }
  double grad_at(std::size_t i) const {
    return node_->grad.empty() ? 0.0 : node_->grad[i];
  }
  void zero_grad() { std::fill(node_->grad.begin(), node_->grad.end(), 0.0); }

  const std::string& name() const { return node_->name; }
  void set_name(std::string name) { node_->name = std::move(name); }
  const std::string& op() const { return node_->op; }

  TensorNode* node() const { return node_.get(); }
  const std::shared_ptr<TensorNode>& shared_node() const { return node_; }

  // Independent leaf with the same values.
  Tensor detach() const { return Tensor(shape(), node_->value); }

 private:
  std::shared_ptr<TensorNode> node_;
};

using BackwardFn = std::function<void(TensorNode&)>;

// Builds an op result; the backward closure is kept only when some input
// participates in differentiation.
inline Tensor make_op(std::string op, Shape shape, std::vector<double> value,
                      const std::vector<Tensor>& inputs, BackwardFn backward) {
  detail::check_finite(op, value);
  auto node = std::make_shared<TensorNode>();
  node->op = std::move(op);
  node->shape = std::move(shape);
  node->value = std::move(value);
  node->sequence = detail::next_sequence();
  bool any = false;
  for (const auto& in : inputs) any = any || in.requires_grad();
  if (any) {
    node->requires_grad = true;
    for (const auto& in : inputs) node->inputs.push_back(in.shared_node());
    node->backward = std::move(backward);
  }
  return Tensor::from_node(std::move(node));
}

inline Tensor make_op(std::string op, Shape shape, std::vector<double> value,
                      std::initializer_list<Tensor> inputs, BackwardFn backward) {
  return make_op(std::move(op), std::move(shape), std::move(value),
                 std::vector<Tensor>(inputs), std::move(backward));
}

// Accumulation target for input `i` of an op, or nullptr when that input
// does not need a gradient.
inline std::vector<double>* grad_sink(TensorNode& self, std::size_t i) {
  auto& in = *self.inputs[i];
  if (!in.requires_grad) return nullptr;
  in.ensure_grad();
  return &in.grad;
}

// ---------------------------------------------------------------------------
// Tape

struct Tape {
  struct Entry {
    std::string op;
    std::uint64_t sequence;
  };
  std::vector<Entry> entries;
  std::size_t size() const { return entries.size(); }
};

namespace detail {

inline std::vector<TensorNode*> collect_reverse_order(TensorNode* root) {
  std::vector<TensorNode*> nodes;
  std::unordered_set<TensorNode*> seen;
  std::vector<TensorNode*> stack{root};
  while (!stack.empty()) {
    auto* n = stack.back();
    stack.pop_back();
    if (!seen.insert(n).second) continue;
    if (n->backward) nodes.push_back(n);
    for (auto& in : n->inputs) {
      if (in->requires_grad) stack.push_back(in.get());
    }
  }
  // An op is always created after its inputs, so descending sequence is
  // reverse execution order.
  std::sort(nodes.begin(), nodes.end(),
            [](auto* a, auto* b) { return a->sequence > b->sequence; });
  return nodes;
}

}  // namespace detail

// Runs reverse-mode differentiation from a scalar loss. Leaf gradients
// accumulate; the graph is released afterwards, so a second call on the
// same loss is an error.
inline Tape backward(const Tensor& loss) {
  if (!loss.defined() || loss.size() != 1) {
    throw ContractError("backward: loss must be a scalar tensor");
  }
  auto* root = loss.node();
  if (root->consumed) {
    throw ContractError("backward: graph already consumed; run forward again");
  }
  Tape tape;
  auto order = detail::collect_reverse_order(root);
  if (root->requires_grad) {
    root->ensure_grad();
    root->grad[0] += 1.0;
  }
  for (auto* n : order) {
    n->ensure_grad();
    n->backward(*n);
    tape.entries.push_back({n->op, n->sequence});
  }
  // Releasing one node's inputs can free another node still in `order`;
  // park everything until the loop is done.
  std::vector<std::shared_ptr<TensorNode>> parked;
  std::vector<BackwardFn> parked_fns;
  for (auto* n : order) {
    parked_fns.push_back(std::move(n->backward));
    n->backward = nullptr;
    for (auto& in : n->inputs) parked.push_back(std::move(in));
    n->inputs.clear();
    n->consumed = true;
  }
  root->consumed = true;
  return tape;
}

// ---------------------------------------------------------------------------
// Linear algebra

using RowMatrix =
    Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MatrixView = Eigen::Map<const RowMatrix>;
using MutableMatrixView = Eigen::Map<RowMatrix>;

namespace detail {

inline void require_rank2(const Tensor& t, const char* op) {
  if (t.rank() != 2) {
    throw DimensionError(std::string(op) + ": expected a matrix, got " +
                         shape_string(t.shape()));
  }
}

inline void require_same_shape(const Tensor& a, const Tensor& b,
                               const char* op) {
  if (a.shape() != b.shape()) {
    throw DimensionError(std::string(op) + ": shape mismatch " +
                         shape_string(a.shape()) + " vs " +
                         shape_string(b.shape()));
  }
}

inline MatrixView view(const std::vector<double>& v, std::size_t r,
                       std::size_t c) {
  return MatrixView(v.data(), static_cast<Eigen::Index>(r),
                    static_cast<Eigen::Index>(c));
}

inline MutableMatrixView view(std::vector<double>& v, std::size_t r,
                              std::size_t c) {
  return MutableMatrixView(v.data(), static_cast<Eigen::Index>(r),
                           static_cast<Eigen::Index>(c));
}

}  // namespace detail

inline Tensor matmul(const Tensor& a, const Tensor& b) {
  detail::require_rank2(a, "matmul");
  detail::require_rank2(b, "matmul");
  const auto p = a.rows(), q = a.cols(), r = b.cols();
  if (b.rows() != q) {
    throw DimensionError("matmul: inner extents differ " +
                         shape_string(a.shape()) + " x " +
                         shape_string(b.shape()));
  }
  std::vector<double> out(p * r);
  detail::view(out, p, r).noalias() =
      detail::view(a.node()->value, p, q) * detail::view(b.node()->value, q, r);
  return make_op("matmul", {p, r}, std::move(out), {a, b},
                 [p, q, r](TensorNode& self) {
                   auto gc = detail::view(std::as_const(self.grad), p, r);
                   if (auto* ga = grad_sink(self, 0)) {
                     detail::view(*ga, p, q).noalias() +=
                         gc * detail::view(self.inputs[1]->value, q, r)
                                  .transpose();
                   }
                   if (auto* gb = grad_sink(self, 1)) {
                     detail::view(*gb, q, r).noalias() +=
                         detail::view(self.inputs[0]->value, p, q).transpose() *
                         gc;
                   }
                 });
}

inline Tensor transpose(const Tensor& a) {
  detail::require_rank2(a, "transpose");
  const auto p = a.rows(), q = a.cols();
  std::vector<double> out(p * q);
  const auto& v = a.node()->value;
  for (std::size_t i = 0; i < p; ++i)
    for (std::size_t j = 0; j < q; ++j) out[j * p + i] = v[i * q + j];
  return make_op("transpose", {q, p}, std::move(out), {a},
                 [p, q](TensorNode& self) {
                   auto* g = grad_sink(self, 0);
                   for (std::size_t i = 0; i < p; ++i)
                     for (std::size_t j = 0; j < q; ++j)
                       (*g)[i * q + j] += self.grad[j * p + i];
                 });
}

// ---------------------------------------------------------------------------
// Elementwise

inline Tensor add(const Tensor& a, const Tensor& b) {
  detail::require_same_shape(a, b, "add");
  std::vector<double> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] + b[i];
  return make_op("add", a.shape(), std::move(out), {a, b},
                 [](TensorNode& self) {
                   for (std::size_t k = 0; k < 2; ++k) {
                     if (auto* g = grad_sink(self, k)) {
                       for (std::size_t i = 0; i < g->size(); ++i)
                         (*g)[i] += self.grad[i];
                     }
                   }
                 });
}

inline Tensor sub(const Tensor& a, const Tensor& b) {
  detail::require_same_shape(a, b, "sub");
  std::vector<double> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] - b[i];
  return make_op("sub", a.shape(), std::move(out), {a, b},
                 [](TensorNode& self) {
                   if (auto* g = grad_sink(self, 0))
                     for (std::size_t i = 0; i < g->size(); ++i)
                       (*g)[i] += self.grad[i];
                   if (auto* g = grad_sink(self, 1))
                     for (std::size_t i = 0; i < g->size(); ++i)
                       (*g)[i] -= self.grad[i];
                 });
}

inline Tensor hadamard(const Tensor& a, const Tensor& b) {
  detail::require_same_shape(a, b, "hadamard");
  std::vector<double> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] * b[i];
  return make_op("hadamard", a.shape(), std::move(out), {a, b},
                 [](TensorNode& self) {
                   const auto& av = self.inputs[0]->value;
                   const auto& bv = self.inputs[1]->value;
                   if (auto* g = grad_sink(self, 0))
                     for (std::size_t i = 0; i < g->size(); ++i)
                       (*g)[i] += self.grad[i] * bv[i];
                   if (auto* g = grad_sink(self, 1))
                     for (std::size_t i = 0; i < g->size(); ++i)
                       (*g)[i] += self.grad[i] * av[i];
                 });
}

// y = scale * x + shift
inline Tensor affine(const Tensor& x, double scale, double shift = 0.0) {
  std::vector<double> out(x.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = scale * x[i] + shift;
  return make_op("affine", x.shape(), std::move(out), {x},
                 [scale](TensorNode& self) {
                   auto* g = grad_sink(self, 0);
                   for (std::size_t i = 0; i < g->size(); ++i)
                     (*g)[i] += scale * self.grad[i];
                 });
}

// x [p×q] + bias [q] broadcast over rows.
inline Tensor add_rowwise(const Tensor& x, const Tensor& bias) {
  detail::require_rank2(x, "add_rowwise");
  const auto p = x.rows(), q = x.cols();
  if (bias.size() != q) {
    throw DimensionError("add_rowwise: bias " + shape_string(bias.shape()) +
                         " vs matrix " + shape_string(x.shape()));
  }
  std::vector<double> out(p * q);
  for (std::size_t i = 0; i < p; ++i)
    for (std::size_t j = 0; j < q; ++j) out[i * q + j] = x[i * q + j] + bias[j];
  return make_op("add_rowwise", x.shape(), std::move(out), {x, bias},
                 [p, q](TensorNode& self) {
                   if (auto* g = grad_sink(self, 0))
                     for (std::size_t i = 0; i < p * q; ++i)
                       (*g)[i] += self.grad[i];
                   if (auto* g = grad_sink(self, 1))
                     for (std::size_t i = 0; i < p; ++i)
                       for (std::size_t j = 0; j < q; ++j)
                         (*g)[j] += self.grad[i * q + j];
                 });
}

enum class Activation { relu, gelu };

// GELU, tanh approximation: 0.5 x (1 + tanh(sqrt(2/pi) (x + 0.044715 x^3))).
inline constexpr double kGeluCubic = 0.044715;

inline Tensor unary_map(const Tensor& x, Activation kind) {
  std::vector<double> out(x.size());
  const auto& v = x.node()->value;
  if (kind == Activation::relu) {
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = v[i] > 0 ? v[i] : 0.0;
    return make_op("relu", x.shape(), std::move(out), {x},
                   [](TensorNode& self) {
                     auto* g = grad_sink(self, 0);
                     const auto& in = self.inputs[0]->value;
                     for (std::size_t i = 0; i < g->size(); ++i)
                       if (in[i] > 0) (*g)[i] += self.grad[i];
                   });
  }
  const double c = std::sqrt(2.0 / std::numbers::pi);
  for (std::size_t i = 0; i < out.size(); ++i) {
    const double u = v[i];
    out[i] = 0.5 * u * (1.0 + std::tanh(c * (u + kGeluCubic * u * u * u)));
  }
  return make_op("gelu", x.shape(), std::move(out), {x},
                 [c](TensorNode& self) {
                   auto* g = grad_sink(self, 0);
                   const auto& in = self.inputs[0]->value;
                   for (std::size_t i = 0; i < g->size(); ++i) {
                     const double u = in[i];
                     const double t = std::tanh(c * (u + kGeluCubic * u * u * u));
                     const double d = 0.5 * (1.0 + t) +
                                      0.5 * u * (1.0 - t * t) * c *
                                          (1.0 + 3.0 * kGeluCubic * u * u);
                     (*g)[i] += self.grad[i] * d;
                   }
                 });
}

inline Tensor relu(const Tensor& x) { return unary_map(x, Activation::relu); }
inline Tensor gelu(const Tensor& x) { return unary_map(x, Activation::gelu); }

// ---------------------------------------------------------------------------
// Row-wise normalizations

enum class Masking { none, causal };

// Row-max stabilized softmax. With causal masking, entry (i, j) for j > i is
// excluded and set to exactly 0.
inline Tensor softmax_rows(const Tensor& x, Masking mask = Masking::none) {
  detail::require_rank2(x, "softmax_rows");
  const auto p = x.rows(), q = x.cols();
  const auto& v = x.node()->value;
  std::vector<double> out(p * q, 0.0);
  for (std::size_t i = 0; i < p; ++i) {
    const std::size_t end = mask == Masking::causal ? std::min(q, i + 1) : q;
    double mx = v[i * q];
    for (std::size_t j = 1; j < end; ++j) mx = std::max(mx, v[i * q + j]);
    double total = 0.0;
    for (std::size_t j = 0; j < end; ++j) {
      out[i * q + j] = std::exp(v[i * q + j] - mx);
      total += out[i * q + j];
    }
    for (std::size_t j = 0; j < end; ++j) out[i * q + j] /= total;
  }
  return make_op("softmax_rows", x.shape(), std::move(out), {x},
                 [p, q](TensorNode& self) {
                   auto* g = grad_sink(self, 0);
                   const auto& y = self.value;
                   for (std::size_t i = 0; i < p; ++i) {
                     double dot = 0.0;
                     for (std::size_t j = 0; j < q; ++j)
                       dot += self.grad[i * q + j] * y[i * q + j];
                     for (std::size_t j = 0; j < q; ++j)
                       (*g)[i * q + j] += y[i * q + j] * (self.grad[i * q + j] - dot);
                   }
                 });
}

// Per-row standardization (population variance) followed by gain/bias.
inline Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias,
                         double eps = 1e-5) {
  detail::require_rank2(x, "layer_norm");
  if (eps <= 0) throw ContractError("layer_norm: eps must be positive");
  const auto p = x.rows(), q = x.cols();
  if (gain.size() != q || bias.size() != q) {
    throw DimensionError("layer_norm: gain/bias extent must equal row width");
  }
  const auto& v = x.node()->value;
  std::vector<double> out(p * q);
  std::vector<double> xhat(p * q);
  std::vector<double> rstd(p);
  for (std::size_t i = 0; i < p; ++i) {
    double mean = 0.0;
    for (std::size_t j = 0; j < q; ++j) mean += v[i * q + j];
    mean /= static_cast<double>(q);
    double var = 0.0;
    for (std::size_t j = 0; j < q; ++j) {
      const double d = v[i * q + j] - mean;
      var += d * d;
    }
    var /= static_cast<double>(q);
    rstd[i] = 1.0 / std::sqrt(var + eps);
    for (std::size_t j = 0; j < q; ++j) {
      xhat[i * q + j] = (v[i * q + j] - mean) * rstd[i];
      out[i * q + j] = xhat[i * q + j] * gain[j] + bias[j];
    }
  }
  return make_op(
      "layer_norm", x.shape(), std::move(out), {x, gain, bias},
      [p, q, xhat = std::move(xhat), rstd = std::move(rstd)](TensorNode& self) {
        const auto& gv = self.inputs[1]->value;
        if (auto* gx = grad_sink(self, 0)) {
          for (std::size_t i = 0; i < p; ++i) {
            double mean_d = 0.0, mean_dx = 0.0;
            for (std::size_t j = 0; j < q; ++j) {
              const double d = self.grad[i * q + j] * gv[j];
              mean_d += d;
              mean_dx += d * xhat[i * q + j];
            }
            mean_d /= static_cast<double>(q);
            mean_dx /= static_cast<double>(q);
            for (std::size_t j = 0; j < q; ++j) {
              const double d = self.grad[i * q + j] * gv[j];
              (*gx)[i * q + j] += rstd[i] * (d - mean_d - xhat[i * q + j] * mean_dx);
            }
          }
        }
        if (auto* gg = grad_sink(self, 1))
          for (std::size_t i = 0; i < p; ++i)
            for (std::size_t j = 0; j < q; ++j)
              (*gg)[j] += self.grad[i * q + j] * xhat[i * q + j];
        if (auto* gb = grad_sink(self, 2))
          for (std::size_t i = 0; i < p; ++i)
            for (std::size_t j = 0; j < q; ++j) (*gb)[j] += self.grad[i * q + j];
      });
}

// u·v / (max(|u|, eps) · max(|v|, eps)). Never fails on zero vectors.
inline double cosine_similarity(std::span<const double> u,
                                std::span<const double> v, double eps = 1e-12) {
  if (u.size() != v.size()) {
    throw DimensionError("cosine_similarity: length mismatch");
  }
  if (eps <= 0) throw ContractError("cosine_similarity: eps must be positive");
  double dot = 0.0, nu = 0.0, nv = 0.0;
  for (std::size_t i = 0; i < u.size(); ++i) {
    dot += u[i] * v[i];
    nu += u[i] * u[i];
    nv += v[i] * v[i];
  }
  const double c = dot / (std::max(std::sqrt(nu), eps) * std::max(std::sqrt(nv), eps));
  return std::clamp(c, -1.0, 1.0);
}

inline double cosine_similarity(const Tensor& u, const Tensor& v,
                                double eps = 1e-12) {
  return cosine_similarity(u.values(), v.values(), eps);
}

// ---------------------------------------------------------------------------
// Structural ops

inline Tensor slice_rows(const Tensor& x, std::size_t begin, std::size_t count) {
  detail::require_rank2(x, "slice_rows");
  const auto q = x.cols();
  if (count == 0 || begin + count > x.rows()) {
    throw DimensionError("slice_rows: range out of bounds");
  }
  const auto& v = x.node()->value;
  std::vector<double> out(v.begin() + static_cast<std::ptrdiff_t>(begin * q),
                          v.begin() + static_cast<std::ptrdiff_t>((begin + count) * q));
  return make_op("slice_rows", {count, q}, std::move(out), {x},
                 [begin, q](TensorNode& self) {
                   auto* g = grad_sink(self, 0);
                   for (std::size_t i = 0; i < self.grad.size(); ++i)
                     (*g)[begin * q + i] += self.grad[i];
                 });
}

inline Tensor slice_cols(const Tensor& x, std::size_t begin, std::size_t count) {
  detail::require_rank2(x, "slice_cols");
  const auto p = x.rows(), q = x.cols();
  if (count == 0 || begin + count > q) {
    throw DimensionError("slice_cols: range out of bounds");
  }
  const auto& v = x.node()->value;
  std::vector<double> out(p * count);
  for (std::size_t i = 0; i < p; ++i)
    for (std::size_t j = 0; j < count; ++j) out[i * count + j] = v[i * q + begin + j];
  return make_op("slice_cols", {p, count}, std::move(out), {x},
                 [p, q, begin, count](TensorNode& self) {
                   auto* g = grad_sink(self, 0);
                   for (std::size_t i = 0; i < p; ++i)
                     for (std::size_t j = 0; j < count; ++j)
                       (*g)[i * q + begin + j] += self.grad[i * count + j];
                 });
}

inline Tensor concat_rows(const std::vector<Tensor>& parts) {
  if (parts.empty()) throw DimensionError("concat_rows: no inputs");
  const auto q = parts.front().cols();
  std::size_t total = 0;
  for (const auto& t : parts) {
    detail::require_rank2(t, "concat_rows");
    if (t.cols() != q) throw DimensionError("concat_rows: column mismatch");
    total += t.rows();
  }
  std::vector<double> out;
  out.reserve(total * q);
  std::vector<std::size_t> offsets;
  for (const auto& t : parts) {
    offsets.push_back(out.size());
    out.insert(out.end(), t.values().begin(), t.values().end());
  }
  return make_op("concat_rows", {total, q}, std::move(out), parts,
                 [offsets = std::move(offsets)](TensorNode& self) {
                   for (std::size_t k = 0; k < self.inputs.size(); ++k) {
                     if (auto* g = grad_sink(self, k))
                       for (std::size_t i = 0; i < g->size(); ++i)
                         (*g)[i] += self.grad[offsets[k] + i];
                   }
                 });
}

inline Tensor concat_cols(const std::vector<Tensor>& parts) {
  if (parts.empty()) throw DimensionError("concat_cols: no inputs");
  const auto p = parts.front().rows();
  std::size_t total = 0;
  std::vector<std::size_t> offsets;
  for (const auto& t : parts) {
    detail::require_rank2(t, "concat_cols");
    if (t.rows() != p) throw DimensionError("concat_cols: row mismatch");
    offsets.push_back(total);
    total += t.cols();
  }
  std::vector<double> out(p * total);
  for (std::size_t k = 0; k < parts.size(); ++k) {
    const auto c = parts[k].cols();
    for (std::size_t i = 0; i < p; ++i)
      for (std::size_t j = 0; j < c; ++j)
        out[i * total + offsets[k] + j] = parts[k][i * c + j];
  }
  return make_op("concat_cols", {p, total}, std::move(out), parts,
                 [p, total, offsets = std::move(offsets)](TensorNode& self) {
                   for (std::size_t k = 0; k < self.inputs.size(); ++k) {
                     auto* g = grad_sink(self, k);
                     if (!g) continue;
                     const auto c = self.inputs[k]->shape[1];
                     for (std::size_t i = 0; i < p; ++i)
                       for (std::size_t j = 0; j < c; ++j)
                         (*g)[i * c + j] += self.grad[i * total + offsets[k] + j];
                   }
                 });
}

inline Tensor reshape(const Tensor& x, Shape shape) {
  if (shape_size(shape) != x.size()) {
    throw DimensionError("reshape: " + shape_string(x.shape()) + " -> " +
                         shape_string(shape));
  }
  std::vector<double> out(x.values().begin(), x.values().end());
  return make_op("reshape", std::move(shape), std::move(out), {x},
                 [](TensorNode& self) {
                   auto* g = grad_sink(self, 0);
                   for (std::size_t i = 0; i < g->size(); ++i)
                     (*g)[i] += self.grad[i];
                 });
}

// Row lookup; repeated ids accumulate into the same table row.
inline Tensor gather_rows(const Tensor& table, std::span<const int> ids) {
  detail::require_rank2(table, "gather_rows");
  const auto q = table.cols();
  if (ids.empty()) throw DimensionError("gather_rows: no ids");
  std::vector<int> idx(ids.begin(), ids.end());
  std::vector<double> out(idx.size() * q);
  for (std::size_t i = 0; i < idx.size(); ++i) {
    if (idx[i] < 0 || static_cast<std::size_t>(idx[i]) >= table.rows()) {
      throw DimensionError("gather_rows: id " + std::to_string(idx[i]) +
                           " out of range");
    }
    std::copy_n(table.values().begin() + static_cast<std::ptrdiff_t>(idx[i] * q), q,
                out.begin() + static_cast<std::ptrdiff_t>(i * q));
  }
  const auto n = idx.size();
  return make_op("gather_rows", {n, q}, std::move(out), {table},
                 [q, idx = std::move(idx)](TensorNode& self) {
                   auto* g = grad_sink(self, 0);
                   for (std::size_t i = 0; i < idx.size(); ++i)
                     for (std::size_t j = 0; j < q; ++j)
                       (*g)[static_cast<std::size_t>(idx[i]) * q + j] += self.grad[i * q + j];
                 });
}

// Prepends `count` zero rows.
inline Tensor pad_rows_front(const Tensor& x, std::size_t count) {
  if (count == 0) return x;
  return concat_rows({Tensor::zeros({count, x.cols()}), x});
}

// ---------------------------------------------------------------------------
// Reductions and losses

inline Tensor sum(const Tensor& x) {
  double s = 0.0;
  for (double v : x.values()) s += v;
  return make_op("sum", {1}, {s}, {x}, [](TensorNode& self) {
    auto* g = grad_sink(self, 0);
    for (auto& v : *g) v += self.grad[0];
  });
}

inline Tensor mean(const Tensor& x) {
  return affine(sum(x), 1.0 / static_cast<double>(x.size()));
}

inline void require_target(const Tensor& pred, std::span<const double> target,
                           const char* op) {
  if (pred.size() != target.size()) {
    throw DimensionError(std::string(op) + ": prediction has " +
                         std::to_string(pred.size()) + " values, target " +
                         std::to_string(target.size()));
  }
  if (target.empty()) throw DimensionError(std::string(op) + ": empty target");
}

inline Tensor mse_loss(const Tensor& pred, std::span<const double> target) {
  require_target(pred, target, "mse_loss");
  std::vector<double> t(target.begin(), target.end());
  const double h = static_cast<double>(t.size());
  double acc = 0.0;
  for (std::size_t i = 0; i < t.size(); ++i) {
    const double d = pred[i] - t[i];
    acc += d * d;
  }
  return make_op("mse_loss", {1}, {acc / h}, {pred},
                 [t = std::move(t), h](TensorNode& self) {
                   auto* g = grad_sink(self, 0);
                   const auto& p = self.inputs[0]->value;
                   for (std::size_t i = 0; i < t.size(); ++i)
                     (*g)[i] += self.grad[0] * 2.0 * (p[i] - t[i]) / h;
                 });
}

// (200/H) Σ |y − ŷ| / max(|y| + |ŷ|, floor)
inline Tensor smape_loss(const Tensor& pred, std::span<const double> target,
                         double floor = 1e-8) {
  require_target(pred, target, "smape_loss");
  std::vector<double> t(target.begin(), target.end());
  const double h = static_cast<double>(t.size());
  double acc = 0.0;
  for (std::size_t i = 0; i < t.size(); ++i) {
    acc += std::abs(t[i] - pred[i]) / std::max(std::abs(t[i]) + std::abs(pred[i]), floor);
  }
  return make_op(
      "smape_loss", {1}, {200.0 * acc / h}, {pred},
      [t = std::move(t), h, floor](TensorNode& self) {
        auto* g = grad_sink(self, 0);
        const auto& p = self.inputs[0]->value;
        auto sign = [](double v) { return static_cast<double>((v > 0) - (v < 0)); };
        for (std::size_t i = 0; i < t.size(); ++i) {
          const double a = p[i] - t[i];
          const double raw = std::abs(t[i]) + std::abs(p[i]);
          double d;
          if (raw > floor) {
            d = sign(a) / raw - std::abs(a) * sign(p[i]) / (raw * raw);
          } else {
            d = sign(a) / floor;
          }
          (*g)[i] += self.grad[0] * 200.0 * d / h;
        }
      });
}

// Mean over rows of −log softmax(logits)[label].
inline Tensor cross_entropy(const Tensor& logits, std::span<const int> labels) {
  detail::require_rank2(logits, "cross_entropy");
  const auto b = logits.rows(), c = logits.cols();
  if (labels.size() != b) throw DimensionError("cross_entropy: label count");
  std::vector<int> lab(labels.begin(), labels.end());
  std::vector<double> prob(b * c);
  double loss = 0.0;
  for (std::size_t i = 0; i < b; ++i) {
    if (lab[i] < 0 || static_cast<std::size_t>(lab[i]) >= c) {
      throw DimensionError("cross_entropy: label out of range");
    }
    double mx = logits[i * c];
    for (std::size_t j = 1; j < c; ++j) mx = std::max(mx, logits[i * c + j]);
    double z = 0.0;
    for (std::size_t j = 0; j < c; ++j) {
      prob[i * c + j] = std::exp(logits[i * c + j] - mx);
      z += prob[i * c + j];
    }
    for (std::size_t j = 0; j < c; ++j) prob[i * c + j] /= z;
    loss += -(logits[i * c + static_cast<std::size_t>(lab[i])] - mx - std::log(z));
  }
  const double nb = static_cast<double>(b);
  return make_op("cross_entropy", {1}, {loss / nb}, {logits},
                 [b, c, nb, lab = std::move(lab), prob = std::move(prob)](TensorNode& self) {
                   auto* g = grad_sink(self, 0);
                   for (std::size_t i = 0; i < b; ++i)
                     for (std::size_t j = 0; j < c; ++j) {
                       const double onehot = static_cast<std::size_t>(lab[i]) == j ? 1.0 : 0.0;
                       (*g)[i * c + j] += self.grad[0] * (prob[i * c + j] - onehot) / nb;
                     }
                 });
}

}  // namespace ctxalign
