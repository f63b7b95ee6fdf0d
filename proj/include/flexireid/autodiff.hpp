// SPDX-License-Identifier: Apache-2.0
#pragma once

// Dense 64-bit tensors with a reverse-mode tape.
//
// Tensors are cheap shared handles. Operations in `flexireid::ad` compute
// eagerly and, when a Tape is active on the calling thread and at least one
// input requires a gradient, append a node holding the vector-Jacobian
// product. Tape::backward walks the nodes in exact reverse append order.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstring>
#include <functional>
#include <limits>
#include <memory>
#include <numeric>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace flexireid {

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class ShapeError : public Error {
 public:
  using Error::Error;
};

class NonFiniteError : public Error {
 public:
  using Error::Error;
};

class GraphError : public Error {
 public:
  using Error::Error;
};

namespace ad {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1},
                         std::multiplies<>());
}

inline std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ", ";
    os << shape[i];
  }
  os << ']';
  return os.str();
}

enum class OpKind {
  add,
  sub,
  mul,
  scale,
  add_row,
  matmul,
  matmul_nt,
  transpose,
  softmax_rows,
  log_softmax_rows,
  layer_norm_rows,
  gelu,
  log_clamped,
  concat_rows,
  concat_cols,
  slice_rows,
  slice_cols,
  mean_rows,
  sum_rows,
  sum,
  scale_rows,
  column,
  l2_normalize_rows,
  pad_rows,
  reshape,
  custom,
};

inline const char* op_name(OpKind kind) {
  switch (kind) {
    case OpKind::add: return "add";
    case OpKind::sub: return "sub";
    case OpKind::mul: return "mul";
    case OpKind::scale: return "scale";
    case OpKind::add_row: return "add_row";
    case OpKind::matmul: return "matmul";
    case OpKind::matmul_nt: return "matmul_nt";
    case OpKind::transpose: return "transpose";
    case OpKind::softmax_rows: return "softmax_rows";
    case OpKind::log_softmax_rows: return "log_softmax_rows";
    case OpKind::layer_norm_rows: return "layer_norm_rows";
    case OpKind::gelu: return "gelu";
    case OpKind::log_clamped: return "log_clamped";
    case OpKind::concat_rows: return "concat_rows";
    case OpKind::concat_cols: return "concat_cols";
    case OpKind::slice_rows: return "slice_rows";
    case OpKind::slice_cols: return "slice_cols";
    case OpKind::mean_rows: return "mean_rows";
    case OpKind::sum_rows: return "sum_rows";
    case OpKind::sum: return "sum";
    case OpKind::scale_rows: return "scale_rows";
    case OpKind::column: return "column";
    case OpKind::l2_normalize_rows: return "l2_normalize_rows";
    case OpKind::pad_rows: return "pad_rows";
    case OpKind::reshape: return "reshape";
    case OpKind::custom: return "custom";
  }
  return "unknown";
}

namespace detail {

struct TensorImpl {
  Shape shape;
  std::vector<double> data;
  std::vector<double> grad;  // empty until a gradient is accumulated
  bool requires_grad = false;
};

}  // namespace detail

class Tensor {
 public:
  Tensor() = default;

  Tensor(Shape shape, std::vector<double> data, bool requires_grad = false)
      : impl_(std::make_shared<detail::TensorImpl>()) {
    if (shape.empty()) throw ShapeError("tensor shape must have rank >= 1");
    for (auto d : shape) {
      if (d == 0) throw ShapeError("tensor dimensions must be positive, got " + shape_str(shape));
    }
    if (shape_numel(shape) != data.size()) {
      throw ShapeError("data length " + std::to_string(data.size()) +
                       " does not match shape " + shape_str(shape));
    }
    impl_->shape = std::move(shape);
    impl_->data = std::move(data);
    impl_->requires_grad = requires_grad;
  }

  static Tensor zeros(Shape shape, bool requires_grad = false) {
    auto n = shape_numel(shape);
    return Tensor(std::move(shape), std::vector<double>(n, 0.0), requires_grad);
  }

  static Tensor scalar(double v) { return Tensor({1}, {v}); }

  static Tensor vector(std::vector<double> v, bool requires_grad = false) {
    Shape s{v.size()};
    return Tensor(std::move(s), std::move(v), requires_grad);
  }

  static Tensor matrix(std::size_t rows, std::size_t cols, std::vector<double> v,
                       bool requires_grad = false) {
    return Tensor({rows, cols}, std::move(v), requires_grad);
  }

  bool defined() const { return static_cast<bool>(impl_); }
  const Shape& shape() const { return impl_->shape; }
  std::size_t rank() const { return impl_->shape.size(); }
  std::size_t numel() const { return impl_->data.size(); }

  // Rank-1 tensors behave as a single row.
  std::size_t rows() const { return rank() == 1 ? 1 : impl_->shape[0]; }
  std::size_t cols() const { return impl_->shape.back(); }

  std::span<const double> data() const { return impl_->data; }
  std::span<double> mutable_data() { return impl_->data; }
  double operator[](std::size_t i) const { return impl_->data[i]; }
  double at(std::size_t r, std::size_t c) const { return impl_->data[r * cols() + c]; }
  double item() const {
    if (numel() != 1) throw ShapeError("item() on non-scalar tensor " + shape_str(shape()));
    return impl_->data[0];
  }

  bool requires_grad() const { return impl_->requires_grad; }
  void set_requires_grad(bool v) { impl_->requires_grad = v; }

  bool has_grad() const { return !impl_->grad.empty(); }
  std::span<const double> grad() const { return impl_->grad; }
  std::span<double> grad_buffer() {
    if (impl_->grad.empty()) impl_->grad.assign(impl_->data.size(), 0.0);
    return impl_->grad;
  }
  void zero_grad() { impl_->grad.clear(); }

  // Deep copy detached from any tape.
  Tensor clone() const { return Tensor(shape(), impl_->data, requires_grad()); }

  bool same(const Tensor& other) const { return impl_ == other.impl_; }

 private:
  std::shared_ptr<detail::TensorImpl> impl_;
};

class Tape {
 public:
  struct Node {
    OpKind kind;
    std::vector<Tensor> inputs;
    Tensor output;
    std::function<void(const Node&)> backward;
  };

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  static Tape*& active() {
    thread_local Tape* current = nullptr;
    return current;
  }

  void record(OpKind kind, std::vector<Tensor> inputs, Tensor output,
              std::function<void(const Node&)> backward) {
    output.set_requires_grad(true);
    nodes_.push_back(Node{kind, std::move(inputs), std::move(output), std::move(backward)});
  }

  std::size_t size() const { return nodes_.size(); }
  const std::vector<Node>& nodes() const { return nodes_; }
  void clear() { nodes_.clear(); }

  // Populates d(root)/d(leaf) on every requires_grad leaf reachable from
  // root. Leaf gradients accumulate until zero_grad().
  void backward(Tensor root) {
    if (!root.defined() || root.numel() != 1) {
      throw GraphError("backward requires a scalar root, got shape " +
                       (root.defined() ? shape_str(root.shape()) : std::string("<undefined>")));
    }
    auto it = std::find_if(nodes_.rbegin(), nodes_.rend(),
                           [&](const Node& n) { return n.output.same(root); });
    if (it == nodes_.rend()) {
      throw GraphError("backward root was not produced on this tape (detached graph)");
    }
    // Intermediate gradients from an earlier pass must not leak in.
    for (auto& n : nodes_) n.output.zero_grad();
    root.grad_buffer()[0] = 1.0;
    for (; it != nodes_.rend(); ++it) {
      if (!it->output.has_grad()) continue;
      it->backward(*it);
    }
  }

 private:
  std::vector<Node> nodes_;
};

// Makes `tape` the active tape for this thread for the scope's lifetime.
class TapeScope {
 public:
  explicit TapeScope(Tape& tape) : previous_(Tape::active()) { Tape::active() = &tape; }
  ~TapeScope() { Tape::active() = previous_; }
  TapeScope(const TapeScope&) = delete;
  TapeScope& operator=(const TapeScope&) = delete;

 private:
  Tape* previous_;
};

// Suspends recording, e.g. for evaluation passes inside a training step.
class NoGradScope {
 public:
  NoGradScope() : previous_(Tape::active()) { Tape::active() = nullptr; }
  ~NoGradScope() { Tape::active() = previous_; }
  NoGradScope(const NoGradScope&) = delete;
  NoGradScope& operator=(const NoGradScope&) = delete;

 private:
  Tape* previous_;
};

namespace detail {

inline void check_finite(OpKind kind, std::initializer_list<const Tensor*> inputs) {
  for (const Tensor* t : inputs) {
    for (double v : t->data()) {
      if (!std::isfinite(v)) {
        throw NonFiniteError(std::string(op_name(kind)) + ": non-finite input value");
      }
    }
  }
}

inline void check_finite(OpKind kind, std::span<const Tensor> inputs) {
  for (const Tensor& t : inputs) check_finite(kind, {&t});
}

[[noreturn]] inline void shape_fail(OpKind kind, const std::string& what,
                                    std::initializer_list<const Tensor*> operands) {
  std::ostringstream os;
  os << op_name(kind) << ": " << what << " (shapes";
  for (const Tensor* t : operands) os << ' ' << shape_str(t->shape());
  os << ')';
  throw ShapeError(os.str());
}

inline bool wants_grad(std::span<const Tensor> inputs) {
  if (Tape::active() == nullptr) return false;
  return std::any_of(inputs.begin(), inputs.end(),
                     [](const Tensor& t) { return t.requires_grad(); });
}

// Records `out` if any input requires a gradient on the active tape.
inline Tensor finish(OpKind kind, std::vector<Tensor> inputs, Tensor out,
                     std::function<void(const Tape::Node&)> vjp) {
  if (wants_grad(inputs)) Tape::active()->record(kind, std::move(inputs), out, std::move(vjp));
  return out;
}

// Gradient sink for input `i` of `node`, or empty span when it needs none.
inline std::span<double> sink(const Tape::Node& node, std::size_t i) {
  Tensor t = node.inputs[i];
  if (!t.requires_grad()) return {};
  return t.grad_buffer();
}

inline void require_matrix(OpKind kind, const Tensor& a) {
  if (a.rank() != 2) shape_fail(kind, "expected a rank-2 operand", {&a});
}

// c[M,N] += a[M,K] * b[K,N]
inline void gemm_nn(const double* a, const double* b, double* c, std::size_t m, std::size_t k,
                    std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    double* crow = c + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const double av = a[i * k + p];
      if (av == 0.0) continue;
      const double* brow = b + p * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

// c[M,N] += a[M,K] * b[N,K]^T, four output columns at a time.
inline void gemm_nt(const double* a, const double* b, double* c, std::size_t m, std::size_t k,
                    std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    const double* arow = a + i * k;
    double* crow = c + i * n;
    std::size_t j = 0;
    for (; j + 4 <= n; j += 4) {
      const double* b0 = b + j * k;
      const double* b1 = b0 + k;
      const double* b2 = b1 + k;
      const double* b3 = b2 + k;
      double s0 = 0.0, s1 = 0.0, s2 = 0.0, s3 = 0.0;
      for (std::size_t p = 0; p < k; ++p) {
        const double av = arow[p];
        s0 += av * b0[p];
        s1 += av * b1[p];
        s2 += av * b2[p];
        s3 += av * b3[p];
      }
      crow[j] += s0;
      crow[j + 1] += s1;
      crow[j + 2] += s2;
      crow[j + 3] += s3;
    }
    for (; j < n; ++j) {
      const double* brow = b + j * k;
      double acc = 0.0;
      for (std::size_t p = 0; p < k; ++p) acc += arow[p] * brow[p];
      crow[j] += acc;
    }
  }
}

// c[K,N] += a[M,K]^T * b[M,N]
inline void gemm_tn(const double* a, const double* b, double* c, std::size_t m, std::size_t k,
                    std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    const double* arow = a + i * k;
    const double* brow = b + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const double av = arow[p];
      if (av == 0.0) continue;
      double* crow = c + p * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

inline double gelu_value(double x) { return 0.5 * x * (1.0 + std::erf(x / std::sqrt(2.0))); }

inline double gelu_derivative(double x) {
  constexpr double inv_sqrt_2pi = 0.39894228040143267794;
  return 0.5 * (1.0 + std::erf(x / std::sqrt(2.0))) + x * inv_sqrt_2pi * std::exp(-0.5 * x * x);
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise

inline Tensor add(const Tensor& a, const Tensor& b) {
  constexpr auto kind = OpKind::add;
  if (a.shape() != b.shape()) detail::shape_fail(kind, "operands must have equal shapes", {&a, &b});
  detail::check_finite(kind, {&a, &b});
  std::vector<double> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] + b[i];
  return detail::finish(kind, {a, b}, Tensor(a.shape(), std::move(out)), [](const Tape::Node& n) {
    auto g = n.output.grad();
    for (std::size_t k = 0; k < 2; ++k) {
      auto s = detail::sink(n, k);
      for (std::size_t i = 0; i < s.size(); ++i) s[i] += g[i];
    }
  });
}

inline Tensor sub(const Tensor& a, const Tensor& b) {
  constexpr auto kind = OpKind::sub;
  if (a.shape() != b.shape()) detail::shape_fail(kind, "operands must have equal shapes", {&a, &b});
  detail::check_finite(kind, {&a, &b});
  std::vector<double> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] - b[i];
  return detail::finish(kind, {a, b}, Tensor(a.shape(), std::move(out)), [](const Tape::Node& n) {
    auto g = n.output.grad();
    auto sa = detail::sink(n, 0);
    for (std::size_t i = 0; i < sa.size(); ++i) sa[i] += g[i];
    auto sb = detail::sink(n, 1);
    for (std::size_t i = 0; i < sb.size(); ++i) sb[i] -= g[i];
  });
}

inline Tensor mul(const Tensor& a, const Tensor& b) {
  constexpr auto kind = OpKind::mul;
  if (a.shape() != b.shape()) detail::shape_fail(kind, "operands must have equal shapes", {&a, &b});
  detail::check_finite(kind, {&a, &b});
  std::vector<double> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] * b[i];
  return detail::finish(kind, {a, b}, Tensor(a.shape(), std::move(out)), [](const Tape::Node& n) {
    auto g = n.output.grad();
    const auto& a = n.inputs[0];
    const auto& b = n.inputs[1];
    auto sa = detail::sink(n, 0);
    for (std::size_t i = 0; i < sa.size(); ++i) sa[i] += g[i] * b[i];
    auto sb = detail::sink(n, 1);
    for (std::size_t i = 0; i < sb.size(); ++i) sb[i] += g[i] * a[i];
  });
}

inline Tensor scale(const Tensor& a, double factor) {
  constexpr auto kind = OpKind::scale;
  detail::check_finite(kind, {&a});
  if (!std::isfinite(factor)) throw NonFiniteError("scale: non-finite factor");
  std::vector<double> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] * factor;
  return detail::finish(kind, {a}, Tensor(a.shape(), std::move(out)),
                        [factor](const Tape::Node& n) {
                          auto g = n.output.grad();
                          auto s = detail::sink(n, 0);
                          for (std::size_t i = 0; i < s.size(); ++i) s[i] += g[i] * factor;
                        });
}

inline Tensor gelu(const Tensor& a) {
  constexpr auto kind = OpKind::gelu;
  detail::check_finite(kind, {&a});
  std::vector<double> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = detail::gelu_value(a[i]);
  return detail::finish(kind, {a}, Tensor(a.shape(), std::move(out)), [](const Tape::Node& n) {
    auto g = n.output.grad();
    const auto& x = n.inputs[0];
    auto s = detail::sink(n, 0);
    for (std::size_t i = 0; i < s.size(); ++i) s[i] += g[i] * detail::gelu_derivative(x[i]);
  });
}

// log(max(a, floor)); the clamp removes the 0 * log 0 singularity.
inline Tensor log_clamped(const Tensor& a, double floor = 1e-12) {
  constexpr auto kind = OpKind::log_clamped;
  detail::check_finite(kind, {&a});
  std::vector<double> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::log(std::max(a[i], floor));
  return detail::finish(kind, {a}, Tensor(a.shape(), std::move(out)),
                        [floor](const Tape::Node& n) {
                          auto g = n.output.grad();
                          const auto& x = n.inputs[0];
                          auto s = detail::sink(n, 0);
                          for (std::size_t i = 0; i < s.size(); ++i) {
                            if (x[i] > floor) s[i] += g[i] / x[i];
                          }
                        });
}

// ---------------------------------------------------------------------------
// Linear algebra

// a[M,K] * b[K,N]
inline Tensor matmul(const Tensor& a, const Tensor& b) {
  constexpr auto kind = OpKind::matmul;
  detail::require_matrix(kind, a);
  detail::require_matrix(kind, b);
  if (a.cols() != b.rows()) detail::shape_fail(kind, "inner dimensions differ", {&a, &b});
  detail::check_finite(kind, {&a, &b});
  const std::size_t m = a.rows(), k = a.cols(), n = b.cols();
  std::vector<double> out(m * n, 0.0);
  detail::gemm_nn(a.data().data(), b.data().data(), out.data(), m, k, n);
  return detail::finish(kind, {a, b}, Tensor({m, n}, std::move(out)),
                        [m, k, n](const Tape::Node& node) {
                          auto g = node.output.grad();
                          if (auto sa = detail::sink(node, 0); !sa.empty()) {
                            detail::gemm_nt(g.data(), node.inputs[1].data().data(), sa.data(), m,
                                            n, k);
                          }
                          if (auto sb = detail::sink(node, 1); !sb.empty()) {
                            detail::gemm_tn(node.inputs[0].data().data(), g.data(), sb.data(), m,
                                            k, n);
                          }
                        });
}

// a[M,K] * b[N,K]^T, the layout of linear-layer weights.
inline Tensor matmul_nt(const Tensor& a, const Tensor& b) {
  constexpr auto kind = OpKind::matmul_nt;
  detail::require_matrix(kind, a);
  detail::require_matrix(kind, b);
  if (a.cols() != b.cols()) detail::shape_fail(kind, "inner dimensions differ", {&a, &b});
  detail::check_finite(kind, {&a, &b});
  const std::size_t m = a.rows(), k = a.cols(), n = b.rows();
  std::vector<double> out(m * n, 0.0);
  detail::gemm_nt(a.data().data(), b.data().data(), out.data(), m, k, n);
  return detail::finish(kind, {a, b}, Tensor({m, n}, std::move(out)),
                        [m, k, n](const Tape::Node& node) {
                          auto g = node.output.grad();
                          if (auto sa = detail::sink(node, 0); !sa.empty()) {
                            detail::gemm_nn(g.data(), node.inputs[1].data().data(), sa.data(), m,
                                            n, k);
                          }
                          if (auto sb = detail::sink(node, 1); !sb.empty()) {
                            detail::gemm_tn(g.data(), node.inputs[0].data().data(), sb.data(), m,
                                            n, k);
                          }
                        });
}

inline Tensor transpose(const Tensor& a) {
  constexpr auto kind = OpKind::transpose;
  detail::require_matrix(kind, a);
  detail::check_finite(kind, {&a});
  const std::size_t r = a.rows(), c = a.cols();
  std::vector<double> out(r * c);
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) out[j * r + i] = a.at(i, j);
  return detail::finish(kind, {a}, Tensor({c, r}, std::move(out)), [r, c](const Tape::Node& n) {
    auto g = n.output.grad();
    auto s = detail::sink(n, 0);
    if (s.empty()) return;
    for (std::size_t i = 0; i < r; ++i)
      for (std::size_t j = 0; j < c; ++j) s[i * c + j] += g[j * r + i];
  });
}

// a[R,C] + bias[C] broadcast over rows.
inline Tensor add_row(const Tensor& a, const Tensor& bias) {
  constexpr auto kind = OpKind::add_row;
  if (bias.rank() != 1 || bias.numel() != a.cols()) {
    detail::shape_fail(kind, "bias length must equal column count", {&a, &bias});
  }
  detail::check_finite(kind, {&a, &bias});
  const std::size_t r = a.rows(), c = a.cols();
  std::vector<double> out(a.numel());
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) out[i * c + j] = a[i * c + j] + bias[j];
  return detail::finish(kind, {a, bias}, Tensor(a.shape(), std::move(out)),
                        [r, c](const Tape::Node& n) {
                          auto g = n.output.grad();
                          auto sa = detail::sink(n, 0);
                          for (std::size_t i = 0; i < sa.size(); ++i) sa[i] += g[i];
                          auto sb = detail::sink(n, 1);
                          if (sb.empty()) return;
                          for (std::size_t i = 0; i < r; ++i)
                            for (std::size_t j = 0; j < c; ++j) sb[j] += g[i * c + j];
                        });
}

// Row i of a[R,C] multiplied by w[i].
inline Tensor scale_rows(const Tensor& a, const Tensor& w) {
  constexpr auto kind = OpKind::scale_rows;
  if (w.rank() != 1 || w.numel() != a.rows()) {
    detail::shape_fail(kind, "weight length must equal row count", {&a, &w});
  }
  detail::check_finite(kind, {&a, &w});
  const std::size_t r = a.rows(), c = a.cols();
  std::vector<double> out(a.numel());
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) out[i * c + j] = a[i * c + j] * w[i];
  return detail::finish(kind, {a, w}, Tensor(a.shape(), std::move(out)),
                        [r, c](const Tape::Node& n) {
                          auto g = n.output.grad();
                          const auto& a = n.inputs[0];
                          const auto& w = n.inputs[1];
                          if (auto sa = detail::sink(n, 0); !sa.empty()) {
                            for (std::size_t i = 0; i < r; ++i)
                              for (std::size_t j = 0; j < c; ++j)
                                sa[i * c + j] += g[i * c + j] * w[i];
                          }
                          if (auto sw = detail::sink(n, 1); !sw.empty()) {
                            for (std::size_t i = 0; i < r; ++i) {
                              double acc = 0.0;
                              for (std::size_t j = 0; j < c; ++j) acc += g[i * c + j] * a[i * c + j];
                              sw[i] += acc;
                            }
                          }
                        });
}

// ---------------------------------------------------------------------------
// Normalizations (row-wise over the last axis; rank-1 is one row)

inline Tensor softmax_rows(const Tensor& a) {
  constexpr auto kind = OpKind::softmax_rows;
  detail::check_finite(kind, {&a});
  const std::size_t r = a.rows(), c = a.cols();
  std::vector<double> out(a.numel());
  for (std::size_t i = 0; i < r; ++i) {
    const double* x = a.data().data() + i * c;
    double* y = out.data() + i * c;
    const double mx = *std::max_element(x, x + c);
    double total = 0.0;
    for (std::size_t j = 0; j < c; ++j) total += (y[j] = std::exp(x[j] - mx));
    for (std::size_t j = 0; j < c; ++j) y[j] /= total;
  }
  return detail::finish(kind, {a}, Tensor(a.shape(), std::move(out)), [r, c](const Tape::Node& n) {
    auto s = detail::sink(n, 0);
    if (s.empty()) return;
    auto g = n.output.grad();
    auto y = n.output.data();
    for (std::size_t i = 0; i < r; ++i) {
      double dot = 0.0;
      for (std::size_t j = 0; j < c; ++j) dot += g[i * c + j] * y[i * c + j];
      for (std::size_t j = 0; j < c; ++j) s[i * c + j] += y[i * c + j] * (g[i * c + j] - dot);
    }
  });
}

inline Tensor log_softmax_rows(const Tensor& a) {
  constexpr auto kind = OpKind::log_softmax_rows;
  detail::check_finite(kind, {&a});
  const std::size_t r = a.rows(), c = a.cols();
  std::vector<double> out(a.numel());
  for (std::size_t i = 0; i < r; ++i) {
    const double* x = a.data().data() + i * c;
    const double mx = *std::max_element(x, x + c);
    double total = 0.0;
    for (std::size_t j = 0; j < c; ++j) total += std::exp(x[j] - mx);
    const double lse = mx + std::log(total);
    for (std::size_t j = 0; j < c; ++j) out[i * c + j] = x[j] - lse;
  }
  return detail::finish(kind, {a}, Tensor(a.shape(), std::move(out)), [r, c](const Tape::Node& n) {
    auto s = detail::sink(n, 0);
    if (s.empty()) return;
    auto g = n.output.grad();
    auto y = n.output.data();
    for (std::size_t i = 0; i < r; ++i) {
      double gsum = 0.0;
      for (std::size_t j = 0; j < c; ++j) gsum += g[i * c + j];
      for (std::size_t j = 0; j < c; ++j)
        s[i * c + j] += g[i * c + j] - std::exp(y[i * c + j]) * gsum;
    }
  });
}

// Per-row standardization followed by gamma * x_hat + beta.
inline Tensor layer_norm_rows(const Tensor& a, const Tensor& gamma, const Tensor& beta,
                              double eps = 1e-5) {
  constexpr auto kind = OpKind::layer_norm_rows;
  const std::size_t r = a.rows(), c = a.cols();
  if (gamma.numel() != c || beta.numel() != c || gamma.rank() != 1 || beta.rank() != 1) {
    detail::shape_fail(kind, "gamma/beta length must equal column count", {&a, &gamma, &beta});
  }
  detail::check_finite(kind, {&a, &gamma, &beta});
  std::vector<double> out(a.numel());
  std::vector<double> xhat(a.numel());
  std::vector<double> inv_std(r);
  for (std::size_t i = 0; i < r; ++i) {
    const double* x = a.data().data() + i * c;
    double mean = 0.0;
    for (std::size_t j = 0; j < c; ++j) mean += x[j];
    mean /= static_cast<double>(c);
    double var = 0.0;
    for (std::size_t j = 0; j < c; ++j) var += (x[j] - mean) * (x[j] - mean);
    var /= static_cast<double>(c);
    inv_std[i] = 1.0 / std::sqrt(var + eps);
    for (std::size_t j = 0; j < c; ++j) {
      xhat[i * c + j] = (x[j] - mean) * inv_std[i];
      out[i * c + j] = gamma[j] * xhat[i * c + j] + beta[j];
    }
  }
  return detail::finish(
      kind, {a, gamma, beta}, Tensor(a.shape(), std::move(out)),
      [r, c, xhat = std::move(xhat), inv_std = std::move(inv_std)](const Tape::Node& n) {
        auto g = n.output.grad();
        const auto& gamma = n.inputs[1];
        if (auto sx = detail::sink(n, 0); !sx.empty()) {
          const double inv_c = 1.0 / static_cast<double>(c);
          for (std::size_t i = 0; i < r; ++i) {
            double sum_g = 0.0, sum_gx = 0.0;
            for (std::size_t j = 0; j < c; ++j) {
              const double gh = g[i * c + j] * gamma[j];
              sum_g += gh;
              sum_gx += gh * xhat[i * c + j];
            }
            for (std::size_t j = 0; j < c; ++j) {
              const double gh = g[i * c + j] * gamma[j];
              sx[i * c + j] +=
                  inv_std[i] * (gh - inv_c * sum_g - xhat[i * c + j] * inv_c * sum_gx);
            }
          }
        }
        if (auto sg = detail::sink(n, 1); !sg.empty()) {
          for (std::size_t i = 0; i < r; ++i)
            for (std::size_t j = 0; j < c; ++j) sg[j] += g[i * c + j] * xhat[i * c + j];
        }
        if (auto sb = detail::sink(n, 2); !sb.empty()) {
          for (std::size_t i = 0; i < r; ++i)
            for (std::size_t j = 0; j < c; ++j) sb[j] += g[i * c + j];
        }
      });
}

// Each row divided by sqrt(|row|^2 + eps).
inline Tensor l2_normalize_rows(const Tensor& a, double eps = 1e-12) {
  constexpr auto kind = OpKind::l2_normalize_rows;
  detail::check_finite(kind, {&a});
  const std::size_t r = a.rows(), c = a.cols();
  std::vector<double> out(a.numel());
  std::vector<double> inv_norm(r);
  for (std::size_t i = 0; i < r; ++i) {
    double ss = 0.0;
    for (std::size_t j = 0; j < c; ++j) ss += a[i * c + j] * a[i * c + j];
    inv_norm[i] = 1.0 / std::sqrt(ss + eps);
    for (std::size_t j = 0; j < c; ++j) out[i * c + j] = a[i * c + j] * inv_norm[i];
  }
  return detail::finish(kind, {a}, Tensor(a.shape(), std::move(out)),
                        [r, c, inv_norm = std::move(inv_norm)](const Tape::Node& n) {
                          auto s = detail::sink(n, 0);
                          if (s.empty()) return;
                          auto g = n.output.grad();
                          auto y = n.output.data();
                          for (std::size_t i = 0; i < r; ++i) {
                            double dot = 0.0;
                            for (std::size_t j = 0; j < c; ++j) dot += g[i * c + j] * y[i * c + j];
                            for (std::size_t j = 0; j < c; ++j)
                              s[i * c + j] += inv_norm[i] * (g[i * c + j] - y[i * c + j] * dot);
                          }
                        });
}

// ---------------------------------------------------------------------------
// Reductions

// Mean over axis 0: [R,C] -> [C].
inline Tensor mean_rows(const Tensor& a) {
  constexpr auto kind = OpKind::mean_rows;
  detail::check_finite(kind, {&a});
  const std::size_t r = a.rows(), c = a.cols();
  std::vector<double> out(c, 0.0);
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) out[j] += a[i * c + j];
  for (auto& v : out) v /= static_cast<double>(r);
  return detail::finish(kind, {a}, Tensor({c}, std::move(out)), [r, c](const Tape::Node& n) {
    auto s = detail::sink(n, 0);
    if (s.empty()) return;
    auto g = n.output.grad();
    const double inv = 1.0 / static_cast<double>(r);
    for (std::size_t i = 0; i < r; ++i)
      for (std::size_t j = 0; j < c; ++j) s[i * c + j] += g[j] * inv;
  });
}

// Sum over the last axis: [R,C] -> [R].
inline Tensor sum_rows(const Tensor& a) {
  constexpr auto kind = OpKind::sum_rows;
  detail::check_finite(kind, {&a});
  const std::size_t r = a.rows(), c = a.cols();
  std::vector<double> out(r, 0.0);
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) out[i] += a[i * c + j];
  return detail::finish(kind, {a}, Tensor({r}, std::move(out)), [r, c](const Tape::Node& n) {
    auto s = detail::sink(n, 0);
    if (s.empty()) return;
    auto g = n.output.grad();
    for (std::size_t i = 0; i < r; ++i)
      for (std::size_t j = 0; j < c; ++j) s[i * c + j] += g[i];
  });
}

// Sum of all entries -> shape [1].
inline Tensor sum(const Tensor& a) {
  constexpr auto kind = OpKind::sum;
  detail::check_finite(kind, {&a});
  double total = 0.0;
  for (double v : a.data()) total += v;
  return detail::finish(kind, {a}, Tensor::scalar(total), [](const Tape::Node& n) {
    auto s = detail::sink(n, 0);
    const double g = n.output.grad()[0];
    for (auto& v : s) v += g;
  });
}

// ---------------------------------------------------------------------------
// Structural

inline Tensor concat_rows(const std::vector<Tensor>& parts) {
  constexpr auto kind = OpKind::concat_rows;
  if (parts.empty()) throw ShapeError("concat_rows: no operands");
  const std::size_t c = parts.front().cols();
  std::size_t total = 0;
  for (const auto& p : parts) {
    detail::require_matrix(kind, p);
    if (p.cols() != c) detail::shape_fail(kind, "column counts differ", {&parts.front(), &p});
    total += p.rows();
  }
  detail::check_finite(kind, std::span<const Tensor>(parts));
  std::vector<double> out;
  out.reserve(total * c);
  for (const auto& p : parts) out.insert(out.end(), p.data().begin(), p.data().end());
  return detail::finish(kind, parts, Tensor({total, c}, std::move(out)), [](const Tape::Node& n) {
    auto g = n.output.grad();
    std::size_t offset = 0;
    for (std::size_t k = 0; k < n.inputs.size(); ++k) {
      const std::size_t len = n.inputs[k].numel();
      auto s = detail::sink(n, k);
      for (std::size_t i = 0; i < s.size(); ++i) s[i] += g[offset + i];
      offset += len;
    }
  });
}

inline Tensor concat_cols(const std::vector<Tensor>& parts) {
  constexpr auto kind = OpKind::concat_cols;
  if (parts.empty()) throw ShapeError("concat_cols: no operands");
  const std::size_t r = parts.front().rows();
  std::size_t total = 0;
  for (const auto& p : parts) {
    detail::require_matrix(kind, p);
    if (p.rows() != r) detail::shape_fail(kind, "row counts differ", {&parts.front(), &p});
    total += p.cols();
  }
  detail::check_finite(kind, std::span<const Tensor>(parts));
  std::vector<double> out(r * total);
  std::size_t offset = 0;
  for (const auto& p : parts) {
    const std::size_t pc = p.cols();
    for (std::size_t i = 0; i < r; ++i)
      for (std::size_t j = 0; j < pc; ++j) out[i * total + offset + j] = p.at(i, j);
    offset += pc;
  }
  return detail::finish(kind, parts, Tensor({r, total}, std::move(out)),
                        [r, total](const Tape::Node& n) {
                          auto g = n.output.grad();
                          std::size_t off = 0;
                          for (std::size_t k = 0; k < n.inputs.size(); ++k) {
                            const std::size_t pc = n.inputs[k].cols();
                            auto s = detail::sink(n, k);
                            if (!s.empty()) {
                              for (std::size_t i = 0; i < r; ++i)
                                for (std::size_t j = 0; j < pc; ++j)
                                  s[i * pc + j] += g[i * total + off + j];
                            }
                            off += pc;
                          }
                        });
}

inline Tensor slice_rows(const Tensor& a, std::size_t begin, std::size_t count) {
  constexpr auto kind = OpKind::slice_rows;
  detail::require_matrix(kind, a);
  if (count == 0 || begin + count > a.rows()) {
    detail::shape_fail(kind,
                       "row range [" + std::to_string(begin) + ", " +
                           std::to_string(begin + count) + ") out of bounds",
                       {&a});
  }
  detail::check_finite(kind, {&a});
  const std::size_t c = a.cols();
  std::vector<double> out(a.data().begin() + static_cast<std::ptrdiff_t>(begin * c),
                          a.data().begin() + static_cast<std::ptrdiff_t>((begin + count) * c));
  return detail::finish(kind, {a}, Tensor({count, c}, std::move(out)),
                        [begin, c](const Tape::Node& n) {
                          auto s = detail::sink(n, 0);
                          if (s.empty()) return;
                          auto g = n.output.grad();
                          for (std::size_t i = 0; i < g.size(); ++i) s[begin * c + i] += g[i];
                        });
}

inline Tensor slice_cols(const Tensor& a, std::size_t begin, std::size_t count) {
  constexpr auto kind = OpKind::slice_cols;
  detail::require_matrix(kind, a);
  if (count == 0 || begin + count > a.cols()) {
    detail::shape_fail(kind,
                       "column range [" + std::to_string(begin) + ", " +
                           std::to_string(begin + count) + ") out of bounds",
                       {&a});
  }
  detail::check_finite(kind, {&a});
  const std::size_t r = a.rows(), c = a.cols();
  std::vector<double> out(r * count);
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < count; ++j) out[i * count + j] = a[i * c + begin + j];
  return detail::finish(kind, {a}, Tensor({r, count}, std::move(out)),
                        [r, c, begin, count](const Tape::Node& n) {
                          auto s = detail::sink(n, 0);
                          if (s.empty()) return;
                          auto g = n.output.grad();
                          for (std::size_t i = 0; i < r; ++i)
                            for (std::size_t j = 0; j < count; ++j)
                              s[i * c + begin + j] += g[i * count + j];
                        });
}

// Column j of a[R,C] -> [R].
inline Tensor column(const Tensor& a, std::size_t j) {
  constexpr auto kind = OpKind::column;
  detail::require_matrix(kind, a);
  if (j >= a.cols()) detail::shape_fail(kind, "column index out of range", {&a});
  detail::check_finite(kind, {&a});
  const std::size_t r = a.rows(), c = a.cols();
  std::vector<double> out(r);
  for (std::size_t i = 0; i < r; ++i) out[i] = a[i * c + j];
  return detail::finish(kind, {a}, Tensor({r}, std::move(out)), [r, c, j](const Tape::Node& n) {
    auto s = detail::sink(n, 0);
    if (s.empty()) return;
    auto g = n.output.grad();
    for (std::size_t i = 0; i < r; ++i) s[i * c + j] += g[i];
  });
}

// Appends zero rows up to `total_rows`.
inline Tensor pad_rows(const Tensor& a, std::size_t total_rows) {
  constexpr auto kind = OpKind::pad_rows;
  detail::require_matrix(kind, a);
  if (total_rows < a.rows()) detail::shape_fail(kind, "target row count below input rows", {&a});
  detail::check_finite(kind, {&a});
  std::vector<double> out(total_rows * a.cols(), 0.0);
  std::copy(a.data().begin(), a.data().end(), out.begin());
  return detail::finish(kind, {a}, Tensor({total_rows, a.cols()}, std::move(out)),
                        [](const Tape::Node& n) {
                          auto s = detail::sink(n, 0);
                          auto g = n.output.grad();
                          for (std::size_t i = 0; i < s.size(); ++i) s[i] += g[i];
                        });
}

inline Tensor reshape(const Tensor& a, Shape shape) {
  constexpr auto kind = OpKind::reshape;
  if (shape_numel(shape) != a.numel()) {
    detail::shape_fail(kind, "element count changes under reshape to " + shape_str(shape), {&a});
  }
  detail::check_finite(kind, {&a});
  std::vector<double> out(a.data().begin(), a.data().end());
  return detail::finish(kind, {a}, Tensor(std::move(shape), std::move(out)),
                        [](const Tape::Node& n) {
                          auto s = detail::sink(n, 0);
                          auto g = n.output.grad();
                          for (std::size_t i = 0; i < s.size(); ++i) s[i] += g[i];
                        });
}

// Elementwise op with a caller-supplied adjoint. `vjp(x, y, g)` returns
// dL/dx given input x, output y and upstream gradient g.
inline Tensor custom_unary(
    const Tensor& a, const std::function<double(double)>& forward,
    std::function<double(double x, double y, double g)> vjp) {
  constexpr auto kind = OpKind::custom;
  detail::check_finite(kind, {&a});
  std::vector<double> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = forward(a[i]);
  return detail::finish(kind, {a}, Tensor(a.shape(), std::move(out)),
                        [vjp = std::move(vjp)](const Tape::Node& n) {
                          auto s = detail::sink(n, 0);
                          auto g = n.output.grad();
                          auto y = n.output.data();
                          const auto& x = n.inputs[0];
                          for (std::size_t i = 0; i < s.size(); ++i) s[i] += vjp(x[i], y[i], g[i]);
                        });
}

// ---------------------------------------------------------------------------
// Finite-difference gradient checking

class NonDeterministicError : public Error {
 public:
  using Error::Error;
};

struct CheckReport {
  struct Entry {
    std::string name;
    double max_rel_error = 0.0;
    double max_abs_error = 0.0;
  };
  std::vector<Entry> entries;
  double tolerance = 0.0;
  bool pass = false;

  double worst() const {
    double w = 0.0;
    for (const auto& e : entries) w = std::max(w, e.max_rel_error);
    return w;
  }
};

inline double relative_error(double a, double b) {
  return std::abs(a - b) / std::max({std::abs(a), std::abs(b), 1e-8});
}

struct NamedParam {
  std::string name;
  Tensor value;
};

// Compares tape gradients of the scalar `f` against central differences of
// every entry of every parameter.
inline CheckReport grad_check(const std::function<Tensor()>& f, std::vector<NamedParam> params,
                              double step = 1e-6, double tol = 1e-4) {
  if (!(step > 0.0 && step <= 1e-3)) throw Error("grad_check: step must lie in (0, 1e-3]");
  auto eval = [&] {
    NoGradScope no_grad;
    return f().item();
  };
  const double first = eval();
  const double second = eval();
  if (std::memcmp(&first, &second, sizeof(double)) != 0) {
    throw NonDeterministicError("grad_check: two forward passes disagree");
  }

  std::vector<bool> saved_flags;
  for (auto& p : params) {
    saved_flags.push_back(p.value.requires_grad());
    p.value.set_requires_grad(true);
    p.value.zero_grad();
  }
  {
    Tape tape;
    TapeScope scope(tape);
    Tensor root = f();
    tape.backward(root);
  }

  CheckReport report;
  report.tolerance = tol;
  for (auto& p : params) {
    CheckReport::Entry entry{p.name, 0.0, 0.0};
    std::vector<double> analytic(p.value.numel(), 0.0);
    if (p.value.has_grad()) {
      auto g = p.value.grad();
      std::copy(g.begin(), g.end(), analytic.begin());
    }
    auto data = p.value.mutable_data();
    for (std::size_t i = 0; i < data.size(); ++i) {
      const double orig = data[i];
      data[i] = orig + step;
      const double plus = eval();
      data[i] = orig - step;
      const double minus = eval();
      data[i] = orig;
      const double numeric = (plus - minus) / (2.0 * step);
      entry.max_rel_error = std::max(entry.max_rel_error, relative_error(analytic[i], numeric));
      entry.max_abs_error = std::max(entry.max_abs_error, std::abs(analytic[i] - numeric));
    }
    report.entries.push_back(entry);
  }
  for (std::size_t k = 0; k < params.size(); ++k) {
    params[k].value.zero_grad();
    params[k].value.set_requires_grad(saved_flags[k]);
  }
  report.pass = report.worst() < tol;
  return report;
}

}  // namespace ad
}  // namespace flexireid
