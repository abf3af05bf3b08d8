// Dense reverse-mode automatic differentiation over 64-bit row-major arrays.
//
// Graphs are built define-by-run: every op that touches a tensor requiring a
// gradient records its parents and a backward closure. backward() orders the
// reachable nodes topologically, runs the closures in exact reverse order and
// then releases the interior graph. Leaf gradients accumulate across calls
// until zero_grad().
//
// There is no implicit broadcasting. Row-wise bias addition is an explicit op.
#pragma once

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <numeric>
#include <sstream>
#include <stdexcept>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

namespace mvattn::ad {

using Shape = std::vector<std::size_t>;
using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using ConstMap = Eigen::Map<const RowMat>;
using MutMap = Eigen::Map<RowMat>;

inline std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
  os << ']';
  return os.str();
}

inline std::size_t numel(const Shape& s) {
  return std::accumulate(s.begin(), s.end(), std::size_t{1}, std::multiplies<>());
}

class ShapeError : public std::invalid_argument {
 public:
  ShapeError(const std::string& op, const Shape& a, const Shape& b)
      : std::invalid_argument(op + ": incompatible shapes " + shape_str(a) + " and " + shape_str(b)) {}
  ShapeError(const std::string& op, const std::string& what) : std::invalid_argument(op + ": " + what) {}
};

struct NDArray {
  Shape shape;
  std::vector<double> data;

  NDArray() = default;
  explicit NDArray(Shape s, double fill = 0.0) : shape(std::move(s)), data(numel(shape), fill) {}
  NDArray(Shape s, std::vector<double> d) : shape(std::move(s)), data(std::move(d)) {
    if (data.size() != numel(shape)) {
      throw ShapeError("NDArray", "data length " + std::to_string(data.size()) + " does not match " +
                                      shape_str(shape));
    }
  }

  static NDArray scalar(double v) { return NDArray(Shape{}, std::vector<double>{v}); }

  std::size_t size() const { return data.size(); }
  std::size_t rank() const { return shape.size(); }
  bool empty() const { return data.empty(); }
  /// Trailing dimension; 1 for scalars.
  std::size_t cols() const { return shape.empty() ? 1 : shape.back(); }
  /// Product of all leading dimensions.
  std::size_t rows() const { return cols() == 0 ? 0 : size() / cols(); }

  double& operator[](std::size_t i) { return data[i]; }
  double operator[](std::size_t i) const { return data[i]; }
  double& at(std::size_t r, std::size_t c) { return data[r * cols() + c]; }
  double at(std::size_t r, std::size_t c) const { return data[r * cols() + c]; }

  ConstMap mat() const { return ConstMap(data.data(), rows(), cols()); }
  MutMap mat() { return MutMap(data.data(), rows(), cols()); }

  bool all_finite() const {
    return std::all_of(data.begin(), data.end(), [](double v) { return std::isfinite(v); });
  }
};

struct Node;
using NodePtr = std::shared_ptr<Node>;

struct Node {
  NDArray value;
  NDArray grad;
  bool requires_grad = false;
  bool leaf = true;
  std::string op;
  std::vector<NodePtr> parents;
  std::function<void(Node&)> backward_fn;

  NDArray& grad_buffer() {
    if (grad.empty() && !value.empty()) grad = NDArray(value.shape);
    if (grad.shape != value.shape) grad = NDArray(value.shape);
    return grad;
  }
};

// Thread-local switch; while disabled ops produce constants and record nothing.
inline bool& grad_mode_flag() {
  thread_local bool enabled = true;
  return enabled;
}

class NoGradGuard {
 public:
  NoGradGuard() : previous_(grad_mode_flag()) { grad_mode_flag() = false; }
  ~NoGradGuard() { grad_mode_flag() = previous_; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(NodePtr n) : node_(std::move(n)) {}

  static Tensor constant(NDArray v) {
    auto n = std::make_shared<Node>();
    n->value = std::move(v);
    n->op = "constant";
    return Tensor(std::move(n));
  }
  static Tensor parameter(NDArray v) {
    auto n = std::make_shared<Node>();
    n->value = std::move(v);
    n->requires_grad = true;
    n->op = "parameter";
    return Tensor(std::move(n));
  }
  static Tensor scalar(double v) { return constant(NDArray::scalar(v)); }

  bool defined() const { return static_cast<bool>(node_); }
  const NDArray& value() const { return node_->value; }
  /// Leaf-only mutation (optimizer updates, finite-difference perturbation).
  NDArray& mutable_value() { return node_->value; }
  const Shape& shape() const { return node_->value.shape; }
  std::size_t size() const { return node_->value.size(); }
  std::size_t rows() const { return node_->value.rows(); }
  std::size_t cols() const { return node_->value.cols(); }
  bool requires_grad() const { return node_ && node_->requires_grad; }
  bool is_leaf() const { return node_->leaf; }
  double item() const {
    if (size() != 1) throw ShapeError("item", "tensor of shape " + shape_str(shape()) + " is not a scalar");
    return node_->value[0];
  }

  /// Gradient buffer; zeros when nothing has been accumulated.
  NDArray grad() const {
    if (node_->grad.empty()) return NDArray(node_->value.shape);
    return node_->grad;
  }
  void zero_grad() { node_->grad = NDArray(); }
  void set_requires_grad(bool v) { node_->requires_grad = v; }

  const NodePtr& node() const { return node_; }

 private:
  NodePtr node_;
};

namespace detail {

// Builds the result node. If no parent requires a gradient (or grad mode is
// off) the parents and closure are dropped immediately.
inline Tensor make_result(NDArray value, std::string op, std::vector<Tensor> parents,
                          std::function<void(Node&)> backward) {
  auto n = std::make_shared<Node>();
  n->value = std::move(value);
  n->op = std::move(op);
  n->leaf = false;
  bool needs = false;
  if (grad_mode_flag()) {
    for (const auto& p : parents) needs = needs || p.requires_grad();
  }
  if (needs) {
    n->requires_grad = true;
    n->parents.reserve(parents.size());
    for (auto& p : parents) n->parents.push_back(p.node());
    n->backward_fn = std::move(backward);
  }
  return Tensor(std::move(n));
}

inline bool wants(const NodePtr& p) { return p->requires_grad; }

inline void require_same(const char* op, const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) throw ShapeError(op, a.shape(), b.shape());
}

inline void require_matrix(const char* op, const Tensor& a) {
  if (a.shape().size() != 2) throw ShapeError(op, "expected a rank-2 tensor, got " + shape_str(a.shape()));
}

}  // namespace detail

// Extension point for ops defined outside this header (e.g. camera modulation).
inline Tensor make_op(NDArray value, std::string op, std::vector<Tensor> parents,
                      std::function<void(Node&)> backward) {
  return detail::make_result(std::move(value), std::move(op), std::move(parents), std::move(backward));
}

// ---------------------------------------------------------------------------
// Elementwise

inline Tensor add(const Tensor& a, const Tensor& b) {
  detail::require_same("add", a, b);
  NDArray out = a.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += b.value()[i];
  return detail::make_result(std::move(out), "add", {a, b}, [](Node& n) {
    for (auto& p : n.parents) {
      if (!detail::wants(p)) continue;
      auto& g = p->grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += n.grad[i];
    }
  });
}

inline Tensor sub(const Tensor& a, const Tensor& b) {
  detail::require_same("sub", a, b);
  NDArray out = a.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] -= b.value()[i];
  return detail::make_result(std::move(out), "sub", {a, b}, [](Node& n) {
    const double sign[2] = {1.0, -1.0};
    for (int k = 0; k < 2; ++k) {
      auto& p = n.parents[k];
      if (!detail::wants(p)) continue;
      auto& g = p->grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += sign[k] * n.grad[i];
    }
  });
}

inline Tensor scalar_mul(const Tensor& a, double s) {
  NDArray out = a.value();
  for (auto& v : out.data) v *= s;
  return detail::make_result(std::move(out), "scalar_mul", {a}, [s](Node& n) {
    auto& g = n.parents[0]->grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += s * n.grad[i];
  });
}

inline Tensor add_scalar(const Tensor& a, double s) {
  NDArray out = a.value();
  for (auto& v : out.data) v += s;
  return detail::make_result(std::move(out), "add_scalar", {a}, [](Node& n) {
    auto& g = n.parents[0]->grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += n.grad[i];
  });
}

/// Multiplies by a differentiable scalar tensor.
inline Tensor scale_by(const Tensor& a, const Tensor& s) {
  if (s.size() != 1) throw ShapeError("scale_by", a.shape(), s.shape());
  const double sv = s.value()[0];
  NDArray out = a.value();
  for (auto& v : out.data) v *= sv;
  return detail::make_result(std::move(out), "scale_by", {a, s}, [sv](Node& n) {
    const auto& av = n.parents[0]->value;
    if (detail::wants(n.parents[0])) {
      auto& g = n.parents[0]->grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += sv * n.grad[i];
    }
    if (detail::wants(n.parents[1])) {
      double acc = 0.0;
      for (std::size_t i = 0; i < av.size(); ++i) acc += av[i] * n.grad[i];
      n.parents[1]->grad_buffer()[0] += acc;
    }
  });
}

inline Tensor mul(const Tensor& a, const Tensor& b) {
  detail::require_same("mul", a, b);
  NDArray out = a.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= b.value()[i];
  return detail::make_result(std::move(out), "mul", {a, b}, [](Node& n) {
    const auto& av = n.parents[0]->value;
    const auto& bv = n.parents[1]->value;
    if (detail::wants(n.parents[0])) {
      auto& g = n.parents[0]->grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += n.grad[i] * bv[i];
    }
    if (detail::wants(n.parents[1])) {
      auto& g = n.parents[1]->grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += n.grad[i] * av[i];
    }
  });
}

namespace detail {

template <typename F, typename DF>
Tensor unary(const Tensor& a, const char* name, F f, DF df) {
  NDArray out = a.value();
  for (auto& v : out.data) v = f(v);
  return make_result(std::move(out), name, {a}, [df](Node& n) {
    const auto& x = n.parents[0]->value;
    auto& g = n.parents[0]->grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += n.grad[i] * df(x[i], n.value[i]);
  });
}

}  // namespace detail

inline Tensor exp(const Tensor& a) {
  return detail::unary(
      a, "exp", [](double x) { return std::exp(x); }, [](double, double y) { return y; });
}

inline Tensor log(const Tensor& a) {
  return detail::unary(
      a, "log", [](double x) { return std::log(x); }, [](double x, double) { return 1.0 / x; });
}

inline Tensor sqrt(const Tensor& a) {
  return detail::unary(
      a, "sqrt", [](double x) { return std::sqrt(x); }, [](double, double y) { return 0.5 / y; });
}

/// Exact (erf) GELU.
inline Tensor gelu(const Tensor& a) {
  constexpr double inv_sqrt2 = 0.70710678118654752440;
  constexpr double inv_sqrt2pi = 0.39894228040143267794;
  return detail::unary(
      a, "gelu", [](double x) { return 0.5 * x * (1.0 + std::erf(x * inv_sqrt2)); },
      [](double x, double) { return 0.5 * (1.0 + std::erf(x * inv_sqrt2)) + x * inv_sqrt2pi * std::exp(-0.5 * x * x); });
}

/// Replaces entries where mask != 0 by `fill`; those entries pass no gradient.
inline Tensor masked_fill(const Tensor& a, const NDArray& mask, double fill) {
  if (mask.shape != a.shape()) throw ShapeError("masked_fill", a.shape(), mask.shape);
  NDArray out = a.value();
  for (std::size_t i = 0; i < out.size(); ++i) {
    if (mask[i] != 0.0) out[i] = fill;
  }
  return detail::make_result(std::move(out), "masked_fill", {a}, [mask](Node& n) {
    auto& g = n.parents[0]->grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) {
      if (mask[i] == 0.0) g[i] += n.grad[i];
    }
  });
}

// ---------------------------------------------------------------------------
// Reductions

inline Tensor sum(const Tensor& a) {
  double s = 0.0;
  for (double v : a.value().data) s += v;
  return detail::make_result(NDArray::scalar(s), "sum", {a}, [](Node& n) {
    auto& g = n.parents[0]->grad_buffer();
    const double up = n.grad[0];
    for (auto& v : g.data) v += up;
  });
}

inline Tensor mean(const Tensor& a) {
  if (a.size() == 0) throw ShapeError("mean", "empty tensor");
  return scalar_mul(sum(a), 1.0 / static_cast<double>(a.size()));
}

/// Sum over the last axis: [.., c] -> [..].
inline Tensor sum_last(const Tensor& a) {
  if (a.shape().empty()) throw ShapeError("sum_last", "scalar input");
  const std::size_t r = a.value().rows(), c = a.value().cols();
  Shape s(a.shape().begin(), a.shape().end() - 1);
  NDArray out(s);
  for (std::size_t i = 0; i < r; ++i) {
    double acc = 0.0;
    for (std::size_t j = 0; j < c; ++j) acc += a.value()[i * c + j];
    out[i] = acc;
  }
  return detail::make_result(std::move(out), "sum_last", {a}, [r, c](Node& n) {
    auto& g = n.parents[0]->grad_buffer();
    for (std::size_t i = 0; i < r; ++i) {
      for (std::size_t j = 0; j < c; ++j) g[i * c + j] += n.grad[i];
    }
  });
}

// ---------------------------------------------------------------------------
// Shape manipulation

inline Tensor reshape(const Tensor& a, Shape s) {
  if (numel(s) != a.size()) throw ShapeError("reshape", a.shape(), s);
  NDArray out(std::move(s), a.value().data);
  return detail::make_result(std::move(out), "reshape", {a}, [](Node& n) {
    auto& g = n.parents[0]->grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += n.grad[i];
  });
}

inline Tensor transpose(const Tensor& a) {
  detail::require_matrix("transpose", a);
  const std::size_t r = a.shape()[0], c = a.shape()[1];
  NDArray out(Shape{c, r});
  out.mat() = a.value().mat().transpose();
  return detail::make_result(std::move(out), "transpose", {a}, [](Node& n) {
    auto& g = n.parents[0]->grad_buffer();
    g.mat() += n.grad.mat().transpose();
  });
}

/// Rows of a 2-D tensor selected (with repetition) by `index`.
inline Tensor gather_rows(const Tensor& a, std::vector<std::size_t> index) {
  detail::require_matrix("gather_rows", a);
  const std::size_t r = a.shape()[0], c = a.shape()[1];
  NDArray out(Shape{index.size(), c});
  for (std::size_t i = 0; i < index.size(); ++i) {
    if (index[i] >= r) {
      throw ShapeError("gather_rows", "row " + std::to_string(index[i]) + " out of range for " + shape_str(a.shape()));
    }
    std::copy_n(a.value().data.begin() + static_cast<std::ptrdiff_t>(index[i] * c), c,
                out.data.begin() + static_cast<std::ptrdiff_t>(i * c));
  }
  return detail::make_result(std::move(out), "gather_rows", {a}, [index = std::move(index), c](Node& n) {
    auto& g = n.parents[0]->grad_buffer();
    for (std::size_t i = 0; i < index.size(); ++i) {
      for (std::size_t j = 0; j < c; ++j) g[index[i] * c + j] += n.grad[i * c + j];
    }
  });
}

/// Contiguous row range [start, start + count) of a 2-D tensor.
inline Tensor slice_rows(const Tensor& a, std::size_t start, std::size_t count) {
  detail::require_matrix("slice_rows", a);
  if (start + count > a.shape()[0]) throw ShapeError("slice_rows", "row range out of bounds for " + shape_str(a.shape()));
  const std::size_t c = a.shape()[1];
  NDArray out(Shape{count, c});
  std::copy_n(a.value().data.begin() + static_cast<std::ptrdiff_t>(start * c), count * c, out.data.begin());
  return detail::make_result(std::move(out), "slice_rows", {a}, [start, c](Node& n) {
    auto& g = n.parents[0]->grad_buffer();
    for (std::size_t i = 0; i < n.grad.size(); ++i) g[start * c + i] += n.grad[i];
  });
}

/// Column range [start, start + count) of a 2-D tensor.
inline Tensor slice_cols(const Tensor& a, std::size_t start, std::size_t count) {
  detail::require_matrix("slice_cols", a);
  const std::size_t r = a.shape()[0], c = a.shape()[1];
  if (start + count > c) throw ShapeError("slice_cols", "column range out of bounds for " + shape_str(a.shape()));
  NDArray out(Shape{r, count});
  out.mat() = a.value().mat().middleCols(static_cast<Eigen::Index>(start), static_cast<Eigen::Index>(count));
  return detail::make_result(std::move(out), "slice_cols", {a}, [start, count](Node& n) {
    auto& g = n.parents[0]->grad_buffer();
    g.mat().middleCols(static_cast<Eigen::Index>(start), static_cast<Eigen::Index>(count)) += n.grad.mat();
  });
}

/// Concatenation of 2-D tensors along rows (axis 0) or columns (axis 1).
inline Tensor concat(const std::vector<Tensor>& parts, int axis) {
  if (parts.empty()) throw ShapeError("concat", "no inputs");
  if (axis != 0 && axis != 1) throw ShapeError("concat", "axis must be 0 or 1");
  for (const auto& p : parts) detail::require_matrix("concat", p);
  const std::size_t fixed = parts[0].shape()[1 - axis];
  std::size_t total = 0;
  std::vector<std::size_t> offsets;
  for (const auto& p : parts) {
    if (p.shape()[1 - axis] != fixed) throw ShapeError("concat", parts[0].shape(), p.shape());
    offsets.push_back(total);
    total += p.shape()[axis];
  }
  Shape s = axis == 0 ? Shape{total, fixed} : Shape{fixed, total};
  NDArray out(s);
  for (std::size_t k = 0; k < parts.size(); ++k) {
    const auto e = static_cast<Eigen::Index>(parts[k].shape()[axis]);
    const auto o = static_cast<Eigen::Index>(offsets[k]);
    if (axis == 0) {
      out.mat().middleRows(o, e) = parts[k].value().mat();
    } else {
      out.mat().middleCols(o, e) = parts[k].value().mat();
    }
  }
  return detail::make_result(std::move(out), "concat", parts, [offsets, axis](Node& n) {
    for (std::size_t k = 0; k < n.parents.size(); ++k) {
      auto& p = n.parents[k];
      if (!detail::wants(p)) continue;
      const auto e = static_cast<Eigen::Index>(p->value.shape[static_cast<std::size_t>(axis)]);
      const auto o = static_cast<Eigen::Index>(offsets[k]);
      auto& g = p->grad_buffer();
      if (axis == 0) {
        g.mat() += n.grad.mat().middleRows(o, e);
      } else {
        g.mat() += n.grad.mat().middleCols(o, e);
      }
    }
  });
}

// ---------------------------------------------------------------------------
// Linear algebra

/// A [m,k] x B [k,n], or A x B^T when transpose_b (B [n,k]).
inline Tensor matmul(const Tensor& a, const Tensor& b, bool transpose_b = false) {
  detail::require_matrix("matmul", a);
  detail::require_matrix("matmul", b);
  const std::size_t k = a.shape()[1];
  const std::size_t kb = transpose_b ? b.shape()[1] : b.shape()[0];
  if (k != kb) throw ShapeError("matmul", a.shape(), b.shape());
  const std::size_t n_out = transpose_b ? b.shape()[0] : b.shape()[1];
  NDArray out(Shape{a.shape()[0], n_out});
  if (transpose_b) {
    out.mat().noalias() = a.value().mat() * b.value().mat().transpose();
  } else {
    out.mat().noalias() = a.value().mat() * b.value().mat();
  }
  return detail::make_result(std::move(out), "matmul", {a, b}, [transpose_b](Node& n) {
    const auto& av = n.parents[0]->value;
    const auto& bv = n.parents[1]->value;
    if (detail::wants(n.parents[0])) {
      auto& g = n.parents[0]->grad_buffer();
      if (transpose_b) {
        g.mat().noalias() += n.grad.mat() * bv.mat();
      } else {
        g.mat().noalias() += n.grad.mat() * bv.mat().transpose();
      }
    }
    if (detail::wants(n.parents[1])) {
      auto& g = n.parents[1]->grad_buffer();
      if (transpose_b) {
        g.mat().noalias() += n.grad.mat().transpose() * av.mat();
      } else {
        g.mat().noalias() += av.mat().transpose() * n.grad.mat();
      }
    }
  });
}

/// x [r,c] + bias [c] added to every row.
inline Tensor add_rowwise(const Tensor& x, const Tensor& bias) {
  detail::require_matrix("add_rowwise", x);
  if (bias.size() != x.shape()[1]) throw ShapeError("add_rowwise", x.shape(), bias.shape());
  NDArray out = x.value();
  const std::size_t c = x.shape()[1];
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += bias.value()[i % c];
  return detail::make_result(std::move(out), "add_rowwise", {x, bias}, [c](Node& n) {
    if (detail::wants(n.parents[0])) {
      auto& g = n.parents[0]->grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += n.grad[i];
    }
    if (detail::wants(n.parents[1])) {
      auto& g = n.parents[1]->grad_buffer();
      for (std::size_t i = 0; i < n.grad.size(); ++i) g[i % c] += n.grad[i];
    }
  });
}

/// x W^T (+ b): W is [out, in].
inline Tensor linear(const Tensor& x, const Tensor& weight, const Tensor& bias = Tensor()) {
  Tensor y = matmul(x, weight, /*transpose_b=*/true);
  return bias.defined() ? add_rowwise(y, bias) : y;
}

// ---------------------------------------------------------------------------
// Normalization and attention

inline void softmax_rows_inplace(double* row, std::size_t c) {
  double m = row[0];
  for (std::size_t j = 1; j < c; ++j) m = std::max(m, row[j]);
  double z = 0.0;
  for (std::size_t j = 0; j < c; ++j) {
    row[j] = std::exp(row[j] - m);
    z += row[j];
  }
  const double inv = 1.0 / z;
  for (std::size_t j = 0; j < c; ++j) row[j] *= inv;
}

/// Softmax over the last axis.
inline Tensor softmax(const Tensor& a) {
  NDArray out = a.value();
  const std::size_t r = out.rows(), c = out.cols();
  for (std::size_t i = 0; i < r; ++i) softmax_rows_inplace(out.data.data() + i * c, c);
  return detail::make_result(std::move(out), "softmax", {a}, [r, c](Node& n) {
    auto& g = n.parents[0]->grad_buffer();
    for (std::size_t i = 0; i < r; ++i) {
      const double* y = n.value.data.data() + i * c;
      const double* gy = n.grad.data.data() + i * c;
      double dot = 0.0;
      for (std::size_t j = 0; j < c; ++j) dot += y[j] * gy[j];
      for (std::size_t j = 0; j < c; ++j) g[i * c + j] += y[j] * (gy[j] - dot);
    }
  });
}

/// Numerically stable log-softmax over the last axis.
inline Tensor log_softmax(const Tensor& a) {
  NDArray out = a.value();
  const std::size_t r = out.rows(), c = out.cols();
  for (std::size_t i = 0; i < r; ++i) {
    double* row = out.data.data() + i * c;
    double m = row[0];
    for (std::size_t j = 1; j < c; ++j) m = std::max(m, row[j]);
    double z = 0.0;
    for (std::size_t j = 0; j < c; ++j) z += std::exp(row[j] - m);
    const double lse = m + std::log(z);
    for (std::size_t j = 0; j < c; ++j) row[j] -= lse;
  }
  return detail::make_result(std::move(out), "log_softmax", {a}, [r, c](Node& n) {
    auto& g = n.parents[0]->grad_buffer();
    for (std::size_t i = 0; i < r; ++i) {
      const double* y = n.value.data.data() + i * c;
      const double* gy = n.grad.data.data() + i * c;
      double s = 0.0;
      for (std::size_t j = 0; j < c; ++j) s += gy[j];
      for (std::size_t j = 0; j < c; ++j) g[i * c + j] += gy[j] - std::exp(y[j]) * s;
    }
  });
}

/// Layer normalization over the last axis, without affine parameters.
inline Tensor layer_norm(const Tensor& a, double eps = 1e-5) {
  NDArray out = a.value();
  const std::size_t r = out.rows(), c = out.cols();
  std::vector<double> inv_std(r);
  for (std::size_t i = 0; i < r; ++i) {
    double* row = out.data.data() + i * c;
    double mu = 0.0;
    for (std::size_t j = 0; j < c; ++j) mu += row[j];
    mu /= static_cast<double>(c);
    double var = 0.0;
    for (std::size_t j = 0; j < c; ++j) var += (row[j] - mu) * (row[j] - mu);
    var /= static_cast<double>(c);
    inv_std[i] = 1.0 / std::sqrt(var + eps);
    for (std::size_t j = 0; j < c; ++j) row[j] = (row[j] - mu) * inv_std[i];
  }
  return detail::make_result(std::move(out), "layer_norm", {a}, [r, c, inv_std = std::move(inv_std)](Node& n) {
    auto& g = n.parents[0]->grad_buffer();
    const double cd = static_cast<double>(c);
    for (std::size_t i = 0; i < r; ++i) {
      const double* y = n.value.data.data() + i * c;
      const double* gy = n.grad.data.data() + i * c;
      double sg = 0.0, sgy = 0.0;
      for (std::size_t j = 0; j < c; ++j) {
        sg += gy[j];
        sgy += gy[j] * y[j];
      }
      for (std::size_t j = 0; j < c; ++j) {
        g[i * c + j] += inv_std[i] * (gy[j] - sg / cd - y[j] * sgy / cd);
      }
    }
  });
}

/// Per-head softmax(scale * Q_h K_h^T) for Q [Tq, H*d], K [Tk, H*d]. Not differentiable.
inline std::vector<RowMat> attention_weights(const NDArray& q, const NDArray& k, std::size_t heads, double scale) {
  const std::size_t d = q.cols() / heads;
  std::vector<RowMat> probs(heads);
  for (std::size_t h = 0; h < heads; ++h) {
    const auto off = static_cast<Eigen::Index>(h * d);
    const auto dd = static_cast<Eigen::Index>(d);
    RowMat qh = q.mat().middleCols(off, dd);
    RowMat kh = k.mat().middleCols(off, dd);
    RowMat s(qh.rows(), kh.rows());
    s.noalias() = scale * qh * kh.transpose();
    const Eigen::VectorXd m = s.rowwise().maxCoeff();
    s.colwise() -= m;
    s.array() = s.array().exp();
    const Eigen::VectorXd z = s.rowwise().sum();
    s.array().colwise() /= z.array();
    probs[h] = std::move(s);
  }
  return probs;
}

/// Multi-head scaled dot-product attention, fused so that only the
/// probability matrices are retained for the backward pass.
/// Q [Tq, H*dk], K [Tk, H*dk], V [Tk, H*dv] -> [Tq, H*dv].
inline Tensor attention(const Tensor& q, const Tensor& k, const Tensor& v, std::size_t heads, double scale) {
  detail::require_matrix("attention", q);
  detail::require_matrix("attention", k);
  detail::require_matrix("attention", v);
  if (heads == 0 || q.cols() % heads != 0 || v.cols() % heads != 0) {
    throw ShapeError("attention", "head count " + std::to_string(heads) + " does not divide " + shape_str(q.shape()));
  }
  if (q.cols() != k.cols()) throw ShapeError("attention", q.shape(), k.shape());
  if (k.rows() != v.rows()) throw ShapeError("attention", k.shape(), v.shape());
  const std::size_t dv = v.cols() / heads;
  auto probs = std::make_shared<std::vector<RowMat>>(attention_weights(q.value(), k.value(), heads, scale));
  NDArray out(Shape{q.rows(), v.cols()});
  for (std::size_t h = 0; h < heads; ++h) {
    const auto off = static_cast<Eigen::Index>(h * dv);
    const auto dd = static_cast<Eigen::Index>(dv);
    out.mat().middleCols(off, dd).noalias() = (*probs)[h] * v.value().mat().middleCols(off, dd);
  }
  return detail::make_result(std::move(out), "attention", {q, k, v}, [probs, heads, scale](Node& n) {
    const auto& qv = n.parents[0]->value;
    const auto& kv = n.parents[1]->value;
    const auto& vv = n.parents[2]->value;
    const std::size_t dk = qv.cols() / heads, dvh = vv.cols() / heads;
    const bool gq = detail::wants(n.parents[0]), gk = detail::wants(n.parents[1]), gv = detail::wants(n.parents[2]);
    for (std::size_t h = 0; h < heads; ++h) {
      const RowMat& p = (*probs)[h];
      const auto ko = static_cast<Eigen::Index>(h * dk), kd = static_cast<Eigen::Index>(dk);
      const auto vo = static_cast<Eigen::Index>(h * dvh), vd = static_cast<Eigen::Index>(dvh);
      RowMat go = n.grad.mat().middleCols(vo, vd);
      if (gv) n.parents[2]->grad_buffer().mat().middleCols(vo, vd).noalias() += p.transpose() * go;
      if (!gq && !gk) continue;
      RowMat vh = vv.mat().middleCols(vo, vd);
      RowMat ds(p.rows(), p.cols());
      ds.noalias() = go * vh.transpose();
      const Eigen::VectorXd dot = ds.cwiseProduct(p).rowwise().sum();
      ds.array() = p.array() * (ds.array().colwise() - dot.array());
      if (gq) {
        RowMat kh = kv.mat().middleCols(ko, kd);
        n.parents[0]->grad_buffer().mat().middleCols(ko, kd).noalias() += scale * ds * kh;
      }
      if (gk) {
        RowMat qh = qv.mat().middleCols(ko, kd);
        n.parents[1]->grad_buffer().mat().middleCols(ko, kd).noalias() += scale * ds.transpose() * qh;
      }
    }
  });
}

// ---------------------------------------------------------------------------
// Backward pass

/// Nodes reachable from root that require a gradient, inputs before outputs.
inline std::vector<Node*> topological_order(const Tensor& root) {
  std::vector<Node*> order;
  std::unordered_set<Node*> seen;
  std::vector<std::pair<Node*, std::size_t>> stack;
  stack.emplace_back(root.node().get(), 0);
  seen.insert(root.node().get());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      Node* p = node->parents[next++].get();
      if (p->requires_grad && seen.insert(p).second) stack.emplace_back(p, 0);
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }
  return order;
}

/// Accumulates d(root)/d(leaf) into every reachable leaf requiring a gradient,
/// then frees the interior graph. Leaf gradients accumulate across calls.
inline void backward(const Tensor& root) {
  if (root.size() != 1) throw std::invalid_argument("backward: root must be a scalar, got " + shape_str(root.shape()));
  if (!root.requires_grad()) return;
  auto order = topological_order(root);
  root.node()->grad_buffer()[0] += 1.0;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node* n = *it;
    if (n->backward_fn && !n->grad.empty()) n->backward_fn(*n);
  }
  for (Node* n : order) {
    if (!n->leaf) {
      n->backward_fn = nullptr;
      n->parents.clear();
      n->grad = NDArray();
    }
  }
}

// ---------------------------------------------------------------------------
// Finite-difference gradient check

/// Max over coordinates of |analytic - central difference| / max(|analytic|, |cd|, 1e-8).
/// `x` must be a leaf requiring a gradient; its gradient buffer is reset.
inline double grad_check(const std::function<Tensor(const Tensor&)>& f, Tensor x, double eps) {
  x.zero_grad();
  backward(f(x));
  const NDArray analytic = x.grad();
  x.zero_grad();
  double worst = 0.0;
  NoGradGuard guard;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double orig = x.value()[i];
    x.mutable_value()[i] = orig + eps;
    const double fp = f(x).item();
    x.mutable_value()[i] = orig - eps;
    const double fm = f(x).item();
    x.mutable_value()[i] = orig;
    const double cd = (fp - fm) / (2.0 * eps);
    const double denom = std::max({std::abs(analytic[i]), std::abs(cd), 1e-8});
    worst = std::max(worst, std::abs(analytic[i] - cd) / denom);
  }
  return worst;
}

}  // namespace mvattn::ad
