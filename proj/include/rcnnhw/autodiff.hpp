// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <cstddef>
#include <functional>
#include <limits>
#include <string>
#include <utility>
#include <vector>

#include "rcnnhw/errors.hpp"
#include "rcnnhw/tensor.hpp"

namespace rcnnhw {

/// Trainable tensor. The gradient buffer is mutable so that a model held by
/// const reference can still be bound to a tape; only backward() writes it.
struct Parameter {
  Tensor value;
  mutable Tensor grad;

  Parameter() = default;
  explicit Parameter(Tensor v) : value(std::move(v)) {}

  void zero_grad() const {
    if (grad.shape() != value.shape()) {
      grad = Tensor(value.shape());
    } else {
      grad.fill(0.0);
    }
  }

  /// Allocates a zero gradient if none has been accumulated yet.
  void zero_grad_if_missing() const {
    if (grad.shape() != value.shape()) grad = Tensor(value.shape());
  }
};

class Tape;

/// Handle to a node on a tape.
class Var {
 public:
  Var() = default;
  Var(Tape* tape, std::size_t id) : tape_(tape), id_(id) {}

  Tape& tape() const { return *tape_; }
  std::size_t id() const { return id_; }
  const Tensor& value() const;
  const Shape& shape() const { return value().shape(); }
  /// Gradient after backward(); throws if the node received none.
  const Tensor& grad() const;

 private:
  Tape* tape_ = nullptr;
  std::size_t id_ = 0;
};

/// Define-by-run record of a computation. Nodes are appended in evaluation
/// order, so every node's inputs precede it and backward() is a single
/// reverse sweep. Recurrent unrolling needs no special handling.
class Tape {
 public:
  /// Receives the upstream gradient of the node being processed.
  using BackwardFn = std::function<void(Tape&, const Tensor& upstream)>;

  /// A non-recording tape skips gradient bookkeeping (inference).
  explicit Tape(bool record = true) : record_(record) {}

  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;
  // Vars hold a pointer to their tape.
  Tape(Tape&&) = delete;
  Tape& operator=(Tape&&) = delete;

  bool recording() const { return record_; }
  std::size_t size() const { return nodes_.size(); }

  /// Differentiable input whose gradient is kept on the tape.
  Var leaf(Tensor value) {
    Node n;
    n.owned = std::move(value);
    n.requires_grad = record_;
    return append(std::move(n));
  }

  /// Input that never receives a gradient.
  Var constant(Tensor value) {
    Node n;
    n.owned = std::move(value);
    return append(std::move(n));
  }

  /// Binds a parameter by reference; backward accumulates into p.grad.
  Var param(const Parameter& p) {
    Node n;
    n.external = &p.value;
    if (record_) {
      n.sink = &p.grad;
      n.requires_grad = true;
    }
    return append(std::move(n));
  }

  const Tensor& value(std::size_t id) const {
    const Node& n = nodes_.at(id);
    return n.external ? *n.external : n.owned;
  }

  bool requires_grad(std::size_t id) const { return nodes_.at(id).requires_grad; }

  /// Gradient buffer for a node, zero-initialized on first use.
  Tensor& grad_ref(std::size_t id) {
    Node& n = nodes_.at(id);
    Tensor& g = n.sink ? *n.sink : n.grad;
    if (g.shape() != value(id).shape()) g = Tensor(value(id).shape());
    return g;
  }

  const Tensor* grad(std::size_t id) const {
    const Node& n = nodes_.at(id);
    const Tensor& g = n.sink ? *n.sink : n.grad;
    return g.empty() ? nullptr : &g;
  }

  /// Records a computed value. `backward` is dropped when no input needs a
  /// gradient or the tape is not recording.
  Var push(Tensor value, std::initializer_list<Var> inputs, BackwardFn backward) {
    Node n;
    n.owned = std::move(value);
    for (const Var& v : inputs) check_owned(v);
    if (record_) {
      for (const Var& v : inputs) n.requires_grad |= requires_grad(v.id());
      if (n.requires_grad) n.backward = std::move(backward);
    }
    return append(std::move(n));
  }

  Var push(Tensor value, const std::vector<Var>& inputs, BackwardFn backward) {
    Node n;
    n.owned = std::move(value);
    for (const Var& v : inputs) check_owned(v);
    if (record_) {
      for (const Var& v : inputs) n.requires_grad |= requires_grad(v.id());
      if (n.requires_grad) n.backward = std::move(backward);
    }
    return append(std::move(n));
  }

  /// Reverse sweep from a scalar loss. Gradients accumulate, so a value used
  /// twice receives the sum of both contributions, and parameter gradients
  /// add to whatever is already in Parameter::grad.
  void backward(Var loss) {
    check_owned(loss);
    if (!record_) throw ContractError("backward() on a non-recording tape");
    if (value(loss.id()).size() != 1) {
      throw ContractError("backward() requires a scalar loss, got shape " +
                          shape_str(value(loss.id()).shape()));
    }
    grad_ref(loss.id())[0] += 1.0;
    for (std::size_t i = loss.id() + 1; i-- > 0;) {
      Node& n = nodes_[i];
      if (!n.backward) continue;
      const Tensor* g = grad(i);
      if (!g) continue;
      n.backward(*this, *g);
    }
  }

 private:
  struct Node {
    Tensor owned;
    const Tensor* external = nullptr;
    Tensor* sink = nullptr;
    Tensor grad;
    bool requires_grad = false;
    BackwardFn backward;
  };

  Var append(Node n) {
    nodes_.push_back(std::move(n));
    return Var(this, nodes_.size() - 1);
  }

  void check_owned(const Var& v) const {
    if (&v.tape() != this || v.id() >= nodes_.size()) {
      throw ContractError("variable does not belong to this tape");
    }
  }

  bool record_;
  std::vector<Node> nodes_;
};

inline const Tensor& Var::value() const { return tape_->value(id_); }

inline const Tensor& Var::grad() const {
  const Tensor* g = tape_->grad(id_);
  if (!g) throw ContractError("variable has no gradient");
  return *g;
}

// ---------------------------------------------------------------------------
// Operations
// ---------------------------------------------------------------------------

namespace detail {

inline void require_same_shape(const char* op, const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) {
    throw DimensionError(std::string(op) + ": shape mismatch " +
                         shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  }
}

inline void add_into(Tensor& dst, const Tensor& src) {
  auto d = dst.data();
  auto s = src.data();
  for (std::size_t i = 0; i < d.size(); ++i) d[i] += s[i];
}

// C[m×n] += A[m×k] · B[k×n]
inline void gemm_nn(const double* a, const double* b, double* c, std::size_t m,
                    std::size_t k, std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    double* crow = c + i * n;
    const double* arow = a + i * k;
    for (std::size_t p = 0; p < k; ++p) {
      const double av = arow[p];
      if (av == 0.0) continue;
      const double* brow = b + p * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

// C[m×k] += A[m×n] · B[k×n]ᵀ
inline void gemm_nt(const double* a, const double* b, double* c, std::size_t m,
                    std::size_t n, std::size_t k) {
  for (std::size_t i = 0; i < m; ++i) {
    const double* arow = a + i * n;
    double* crow = c + i * k;
    for (std::size_t p = 0; p < k; ++p) {
      const double* brow = b + p * n;
      double s = 0.0;
      for (std::size_t j = 0; j < n; ++j) s += arow[j] * brow[j];
      crow[p] += s;
    }
  }
}

// C[k×n] += A[m×k]ᵀ · B[m×n]
inline void gemm_tn(const double* a, const double* b, double* c, std::size_t m,
                    std::size_t k, std::size_t n) {
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

inline double sigmoid(double x) {
  if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

}  // namespace detail

/// a[m×k] · b[k×n]. Backward: dA = dC·Bᵀ, dB = Aᵀ·dC.
inline Var matmul(Var a, Var b) {
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  if (av.rank() != 2 || bv.rank() != 2 || av.dim(1) != bv.dim(0)) {
    throw DimensionError("matmul: cannot multiply " + shape_str(av.shape()) +
                         " by " + shape_str(bv.shape()));
  }
  const std::size_t m = av.dim(0), k = av.dim(1), n = bv.dim(1);
  Tensor out({m, n});
  detail::gemm_nn(av.data().data(), bv.data().data(), out.data().data(), m, k, n);
  return a.tape().push(std::move(out), {a, b},
                       [a, b, m, k, n](Tape& t, const Tensor& g) {
                         if (t.requires_grad(a.id())) {
                           detail::gemm_nt(g.data().data(), t.value(b.id()).data().data(),
                                           t.grad_ref(a.id()).data().data(), m, n, k);
                         }
                         if (t.requires_grad(b.id())) {
                           detail::gemm_tn(t.value(a.id()).data().data(), g.data().data(),
                                           t.grad_ref(b.id()).data().data(), m, k, n);
                         }
                       });
}

enum class UnaryOp { sigmoid, tanh, relu, one_minus };
enum class BinaryOp { add, sub, mul };

/// Elementwise unary map. Derivatives: sigmoid' = s(1−s), tanh' = 1−t²,
/// relu' = [x > 0] (so 0 at exactly 0), (1−x)' = −1.
inline Var apply(UnaryOp op, Var x) {
  const Tensor& xv = x.value();
  Tensor out(xv.shape());
  auto in = xv.data();
  auto o = out.data();
  switch (op) {
    case UnaryOp::sigmoid:
      for (std::size_t i = 0; i < o.size(); ++i) o[i] = detail::sigmoid(in[i]);
      break;
    case UnaryOp::tanh:
      for (std::size_t i = 0; i < o.size(); ++i) o[i] = std::tanh(in[i]);
      break;
    case UnaryOp::relu:
      for (std::size_t i = 0; i < o.size(); ++i) o[i] = in[i] > 0.0 ? in[i] : 0.0;
      break;
    case UnaryOp::one_minus:
      for (std::size_t i = 0; i < o.size(); ++i) o[i] = 1.0 - in[i];
      break;
  }
  Tape& tape = x.tape();
  const std::size_t self = tape.size();
  return tape.push(std::move(out), {x}, [op, x, self](Tape& t, const Tensor& g) {
    auto gx = t.grad_ref(x.id()).data();
    auto gu = g.data();
    auto y = t.value(self).data();
    auto in = t.value(x.id()).data();
    switch (op) {
      case UnaryOp::sigmoid:
        for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += gu[i] * y[i] * (1.0 - y[i]);
        break;
      case UnaryOp::tanh:
        for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += gu[i] * (1.0 - y[i] * y[i]);
        break;
      case UnaryOp::relu:
        for (std::size_t i = 0; i < gx.size(); ++i) {
          if (in[i] > 0.0) gx[i] += gu[i];
        }
        break;
      case UnaryOp::one_minus:
        for (std::size_t i = 0; i < gx.size(); ++i) gx[i] -= gu[i];
        break;
    }
  });
}

inline Var apply(BinaryOp op, Var a, Var b) {
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  detail::require_same_shape(op == BinaryOp::add   ? "add"
                             : op == BinaryOp::sub ? "sub"
                                                   : "mul",
                             av, bv);
  Tensor out(av.shape());
  auto x = av.data();
  auto y = bv.data();
  auto o = out.data();
  switch (op) {
    case BinaryOp::add:
      for (std::size_t i = 0; i < o.size(); ++i) o[i] = x[i] + y[i];
      break;
    case BinaryOp::sub:
      for (std::size_t i = 0; i < o.size(); ++i) o[i] = x[i] - y[i];
      break;
    case BinaryOp::mul:
      for (std::size_t i = 0; i < o.size(); ++i) o[i] = x[i] * y[i];
      break;
  }
  return a.tape().push(std::move(out), {a, b}, [op, a, b](Tape& t, const Tensor& g) {
    auto gu = g.data();
    if (t.requires_grad(a.id())) {
      auto ga = t.grad_ref(a.id()).data();
      if (op == BinaryOp::mul) {
        auto y = t.value(b.id()).data();
        for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += gu[i] * y[i];
      } else {
        for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += gu[i];
      }
    }
    if (t.requires_grad(b.id())) {
      auto gb = t.grad_ref(b.id()).data();
      switch (op) {
        case BinaryOp::add:
          for (std::size_t i = 0; i < gb.size(); ++i) gb[i] += gu[i];
          break;
        case BinaryOp::sub:
          for (std::size_t i = 0; i < gb.size(); ++i) gb[i] -= gu[i];
          break;
        case BinaryOp::mul: {
          auto x = t.value(a.id()).data();
          for (std::size_t i = 0; i < gb.size(); ++i) gb[i] += gu[i] * x[i];
          break;
        }
      }
    }
  });
}

inline Var add(Var a, Var b) { return apply(BinaryOp::add, a, b); }
inline Var sub(Var a, Var b) { return apply(BinaryOp::sub, a, b); }
inline Var mul(Var a, Var b) { return apply(BinaryOp::mul, a, b); }
inline Var sigmoid(Var x) { return apply(UnaryOp::sigmoid, x); }
inline Var tanh(Var x) { return apply(UnaryOp::tanh, x); }
inline Var relu(Var x) { return apply(UnaryOp::relu, x); }
inline Var one_minus(Var x) { return apply(UnaryOp::one_minus, x); }

/// x[..., n] + b[n], the bias broadcast over every leading index. This is the
/// only broadcasting the engine supports.
inline Var add_bias(Var x, Var b) {
  const Tensor& xv = x.value();
  const Tensor& bv = b.value();
  if (bv.rank() != 1 || xv.shape().back() != bv.dim(0)) {
    throw DimensionError("add_bias: bias " + shape_str(bv.shape()) +
                         " does not match trailing dimension of " +
                         shape_str(xv.shape()));
  }
  const std::size_t n = bv.dim(0);
  Tensor out = xv;
  auto o = out.data();
  auto bb = bv.data();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] += bb[i % n];
  return x.tape().push(std::move(out), {x, b}, [x, b, n](Tape& t, const Tensor& g) {
    if (t.requires_grad(x.id())) detail::add_into(t.grad_ref(x.id()), g);
    if (t.requires_grad(b.id())) {
      auto gb = t.grad_ref(b.id()).data();
      auto gu = g.data();
      for (std::size_t i = 0; i < gu.size(); ++i) gb[i % n] += gu[i];
    }
  });
}

/// Transpose of a 2-D tensor.
inline Var transpose(Var x) {
  const Tensor& xv = x.value();
  if (xv.rank() != 2) {
    throw DimensionError("transpose: expected a matrix, got " + shape_str(xv.shape()));
  }
  const std::size_t r = xv.dim(0), c = xv.dim(1);
  Tensor out({c, r});
  for (std::size_t i = 0; i < r; ++i) {
    for (std::size_t j = 0; j < c; ++j) out[j * r + i] = xv[i * c + j];
  }
  return x.tape().push(std::move(out), {x}, [x, r, c](Tape& t, const Tensor& g) {
    auto gx = t.grad_ref(x.id()).data();
    for (std::size_t i = 0; i < r; ++i) {
      for (std::size_t j = 0; j < c; ++j) gx[i * c + j] += g[j * r + i];
    }
  });
}

/// c·x for a constant c.
inline Var scale(Var x, double c) {
  Tensor out = x.value();
  for (double& v : out.data()) v *= c;
  return x.tape().push(std::move(out), {x}, [x, c](Tape& t, const Tensor& g) {
    auto gx = t.grad_ref(x.id()).data();
    auto gu = g.data();
    for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += c * gu[i];
  });
}

/// Sum of all elements, as a [1] tensor.
inline Var sum(Var x) {
  double s = 0.0;
  for (double v : x.value().data()) s += v;
  return x.tape().push(Tensor::scalar(s), {x}, [x](Tape& t, const Tensor& g) {
    const double u = g[0];
    for (double& v : t.grad_ref(x.id()).data()) v += u;
  });
}

inline Var reshape(Var x, Shape shape) {
  Tensor out = x.value().reshaped(std::move(shape));
  return x.tape().push(std::move(out), {x}, [x](Tape& t, const Tensor& g) {
    auto gx = t.grad_ref(x.id()).data();
    auto gu = g.data();
    for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += gu[i];
  });
}

namespace detail {

// Splits a shape around `axis` into (outer, axis extent, inner).
struct AxisSplit {
  std::size_t outer = 1, extent = 1, inner = 1;
};

inline AxisSplit split_at(const Shape& shape, std::size_t axis) {
  AxisSplit s;
  for (std::size_t i = 0; i < axis; ++i) s.outer *= shape[i];
  s.extent = shape[axis];
  for (std::size_t i = axis + 1; i < shape.size(); ++i) s.inner *= shape[i];
  return s;
}

}  // namespace detail

/// Joins tensors along `axis`; all other dimensions must agree.
inline Var concat(const std::vector<Var>& parts, std::size_t axis) {
  if (parts.empty()) throw ContractError("concat: no parts");
  const Shape& first = parts.front().shape();
  if (axis >= first.size()) {
    throw DimensionError("concat: axis " + std::to_string(axis) +
                         " out of range for rank " + std::to_string(first.size()));
  }
  Shape out_shape = first;
  out_shape[axis] = 0;
  std::vector<std::size_t> extents;
  for (const Var& p : parts) {
    const Shape& s = p.shape();
    bool ok = s.size() == first.size();
    for (std::size_t i = 0; ok && i < s.size(); ++i) {
      if (i != axis && s[i] != first[i]) ok = false;
    }
    if (!ok) {
      throw DimensionError("concat: incompatible shapes " + shape_str(first) +
                           " and " + shape_str(s) + " on axis " +
                           std::to_string(axis));
    }
    extents.push_back(s[axis]);
    out_shape[axis] += s[axis];
  }
  const auto split = detail::split_at(out_shape, axis);
  Tensor out(out_shape);
  auto o = out.data();
  std::size_t offset = 0;
  for (std::size_t p = 0; p < parts.size(); ++p) {
    auto src = parts[p].value().data();
    const std::size_t block = extents[p] * split.inner;
    for (std::size_t i = 0; i < split.outer; ++i) {
      std::copy_n(src.begin() + i * block, block,
                  o.begin() + (i * split.extent + offset) * split.inner);
    }
    offset += extents[p];
  }
  return parts.front().tape().push(
      std::move(out), parts, [parts, extents, split](Tape& t, const Tensor& g) {
        auto gu = g.data();
        std::size_t offset = 0;
        for (std::size_t p = 0; p < parts.size(); ++p) {
          const std::size_t block = extents[p] * split.inner;
          if (t.requires_grad(parts[p].id())) {
            auto gp = t.grad_ref(parts[p].id()).data();
            for (std::size_t i = 0; i < split.outer; ++i) {
              const double* src = gu.data() + (i * split.extent + offset) * split.inner;
              double* dst = gp.data() + i * block;
              for (std::size_t j = 0; j < block; ++j) dst[j] += src[j];
            }
          }
          offset += extents[p];
        }
      });
}

/// Elements [begin, end) along `axis`.
inline Var slice(Var x, std::size_t axis, std::size_t begin, std::size_t end) {
  const Shape& s = x.shape();
  if (axis >= s.size() || begin >= end || end > s[axis]) {
    throw DimensionError("slice: range [" + std::to_string(begin) + "," +
                         std::to_string(end) + ") on axis " + std::to_string(axis) +
                         " invalid for " + shape_str(s));
  }
  const auto split = detail::split_at(s, axis);
  Shape out_shape = s;
  out_shape[axis] = end - begin;
  Tensor out(out_shape);
  const std::size_t block = (end - begin) * split.inner;
  auto src = x.value().data();
  auto o = out.data();
  for (std::size_t i = 0; i < split.outer; ++i) {
    std::copy_n(src.begin() + (i * split.extent + begin) * split.inner, block,
                o.begin() + i * block);
  }
  return x.tape().push(std::move(out), {x},
                       [x, split, begin, block](Tape& t, const Tensor& g) {
                         auto gx = t.grad_ref(x.id()).data();
                         auto gu = g.data();
                         for (std::size_t i = 0; i < split.outer; ++i) {
                           double* dst = gx.data() + (i * split.extent + begin) * split.inner;
                           const double* src = gu.data() + i * block;
                           for (std::size_t j = 0; j < block; ++j) dst[j] += src[j];
                         }
                       });
}

/// Removes `axis` by taking index `index` along it.
inline Var select(Var x, std::size_t axis, std::size_t index) {
  Var s = slice(x, axis, index, index + 1);
  Shape shape = s.shape();
  shape.erase(shape.begin() + static_cast<std::ptrdiff_t>(axis));
  return reshape(s, std::move(shape));
}

/// Stacks equally shaped tensors along a new axis.
inline Var stack(const std::vector<Var>& parts, std::size_t axis) {
  if (parts.empty()) throw ContractError("stack: no parts");
  const Shape& first = parts.front().shape();
  if (axis > first.size()) throw DimensionError("stack: axis out of range");
  std::vector<Var> expanded;
  expanded.reserve(parts.size());
  for (const Var& p : parts) {
    if (p.shape() != first) {
      throw DimensionError("stack: shape mismatch " + shape_str(first) + " vs " +
                           shape_str(p.shape()));
    }
    Shape s = first;
    s.insert(s.begin() + static_cast<std::ptrdiff_t>(axis), 1);
    expanded.push_back(reshape(p, std::move(s)));
  }
  return concat(expanded, axis);
}

/// Result of max_over_axis: the maxima and the index of the first maximum in
/// each slice (same layout as `values`).
struct MaxResult {
  Var values;
  std::vector<std::size_t> argmax;
};

/// Maximum along `axis`. Ties go to the first occurrence; backward routes the
/// whole upstream gradient to that position.
inline MaxResult max_over_axis(Var x, std::size_t axis) {
  const Shape& s = x.shape();
  if (axis >= s.size()) throw DimensionError("max_over_axis: axis out of range");
  if (s[axis] < 1) throw DimensionError("max_over_axis: empty axis");
  const auto split = detail::split_at(s, axis);
  Shape out_shape = s;
  out_shape.erase(out_shape.begin() + static_cast<std::ptrdiff_t>(axis));
  if (out_shape.empty()) out_shape.push_back(1);
  Tensor out(out_shape);
  std::vector<std::size_t> argmax(split.outer * split.inner);
  auto in = x.value().data();
  for (std::size_t i = 0; i < split.outer; ++i) {
    for (std::size_t k = 0; k < split.inner; ++k) {
      std::size_t best = 0;
      double bv = in[(i * split.extent) * split.inner + k];
      for (std::size_t j = 1; j < split.extent; ++j) {
        const double v = in[(i * split.extent + j) * split.inner + k];
        if (v > bv) {
          bv = v;
          best = j;
        }
      }
      out[i * split.inner + k] = bv;
      argmax[i * split.inner + k] = best;
    }
  }
  Var v = x.tape().push(std::move(out), {x},
                        [x, split, argmax](Tape& t, const Tensor& g) {
                          auto gx = t.grad_ref(x.id()).data();
                          for (std::size_t i = 0; i < split.outer; ++i) {
                            for (std::size_t k = 0; k < split.inner; ++k) {
                              const std::size_t j = argmax[i * split.inner + k];
                              gx[(i * split.extent + j) * split.inner + k] +=
                                  g[i * split.inner + k];
                            }
                          }
                        });
  return {v, std::move(argmax)};
}

/// Row-wise softmax over the last axis, max-subtracted.
inline Var softmax(Var x) {
  const Tensor& xv = x.value();
  const std::size_t n = xv.shape().back();
  const std::size_t rows = xv.size() / n;
  Tensor out(xv.shape());
  for (std::size_t r = 0; r < rows; ++r) {
    const double* in = xv.data().data() + r * n;
    double* o = out.data().data() + r * n;
    double m = in[0];
    for (std::size_t j = 1; j < n; ++j) m = std::max(m, in[j]);
    double z = 0.0;
    for (std::size_t j = 0; j < n; ++j) z += (o[j] = std::exp(in[j] - m));
    for (std::size_t j = 0; j < n; ++j) o[j] /= z;
  }
  Tape& tape = x.tape();
  const std::size_t self = tape.size();
  return tape.push(std::move(out), {x}, [x, self, n, rows](Tape& t, const Tensor& g) {
    const Tensor& y = t.value(self);
    auto gx = t.grad_ref(x.id()).data();
    for (std::size_t r = 0; r < rows; ++r) {
      double dot = 0.0;
      for (std::size_t j = 0; j < n; ++j) dot += g[r * n + j] * y[r * n + j];
      for (std::size_t j = 0; j < n; ++j) {
        gx[r * n + j] += y[r * n + j] * (g[r * n + j] - dot);
      }
    }
  });
}

/// Rows of `table` [vocab × d] selected by `ids`; result shape is
/// out_leading + [d]. Backward scatters into the referenced rows only.
inline Var gather_rows(Var table, const std::vector<std::size_t>& ids,
                       Shape out_leading) {
  const Tensor& tv = table.value();
  if (tv.rank() != 2) throw DimensionError("gather_rows: table must be 2-D");
  const std::size_t vocab = tv.dim(0), d = tv.dim(1);
  if (shape_size(out_leading) != ids.size()) {
    throw DimensionError("gather_rows: " + std::to_string(ids.size()) +
                         " ids do not fill " + shape_str(out_leading));
  }
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] >= vocab) {
      throw DataError("token id " + std::to_string(ids[i]) + " at position " +
                      std::to_string(i) + " is out of range for vocabulary of " +
                      std::to_string(vocab));
    }
  }
  Shape out_shape = std::move(out_leading);
  out_shape.push_back(d);
  Tensor out(out_shape);
  for (std::size_t i = 0; i < ids.size(); ++i) {
    std::copy_n(tv.data().begin() + ids[i] * d, d, out.data().begin() + i * d);
  }
  return table.tape().push(std::move(out), {table}, [table, ids, d](Tape& t, const Tensor& g) {
    auto gt = t.grad_ref(table.id()).data();
    for (std::size_t i = 0; i < ids.size(); ++i) {
      double* dst = gt.data() + ids[i] * d;
      const double* src = g.data().data() + i * d;
      for (std::size_t j = 0; j < d; ++j) dst[j] += src[j];
    }
  });
}

}  // namespace rcnnhw
