#pragma once

#include <cstddef>
#include <deque>
#include <functional>
#include <initializer_list>
#include <limits>
#include <numeric>
#include <string>
#include <utility>
#include <vector>

#include "sigrl/error.hpp"
#include "sigrl/tensor.hpp"

namespace sigrl {

class Tape;

/// Handle to a node recorded on a Tape.
class Var {
 public:
  Var() = default;
  Var(Tape* tape, std::size_t id) : tape_(tape), id_(id) {}

  bool valid() const noexcept { return tape_ != nullptr; }
  Tape& tape() const;
  std::size_t id() const noexcept { return id_; }

  const Tensor& value() const;
  const Tensor& grad() const;
  const Shape& shape() const { return value().shape(); }

 private:
  Tape* tape_ = nullptr;
  std::size_t id_ = 0;
};

/// Records a differentiation graph in creation order. Because a node can only
/// reference nodes created before it, reverse creation order is a reverse
/// topological order.
///
/// Not thread-safe; one thread builds and backpropagates a tape.
class Tape {
 public:
  /// Accumulates gradient into the parents of node `self`.
  using Backward = std::function<void(Tape&, std::size_t self)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var leaf(Tensor value, bool requires_grad = true) {
    return record(std::move(value), requires_grad, nullptr);
  }

  Var constant(Tensor value) { return leaf(std::move(value), false); }

  /// Records the result of a custom op. The node requires grad iff any
  /// parent does, in which case `backward` is kept.
  Var push(Tensor value, std::initializer_list<Var> parents, Backward backward) {
    bool rg = false;
    for (const Var& p : parents) {
      if (&p.tape() != this) throw ValueError("operands recorded on different tapes");
      rg = rg || nodes_[p.id()].requires_grad;
    }
    return record(std::move(value), rg, rg ? std::move(backward) : nullptr);
  }

  const Tensor& value(std::size_t id) const { return nodes_.at(id).value; }
  const Tensor& grad(std::size_t id) const { return nodes_.at(id).grad; }
  bool requires_grad(std::size_t id) const { return nodes_.at(id).requires_grad; }
  std::size_t size() const noexcept { return nodes_.size(); }

  /// Gradient buffer of node `id` for accumulation, or nullptr when the node
  /// does not require grad.
  Tensor* grad_target(std::size_t id) {
    Node& n = nodes_[id];
    if (!n.requires_grad) return nullptr;
    n.touched = true;
    return &n.grad;
  }

  /// Seeds d(root)/d(root) = 1 and propagates to every node below it. Each
  /// node's rule runs at most once per call.
  void backward(Var root) {
    if (&root.tape() != this) throw ValueError("root recorded on a different tape");
    Node& r = nodes_[root.id()];
    if (r.value.size() != 1) {
      throw DimensionError("backward() needs a scalar root, got " + shape_str(r.value.shape()));
    }
    if (!r.requires_grad) return;
    r.grad[0] += 1.0;
    r.touched = true;
    for (std::size_t i = root.id() + 1; i-- > 0;) {
      Node& n = nodes_[i];
      if (n.touched && n.backward) n.backward(*this, i);
    }
  }

  void zero_grad() {
    for (Node& n : nodes_) {
      std::fill(n.grad.values().begin(), n.grad.values().end(), 0.0);
      n.touched = false;
    }
  }

 private:
  struct Node {
    Tensor value;
    Tensor grad;
    bool requires_grad = false;
    bool touched = false;
    Backward backward;
  };

  Var record(Tensor value, bool requires_grad, Backward backward) {
    Node n;
    n.grad = Tensor(value.shape());
    n.value = std::move(value);
    n.requires_grad = requires_grad;
    n.backward = std::move(backward);
    nodes_.push_back(std::move(n));
    return Var(this, nodes_.size() - 1);
  }

  std::deque<Node> nodes_;
};

inline Tape& Var::tape() const {
  if (!tape_) throw ValueError("use of an unbound Var");
  return *tape_;
}
inline const Tensor& Var::value() const { return tape().value(id_); }
inline const Tensor& Var::grad() const { return tape().grad(id_); }

namespace detail {

inline Tape& common_tape(const Var& a, const Var& b) {
  if (&a.tape() != &b.tape()) throw ValueError("operands recorded on different tapes");
  return a.tape();
}

inline void require_same_shape(const char* op, const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) {
    throw DimensionError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                         shape_str(b.shape()));
  }
}

inline void require_rank(const char* op, const Tensor& a, std::size_t rank) {
  if (a.rank() != rank) {
    throw DimensionError(std::string(op) + ": expected rank " + std::to_string(rank) + ", got " +
                         shape_str(a.shape()));
  }
}

/// Elementwise op; `df(x, y)` is dy/dx at input x with output y.
template <class F, class DF>
Var unary(const Var& x, F f, DF df) {
  Tape& t = x.tape();
  const Tensor& xv = x.value();
  Tensor y(xv.shape());
  for (std::size_t i = 0; i < xv.size(); ++i) y[i] = f(xv[i]);
  return t.push(std::move(y), {x}, [xi = x.id(), df](Tape& t, std::size_t self) {
    Tensor* gx = t.grad_target(xi);
    if (!gx) return;
    const Tensor& g = t.grad(self);
    const Tensor& xv = t.value(xi);
    const Tensor& yv = t.value(self);
    for (std::size_t i = 0; i < g.size(); ++i) (*gx)[i] += g[i] * df(xv[i], yv[i]);
  });
}

struct AxisSplit {
  std::size_t outer, n, inner;
};

inline AxisSplit split_axis(const char* op, const Shape& shape, std::size_t axis) {
  if (axis >= shape.size()) {
    throw ValueError(std::string(op) + ": axis " + std::to_string(axis) + " invalid for " +
                     shape_str(shape));
  }
  AxisSplit s{1, shape[axis], 1};
  for (std::size_t i = 0; i < axis; ++i) s.outer *= shape[i];
  for (std::size_t i = axis + 1; i < shape.size(); ++i) s.inner *= shape[i];
  return s;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise arithmetic

inline Var add(const Var& a, const Var& b) {
  Tape& t = detail::common_tape(a, b);
  detail::require_same_shape("add", a.value(), b.value());
  Tensor y = a.value();
  y += b.value();
  return t.push(std::move(y), {a, b}, [ai = a.id(), bi = b.id()](Tape& t, std::size_t self) {
    if (Tensor* g = t.grad_target(ai)) *g += t.grad(self);
    if (Tensor* g = t.grad_target(bi)) *g += t.grad(self);
  });
}

inline Var sub(const Var& a, const Var& b) {
  Tape& t = detail::common_tape(a, b);
  detail::require_same_shape("sub", a.value(), b.value());
  Tensor y = a.value();
  for (std::size_t i = 0; i < y.size(); ++i) y[i] -= b.value()[i];
  return t.push(std::move(y), {a, b}, [ai = a.id(), bi = b.id()](Tape& t, std::size_t self) {
    const Tensor& g = t.grad(self);
    if (Tensor* ga = t.grad_target(ai)) *ga += g;
    if (Tensor* gb = t.grad_target(bi))
      for (std::size_t i = 0; i < g.size(); ++i) (*gb)[i] -= g[i];
  });
}

inline Var hadamard(const Var& a, const Var& b) {
  Tape& t = detail::common_tape(a, b);
  detail::require_same_shape("hadamard", a.value(), b.value());
  Tensor y = a.value();
  for (std::size_t i = 0; i < y.size(); ++i) y[i] *= b.value()[i];
  return t.push(std::move(y), {a, b}, [ai = a.id(), bi = b.id()](Tape& t, std::size_t self) {
    const Tensor& g = t.grad(self);
    const Tensor& av = t.value(ai);
    const Tensor& bv = t.value(bi);
    if (Tensor* ga = t.grad_target(ai))
      for (std::size_t i = 0; i < g.size(); ++i) (*ga)[i] += g[i] * bv[i];
    if (Tensor* gb = t.grad_target(bi))
      for (std::size_t i = 0; i < g.size(); ++i) (*gb)[i] += g[i] * av[i];
  });
}

inline Var scale(const Var& x, double c) {
  return detail::unary(x, [c](double v) { return c * v; }, [c](double, double) { return c; });
}

inline Var add_scalar(const Var& x, double c) {
  return detail::unary(x, [c](double v) { return v + c; }, [](double, double) { return 1.0; });
}

inline Var neg(const Var& x) { return scale(x, -1.0); }

// ---------------------------------------------------------------------------
// Nonlinearities

inline Var tanh_op(const Var& x) {
  return detail::unary(
      x, [](double v) { return std::tanh(v); }, [](double, double y) { return 1.0 - y * y; });
}

inline Var sigmoid_op(const Var& x) {
  return detail::unary(
      x,
      [](double v) {
        if (v >= 0) return 1.0 / (1.0 + std::exp(-v));
        const double e = std::exp(v);
        return e / (1.0 + e);
      },
      [](double, double y) { return y * (1.0 - y); });
}

/// max(x, 0); the derivative at exactly 0 is taken as 0.
inline Var relu_op(const Var& x) {
  return detail::unary(
      x, [](double v) { return v > 0 ? v : 0.0; }, [](double v, double) { return v > 0 ? 1.0 : 0.0; });
}

/// x for x >= 0, slope * x otherwise. The kink at 0 uses the positive branch.
inline Var leaky_relu(const Var& x, double slope = 0.2) {
  if (!(slope > 0.0 && slope < 1.0)) throw ValueError("leaky_relu: slope must lie in (0,1)");
  return detail::unary(
      x, [slope](double v) { return v >= 0 ? v : slope * v; },
      [slope](double v, double) { return v >= 0 ? 1.0 : slope; });
}

/// ELU with unit scale: x for x > 0, exp(x) - 1 otherwise.
inline Var elu_op(const Var& x) {
  return detail::unary(
      x, [](double v) { return v > 0 ? v : std::expm1(v); },
      [](double v, double y) { return v > 0 ? 1.0 : y + 1.0; });
}

inline Var exp_op(const Var& x) {
  return detail::unary(
      x, [](double v) { return std::exp(v); }, [](double, double y) { return y; });
}

inline constexpr double kLogEps = 1e-12;

/// log(max(x, 1e-12)); no gradient below the guard.
inline Var log_guarded(const Var& x) {
  return detail::unary(
      x, [](double v) { return std::log(std::max(v, kLogEps)); },
      [](double v, double) { return v > kLogEps ? 1.0 / v : 0.0; });
}

/// |x|; derivative 0 at x = 0.
inline Var abs_op(const Var& x) {
  return detail::unary(
      x, [](double v) { return std::abs(v); },
      [](double v, double) { return v > 0 ? 1.0 : (v < 0 ? -1.0 : 0.0); });
}

// ---------------------------------------------------------------------------
// Structural

inline Var reshape(const Var& x, Shape shape) {
  Tensor y = x.value().reshaped(std::move(shape));
  return x.tape().push(std::move(y), {x}, [xi = x.id()](Tape& t, std::size_t self) {
    Tensor* gx = t.grad_target(xi);
    if (!gx) return;
    const Tensor& g = t.grad(self);
    for (std::size_t i = 0; i < g.size(); ++i) (*gx)[i] += g[i];
  });
}

inline Var transpose(const Var& x) {
  const Tensor& xv = x.value();
  detail::require_rank("transpose", xv, 2);
  const std::size_t r = xv.dim(0), c = xv.dim(1);
  Tensor y(Shape{c, r});
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) y.at(j, i) = xv.at(i, j);
  return x.tape().push(std::move(y), {x}, [xi = x.id(), r, c](Tape& t, std::size_t self) {
    Tensor* gx = t.grad_target(xi);
    if (!gx) return;
    const Tensor& g = t.grad(self);
    for (std::size_t i = 0; i < r; ++i)
      for (std::size_t j = 0; j < c; ++j) gx->at(i, j) += g.at(j, i);
  });
}

/// Concatenates two tensors of equal rank along `axis`.
inline Var concat(const Var& a, const Var& b, std::size_t axis) {
  Tape& t = detail::common_tape(a, b);
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  if (av.rank() != bv.rank()) {
    throw DimensionError("concat: rank mismatch " + shape_str(av.shape()) + " vs " +
                         shape_str(bv.shape()));
  }
  const auto sa = detail::split_axis("concat", av.shape(), axis);
  const auto sb = detail::split_axis("concat", bv.shape(), axis);
  for (std::size_t i = 0; i < av.rank(); ++i) {
    if (i != axis && av.dim(i) != bv.dim(i)) {
      throw DimensionError("concat: shape mismatch " + shape_str(av.shape()) + " vs " +
                           shape_str(bv.shape()));
    }
  }
  Shape out_shape = av.shape();
  out_shape[axis] += bv.dim(axis);
  Tensor y(out_shape);
  const std::size_t wa = sa.n * sa.inner, wb = sb.n * sb.inner;
  for (std::size_t o = 0; o < sa.outer; ++o) {
    std::copy_n(av.data().begin() + o * wa, wa, y.data().begin() + o * (wa + wb));
    std::copy_n(bv.data().begin() + o * wb, wb, y.data().begin() + o * (wa + wb) + wa);
  }
  return t.push(std::move(y), {a, b},
                [ai = a.id(), bi = b.id(), outer = sa.outer, wa, wb](Tape& t, std::size_t self) {
                  const Tensor& g = t.grad(self);
                  Tensor* ga = t.grad_target(ai);
                  Tensor* gb = t.grad_target(bi);
                  for (std::size_t o = 0; o < outer; ++o) {
                    const std::size_t base = o * (wa + wb);
                    if (ga)
                      for (std::size_t i = 0; i < wa; ++i) (*ga)[o * wa + i] += g[base + i];
                    if (gb)
                      for (std::size_t i = 0; i < wb; ++i) (*gb)[o * wb + i] += g[base + wa + i];
                  }
                });
}

/// Column `j` of a matrix, as a vector.
inline Var column(const Var& x, std::size_t j) {
  const Tensor& xv = x.value();
  detail::require_rank("column", xv, 2);
  if (j >= xv.dim(1)) throw ValueError("column: index out of range");
  const std::size_t r = xv.dim(0), c = xv.dim(1);
  Tensor y(Shape{r});
  for (std::size_t i = 0; i < r; ++i) y[i] = xv.at(i, j);
  return x.tape().push(std::move(y), {x}, [xi = x.id(), j, r, c](Tape& t, std::size_t self) {
    Tensor* gx = t.grad_target(xi);
    if (!gx) return;
    const Tensor& g = t.grad(self);
    for (std::size_t i = 0; i < r; ++i) (*gx)[i * c + j] += g[i];
  });
}

/// y[m] = x[index[m]] for a vector x.
inline Var gather(const Var& x, std::vector<std::size_t> index) {
  const Tensor& xv = x.value();
  detail::require_rank("gather", xv, 1);
  Tensor y(Shape{index.size()});
  for (std::size_t m = 0; m < index.size(); ++m) {
    if (index[m] >= xv.size()) throw ValueError("gather: index out of range");
    y[m] = xv[index[m]];
  }
  return x.tape().push(std::move(y), {x},
                       [xi = x.id(), index = std::move(index)](Tape& t, std::size_t self) {
                         Tensor* gx = t.grad_target(xi);
                         if (!gx) return;
                         const Tensor& g = t.grad(self);
                         for (std::size_t m = 0; m < index.size(); ++m) (*gx)[index[m]] += g[m];
                       });
}

/// y[i][j] = u[i] + v[j].
inline Var outer_add(const Var& u, const Var& v) {
  Tape& t = detail::common_tape(u, v);
  detail::require_rank("outer_add", u.value(), 1);
  detail::require_rank("outer_add", v.value(), 1);
  const std::size_t m = u.value().size(), n = v.value().size();
  Tensor y(Shape{m, n});
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) y.at(i, j) = u.value()[i] + v.value()[j];
  return t.push(std::move(y), {u, v}, [ui = u.id(), vi = v.id(), m, n](Tape& t, std::size_t self) {
    const Tensor& g = t.grad(self);
    if (Tensor* gu = t.grad_target(ui))
      for (std::size_t i = 0; i < m; ++i) {
        std::vector<double> terms(g.row(i).begin(), g.row(i).end());
        (*gu)[i] += invariant_sum(std::move(terms));
      }
    if (Tensor* gv = t.grad_target(vi))
      for (std::size_t j = 0; j < n; ++j) {
        std::vector<double> terms(m);
        for (std::size_t i = 0; i < m; ++i) terms[i] = g.at(i, j);
        (*gv)[j] += invariant_sum(std::move(terms));
      }
  });
}

// ---------------------------------------------------------------------------
// Linear algebra

/// Standard matrix product of an m x k and a k x n matrix.
inline Var matmul(const Var& a, const Var& b) {
  Tape& t = detail::common_tape(a, b);
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  if (av.rank() != 2 || bv.rank() != 2 || av.dim(1) != bv.dim(0)) {
    throw DimensionError("matmul: cannot multiply " + shape_str(av.shape()) + " by " +
                         shape_str(bv.shape()));
  }
  const std::size_t m = av.dim(0), k = av.dim(1), n = bv.dim(1);
  Tensor y(Shape{m, n});
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t p = 0; p < k; ++p) {
      const double aip = av[i * k + p];
      for (std::size_t j = 0; j < n; ++j) y[i * n + j] += aip * bv[p * n + j];
    }
  return t.push(std::move(y), {a, b}, [ai = a.id(), bi = b.id(), m, k, n](Tape& t, std::size_t self) {
    const Tensor& g = t.grad(self);
    const Tensor& av = t.value(ai);
    const Tensor& bv = t.value(bi);
    if (Tensor* ga = t.grad_target(ai))  // dA = dC B^T
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t p = 0; p < k; ++p) {
          double s = 0.0;
          for (std::size_t j = 0; j < n; ++j) s += g[i * n + j] * bv[p * n + j];
          (*ga)[i * k + p] += s;
        }
    if (Tensor* gb = t.grad_target(bi))  // dB = A^T dC
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t p = 0; p < k; ++p) {
          const double aip = av[i * k + p];
          for (std::size_t j = 0; j < n; ++j) (*gb)[p * n + j] += aip * g[i * n + j];
        }
  });
}

/// Affine map along the last axis: x W + b, with x of shape [in] or [n x in],
/// W of shape [in x out] and b of shape [out].
inline Var linear(const Var& x, const Var& w, const Var& b) {
  Tape& t = detail::common_tape(x, w);
  detail::common_tape(x, b);
  const Tensor& xv = x.value();
  const Tensor& wv = w.value();
  const Tensor& bv = b.value();
  if (xv.rank() < 1 || xv.rank() > 2 || wv.rank() != 2 || bv.rank() != 1 ||
      xv.shape().back() != wv.dim(0) || bv.dim(0) != wv.dim(1)) {
    throw DimensionError("linear: incompatible shapes x" + shape_str(xv.shape()) + " W" +
                         shape_str(wv.shape()) + " b" + shape_str(bv.shape()));
  }
  const std::size_t rows = xv.rank() == 1 ? 1 : xv.dim(0);
  const std::size_t in = wv.dim(0), out = wv.dim(1);
  Shape out_shape = xv.rank() == 1 ? Shape{out} : Shape{rows, out};
  Tensor y(out_shape);
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t o = 0; o < out; ++o) y[r * out + o] = bv[o];
    for (std::size_t p = 0; p < in; ++p) {
      const double xp = xv[r * in + p];
      for (std::size_t o = 0; o < out; ++o) y[r * out + o] += xp * wv[p * out + o];
    }
  }
  return t.push(std::move(y), {x, w, b},
                [xi = x.id(), wi = w.id(), bi = b.id(), rows, in, out](Tape& t, std::size_t self) {
                  const Tensor& g = t.grad(self);
                  const Tensor& xv = t.value(xi);
                  const Tensor& wv = t.value(wi);
                  if (Tensor* gx = t.grad_target(xi))
                    for (std::size_t r = 0; r < rows; ++r)
                      for (std::size_t p = 0; p < in; ++p) {
                        double s = 0.0;
                        for (std::size_t o = 0; o < out; ++o) s += g[r * out + o] * wv[p * out + o];
                        (*gx)[r * in + p] += s;
                      }
                  if (Tensor* gw = t.grad_target(wi))
                    for (std::size_t r = 0; r < rows; ++r)
                      for (std::size_t p = 0; p < in; ++p) {
                        const double xp = xv[r * in + p];
                        for (std::size_t o = 0; o < out; ++o) (*gw)[p * out + o] += xp * g[r * out + o];
                      }
                  if (Tensor* gb = t.grad_target(bi))
                    for (std::size_t r = 0; r < rows; ++r)
                      for (std::size_t o = 0; o < out; ++o) (*gb)[o] += g[r * out + o];
                });
}

/// out[i] = sum_j weights[i][j] * rows[j], reducing over j with
/// invariant_sum so that a joint permutation of j is bit-exact.
inline Var mix_rows(const Var& weights, const Var& rows) {
  Tape& t = detail::common_tape(weights, rows);
  const Tensor& wv = weights.value();
  const Tensor& xv = rows.value();
  if (wv.rank() != 2 || xv.rank() != 2 || wv.dim(1) != xv.dim(0)) {
    throw DimensionError("mix_rows: cannot mix " + shape_str(xv.shape()) + " with weights " +
                         shape_str(wv.shape()));
  }
  const std::size_t m = wv.dim(0), n = wv.dim(1), d = xv.dim(1);
  Tensor y(Shape{m, d});
  std::vector<double> terms(n);
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t c = 0; c < d; ++c) {
      for (std::size_t j = 0; j < n; ++j) terms[j] = wv[i * n + j] * xv[j * d + c];
      y[i * d + c] = invariant_sum(terms);
    }
  return t.push(std::move(y), {weights, rows},
                [wi = weights.id(), xi = rows.id(), m, n, d](Tape& t, std::size_t self) {
                  const Tensor& g = t.grad(self);
                  const Tensor& wv = t.value(wi);
                  const Tensor& xv = t.value(xi);
                  if (Tensor* gw = t.grad_target(wi))
                    for (std::size_t i = 0; i < m; ++i)
                      for (std::size_t j = 0; j < n; ++j) {
                        double s = 0.0;
                        for (std::size_t c = 0; c < d; ++c) s += g[i * d + c] * xv[j * d + c];
                        (*gw)[i * n + j] += s;
                      }
                  if (Tensor* gx = t.grad_target(xi)) {
                    std::vector<double> terms(m);
                    for (std::size_t j = 0; j < n; ++j)
                      for (std::size_t c = 0; c < d; ++c) {
                        for (std::size_t i = 0; i < m; ++i) terms[i] = wv[i * n + j] * g[i * d + c];
                        (*gx)[j * d + c] += invariant_sum(terms);
                      }
                  }
                });
}

/// Row (i, p) of the result is rows_a[i] * rows_b[p] elementwise; output
/// shape [m*n x d] for inputs [m x d] and [n x d].
inline Var outer_hadamard(const Var& a, const Var& b) {
  Tape& t = detail::common_tape(a, b);
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  if (av.rank() != 2 || bv.rank() != 2 || av.dim(1) != bv.dim(1)) {
    throw DimensionError("outer_hadamard: shape mismatch " + shape_str(av.shape()) + " vs " +
                         shape_str(bv.shape()));
  }
  const std::size_t m = av.dim(0), n = bv.dim(0), d = av.dim(1);
  Tensor y(Shape{m * n, d});
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t p = 0; p < n; ++p)
      for (std::size_t c = 0; c < d; ++c) y[(i * n + p) * d + c] = av[i * d + c] * bv[p * d + c];
  return t.push(std::move(y), {a, b}, [ai = a.id(), bi = b.id(), m, n, d](Tape& t, std::size_t self) {
    const Tensor& g = t.grad(self);
    const Tensor& av = t.value(ai);
    const Tensor& bv = t.value(bi);
    Tensor* ga = t.grad_target(ai);
    Tensor* gb = t.grad_target(bi);
    if (ga)
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t p = 0; p < n; ++p)
          for (std::size_t c = 0; c < d; ++c) (*ga)[i * d + c] += g[(i * n + p) * d + c] * bv[p * d + c];
    if (gb) {
      std::vector<double> terms(m);
      for (std::size_t p = 0; p < n; ++p)
        for (std::size_t c = 0; c < d; ++c) {
          for (std::size_t i = 0; i < m; ++i) terms[i] = g[(i * n + p) * d + c] * av[i * d + c];
          (*gb)[p * d + c] += invariant_sum(terms);
        }
    }
  });
}

/// y[p] = w[p] * x[p] for a matrix x and a vector w of its row count.
inline Var row_scale(const Var& x, const Var& w) {
  Tape& t = detail::common_tape(x, w);
  const Tensor& xv = x.value();
  const Tensor& wv = w.value();
  if (xv.rank() != 2 || wv.rank() != 1 || wv.dim(0) != xv.dim(0)) {
    throw DimensionError("row_scale: shape mismatch " + shape_str(xv.shape()) + " vs " +
                         shape_str(wv.shape()));
  }
  const std::size_t r = xv.dim(0), d = xv.dim(1);
  Tensor y(xv.shape());
  for (std::size_t p = 0; p < r; ++p)
    for (std::size_t c = 0; c < d; ++c) y[p * d + c] = wv[p] * xv[p * d + c];
  return t.push(std::move(y), {x, w}, [xi = x.id(), wi = w.id(), r, d](Tape& t, std::size_t self) {
    const Tensor& g = t.grad(self);
    const Tensor& xv = t.value(xi);
    const Tensor& wv = t.value(wi);
    if (Tensor* gx = t.grad_target(xi))
      for (std::size_t p = 0; p < r; ++p)
        for (std::size_t c = 0; c < d; ++c) (*gx)[p * d + c] += g[p * d + c] * wv[p];
    if (Tensor* gw = t.grad_target(wi))
      for (std::size_t p = 0; p < r; ++p) {
        double s = 0.0;
        for (std::size_t c = 0; c < d; ++c) s += g[p * d + c] * xv[p * d + c];
        (*gw)[p] += s;
      }
  });
}

// ---------------------------------------------------------------------------
// Reductions

/// Sum of all elements, as a rank-0 tensor.
inline Var sum(const Var& x) {
  Tensor y = Tensor::scalar(invariant_sum(x.value().values()));
  return x.tape().push(std::move(y), {x}, [xi = x.id()](Tape& t, std::size_t self) {
    Tensor* gx = t.grad_target(xi);
    if (!gx) return;
    const double g = t.grad(self)[0];
    for (double& v : gx->values()) v += g;
  });
}

inline Var mean(const Var& x) {
  if (x.value().size() == 0) throw ValueError("mean of an empty tensor");
  return scale(sum(x), 1.0 / static_cast<double>(x.value().size()));
}

/// Sum along `axis`; the axis is removed from the shape.
inline Var sum(const Var& x, std::size_t axis) {
  const Tensor& xv = x.value();
  const auto s = detail::split_axis("sum", xv.shape(), axis);
  Shape out_shape = xv.shape();
  out_shape.erase(out_shape.begin() + static_cast<std::ptrdiff_t>(axis));
  Tensor y(out_shape);
  std::vector<double> terms(s.n);
  for (std::size_t o = 0; o < s.outer; ++o)
    for (std::size_t in = 0; in < s.inner; ++in) {
      for (std::size_t j = 0; j < s.n; ++j) terms[j] = xv[(o * s.n + j) * s.inner + in];
      y[o * s.inner + in] = invariant_sum(terms);
    }
  return x.tape().push(std::move(y), {x}, [xi = x.id(), s](Tape& t, std::size_t self) {
    Tensor* gx = t.grad_target(xi);
    if (!gx) return;
    const Tensor& g = t.grad(self);
    for (std::size_t o = 0; o < s.outer; ++o)
      for (std::size_t j = 0; j < s.n; ++j)
        for (std::size_t in = 0; in < s.inner; ++in)
          (*gx)[(o * s.n + j) * s.inner + in] += g[o * s.inner + in];
  });
}

inline Var mean(const Var& x, std::size_t axis) {
  const auto s = detail::split_axis("mean", x.value().shape(), axis);
  if (s.n == 0) throw ValueError("mean over an empty axis");
  return scale(sum(x, axis), 1.0 / static_cast<double>(s.n));
}

/// Softmax along `axis`, computed with max subtraction.
inline Var softmax(const Var& x, std::size_t axis) {
  const Tensor& xv = x.value();
  const auto s = detail::split_axis("softmax", xv.shape(), axis);
  Tensor y(xv.shape());
  std::vector<double> e(s.n);
  for (std::size_t o = 0; o < s.outer; ++o)
    for (std::size_t in = 0; in < s.inner; ++in) {
      auto idx = [&](std::size_t j) { return (o * s.n + j) * s.inner + in; };
      double mx = -std::numeric_limits<double>::infinity();
      for (std::size_t j = 0; j < s.n; ++j) mx = std::max(mx, xv[idx(j)]);
      for (std::size_t j = 0; j < s.n; ++j) e[j] = std::exp(xv[idx(j)] - mx);
      const double z = invariant_sum(e);
      for (std::size_t j = 0; j < s.n; ++j) y[idx(j)] = e[j] / z;
    }
  return x.tape().push(std::move(y), {x}, [xi = x.id(), s](Tape& t, std::size_t self) {
    Tensor* gx = t.grad_target(xi);
    if (!gx) return;
    const Tensor& g = t.grad(self);
    const Tensor& yv = t.value(self);
    std::vector<double> terms(s.n);
    for (std::size_t o = 0; o < s.outer; ++o)
      for (std::size_t in = 0; in < s.inner; ++in) {
        auto idx = [&](std::size_t j) { return (o * s.n + j) * s.inner + in; };
        for (std::size_t j = 0; j < s.n; ++j) terms[j] = yv[idx(j)] * g[idx(j)];
        const double dot = invariant_sum(terms);
        for (std::size_t j = 0; j < s.n; ++j) (*gx)[idx(j)] += yv[idx(j)] * (g[idx(j)] - dot);
      }
  });
}

namespace detail {

/// Indices of the k largest entries of `v`, ties to the lowest index.
inline std::vector<std::size_t> topk_indices(std::span<const double> v, std::size_t k) {
  std::vector<std::size_t> order(v.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return v[a] > v[b]; });
  order.resize(k);
  return order;
}

}  // namespace detail

/// Mean of each row's k largest entries; [m x n] -> [m]. A vector is treated
/// as a single row and yields a rank-0 result.
inline Var topk_mean_rows(const Var& x, std::size_t k) {
  const Tensor& xv = x.value();
  if (xv.rank() != 1 && xv.rank() != 2) throw DimensionError("topk_mean: expected a vector or matrix");
  const std::size_t m = xv.rank() == 1 ? 1 : xv.dim(0);
  const std::size_t n = xv.shape().back();
  if (k < 1 || k > n) {
    throw ValueError("topk_mean: k=" + std::to_string(k) + " outside [1, " + std::to_string(n) + "]");
  }
  Tensor y(xv.rank() == 1 ? Shape{} : Shape{m});
  std::vector<std::size_t> chosen;
  chosen.reserve(m * k);
  std::vector<double> terms(k);
  for (std::size_t i = 0; i < m; ++i) {
    const auto row = xv.data().subspan(i * n, n);
    const auto idx = detail::topk_indices(row, k);
    for (std::size_t q = 0; q < k; ++q) terms[q] = row[idx[q]];
    y[i] = invariant_sum(terms) / static_cast<double>(k);
    chosen.insert(chosen.end(), idx.begin(), idx.end());
  }
  return x.tape().push(std::move(y), {x},
                       [xi = x.id(), m, n, k, chosen = std::move(chosen)](Tape& t, std::size_t self) {
                         Tensor* gx = t.grad_target(xi);
                         if (!gx) return;
                         const Tensor& g = t.grad(self);
                         const double inv_k = 1.0 / static_cast<double>(k);
                         for (std::size_t i = 0; i < m; ++i)
                           for (std::size_t q = 0; q < k; ++q) (*gx)[i * n + chosen[i * k + q]] += g[i] * inv_k;
                       });
}

/// Mean of the k largest entries of a vector.
inline Var topk_mean(const Var& x, std::size_t k) {
  detail::require_rank("topk_mean", x.value(), 1);
  return topk_mean_rows(x, k);
}

/// Sum of absolute differences.
inline Var l1_distance(const Var& a, const Var& b) {
  detail::require_same_shape("l1_distance", a.value(), b.value());
  return sum(abs_op(sub(a, b)));
}

inline constexpr double kCosineEps = 1e-12;

/// Pairwise cosine similarity between the rows of a [m x d] and b [n x d],
/// dot / (|a||b| + 1e-12). A zero-norm row gives 0 and passes no gradient
/// through its norm.
inline Var cosine_rows(const Var& a, const Var& b) {
  Tape& t = detail::common_tape(a, b);
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  if (av.rank() != 2 || bv.rank() != 2 || av.dim(1) != bv.dim(1)) {
    throw DimensionError("cosine: shape mismatch " + shape_str(av.shape()) + " vs " +
                         shape_str(bv.shape()));
  }
  const std::size_t m = av.dim(0), n = bv.dim(0), d = av.dim(1);
  auto norms = [d](const Tensor& x) {
    std::vector<double> out(x.dim(0));
    for (std::size_t i = 0; i < out.size(); ++i) {
      double s = 0.0;
      for (std::size_t c = 0; c < d; ++c) s += x[i * d + c] * x[i * d + c];
      out[i] = std::sqrt(s);
    }
    return out;
  };
  std::vector<double> na = norms(av), nb = norms(bv);
  Tensor y(Shape{m, n});
  std::vector<double> dots(m * n);
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) {
      double s = 0.0;
      for (std::size_t c = 0; c < d; ++c) s += av[i * d + c] * bv[j * d + c];
      dots[i * n + j] = s;
      y[i * n + j] = s / (na[i] * nb[j] + kCosineEps);
    }
  return t.push(std::move(y), {a, b},
                [ai = a.id(), bi = b.id(), m, n, d, na = std::move(na), nb = std::move(nb),
                 dots = std::move(dots)](Tape& t, std::size_t self) {
                  const Tensor& g = t.grad(self);
                  const Tensor& av = t.value(ai);
                  const Tensor& bv = t.value(bi);
                  Tensor* ga = t.grad_target(ai);
                  Tensor* gb = t.grad_target(bi);
                  for (std::size_t i = 0; i < m; ++i)
                    for (std::size_t j = 0; j < n; ++j) {
                      const double gij = g[i * n + j];
                      if (gij == 0.0) continue;
                      const double den = na[i] * nb[j] + kCosineEps;
                      const double dot = dots[i * n + j];
                      // d/da = b/den - dot * |b| * (a/|a|) / den^2
                      const double ca = na[i] > 0 ? dot * nb[j] / (na[i] * den * den) : 0.0;
                      const double cb = nb[j] > 0 ? dot * na[i] / (nb[j] * den * den) : 0.0;
                      for (std::size_t c = 0; c < d; ++c) {
                        if (ga) (*ga)[i * d + c] += gij * (bv[j * d + c] / den - ca * av[i * d + c]);
                        if (gb) (*gb)[j * d + c] += gij * (av[i * d + c] / den - cb * bv[j * d + c]);
                      }
                    }
                });
}

/// Cosine similarity of two vectors, as a rank-0 tensor.
inline Var cosine_sim(const Var& a, const Var& b) {
  detail::require_rank("cosine_sim", a.value(), 1);
  detail::require_same_shape("cosine_sim", a.value(), b.value());
  const std::size_t d = a.value().size();
  return reshape(cosine_rows(reshape(a, {1, d}), reshape(b, {1, d})), {});
}

/// Divides each row of a nonnegative matrix by its sum. Rows summing to zero
/// become uniform, and pass no gradient.
inline Var normalize_rows_l1(const Var& x) {
  const Tensor& xv = x.value();
  detail::require_rank("normalize_rows_l1", xv, 2);
  const std::size_t m = xv.dim(0), n = xv.dim(1);
  Tensor y(xv.shape());
  std::vector<double> sums(m);
  for (std::size_t i = 0; i < m; ++i) {
    const auto row = xv.row(i);
    sums[i] = invariant_sum(std::vector<double>(row.begin(), row.end()));
    for (std::size_t j = 0; j < n; ++j)
      y[i * n + j] = sums[i] != 0.0 ? row[j] / sums[i] : 1.0 / static_cast<double>(n);
  }
  return x.tape().push(std::move(y), {x},
                       [xi = x.id(), m, n, sums = std::move(sums)](Tape& t, std::size_t self) {
                         Tensor* gx = t.grad_target(xi);
                         if (!gx) return;
                         const Tensor& g = t.grad(self);
                         const Tensor& yv = t.value(self);
                         std::vector<double> terms(n);
                         for (std::size_t i = 0; i < m; ++i) {
                           if (sums[i] == 0.0) continue;
                           for (std::size_t j = 0; j < n; ++j) terms[j] = g[i * n + j] * yv[i * n + j];
                           const double dot = invariant_sum(terms);
                           for (std::size_t j = 0; j < n; ++j)
                             (*gx)[i * n + j] += (g[i * n + j] - dot) / sums[i];
                         }
                       });
}

}  // namespace sigrl
