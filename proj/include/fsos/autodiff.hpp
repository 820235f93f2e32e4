#pragma once

// Reverse-mode differentiation over dense tensors.
//
// A Tape owns every value produced during one forward pass. Var is a cheap
// handle (tape, node id). Nodes are appended in evaluation order, so insertion
// order is already a topological order and backward() simply walks the tape in
// reverse once.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <deque>
#include <functional>
#include <limits>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Core>

#include "fsos/errors.hpp"
#include "fsos/tensor.hpp"

namespace fsos {

class Tape;

struct Var {
  Tape* tape = nullptr;
  std::size_t id = 0;

  const Tensor& value() const;
  const Shape& shape() const { return value().shape(); }
  double item() const { return value().item(); }
};

class Tape {
 public:
  // Receives the node's output and the gradient flowing into it; pushes contributions to its inputs.
  using BackwardFn = std::function<void(Tape&, const Tensor& out, const Tensor& grad)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var leaf(Tensor value, bool requires_grad) {
    nodes_.push_back(Node{std::move(value), {}, false, requires_grad, {}, nullptr});
    return Var{this, nodes_.size() - 1};
  }

  Var constant(Tensor value) { return leaf(std::move(value), false); }

  // Leaf that refers to `value` without copying it; `value` must outlive the tape.
  Var borrow(const Tensor& value, bool requires_grad) {
    nodes_.push_back(Node{Tensor{}, {}, false, requires_grad, {}, &value});
    return Var{this, nodes_.size() - 1};
  }

  // Append an operation result. The backward rule is dropped when no input needs a gradient.
  Var record(Tensor value, std::initializer_list<Var> inputs, BackwardFn backward) {
    bool needs = false;
    for (const Var& v : inputs) {
      check_owner(v);
      needs = needs || nodes_[v.id].requires_grad;
    }
    nodes_.push_back(Node{std::move(value), {}, false, needs, needs ? std::move(backward) : BackwardFn{}, nullptr});
    return Var{this, nodes_.size() - 1};
  }

  Var record(Tensor value, std::span<const Var> inputs, BackwardFn backward) {
    bool needs = false;
    for (const Var& v : inputs) {
      check_owner(v);
      needs = needs || nodes_[v.id].requires_grad;
    }
    nodes_.push_back(Node{std::move(value), {}, false, needs, needs ? std::move(backward) : BackwardFn{}, nullptr});
    return Var{this, nodes_.size() - 1};
  }

  const Tensor& value(Var v) const {
    check_owner(v);
    return nodes_[v.id].get();
  }

  bool requires_grad(Var v) const {
    check_owner(v);
    return nodes_[v.id].requires_grad;
  }

  // Gradient of the last backward() target with respect to v; zeros when v was not reached.
  Tensor grad(Var v) const {
    check_owner(v);
    const Node& n = nodes_[v.id];
    if (!n.has_grad) return Tensor(n.get().shape(), 0.0);
    return n.grad;
  }

  // Add `g` into the gradient of node `id`. No-op for nodes that do not require gradients.
  void accumulate(std::size_t id, std::span<const double> g) {
    Node& n = nodes_[id];
    if (!n.requires_grad) return;
    ensure_grad(n);
    auto& dst = n.grad.storage();
    for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += g[i];
  }

  bool wants_grad(std::size_t id) const { return nodes_[id].requires_grad; }

  // Mutable gradient buffer of node `id`, allocated as zeros on first use.
  Tensor& grad_buffer(std::size_t id) {
    Node& n = nodes_[id];
    ensure_grad(n);
    return n.grad;
  }

  // Computes d(loss)/d(node) for every node that requires gradients. Previous gradients are cleared.
  void backward(Var loss) {
    check_owner(loss);
    if (nodes_[loss.id].get().size() != 1) {
      throw ContractError("backward() needs a scalar loss, got shape " +
                          to_string(nodes_[loss.id].get().shape()));
    }
    zero_grad();
    if (!nodes_[loss.id].requires_grad) return;
    Node& root = nodes_[loss.id];
    ensure_grad(root);
    root.grad[0] = 1.0;
    for (std::size_t i = loss.id + 1; i-- > 0;) {
      Node& n = nodes_[i];
      if (!n.has_grad || !n.backward) continue;
      n.backward(*this, n.get(), n.grad);
    }
  }

  void zero_grad() {
    for (Node& n : nodes_) {
      n.has_grad = false;
      n.grad = Tensor{};
    }
  }

  std::size_t size() const noexcept { return nodes_.size(); }

 private:
  struct Node {
    Tensor value;
    Tensor grad;
    bool has_grad = false;
    bool requires_grad = false;
    BackwardFn backward;
    const Tensor* external = nullptr;

    const Tensor& get() const { return external ? *external : value; }
  };

  void ensure_grad(Node& n) {
    if (!n.has_grad) {
      n.grad = Tensor(n.get().shape(), 0.0);
      n.has_grad = true;
    }
  }

  void check_owner(Var v) const {
    if (v.tape != this || v.id >= nodes_.size()) throw ContractError("variable does not belong to this tape");
  }

  std::deque<Node> nodes_;
};

inline const Tensor& Var::value() const {
  if (!tape) throw ContractError("unbound variable");
  return tape->value(*this);
}

namespace detail {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapMat = Eigen::Map<RowMat>;
using CMapMat = Eigen::Map<const RowMat>;

inline CMapMat as_mat(const Tensor& t) {
  return CMapMat(t.storage().data(), static_cast<Eigen::Index>(t.dim(0)), static_cast<Eigen::Index>(t.dim(1)));
}
inline MapMat as_mat(Tensor& t) {
  return MapMat(t.storage().data(), static_cast<Eigen::Index>(t.dim(0)), static_cast<Eigen::Index>(t.dim(1)));
}

inline void require_same_shape(const char* op, const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) {
    throw DimensionError(std::string(op) + ": shape mismatch " + to_string(a.shape()) + " vs " + to_string(b.shape()));
  }
}

inline void require_rank(const char* op, const Tensor& a, std::size_t rank) {
  if (a.rank() != rank) {
    throw DimensionError(std::string(op) + ": expected rank " + std::to_string(rank) + ", got shape " +
                         to_string(a.shape()));
  }
}

// Split a shape around `axis` into (outer, axis length, inner) for strided reductions.
struct AxisSplit {
  std::size_t outer = 1, len = 1, inner = 1;
};

inline AxisSplit split_axis(const Shape& s, std::size_t axis) {
  AxisSplit r;
  for (std::size_t i = 0; i < axis; ++i) r.outer *= s[i];
  r.len = s[axis];
  for (std::size_t i = axis + 1; i < s.size(); ++i) r.inner *= s[i];
  return r;
}

// Elementwise map; dfn(x, y) is the derivative given input x and output y.
template <class F, class DF>
Var unary_map(Var x, F&& fn, DF dfn) {
  const Tensor& xv = x.value();
  Tensor out(xv.shape());
  for (std::size_t i = 0; i < xv.size(); ++i) out[i] = fn(xv[i]);
  const std::size_t xid = x.id;
  return x.tape->record(std::move(out), {x}, [xid, dfn](Tape& t, const Tensor& y, const Tensor& g) {
    if (!t.wants_grad(xid)) return;
    const Tensor& xv = t.value(Var{&t, xid});
    Tensor& gx = t.grad_buffer(xid);
    for (std::size_t i = 0; i < xv.size(); ++i) gx[i] += g[i] * dfn(xv[i], y[i]);
  });
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise

inline Var add(Var a, Var b) {
  detail::require_same_shape("add", a.value(), b.value());
  Tensor out = a.value();
  const Tensor& bv = b.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += bv[i];
  const std::size_t ai = a.id, bi = b.id;
  return a.tape->record(std::move(out), {a, b}, [ai, bi](Tape& t, const Tensor&, const Tensor& g) {
    t.accumulate(ai, g.data());
    t.accumulate(bi, g.data());
  });
}

inline Var sub(Var a, Var b) {
  detail::require_same_shape("sub", a.value(), b.value());
  Tensor out = a.value();
  const Tensor& bv = b.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] -= bv[i];
  const std::size_t ai = a.id, bi = b.id;
  return a.tape->record(std::move(out), {a, b}, [ai, bi](Tape& t, const Tensor&, const Tensor& g) {
    t.accumulate(ai, g.data());
    if (t.wants_grad(bi)) {
      Tensor& gb = t.grad_buffer(bi);
      for (std::size_t i = 0; i < g.size(); ++i) gb[i] -= g[i];
    }
  });
}

inline Var mul(Var a, Var b) {
  detail::require_same_shape("mul", a.value(), b.value());
  Tensor out = a.value();
  const Tensor& bv = b.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= bv[i];
  const std::size_t ai = a.id, bi = b.id;
  return a.tape->record(std::move(out), {a, b}, [ai, bi](Tape& t, const Tensor&, const Tensor& g) {
    const Tensor& av = t.value(Var{&t, ai});
    const Tensor& bv = t.value(Var{&t, bi});
    if (t.wants_grad(ai)) {
      Tensor& ga = t.grad_buffer(ai);
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * bv[i];
    }
    if (t.wants_grad(bi)) {
      Tensor& gb = t.grad_buffer(bi);
      for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * av[i];
    }
  });
}

inline Var scale(Var x, double s) {
  Tensor out = x.value();
  for (double& v : out.storage()) v *= s;
  const std::size_t xi = x.id;
  return x.tape->record(std::move(out), {x}, [xi, s](Tape& t, const Tensor&, const Tensor& g) {
    if (!t.wants_grad(xi)) return;
    Tensor& gx = t.grad_buffer(xi);
    for (std::size_t i = 0; i < g.size(); ++i) gx[i] += s * g[i];
  });
}

inline Var operator+(Var a, Var b) { return add(a, b); }
inline Var operator-(Var a, Var b) { return sub(a, b); }
inline Var operator*(Var a, Var b) { return mul(a, b); }
inline Var operator*(double s, Var x) { return scale(x, s); }
inline Var operator-(Var x) { return scale(x, -1.0); }

inline Var relu(Var x) {
  return detail::unary_map(
      x, [](double v) { return v > 0.0 ? v : 0.0; }, [](double v, double) { return v > 0.0 ? 1.0 : 0.0; });
}

inline double sigmoid(double v) {
  if (v >= 0.0) return 1.0 / (1.0 + std::exp(-v));
  const double e = std::exp(v);
  return e / (1.0 + e);
}

inline Var sigmoid(Var x) {
  return detail::unary_map(
      x, [](double v) { return sigmoid(v); },
      [](double, double y) { return y * (1.0 - y); });
}

// Row-broadcast bias: x[m×n] + b[n].
inline Var add_bias(Var x, Var b) {
  const Tensor& xv = x.value();
  const Tensor& bv = b.value();
  detail::require_rank("add_bias", xv, 2);
  detail::require_rank("add_bias", bv, 1);
  if (bv.dim(0) != xv.dim(1)) {
    throw DimensionError("add_bias: bias " + to_string(bv.shape()) + " vs input " + to_string(xv.shape()));
  }
  const std::size_t m = xv.dim(0), n = xv.dim(1);
  Tensor out = xv;
  for (std::size_t r = 0; r < m; ++r)
    for (std::size_t c = 0; c < n; ++c) out[r * n + c] += bv[c];
  const std::size_t xi = x.id, bi = b.id;
  return x.tape->record(std::move(out), {x, b}, [xi, bi, m, n](Tape& t, const Tensor&, const Tensor& g) {
    t.accumulate(xi, g.data());
    if (t.wants_grad(bi)) {
      Tensor& gb = t.grad_buffer(bi);
      for (std::size_t r = 0; r < m; ++r)
        for (std::size_t c = 0; c < n; ++c) gb[c] += g[r * n + c];
    }
  });
}

// ---------------------------------------------------------------------------
// Linear algebra

inline Tensor matmul(const Tensor& a, const Tensor& b) {
  detail::require_rank("matmul", a, 2);
  detail::require_rank("matmul", b, 2);
  if (a.dim(1) != b.dim(0)) {
    throw DimensionError("matmul: inner dimensions differ for " + to_string(a.shape()) + " x " + to_string(b.shape()));
  }
  Tensor out(Shape{a.dim(0), b.dim(1)});
  detail::as_mat(out).noalias() = detail::as_mat(a) * detail::as_mat(b);
  return out;
}

inline Var matmul(Var a, Var b) {
  Tensor out = matmul(a.value(), b.value());
  const std::size_t ai = a.id, bi = b.id;
  return a.tape->record(std::move(out), {a, b}, [ai, bi](Tape& t, const Tensor&, const Tensor& g) {
    const Tensor& av = t.value(Var{&t, ai});
    const Tensor& bv = t.value(Var{&t, bi});
    if (t.wants_grad(ai)) detail::as_mat(t.grad_buffer(ai)).noalias() += detail::as_mat(g) * detail::as_mat(bv).transpose();
    if (t.wants_grad(bi)) detail::as_mat(t.grad_buffer(bi)).noalias() += detail::as_mat(av).transpose() * detail::as_mat(g);
  });
}

inline Var transpose(Var x) {
  const Tensor& xv = x.value();
  detail::require_rank("transpose", xv, 2);
  const std::size_t m = xv.dim(0), n = xv.dim(1);
  Tensor out(Shape{n, m});
  for (std::size_t r = 0; r < m; ++r)
    for (std::size_t c = 0; c < n; ++c) out[c * m + r] = xv[r * n + c];
  const std::size_t xi = x.id;
  return x.tape->record(std::move(out), {x}, [xi, m, n](Tape& t, const Tensor&, const Tensor& g) {
    if (!t.wants_grad(xi)) return;
    Tensor& gx = t.grad_buffer(xi);
    for (std::size_t r = 0; r < m; ++r)
      for (std::size_t c = 0; c < n; ++c) gx[r * n + c] += g[c * m + r];
  });
}

// ---------------------------------------------------------------------------
// Normalisations

// Softmax along `axis`, stabilised by subtracting the axis maximum.
inline Tensor softmax(const Tensor& x, std::size_t axis) {
  if (axis >= x.rank()) {
    throw DomainError("softmax: axis " + std::to_string(axis) + " out of range for shape " + to_string(x.shape()));
  }
  const auto [outer, len, inner] = detail::split_axis(x.shape(), axis);
  Tensor out(x.shape());
  for (std::size_t o = 0; o < outer; ++o) {
    for (std::size_t in = 0; in < inner; ++in) {
      const std::size_t base = o * len * inner + in;
      double mx = -std::numeric_limits<double>::infinity();
      for (std::size_t k = 0; k < len; ++k) mx = std::max(mx, x[base + k * inner]);
      double z = 0.0;
      for (std::size_t k = 0; k < len; ++k) {
        const double e = std::exp(x[base + k * inner] - mx);
        out[base + k * inner] = e;
        z += e;
      }
      for (std::size_t k = 0; k < len; ++k) out[base + k * inner] /= z;
    }
  }
  return out;
}

inline Var softmax(Var x, std::size_t axis) {
  Tensor out = softmax(x.value(), axis);
  const auto split = detail::split_axis(x.shape(), axis);
  const std::size_t xi = x.id;
  return x.tape->record(std::move(out), {x}, [xi, split](Tape& t, const Tensor& y, const Tensor& g) {
    if (!t.wants_grad(xi)) return;
    Tensor& gx = t.grad_buffer(xi);
    const auto [outer, len, inner] = split;
    for (std::size_t o = 0; o < outer; ++o) {
      for (std::size_t in = 0; in < inner; ++in) {
        const std::size_t base = o * len * inner + in;
        double dot = 0.0;
        for (std::size_t k = 0; k < len; ++k) dot += g[base + k * inner] * y[base + k * inner];
        for (std::size_t k = 0; k < len; ++k) {
          const std::size_t i = base + k * inner;
          gx[i] += y[i] * (g[i] - dot);
        }
      }
    }
  });
}

inline Var log_softmax(Var x, std::size_t axis) {
  const Tensor& xv = x.value();
  if (axis >= xv.rank()) {
    throw DomainError("log_softmax: axis " + std::to_string(axis) + " out of range for shape " + to_string(xv.shape()));
  }
  const auto split = detail::split_axis(xv.shape(), axis);
  const auto [outer, len, inner] = split;
  Tensor out(xv.shape());
  for (std::size_t o = 0; o < outer; ++o) {
    for (std::size_t in = 0; in < inner; ++in) {
      const std::size_t base = o * len * inner + in;
      double mx = -std::numeric_limits<double>::infinity();
      for (std::size_t k = 0; k < len; ++k) mx = std::max(mx, xv[base + k * inner]);
      double z = 0.0;
      for (std::size_t k = 0; k < len; ++k) z += std::exp(xv[base + k * inner] - mx);
      const double lse = mx + std::log(z);
      for (std::size_t k = 0; k < len; ++k) {
        const std::size_t i = base + k * inner;
        out[i] = xv[i] - lse;
      }
    }
  }
  const std::size_t xi = x.id;
  return x.tape->record(std::move(out), {x}, [xi, split](Tape& t, const Tensor& logp, const Tensor& g) {
    if (!t.wants_grad(xi)) return;
    Tensor& gx = t.grad_buffer(xi);
    const auto [outer, len, inner] = split;
    for (std::size_t o = 0; o < outer; ++o) {
      for (std::size_t in = 0; in < inner; ++in) {
        const std::size_t base = o * len * inner + in;
        double gs = 0.0;
        for (std::size_t k = 0; k < len; ++k) gs += g[base + k * inner];
        for (std::size_t k = 0; k < len; ++k) {
          const std::size_t i = base + k * inner;
          gx[i] += g[i] - std::exp(logp[i]) * gs;
        }
      }
    }
  });
}

inline constexpr double kLayerNormEps = 1e-5;

// Normalise the last axis to zero mean and unit (population) variance. No affine parameters.
inline Var layer_norm(Var x, double eps = kLayerNormEps) {
  const Tensor& xv = x.value();
  if (xv.rank() == 0 || xv.shape().back() < 2) {
    throw DimensionError("layer_norm: last axis must have length >= 2, got " + to_string(xv.shape()));
  }
  const std::size_t n = xv.shape().back();
  const std::size_t rows = xv.size() / n;
  Tensor out(xv.shape());
  std::vector<double> inv_std(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    const double* in = xv.storage().data() + r * n;
    double mu = 0.0;
    for (std::size_t i = 0; i < n; ++i) mu += in[i];
    mu /= static_cast<double>(n);
    double var = 0.0;
    for (std::size_t i = 0; i < n; ++i) var += (in[i] - mu) * (in[i] - mu);
    var /= static_cast<double>(n);
    const double is = 1.0 / std::sqrt(var + eps);
    inv_std[r] = is;
    for (std::size_t i = 0; i < n; ++i) out[r * n + i] = (in[i] - mu) * is;
  }
  const std::size_t xi = x.id;
  return x.tape->record(std::move(out), {x},
                        [xi, n, rows, inv_std = std::move(inv_std)](Tape& t, const Tensor& y, const Tensor& g) {
                          if (!t.wants_grad(xi)) return;
                          Tensor& gx = t.grad_buffer(xi);
                          const double inv_n = 1.0 / static_cast<double>(n);
                          for (std::size_t r = 0; r < rows; ++r) {
                            const std::size_t off = r * n;
                            double gmean = 0.0, gy = 0.0;
                            for (std::size_t i = 0; i < n; ++i) {
                              gmean += g[off + i];
                              gy += g[off + i] * y[off + i];
                            }
                            gmean *= inv_n;
                            gy *= inv_n;
                            for (std::size_t i = 0; i < n; ++i)
                              gx[off + i] += inv_std[r] * (g[off + i] - gmean - y[off + i] * gy);
                          }
                        });
}

// ---------------------------------------------------------------------------
// Reductions

// Euclidean norm over the last axis. The gradient at a zero vector is taken as zero.
inline Var l2_norm(Var x) {
  const Tensor& xv = x.value();
  if (xv.rank() == 0) throw DimensionError("l2_norm: needs rank >= 1");
  const std::size_t n = xv.shape().back();
  const std::size_t rows = xv.size() / n;
  Shape out_shape(xv.shape().begin(), xv.shape().end() - 1);
  Tensor out(out_shape);
  for (std::size_t r = 0; r < rows; ++r) {
    double s = 0.0;
    for (std::size_t i = 0; i < n; ++i) s += xv[r * n + i] * xv[r * n + i];
    out[r] = std::sqrt(s);
  }
  const std::size_t xi = x.id;
  return x.tape->record(std::move(out), {x}, [xi, n, rows](Tape& t, const Tensor& norms, const Tensor& g) {
    if (!t.wants_grad(xi)) return;
    const Tensor& xv = t.value(Var{&t, xi});
    Tensor& gx = t.grad_buffer(xi);
    for (std::size_t r = 0; r < rows; ++r) {
      if (norms[r] == 0.0) continue;
      const double k = g[r] / norms[r];
      for (std::size_t i = 0; i < n; ++i) gx[r * n + i] += k * xv[r * n + i];
    }
  });
}

inline Var sum(Var x) {
  double s = 0.0;
  for (double v : x.value().data()) s += v;
  const std::size_t xi = x.id;
  return x.tape->record(Tensor::scalar(s), {x}, [xi](Tape& t, const Tensor&, const Tensor& g) {
    if (!t.wants_grad(xi)) return;
    Tensor& gx = t.grad_buffer(xi);
    for (double& v : gx.storage()) v += g[0];
  });
}

inline Var mean(Var x) { return scale(sum(x), 1.0 / static_cast<double>(x.value().size())); }

inline Var dot(Var a, Var b) { return sum(mul(a, b)); }

// Element `index` of a flattened tensor, as a scalar.
inline Var pick(Var x, std::size_t index) {
  const Tensor& xv = x.value();
  if (index >= xv.size()) {
    throw DomainError("pick: index " + std::to_string(index) + " out of range for shape " + to_string(xv.shape()));
  }
  const std::size_t xi = x.id;
  return x.tape->record(Tensor::scalar(xv[index]), {x}, [xi, index](Tape& t, const Tensor&, const Tensor& g) {
    if (t.wants_grad(xi)) t.grad_buffer(xi)[index] += g[0];
  });
}

// ---------------------------------------------------------------------------
// Shape manipulation

inline Var reshape(Var x, Shape shape) {
  Tensor out = x.value().reshaped(std::move(shape));
  const std::size_t xi = x.id;
  return x.tape->record(std::move(out), {x}, [xi](Tape& t, const Tensor&, const Tensor& g) { t.accumulate(xi, g.data()); });
}

// Concatenate equally shaped tensors along a new leading axis.
inline Var stack(std::span<const Var> xs) {
  if (xs.empty()) throw DimensionError("stack: no inputs");
  const Shape& s0 = xs.front().shape();
  for (const Var& v : xs) detail::require_same_shape("stack", xs.front().value(), v.value());
  Shape out_shape{xs.size()};
  out_shape.insert(out_shape.end(), s0.begin(), s0.end());
  const std::size_t block = numel(s0);
  Tensor out(out_shape);
  std::vector<std::size_t> ids;
  ids.reserve(xs.size());
  for (std::size_t k = 0; k < xs.size(); ++k) {
    std::copy_n(xs[k].value().storage().begin(), block, out.storage().begin() + static_cast<std::ptrdiff_t>(k * block));
    ids.push_back(xs[k].id);
  }
  return xs.front().tape->record(std::move(out), xs, [ids = std::move(ids), block](Tape& t, const Tensor&, const Tensor& g) {
    for (std::size_t k = 0; k < ids.size(); ++k) t.accumulate(ids[k], g.data().subspan(k * block, block));
  });
}

// Concatenate along an existing axis; all other dimensions must agree.
inline Var concat(std::span<const Var> xs, std::size_t axis) {
  if (xs.empty()) throw DimensionError("concat: no inputs");
  const Shape& s0 = xs.front().shape();
  if (axis >= s0.size()) throw DomainError("concat: axis out of range for shape " + to_string(s0));
  Shape out_shape = s0;
  out_shape[axis] = 0;
  for (const Var& v : xs) {
    const Shape& s = v.shape();
    if (s.size() != s0.size()) throw DimensionError("concat: rank mismatch " + to_string(s0) + " vs " + to_string(s));
    for (std::size_t i = 0; i < s.size(); ++i)
      if (i != axis && s[i] != s0[i])
        throw DimensionError("concat: shape mismatch " + to_string(s0) + " vs " + to_string(s));
    out_shape[axis] += s[axis];
  }
  const auto outer_split = detail::split_axis(out_shape, axis);
  const std::size_t outer = outer_split.outer, inner = outer_split.inner;
  Tensor out(out_shape);
  std::vector<std::size_t> ids, widths;
  std::size_t offset = 0;
  const std::size_t out_row = out_shape[axis] * inner;
  for (const Var& v : xs) {
    const std::size_t w = v.shape()[axis] * inner;
    const auto& src = v.value().storage();
    for (std::size_t o = 0; o < outer; ++o)
      std::copy_n(src.begin() + static_cast<std::ptrdiff_t>(o * w), w,
                  out.storage().begin() + static_cast<std::ptrdiff_t>(o * out_row + offset));
    ids.push_back(v.id);
    widths.push_back(w);
    offset += w;
  }
  return xs.front().tape->record(std::move(out), xs,
                                 [ids = std::move(ids), widths = std::move(widths), outer, out_row](Tape& t, const Tensor&, const Tensor& g) {
                                   std::size_t off = 0;
                                   for (std::size_t k = 0; k < ids.size(); ++k) {
                                     if (t.wants_grad(ids[k])) {
                                       Tensor& gx = t.grad_buffer(ids[k]);
                                       for (std::size_t o = 0; o < outer; ++o)
                                         for (std::size_t i = 0; i < widths[k]; ++i)
                                           gx[o * widths[k] + i] += g[o * out_row + off + i];
                                     }
                                     off += widths[k];
                                   }
                                 });
}

inline Var stack(std::initializer_list<Var> xs) { return stack(std::span<const Var>(xs.begin(), xs.size())); }
inline Var concat(std::initializer_list<Var> xs, std::size_t axis) {
  return concat(std::span<const Var>(xs.begin(), xs.size()), axis);
}

// Rows `indices` of a matrix, in the given order (repeats allowed).
inline Var gather_rows(Var x, std::vector<std::size_t> indices) {
  const Tensor& xv = x.value();
  detail::require_rank("gather_rows", xv, 2);
  const std::size_t m = xv.dim(0), n = xv.dim(1);
  if (indices.empty()) throw DimensionError("gather_rows: empty index list");
  Tensor out(Shape{indices.size(), n});
  for (std::size_t r = 0; r < indices.size(); ++r) {
    if (indices[r] >= m) throw DomainError("gather_rows: row " + std::to_string(indices[r]) + " out of range");
    std::copy_n(xv.storage().begin() + static_cast<std::ptrdiff_t>(indices[r] * n), n,
                out.storage().begin() + static_cast<std::ptrdiff_t>(r * n));
  }
  const std::size_t xi = x.id;
  return x.tape->record(std::move(out), {x}, [xi, n, indices = std::move(indices)](Tape& t, const Tensor&, const Tensor& g) {
    if (!t.wants_grad(xi)) return;
    Tensor& gx = t.grad_buffer(xi);
    for (std::size_t r = 0; r < indices.size(); ++r)
      for (std::size_t c = 0; c < n; ++c) gx[indices[r] * n + c] += g[r * n + c];
  });
}

// Row `index` of a matrix as a rank-1 vector.
inline Var row(Var x, std::size_t index) {
  const std::size_t n = x.value().dim(1);
  return reshape(gather_rows(x, {index}), Shape{n});
}

// ---------------------------------------------------------------------------
// Losses

// -log softmax(logits)[target] for a rank-1 logit vector.
inline Var cross_entropy(Var logits, std::size_t target) {
  detail::require_rank("cross_entropy", logits.value(), 1);
  if (target >= logits.value().dim(0)) throw DomainError("cross_entropy: target class out of range");
  return scale(pick(log_softmax(logits, 0), target), -1.0);
}

// Binary cross-entropy of sigmoid(logit) against a 0/1 target, computed from the logit.
inline Var bce_with_logits(Var logit, double target) {
  const double x = logit.value().item();
  const double loss = std::max(x, 0.0) - x * target + std::log1p(std::exp(-std::abs(x)));
  const std::size_t li = logit.id;
  return logit.tape->record(Tensor::scalar(loss), {logit}, [li, target](Tape& t, const Tensor&, const Tensor& g) {
    if (!t.wants_grad(li)) return;
    const double x = t.value(Var{&t, li})[0];
    t.grad_buffer(li)[0] += g[0] * (sigmoid(x) - target);
  });
}

}  // namespace fsos
