// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "vlcdoc/tensor.hpp"

namespace vlcdoc {

class Tape;

/// Handle to a node recorded on a Tape. Cheap to copy; valid while the tape lives.
class Var {
 public:
  Var() = default;
  Var(Tape* tape, std::size_t id) : tape_(tape), id_(id) {}

  Tape& tape() const { return *tape_; }
  std::size_t id() const { return id_; }
  bool valid() const { return tape_ != nullptr; }

  Shape shape() const;  // by value: recording new nodes may move the tape's storage
  std::span<const double> data() const;
  std::span<const double> grad() const;
  bool requires_grad() const;
  std::size_t size() const { return data().size(); }
  double item() const;
  Tensor value() const;
  Tensor grad_tensor() const;

 private:
  Tape* tape_ = nullptr;
  std::size_t id_ = 0;
};

/// Ordered record of executed operations. Each forward pass builds its own
/// tape; backward replays adjoints in reverse recording order.
class Tape {
 public:
  using Backward = std::function<void(Tape&, std::size_t)>;

  struct Node {
    std::string op;
    Shape shape;
    std::vector<double> value;
    std::vector<double> grad;
    bool requires_grad = false;
    Backward backward;
    const Parameter* source = nullptr;
  };

  /// With `grad_enabled == false` parameters bind as constants (inference).
  explicit Tape(bool grad_enabled = true) : grad_enabled_(grad_enabled) {}
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var constant(Tensor t) {
    return push("constant", t.shape(), std::move(t.data()), false, nullptr);
  }

  /// Differentiable leaf; its gradient is read back with Var::grad().
  Var leaf(Tensor t, bool requires_grad = true) {
    return push("leaf", t.shape(), std::move(t.data()), requires_grad, nullptr);
  }

  /// Binds a parameter as a leaf. Repeated binds of the same parameter return
  /// the same node, so multiple uses accumulate into one adjoint.
  Var param(const Parameter& p) {
    if (auto it = bound_.find(&p); it != bound_.end()) return Var(this, it->second);
    Var v = push("param", p.value.shape(), p.value.data(), grad_enabled_, nullptr);
    nodes_[v.id()].source = &p;
    bound_.emplace(&p, v.id());
    return v;
  }

  /// Gradient of the last backward pass with respect to `p` (zeros if unused).
  Tensor grad_of(const Parameter& p) const {
    auto it = bound_.find(&p);
    if (it == bound_.end() || nodes_[it->second].grad.empty()) return Tensor(p.value.shape());
    return Tensor(p.value.shape(), nodes_[it->second].grad);
  }

  bool grad_enabled() const { return grad_enabled_; }

  /// Records an operation result. `backward` reads the node's grad and adds
  /// into input grads via `grad_buffer`. Used by every built-in op and
  /// available for custom ops.
  Var record(std::string op, Shape shape, std::vector<double> value,
             std::initializer_list<Var> inputs, Backward backward) {
    bool rg = false;
    for (const Var& in : inputs) {
      check_owned(in);
      rg = rg || nodes_[in.id()].requires_grad;
    }
    if (value.size() != numel(shape)) {
      throw ShapeError(op + ": produced " + std::to_string(value.size()) +
                       " values for shape " + to_string(shape));
    }
    return push(std::move(op), std::move(shape), std::move(value), rg,
                rg ? std::move(backward) : Backward{});
  }

  const Node& node(std::size_t id) const { return nodes_.at(id); }
  std::size_t size() const { return nodes_.size(); }

  bool needs_grad(const Var& v) const { return nodes_[v.id()].requires_grad; }

  /// Gradient accumulator of `v`, allocated zeroed on first use.
  std::vector<double>& grad_buffer(const Var& v) { return grad_buffer(v.id()); }
  std::vector<double>& grad_buffer(std::size_t id) {
    auto& n = nodes_[id];
    if (n.grad.size() != n.value.size()) n.grad.assign(n.value.size(), 0.0);
    return n.grad;
  }

  const std::vector<double>& value_of(const Var& v) const { return nodes_[v.id()].value; }

  /// Populates dLoss/dx for every requires_grad node reachable from `loss`.
  void backward(const Var& loss) {
    check_owned(loss);
    const Node& ln = nodes_[loss.id()];
    if (ln.value.size() != 1) {
      throw ContractError("backward requires a scalar loss, got shape " + to_string(ln.shape));
    }
    if (!ln.requires_grad) return;
    grad_buffer(loss)[0] += 1.0;
    visits_ = 0;
    for (std::size_t i = loss.id() + 1; i-- > 0;) {
      Node& n = nodes_[i];
      if (!n.requires_grad || n.grad.empty()) continue;
      ++visits_;
      if (n.backward) n.backward(*this, i);
    }
    for (const Node& n : nodes_) {
      for (double g : n.grad) {
        if (!std::isfinite(g)) throw NumericError("non-finite gradient at node '" + n.op + "'");
      }
    }
  }

  /// Resets every node gradient to zero.
  void zero_grads() {
    for (Node& n : nodes_) std::fill(n.grad.begin(), n.grad.end(), 0.0);
  }

  /// Number of nodes whose adjoint was replayed by the last backward call.
  std::size_t last_backward_visits() const { return visits_; }

 private:
  friend class Var;

  Var push(std::string op, Shape shape, std::vector<double> value, bool rg, Backward bw) {
    Node n;
    n.op = std::move(op);
    n.shape = std::move(shape);
    n.value = std::move(value);
    n.requires_grad = rg;
    n.backward = std::move(bw);
    nodes_.push_back(std::move(n));
    return Var(this, nodes_.size() - 1);
  }

  void check_owned(const Var& v) const {
    if (&v.tape() != this || v.id() >= nodes_.size()) {
      throw ContractError("variable does not belong to this tape");
    }
  }

  std::vector<Node> nodes_;
  std::unordered_map<const Parameter*, std::size_t> bound_;
  std::size_t visits_ = 0;
  bool grad_enabled_ = true;
};

inline Shape Var::shape() const { return tape_->nodes_[id_].shape; }
inline std::span<const double> Var::data() const { return tape_->nodes_[id_].value; }
inline std::span<const double> Var::grad() const { return tape_->nodes_[id_].grad; }
inline bool Var::requires_grad() const { return tape_->nodes_[id_].requires_grad; }
inline double Var::item() const {
  if (size() != 1) throw ContractError("item() on non-scalar of shape " + to_string(shape()));
  return data()[0];
}
inline Tensor Var::value() const {
  const auto& n = tape_->nodes_[id_];
  return Tensor(n.shape, n.value);
}
inline Tensor Var::grad_tensor() const {
  const auto& n = tape_->nodes_[id_];
  if (n.grad.empty()) return Tensor(n.shape);
  return Tensor(n.shape, n.grad);
}

// ---------------------------------------------------------------------------
// Operations
// ---------------------------------------------------------------------------

namespace detail {

inline void require_same_shape(const char* op, const Var& a, const Var& b) {
  if (a.shape() != b.shape()) {
    throw ShapeError(std::string(op) + ": shape mismatch " + to_string(a.shape()) + " vs " +
                     to_string(b.shape()));
  }
}

template <class Fwd, class Dydx>
Var unary(const char* op, const Var& a, Fwd fwd, Dydx dydx) {
  auto x = a.data();
  std::vector<double> y(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) y[i] = fwd(x[i]);
  return a.tape().record(op, a.shape(), std::move(y), {a}, [a, dydx](Tape& t, std::size_t self) {
    const auto& n = t.node(self);
    const auto& xv = t.value_of(a);
    auto& ga = t.grad_buffer(a);
    for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += n.grad[i] * dydx(xv[i], n.value[i]);
  });
}

inline std::size_t last_dim(const Var& v, const char* op) {
  if (v.shape().empty()) throw ShapeError(std::string(op) + ": rank-0 input");
  return v.shape().back();
}

// Plain kernels used by matmul forward and backward. All row-major.
// c[m,n] += a[m,k] * b[k,n]
inline void gemm_nn(const double* a, const double* b, double* c, std::size_t m, std::size_t k,
                    std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    double* ci = c + i * n;
    const double* ai = a + i * k;
    for (std::size_t p = 0; p < k; ++p) {
      const double av = ai[p];
      const double* bp = b + p * n;
      for (std::size_t j = 0; j < n; ++j) ci[j] += av * bp[j];
    }
  }
}
// c[m,k] += g[m,n] * b[k,n]^T
inline void gemm_nt(const double* g, const double* b, double* c, std::size_t m, std::size_t k,
                    std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    const double* gi = g + i * n;
    double* ci = c + i * k;
    for (std::size_t p = 0; p < k; ++p) {
      const double* bp = b + p * n;
      double s = 0.0;
      for (std::size_t j = 0; j < n; ++j) s += gi[j] * bp[j];
      ci[p] += s;
    }
  }
}
// c[k,n] += a[m,k]^T * g[m,n]
inline void gemm_tn(const double* a, const double* g, double* c, std::size_t m, std::size_t k,
                    std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    const double* ai = a + i * k;
    const double* gi = g + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const double av = ai[p];
      double* cp = c + p * n;
      for (std::size_t j = 0; j < n; ++j) cp[j] += av * gi[j];
    }
  }
}

}  // namespace detail

/// Batched matrix product with numpy-style broadcasting over leading dims.
inline Var matmul(const Var& a, const Var& b) {
  const Shape& sa = a.shape();
  const Shape& sb = b.shape();
  auto fail = [&] {
    return ShapeError("matmul: incompatible shapes " + to_string(sa) + " and " + to_string(sb));
  };
  if (sa.size() < 2 || sb.size() < 2) throw fail();
  const std::size_t m = sa[sa.size() - 2], k = sa.back(), n = sb.back();
  if (sb[sb.size() - 2] != k) throw fail();

  Shape ba(sa.begin(), sa.end() - 2), bb(sb.begin(), sb.end() - 2);
  const std::size_t rank = std::max(ba.size(), bb.size());
  ba.insert(ba.begin(), rank - ba.size(), 1);
  bb.insert(bb.begin(), rank - bb.size(), 1);
  Shape bc(rank);
  for (std::size_t i = 0; i < rank; ++i) {
    if (ba[i] != bb[i] && ba[i] != 1 && bb[i] != 1) throw fail();
    bc[i] = std::max(ba[i], bb[i]);
  }
  const std::size_t batches = numel(bc);
  std::vector<std::size_t> off_a(batches), off_b(batches);
  for (std::size_t c = 0; c < batches; ++c) {
    std::size_t rem = c, ia = 0, ib = 0, stride_a = 1, stride_b = 1;
    for (std::size_t i = rank; i-- > 0;) {
      const std::size_t idx = rem % bc[i];
      rem /= bc[i];
      ia += (ba[i] == 1 ? 0 : idx) * stride_a;
      ib += (bb[i] == 1 ? 0 : idx) * stride_b;
      stride_a *= ba[i];
      stride_b *= bb[i];
    }
    off_a[c] = ia * m * k;
    off_b[c] = ib * k * n;
  }

  Shape out = bc;
  out.push_back(m);
  out.push_back(n);
  std::vector<double> y(batches * m * n, 0.0);
  const double* pa = a.data().data();
  const double* pb = b.data().data();
  for (std::size_t c = 0; c < batches; ++c) {
    detail::gemm_nn(pa + off_a[c], pb + off_b[c], y.data() + c * m * n, m, k, n);
  }
  return a.tape().record(
      "matmul", std::move(out), std::move(y), {a, b},
      [a, b, m, k, n, off_a = std::move(off_a), off_b = std::move(off_b)](Tape& t, std::size_t self) {
        const auto& g = t.node(self).grad;
        const auto& av = t.value_of(a);
        const auto& bv = t.value_of(b);
        const bool need_a = t.needs_grad(a), need_b = t.needs_grad(b);
        double* ga = need_a ? t.grad_buffer(a).data() : nullptr;
        double* gb = need_b ? t.grad_buffer(b).data() : nullptr;
        for (std::size_t c = 0; c < off_a.size(); ++c) {
          const double* gc = g.data() + c * m * n;
          if (need_a) detail::gemm_nt(gc, bv.data() + off_b[c], ga + off_a[c], m, k, n);
          if (need_b) detail::gemm_tn(av.data() + off_a[c], gc, gb + off_b[c], m, k, n);
        }
      });
}

inline Var transpose_last2(const Var& x) {
  const Shape& s = x.shape();
  if (s.size() < 2) throw ShapeError("transpose_last2: rank < 2 input " + to_string(s));
  const std::size_t r = s[s.size() - 2], c = s.back(), batches = x.size() / (r * c);
  Shape out = s;
  std::swap(out[out.size() - 2], out.back());
  auto xv = x.data();
  std::vector<double> y(xv.size());
  for (std::size_t b = 0; b < batches; ++b)
    for (std::size_t i = 0; i < r; ++i)
      for (std::size_t j = 0; j < c; ++j) y[b * r * c + j * r + i] = xv[b * r * c + i * c + j];
  return x.tape().record("transpose", std::move(out), std::move(y), {x},
                         [x, r, c, batches](Tape& t, std::size_t self) {
                           const auto& g = t.node(self).grad;
                           auto& gx = t.grad_buffer(x);
                           for (std::size_t b = 0; b < batches; ++b)
                             for (std::size_t i = 0; i < r; ++i)
                               for (std::size_t j = 0; j < c; ++j)
                                 gx[b * r * c + i * c + j] += g[b * r * c + j * r + i];
                         });
}

inline Var reshape(const Var& x, Shape shape) {
  if (numel(shape) != x.size()) {
    throw ShapeError("reshape: cannot view " + to_string(x.shape()) + " as " + to_string(shape));
  }
  return x.tape().record("reshape", std::move(shape), std::vector<double>(x.data().begin(), x.data().end()),
                         {x}, [x](Tape& t, std::size_t self) {
                           const auto& g = t.node(self).grad;
                           auto& gx = t.grad_buffer(x);
                           for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
                         });
}

inline Var add(const Var& a, const Var& b) {
  detail::require_same_shape("add", a, b);
  auto av = a.data(), bv = b.data();
  std::vector<double> y(av.size());
  for (std::size_t i = 0; i < y.size(); ++i) y[i] = av[i] + bv[i];
  return a.tape().record("add", a.shape(), std::move(y), {a, b}, [a, b](Tape& t, std::size_t self) {
    const auto& g = t.node(self).grad;
    for (const Var& v : {a, b}) {
      if (!t.needs_grad(v)) continue;
      auto& gv = t.grad_buffer(v);
      for (std::size_t i = 0; i < g.size(); ++i) gv[i] += g[i];
    }
  });
}

inline Var sub(const Var& a, const Var& b) {
  detail::require_same_shape("sub", a, b);
  auto av = a.data(), bv = b.data();
  std::vector<double> y(av.size());
  for (std::size_t i = 0; i < y.size(); ++i) y[i] = av[i] - bv[i];
  return a.tape().record("sub", a.shape(), std::move(y), {a, b}, [a, b](Tape& t, std::size_t self) {
    const auto& g = t.node(self).grad;
    if (t.needs_grad(a)) {
      auto& ga = t.grad_buffer(a);
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
    }
    if (t.needs_grad(b)) {
      auto& gb = t.grad_buffer(b);
      for (std::size_t i = 0; i < g.size(); ++i) gb[i] -= g[i];
    }
  });
}

/// Hadamard product.
inline Var mul(const Var& a, const Var& b) {
  detail::require_same_shape("mul", a, b);
  auto av = a.data(), bv = b.data();
  std::vector<double> y(av.size());
  for (std::size_t i = 0; i < y.size(); ++i) y[i] = av[i] * bv[i];
  return a.tape().record("mul", a.shape(), std::move(y), {a, b}, [a, b](Tape& t, std::size_t self) {
    const auto& g = t.node(self).grad;
    const auto& av = t.value_of(a);
    const auto& bv = t.value_of(b);
    if (t.needs_grad(a)) {
      auto& ga = t.grad_buffer(a);
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * bv[i];
    }
    if (t.needs_grad(b)) {
      auto& gb = t.grad_buffer(b);
      for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * av[i];
    }
  });
}

inline Var add(const Var& a, double c) {
  return detail::unary("add_scalar", a, [c](double x) { return x + c; },
                       [](double, double) { return 1.0; });
}

inline Var scale(const Var& a, double c) {
  return detail::unary("scale", a, [c](double x) { return x * c; },
                       [c](double, double) { return c; });
}

inline Var mul(const Var& a, double c) { return scale(a, c); }

inline Var exp(const Var& a) {
  return detail::unary("exp", a, [](double x) { return std::exp(x); },
                       [](double, double y) { return y; });
}

inline Var log(const Var& a) {
  for (double x : a.data()) {
    if (!(x > 0.0)) throw NumericError("log: nonpositive argument " + std::to_string(x));
  }
  return detail::unary("log", a, [](double x) { return std::log(x); },
                       [](double x, double) { return 1.0 / x; });
}

/// Exact (erf-based) GELU.
inline Var gelu(const Var& a) {
  constexpr double inv_sqrt2 = 0.70710678118654752440;
  constexpr double inv_sqrt2pi = 0.39894228040143267794;
  return detail::unary(
      "gelu", a, [](double x) { return 0.5 * x * (1.0 + std::erf(x * inv_sqrt2)); },
      [](double x, double) {
        return 0.5 * (1.0 + std::erf(x * inv_sqrt2)) + x * inv_sqrt2pi * std::exp(-0.5 * x * x);
      });
}

/// x[..., s...] + b[s...], where b's shape is a suffix of x's shape.
inline Var add_broadcast(const Var& x, const Var& b) {
  const Shape& sx = x.shape();
  const Shape& sb = b.shape();
  if (sb.size() > sx.size() || !std::equal(sb.rbegin(), sb.rend(), sx.rbegin())) {
    throw ShapeError("add_broadcast: " + to_string(sb) + " is not a suffix of " + to_string(sx));
  }
  const std::size_t inner = b.size();
  auto xv = x.data(), bv = b.data();
  std::vector<double> y(xv.size());
  for (std::size_t i = 0; i < y.size(); ++i) y[i] = xv[i] + bv[i % inner];
  return x.tape().record("add_broadcast", sx, std::move(y), {x, b},
                         [x, b, inner](Tape& t, std::size_t self) {
                           const auto& g = t.node(self).grad;
                           if (t.needs_grad(x)) {
                             auto& gx = t.grad_buffer(x);
                             for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
                           }
                           if (t.needs_grad(b)) {
                             auto& gb = t.grad_buffer(b);
                             for (std::size_t i = 0; i < g.size(); ++i) gb[i % inner] += g[i];
                           }
                         });
}

inline Var sum(const Var& x) {
  double s = 0.0;
  for (double v : x.data()) s += v;
  return x.tape().record("sum", Shape{1}, {s}, {x}, [x](Tape& t, std::size_t self) {
    const double g = t.node(self).grad[0];
    for (double& gx : t.grad_buffer(x)) gx += g;
  });
}

inline Var mean(const Var& x) { return scale(sum(x), 1.0 / static_cast<double>(x.size())); }

/// Reduces the last axis: [..., n] -> [...] (or [1] for rank-1 input).
inline Var sum_last(const Var& x) {
  const std::size_t n = detail::last_dim(x, "sum_last");
  const std::size_t rows = x.size() / n;
  Shape out = x.shape();
  out.pop_back();
  if (out.empty()) out = {1};
  auto xv = x.data();
  std::vector<double> y(rows, 0.0);
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t j = 0; j < n; ++j) y[r] += xv[r * n + j];
  return x.tape().record("sum_last", std::move(out), std::move(y), {x}, [x, n](Tape& t, std::size_t self) {
    const auto& g = t.node(self).grad;
    auto& gx = t.grad_buffer(x);
    for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += g[i / n];
  });
}

/// Per-row keep flags over the key axis of attention logits, shape [batch, keys].
struct KeyMask {
  std::size_t batch = 0;
  std::size_t keys = 0;
  std::vector<std::uint8_t> keep;

  bool kept(std::size_t b, std::size_t j) const { return keep[b * keys + j] != 0; }
};

/// Numerically stabilised softmax over the last axis. With a mask, the
/// leading axis of `x` indexes the mask's batch rows and masked keys get
/// exactly zero weight.
inline Var softmax_last(const Var& x, const KeyMask* mask = nullptr) {
  const std::size_t n = detail::last_dim(x, "softmax_last");
  const std::size_t rows = x.size() / n;
  std::size_t rows_per_batch = rows;
  if (mask) {
    if (mask->keys != n || x.shape().size() < 2 || x.shape()[0] != mask->batch) {
      throw ShapeError("softmax_last: mask [" + std::to_string(mask->batch) + ", " +
                       std::to_string(mask->keys) + "] incompatible with " + to_string(x.shape()));
    }
    rows_per_batch = rows / mask->batch;
  }
  auto xv = x.data();
  std::vector<double> y(xv.size(), 0.0);
  for (std::size_t r = 0; r < rows; ++r) {
    const std::size_t b = r / rows_per_batch;
    auto keep = [&](std::size_t j) { return !mask || mask->kept(b, j); };
    double mx = -INFINITY;
    for (std::size_t j = 0; j < n; ++j)
      if (keep(j)) mx = std::max(mx, xv[r * n + j]);
    if (mx == -INFINITY) throw ContractError("softmax_last: every key is masked for some query");
    double z = 0.0;
    for (std::size_t j = 0; j < n; ++j) {
      if (!keep(j)) continue;
      y[r * n + j] = std::exp(xv[r * n + j] - mx);
      z += y[r * n + j];
    }
    for (std::size_t j = 0; j < n; ++j) y[r * n + j] /= z;
  }
  return x.tape().record("softmax_last", x.shape(), std::move(y), {x}, [x, n](Tape& t, std::size_t self) {
    const auto& nd = t.node(self);
    auto& gx = t.grad_buffer(x);
    const std::size_t rows = nd.value.size() / n;
    for (std::size_t r = 0; r < rows; ++r) {
      const double* yr = nd.value.data() + r * n;
      const double* gr = nd.grad.data() + r * n;
      double dot = 0.0;
      for (std::size_t j = 0; j < n; ++j) dot += yr[j] * gr[j];
      for (std::size_t j = 0; j < n; ++j) gx[r * n + j] += yr[j] * (gr[j] - dot);
    }
  });
}

inline Var log_softmax_last(const Var& x) {
  const std::size_t n = detail::last_dim(x, "log_softmax_last");
  const std::size_t rows = x.size() / n;
  auto xv = x.data();
  std::vector<double> y(xv.size());
  for (std::size_t r = 0; r < rows; ++r) {
    double mx = -INFINITY;
    for (std::size_t j = 0; j < n; ++j) mx = std::max(mx, xv[r * n + j]);
    double z = 0.0;
    for (std::size_t j = 0; j < n; ++j) z += std::exp(xv[r * n + j] - mx);
    const double lse = mx + std::log(z);
    for (std::size_t j = 0; j < n; ++j) y[r * n + j] = xv[r * n + j] - lse;
  }
  return x.tape().record("log_softmax_last", x.shape(), std::move(y), {x}, [x, n](Tape& t, std::size_t self) {
    const auto& nd = t.node(self);
    auto& gx = t.grad_buffer(x);
    const std::size_t rows = nd.value.size() / n;
    for (std::size_t r = 0; r < rows; ++r) {
      double gs = 0.0;
      for (std::size_t j = 0; j < n; ++j) gs += nd.grad[r * n + j];
      for (std::size_t j = 0; j < n; ++j)
        gx[r * n + j] += nd.grad[r * n + j] - std::exp(nd.value[r * n + j]) * gs;
    }
  });
}

/// log(sum_j keep[i,j] * exp(x[i,j])) over the last axis, max-stabilised.
/// `keep` has one flag per element of `x`.
inline Var masked_logsumexp_last(const Var& x, std::vector<std::uint8_t> keep) {
  const std::size_t n = detail::last_dim(x, "masked_logsumexp_last");
  if (keep.size() != x.size()) throw ShapeError("masked_logsumexp_last: mask size mismatch");
  const std::size_t rows = x.size() / n;
  Shape out = x.shape();
  out.pop_back();
  if (out.empty()) out = {1};
  auto xv = x.data();
  std::vector<double> y(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    double mx = -INFINITY;
    for (std::size_t j = 0; j < n; ++j)
      if (keep[r * n + j]) mx = std::max(mx, xv[r * n + j]);
    if (mx == -INFINITY) throw NumericError("masked_logsumexp_last: empty row " + std::to_string(r));
    double z = 0.0;
    for (std::size_t j = 0; j < n; ++j)
      if (keep[r * n + j]) z += std::exp(xv[r * n + j] - mx);
    y[r] = mx + std::log(z);
  }
  return x.tape().record("masked_logsumexp_last", std::move(out), std::move(y), {x},
                         [x, n, keep = std::move(keep)](Tape& t, std::size_t self) {
                           const auto& nd = t.node(self);
                           const auto& xv = t.value_of(x);
                           auto& gx = t.grad_buffer(x);
                           for (std::size_t r = 0; r < nd.value.size(); ++r) {
                             for (std::size_t j = 0; j < n; ++j) {
                               const std::size_t i = r * n + j;
                               if (keep[i]) gx[i] += nd.grad[r] * std::exp(xv[i] - nd.value[r]);
                             }
                           }
                         });
}

/// Normalises each last-axis row to mean 0 / variance 1, then applies gamma, beta.
inline Var layer_norm(const Var& x, const Var& gamma, const Var& beta, double eps) {
  const std::size_t d = detail::last_dim(x, "layer_norm");
  if (gamma.shape() != Shape{d} || beta.shape() != Shape{d}) {
    throw ShapeError("layer_norm: affine params must have shape [" + std::to_string(d) + "], got " +
                     to_string(gamma.shape()) + " and " + to_string(beta.shape()));
  }
  const std::size_t rows = x.size() / d;
  auto xv = x.data(), gv = gamma.data(), bv = beta.data();
  std::vector<double> xhat(xv.size()), inv_std(rows), y(xv.size());
  for (std::size_t r = 0; r < rows; ++r) {
    const double* xr = xv.data() + r * d;
    double mu = 0.0;
    for (std::size_t j = 0; j < d; ++j) mu += xr[j];
    mu /= static_cast<double>(d);
    double var = 0.0;
    for (std::size_t j = 0; j < d; ++j) var += (xr[j] - mu) * (xr[j] - mu);
    var /= static_cast<double>(d);
    inv_std[r] = 1.0 / std::sqrt(var + eps);
    for (std::size_t j = 0; j < d; ++j) {
      xhat[r * d + j] = (xr[j] - mu) * inv_std[r];
      y[r * d + j] = gv[j] * xhat[r * d + j] + bv[j];
    }
  }
  return x.tape().record(
      "layer_norm", x.shape(), std::move(y), {x, gamma, beta},
      [x, gamma, beta, d, xhat = std::move(xhat), inv_std = std::move(inv_std)](Tape& t, std::size_t self) {
        const auto& g = t.node(self).grad;
        const auto& gv = t.value_of(gamma);
        const std::size_t rows = g.size() / d;
        if (t.needs_grad(gamma) || t.needs_grad(beta)) {
          auto& gg = t.grad_buffer(gamma);
          auto& gb = t.grad_buffer(beta);
          for (std::size_t i = 0; i < g.size(); ++i) {
            gg[i % d] += g[i] * xhat[i];
            gb[i % d] += g[i];
          }
        }
        if (!t.needs_grad(x)) return;
        auto& gx = t.grad_buffer(x);
        const double inv_d = 1.0 / static_cast<double>(d);
        for (std::size_t r = 0; r < rows; ++r) {
          double s1 = 0.0, s2 = 0.0;
          for (std::size_t j = 0; j < d; ++j) {
            const double gh = g[r * d + j] * gv[j];
            s1 += gh;
            s2 += gh * xhat[r * d + j];
          }
          for (std::size_t j = 0; j < d; ++j) {
            const double gh = g[r * d + j] * gv[j];
            gx[r * d + j] += inv_std[r] * (gh - inv_d * s1 - xhat[r * d + j] * inv_d * s2);
          }
        }
      });
}

/// Scales each last-axis row to unit Euclidean norm.
inline Var l2_normalize_last(const Var& x) {
  const std::size_t d = detail::last_dim(x, "l2_normalize_last");
  const std::size_t rows = x.size() / d;
  auto xv = x.data();
  std::vector<double> y(xv.size()), norms(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    double s = 0.0;
    for (std::size_t j = 0; j < d; ++j) s += xv[r * d + j] * xv[r * d + j];
    norms[r] = std::sqrt(s);
    if (!(norms[r] > 1e-12) || !std::isfinite(norms[r])) {
      throw DegenerateEmbeddingError("l2_normalize_last: row " + std::to_string(r) +
                                     " has degenerate norm " + std::to_string(norms[r]));
    }
    for (std::size_t j = 0; j < d; ++j) y[r * d + j] = xv[r * d + j] / norms[r];
  }
  return x.tape().record("l2_normalize_last", x.shape(), std::move(y), {x},
                         [x, d, norms = std::move(norms)](Tape& t, std::size_t self) {
                           const auto& nd = t.node(self);
                           auto& gx = t.grad_buffer(x);
                           for (std::size_t r = 0; r < norms.size(); ++r) {
                             double dot = 0.0;
                             for (std::size_t j = 0; j < d; ++j) dot += nd.value[r * d + j] * nd.grad[r * d + j];
                             for (std::size_t j = 0; j < d; ++j) {
                               gx[r * d + j] += (nd.grad[r * d + j] - nd.value[r * d + j] * dot) / norms[r];
                             }
                           }
                         });
}

/// [B, m, h*dk] -> [B, h, m, dk]
inline Var split_heads(const Var& x, std::size_t heads) {
  const Shape& s = x.shape();
  if (s.size() != 3 || heads == 0 || s[2] % heads != 0) {
    throw ShapeError("split_heads: cannot split " + to_string(s) + " into " + std::to_string(heads) + " heads");
  }
  const std::size_t B = s[0], m = s[1], d = s[2], dk = d / heads;
  auto xv = x.data();
  std::vector<double> y(xv.size());
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t h = 0; h < heads; ++h)
        for (std::size_t c = 0; c < dk; ++c)
          y[((b * heads + h) * m + i) * dk + c] = xv[(b * m + i) * d + h * dk + c];
  return x.tape().record("split_heads", Shape{B, heads, m, dk}, std::move(y), {x},
                         [x, B, m, d, dk, heads](Tape& t, std::size_t self) {
                           const auto& g = t.node(self).grad;
                           auto& gx = t.grad_buffer(x);
                           for (std::size_t b = 0; b < B; ++b)
                             for (std::size_t i = 0; i < m; ++i)
                               for (std::size_t h = 0; h < heads; ++h)
                                 for (std::size_t c = 0; c < dk; ++c)
                                   gx[(b * m + i) * d + h * dk + c] += g[((b * heads + h) * m + i) * dk + c];
                         });
}

/// [B, h, m, dk] -> [B, m, h*dk]
inline Var merge_heads(const Var& x) {
  const Shape& s = x.shape();
  if (s.size() != 4) throw ShapeError("merge_heads: expected rank-4 input, got " + to_string(s));
  const std::size_t B = s[0], heads = s[1], m = s[2], dk = s[3], d = heads * dk;
  auto xv = x.data();
  std::vector<double> y(xv.size());
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t h = 0; h < heads; ++h)
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t c = 0; c < dk; ++c)
          y[(b * m + i) * d + h * dk + c] = xv[((b * heads + h) * m + i) * dk + c];
  return x.tape().record("merge_heads", Shape{B, m, d}, std::move(y), {x},
                         [x, B, m, d, dk, heads](Tape& t, std::size_t self) {
                           const auto& g = t.node(self).grad;
                           auto& gx = t.grad_buffer(x);
                           for (std::size_t b = 0; b < B; ++b)
                             for (std::size_t h = 0; h < heads; ++h)
                               for (std::size_t i = 0; i < m; ++i)
                                 for (std::size_t c = 0; c < dk; ++c)
                                   gx[((b * heads + h) * m + i) * dk + c] += g[(b * m + i) * d + h * dk + c];
                         });
}

/// Picks row `index` along the second-to-last axis: [..., m, d] -> [..., d].
inline Var select_row(const Var& x, std::size_t index) {
  const Shape& s = x.shape();
  if (s.size() < 2 || index >= s[s.size() - 2]) {
    throw ShapeError("select_row: index " + std::to_string(index) + " out of range for " + to_string(s));
  }
  const std::size_t m = s[s.size() - 2], d = s.back(), outer = x.size() / (m * d);
  Shape out(s.begin(), s.end() - 2);
  out.push_back(d);
  auto xv = x.data();
  std::vector<double> y(outer * d);
  for (std::size_t o = 0; o < outer; ++o)
    for (std::size_t j = 0; j < d; ++j) y[o * d + j] = xv[(o * m + index) * d + j];
  return x.tape().record("select_row", std::move(out), std::move(y), {x},
                         [x, m, d, outer, index](Tape& t, std::size_t self) {
                           const auto& g = t.node(self).grad;
                           auto& gx = t.grad_buffer(x);
                           for (std::size_t o = 0; o < outer; ++o)
                             for (std::size_t j = 0; j < d; ++j) gx[(o * m + index) * d + j] += g[o * d + j];
                         });
}

/// Prepends `row` [d] to every sequence of x [B, N, d] giving [B, N+1, d].
inline Var prepend_row(const Var& row, const Var& x) {
  const Shape& s = x.shape();
  if (s.size() != 3 || row.shape() != Shape{s[2]}) {
    throw ShapeError("prepend_row: row " + to_string(row.shape()) + " incompatible with " + to_string(s));
  }
  const std::size_t B = s[0], N = s[1], d = s[2];
  auto xv = x.data(), rv = row.data();
  std::vector<double> y(B * (N + 1) * d);
  for (std::size_t b = 0; b < B; ++b) {
    std::copy(rv.begin(), rv.end(), y.begin() + b * (N + 1) * d);
    std::copy(xv.begin() + b * N * d, xv.begin() + (b + 1) * N * d, y.begin() + (b * (N + 1) + 1) * d);
  }
  return x.tape().record("prepend_row", Shape{B, N + 1, d}, std::move(y), {row, x},
                         [row, x, B, N, d](Tape& t, std::size_t self) {
                           const auto& g = t.node(self).grad;
                           if (t.needs_grad(row)) {
                             auto& gr = t.grad_buffer(row);
                             for (std::size_t b = 0; b < B; ++b)
                               for (std::size_t j = 0; j < d; ++j) gr[j] += g[b * (N + 1) * d + j];
                           }
                           if (t.needs_grad(x)) {
                             auto& gx = t.grad_buffer(x);
                             for (std::size_t b = 0; b < B; ++b)
                               for (std::size_t i = 0; i < N * d; ++i) gx[b * N * d + i] += g[(b * (N + 1) + 1) * d + i];
                           }
                         });
}

/// Embedding lookup: table [V, d], ids laid out as `index_shape` -> [index_shape..., d].
inline Var gather_rows(const Var& table, std::span<const std::uint32_t> ids, Shape index_shape) {
  const Shape& s = table.shape();
  if (s.size() != 2) throw ShapeError("gather_rows: table must be rank 2, got " + to_string(s));
  if (numel(index_shape) != ids.size()) throw ShapeError("gather_rows: index shape does not match id count");
  const std::size_t V = s[0], d = s[1];
  auto tv = table.data();
  std::vector<double> y(ids.size() * d);
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] >= V) {
      throw DataError("token id " + std::to_string(ids[i]) + " outside vocabulary of size " + std::to_string(V));
    }
    std::copy(tv.begin() + ids[i] * d, tv.begin() + (ids[i] + 1) * d, y.begin() + i * d);
  }
  Shape out = std::move(index_shape);
  out.push_back(d);
  return table.tape().record("gather_rows", std::move(out), std::move(y), {table},
                             [table, d, idv = std::vector<std::uint32_t>(ids.begin(), ids.end())](
                                 Tape& t, std::size_t self) {
                               const auto& g = t.node(self).grad;
                               auto& gt = t.grad_buffer(table);
                               for (std::size_t i = 0; i < idv.size(); ++i)
                                 for (std::size_t j = 0; j < d; ++j) gt[idv[i] * d + j] += g[i * d + j];
                             });
}

}  // namespace vlcdoc
