#pragma once

// Minimal reverse-mode differentiation over dense double arrays.
//
// A Graph is a tape: every operation evaluates eagerly and, in training
// mode, records a closure that maps the output adjoint onto its parents.
// Leaves created with Graph::input() accumulate gradients across backward
// passes until zero_grad() is called; interior adjoints are per pass.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <deque>
#include <functional>
#include <limits>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "ttdg/errors.hpp"
#include "ttdg/tensor.hpp"

namespace ttdg {

/// Guard added under variance square roots and used as the floor of every
/// vector-norm denominator.
inline constexpr double kGuardEps = 1e-6;

class Graph;

/// Handle to a node of a Graph. Cheap to copy; valid while the Graph lives.
class Var {
 public:
  Var() = default;

  Graph* graph() const { return graph_; }
  std::size_t id() const { return id_; }
  bool valid() const { return graph_ != nullptr; }

  const Tensor& value() const;
  const Shape& shape() const { return value().shape; }
  std::size_t size() const { return value().size(); }
  double item() const { return value().item(); }

 private:
  friend class Graph;
  Var(Graph* g, std::size_t id) : graph_(g), id_(id) {}

  Graph* graph_ = nullptr;
  std::size_t id_ = 0;
};

enum class Mode { kTraining, kInference };

/// Per-pass adjoint storage handed to backward closures.
class Adjoints {
 public:
  explicit Adjoints(std::size_t n) : buffers_(n) {}

  /// Mutable adjoint of `v`, zero-initialised on first touch.
  std::span<double> of(const Var& v) {
    auto& buf = buffers_[v.id()];
    if (buf.empty()) buf.assign(v.size(), 0.0);
    return buf;
  }

  std::vector<double>& raw(std::size_t id) { return buffers_[id]; }

 private:
  std::vector<std::vector<double>> buffers_;
};

class Graph {
 public:
  using BackwardFn = std::function<void(std::span<const double>, Adjoints&)>;

  explicit Graph(Mode mode = Mode::kTraining) : mode_(mode) {}
  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;

  bool training() const { return mode_ == Mode::kTraining; }
  std::size_t size() const { return nodes_.size(); }

  /// Leaf that receives gradients (in training mode).
  Var input(Tensor value) {
    return push(std::move(value), training(), true, nullptr);
  }

  /// Leaf that never receives gradients.
  Var constant(Tensor value) {
    return push(std::move(value), false, true, nullptr);
  }

  const Tensor& value(const Var& v) const { return node(v).value; }
  bool requires_grad(const Var& v) const { return node(v).requires_grad; }

  /// Accumulated gradient of a leaf; zeros if it never received one.
  Tensor grad(const Var& v) const {
    const Node& n = node(v);
    if (n.grad.empty()) return Tensor(n.value.shape);
    return Tensor(n.value.shape, n.grad);
  }

  void zero_grad() {
    for (auto& n : nodes_) n.grad.clear();
  }

  /// Backpropagate from a scalar output with unit cotangent.
  void backward(const Var& out) {
    if (value(out).size() != 1) {
      throw ShapeError("backward: output of shape " +
                       to_string(value(out).shape) +
                       " is not scalar and no cotangent was given");
    }
    backward(out, Tensor::filled(value(out).shape, 1.0));
  }

  void backward(const Var& out, const Tensor& cotangent) {
    if (!training()) {
      throw Error("backward: graph was built in inference mode");
    }
    if (cotangent.shape != value(out).shape) {
      throw ShapeError("backward: cotangent shape " +
                       to_string(cotangent.shape) + " does not match output " +
                       to_string(value(out).shape));
    }
    Adjoints adj(out.id() + 1);
    adj.raw(out.id()) = cotangent.data;
    for (std::size_t id = out.id() + 1; id-- > 0;) {
      auto& a = adj.raw(id);
      if (a.empty()) continue;
      Node& n = nodes_[id];
      if (!n.requires_grad) continue;
      if (n.leaf) {
        if (n.grad.empty()) n.grad.assign(a.size(), 0.0);
        for (std::size_t i = 0; i < a.size(); ++i) n.grad[i] += a[i];
      } else if (n.backward) {
        n.backward(a, adj);
      }
      std::vector<double>().swap(a);
    }
  }

  /// Record a derived node. The closure is dropped when no parent needs a
  /// gradient or the graph is in inference mode.
  Var record(Tensor value, std::initializer_list<Var> parents, BackwardFn fn) {
    bool needs = false;
    if (training()) {
      for (const Var& p : parents) needs = needs || requires_grad(p);
    }
    return push(std::move(value), needs, false, needs ? std::move(fn) : nullptr);
  }

 private:
  struct Node {
    Tensor value;
    bool requires_grad = false;
    bool leaf = false;
    std::vector<double> grad;
    BackwardFn backward;
  };

  const Node& node(const Var& v) const {
    if (v.graph() != this || v.id() >= nodes_.size()) {
      throw Error("Var does not belong to this graph");
    }
    return nodes_[v.id()];
  }

  Var push(Tensor value, bool requires_grad, bool leaf, BackwardFn fn) {
    nodes_.push_back(Node{std::move(value), requires_grad, leaf, {}, std::move(fn)});
    return Var(this, nodes_.size() - 1);
  }

  Mode mode_;
  std::deque<Node> nodes_;
};

inline const Tensor& Var::value() const { return graph_->value(*this); }

namespace detail {

inline void require_same_graph(const Var& a, const Var& b, const char* op) {
  if (a.graph() != b.graph()) {
    throw Error(std::string(op) + ": operands belong to different graphs");
  }
}

[[noreturn]] inline void shape_mismatch(const char* op, const Shape& a,
                                        const Shape& b) {
  throw ShapeError(std::string(op) + ": incompatible extents " + to_string(a) +
                   " and " + to_string(b));
}

// Index maps for numpy-style right-aligned broadcasting.
struct Broadcast {
  Shape out;
  bool same = false;
  std::vector<std::size_t> ia, ib;
};

inline Broadcast plan_broadcast(const Shape& a, const Shape& b, const char* op) {
  Broadcast p;
  if (a == b) {
    p.out = a;
    p.same = true;
    return p;
  }
  const std::size_t r = std::max(a.size(), b.size());
  Shape pa(r, 1), pb(r, 1);
  std::copy(a.begin(), a.end(), pa.begin() + (r - a.size()));
  std::copy(b.begin(), b.end(), pb.begin() + (r - b.size()));
  p.out.resize(r);
  for (std::size_t d = 0; d < r; ++d) {
    if (pa[d] == pb[d] || pb[d] == 1) {
      p.out[d] = pa[d];
    } else if (pa[d] == 1) {
      p.out[d] = pb[d];
    } else {
      shape_mismatch(op, a, b);
    }
  }
  std::vector<std::size_t> sa(r, 0), sb(r, 0);
  std::size_t acc_a = 1, acc_b = 1;
  for (std::size_t d = r; d-- > 0;) {
    sa[d] = pa[d] == 1 ? 0 : acc_a;
    sb[d] = pb[d] == 1 ? 0 : acc_b;
    acc_a *= pa[d];
    acc_b *= pb[d];
  }
  const std::size_t n = numel(p.out);
  p.ia.resize(n);
  p.ib.resize(n);
  std::vector<std::size_t> idx(r, 0);
  std::size_t off_a = 0, off_b = 0;
  for (std::size_t k = 0; k < n; ++k) {
    p.ia[k] = off_a;
    p.ib[k] = off_b;
    for (std::size_t d = r; d-- > 0;) {
      ++idx[d];
      off_a += sa[d];
      off_b += sb[d];
      if (idx[d] < p.out[d]) break;
      off_a -= sa[d] * idx[d];
      off_b -= sb[d] * idx[d];
      idx[d] = 0;
    }
  }
  return p;
}

// Elementwise binary op. `fwd(x, y)`; `dfa(x, y, z)` and `dfb(x, y, z)` give
// the local partials.
template <class Fwd, class DA, class DB>
Var binary(const char* op, const Var& a, const Var& b, Fwd fwd, DA dfa, DB dfb) {
  require_same_graph(a, b, op);
  Graph& g = *a.graph();
  auto plan = std::make_shared<Broadcast>(
      plan_broadcast(a.shape(), b.shape(), op));
  const auto& av = a.value().data;
  const auto& bv = b.value().data;
  Tensor out(plan->out);
  if (plan->same) {
    for (std::size_t k = 0; k < out.size(); ++k) out[k] = fwd(av[k], bv[k]);
  } else {
    for (std::size_t k = 0; k < out.size(); ++k) {
      out[k] = fwd(av[plan->ia[k]], bv[plan->ib[k]]);
    }
  }
  Var z;
  z = g.record(std::move(out), {a, b},
               [a, b, plan, fwd, dfa, dfb, &g](std::span<const double> gout,
                                                Adjoints& adj) {
                 const auto& x = a.value().data;
                 const auto& y = b.value().data;
                 const bool ga = g.requires_grad(a);
                 const bool gb = g.requires_grad(b);
                 std::span<double> da, db;
                 if (ga) da = adj.of(a);
                 if (gb) db = adj.of(b);
                 for (std::size_t k = 0; k < gout.size(); ++k) {
                   const std::size_t i = plan->same ? k : plan->ia[k];
                   const std::size_t j = plan->same ? k : plan->ib[k];
                   const double zk = fwd(x[i], y[j]);
                   if (ga) da[i] += gout[k] * dfa(x[i], y[j], zk);
                   if (gb) db[j] += gout[k] * dfb(x[i], y[j], zk);
                 }
               });
  return z;
}

// Elementwise unary op with local derivative `df(x, y)`.
template <class Fwd, class DF>
Var unary(const Var& a, Fwd fwd, DF df) {
  Graph& g = *a.graph();
  const auto& av = a.value().data;
  Tensor out(a.shape());
  for (std::size_t k = 0; k < out.size(); ++k) out[k] = fwd(av[k]);
  auto y = std::make_shared<std::vector<double>>(out.data);
  return g.record(std::move(out), {a},
                  [a, y, df](std::span<const double> gout, Adjoints& adj) {
                    const auto& x = a.value().data;
                    auto da = adj.of(a);
                    for (std::size_t k = 0; k < gout.size(); ++k) {
                      da[k] += gout[k] * df(x[k], (*y)[k]);
                    }
                  });
}

// outer x axis x inner decomposition of a shape around `axis`.
struct AxisSplit {
  std::size_t outer = 1, extent = 1, inner = 1;
};

inline AxisSplit split_axis(const Shape& s, std::size_t axis, const char* op) {
  if (axis >= s.size()) {
    throw ShapeError(std::string(op) + ": axis " + std::to_string(axis) +
                     " out of range for shape " + to_string(s));
  }
  AxisSplit r;
  for (std::size_t d = 0; d < axis; ++d) r.outer *= s[d];
  r.extent = s[axis];
  for (std::size_t d = axis + 1; d < s.size(); ++d) r.inner *= s[d];
  return r;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise arithmetic (with broadcasting)

inline Var add(const Var& a, const Var& b) {
  return detail::binary(
      "add", a, b, [](double x, double y) { return x + y; },
      [](double, double, double) { return 1.0; },
      [](double, double, double) { return 1.0; });
}

inline Var sub(const Var& a, const Var& b) {
  return detail::binary(
      "sub", a, b, [](double x, double y) { return x - y; },
      [](double, double, double) { return 1.0; },
      [](double, double, double) { return -1.0; });
}

inline Var mul(const Var& a, const Var& b) {
  return detail::binary(
      "mul", a, b, [](double x, double y) { return x * y; },
      [](double, double y, double) { return y; },
      [](double x, double, double) { return x; });
}

inline Var div(const Var& a, const Var& b) {
  return detail::binary(
      "div", a, b, [](double x, double y) { return x / y; },
      [](double, double y, double) { return 1.0 / y; },
      [](double, double y, double z) { return -z / y; });
}

inline Var operator+(const Var& a, const Var& b) { return add(a, b); }
inline Var operator-(const Var& a, const Var& b) { return sub(a, b); }
inline Var operator*(const Var& a, const Var& b) { return mul(a, b); }
inline Var operator/(const Var& a, const Var& b) { return div(a, b); }

inline Var scale(const Var& a, double c) {
  return detail::unary(
      a, [c](double x) { return c * x; }, [c](double, double) { return c; });
}

inline Var add_scalar(const Var& a, double c) {
  return detail::unary(
      a, [c](double x) { return x + c; }, [](double, double) { return 1.0; });
}

inline Var neg(const Var& a) { return scale(a, -1.0); }

inline Var square(const Var& a) {
  return detail::unary(
      a, [](double x) { return x * x; }, [](double x, double) { return 2.0 * x; });
}

inline Var exp(const Var& a) {
  return detail::unary(
      a, [](double x) { return std::exp(x); }, [](double, double y) { return y; });
}

inline Var log(const Var& a) {
  return detail::unary(
      a, [](double x) { return std::log(x); },
      [](double x, double) { return 1.0 / x; });
}

inline Var sqrt(const Var& a) {
  return detail::unary(
      a, [](double x) { return std::sqrt(x); },
      [](double, double y) { return 0.5 / y; });
}

/// |x| with subgradient 0 at x = 0.
inline Var abs(const Var& a) {
  return detail::unary(
      a, [](double x) { return std::abs(x); },
      [](double x, double) { return x > 0.0 ? 1.0 : (x < 0.0 ? -1.0 : 0.0); });
}

inline double softplus(double x) {
  return x > 30.0 ? x : std::log1p(std::exp(x));
}

inline double softplus_inverse(double y) {
  return y > 30.0 ? y : std::log(std::expm1(y));
}

inline double sigmoid(double x) {
  if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

inline Var softplus(const Var& a) {
  return detail::unary(
      a, [](double x) { return softplus(x); },
      [](double x, double) { return sigmoid(x); });
}

inline Var relu(const Var& a) {
  return detail::unary(
      a, [](double x) { return x > 0.0 ? x : 0.0; },
      [](double x, double) { return x > 0.0 ? 1.0 : 0.0; });
}

// ---------------------------------------------------------------------------
// Shape manipulation and reductions

inline Var reshape(const Var& a, Shape shape) {
  if (numel(shape) != a.size()) {
    throw ShapeError("reshape: cannot view " + to_string(a.shape()) + " as " +
                     to_string(shape));
  }
  Tensor out(std::move(shape), a.value().data);
  return a.graph()->record(std::move(out), {a},
                           [a](std::span<const double> gout, Adjoints& adj) {
                             auto da = adj.of(a);
                             for (std::size_t k = 0; k < gout.size(); ++k) {
                               da[k] += gout[k];
                             }
                           });
}

inline Var sum(const Var& a) {
  double s = 0.0;
  for (double v : a.value().data) s += v;
  return a.graph()->record(Tensor::scalar(s), {a},
                           [a](std::span<const double> gout, Adjoints& adj) {
                             auto da = adj.of(a);
                             for (double& d : da) d += gout[0];
                           });
}

inline Var mean(const Var& a) { return scale(sum(a), 1.0 / double(a.size())); }

/// Sum over `axis`, keeping it as extent 1.
inline Var sum_axis(const Var& a, std::size_t axis) {
  const auto sp = detail::split_axis(a.shape(), axis, "sum_axis");
  Shape s = a.shape();
  s[axis] = 1;
  Tensor out(s);
  const auto& x = a.value().data;
  for (std::size_t o = 0; o < sp.outer; ++o) {
    for (std::size_t e = 0; e < sp.extent; ++e) {
      const std::size_t base = (o * sp.extent + e) * sp.inner;
      for (std::size_t i = 0; i < sp.inner; ++i) {
        out[o * sp.inner + i] += x[base + i];
      }
    }
  }
  return a.graph()->record(
      std::move(out), {a}, [a, sp](std::span<const double> gout, Adjoints& adj) {
        auto da = adj.of(a);
        for (std::size_t o = 0; o < sp.outer; ++o) {
          for (std::size_t e = 0; e < sp.extent; ++e) {
            const std::size_t base = (o * sp.extent + e) * sp.inner;
            for (std::size_t i = 0; i < sp.inner; ++i) {
              da[base + i] += gout[o * sp.inner + i];
            }
          }
        }
      });
}

inline Var mean_axis(const Var& a, std::size_t axis) {
  const double n = double(detail::split_axis(a.shape(), axis, "mean_axis").extent);
  return scale(sum_axis(a, axis), 1.0 / n);
}

inline Var transpose(const Var& a) {
  if (a.shape().size() != 2) {
    throw ShapeError("transpose: expected rank 2, got " + to_string(a.shape()));
  }
  const std::size_t r = a.shape()[0], c = a.shape()[1];
  Tensor out(Shape{c, r});
  const auto& x = a.value().data;
  for (std::size_t i = 0; i < r; ++i) {
    for (std::size_t j = 0; j < c; ++j) out[j * r + i] = x[i * c + j];
  }
  return a.graph()->record(std::move(out), {a},
                           [a, r, c](std::span<const double> gout, Adjoints& adj) {
                             auto da = adj.of(a);
                             for (std::size_t i = 0; i < r; ++i) {
                               for (std::size_t j = 0; j < c; ++j) {
                                 da[i * c + j] += gout[j * r + i];
                               }
                             }
                           });
}

/// [m,k] x [k,n] -> [m,n]
inline Var matmul(const Var& a, const Var& b) {
  detail::require_same_graph(a, b, "matmul");
  const auto& sa = a.shape();
  const auto& sb = b.shape();
  if (sa.size() != 2 || sb.size() != 2 || sa[1] != sb[0]) {
    detail::shape_mismatch("matmul", sa, sb);
  }
  const std::size_t m = sa[0], k = sa[1], n = sb[1];
  Tensor out(Shape{m, n});
  const auto& x = a.value().data;
  const auto& y = b.value().data;
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t p = 0; p < k; ++p) {
      const double xv = x[i * k + p];
      for (std::size_t j = 0; j < n; ++j) out[i * n + j] += xv * y[p * n + j];
    }
  }
  Graph& g = *a.graph();
  return g.record(
      std::move(out), {a, b},
      [a, b, m, k, n, &g](std::span<const double> gout, Adjoints& adj) {
        const auto& x = a.value().data;
        const auto& y = b.value().data;
        if (g.requires_grad(a)) {
          auto da = adj.of(a);
          for (std::size_t i = 0; i < m; ++i) {
            for (std::size_t p = 0; p < k; ++p) {
              double s = 0.0;
              for (std::size_t j = 0; j < n; ++j) s += gout[i * n + j] * y[p * n + j];
              da[i * k + p] += s;
            }
          }
        }
        if (g.requires_grad(b)) {
          auto db = adj.of(b);
          for (std::size_t i = 0; i < m; ++i) {
            for (std::size_t p = 0; p < k; ++p) {
              const double xv = x[i * k + p];
              for (std::size_t j = 0; j < n; ++j) db[p * n + j] += xv * gout[i * n + j];
            }
          }
        }
      });
}

/// Log-sum-exp over the last axis (kept as extent 1).
inline Var logsumexp(const Var& a) {
  if (a.shape().empty()) throw ShapeError("logsumexp: rank-0 input");
  const std::size_t n = a.shape().back();
  const std::size_t rows = a.size() / n;
  Shape s = a.shape();
  s.back() = 1;
  Tensor out(s);
  const auto& x = a.value().data;
  for (std::size_t r = 0; r < rows; ++r) {
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t j = 0; j < n; ++j) mx = std::max(mx, x[r * n + j]);
    double acc = 0.0;
    for (std::size_t j = 0; j < n; ++j) acc += std::exp(x[r * n + j] - mx);
    out[r] = mx + std::log(acc);
  }
  auto lse = std::make_shared<std::vector<double>>(out.data);
  return a.graph()->record(
      std::move(out), {a},
      [a, n, rows, lse](std::span<const double> gout, Adjoints& adj) {
        const auto& x = a.value().data;
        auto da = adj.of(a);
        for (std::size_t r = 0; r < rows; ++r) {
          for (std::size_t j = 0; j < n; ++j) {
            da[r * n + j] += gout[r] * std::exp(x[r * n + j] - (*lse)[r]);
          }
        }
      });
}

/// Softmax over the last axis.
inline Var softmax(const Var& a) {
  if (a.shape().empty()) throw ShapeError("softmax: rank-0 input");
  const std::size_t n = a.shape().back();
  const std::size_t rows = a.size() / n;
  Tensor out(a.shape());
  const auto& x = a.value().data;
  for (std::size_t r = 0; r < rows; ++r) {
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t j = 0; j < n; ++j) mx = std::max(mx, x[r * n + j]);
    double acc = 0.0;
    for (std::size_t j = 0; j < n; ++j) {
      out[r * n + j] = std::exp(x[r * n + j] - mx);
      acc += out[r * n + j];
    }
    for (std::size_t j = 0; j < n; ++j) out[r * n + j] /= acc;
  }
  auto y = std::make_shared<std::vector<double>>(out.data);
  return a.graph()->record(
      std::move(out), {a}, [a, n, rows, y](std::span<const double> gout, Adjoints& adj) {
        auto da = adj.of(a);
        for (std::size_t r = 0; r < rows; ++r) {
          double dot = 0.0;
          for (std::size_t j = 0; j < n; ++j) dot += gout[r * n + j] * (*y)[r * n + j];
          for (std::size_t j = 0; j < n; ++j) {
            da[r * n + j] += (*y)[r * n + j] * (gout[r * n + j] - dot);
          }
        }
      });
}

/// Log-softmax over the last axis.
inline Var log_softmax(const Var& a) { return sub(a, logsumexp(a)); }

/// Scale each last-axis vector to unit length; the norm is floored at `eps`.
inline Var normalize(const Var& a, double eps = kGuardEps) {
  if (a.shape().empty()) throw ShapeError("normalize: rank-0 input");
  const std::size_t n = a.shape().back();
  const std::size_t rows = a.size() / n;
  Tensor out(a.shape());
  auto denom = std::make_shared<std::vector<double>>(rows);
  const auto& x = a.value().data;
  for (std::size_t r = 0; r < rows; ++r) {
    double ss = 0.0;
    for (std::size_t j = 0; j < n; ++j) ss += x[r * n + j] * x[r * n + j];
    (*denom)[r] = std::max(std::sqrt(ss), eps);
    for (std::size_t j = 0; j < n; ++j) out[r * n + j] = x[r * n + j] / (*denom)[r];
  }
  auto y = std::make_shared<std::vector<double>>(out.data);
  return a.graph()->record(
      std::move(out), {a},
      [a, n, rows, eps, y, denom](std::span<const double> gout, Adjoints& adj) {
        auto da = adj.of(a);
        for (std::size_t r = 0; r < rows; ++r) {
          const double d = (*denom)[r];
          if (d > eps) {
            double dot = 0.0;
            for (std::size_t j = 0; j < n; ++j) dot += gout[r * n + j] * (*y)[r * n + j];
            for (std::size_t j = 0; j < n; ++j) {
              da[r * n + j] += (gout[r * n + j] - (*y)[r * n + j] * dot) / d;
            }
          } else {
            for (std::size_t j = 0; j < n; ++j) da[r * n + j] += gout[r * n + j] / d;
          }
        }
      });
}

/// Cosine similarity along the last axis (kept as extent 1).
inline Var cosine(const Var& a, const Var& b) {
  if (a.shape() != b.shape()) detail::shape_mismatch("cosine", a.shape(), b.shape());
  return sum_axis(mul(normalize(a), normalize(b)), a.shape().size() - 1);
}

/// Row-wise cosine matrix: [m,c] x [n,c] -> [m,n].
inline Var cosine_matrix(const Var& a, const Var& b) {
  return matmul(normalize(a), transpose(normalize(b)));
}

// ---------------------------------------------------------------------------
// Image-shaped primitives used by the toy backbone

namespace detail {

/// Unfolds one [Ci,H,W] image into [Ci*K*K, H*W] patch rows with zero
/// padding, so the convolution becomes a matrix product over whole planes.
inline void im2col(const double* x, std::size_t Ci, std::size_t H, std::size_t W,
                   std::size_t K, double* col) {
  const long pad = long(K / 2);
  for (std::size_t c = 0; c < Ci; ++c) {
    for (std::size_t ky = 0; ky < K; ++ky) {
      for (std::size_t kx = 0; kx < K; ++kx) {
        double* dst = col + ((c * K + ky) * K + kx) * H * W;
        std::fill(dst, dst + H * W, 0.0);
        const long dy = long(ky) - pad, dx = long(kx) - pad;
        const std::size_t y0 = dy < 0 ? std::size_t(-dy) : 0;
        const std::size_t y1 = dy > 0 ? H - std::size_t(dy) : H;
        const std::size_t x0 = dx < 0 ? std::size_t(-dx) : 0;
        const std::size_t x1 = dx > 0 ? W - std::size_t(dx) : W;
        for (std::size_t yy = y0; yy < y1; ++yy) {
          const double* src = x + c * H * W + std::size_t(long(yy) + dy) * W;
          for (std::size_t xx = x0; xx < x1; ++xx) dst[yy * W + xx] = src[long(xx) + dx];
        }
      }
    }
  }
}

/// Adjoint of im2col: scatters patch-row gradients back onto the image.
inline void col2im_add(const double* col, std::size_t Ci, std::size_t H, std::size_t W,
                       std::size_t K, double* x) {
  const long pad = long(K / 2);
  for (std::size_t c = 0; c < Ci; ++c) {
    for (std::size_t ky = 0; ky < K; ++ky) {
      for (std::size_t kx = 0; kx < K; ++kx) {
        const double* src = col + ((c * K + ky) * K + kx) * H * W;
        const long dy = long(ky) - pad, dx = long(kx) - pad;
        const std::size_t y0 = dy < 0 ? std::size_t(-dy) : 0;
        const std::size_t y1 = dy > 0 ? H - std::size_t(dy) : H;
        const std::size_t x0 = dx < 0 ? std::size_t(-dx) : 0;
        const std::size_t x1 = dx > 0 ? W - std::size_t(dx) : W;
        for (std::size_t yy = y0; yy < y1; ++yy) {
          double* dst = x + c * H * W + std::size_t(long(yy) + dy) * W;
          for (std::size_t xx = x0; xx < x1; ++xx) dst[long(xx) + dx] += src[yy * W + xx];
        }
      }
    }
  }
}

}  // namespace detail

/// 2-D convolution, NCHW, odd square kernel, stride 1, zero "same" padding.
/// x: [M,Ci,H,W], w: [Co,Ci,K,K], b: [Co].
inline Var conv2d(const Var& x, const Var& w, const Var& b) {
  detail::require_same_graph(x, w, "conv2d");
  detail::require_same_graph(x, b, "conv2d");
  const auto& sx = x.shape();
  const auto& sw = w.shape();
  if (sx.size() != 4 || sw.size() != 4 || sw[1] != sx[1] || sw[2] != sw[3] ||
      sw[2] % 2 == 0) {
    detail::shape_mismatch("conv2d", sx, sw);
  }
  if (b.shape() != Shape{sw[0]}) detail::shape_mismatch("conv2d(bias)", sw, b.shape());
  const std::size_t M = sx[0], Ci = sx[1], H = sx[2], W = sx[3];
  const std::size_t Co = sw[0], K = sw[2];
  const std::size_t R = Ci * K * K, P = H * W;
  Tensor out(Shape{M, Co, H, W});
  const auto& xv = x.value().data;
  const auto& wv = w.value().data;
  const auto& bv = b.value().data;
  std::vector<double> col(R * P);
  for (std::size_t m = 0; m < M; ++m) {
    detail::im2col(&xv[m * Ci * P], Ci, H, W, K, col.data());
    std::size_t o = 0;
    // Four output planes per pass share each patch row load.
    for (; o + 4 <= Co; o += 4) {
      double* d0 = &out.data[(m * Co + o) * P];
      double* d1 = d0 + P;
      double* d2 = d1 + P;
      double* d3 = d2 + P;
      std::fill(d0, d0 + P, bv[o]);
      std::fill(d1, d1 + P, bv[o + 1]);
      std::fill(d2, d2 + P, bv[o + 2]);
      std::fill(d3, d3 + P, bv[o + 3]);
      for (std::size_t r = 0; r < R; ++r) {
        const double w0 = wv[o * R + r], w1 = wv[(o + 1) * R + r];
        const double w2 = wv[(o + 2) * R + r], w3 = wv[(o + 3) * R + r];
        const double* crow = &col[r * P];
        for (std::size_t p = 0; p < P; ++p) {
          const double c = crow[p];
          d0[p] += w0 * c;
          d1[p] += w1 * c;
          d2[p] += w2 * c;
          d3[p] += w3 * c;
        }
      }
    }
    for (; o < Co; ++o) {
      double* dst = &out.data[(m * Co + o) * P];
      std::fill(dst, dst + P, bv[o]);
      for (std::size_t r = 0; r < R; ++r) {
        const double wk = wv[o * R + r];
        const double* crow = &col[r * P];
        for (std::size_t p = 0; p < P; ++p) dst[p] += wk * crow[p];
      }
    }
  }
  Graph& g = *x.graph();
  return g.record(
      std::move(out), {x, w, b},
      [x, w, b, M, Ci, H, W, Co, K, R, P, &g](std::span<const double> gout, Adjoints& adj) {
        const auto& xv = x.value().data;
        const auto& wv = w.value().data;
        const bool gx = g.requires_grad(x);
        const bool gw = g.requires_grad(w);
        const bool gb = g.requires_grad(b);
        std::span<double> dx_, dw_, db_;
        if (gx) dx_ = adj.of(x);
        if (gw) dw_ = adj.of(w);
        if (gb) db_ = adj.of(b);
        std::vector<double> col(gw ? R * P : 0), dcol(gx ? R * P : 0);
        for (std::size_t m = 0; m < M; ++m) {
          const double* go_m = &gout[m * Co * P];
          if (gb) {
            for (std::size_t o = 0; o < Co; ++o) {
              double s = 0.0;
              for (std::size_t p = 0; p < P; ++p) s += go_m[o * P + p];
              db_[o] += s;
            }
          }
          if (gw) {
            detail::im2col(&xv[m * Ci * P], Ci, H, W, K, col.data());
            for (std::size_t o = 0; o < Co; ++o) {
              const double* go = go_m + o * P;
              for (std::size_t r = 0; r < R; ++r) {
                const double* crow = &col[r * P];
                double a0 = 0.0, a1 = 0.0, a2 = 0.0, a3 = 0.0;
                std::size_t p = 0;
                for (; p + 4 <= P; p += 4) {
                  a0 += go[p] * crow[p];
                  a1 += go[p + 1] * crow[p + 1];
                  a2 += go[p + 2] * crow[p + 2];
                  a3 += go[p + 3] * crow[p + 3];
                }
                for (; p < P; ++p) a0 += go[p] * crow[p];
                dw_[o * R + r] += (a0 + a1) + (a2 + a3);
              }
            }
          }
          if (gx) {
            std::fill(dcol.begin(), dcol.end(), 0.0);
            for (std::size_t r = 0; r < R; ++r) {
              double* drow = &dcol[r * P];
              std::size_t o = 0;
              for (; o + 4 <= Co; o += 4) {
                const double w0 = wv[o * R + r], w1 = wv[(o + 1) * R + r];
                const double w2 = wv[(o + 2) * R + r], w3 = wv[(o + 3) * R + r];
                const double* g0 = go_m + o * P;
                for (std::size_t p = 0; p < P; ++p) {
                  drow[p] += w0 * g0[p] + w1 * g0[P + p] + w2 * g0[2 * P + p] + w3 * g0[3 * P + p];
                }
              }
              for (; o < Co; ++o) {
                const double wk = wv[o * R + r];
                const double* go = go_m + o * P;
                for (std::size_t p = 0; p < P; ++p) drow[p] += wk * go[p];
              }
            }
            detail::col2im_add(dcol.data(), Ci, H, W, K, &dx_[m * Ci * P]);
          }
        }
      });
}

/// 2x2 average pooling with stride 2 on [M,C,H,W]; H and W must be even.
inline Var avg_pool2(const Var& x) {
  const auto& s = x.shape();
  if (s.size() != 4 || s[2] % 2 || s[3] % 2) {
    throw ShapeError("avg_pool2: expected [M,C,even,even], got " + to_string(s));
  }
  const std::size_t MC = s[0] * s[1], H = s[2], W = s[3], h = H / 2, w = W / 2;
  Tensor out(Shape{s[0], s[1], h, w});
  const auto& xv = x.value().data;
  for (std::size_t i = 0; i < MC; ++i) {
    for (std::size_t yy = 0; yy < h; ++yy) {
      for (std::size_t xx = 0; xx < w; ++xx) {
        const std::size_t b = i * H * W + 2 * yy * W + 2 * xx;
        out[(i * h + yy) * w + xx] = 0.25 * (xv[b] + xv[b + 1] + xv[b + W] + xv[b + W + 1]);
      }
    }
  }
  return x.graph()->record(
      std::move(out), {x}, [x, MC, H, W, h, w](std::span<const double> gout, Adjoints& adj) {
        auto dx = adj.of(x);
        for (std::size_t i = 0; i < MC; ++i) {
          for (std::size_t yy = 0; yy < h; ++yy) {
            for (std::size_t xx = 0; xx < w; ++xx) {
              const double gv = 0.25 * gout[(i * h + yy) * w + xx];
              const std::size_t b = i * H * W + 2 * yy * W + 2 * xx;
              dx[b] += gv;
              dx[b + 1] += gv;
              dx[b + W] += gv;
              dx[b + W + 1] += gv;
            }
          }
        }
      });
}

// ---------------------------------------------------------------------------
// Functional entry points and finite-difference verification

/// A computation over declared inputs, returning one output node.
using GraphFn = std::function<Var(Graph&, std::span<const Var>)>;

inline Tensor forward_eval(const GraphFn& fn, const std::vector<Tensor>& inputs) {
  Graph g(Mode::kInference);
  std::vector<Var> vars;
  vars.reserve(inputs.size());
  for (const auto& t : inputs) vars.push_back(g.constant(t));
  return fn(g, vars).value();
}

/// Reverse-mode gradient of the output with respect to every input. A
/// cotangent is required when the output is not scalar.
inline std::vector<Tensor> backward_grad(const GraphFn& fn,
                                         const std::vector<Tensor>& inputs,
                                         const std::optional<Tensor>& cotangent = {}) {
  Graph g(Mode::kTraining);
  std::vector<Var> vars;
  vars.reserve(inputs.size());
  for (const auto& t : inputs) vars.push_back(g.input(t));
  Var out = fn(g, vars);
  if (cotangent) {
    g.backward(out, *cotangent);
  } else {
    g.backward(out);
  }
  std::vector<Tensor> grads;
  grads.reserve(vars.size());
  for (const auto& v : vars) grads.push_back(g.grad(v));
  return grads;
}

struct GradientCheckReport {
  double max_error = 0.0;  // max |analytic - fd| / max(1, |fd|)
  std::size_t worst_input = 0;
  std::size_t worst_index = 0;
  std::size_t checked = 0;
};

/// Compare reverse-mode gradients of a scalar graph with central finite
/// differences.
inline GradientCheckReport gradient_check(const GraphFn& fn,
                                          const std::vector<Tensor>& inputs,
                                          double step = 1e-5) {
  const auto analytic = backward_grad(fn, inputs);
  GradientCheckReport rep;
  std::vector<Tensor> probe = inputs;
  for (std::size_t i = 0; i < probe.size(); ++i) {
    for (std::size_t k = 0; k < probe[i].size(); ++k) {
      const double orig = probe[i][k];
      probe[i][k] = orig + step;
      const double up = forward_eval(fn, probe).item();
      probe[i][k] = orig - step;
      const double down = forward_eval(fn, probe).item();
      probe[i][k] = orig;
      const double fd = (up - down) / (2.0 * step);
      const double err = std::abs(analytic[i][k] - fd) / std::max(1.0, std::abs(fd));
      ++rep.checked;
      if (err > rep.max_error || !std::isfinite(err)) {
        rep.max_error = std::isfinite(err) ? err : std::numeric_limits<double>::infinity();
        rep.worst_input = i;
        rep.worst_index = k;
      }
    }
  }
  return rep;
}

}  // namespace ttdg
