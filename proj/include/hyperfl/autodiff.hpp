#pragma once

// Tape-free reverse-mode automatic differentiation over Tensor values.
//
// Every op records its inputs and a vector-Jacobian product written in terms
// of other ops. Running the backward pass with create_graph=true therefore
// records the backward computation itself, and the resulting gradients can be
// differentiated again (gradients of gradient-matching losses).

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <memory>
#include <string>
#include <unordered_map>
#include <unordered_set>
#include <utility>
#include <vector>

#include "hyperfl/errors.hpp"
#include "hyperfl/tensor.hpp"

namespace hyperfl::ad {

class Var;
using VjpFn = std::function<std::vector<Var>(const Var& grad_out)>;

struct Node {
  Tensor value;
  std::vector<std::shared_ptr<Node>> inputs;
  VjpFn vjp;
  bool requires_grad = false;
  bool twice_differentiable = true;
  const char* op = "leaf";
};

namespace detail {
inline bool& recording() {
  thread_local bool on = true;
  return on;
}
}  // namespace detail

/// Disables graph recording for the current thread while alive.
class NoGradGuard {
 public:
  NoGradGuard() : prev_(detail::recording()) { detail::recording() = false; }
  ~NoGradGuard() { detail::recording() = prev_; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool prev_;
};

class RecordModeGuard {
 public:
  explicit RecordModeGuard(bool on) : prev_(detail::recording()) { detail::recording() = on; }
  ~RecordModeGuard() { detail::recording() = prev_; }
  RecordModeGuard(const RecordModeGuard&) = delete;
  RecordModeGuard& operator=(const RecordModeGuard&) = delete;

 private:
  bool prev_;
};

class Var {
 public:
  Var() = default;

  static Var constant(Tensor value) {
    auto n = std::make_shared<Node>();
    n->value = std::move(value);
    return Var(std::move(n));
  }

  /// A leaf that gradients can be taken with respect to.
  static Var variable(Tensor value) {
    auto n = std::make_shared<Node>();
    n->value = std::move(value);
    n->requires_grad = true;
    return Var(std::move(n));
  }

  bool defined() const noexcept { return static_cast<bool>(node_); }
  const Tensor& value() const { return node_->value; }
  const Shape& shape() const { return node_->value.shape(); }
  bool requires_grad() const { return node_ && node_->requires_grad; }
  const std::shared_ptr<Node>& node() const noexcept { return node_; }

  Var detach() const { return constant(node_->value); }

  static Var from_node(std::shared_ptr<Node> n) { return Var(std::move(n)); }

 private:
  explicit Var(std::shared_ptr<Node> n) : node_(std::move(n)) {}
  std::shared_ptr<Node> node_;
};

inline Var make_op(const char* op, Tensor value, const std::vector<Var>& inputs, VjpFn vjp,
                   bool twice_differentiable = true) {
  auto n = std::make_shared<Node>();
  n->value = std::move(value);
  n->op = op;
  if (detail::recording()) {
    bool any = std::any_of(inputs.begin(), inputs.end(),
                           [](const Var& v) { return v.requires_grad(); });
    if (any) {
      n->requires_grad = true;
      n->twice_differentiable = twice_differentiable;
      n->vjp = std::move(vjp);
      n->inputs.reserve(inputs.size());
      for (const Var& v : inputs) n->inputs.push_back(v.node());
    }
  }
  return Var::from_node(std::move(n));
}

// ---------------------------------------------------------------------------
// Raw kernels

namespace kernel {

inline void require_matrix(const Tensor& t, const char* what) {
  if (t.rank() != 2) {
    throw DimensionError(std::string(what) + ": expected a matrix, got " + shape_str(t.shape()));
  }
}

inline Tensor matmul(const Tensor& a, const Tensor& b) {
  require_matrix(a, "matmul");
  require_matrix(b, "matmul");
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  if (b.dim(0) != k) {
    throw DimensionError("matmul: " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
  }
  Tensor out({m, n});
  auto o = out.values();
  auto av = a.values();
  auto bv = b.values();
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t p = 0; p < k; ++p) {
      const double aip = av[i * k + p];
      if (aip == 0.0) continue;
      const double* brow = bv.data() + p * n;
      double* orow = o.data() + i * n;
      for (std::size_t j = 0; j < n; ++j) orow[j] += aip * brow[j];
    }
  }
  return out;
}

/// a [m, k] times b^T for b [n, k].
inline Tensor matmul_nt(const Tensor& a, const Tensor& b) {
  require_matrix(a, "matmul_nt");
  require_matrix(b, "matmul_nt");
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(0);
  if (b.dim(1) != k) {
    throw DimensionError("matmul_nt: " + shape_str(a.shape()) + " x " + shape_str(b.shape()) + "^T");
  }
  Tensor out({m, n});
  const double* av = a.values().data();
  const double* bv = b.values().data();
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t j = 0; j < n; ++j) {
      double acc = 0.0;
      for (std::size_t p = 0; p < k; ++p) acc += av[i * k + p] * bv[j * k + p];
      out[i * n + j] = acc;
    }
  }
  return out;
}

/// a^T times b for a [k, m], b [k, n].
inline Tensor matmul_tn(const Tensor& a, const Tensor& b) {
  require_matrix(a, "matmul_tn");
  require_matrix(b, "matmul_tn");
  const std::size_t k = a.dim(0), m = a.dim(1), n = b.dim(1);
  if (b.dim(0) != k) {
    throw DimensionError("matmul_tn: " + shape_str(a.shape()) + "^T x " + shape_str(b.shape()));
  }
  Tensor out({m, n});
  const double* av = a.values().data();
  const double* bv = b.values().data();
  double* o = out.values().data();
  for (std::size_t p = 0; p < k; ++p) {
    for (std::size_t i = 0; i < m; ++i) {
      const double api = av[p * m + i];
      if (api == 0.0) continue;
      for (std::size_t j = 0; j < n; ++j) o[i * n + j] += api * bv[p * n + j];
    }
  }
  return out;
}

inline Tensor transpose(const Tensor& a) {
  require_matrix(a, "transpose");
  const std::size_t m = a.dim(0), n = a.dim(1);
  Tensor out({n, m});
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out[j * m + i] = a[i * n + j];
  return out;
}

template <typename F>
Tensor zip(const Tensor& a, const Tensor& b, const char* what, F f) {
  require_same_shape(a, b, what);
  Tensor out(a.shape());
  for (std::size_t i = 0; i < a.size(); ++i) out[i] = f(a[i], b[i]);
  return out;
}

template <typename F>
Tensor map(const Tensor& a, F f) {
  Tensor out(a.shape());
  for (std::size_t i = 0; i < a.size(); ++i) out[i] = f(a[i]);
  return out;
}

inline Tensor softmax_rows(const Tensor& z) {
  require_matrix(z, "softmax");
  const std::size_t m = z.dim(0), n = z.dim(1);
  Tensor out(z.shape());
  for (std::size_t i = 0; i < m; ++i) {
    double mx = z[i * n];
    for (std::size_t j = 1; j < n; ++j) mx = std::max(mx, z[i * n + j]);
    double s = 0.0;
    for (std::size_t j = 0; j < n; ++j) {
      out[i * n + j] = std::exp(z[i * n + j] - mx);
      s += out[i * n + j];
    }
    for (std::size_t j = 0; j < n; ++j) out[i * n + j] /= s;
  }
  return out;
}

inline Tensor logsumexp_rows(const Tensor& z) {
  require_matrix(z, "logsumexp");
  const std::size_t m = z.dim(0), n = z.dim(1);
  Tensor out({m});
  for (std::size_t i = 0; i < m; ++i) {
    double mx = z[i * n];
    for (std::size_t j = 1; j < n; ++j) mx = std::max(mx, z[i * n + j]);
    double s = 0.0;
    for (std::size_t j = 0; j < n; ++j) s += std::exp(z[i * n + j] - mx);
    out[i] = mx + std::log(s);
  }
  return out;
}

}  // namespace kernel

// ---------------------------------------------------------------------------
// Differentiable ops

Var add(const Var& a, const Var& b);
Var sub(const Var& a, const Var& b);
Var mul(const Var& a, const Var& b);
Var div(const Var& a, const Var& b);
Var neg(const Var& a);
Var scale(const Var& a, double c);
Var matmul(const Var& a, const Var& b);
Var matmul_nt(const Var& a, const Var& b);
Var matmul_tn(const Var& a, const Var& b);
Var transpose(const Var& a);
Var reshape(const Var& a, Shape shape);
Var sum(const Var& a);
Var broadcast(const Var& s, Shape shape);
Var sum_rows(const Var& a);
Var repeat_rows(const Var& b, std::size_t m);
Var sum_cols(const Var& a);
Var repeat_cols(const Var& c, std::size_t n);
Var relu(const Var& a);
Var leaky_relu(const Var& a, double slope);
Var abs(const Var& a);
Var sqrt(const Var& a);
Var softmax_rows(const Var& z);
Var logsumexp_rows(const Var& z);
Var gather_cols(const Var& z, const std::vector<std::size_t>& cols);
Var scatter_cols(const Var& g, const std::vector<std::size_t>& cols, std::size_t n);

inline Var add(const Var& a, const Var& b) {
  return make_op("add", kernel::zip(a.value(), b.value(), "add", std::plus<>()), {a, b},
                 [](const Var& g) { return std::vector<Var>{g, g}; });
}

inline Var sub(const Var& a, const Var& b) {
  return make_op("sub", kernel::zip(a.value(), b.value(), "sub", std::minus<>()), {a, b},
                 [](const Var& g) { return std::vector<Var>{g, neg(g)}; });
}

inline Var mul(const Var& a, const Var& b) {
  return make_op("mul", kernel::zip(a.value(), b.value(), "mul", std::multiplies<>()), {a, b},
                 [a, b](const Var& g) { return std::vector<Var>{mul(g, b), mul(g, a)}; });
}

inline Var div(const Var& a, const Var& b) {
  return make_op("div", kernel::zip(a.value(), b.value(), "div", std::divides<>()), {a, b},
                 [a, b](const Var& g) {
                   return std::vector<Var>{div(g, b), neg(div(mul(g, a), mul(b, b)))};
                 });
}

inline Var neg(const Var& a) {
  return make_op("neg", kernel::map(a.value(), [](double x) { return -x; }), {a},
                 [](const Var& g) { return std::vector<Var>{neg(g)}; });
}

inline Var scale(const Var& a, double c) {
  return make_op("scale", kernel::map(a.value(), [c](double x) { return c * x; }), {a},
                 [c](const Var& g) { return std::vector<Var>{scale(g, c)}; });
}

// Gradients are only built for inputs that need them.
inline Var matmul(const Var& a, const Var& b) {
  return make_op("matmul", kernel::matmul(a.value(), b.value()), {a, b}, [a, b](const Var& g) {
    return std::vector<Var>{a.requires_grad() ? matmul_nt(g, b) : Var(),
                            b.requires_grad() ? matmul_tn(a, g) : Var()};
  });
}

/// a b^T without materializing the transpose.
inline Var matmul_nt(const Var& a, const Var& b) {
  return make_op("matmul_nt", kernel::matmul_nt(a.value(), b.value()), {a, b}, [a, b](const Var& g) {
    return std::vector<Var>{a.requires_grad() ? matmul(g, b) : Var(),
                            b.requires_grad() ? matmul_tn(g, a) : Var()};
  });
}

/// a^T b without materializing the transpose.
inline Var matmul_tn(const Var& a, const Var& b) {
  return make_op("matmul_tn", kernel::matmul_tn(a.value(), b.value()), {a, b}, [a, b](const Var& g) {
    return std::vector<Var>{a.requires_grad() ? matmul_nt(b, g) : Var(),
                            b.requires_grad() ? matmul(a, g) : Var()};
  });
}

inline Var transpose(const Var& a) {
  return make_op("transpose", kernel::transpose(a.value()), {a},
                 [](const Var& g) { return std::vector<Var>{transpose(g)}; });
}

inline Var reshape(const Var& a, Shape shape) {
  Shape orig = a.shape();
  return make_op("reshape", a.value().reshaped(std::move(shape)), {a},
                 [orig](const Var& g) { return std::vector<Var>{reshape(g, orig)}; });
}

inline Var sum(const Var& a) {
  double s = 0.0;
  for (double x : a.value().values()) s += x;
  Shape orig = a.shape();
  return make_op("sum", Tensor::scalar(s), {a},
                 [orig](const Var& g) { return std::vector<Var>{broadcast(g, orig)}; });
}

/// Fills `shape` with the single value of `s`.
inline Var broadcast(const Var& s, Shape shape) {
  if (s.value().size() != 1) {
    throw DimensionError("broadcast: source must hold one value, got " + shape_str(s.shape()));
  }
  Shape src = s.shape();
  return make_op("broadcast", Tensor(std::move(shape), s.value()[0]), {s}, [src](const Var& g) {
    Var total = sum(g);
    return std::vector<Var>{src.empty() ? total : reshape(total, src)};
  });
}

inline Var sum_rows(const Var& a) {
  kernel::require_matrix(a.value(), "sum_rows");
  const std::size_t m = a.shape()[0], n = a.shape()[1];
  Tensor out({n});
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out[j] += a.value()[i * n + j];
  return make_op("sum_rows", std::move(out), {a},
                 [m](const Var& g) { return std::vector<Var>{repeat_rows(g, m)}; });
}

/// [n] -> [m, n], each row a copy of the input.
inline Var repeat_rows(const Var& b, std::size_t m) {
  if (b.value().rank() != 1) throw DimensionError("repeat_rows: expected a vector");
  const std::size_t n = b.shape()[0];
  Tensor out({m, n});
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out[i * n + j] = b.value()[j];
  return make_op("repeat_rows", std::move(out), {b},
                 [](const Var& g) { return std::vector<Var>{sum_rows(g)}; });
}

inline Var sum_cols(const Var& a) {
  kernel::require_matrix(a.value(), "sum_cols");
  const std::size_t m = a.shape()[0], n = a.shape()[1];
  Tensor out({m});
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out[i] += a.value()[i * n + j];
  return make_op("sum_cols", std::move(out), {a},
                 [n](const Var& g) { return std::vector<Var>{repeat_cols(g, n)}; });
}

/// [m] -> [m, n], each column a copy of the input.
inline Var repeat_cols(const Var& c, std::size_t n) {
  if (c.value().rank() != 1) throw DimensionError("repeat_cols: expected a vector");
  const std::size_t m = c.shape()[0];
  Tensor out({m, n});
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out[i * n + j] = c.value()[i];
  return make_op("repeat_cols", std::move(out), {c},
                 [](const Var& g) { return std::vector<Var>{sum_cols(g)}; });
}

namespace detail {
// Elementwise op whose derivative is piecewise constant: the VJP multiplies by
// a constant mask, so second derivatives vanish almost everywhere.
template <typename F, typename D>
Var masked_unary(const char* op, const Var& a, F f, D df) {
  const Tensor& x = a.value();
  Tensor mask(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) mask[i] = df(x[i]);
  Var m = Var::constant(std::move(mask));
  return make_op(op, kernel::map(x, f), {a},
                 [m](const Var& g) { return std::vector<Var>{mul(g, m)}; });
}
}  // namespace detail

inline Var relu(const Var& a) {
  return detail::masked_unary(
      "relu", a, [](double x) { return x > 0.0 ? x : 0.0; },
      [](double x) { return x > 0.0 ? 1.0 : 0.0; });
}

inline Var leaky_relu(const Var& a, double slope) {
  return detail::masked_unary(
      "leaky_relu", a, [slope](double x) { return x > 0.0 ? x : slope * x; },
      [slope](double x) { return x > 0.0 ? 1.0 : slope; });
}

inline Var abs(const Var& a) {
  return detail::masked_unary(
      "abs", a, [](double x) { return std::fabs(x); },
      [](double x) { return x > 0.0 ? 1.0 : (x < 0.0 ? -1.0 : 0.0); });
}

inline Var sqrt(const Var& a) {
  return make_op("sqrt", kernel::map(a.value(), [](double x) { return std::sqrt(x); }), {a},
                 [a](const Var& g) { return std::vector<Var>{div(scale(g, 0.5), sqrt(a))}; });
}

inline Var softmax_rows(const Var& z) {
  return make_op("softmax", kernel::softmax_rows(z.value()), {z}, [z](const Var& g) {
    Var s = softmax_rows(z);
    const std::size_t n = z.shape()[1];
    return std::vector<Var>{mul(s, sub(g, repeat_cols(sum_cols(mul(g, s)), n)))};
  });
}

inline Var logsumexp_rows(const Var& z) {
  return make_op("logsumexp", kernel::logsumexp_rows(z.value()), {z}, [z](const Var& g) {
    return std::vector<Var>{mul(repeat_cols(g, z.shape()[1]), softmax_rows(z))};
  });
}

/// out[i] = z[i, cols[i]]
inline Var gather_cols(const Var& z, const std::vector<std::size_t>& cols) {
  kernel::require_matrix(z.value(), "gather_cols");
  const std::size_t m = z.shape()[0], n = z.shape()[1];
  if (cols.size() != m) throw DimensionError("gather_cols: index count differs from rows");
  Tensor out({m});
  for (std::size_t i = 0; i < m; ++i) {
    if (cols[i] >= n) throw DimensionError("gather_cols: index out of range");
    out[i] = z.value()[i * n + cols[i]];
  }
  return make_op("gather_cols", std::move(out), {z}, [cols, n](const Var& g) {
    return std::vector<Var>{scatter_cols(g, cols, n)};
  });
}

/// Inverse-shaped companion of gather_cols: out[i, cols[i]] = g[i], zeros elsewhere.
inline Var scatter_cols(const Var& g, const std::vector<std::size_t>& cols, std::size_t n) {
  const std::size_t m = g.shape()[0];
  Tensor out({m, n});
  for (std::size_t i = 0; i < m; ++i) out[i * n + cols[i]] = g.value()[i];
  return make_op("scatter_cols", std::move(out), {g}, [cols](const Var& gg) {
    return std::vector<Var>{gather_cols(gg, cols)};
  });
}

/// Wraps a black-box function with a numeric VJP. Such ops support first-order
/// gradients only; differentiating through them twice raises CapabilityError.
inline Var opaque(const Var& x, const std::function<Tensor(const Tensor&)>& f,
                  std::function<Tensor(const Tensor& x, const Tensor& g)> vjp) {
  Tensor xv = x.value();
  return make_op(
      "opaque", f(xv), {x},
      [xv, vjp = std::move(vjp)](const Var& g) {
        return std::vector<Var>{Var::constant(vjp(xv, g.value()))};
      },
      /*twice_differentiable=*/false);
}

// ---------------------------------------------------------------------------
// Composites

inline Var dot(const Var& a, const Var& b) { return sum(mul(a, b)); }

inline Var sq_norm(const Var& a) { return dot(a, a); }

/// Multiplies every element of `t` by the scalar Var `s`.
inline Var mul_scalar(const Var& s, const Var& t) { return mul(broadcast(s, t.shape()), t); }

inline Var add_scalar_const(const Var& a, double c) {
  return add(a, Var::constant(Tensor(a.shape(), c)));
}

/// Mean softmax cross-entropy of logits [B, K] against integer labels.
inline Var cross_entropy(const Var& logits, const std::vector<std::size_t>& labels) {
  const std::size_t b = logits.shape().at(0);
  return scale(sum(sub(logsumexp_rows(logits), gather_cols(logits, labels))),
               1.0 / static_cast<double>(b));
}

// ---------------------------------------------------------------------------
// Backward pass

/// Gradients of the scalar `output` with respect to each of `wrt`. Inputs the
/// output does not depend on get a zero gradient. With create_graph the
/// returned gradients are themselves differentiable.
inline std::vector<Var> grad(const Var& output, const std::vector<Var>& wrt,
                             bool create_graph = false) {
  if (output.value().size() != 1) {
    throw DimensionError("grad: output must be a scalar, got " + shape_str(output.shape()));
  }

  // Reverse topological order by iterative post-order DFS.
  std::vector<Node*> order;
  if (output.requires_grad()) {
    std::unordered_set<Node*> seen;
    std::vector<std::pair<Node*, std::size_t>> stack{{output.node().get(), 0}};
    seen.insert(output.node().get());
    while (!stack.empty()) {
      auto& [node, next] = stack.back();
      if (next < node->inputs.size()) {
        Node* child = node->inputs[next++].get();
        if (child->requires_grad && seen.insert(child).second) stack.emplace_back(child, 0);
      } else {
        order.push_back(node);
        stack.pop_back();
      }
    }
  }

  RecordModeGuard mode(create_graph);
  std::unordered_map<Node*, Var> grads;
  grads.emplace(output.node().get(), Var::constant(Tensor(output.shape(), 1.0)));

  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node* node = *it;
    auto found = grads.find(node);
    if (found == grads.end() || !node->vjp) continue;
    if (create_graph && !node->twice_differentiable) {
      throw CapabilityError(std::string("op '") + node->op +
                            "' does not support higher-order differentiation");
    }
    std::vector<Var> in_grads = node->vjp(found->second);
    for (std::size_t i = 0; i < node->inputs.size(); ++i) {
      Node* in = node->inputs[i].get();
      if (!in->requires_grad || i >= in_grads.size() || !in_grads[i].defined()) continue;
      auto [slot, fresh] = grads.try_emplace(in, in_grads[i]);
      if (!fresh) slot->second = add(slot->second, in_grads[i]);
    }
  }

  std::vector<Var> out;
  out.reserve(wrt.size());
  for (const Var& w : wrt) {
    auto found = grads.find(w.node().get());
    out.push_back(found != grads.end() ? found->second : Var::constant(Tensor(w.shape(), 0.0)));
  }
  return out;
}

}  // namespace hyperfl::ad
