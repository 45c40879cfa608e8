#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "hyperfl/autodiff.hpp"
#include "hyperfl/errors.hpp"
#include "hyperfl/params.hpp"
#include "hyperfl/rng.hpp"
#include "hyperfl/tensor.hpp"

namespace hyperfl {

inline constexpr double kLeakySlope = 0.01;

enum class LayerKind { dense, relu, leaky_relu, softmax_xent };

inline const char* to_string(LayerKind k) {
  switch (k) {
    case LayerKind::dense: return "dense";
    case LayerKind::relu: return "relu";
    case LayerKind::leaky_relu: return "leaky_relu";
    case LayerKind::softmax_xent: return "softmax_xent";
  }
  return "?";
}

inline LayerKind layer_kind_from(const std::string& s) {
  if (s == "dense") return LayerKind::dense;
  if (s == "relu") return LayerKind::relu;
  if (s == "leaky_relu") return LayerKind::leaky_relu;
  if (s == "softmax_xent") return LayerKind::softmax_xent;
  throw ConfigError("unknown layer kind '" + s + "'");
}

struct Layer {
  LayerKind kind = LayerKind::dense;
  std::size_t in_dim = 0;
  std::size_t out_dim = 0;
  /// Parameter-name prefix for dense layers, e.g. "fe.0".
  std::string name;

  friend bool operator==(const Layer&, const Layer&) = default;
};

struct NetSpec {
  std::vector<Layer> layers;

  std::size_t input_dim() const { return layers.front().in_dim; }
  std::size_t output_dim() const { return layers.back().out_dim; }
  bool has_head() const {
    return !layers.empty() && layers.back().kind == LayerKind::softmax_xent;
  }

  void validate() const {
    if (layers.empty()) throw DimensionError("network has no layers");
    bool any_dense = false;
    for (std::size_t i = 0; i < layers.size(); ++i) {
      const Layer& l = layers[i];
      if (l.in_dim == 0 || l.out_dim == 0) {
        throw DimensionError("layer " + std::to_string(i) + " has a zero dimension");
      }
      if (l.kind == LayerKind::dense) {
        any_dense = true;
        if (l.name.empty()) throw DimensionError("dense layer " + std::to_string(i) + " is unnamed");
      } else if (l.in_dim != l.out_dim) {
        throw DimensionError("layer " + std::to_string(i) + " (" + to_string(l.kind) +
                             ") must preserve its width");
      }
      if (l.kind == LayerKind::softmax_xent && i + 1 != layers.size()) {
        throw DimensionError("softmax_xent head must be the last layer");
      }
      if (i > 0 && layers[i - 1].out_dim != l.in_dim) {
        throw DimensionError("layer " + std::to_string(i - 1) + " emits " +
                             std::to_string(layers[i - 1].out_dim) + " but layer " +
                             std::to_string(i) + " expects " + std::to_string(l.in_dim));
      }
    }
    if (!any_dense) throw DimensionError("network needs at least one dense layer");
  }

  /// (name, shape) of every parameter tensor, in layer order. Weights are
  /// stored [out, in].
  std::vector<std::pair<std::string, Shape>> parameter_shapes() const {
    std::vector<std::pair<std::string, Shape>> out;
    for (const Layer& l : layers) {
      if (l.kind != LayerKind::dense) continue;
      out.emplace_back(l.name + ".weight", Shape{l.out_dim, l.in_dim});
      out.emplace_back(l.name + ".bias", Shape{l.out_dim});
    }
    return out;
  }

  friend bool operator==(const NetSpec&, const NetSpec&) = default;
};

/// Dense stack through `dims`, with `activation` between dense layers. The
/// last dense layer is followed by `activation` when `activate_last`, and by a
/// softmax cross-entropy head when `head`.
inline NetSpec make_mlp(const std::string& prefix, const std::vector<std::size_t>& dims,
                        LayerKind activation, bool activate_last, bool head) {
  if (dims.size() < 2) throw DimensionError("make_mlp needs at least two widths");
  NetSpec spec;
  for (std::size_t i = 0; i + 1 < dims.size(); ++i) {
    spec.layers.push_back({LayerKind::dense, dims[i], dims[i + 1], prefix + "." + std::to_string(i)});
    if (i + 2 < dims.size() || activate_last) {
      spec.layers.push_back({activation, dims[i + 1], dims[i + 1], {}});
    }
  }
  if (head) spec.layers.push_back({LayerKind::softmax_xent, dims.back(), dims.back(), {}});
  spec.validate();
  return spec;
}

inline NetSpec concat(const NetSpec& first, const NetSpec& second) {
  NetSpec out = first;
  out.layers.insert(out.layers.end(), second.layers.begin(), second.layers.end());
  out.validate();
  return out;
}

/// Uniform(+-1/sqrt(fan_in)) for every weight and bias.
inline ParamSet init_params(const NetSpec& spec, std::uint64_t seed) {
  spec.validate();
  Rng rng(seed);
  ParamSet out;
  for (const Layer& l : spec.layers) {
    if (l.kind != LayerKind::dense) continue;
    const double bound = 1.0 / std::sqrt(static_cast<double>(l.in_dim));
    Tensor w({l.out_dim, l.in_dim});
    for (double& v : w.values()) v = rng.uniform(-bound, bound);
    Tensor b({l.out_dim});
    for (double& v : b.values()) v = rng.uniform(-bound, bound);
    out.emplace(l.name + ".weight", std::move(w));
    out.emplace(l.name + ".bias", std::move(b));
  }
  return out;
}

inline void check_params(const ParamSet& params, const NetSpec& spec) {
  auto shapes = spec.parameter_shapes();
  if (shapes.size() != params.size()) {
    throw DimensionError("network expects " + std::to_string(shapes.size()) +
                         " parameter tensors, got " + std::to_string(params.size()));
  }
  for (const auto& [name, shape] : shapes) {
    auto it = params.find(name);
    if (it == params.end()) throw DimensionError("missing parameter '" + name + "'");
    if (it->second.shape() != shape) {
      throw DimensionError("parameter '" + name + "' has shape " + shape_str(it->second.shape()) +
                           ", expected " + shape_str(shape));
    }
    if (!it->second.all_finite()) throw NumericError("parameter '" + name + "' is not finite");
  }
}

/// A mini-batch: features [B, D] and integer labels.
struct Batch {
  Tensor x;
  std::vector<std::size_t> y;
};

inline void check_batch(const Batch& batch, const NetSpec& spec) {
  if (batch.x.rank() != 2 || batch.x.dim(1) != spec.input_dim()) {
    throw DimensionError("batch features " + shape_str(batch.x.shape()) +
                         " do not match network input width " + std::to_string(spec.input_dim()));
  }
  if (batch.y.size() != batch.x.dim(0)) {
    throw DimensionError("batch has " + std::to_string(batch.x.dim(0)) + " rows but " +
                         std::to_string(batch.y.size()) + " labels");
  }
  for (std::size_t label : batch.y) {
    if (label >= spec.output_dim()) {
      throw DimensionError("label " + std::to_string(label) + " outside " +
                           std::to_string(spec.output_dim()) + " classes");
    }
  }
}

/// Output of the network on x [B, D]: logits when the spec ends in a head,
/// features otherwise.
inline ad::Var forward_graph(const NetSpec& spec, const VarParams& params, const ad::Var& x) {
  ad::Var h = x;
  for (const Layer& l : spec.layers) {
    switch (l.kind) {
      case LayerKind::dense: {
        const ad::Var& w = params.at(l.name + ".weight");
        const ad::Var& b = params.at(l.name + ".bias");
        h = ad::add(ad::matmul_nt(h, w), ad::repeat_rows(b, h.shape()[0]));
        break;
      }
      case LayerKind::relu: h = ad::relu(h); break;
      case LayerKind::leaky_relu: h = ad::leaky_relu(h, kLeakySlope); break;
      case LayerKind::softmax_xent: break;
    }
  }
  return h;
}

inline ad::Var loss_graph(const NetSpec& spec, const VarParams& params, const ad::Var& x,
                          const std::vector<std::size_t>& labels) {
  if (!spec.has_head()) throw DimensionError("loss requires a softmax_xent head");
  return ad::cross_entropy(forward_graph(spec, params, x), labels);
}

/// Mean cross-entropy of the batch.
inline double forward_loss(const ParamSet& params, const NetSpec& spec, const Batch& batch) {
  spec.validate();
  check_params(params, spec);
  check_batch(batch, spec);
  ad::NoGradGuard no_grad;
  double loss = loss_graph(spec, make_constants(params), ad::Var::constant(batch.x), batch.y)
                    .value()
                    .item();
  if (!std::isfinite(loss)) throw NumericError("loss is not finite");
  return loss;
}

inline Tensor forward_output(const ParamSet& params, const NetSpec& spec, const Tensor& x) {
  check_params(params, spec);
  ad::NoGradGuard no_grad;
  return forward_graph(spec, make_constants(params), ad::Var::constant(x)).value();
}

struct LossAndGrads {
  double loss = 0.0;
  ParamSet grads;
};

inline LossAndGrads value_and_grad_params(const ParamSet& params, const NetSpec& spec,
                                          const Batch& batch) {
  spec.validate();
  check_params(params, spec);
  check_batch(batch, spec);
  VarParams vars = make_variables(params);
  ad::Var loss = loss_graph(spec, vars, ad::Var::constant(batch.x), batch.y);
  auto grads = ad::grad(loss, var_list(vars));
  LossAndGrads out{loss.value().item(), values_of(zip_names(vars, grads))};
  if (!std::isfinite(out.loss)) throw NumericError("loss is not finite");
  return out;
}

inline ParamSet grad_params(const ParamSet& params, const NetSpec& spec, const Batch& batch) {
  return value_and_grad_params(params, spec, batch).grads;
}

/// d loss / d x, same shape as batch.x.
inline Tensor grad_input(const ParamSet& params, const NetSpec& spec, const Batch& batch) {
  spec.validate();
  check_params(params, spec);
  check_batch(batch, spec);
  ad::Var x = ad::Var::variable(batch.x);
  ad::Var loss = loss_graph(spec, make_constants(params), x, batch.y);
  return ad::grad(loss, {x}).front().value();
}

/// Differentiable parameter gradients for use inside nested objectives.
inline VarParams param_grad_graph(const NetSpec& spec, const VarParams& params, const ad::Var& x,
                                  const std::vector<std::size_t>& labels) {
  ad::Var loss = loss_graph(spec, params, x, labels);
  return zip_names(params, ad::grad(loss, var_list(params), /*create_graph=*/true));
}

struct NestedGrad {
  double value = 0.0;
  std::vector<Tensor> grads;
};

using NestedObjective = std::function<ad::Var(std::span<const ad::Var>)>;

/// Evaluates a scalar objective over `inputs` and returns its exact gradient
/// with respect to each input. The objective body may itself take gradients
/// with create_graph=true (e.g. via param_grad_graph); the outer gradient then
/// carries the second-order terms.
inline NestedGrad nested_grad(const NestedObjective& objective, const std::vector<Tensor>& inputs) {
  std::vector<ad::Var> vars;
  vars.reserve(inputs.size());
  for (const Tensor& t : inputs) vars.push_back(ad::Var::variable(t));
  ad::Var out = objective(vars);
  if (!out.defined() || out.value().size() != 1) {
    throw DimensionError("nested objective must return a scalar");
  }
  NestedGrad result;
  result.value = out.value().item();
  for (const ad::Var& g : ad::grad(out, vars)) result.grads.push_back(g.value());
  return result;
}

struct NestedGradXV {
  double value = 0.0;
  Tensor dx;
  Tensor dv;
};

inline NestedGradXV nested_grad(const std::function<ad::Var(const ad::Var&, const ad::Var&)>& objective,
                                const Tensor& x, const Tensor& v) {
  auto r = nested_grad([&](std::span<const ad::Var> in) { return objective(in[0], in[1]); },
                       std::vector<Tensor>{x, v});
  return {r.value, std::move(r.grads[0]), std::move(r.grads[1])};
}

}  // namespace hyperfl
