#pragma once

#include <cmath>
#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "hyperfl/autodiff.hpp"
#include "hyperfl/errors.hpp"
#include "hyperfl/network.hpp"
#include "hyperfl/params.hpp"
#include "hyperfl/rng.hpp"
#include "hyperfl/tensor.hpp"

namespace hyperfl {

/// One tensor the hypernetwork emits. `fan_in` is the input width of the
/// dense layer that owns it and only affects initialization.
struct TargetEntry {
  std::string name;
  Shape shape;
  std::size_t fan_in = 1;

  friend bool operator==(const TargetEntry&, const TargetEntry&) = default;
};

using TargetSpec = std::vector<TargetEntry>;

inline TargetSpec target_spec(const NetSpec& net) {
  net.validate();
  TargetSpec out;
  for (const Layer& l : net.layers) {
    if (l.kind != LayerKind::dense) continue;
    out.push_back({l.name + ".bias", Shape{l.out_dim}, l.in_dim});
    out.push_back({l.name + ".weight", Shape{l.out_dim, l.in_dim}, l.in_dim});
  }
  return out;
}

inline const std::string kHypernetPrefix = "hn.";

struct HypernetSpec {
  std::size_t embedding_dim = 64;
  std::size_t hidden_dim = 100;
  bool hidden_bias = true;
  LayerKind activation = LayerKind::relu;
  TargetSpec target;

  static std::string head_weight(const TargetEntry& t) { return "hn.head." + t.name + ".weight"; }
  static std::string head_bias(const TargetEntry& t) { return "hn.head." + t.name + ".bias"; }

  void validate() const {
    if (embedding_dim == 0 || hidden_dim == 0) {
      throw DimensionError("hypernetwork dimensions must be positive");
    }
    if (activation != LayerKind::relu && activation != LayerKind::leaky_relu) {
      throw DimensionError("hypernetwork hidden activation must be relu or leaky_relu");
    }
    if (target.empty()) throw DimensionError("hypernetwork has no target tensors");
  }

  std::vector<std::pair<std::string, Shape>> parameter_shapes() const {
    std::vector<std::pair<std::string, Shape>> out;
    out.emplace_back("hn.in.weight", Shape{hidden_dim, embedding_dim});
    if (hidden_bias) out.emplace_back("hn.in.bias", Shape{hidden_dim});
    for (const TargetEntry& t : target) {
      out.emplace_back(head_weight(t), Shape{shape_size(t.shape), hidden_dim});
      out.emplace_back(head_bias(t), Shape{shape_size(t.shape)});
    }
    return out;
  }

  friend bool operator==(const HypernetSpec&, const HypernetSpec&) = default;
};

inline void check_hypernet_params(const ParamSet& phi_h, const HypernetSpec& spec) {
  spec.validate();
  auto shapes = spec.parameter_shapes();
  if (shapes.size() != phi_h.size()) {
    throw DimensionError("hypernetwork expects " + std::to_string(shapes.size()) +
                         " tensors, got " + std::to_string(phi_h.size()));
  }
  for (const auto& [name, shape] : shapes) {
    auto it = phi_h.find(name);
    if (it == phi_h.end()) throw DimensionError("missing hypernetwork parameter '" + name + "'");
    if (it->second.shape() != shape) {
      throw DimensionError("hypernetwork parameter '" + name + "' has shape " +
                           shape_str(it->second.shape()) + ", expected " + shape_str(shape));
    }
  }
}

inline void check_embedding(const Tensor& v, const HypernetSpec& spec) {
  if (v.shape() != Shape{spec.embedding_dim}) {
    throw DimensionError("embedding has shape " + shape_str(v.shape()) + ", expected [" +
                         std::to_string(spec.embedding_dim) + "]");
  }
}

/// theta = h(v; phi_h): one hidden layer followed by one linear head per target
/// tensor, each head's output reshaped to the target shape.
/// Hidden activation [1, hidden] of the hypernetwork.
inline ad::Var hypernet_hidden(const ad::Var& v, const VarParams& phi_h, const HypernetSpec& spec) {
  const std::size_t d = spec.embedding_dim, hid = spec.hidden_dim;
  ad::Var z = ad::matmul_nt(ad::reshape(v, {1, d}), phi_h.at("hn.in.weight"));
  if (spec.hidden_bias) z = ad::add(z, ad::reshape(phi_h.at("hn.in.bias"), {1, hid}));
  return spec.activation == LayerKind::relu ? ad::relu(z) : ad::leaky_relu(z, kLeakySlope);
}

inline VarParams hypernet_graph(const ad::Var& v, const VarParams& phi_h, const HypernetSpec& spec) {
  ad::Var a = hypernet_hidden(v, phi_h, spec);

  VarParams theta;
  for (const TargetEntry& t : spec.target) {
    const std::size_t n = shape_size(t.shape);
    ad::Var out = ad::add(ad::matmul_nt(a, phi_h.at(HypernetSpec::head_weight(t))),
                          ad::reshape(phi_h.at(HypernetSpec::head_bias(t)), {1, n}));
    theta.emplace(t.name, ad::reshape(out, t.shape));
  }
  return theta;
}

inline ParamSet hypernet_forward(const Tensor& v, const ParamSet& phi_h, const HypernetSpec& spec) {
  check_hypernet_params(phi_h, spec);
  check_embedding(v, spec);
  ad::NoGradGuard no_grad;
  return values_of(hypernet_graph(ad::Var::constant(v), make_constants(phi_h), spec));
}

struct HypernetGrads {
  ParamSet d_phi_h;
  Tensor d_v;
};

/// Vector-Jacobian product of hypernet_forward: pulls d_theta back onto
/// phi_h and v.
inline HypernetGrads hypernet_backward(const ParamSet& d_theta, const Tensor& v,
                                       const ParamSet& phi_h, const HypernetSpec& spec) {
  check_hypernet_params(phi_h, spec);
  check_embedding(v, spec);
  if (d_theta.size() != spec.target.size()) {
    throw DimensionError("theta gradient has " + std::to_string(d_theta.size()) +
                         " tensors, target has " + std::to_string(spec.target.size()));
  }
  for (const TargetEntry& t : spec.target) {
    auto it = d_theta.find(t.name);
    if (it == d_theta.end() || it->second.shape() != t.shape) {
      throw DimensionError("theta gradient for '" + t.name + "' is missing or misshapen");
    }
  }

  ad::Var vv = ad::Var::variable(v);
  VarParams phi = make_variables(phi_h);
  VarParams theta = hypernet_graph(vv, phi, spec);
  ad::Var total = ad::Var::constant(Tensor::scalar(0.0));
  for (const auto& [name, th] : theta) {
    total = ad::add(total, ad::dot(th, ad::Var::constant(d_theta.at(name))));
  }
  std::vector<ad::Var> wrt = var_list(phi);
  wrt.push_back(vv);
  auto grads = ad::grad(total, wrt);
  HypernetGrads out;
  out.d_v = grads.back().value();
  grads.pop_back();
  out.d_phi_h = values_of(zip_names(phi, grads));
  return out;
}

struct HypernetInit {
  ParamSet phi_h;
  Tensor v;
};

/// Seeded initialization. The input layer uses Uniform(+-1/sqrt(d)); head
/// weights Uniform(+-1/sqrt(hidden) * 1/sqrt(fan_in)) and head biases
/// Uniform(+-1/sqrt(fan_in)), so the generated parameters start at the scale
/// of a directly initialized network. The embedding is a standard normal draw
/// that depends only on the seed, so every client starting from the same seed
/// gets the same embedding.
inline HypernetInit init_hypernet(const HypernetSpec& spec, std::uint64_t seed) {
  spec.validate();
  Rng rng(derive_seed(seed, {0x68797065726e6574ULL}));
  HypernetInit out;
  const double in_bound = 1.0 / std::sqrt(static_cast<double>(spec.embedding_dim));
  Tensor w_in({spec.hidden_dim, spec.embedding_dim});
  for (double& x : w_in.values()) x = rng.uniform(-in_bound, in_bound);
  out.phi_h.emplace("hn.in.weight", std::move(w_in));
  if (spec.hidden_bias) {
    Tensor b_in({spec.hidden_dim});
    for (double& x : b_in.values()) x = rng.uniform(-in_bound, in_bound);
    out.phi_h.emplace("hn.in.bias", std::move(b_in));
  }
  const double hidden_scale = 1.0 / std::sqrt(static_cast<double>(spec.hidden_dim));
  for (const TargetEntry& t : spec.target) {
    const double fan_scale = 1.0 / std::sqrt(static_cast<double>(t.fan_in));
    const std::size_t n = shape_size(t.shape);
    Tensor w({n, spec.hidden_dim});
    for (double& x : w.values()) x = rng.uniform(-1.0, 1.0) * hidden_scale * fan_scale;
    Tensor b({n});
    for (double& x : b.values()) x = rng.uniform(-fan_scale, fan_scale);
    out.phi_h.emplace(HypernetSpec::head_weight(t), std::move(w));
    out.phi_h.emplace(HypernetSpec::head_bias(t), std::move(b));
  }

  Rng emb_rng(derive_seed(seed, {0x656d62656464ULL}));
  out.v = Tensor({spec.embedding_dim});
  for (double& x : out.v.values()) x = emb_rng.normal();
  return out;
}

}  // namespace hyperfl
