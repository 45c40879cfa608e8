#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <map>
#include <numeric>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "hyperfl/autodiff.hpp"
#include "hyperfl/data.hpp"
#include "hyperfl/errors.hpp"
#include "hyperfl/fedsim.hpp"
#include "hyperfl/hypernet.hpp"
#include "hyperfl/metrics.hpp"
#include "hyperfl/network.hpp"
#include "hyperfl/params.hpp"
#include "hyperfl/rng.hpp"

namespace hyperfl {

enum class GradLoss { cosine, l2 };
enum class AttackInit { zeros, uniform, gray };
enum class AttackOptimizer { sgd, adam };

struct AttackConfig {
  std::size_t iterations = 10000;
  double step_size = 0.1;
  GradLoss loss = GradLoss::cosine;
  double tv_alpha = 1e-6;
  AttackInit init = AttackInit::uniform;
  AttackOptimizer optimizer = AttackOptimizer::adam;
  std::uint64_t seed = 0;
  /// Project the image onto [0, 1] after every step.
  bool clamp = true;
  std::size_t trace_every = 100;
  // Embedding recovery (HyperFL lower level).
  std::size_t embedding_iterations = 1000;
  double embedding_step = 0.01;

  void validate() const {
    if (!(step_size >= 0.0) || !(embedding_step >= 0.0)) throw ConfigError("attack step sizes must be nonnegative");
    if (!(tv_alpha >= 0.0)) throw ConfigError("attack tv_alpha must be nonnegative");
    if (trace_every == 0) throw ConfigError("attack trace_every must be positive");
  }

  friend bool operator==(const AttackConfig&, const AttackConfig&) = default;
};

NLOHMANN_JSON_SERIALIZE_ENUM(GradLoss, {{GradLoss::cosine, "cosine"}, {GradLoss::l2, "l2"}})
NLOHMANN_JSON_SERIALIZE_ENUM(AttackInit,
                             {{AttackInit::zeros, "zeros"}, {AttackInit::uniform, "uniform"}, {AttackInit::gray, "gray"}})
NLOHMANN_JSON_SERIALIZE_ENUM(AttackOptimizer, {{AttackOptimizer::sgd, "sgd"}, {AttackOptimizer::adam, "adam"}})

// ---------------------------------------------------------------------------
// Transcripts

/// What an honest-but-curious server sees for one batch-1 client step. The
/// label is known to the attacker.
struct TranscriptView {
  Algorithm algorithm = Algorithm::fedavg;
  /// Full model spec (extractor followed by classifier).
  NetSpec model;
  /// HyperFL only: the extractor spec and the hypernetwork.
  NetSpec extractor;
  HypernetSpec hypernet;
  /// Parameters the server knows: the full model, or phi_h for HyperFL.
  ParamSet known;
  /// Loss gradient with respect to `known`.
  ParamSet observed;
  std::size_t label = 0;
  std::size_t height = 0;
  std::size_t width = 0;
};

/// Ground truth kept for scoring. Attack functions never receive it.
struct TranscriptSecrets {
  Tensor x;
  Tensor v;
  ParamSet phi_c;
};

struct Transcript {
  TranscriptView view;
  TranscriptSecrets secrets;
};

namespace detail {
inline Batch single(const Tensor& x, std::size_t label) { return Batch{x.reshaped({1, x.size()}), {label}}; }
}  // namespace detail

inline Transcript fedavg_transcript(const ParamSet& model, const NetSpec& spec, const Tensor& x, std::size_t label,
                                    std::size_t height, std::size_t width) {
  Transcript t;
  t.view = {Algorithm::fedavg, spec, {}, {}, model, grad_params(model, spec, detail::single(x, label)),
            label, height, width};
  t.secrets.x = x.reshaped({1, x.size()});
  return t;
}

/// The server generated theta = h(v; phi) itself, so it knows the whole model.
inline Transcript pfedhn_transcript(const ParamSet& phi, const Tensor& v, const HypernetSpec& hspec,
                                    const NetSpec& spec, const Tensor& x, std::size_t label, std::size_t height,
                                    std::size_t width) {
  ParamSet theta = hypernet_forward(v, phi, hspec);
  Transcript t;
  t.view = {Algorithm::pfedhn, spec, {}, {}, theta, grad_params(theta, spec, detail::single(x, label)),
            label, height, width};
  t.secrets.x = x.reshaped({1, x.size()});
  t.secrets.v = v;
  return t;
}

/// Only phi_h and its gradient are visible; v and phi_c stay secret.
inline Transcript hyperfl_transcript(const ParamSet& phi_h, const Tensor& v, const ParamSet& phi_c,
                                     const HypernetSpec& hspec, const NetSpec& extractor, const NetSpec& classifier,
                                     const Tensor& x, std::size_t label, std::size_t height, std::size_t width) {
  const NetSpec full = concat(extractor, classifier);
  Transcript t;
  t.view.algorithm = Algorithm::hyperfl;
  t.view.model = full;
  t.view.extractor = extractor;
  t.view.hypernet = hspec;
  t.view.known = phi_h;
  t.view.observed = hypernet_grads(v, phi_h, phi_c, hspec, full, detail::single(x, label)).d_phi_h;
  t.view.label = label;
  t.view.height = height;
  t.view.width = width;
  t.secrets = {x.reshaped({1, x.size()}), v, phi_c};
  return t;
}

// ---------------------------------------------------------------------------
// Image prior

/// Anisotropic total variation of an H x W image.
inline double total_variation(const Tensor& img) {
  if (img.rank() != 2) throw DimensionError("total_variation expects an [H, W] image, got " + shape_str(img.shape()));
  const std::size_t h = img.dim(0), w = img.dim(1);
  double tv = 0.0;
  for (std::size_t r = 0; r < h; ++r) {
    for (std::size_t c = 0; c < w; ++c) {
      if (r + 1 < h) tv += std::fabs(img.at(r + 1, c) - img.at(r, c));
      if (c + 1 < w) tv += std::fabs(img.at(r, c + 1) - img.at(r, c));
    }
  }
  return tv;
}

/// Differentiable TV of a [1, H*W] row image, via a constant difference
/// matrix.
class TvGraph {
 public:
  TvGraph(std::size_t h, std::size_t w) : n_(h * w) {
    if (h == 0 || w == 0) throw DimensionError("TV needs a nonempty image");
    const std::size_t edges = h * (w - 1) + (h - 1) * w;
    Tensor d({n_, std::max<std::size_t>(edges, 1)});
    std::size_t e = 0;
    for (std::size_t r = 0; r < h; ++r) {
      for (std::size_t c = 0; c < w; ++c) {
        if (c + 1 < w) {
          d.at(r * w + c + 1, e) = 1.0;
          d.at(r * w + c, e++) = -1.0;
        }
        if (r + 1 < h) {
          d.at((r + 1) * w + c, e) = 1.0;
          d.at(r * w + c, e++) = -1.0;
        }
      }
    }
    diff_ = ad::Var::constant(std::move(d));
  }

  ad::Var operator()(const ad::Var& x_row) const { return ad::sum(ad::abs(ad::matmul(x_row, diff_))); }

 private:
  std::size_t n_;
  ad::Var diff_;
};

// ---------------------------------------------------------------------------
// Optimizer

/// Adam (beta1 0.9, beta2 0.999, eps 1e-8) or plain gradient descent over a
/// list of tensors. The step size drops by 10x at 3/8, 5/8 and 7/8 of the
/// budget.
class AttackOptimizerState {
 public:
  AttackOptimizerState(AttackOptimizer kind, double lr, std::size_t budget) : kind_(kind), lr_(lr), budget_(budget) {}

  double rate(std::size_t it) const {
    double lr = lr_;
    for (std::size_t num : {3, 5, 7}) {
      if (budget_ && it >= budget_ * num / 8) lr *= 0.1;
    }
    return lr;
  }

  void step(std::vector<Tensor>& params, const std::vector<Tensor>& grads, std::size_t it) {
    const double lr = rate(it);
    if (kind_ == AttackOptimizer::sgd) {
      for (std::size_t k = 0; k < params.size(); ++k)
        for (std::size_t i = 0; i < params[k].size(); ++i) params[k][i] -= lr * grads[k][i];
      return;
    }
    if (m_.empty()) {
      for (const Tensor& p : params) {
        m_.emplace_back(p.shape());
        v_.emplace_back(p.shape());
      }
    }
    ++t_;
    const double b1 = 0.9, b2 = 0.999, eps = 1e-8;
    const double c1 = 1.0 - std::pow(b1, static_cast<double>(t_));
    const double c2 = 1.0 - std::pow(b2, static_cast<double>(t_));
    for (std::size_t k = 0; k < params.size(); ++k) {
      for (std::size_t i = 0; i < params[k].size(); ++i) {
        const double g = grads[k][i];
        m_[k][i] = b1 * m_[k][i] + (1 - b1) * g;
        v_[k][i] = b2 * v_[k][i] + (1 - b2) * g * g;
        params[k][i] -= lr * (m_[k][i] / c1) / (std::sqrt(v_[k][i] / c2) + eps);
      }
    }
  }

 private:
  AttackOptimizer kind_;
  double lr_;
  std::size_t budget_;
  std::size_t t_ = 0;
  std::vector<Tensor> m_, v_;
};

struct TracePoint {
  std::size_t iteration = 0;
  double loss = 0.0;
  double best_loss = 0.0;
};

struct InversionResult {
  Tensor x;  // [1, D]
  double best_loss = 0.0;
  std::vector<TracePoint> trace;
};

namespace detail {

inline Tensor initial_image(std::size_t d, const AttackConfig& cfg) {
  Tensor x({1, d});
  switch (cfg.init) {
    case AttackInit::zeros: break;
    case AttackInit::gray: x = Tensor({1, d}, 0.5); break;
    case AttackInit::uniform: {
      Rng rng(derive_seed(cfg.seed, {0x696e6974ULL}));
      for (double& v : x.values()) v = rng.uniform(0.0, 1.0);
      break;
    }
  }
  return x;
}

/// Minimizes objective(x) from x0; keeps the lowest-loss iterate seen.
inline InversionResult minimize_image(const NestedObjective& objective, Tensor x0, const AttackConfig& cfg) {
  AttackOptimizerState opt(cfg.optimizer, cfg.step_size, cfg.iterations);
  InversionResult out;
  out.x = x0;
  out.best_loss = INFINITY;
  std::vector<Tensor> x{std::move(x0)};
  for (std::size_t it = 0;; ++it) {
    NestedGrad g = nested_grad(objective, x);
    if (!std::isfinite(g.value)) throw NumericError("attack objective is not finite");
    if (g.value < out.best_loss) {
      out.best_loss = g.value;
      out.x = x[0];
    }
    if (it % cfg.trace_every == 0 || it == cfg.iterations) out.trace.push_back({it, g.value, out.best_loss});
    if (it == cfg.iterations) break;
    opt.step(x, g.grads, it);
    if (cfg.clamp)
      for (double& v : x[0].values()) v = std::clamp(v, 0.0, 1.0);
  }
  return out;
}

inline double max_abs_error(const Tensor& a, const Tensor& b) {
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::fabs(a[i] - b[i]));
  return m;
}

inline std::pair<std::string, std::string> first_layer_names(const NetSpec& spec) {
  for (const Layer& l : spec.layers) {
    if (l.kind == LayerKind::dense) return {l.name + ".weight", l.name + ".bias"};
  }
  throw DimensionError("network has no dense layer");
}

}  // namespace detail

/// Gradient inversion against a transcript that exposes the full model and
/// its gradient: minimize L_grad(x) + alpha * TV(x) over x.
inline InversionResult ig_attack(const TranscriptView& view, const AttackConfig& cfg) {
  cfg.validate();
  if (view.algorithm == Algorithm::hyperfl) {
    throw CapabilityError("ig_attack needs full-model gradients; HyperFL transcripts only expose phi_h");
  }
  check_params(view.known, view.model);
  require_same_layout(view.known, view.observed, "ig_attack observed gradient");
  const std::size_t d = view.model.input_dim();
  if (view.height * view.width != d) throw DimensionError("transcript image size differs from model input");

  const TvGraph tv(view.height, view.width);
  double target_sq = 0.0;
  for (const auto& [_, t] : view.observed) target_sq += t.sq_norm();
  const double target_norm = std::sqrt(target_sq);
  if (cfg.loss == GradLoss::cosine && target_norm == 0.0) {
    throw DegenerateGradientError("observed gradient is zero; cosine matching is undefined");
  }
  const ParamSet& known = view.known;
  const ParamSet& observed = view.observed;
  const std::vector<std::size_t> labels{view.label};

  auto objective = [&](std::span<const ad::Var> in) {
    const ad::Var& x = in[0];
    VarParams g = param_grad_graph(view.model, make_variables(known), x, labels);
    ad::Var match;
    if (cfg.loss == GradLoss::cosine) {
      ad::Var inner = ad::Var::constant(Tensor::scalar(0.0));
      ad::Var self = ad::Var::constant(Tensor::scalar(0.0));
      for (const auto& [name, gv] : g) {
        inner = ad::add(inner, ad::dot(gv, ad::Var::constant(observed.at(name))));
        self = ad::add(self, ad::sq_norm(gv));
      }
      ad::Var denom = ad::scale(ad::sqrt(ad::add_scalar_const(self, 1e-30)), target_norm);
      match = ad::add_scalar_const(ad::neg(ad::div(inner, denom)), 1.0);
    } else {
      match = ad::Var::constant(Tensor::scalar(0.0));
      for (const auto& [name, gv] : g) {
        match = ad::add(match, ad::sq_norm(ad::sub(gv, ad::Var::constant(observed.at(name)))));
      }
    }
    if (cfg.tv_alpha > 0.0) match = ad::add(match, ad::scale(tv(x), cfg.tv_alpha));
    return match;
  };
  return detail::minimize_image(objective, detail::initial_image(d, cfg), cfg);
}

/// Batch-1 dense layer: dL/dW = (dL/db) x^T, so x = row i of dL/dW divided by
/// dL/db[i]. Uses the largest-magnitude bias gradient entry.
inline Tensor analytic_input_recovery(const Tensor& d_weight, const Tensor& d_bias) {
  if (d_weight.rank() != 2 || d_bias.rank() != 1 || d_weight.dim(0) != d_bias.dim(0)) {
    throw DimensionError("analytic recovery needs [out, in] weight and [out] bias gradients");
  }
  std::size_t best = 0;
  for (std::size_t i = 1; i < d_bias.size(); ++i) {
    if (std::fabs(d_bias[i]) > std::fabs(d_bias[best])) best = i;
  }
  if (!(std::fabs(d_bias[best]) > 1e-10)) {
    throw DegenerateGradientError("every first-layer bias gradient is below 1e-10");
  }
  const std::size_t n = d_weight.dim(1);
  Tensor x({1, n});
  for (std::size_t j = 0; j < n; ++j) x[j] = d_weight.at(best, j) / d_bias[best];
  return x;
}

inline Tensor analytic_input_recovery(const TranscriptView& view) {
  if (view.algorithm == Algorithm::hyperfl) {
    throw CapabilityError("analytic recovery needs first-layer gradients");
  }
  auto [w, b] = detail::first_layer_names(view.model);
  return analytic_input_recovery(view.observed.at(w), view.observed.at(b));
}

// ---------------------------------------------------------------------------
// HyperFL

struct EmbeddingGuess {
  Tensor v;
  /// Stand-in for dL/dtheta, keyed like the target tensors.
  ParamSet u;
};

struct EmbeddingRecovery {
  Tensor v;
  ParamSet theta;
  ParamSet u;
  /// Final gradient-matching loss, normalized by the observed gradient's
  /// squared norm.
  double residual = 0.0;
  std::vector<TracePoint> trace;
};

namespace detail {
/// || J_phi(v)^T u - observed ||^2 / ||observed||^2, differentiable in (v, u).
/// Head blocks are expanded so the [P, hidden] outer product u a^T is never
/// formed: ||u a^T - G||^2 = |u|^2 |a|^2 - 2 u^T G a + ||G||^2.
struct EmbeddingMatchConstants {
  VarParams phi;
  VarParams observed;
  std::map<std::string, double> head_sq;

  explicit EmbeddingMatchConstants(const TranscriptView& view)
      : phi(make_constants(view.known)), observed(make_constants(view.observed)) {
    for (const auto& [name, t] : view.observed) head_sq.emplace(name, t.sq_norm());
  }
};

inline ad::Var embedding_match(const ad::Var& v, const VarParams& u, const TranscriptView& view,
                               const EmbeddingMatchConstants& consts, double inv_norm) {
  const HypernetSpec& hs = view.hypernet;
  VarParams phi = consts.phi;
  VarParams input_layer;
  for (const char* name : {"hn.in.weight", "hn.in.bias"}) {
    auto it = view.known.find(name);
    if (it == view.known.end()) continue;
    input_layer.emplace(name, ad::Var::variable(it->second));
    phi[name] = input_layer.at(name);
  }
  ad::Var a = hypernet_hidden(v, phi, hs);
  VarParams theta = hypernet_graph(v, phi, hs);
  ad::Var s = ad::Var::constant(Tensor::scalar(0.0));
  for (const auto& [name, th] : theta) s = ad::add(s, ad::dot(th, u.at(name)));
  VarParams pred = zip_names(input_layer, ad::grad(s, var_list(input_layer), /*create_graph=*/true));

  ad::Var loss = ad::Var::constant(Tensor::scalar(0.0));
  for (const auto& [name, p] : pred) {
    loss = ad::add(loss, ad::sq_norm(ad::sub(p, consts.observed.at(name))));
  }
  const ad::Var a_sq = ad::sq_norm(a);
  for (const TargetEntry& t : hs.target) {
    const std::string wname = HypernetSpec::head_weight(t);
    const ad::Var& ut = u.at(t.name);
    const std::size_t n = shape_size(t.shape);
    ad::Var cross = ad::dot(ad::reshape(ut, {n, 1}), ad::matmul_nt(consts.observed.at(wname), a));
    ad::Var w_term =
        ad::add_scalar_const(ad::sub(ad::mul(ad::sq_norm(ut), a_sq), ad::scale(cross, 2.0)), consts.head_sq.at(wname));
    ad::Var b_term = ad::sq_norm(ad::sub(ut, ad::reshape(consts.observed.at(HypernetSpec::head_bias(t)), t.shape)));
    loss = ad::add(loss, ad::add(w_term, b_term));
  }
  return ad::scale(loss, inv_norm);
}
}  // namespace detail

/// Lower level of the HyperFL attack: search for an embedding v and an
/// upstream gradient u whose pullback through the hypernetwork reproduces
/// the observed phi_h gradient. Failure shows up as a large residual.
inline EmbeddingRecovery recover_embedding(const TranscriptView& view, const AttackConfig& cfg,
                                           const std::optional<EmbeddingGuess>& init = std::nullopt) {
  cfg.validate();
  if (view.algorithm != Algorithm::hyperfl) throw CapabilityError("recover_embedding needs a HyperFL transcript");
  check_hypernet_params(view.known, view.hypernet);
  require_same_layout(view.known, view.observed, "recover_embedding observed gradient");
  const double obs_sq = sq_norm(view.observed);
  const double inv_norm = obs_sq > 0.0 ? 1.0 / obs_sq : 1.0;

  EmbeddingGuess start;
  if (init) {
    start = *init;
  } else {
    Rng rng(derive_seed(cfg.seed, {0x656d6264ULL}));
    start.v = Tensor({view.hypernet.embedding_dim});
    for (double& x : start.v.values()) x = rng.normal();
    for (const TargetEntry& t : view.hypernet.target) {
      Tensor u(t.shape);
      for (double& x : u.values()) x = 1e-3 * rng.normal();
      start.u.emplace(t.name, std::move(u));
    }
  }
  check_embedding(start.v, view.hypernet);

  const detail::EmbeddingMatchConstants consts(view);
  std::vector<std::string> u_names;
  std::vector<Tensor> vars{start.v};
  for (const auto& [name, t] : start.u) {
    u_names.push_back(name);
    vars.push_back(t);
  }
  auto objective = [&](std::span<const ad::Var> in) {
    VarParams u;
    for (std::size_t k = 0; k < u_names.size(); ++k) u.emplace(u_names[k], in[k + 1]);
    return detail::embedding_match(in[0], u, view, consts, inv_norm);
  };

  AttackOptimizerState opt(cfg.optimizer, cfg.embedding_step, cfg.embedding_iterations);
  EmbeddingRecovery out;
  double best = INFINITY;
  std::vector<Tensor> best_vars = vars;
  for (std::size_t it = 0;; ++it) {
    NestedGrad g = nested_grad(objective, vars);
    if (g.value < best) {
      best = g.value;
      best_vars = vars;
    }
    if (it % cfg.trace_every == 0 || it == cfg.embedding_iterations) out.trace.push_back({it, g.value, best});
    if (it == cfg.embedding_iterations) break;
    opt.step(vars, g.grads, it);
  }
  out.v = best_vars[0];
  for (std::size_t k = 0; k < u_names.size(); ++k) out.u.emplace(u_names[k], best_vars[k + 1]);
  out.theta = hypernet_forward(out.v, view.known, view.hypernet);
  out.residual = best;
  return out;
}

struct BilevelResult {
  InversionResult inversion;
  EmbeddingRecovery embedding;
};

/// Mean extractor output over `aux` rows labelled `label` (all rows when none
/// match). Empty when aux is empty.
inline Tensor feature_prototype(const ParamSet& theta, const NetSpec& extractor, const Dataset& aux,
                                std::size_t label) {
  if (aux.size() == 0) return {};
  std::vector<std::size_t> rows;
  for (std::size_t i = 0; i < aux.size(); ++i)
    if (aux.y[i] == label) rows.push_back(i);
  if (rows.empty()) {
    rows.resize(aux.size());
    std::iota(rows.begin(), rows.end(), 0);
  }
  Tensor feats = forward_output(theta, extractor, aux.subset(rows).x);
  const std::size_t k = feats.dim(1);
  Tensor proto({1, k});
  for (std::size_t r = 0; r < rows.size(); ++r)
    for (std::size_t j = 0; j < k; ++j) proto[j] += feats.at(r, j) / static_cast<double>(rows.size());
  return proto;
}

/// The HyperFL attack: recover (v, theta) from the phi_h gradient, then
/// invert the generated extractor by matching its features to the class
/// prototype of the attacker's public auxiliary data, with a TV prior, from a
/// gray start. The classifier is never available to the attacker.
inline BilevelResult hyperfl_bilevel_attack(const TranscriptView& view, const Dataset& aux, const AttackConfig& cfg) {
  BilevelResult out;
  out.embedding = recover_embedding(view, cfg);
  const ParamSet& theta = out.embedding.theta;
  const std::size_t d = view.extractor.input_dim();
  if (view.height * view.width != d) throw DimensionError("transcript image size differs from model input");
  const Tensor proto = feature_prototype(theta, view.extractor, aux, view.label);
  const double proto_sq = proto.size() ? std::max(proto.sq_norm(), 1e-12) : 1.0;
  const TvGraph tv(view.height, view.width);

  auto objective = [&](std::span<const ad::Var> in) {
    const ad::Var& x = in[0];
    ad::Var loss = ad::Var::constant(Tensor::scalar(0.0));
    if (proto.size()) {
      ad::Var f = forward_graph(view.extractor, make_constants(theta), x);
      loss = ad::scale(ad::sq_norm(ad::sub(f, ad::Var::constant(proto))), 1.0 / proto_sq);
    }
    if (cfg.tv_alpha > 0.0) loss = ad::add(loss, ad::scale(tv(x), cfg.tv_alpha));
    return loss;
  };
  AttackConfig inv = cfg;
  inv.init = AttackInit::gray;
  out.inversion = detail::minimize_image(objective, detail::initial_image(d, inv), inv);
  return out;
}

/// Observation: with batch size 1 the gradient of each head's bias equals
/// dL/dtheta for that target tensor, so a HyperFL transcript still carries the
/// generated model's gradient. Returned for analysis; the bilevel attack above
/// does not use it.
inline ParamSet exposed_theta_gradient(const TranscriptView& view) {
  if (view.algorithm != Algorithm::hyperfl) throw CapabilityError("exposed_theta_gradient needs a HyperFL transcript");
  ParamSet out;
  for (const TargetEntry& t : view.hypernet.target) {
    out.emplace(t.name, view.observed.at(HypernetSpec::head_bias(t)).reshaped(t.shape));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Reports

struct SampleResult {
  std::size_t index = 0;
  std::size_t label = 0;
  std::string method;
  double psnr = 0.0;
  double ssim = 0.0;
  std::optional<double> analytic_error;
  std::optional<double> analytic_psnr;
  std::optional<double> embedding_residual;
  double final_loss = 0.0;
  std::vector<TracePoint> trace;
  Tensor reconstruction;
};

inline double image_ssim(const Tensor& a, const Tensor& b, std::size_t h, std::size_t w) {
  const SsimOptions opt;
  if (h < opt.window || w < opt.window) return NAN;
  return ssim(a.reshaped({h, w}), b.reshaped({h, w}), opt);
}

/// Runs the attack that matches the transcript's algorithm and scores it
/// against the secrets.
inline SampleResult attack_sample(const Transcript& t, const Dataset& aux, const AttackConfig& cfg, std::size_t index) {
  SampleResult r;
  r.index = index;
  r.label = t.view.label;
  const Tensor truth = t.secrets.x;
  if (t.view.algorithm == Algorithm::hyperfl) {
    BilevelResult b = hyperfl_bilevel_attack(t.view, aux, cfg);
    r.method = "hyperfl_bilevel";
    r.reconstruction = b.inversion.x;
    r.final_loss = b.inversion.best_loss;
    r.trace = b.inversion.trace;
    r.embedding_residual = b.embedding.residual;
  } else {
    InversionResult ig = ig_attack(t.view, cfg);
    r.method = "ig";
    r.reconstruction = ig.x;
    r.final_loss = ig.best_loss;
    r.trace = ig.trace;
    try {
      Tensor exact = analytic_input_recovery(t.view);
      r.analytic_error = detail::max_abs_error(exact, truth);
      r.analytic_psnr = psnr(exact, truth);
    } catch (const DegenerateGradientError&) {
    }
  }
  r.psnr = psnr(r.reconstruction, truth);
  r.ssim = image_ssim(r.reconstruction, truth, t.view.height, t.view.width);
  return r;
}

inline nlohmann::json to_json(const AttackConfig& c) {
  return {{"iterations", c.iterations},
          {"step_size", c.step_size},
          {"loss", c.loss},
          {"tv_alpha", c.tv_alpha},
          {"init", c.init},
          {"optimizer", c.optimizer},
          {"seed", c.seed},
          {"clamp", c.clamp},
          {"trace_every", c.trace_every},
          {"embedding_iterations", c.embedding_iterations},
          {"embedding_step", c.embedding_step}};
}

struct AttackReport {
  AttackConfig config;
  std::string algorithm;
  std::vector<SampleResult> samples;

  nlohmann::json to_json() const {
    nlohmann::json arr = nlohmann::json::array();
    for (const SampleResult& s : samples) {
      nlohmann::json trace = nlohmann::json::array();
      for (const TracePoint& p : s.trace) trace.push_back({p.iteration, p.loss, p.best_loss});
      nlohmann::json j = {{"index", s.index},
                          {"label", s.label},
                          {"method", s.method},
                          {"psnr", s.psnr},
                          {"ssim", std::isfinite(s.ssim) ? nlohmann::json(s.ssim) : nlohmann::json()},
                          {"final_loss", s.final_loss},
                          {"trace", trace},
                          {"reconstruction", s.reconstruction.vec()}};
      j["analytic_error"] = s.analytic_error ? nlohmann::json(*s.analytic_error) : nlohmann::json();
      j["analytic_psnr"] = s.analytic_psnr ? nlohmann::json(*s.analytic_psnr) : nlohmann::json();
      j["embedding_residual"] = s.embedding_residual ? nlohmann::json(*s.embedding_residual) : nlohmann::json();
      arr.push_back(std::move(j));
    }
    return {{"algorithm", algorithm}, {"config", hyperfl::to_json(config)}, {"samples", arr}};
  }

  static constexpr const char* kCsvHeader = "sample,label,method,psnr,ssim,analytic_error,analytic_psnr,embedding_residual,final_loss";

  std::string summary_csv() const {
    std::string out = std::string(kCsvHeader) + "\n";
    auto num = [](std::optional<double> v) {
      if (!v || !std::isfinite(*v)) return std::string();
      char buf[40];
      std::snprintf(buf, sizeof buf, "%.10g", *v);
      return std::string(buf);
    };
    for (const SampleResult& s : samples) {
      out += std::to_string(s.index) + "," + std::to_string(s.label) + "," + s.method + "," + num(s.psnr) + "," +
             num(s.ssim) + "," + num(s.analytic_error) + "," + num(s.analytic_psnr) + "," +
             num(s.embedding_residual) + "," + num(s.final_loss) + "\n";
    }
    return out;
  }
};

}  // namespace hyperfl
