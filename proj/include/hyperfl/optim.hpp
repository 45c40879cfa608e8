#pragma once

#include <string>
#include <utility>

#include "hyperfl/errors.hpp"
#include "hyperfl/params.hpp"

namespace hyperfl {

struct OptimConfig {
  double learning_rate = 0.01;
  double momentum = 0.0;
  double weight_decay = 0.0;

  void validate(const std::string& what = "optimizer") const {
    if (!(learning_rate >= 0.0)) throw ConfigError(what + ": learning rate must be nonnegative");
    if (!(momentum >= 0.0 && momentum < 1.0)) throw ConfigError(what + ": momentum must be in [0, 1)");
    if (!(weight_decay >= 0.0)) throw ConfigError(what + ": weight decay must be nonnegative");
  }

  friend bool operator==(const OptimConfig&, const OptimConfig&) = default;
};

/// Momentum buffers keyed like the parameters; empty until the first step.
struct MomentumState {
  ParamSet buffers;
};

struct SgdResult {
  ParamSet params;
  MomentumState state;
};

/// m' = momentum * m + (g + weight_decay * p);  p' = p - lr * m'
inline SgdResult sgd_step(const ParamSet& params, const ParamSet& grads, const OptimConfig& cfg,
                          const MomentumState& state) {
  require_same_layout(params, grads, "sgd_step");
  if (!all_finite(grads)) throw NumericError("sgd_step: gradient is not finite");
  const bool fresh = state.buffers.empty();
  if (!fresh) require_same_layout(params, state.buffers, "sgd_step state");

  SgdResult out{params, MomentumState{fresh ? zeros_like(params) : state.buffers}};
  auto ig = grads.begin();
  auto im = out.state.buffers.begin();
  for (auto& [name, p] : out.params) {
    auto pv = p.values();
    auto gv = ig->second.values();
    auto mv = im->second.values();
    for (std::size_t i = 0; i < pv.size(); ++i) {
      mv[i] = cfg.momentum * mv[i] + (gv[i] + cfg.weight_decay * pv[i]);
      pv[i] -= cfg.learning_rate * mv[i];
    }
    ++ig;
    ++im;
  }
  return out;
}

}  // namespace hyperfl
