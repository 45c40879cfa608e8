#pragma once

#include <cmath>
#include <map>
#include <string>
#include <string_view>

#include "hyperfl/autodiff.hpp"
#include "hyperfl/errors.hpp"
#include "hyperfl/tensor.hpp"

namespace hyperfl {

/// Named parameter tensors, iterated in name order.
using ParamSet = std::map<std::string, Tensor>;
using VarParams = std::map<std::string, ad::Var>;

inline void require_same_layout(const ParamSet& a, const ParamSet& b, const char* what) {
  if (a.size() != b.size()) {
    throw DimensionError(std::string(what) + ": parameter sets differ in size (" +
                         std::to_string(a.size()) + " vs " + std::to_string(b.size()) + ")");
  }
  auto ib = b.begin();
  for (const auto& [name, t] : a) {
    if (ib->first != name) {
      throw DimensionError(std::string(what) + ": parameter '" + name + "' vs '" + ib->first + "'");
    }
    if (ib->second.shape() != t.shape()) {
      throw DimensionError(std::string(what) + ": parameter '" + name + "' has shape " +
                           shape_str(t.shape()) + " vs " + shape_str(ib->second.shape()));
    }
    ++ib;
  }
}

inline double sq_norm(const ParamSet& p) {
  double s = 0.0;
  for (const auto& [_, t] : p) s += t.sq_norm();
  return s;
}

inline double global_norm(const ParamSet& p) { return std::sqrt(sq_norm(p)); }

inline bool all_finite(const ParamSet& p) {
  for (const auto& [_, t] : p) {
    if (!t.all_finite()) return false;
  }
  return true;
}

inline ParamSet zeros_like(const ParamSet& p) {
  ParamSet out;
  for (const auto& [name, t] : p) out.emplace(name, Tensor(t.shape()));
  return out;
}

/// a + c * b
inline ParamSet axpy(const ParamSet& a, double c, const ParamSet& b) {
  require_same_layout(a, b, "axpy");
  ParamSet out = a;
  auto ib = b.begin();
  for (auto& [_, t] : out) {
    auto bv = ib->second.values();
    auto tv = t.values();
    for (std::size_t i = 0; i < tv.size(); ++i) tv[i] += c * bv[i];
    ++ib;
  }
  return out;
}

inline ParamSet difference(const ParamSet& a, const ParamSet& b) {
  require_same_layout(a, b, "difference");
  ParamSet out = a;
  auto ib = b.begin();
  for (auto& [_, t] : out) {
    auto bv = ib->second.values();
    auto tv = t.values();
    for (std::size_t i = 0; i < tv.size(); ++i) tv[i] -= bv[i];
    ++ib;
  }
  return out;
}

inline ParamSet scaled(const ParamSet& a, double c) {
  ParamSet out = a;
  for (auto& [_, t] : out)
    for (double& v : t.values()) v *= c;
  return out;
}

inline double distance(const ParamSet& a, const ParamSet& b) {
  return global_norm(difference(a, b));
}

inline double dot(const ParamSet& a, const ParamSet& b) {
  require_same_layout(a, b, "dot");
  double s = 0.0;
  auto ib = b.begin();
  for (const auto& [_, t] : a) {
    s += dot(t, ib->second);
    ++ib;
  }
  return s;
}

/// Entries whose name starts with `prefix`.
inline ParamSet with_prefix(const ParamSet& p, std::string_view prefix) {
  ParamSet out;
  for (const auto& [name, t] : p) {
    if (std::string_view(name).starts_with(prefix)) out.emplace(name, t);
  }
  return out;
}

inline ParamSet merged(const ParamSet& a, const ParamSet& b) {
  ParamSet out = a;
  for (const auto& [name, t] : b) {
    if (!out.emplace(name, t).second) {
      throw DimensionError("merged: duplicate parameter '" + name + "'");
    }
  }
  return out;
}

inline VarParams make_variables(const ParamSet& p) {
  VarParams out;
  for (const auto& [name, t] : p) out.emplace(name, ad::Var::variable(t));
  return out;
}

inline VarParams make_constants(const ParamSet& p) {
  VarParams out;
  for (const auto& [name, t] : p) out.emplace(name, ad::Var::constant(t));
  return out;
}

inline ParamSet values_of(const VarParams& p) {
  ParamSet out;
  for (const auto& [name, v] : p) out.emplace(name, v.value());
  return out;
}

inline std::vector<ad::Var> var_list(const VarParams& p) {
  std::vector<ad::Var> out;
  out.reserve(p.size());
  for (const auto& [_, v] : p) out.push_back(v);
  return out;
}

/// Zips gradients returned by ad::grad back onto parameter names.
inline VarParams zip_names(const VarParams& names, const std::vector<ad::Var>& grads) {
  VarParams out;
  auto it = grads.begin();
  for (const auto& [name, _] : names) out.emplace(name, *it++);
  return out;
}

}  // namespace hyperfl
