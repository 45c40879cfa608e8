#pragma once

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdint>
#include <exception>
#include <functional>
#include <limits>
#include <memory>
#include <mutex>
#include <numeric>
#include <string>
#include <thread>
#include <vector>

#include <json.hpp>

#include "hyperfl/checkpoint.hpp"
#include "hyperfl/data.hpp"
#include "hyperfl/errors.hpp"
#include "hyperfl/hypernet.hpp"
#include "hyperfl/metrics.hpp"
#include "hyperfl/network.hpp"
#include "hyperfl/optim.hpp"
#include "hyperfl/params.hpp"
#include "hyperfl/partition.hpp"
#include "hyperfl/rng.hpp"

namespace hyperfl {

enum class Algorithm { hyperfl, fedavg, local, dp_fedavg, pfedhn };

inline const char* to_string(Algorithm a) {
  switch (a) {
    case Algorithm::hyperfl: return "hyperfl";
    case Algorithm::fedavg: return "fedavg";
    case Algorithm::local: return "local";
    case Algorithm::dp_fedavg: return "dp-fedavg";
    case Algorithm::pfedhn: return "pfedhn";
  }
  return "?";
}

inline Algorithm algorithm_from(const std::string& s) {
  for (Algorithm a : {Algorithm::hyperfl, Algorithm::fedavg, Algorithm::local, Algorithm::dp_fedavg,
                      Algorithm::pfedhn}) {
    if (s == to_string(a)) return a;
  }
  throw ConfigError("unknown algorithm '" + s + "'");
}

struct RoundConfig {
  /// Step-2 epochs for HyperFL; local epochs for every other algorithm.
  std::size_t local_epochs = 5;
  /// Step-1 (classifier) epochs for HyperFL.
  std::size_t classifier_epochs = 1;
  OptimConfig eta_g{0.1, 0.5, 5e-4};
  OptimConfig eta_h{0.01, 0.5, 5e-4};
  OptimConfig eta_v{0.01, 0.5, 5e-4};
  std::size_t batch_size = 100;
  double sample_rate = 1.0;
  std::size_t rounds = 200;
  double server_learning_rate = 0.01;  // pFedHN only

  void validate() const {
    if (local_epochs < 1) throw ConfigError("local_epochs must be at least 1");
    if (batch_size < 1) throw ConfigError("batch_size must be at least 1");
    if (!(sample_rate > 0.0 && sample_rate <= 1.0)) throw ConfigError("sample_rate must be in (0, 1]");
    if (!(server_learning_rate >= 0.0)) throw ConfigError("server_learning_rate must be nonnegative");
    eta_g.validate("eta_g");
    eta_h.validate("eta_h");
    eta_v.validate("eta_v");
  }

  friend bool operator==(const RoundConfig&, const RoundConfig&) = default;
};

/// Upload sanitization. An infinite clip norm disables clipping.
struct DPConfig {
  double clip_norm = std::numeric_limits<double>::infinity();
  double sigma = 1e-5;

  void validate() const {
    if (!(clip_norm > 0.0)) throw ConfigError("dp clip norm must be positive");
    if (!(sigma >= 0.0) || std::isinf(sigma)) throw ConfigError("dp sigma must be finite and nonnegative");
  }

  friend bool operator==(const DPConfig&, const DPConfig&) = default;
};

struct SimConfig {
  Algorithm algorithm = Algorithm::hyperfl;
  NetSpec extractor;
  NetSpec classifier;
  /// Target is filled in from the extractor (or the full model for pFedHN).
  HypernetSpec hypernet;
  RoundConfig round;
  DPConfig dp;
  std::uint64_t seed = 0;
  std::size_t threads = 1;
  /// Keep every serialized message in memory for inspection.
  bool keep_transcript = false;

  NetSpec full() const { return concat(extractor, classifier); }

  HypernetSpec resolved_hypernet() const {
    HypernetSpec h = hypernet;
    h.target = target_spec(algorithm == Algorithm::pfedhn ? full() : extractor);
    return h;
  }
};

struct ClientState {
  std::size_t id = 0;
  std::shared_ptr<const Dataset> train;
  std::shared_ptr<const Dataset> test;
  // HyperFL
  Tensor v;
  ParamSet phi_h;
  ParamSet phi_c;
  MomentumState opt_c;
  MomentumState opt_v;
  // FedAvg / DP-FedAvg / Local-only
  ParamSet model;
  MomentumState opt_model;
  /// Extractor parameters of the client's evaluation model at the last
  /// record; used for drift.
  ParamSet last_extractor;
};

struct ServerState {
  Algorithm algorithm = Algorithm::hyperfl;
  std::size_t round = 0;
  /// HyperFL: aggregated hypernetwork. FedAvg/DP-FedAvg: global model.
  /// pFedHN: server hypernetwork. Local-only: unused.
  ParamSet global;
  /// pFedHN per-client embeddings.
  std::vector<Tensor> embeddings;
};

// ---------------------------------------------------------------------------
// Messages

enum class Direction { download, upload };

struct Message {
  std::size_t round = 0;
  std::size_t client = 0;
  Direction direction = Direction::download;
  std::string bytes;
};

/// Every parameter exchange between server and clients goes through here as
/// serialized bytes. In hypernetwork-only mode anything that is not a
/// hypernetwork tensor is refused before serialization.
class Channel {
 public:
  Channel(bool hypernet_only = false, bool keep_log = false) : hypernet_only_(hypernet_only), keep_log_(keep_log) {}

  ParamSet transmit(std::size_t round, std::size_t client, Direction dir, const ParamSet& payload) {
    if (hypernet_only_) {
      for (const auto& [name, _] : payload) {
        if (name.rfind(kHypernetPrefix, 0) != 0) {
          throw PrivacyViolation("refusing to transmit '" + name + "' in hypernetwork-only mode");
        }
      }
    }
    nlohmann::json meta = {{"round", round},
                           {"client", client},
                           {"direction", dir == Direction::download ? "download" : "upload"}};
    std::string bytes = serialize(payload, meta.dump());
    ParamSet received = deserialize(bytes).tensors;
    std::lock_guard lock(mu_);
    ++count_;
    if (keep_log_) log_.push_back({round, client, dir, std::move(bytes)});
    return received;
  }

  const std::vector<Message>& log() const { return log_; }
  std::size_t count() const { return count_; }
  bool hypernet_only() const { return hypernet_only_; }

 private:
  bool hypernet_only_;
  bool keep_log_;
  std::size_t count_ = 0;
  std::vector<Message> log_;
  std::mutex mu_;
};

// ---------------------------------------------------------------------------
// Building blocks

/// Weighted elementwise mean. Weights must sum to 1 within 1e-9; they are
/// then renormalized. Uploads are folded in order with a running mean, so
/// identical uploads aggregate to the common value bitwise.
inline ParamSet aggregate(const std::vector<ParamSet>& uploads, const std::vector<double>& weights) {
  if (uploads.empty()) throw ConfigError("aggregate: no uploads");
  if (uploads.size() != weights.size()) throw DimensionError("aggregate: one weight per upload required");
  double total = 0.0;
  for (double w : weights) {
    if (!(w >= 0.0) || !std::isfinite(w)) throw ConfigError("aggregate: weights must be finite and nonnegative");
    total += w;
  }
  if (std::fabs(total - 1.0) > 1e-9) {
    throw ConfigError("aggregate: weights sum to " + std::to_string(total) + ", not 1");
  }
  for (const ParamSet& u : uploads) require_same_layout(uploads.front(), u, "aggregate");

  ParamSet acc;
  double seen = 0.0;
  for (std::size_t i = 0; i < uploads.size(); ++i) {
    const double w = weights[i] / total;
    if (w == 0.0) continue;
    seen += w;
    if (acc.empty()) {
      acc = uploads[i];
      continue;
    }
    const double c = w / seen;
    auto it = uploads[i].begin();
    for (auto& [_, t] : acc) {
      auto a = t.values();
      auto b = it->second.values();
      for (std::size_t k = 0; k < a.size(); ++k) {
        const double lo = std::min(a[k], b[k]), hi = std::max(a[k], b[k]);
        a[k] = std::clamp(a[k] + c * (b[k] - a[k]), lo, hi);
      }
      ++it;
    }
  }
  return acc;
}

/// ceil(rate * m) distinct client ids, ascending.
inline std::vector<std::size_t> sample_clients(std::size_t m, double rate, Rng& rng) {
  if (!(rate > 0.0 && rate <= 1.0)) throw ConfigError("sample rate must be in (0, 1]");
  std::vector<std::size_t> ids(m);
  std::iota(ids.begin(), ids.end(), 0);
  std::size_t k = static_cast<std::size_t>(std::ceil(rate * static_cast<double>(m) - 1e-9));
  k = std::clamp<std::size_t>(k, m ? 1 : 0, m);
  if (k == m) return ids;
  for (std::size_t i = 0; i < k; ++i) std::swap(ids[i], ids[i + rng.index(m - i)]);
  ids.resize(k);
  std::sort(ids.begin(), ids.end());
  return ids;
}

/// Clip to global L2 norm C, then add N(0, (sigma C)^2) to every entry.
/// The clipped norm never exceeds C, rounding included.
inline ParamSet dp_sanitize(const ParamSet& update, const DPConfig& dp, Rng& rng) {
  dp.validate();
  ParamSet out = update;
  const double norm = global_norm(update);
  if (std::isfinite(dp.clip_norm) && norm > dp.clip_norm) {
    double factor = dp.clip_norm / norm;
    out = scaled(update, factor);
    while (global_norm(out) > dp.clip_norm) {
      factor = std::nextafter(factor, 0.0);
      out = scaled(update, factor);
    }
  }
  if (dp.sigma > 0.0) {
    if (!std::isfinite(dp.clip_norm)) throw ConfigError("dp noise needs a finite clip norm");
    const double sd = dp.sigma * dp.clip_norm;
    for (auto& [_, t] : out)
      for (double& x : t.values()) x += rng.normal(0.0, sd);
  }
  return out;
}

/// Runs fn(i) for i in [0, n) on up to `threads` workers. Exceptions are
/// rethrown for the lowest failing index.
inline void parallel_for(std::size_t n, std::size_t threads, const std::function<void(std::size_t)>& fn) {
  std::vector<std::exception_ptr> errors(n);
  auto run = [&](std::size_t i) {
    try {
      fn(i);
    } catch (...) {
      errors[i] = std::current_exception();
    }
  };
  const std::size_t workers = std::min(std::max<std::size_t>(threads, 1), n);
  if (workers <= 1) {
    for (std::size_t i = 0; i < n; ++i) run(i);
  } else {
    std::atomic<std::size_t> next{0};
    std::vector<std::thread> pool;
    for (std::size_t w = 0; w < workers; ++w) {
      pool.emplace_back([&] {
        for (std::size_t i = next++; i < n; i = next++) run(i);
      });
    }
    for (auto& t : pool) t.join();
  }
  for (auto& e : errors)
    if (e) std::rethrow_exception(e);
}

/// Calls fn(batch) for every mini-batch of one shuffled pass over `ds`.
template <class Fn>
void for_each_batch(const Dataset& ds, std::size_t batch_size, Rng& rng, Fn&& fn) {
  std::vector<std::size_t> order(ds.size());
  std::iota(order.begin(), order.end(), 0);
  rng.shuffle(order);
  for (std::size_t start = 0; start < order.size(); start += batch_size) {
    const std::size_t end = std::min(start + batch_size, order.size());
    fn(ds.batch(std::span<const std::size_t>(order.data() + start, end - start)));
  }
}

/// Loss gradient with respect to the classifier only; theta is a constant.
inline LossAndGrads classifier_grads(const ParamSet& theta, const ParamSet& phi_c, const NetSpec& full,
                                     const Batch& batch) {
  check_batch(batch, full);
  VarParams vars = make_variables(phi_c);
  VarParams all = make_constants(theta);
  all.insert(vars.begin(), vars.end());
  ad::Var loss = loss_graph(full, all, ad::Var::constant(batch.x), batch.y);
  auto g = ad::grad(loss, var_list(vars));
  LossAndGrads out{loss.value().item(), values_of(zip_names(vars, g))};
  if (!std::isfinite(out.loss)) throw NumericError("loss is not finite");
  return out;
}

struct HypernetStepGrads {
  double loss = 0.0;
  ParamSet d_phi_h;
  Tensor d_v;
};

/// Loss gradient with respect to (phi_h, v) through theta = h(v; phi_h); the
/// classifier is a constant.
inline HypernetStepGrads hypernet_grads(const Tensor& v, const ParamSet& phi_h, const ParamSet& phi_c,
                                        const HypernetSpec& hspec, const NetSpec& full, const Batch& batch) {
  check_batch(batch, full);
  ad::Var vv = ad::Var::variable(v);
  VarParams phi = make_variables(phi_h);
  VarParams all = hypernet_graph(vv, phi, hspec);
  VarParams cls = make_constants(phi_c);
  all.insert(cls.begin(), cls.end());
  ad::Var loss = loss_graph(full, all, ad::Var::constant(batch.x), batch.y);
  std::vector<ad::Var> wrt = var_list(phi);
  wrt.push_back(vv);
  auto g = ad::grad(loss, wrt);
  HypernetStepGrads out;
  out.loss = loss.value().item();
  out.d_v = g.back().value();
  g.pop_back();
  out.d_phi_h = values_of(zip_names(phi, g));
  if (!std::isfinite(out.loss)) throw NumericError("loss is not finite");
  return out;
}

/// Running means over the SGD steps of one client round.
struct StepStats {
  double loss_sum = 0.0;
  double grad_sq_sum = 0.0;
  std::size_t steps = 0;

  void add(double loss, double grad_sq) {
    loss_sum += loss;
    grad_sq_sum += grad_sq;
    ++steps;
  }
  double mean_loss() const { return steps ? loss_sum / static_cast<double>(steps) : 0.0; }
  double mean_grad_sq() const { return steps ? grad_sq_sum / static_cast<double>(steps) : 0.0; }
};

struct LocalResult {
  ClientState state;
  ParamSet upload;
  StepStats stats;
};

/// One HyperFL client round. Step 1 trains the classifier with the generated
/// extractor fixed; Step 2 trains hypernetwork and embedding with the
/// classifier fixed. Only the hypernetwork is uploaded.
inline LocalResult local_train_hyperfl(const ClientState& client, const ParamSet& varphi_bar,
                                       const SimConfig& cfg, Rng& rng) {
  if (!client.train || client.train->size() == 0) throw ConfigError("client has an empty shard");
  const HypernetSpec hspec = cfg.resolved_hypernet();
  check_hypernet_params(varphi_bar, hspec);
  const NetSpec full = cfg.full();
  const RoundConfig& rc = cfg.round;

  LocalResult r{client, {}, {}};
  ClientState& s = r.state;
  s.phi_h = varphi_bar;

  // Step 1: theta is frozen for the whole step, so it is generated once.
  const ParamSet theta = hypernet_forward(s.v, s.phi_h, hspec);
  for (std::size_t e = 0; e < rc.classifier_epochs; ++e) {
    for_each_batch(*s.train, rc.batch_size, rng, [&](const Batch& b) {
      LossAndGrads lg = classifier_grads(theta, s.phi_c, full, b);
      r.stats.add(lg.loss, sq_norm(lg.grads));
      SgdResult step = sgd_step(s.phi_c, lg.grads, rc.eta_g, s.opt_c);
      s.phi_c = std::move(step.params);
      s.opt_c = std::move(step.state);
    });
  }

  // Step 2: hypernetwork momentum starts fresh because phi_h was overwritten.
  MomentumState opt_h;
  for (std::size_t e = 0; e < rc.local_epochs; ++e) {
    for_each_batch(*s.train, rc.batch_size, rng, [&](const Batch& b) {
      HypernetStepGrads g = hypernet_grads(s.v, s.phi_h, s.phi_c, hspec, full, b);
      r.stats.add(g.loss, sq_norm(g.d_phi_h) + g.d_v.sq_norm());
      SgdResult sh = sgd_step(s.phi_h, g.d_phi_h, rc.eta_h, opt_h);
      SgdResult sv = sgd_step({{"v", s.v}}, {{"v", g.d_v}}, rc.eta_v, s.opt_v);
      s.phi_h = std::move(sh.params);
      opt_h = std::move(sh.state);
      s.v = std::move(sv.params.at("v"));
      s.opt_v = std::move(sv.state);
    });
  }
  r.upload = s.phi_h;
  return r;
}

/// E epochs of SGD on a full model starting from `start`. Returns the trained
/// model as the upload.
inline LocalResult local_train_model(const ClientState& client, const ParamSet& start, MomentumState opt,
                                     const SimConfig& cfg, Rng& rng) {
  if (!client.train || client.train->size() == 0) throw ConfigError("client has an empty shard");
  const NetSpec full = cfg.full();
  LocalResult r{client, {}, {}};
  ClientState& s = r.state;
  s.model = start;
  for (std::size_t e = 0; e < cfg.round.local_epochs; ++e) {
    for_each_batch(*s.train, cfg.round.batch_size, rng, [&](const Batch& b) {
      LossAndGrads lg = value_and_grad_params(s.model, full, b);
      r.stats.add(lg.loss, sq_norm(lg.grads));
      SgdResult step = sgd_step(s.model, lg.grads, cfg.round.eta_g, opt);
      s.model = std::move(step.params);
      opt = std::move(step.state);
    });
  }
  s.opt_model = std::move(opt);
  r.upload = s.model;
  return r;
}

/// FedAvg client: a fresh optimizer each round, starting from the global
/// model.
inline LocalResult local_train_fedavg(const ClientState& client, const ParamSet& global_model,
                                      const SimConfig& cfg, Rng& rng) {
  return local_train_model(client, global_model, {}, cfg, rng);
}

/// pFedHN server step for one client's model delta: phi += lr * J^T dtheta and
/// likewise for the client's embedding.
inline void pfedhn_apply(ServerState& server, std::size_t client, const ParamSet& delta_theta,
                         const HypernetSpec& hspec, double lr) {
  HypernetGrads g = hypernet_backward(delta_theta, server.embeddings.at(client), server.global, hspec);
  server.global = axpy(server.global, lr, g.d_phi_h);
  Tensor& v = server.embeddings.at(client);
  for (std::size_t i = 0; i < v.size(); ++i) v[i] += lr * g.d_v[i];
}

// ---------------------------------------------------------------------------
// Simulation

struct Simulation {
  SimConfig cfg;
  ServerState server;
  std::vector<ClientState> clients;
  std::unique_ptr<Channel> channel;
};

namespace detail {
inline constexpr std::uint64_t kTagClassifier = 0x636c73;
inline constexpr std::uint64_t kTagModel = 0x6d6f64656c;
inline constexpr std::uint64_t kTagSample = 0x73616d706c65;
inline constexpr std::uint64_t kTagNoise = 0x6e6f697365;
inline constexpr std::uint64_t kTagTrain = 0x747261696e;
}  // namespace detail

inline Simulation make_simulation(const SimConfig& cfg, const std::vector<TrainTestSplit>& shards) {
  cfg.round.validate();
  if (cfg.algorithm == Algorithm::dp_fedavg) cfg.dp.validate();
  if (shards.empty()) throw ConfigError("simulation needs at least one client");
  const NetSpec full = cfg.full();
  if (cfg.extractor.has_head()) throw ConfigError("feature extractor must not end in a head");
  if (!cfg.classifier.has_head()) throw ConfigError("classifier must end in a softmax_xent head");

  Simulation sim;
  sim.cfg = cfg;
  sim.server.algorithm = cfg.algorithm;
  sim.channel = std::make_unique<Channel>(cfg.algorithm == Algorithm::hyperfl, cfg.keep_transcript);

  Tensor v0;
  ParamSet phi_c0, model0;
  switch (cfg.algorithm) {
    case Algorithm::hyperfl: {
      HypernetInit init = init_hypernet(cfg.resolved_hypernet(), cfg.seed);
      sim.server.global = init.phi_h;
      v0 = init.v;
      phi_c0 = init_params(cfg.classifier, derive_seed(cfg.seed, {detail::kTagClassifier}));
      break;
    }
    case Algorithm::pfedhn: {
      HypernetInit init = init_hypernet(cfg.resolved_hypernet(), cfg.seed);
      sim.server.global = init.phi_h;
      sim.server.embeddings.assign(shards.size(), init.v);
      break;
    }
    default:
      model0 = init_params(full, derive_seed(cfg.seed, {detail::kTagModel}));
      if (cfg.algorithm != Algorithm::local) sim.server.global = model0;
  }

  for (std::size_t c = 0; c < shards.size(); ++c) {
    ClientState s;
    s.id = c;
    shards[c].train.validate();
    shards[c].test.validate();
    if (shards[c].train.dim() != full.input_dim()) throw DimensionError("client data width differs from model input");
    s.train = std::make_shared<const Dataset>(shards[c].train);
    s.test = std::make_shared<const Dataset>(shards[c].test);
    if (cfg.algorithm == Algorithm::hyperfl) {
      s.v = v0;
      s.phi_h = sim.server.global;
      s.phi_c = phi_c0;
    } else if (cfg.algorithm != Algorithm::pfedhn) {
      s.model = model0;
    }
    sim.clients.push_back(std::move(s));
  }
  return sim;
}

/// The model client c would use for inference right now.
inline ParamSet evaluation_model(const Simulation& sim, std::size_t c) {
  const ClientState& s = sim.clients.at(c);
  switch (sim.cfg.algorithm) {
    case Algorithm::hyperfl: return merged(hypernet_forward(s.v, s.phi_h, sim.cfg.resolved_hypernet()), s.phi_c);
    case Algorithm::pfedhn:
      return hypernet_forward(sim.server.embeddings.at(c), sim.server.global, sim.cfg.resolved_hypernet());
    case Algorithm::local: return s.model;
    default: return sim.server.global;
  }
}

namespace detail {
inline ParamSet extractor_part(const ParamSet& full_params, const NetSpec& extractor) {
  ParamSet out;
  for (const auto& [name, _] : extractor.parameter_shapes()) out.emplace(name, full_params.at(name));
  return out;
}

/// Fills test accuracy and extractor drift for every client and stores the
/// current extractor for the next drift measurement.
inline void evaluate_clients(Simulation& sim, RoundRecord& rec, std::vector<double>& acc,
                             std::vector<double>& drift) {
  const NetSpec full = sim.cfg.full();
  const std::size_t m = sim.clients.size();
  acc.assign(m, 0.0);
  drift.assign(m, 0.0);
  std::vector<ParamSet> extractors(m);
  parallel_for(m, sim.cfg.threads, [&](std::size_t c) {
    ParamSet model = evaluation_model(sim, c);
    acc[c] = accuracy(model, full, *sim.clients[c].test);
    extractors[c] = extractor_part(model, sim.cfg.extractor);
    if (!sim.clients[c].last_extractor.empty()) drift[c] = distance(extractors[c], sim.clients[c].last_extractor);
  });
  double acc_sum = 0.0, drift_sum = 0.0;
  for (std::size_t c = 0; c < m; ++c) {
    acc_sum += acc[c];
    drift_sum += drift[c];
    sim.clients[c].last_extractor = std::move(extractors[c]);
  }
  rec.mean_test_acc = acc_sum / static_cast<double>(m);
  rec.extractor_drift = drift_sum / static_cast<double>(m);
}
}  // namespace detail

/// Metrics of the initial state (round 0): full-shard training loss and test
/// accuracy of every client. No per-client rows.
inline RoundRecord initial_record(Simulation& sim) {
  RoundRecord rec;
  rec.round = 0;
  const NetSpec full = sim.cfg.full();
  std::vector<double> loss(sim.clients.size());
  parallel_for(sim.clients.size(), sim.cfg.threads, [&](std::size_t c) {
    loss[c] = forward_loss(evaluation_model(sim, c), full, sim.clients[c].train->all());
  });
  rec.mean_train_loss = std::accumulate(loss.begin(), loss.end(), 0.0) / static_cast<double>(loss.size());
  std::vector<double> acc, drift;
  detail::evaluate_clients(sim, rec, acc, drift);
  rec.extractor_drift = 0.0;
  return rec;
}

/// One communication round: sample, train the sampled clients (possibly in
/// parallel), fold their uploads in ascending id order, broadcast, record.
/// The last configured round always uses every client.
inline RoundRecord run_round(Simulation& sim) {
  const SimConfig& cfg = sim.cfg;
  const std::size_t t = sim.server.round + 1;
  const std::size_t m = sim.clients.size();

  Rng sample_rng(derive_seed(cfg.seed, {detail::kTagSample, t}));
  const bool last = cfg.round.rounds > 0 && t >= cfg.round.rounds;
  std::vector<std::size_t> picked = sample_clients(m, last ? 1.0 : cfg.round.sample_rate, sample_rng);

  const ParamSet before = sim.server.global;
  const HypernetSpec hspec = cfg.algorithm == Algorithm::hyperfl || cfg.algorithm == Algorithm::pfedhn
                                 ? cfg.resolved_hypernet()
                                 : HypernetSpec{};

  // Downloads happen in ascending id order before any training starts.
  std::vector<ParamSet> downloads(picked.size());
  for (std::size_t k = 0; k < picked.size(); ++k) {
    const std::size_t c = picked[k];
    switch (cfg.algorithm) {
      case Algorithm::hyperfl:
      case Algorithm::fedavg:
      case Algorithm::dp_fedavg:
        downloads[k] = sim.channel->transmit(t, c, Direction::download, sim.server.global);
        break;
      case Algorithm::pfedhn:
        downloads[k] = sim.channel->transmit(
            t, c, Direction::download, hypernet_forward(sim.server.embeddings[c], sim.server.global, hspec));
        break;
      case Algorithm::local: break;
    }
  }

  std::vector<LocalResult> results(picked.size());
  parallel_for(picked.size(), cfg.threads, [&](std::size_t k) {
    const std::size_t c = picked[k];
    Rng rng(derive_seed(cfg.seed, {detail::kTagTrain, c, t}));
    const ClientState& s = sim.clients[c];
    switch (cfg.algorithm) {
      case Algorithm::hyperfl: results[k] = local_train_hyperfl(s, downloads[k], cfg, rng); break;
      case Algorithm::local: results[k] = local_train_model(s, s.model, s.opt_model, cfg, rng); break;
      default: results[k] = local_train_fedavg(s, downloads[k], cfg, rng); break;
    }
  });

  RoundRecord rec;
  rec.round = t;
  double total_n = 0.0;
  for (std::size_t c : picked) total_n += static_cast<double>(sim.clients[c].train->size());
  std::vector<ParamSet> uploads;
  std::vector<double> weights;
  double loss_sum = 0.0, grad_sum = 0.0;
  std::size_t steps = 0;
  std::vector<double> local_move(picked.size(), 0.0);
  for (std::size_t k = 0; k < picked.size(); ++k) {
    const std::size_t c = picked[k];
    LocalResult& r = results[k];
    loss_sum += r.stats.mean_loss();
    grad_sum += r.stats.grad_sq_sum;
    steps += r.stats.steps;
    weights.push_back(static_cast<double>(sim.clients[c].train->size()) / total_n);
    switch (cfg.algorithm) {
      case Algorithm::hyperfl:
        local_move[k] = distance(r.upload, downloads[k]);
        uploads.push_back(sim.channel->transmit(t, c, Direction::upload, r.upload));
        break;
      case Algorithm::fedavg:
        uploads.push_back(sim.channel->transmit(t, c, Direction::upload, difference(r.upload, downloads[k])));
        break;
      case Algorithm::dp_fedavg: {
        Rng noise(derive_seed(cfg.seed, {detail::kTagNoise, c, t}));
        ParamSet delta = dp_sanitize(difference(r.upload, downloads[k]), cfg.dp, noise);
        uploads.push_back(sim.channel->transmit(t, c, Direction::upload, delta));
        break;
      }
      case Algorithm::pfedhn: {
        ParamSet delta = sim.channel->transmit(t, c, Direction::upload, difference(r.upload, downloads[k]));
        pfedhn_apply(sim.server, c, delta, hspec, cfg.round.server_learning_rate);
        break;
      }
      case Algorithm::local: break;
    }
    sim.clients[c] = std::move(r.state);
    // FedAvg-family clients do not keep their local copy past the round.
    if (cfg.algorithm == Algorithm::fedavg || cfg.algorithm == Algorithm::dp_fedavg) {
      sim.clients[c].model.clear();
      sim.clients[c].opt_model = {};
    }
  }

  switch (cfg.algorithm) {
    case Algorithm::hyperfl:
      sim.server.global = aggregate(uploads, weights);
      for (ClientState& s : sim.clients) s.phi_h = sim.server.global;
      break;
    case Algorithm::fedavg:
    case Algorithm::dp_fedavg:
      sim.server.global = axpy(sim.server.global, 1.0, aggregate(uploads, weights));
      break;
    default: break;
  }
  sim.server.round = t;

  if (cfg.algorithm == Algorithm::hyperfl || cfg.algorithm == Algorithm::pfedhn) {
    rec.hypernet_drift = distance(sim.server.global, before);
  }
  rec.mean_train_loss = loss_sum / static_cast<double>(picked.size());
  rec.mean_grad_sq_norm = steps ? grad_sum / static_cast<double>(steps) : 0.0;

  std::vector<double> acc, drift;
  detail::evaluate_clients(sim, rec, acc, drift);
  for (std::size_t k = 0; k < picked.size(); ++k) {
    const std::size_t c = picked[k];
    ClientRoundStats cs;
    cs.client_id = c;
    cs.train_loss = results[k].stats.mean_loss();
    cs.test_acc = acc[c];
    cs.grad_sq_norm = results[k].stats.mean_grad_sq();
    cs.hypernet_drift = local_move[k];
    cs.extractor_drift = drift[c];
    rec.clients.push_back(cs);
  }
  return rec;
}

// ---------------------------------------------------------------------------
// Snapshots

/// Every server and client tensor under a hierarchical name.
inline ParamSet snapshot_tensors(const Simulation& sim) {
  ParamSet out;
  auto put = [&](const std::string& prefix, const ParamSet& p) {
    for (const auto& [name, t] : p) out.emplace(prefix + name, t);
  };
  put("server.global.", sim.server.global);
  for (std::size_t i = 0; i < sim.server.embeddings.size(); ++i) {
    out.emplace("server.embedding." + std::to_string(i), sim.server.embeddings[i]);
  }
  for (const ClientState& s : sim.clients) {
    const std::string p = "client." + std::to_string(s.id) + ".";
    if (s.v.size()) out.emplace(p + "v", s.v);
    put(p + "phi_h.", s.phi_h);
    put(p + "phi_c.", s.phi_c);
    put(p + "model.", s.model);
    put(p + "opt_c.", s.opt_c.buffers);
    put(p + "opt_model.", s.opt_model.buffers);
    if (!s.opt_v.buffers.empty()) out.emplace(p + "opt_v", s.opt_v.buffers.at("v"));
  }
  return out;
}

/// Inverse of snapshot_tensors for one prefix.
inline ParamSet tensors_with_prefix(const ParamSet& snapshot, const std::string& prefix) {
  ParamSet out;
  for (auto it = snapshot.lower_bound(prefix); it != snapshot.end() && it->first.rfind(prefix, 0) == 0; ++it) {
    out.emplace(it->first.substr(prefix.size()), it->second);
  }
  return out;
}

}  // namespace hyperfl
