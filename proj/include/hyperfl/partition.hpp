#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <string>
#include <vector>

#include <json.hpp>

#include "hyperfl/data.hpp"
#include "hyperfl/errors.hpp"
#include "hyperfl/rng.hpp"

namespace hyperfl {

/// Dominant-class non-IID split. Every client receives `samples_per_client`
/// samples: round(s% * n) drawn uniformly from the whole dataset and the rest
/// from its group's dominant classes. Clients are split evenly into
/// contiguous groups, one per entry of `dominant_sets`.
struct PartitionSpec {
  double uniform_percent = 20.0;
  std::vector<std::vector<std::size_t>> dominant_sets;
  std::size_t samples_per_client = 600;

  std::size_t uniform_count() const {
    return static_cast<std::size_t>(
        std::llround(uniform_percent / 100.0 * static_cast<double>(samples_per_client)));
  }

  void validate(std::size_t num_classes) const {
    if (!(uniform_percent >= 0.0 && uniform_percent <= 100.0)) {
      throw ConfigError("partition: uniform percent must be in [0, 100]");
    }
    if (samples_per_client == 0) throw ConfigError("partition: samples per client must be positive");
    if (uniform_count() < samples_per_client && dominant_sets.empty()) {
      throw ConfigError("partition: dominant class sets required when s < 100");
    }
    for (const auto& set : dominant_sets) {
      if (set.empty() && uniform_count() < samples_per_client) {
        throw ConfigError("partition: empty dominant class set");
      }
      for (std::size_t c : set) {
        if (c >= num_classes) throw ConfigError("partition: dominant class outside label range");
      }
    }
  }

  friend bool operator==(const PartitionSpec&, const PartitionSpec&) = default;
};

/// Groups of `set_size` consecutive classes; group g starts at g * stride.
/// Class indices wrap modulo K.
inline std::vector<std::vector<std::size_t>> consecutive_dominant_sets(std::size_t groups, std::size_t set_size,
                                                                       std::size_t stride, std::size_t num_classes) {
  std::vector<std::vector<std::size_t>> out(groups);
  for (std::size_t g = 0; g < groups; ++g)
    for (std::size_t j = 0; j < set_size; ++j) out[g].push_back((g * stride + j) % num_classes);
  return out;
}

struct ClientShard {
  std::size_t group = 0;
  std::vector<std::size_t> uniform_indices;
  std::vector<std::size_t> dominant_indices;

  std::vector<std::size_t> indices() const {
    std::vector<std::size_t> all = uniform_indices;
    all.insert(all.end(), dominant_indices.begin(), dominant_indices.end());
    return all;
  }
};

inline std::size_t group_of(std::size_t client, std::size_t num_clients, std::size_t num_groups) {
  return num_groups == 0 ? 0 : client * num_groups / num_clients;
}

namespace detail {
// Draws `count` distinct entries of `pool` (partial Fisher-Yates).
inline std::vector<std::size_t> draw_without_replacement(std::vector<std::size_t> pool, std::size_t count, Rng& rng) {
  for (std::size_t i = 0; i < count; ++i) std::swap(pool[i], pool[i + rng.index(pool.size() - i)]);
  pool.resize(count);
  return pool;
}
}  // namespace detail

/// Sampling is without replacement within a client; different clients may
/// share samples.
inline std::vector<ClientShard> partition_indices(const Dataset& ds, const PartitionSpec& spec,
                                                  std::size_t num_clients, std::uint64_t seed) {
  ds.validate();
  spec.validate(ds.num_classes);
  if (num_clients == 0) throw ConfigError("partition: need at least one client");
  const std::size_t n_uniform = spec.uniform_count();
  const std::size_t n_dominant = spec.samples_per_client - n_uniform;
  if (n_uniform > ds.size()) {
    throw CapacityError("partition: " + std::to_string(n_uniform) + " uniform draws requested from " +
                        std::to_string(ds.size()) + " samples");
  }

  std::vector<std::size_t> everything(ds.size());
  std::iota(everything.begin(), everything.end(), 0);

  std::vector<ClientShard> shards(num_clients);
  for (std::size_t c = 0; c < num_clients; ++c) {
    Rng rng(derive_seed(seed, {0x7061727469ULL, c}));
    ClientShard& shard = shards[c];
    shard.group = group_of(c, num_clients, spec.dominant_sets.size());
    shard.uniform_indices = detail::draw_without_replacement(everything, n_uniform, rng);
    if (n_dominant == 0) continue;

    const auto& dominant = spec.dominant_sets[shard.group];
    std::vector<char> taken(ds.size(), 0);
    for (std::size_t i : shard.uniform_indices) taken[i] = 1;
    std::vector<std::size_t> pool;
    for (std::size_t i = 0; i < ds.size(); ++i) {
      if (!taken[i] && std::find(dominant.begin(), dominant.end(), ds.y[i]) != dominant.end()) pool.push_back(i);
    }
    if (pool.size() < n_dominant) {
      throw CapacityError("partition: client " + std::to_string(c) + " needs " + std::to_string(n_dominant) +
                          " dominant-class samples but only " + std::to_string(pool.size()) + " remain");
    }
    shard.dominant_indices = detail::draw_without_replacement(std::move(pool), n_dominant, rng);
  }
  return shards;
}

inline std::vector<Dataset> partition(const Dataset& ds, const PartitionSpec& spec, std::size_t num_clients,
                                      std::uint64_t seed) {
  std::vector<Dataset> out;
  for (const ClientShard& s : partition_indices(ds, spec, num_clients, seed)) out.push_back(ds.subset(s.indices()));
  return out;
}

inline nlohmann::json partition_manifest(const std::vector<ClientShard>& shards, const PartitionSpec& spec,
                                         std::uint64_t seed) {
  nlohmann::json clients = nlohmann::json::array();
  for (std::size_t c = 0; c < shards.size(); ++c) {
    const ClientShard& s = shards[c];
    clients.push_back({{"client_id", c},
                       {"group", s.group},
                       {"dominant_classes", spec.dominant_sets.empty() ? std::vector<std::size_t>{}
                                                                        : spec.dominant_sets[s.group]},
                       {"uniform_indices", s.uniform_indices},
                       {"dominant_indices", s.dominant_indices}});
  }
  return {{"seed", seed},
          {"uniform_percent", spec.uniform_percent},
          {"samples_per_client", spec.samples_per_client},
          {"clients", clients}};
}

struct TrainTestSplit {
  Dataset train;
  Dataset test;
};

/// Shuffles a shard and holds out n / (ratio + 1) samples (rounded) for test.
inline TrainTestSplit split_train_test(const Dataset& shard, double train_test_ratio, std::uint64_t seed) {
  if (!(train_test_ratio > 0.0)) throw ConfigError("train/test ratio must be positive");
  std::vector<std::size_t> order(shard.size());
  std::iota(order.begin(), order.end(), 0);
  Rng rng(derive_seed(seed, {0x73706c6974ULL}));
  rng.shuffle(order);
  std::size_t n_test = static_cast<std::size_t>(
      std::llround(static_cast<double>(shard.size()) / (train_test_ratio + 1.0)));
  n_test = std::clamp<std::size_t>(n_test, shard.size() > 1 ? 1 : 0, shard.size() - 1);
  std::vector<std::size_t> test(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(n_test));
  std::vector<std::size_t> train(order.begin() + static_cast<std::ptrdiff_t>(n_test), order.end());
  return {shard.subset(train), shard.subset(test)};
}

}  // namespace hyperfl
