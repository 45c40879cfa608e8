#pragma once

// Experiment orchestration behind the command-line tool: training runs with
// metrics CSV and snapshots, attacks on snapshots, and consolidated reports.
// Every file is written under the run's output directory.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "hyperfl/attack.hpp"
#include "hyperfl/checkpoint.hpp"
#include "hyperfl/config.hpp"
#include "hyperfl/data.hpp"
#include "hyperfl/errors.hpp"
#include "hyperfl/fedsim.hpp"
#include "hyperfl/metrics.hpp"
#include "hyperfl/partition.hpp"

namespace hyperfl {

namespace fs = std::filesystem;

// ---------------------------------------------------------------------------
// Data and federation

struct LoadedData {
  Dataset data;
  std::size_t height = 1;
  std::size_t width = 1;
};

/// Image geometry for flat features: square when D is a perfect square,
/// otherwise a single row.
inline std::pair<std::size_t, std::size_t> image_shape_for(std::size_t dim) {
  const auto side = static_cast<std::size_t>(std::llround(std::sqrt(static_cast<double>(dim))));
  if (side * side == dim) return {side, side};
  return {1, dim};
}

inline LoadedData load_data(const DataConfig& cfg) {
  LoadedData out;
  switch (cfg.kind) {
    case DataKind::synthetic:
      out.data = synth_dataset(cfg.synthetic);
      std::tie(out.height, out.width) = image_shape_for(out.data.dim());
      break;
    case DataKind::glyphs:
      out.data = synth_glyphs(cfg.glyphs);
      out.height = out.width = cfg.glyphs.side;
      break;
    case DataKind::idx: {
      out.data = load_idx(cfg.images, cfg.labels);
      const std::string head = read_file(cfg.images).substr(0, 16);
      out.height = detail::read_be32(head, 8, "images");
      out.width = detail::read_be32(head, 12, "images");
      break;
    }
  }
  return out;
}

namespace detail {
inline constexpr std::uint64_t kTagPartition = 0x706172746e;
inline constexpr std::uint64_t kTagSplit = 0x73706c74;
inline constexpr std::uint64_t kTagDpAttack = 0x6470617474;
}  // namespace detail

inline void check_model_fits(const ExperimentConfig& cfg, const Dataset& ds) {
  if (cfg.model.extractor.front() != ds.dim()) {
    throw ConfigError("model.extractor starts at width " + std::to_string(cfg.model.extractor.front()) +
                      " but the data has " + std::to_string(ds.dim()) + " features");
  }
  if (cfg.model.classifier.back() != ds.num_classes) {
    throw ConfigError("model.classifier ends at width " + std::to_string(cfg.model.classifier.back()) +
                      " but the data has " + std::to_string(ds.num_classes) + " classes");
  }
}

struct Federation {
  std::vector<ClientShard> shards;
  std::vector<TrainTestSplit> splits;
};

inline Federation build_federation(const ExperimentConfig& cfg, const Dataset& ds) {
  Federation f;
  f.shards = partition_indices(ds, cfg.partition.spec, cfg.partition.clients,
                               derive_seed(cfg.seed, {detail::kTagPartition}));
  for (std::size_t c = 0; c < f.shards.size(); ++c) {
    f.splits.push_back(split_train_test(ds.subset(f.shards[c].indices()), cfg.partition.train_test_ratio,
                                        derive_seed(cfg.seed, {detail::kTagSplit, c})));
  }
  return f;
}

inline nlohmann::json partition_report(const ExperimentConfig& cfg, const Dataset& ds, const Federation& f) {
  nlohmann::json j = partition_manifest(f.shards, cfg.partition.spec, cfg.seed);
  for (std::size_t c = 0; c < f.shards.size(); ++c) {
    std::vector<std::size_t> counts(ds.num_classes, 0);
    for (std::size_t i : f.shards[c].indices()) ++counts[ds.y[i]];
    j["clients"][c]["class_counts"] = counts;
    j["clients"][c]["train_size"] = f.splits[c].train.size();
    j["clients"][c]["test_size"] = f.splits[c].test.size();
  }
  return j;
}

// ---------------------------------------------------------------------------
// Metrics CSV

inline constexpr const char* kMetricsHeader =
    "round,client_id,train_loss,test_acc,grad_sq_norm,hypernet_drift,extractor_drift,seconds";

/// Shortest text that reads back to the same double.
inline std::string format_double(double v) {
  char buf[40];
  for (int digits = 15; digits <= 17; ++digits) {
    std::snprintf(buf, sizeof buf, "%.*g", digits, v);
    if (std::strtod(buf, nullptr) == v) break;
  }
  return buf;
}

/// One row per trained client, then the `_mean` row for the round.
inline std::string metrics_rows(const RoundRecord& r) {
  std::string out;
  auto row = [&](const std::string& id, double loss, double acc, double grad, double hd, double ed) {
    out += std::to_string(r.round) + "," + id + "," + format_double(loss) + "," + format_double(acc) + "," +
           format_double(grad) + "," + format_double(hd) + "," + format_double(ed) + "," +
           format_double(r.seconds) + "\n";
  };
  for (const ClientRoundStats& c : r.clients) {
    row(std::to_string(c.client_id), c.train_loss, c.test_acc, c.grad_sq_norm, c.hypernet_drift, c.extractor_drift);
  }
  row("_mean", r.mean_train_loss, r.mean_test_acc, r.mean_grad_sq_norm, r.hypernet_drift, r.extractor_drift);
  return out;
}

struct MetricsRow {
  std::size_t round = 0;
  std::string client_id;
  std::vector<double> values;  // train_loss .. seconds
};

inline std::vector<MetricsRow> parse_metrics_csv(const std::string& text, const std::string& name) {
  std::istringstream in(text);
  std::string line;
  if (!std::getline(in, line) || line != kMetricsHeader) throw FormatError(name + ": unexpected header");
  std::vector<MetricsRow> rows;
  std::size_t lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    std::vector<std::string> cells;
    std::stringstream ss(line);
    for (std::string cell; std::getline(ss, cell, ',');) cells.push_back(cell);
    if (cells.size() != 8) throw FormatError(name + ":" + std::to_string(lineno) + ": expected 8 columns");
    MetricsRow r;
    char* end = nullptr;
    r.round = std::strtoull(cells[0].c_str(), &end, 10);
    if (*end) throw FormatError(name + ":" + std::to_string(lineno) + ": bad round");
    r.client_id = cells[1];
    for (std::size_t k = 2; k < 8; ++k) {
      const double v = std::strtod(cells[k].c_str(), &end);
      if (cells[k].empty() || *end) throw FormatError(name + ":" + std::to_string(lineno) + ": bad number");
      r.values.push_back(v);
    }
    rows.push_back(std::move(r));
  }
  return rows;
}

// ---------------------------------------------------------------------------
// Files

inline void write_text(const fs::path& path, const std::string& text) {
  std::error_code ec;
  fs::create_directories(path.parent_path(), ec);
  if (ec) throw IoError("cannot create '" + path.parent_path().string() + "': " + ec.message());
  write_file(path, text);
}

inline std::string snapshot_name(std::size_t round) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "round_%04zu.ckpt", round);
  return buf;
}

inline std::string snapshot_metadata(const ExperimentConfig& cfg, std::size_t round, const char* status) {
  return nlohmann::json{{"kind", "hyperfl-snapshot"}, {"round", round}, {"status", status}, {"config", to_json(cfg)}}
      .dump();
}

// ---------------------------------------------------------------------------
// train

struct RunResult {
  fs::path dir;
  std::vector<RoundRecord> records;  // round 0 first
  std::vector<double> final_accuracy;
  fs::path final_snapshot;
};

inline AttackReport run_attack(const fs::path& snapshot, const AttackRunConfig& run,
                               const std::optional<fs::path>& out_dir = std::nullopt);

/// Trains per `cfg` and writes under cfg.output_dir:
///   config.resolved.json, metrics.csv, final_accuracy.json,
///   snapshots/round_NNNN.ckpt, and attack/ when cfg.attack is set.
/// A NumericError during a round saves the last good state to
/// snapshots/abort_round_NNNN.ckpt before propagating.
inline RunResult run_experiment(const ExperimentConfig& cfg) {
  RunResult res;
  res.dir = cfg.output_dir;
  write_text(res.dir / "config.resolved.json", to_json(cfg).dump(2) + "\n");

  const LoadedData loaded = load_data(cfg.data);
  check_model_fits(cfg, loaded.data);
  const Federation fed = build_federation(cfg, loaded.data);
  Simulation sim = make_simulation(cfg.sim(), fed.splits);

  const fs::path csv_path = res.dir / "metrics.csv";
  std::ofstream csv(csv_path, std::ios::binary | std::ios::trunc);
  if (!csv) throw IoError("cannot open '" + csv_path.string() + "'");
  csv << kMetricsHeader << "\n";
  auto emit = [&](const RoundRecord& r) {
    csv << metrics_rows(r);
    csv.flush();
    if (!csv) throw IoError("write failed for '" + csv_path.string() + "'");
    res.records.push_back(r);
  };
  auto save = [&](const std::string& file, std::size_t round, const char* status) {
    const fs::path p = res.dir / "snapshots" / file;
    write_text(p, serialize(snapshot_tensors(sim), snapshot_metadata(cfg, round, status)));
    return p;
  };

  emit(initial_record(sim));
  for (std::size_t t = 1; t <= cfg.round.rounds; ++t) {
    const auto start = std::chrono::steady_clock::now();
    RoundRecord rec;
    try {
      rec = run_round(sim);
    } catch (const NumericError& e) {
      const fs::path p = save("abort_" + snapshot_name(t - 1), t - 1, "aborted");
      throw NumericError(std::string(e.what()) + " (round " + std::to_string(t) + "; state saved to " +
                         p.string() + ")");
    }
    if (cfg.record_wall_clock) {
      rec.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    }
    emit(rec);
    if (!std::isfinite(rec.mean_train_loss)) {
      const fs::path p = save("abort_" + snapshot_name(t), t, "aborted");
      throw NumericError("training loss diverged in round " + std::to_string(t) + " (state saved to " +
                         p.string() + ")");
    }
    if (cfg.snapshot_every && t % cfg.snapshot_every == 0 && t != cfg.round.rounds) {
      save(snapshot_name(t), t, "ok");
    }
  }
  res.final_snapshot = save(snapshot_name(cfg.round.rounds), cfg.round.rounds, "ok");

  nlohmann::json acc = nlohmann::json::array();
  double sum = 0.0;
  for (std::size_t c = 0; c < sim.clients.size(); ++c) {
    const double a = accuracy(evaluation_model(sim, c), sim.cfg.full(), *sim.clients[c].test);
    res.final_accuracy.push_back(a);
    sum += a;
    acc.push_back({{"client_id", c}, {"test_acc", a}});
  }
  write_text(res.dir / "final_accuracy.json",
             nlohmann::json{{"round", cfg.round.rounds},
                            {"mean_test_acc", sum / static_cast<double>(sim.clients.size())},
                            {"clients", acc}}
                     .dump(2) +
                 "\n");

  if (cfg.attack) run_attack(res.final_snapshot, *cfg.attack, res.dir / "attack");
  return res;
}

// ---------------------------------------------------------------------------
// partition

inline fs::path run_partition(const ExperimentConfig& cfg) {
  const LoadedData loaded = load_data(cfg.data);
  const Federation fed = build_federation(cfg, loaded.data);
  const fs::path out = fs::path(cfg.output_dir) / "partition.json";
  write_text(out, partition_report(cfg, loaded.data, fed).dump(1) + "\n");
  return out;
}

// ---------------------------------------------------------------------------
// attack

struct SnapshotContents {
  ExperimentConfig config;
  std::size_t round = 0;
  ParamSet tensors;
};

inline SnapshotContents load_snapshot(const fs::path& path) {
  Checkpoint ck = load_checkpoint(path);
  nlohmann::json meta;
  try {
    meta = nlohmann::json::parse(ck.metadata);
  } catch (const nlohmann::json::parse_error&) {
    throw FormatError(path.string() + ": snapshot metadata is not JSON");
  }
  if (!meta.is_object() || meta.value("kind", "") != "hyperfl-snapshot" || !meta.contains("config")) {
    throw FormatError(path.string() + ": not a training snapshot");
  }
  SnapshotContents s;
  s.config = experiment_from_json(meta["config"], detail::ConfigSource{path.string() + " (metadata)", {}});
  s.round = meta.value("round", std::size_t{0});
  s.tensors = std::move(ck.tensors);
  return s;
}

/// The batch-1 transcript an honest-but-curious server would observe if
/// client `c` uploaded after training on `x` alone, built from snapshot state.
inline Transcript transcript_from_snapshot(const SnapshotContents& snap, std::size_t c, const Tensor& x,
                                           std::size_t label, std::size_t h, std::size_t w, std::size_t sample) {
  const ExperimentConfig& cfg = snap.config;
  const SimConfig sc = cfg.sim();
  const std::string cp = "client." + std::to_string(c) + ".";
  auto need = [&](const ParamSet& p, const std::string& what) {
    if (p.empty()) throw FormatError("snapshot lacks " + what);
    return p;
  };
  switch (cfg.algorithm) {
    case Algorithm::hyperfl: {
      auto v = snap.tensors.find(cp + "v");
      if (v == snap.tensors.end()) throw FormatError("snapshot lacks " + cp + "v");
      return hyperfl_transcript(need(tensors_with_prefix(snap.tensors, cp + "phi_h."), cp + "phi_h"), v->second,
                                need(tensors_with_prefix(snap.tensors, cp + "phi_c."), cp + "phi_c"),
                                sc.resolved_hypernet(), sc.extractor, sc.classifier, x, label, h, w);
    }
    case Algorithm::pfedhn: {
      auto v = snap.tensors.find("server.embedding." + std::to_string(c));
      if (v == snap.tensors.end()) throw FormatError("snapshot lacks the embedding of client " + std::to_string(c));
      return pfedhn_transcript(need(tensors_with_prefix(snap.tensors, "server.global."), "server.global"), v->second,
                               sc.resolved_hypernet(), sc.full(), x, label, h, w);
    }
    case Algorithm::fedavg:
    case Algorithm::dp_fedavg: {
      Transcript t = fedavg_transcript(need(tensors_with_prefix(snap.tensors, "server.global."), "server.global"),
                                       sc.full(), x, label, h, w);
      if (cfg.algorithm == Algorithm::dp_fedavg) {
        Rng noise(derive_seed(cfg.seed, {detail::kTagDpAttack, c, sample}));
        t.view.observed = dp_sanitize(t.view.observed, cfg.dp, noise);
        t.view.algorithm = Algorithm::dp_fedavg;
      }
      return t;
    }
    case Algorithm::local:
      throw CapabilityError("local-only training sends no messages; there is no transcript to attack");
  }
  throw CapabilityError("unsupported algorithm");
}

/// Attacks the first `run.samples` training rows of client `run.client`.
/// Writes report.json, summary.csv and samples/sample_NNN.json into
/// `out_dir`, which defaults to <run dir>/attack for snapshots stored in
/// <run dir>/snapshots.
inline AttackReport run_attack(const fs::path& snapshot, const AttackRunConfig& run,
                               const std::optional<fs::path>& out_dir) {
  run.attack.validate();
  const SnapshotContents snap = load_snapshot(snapshot);
  const ExperimentConfig& cfg = snap.config;
  if (cfg.algorithm == Algorithm::local) {
    throw CapabilityError("local-only training sends no messages; there is no transcript to attack");
  }
  fs::path dir;
  if (out_dir) {
    dir = *out_dir;
  } else {
    const fs::path parent = snapshot.parent_path();
    dir = (parent.filename() == "snapshots" ? parent.parent_path() : parent) / "attack";
  }

  const LoadedData loaded = load_data(cfg.data);
  check_model_fits(cfg, loaded.data);
  const Federation fed = build_federation(cfg, loaded.data);
  if (run.client >= fed.splits.size()) {
    throw ConfigError("attack client " + std::to_string(run.client) + " does not exist (" +
                      std::to_string(fed.splits.size()) + " clients)");
  }
  const Dataset& train = fed.splits[run.client].train;
  if (run.samples > train.size()) {
    throw ConfigError("attack asks for " + std::to_string(run.samples) + " samples but client " +
                      std::to_string(run.client) + " holds " + std::to_string(train.size()));
  }

  // Public auxiliary data: every row outside the attacked client's shard.
  std::vector<char> own(loaded.data.size(), 0);
  for (std::size_t i : fed.shards[run.client].indices()) own[i] = 1;
  std::vector<std::size_t> aux_rows;
  for (std::size_t i = 0; i < own.size(); ++i)
    if (!own[i]) aux_rows.push_back(i);
  const Dataset aux = aux_rows.empty() ? Dataset{} : loaded.data.subset(aux_rows);

  AttackReport report;
  report.config = run.attack;
  report.algorithm = to_string(cfg.algorithm);
  report.samples.resize(run.samples);
  parallel_for(run.samples, cfg.threads, [&](std::size_t i) {
    Transcript t = transcript_from_snapshot(snap, run.client, train.row(i), train.y[i], loaded.height,
                                            loaded.width, i);
    report.samples[i] = attack_sample(t, aux, run.attack, i);
  });

  write_text(dir / "summary.csv", report.summary_csv());
  nlohmann::json full = report.to_json();
  full["snapshot"] = snapshot.string();
  full["round"] = snap.round;
  full["client"] = run.client;
  for (std::size_t i = 0; i < report.samples.size(); ++i) {
    char name[32];
    std::snprintf(name, sizeof name, "sample_%03zu.json", i);
    write_text(dir / "samples" / name, full["samples"][i].dump() + "\n");
  }
  full.erase("samples");
  full["sample_count"] = report.samples.size();
  write_text(dir / "report.json", full.dump(2) + "\n");
  return report;
}

// ---------------------------------------------------------------------------
// report

inline constexpr const char* kSeriesNames[] = {"train_loss", "test_acc", "grad_sq_norm", "hypernet_drift",
                                               "extractor_drift", "seconds"};

/// Reads metrics.csv, final_accuracy.json and attack/summary.csv (when
/// present) from `run_dir` and writes report/summary.json plus one
/// report/<metric>.csv series per column. Aggregates cover rounds >= 1.
inline nlohmann::json emit_report(const fs::path& run_dir) {
  const fs::path metrics_path = run_dir / "metrics.csv";
  const fs::path acc_path = run_dir / "final_accuracy.json";
  for (const fs::path& p : {metrics_path, acc_path}) {
    if (!fs::is_regular_file(p)) throw IoError("missing input file '" + p.string() + "'");
  }
  const std::vector<MetricsRow> rows = parse_metrics_csv(read_file(metrics_path), metrics_path.string());

  std::vector<const MetricsRow*> means;
  for (const MetricsRow& r : rows)
    if (r.client_id == "_mean") means.push_back(&r);
  if (means.empty()) throw FormatError(metrics_path.string() + ": no _mean rows");

  auto record = [](const MetricsRow& r) {
    nlohmann::json j = {{"round", r.round}};
    for (std::size_t k = 0; k < 6; ++k) j[kSeriesNames[k]] = r.values[k];
    return j;
  };

  std::vector<RoundRecord> trained;
  std::vector<double> sums(6, 0.0);
  for (const MetricsRow* r : means) {
    if (r->round == 0) continue;
    RoundRecord rec;
    rec.round = r->round;
    rec.mean_train_loss = r->values[0];
    rec.mean_test_acc = r->values[1];
    rec.mean_grad_sq_norm = r->values[2];
    rec.hypernet_drift = r->values[3];
    rec.extractor_drift = r->values[4];
    rec.seconds = r->values[5];
    trained.push_back(rec);
    for (std::size_t k = 0; k < 6; ++k) sums[k] += r->values[k];
  }

  nlohmann::json summary;
  summary["rounds"] = trained.size();
  summary["initial"] = means.front()->round == 0 ? record(*means.front()) : nlohmann::json();
  summary["final"] = record(*means.back());
  nlohmann::json avg = nlohmann::json::object();
  for (std::size_t k = 0; k < 6; ++k) {
    avg[kSeriesNames[k]] = trained.empty() ? nlohmann::json() : nlohmann::json(sums[k] / trained.size());
  }
  summary["means"] = avg;

  try {
    summary["final_accuracy"] = nlohmann::json::parse(read_file(acc_path));
  } catch (const nlohmann::json::parse_error&) {
    throw FormatError(acc_path.string() + ": not JSON");
  }

  if (trained.size() >= 2) {
    const ConvergenceSummary s = convergence_stats(trained);
    summary["convergence"] = {{"grad_sq_norm_quartiles", s.grad_sq_norm_quartiles},
                              {"train_loss_quartiles", s.train_loss_quartiles},
                              {"test_acc_quartiles", s.test_acc_quartiles},
                              {"hypernet_drift_quartiles", s.hypernet_drift_quartiles},
                              {"extractor_drift_quartiles", s.extractor_drift_quartiles},
                              {"grad_non_increasing", s.grad_non_increasing},
                              {"loss_non_increasing", s.loss_non_increasing},
                              {"extractor_drift_decreased", s.extractor_drift_decreased}};
  } else {
    summary["convergence"] = nullptr;
  }

  const fs::path attack_csv = run_dir / "attack" / "summary.csv";
  summary["attack"] = nullptr;
  if (fs::is_regular_file(attack_csv)) {
    std::istringstream in(read_file(attack_csv));
    std::string line;
    std::getline(in, line);
    if (line != AttackReport::kCsvHeader) throw FormatError(attack_csv.string() + ": unexpected header");
    // Column means over the rows where the column is filled.
    const char* cols[] = {"psnr", "ssim", "analytic_error", "analytic_psnr", "embedding_residual", "final_loss"};
    std::vector<double> total(6, 0.0);
    std::vector<std::size_t> filled(6, 0);
    std::size_t n = 0;
    std::string method;
    while (std::getline(in, line)) {
      if (line.empty()) continue;
      std::vector<std::string> cells;
      std::stringstream ss(line);
      for (std::string cell; std::getline(ss, cell, ',');) cells.push_back(cell);
      cells.resize(9);
      method = cells[2];
      for (std::size_t k = 0; k < 6; ++k) {
        if (cells[k + 3].empty()) continue;
        total[k] += std::strtod(cells[k + 3].c_str(), nullptr);
        ++filled[k];
      }
      ++n;
    }
    nlohmann::json a = {{"samples", n}, {"method", method}};
    for (std::size_t k = 0; k < 6; ++k) {
      a[std::string("mean_") + cols[k]] = filled[k] ? nlohmann::json(total[k] / filled[k]) : nlohmann::json();
    }
    summary["attack"] = a;
  }

  const fs::path out = run_dir / "report";
  for (std::size_t k = 0; k < 6; ++k) {
    std::string series = std::string("round,") + kSeriesNames[k] + "\n";
    for (const MetricsRow* r : means) series += std::to_string(r->round) + "," + format_double(r->values[k]) + "\n";
    write_text(out / (std::string(kSeriesNames[k]) + ".csv"), series);
  }
  // Per-client test accuracy, one column per client, blank when a client
  // did not train that round.
  std::map<std::size_t, std::map<std::string, double>> by_round;
  std::vector<std::string> ids;
  for (const MetricsRow& r : rows) {
    if (r.client_id == "_mean") continue;
    by_round[r.round][r.client_id] = r.values[1];
    if (std::find(ids.begin(), ids.end(), r.client_id) == ids.end()) ids.push_back(r.client_id);
  }
  std::sort(ids.begin(), ids.end(), [](const std::string& a, const std::string& b) {
    return std::stoull(a) < std::stoull(b);
  });
  std::string per_client = "round";
  for (const std::string& id : ids) per_client += ",client_" + id;
  per_client += "\n";
  for (const auto& [round, vals] : by_round) {
    per_client += std::to_string(round);
    for (const std::string& id : ids) {
      auto it = vals.find(id);
      per_client += "," + (it == vals.end() ? std::string() : format_double(it->second));
    }
    per_client += "\n";
  }
  write_text(out / "client_test_acc.csv", per_client);

  write_text(out / "summary.json", summary.dump(2) + "\n");
  return summary;
}

// ---------------------------------------------------------------------------
// Exit codes

/// 0 success, 1 configuration error, 2 runtime numeric error, 3 I/O error.
inline int exit_code_for(const std::exception& e) {
  if (dynamic_cast<const IoError*>(&e) || dynamic_cast<const FormatError*>(&e) ||
      dynamic_cast<const ConsistencyError*>(&e)) {
    return 3;
  }
  if (dynamic_cast<const ConfigError*>(&e) || dynamic_cast<const DimensionError*>(&e) ||
      dynamic_cast<const CapacityError*>(&e) || dynamic_cast<const CapabilityError*>(&e)) {
    return 1;
  }
  return 2;
}

}  // namespace hyperfl
