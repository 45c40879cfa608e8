#pragma once

// Experiment configuration: strict JSON parsing (unknown keys are errors,
// messages carry the offending line) and a canonical serialization that
// parses back to the same value.

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <limits>
#include <map>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

#include "hyperfl/attack.hpp"
#include "hyperfl/checkpoint.hpp"
#include "hyperfl/data.hpp"
#include "hyperfl/errors.hpp"
#include "hyperfl/fedsim.hpp"
#include "hyperfl/partition.hpp"

namespace hyperfl {

using json = nlohmann::json;

namespace detail {

/// Maps JSON pointers to the 1-based source line of the member key (or the
/// array element) they name. Assumes the text already parsed successfully.
class JsonLineIndex {
 public:
  explicit JsonLineIndex(std::string_view text) : s_(text) {
    value("");
  }

  /// Line of `pointer`, falling back to the closest ancestor; 0 if unknown.
  std::size_t line(std::string pointer) const {
    for (;;) {
      if (auto it = lines_.find(pointer); it != lines_.end()) return it->second;
      if (pointer.empty()) return 0;
      pointer.resize(pointer.rfind('/'));
    }
  }

  static std::string escape(const std::string& key) {
    std::string out;
    for (char c : key) {
      if (c == '~') out += "~0";
      else if (c == '/') out += "~1";
      else out += c;
    }
    return out;
  }

 private:
  void ws() {
    while (pos_ < s_.size() && (s_[pos_] == ' ' || s_[pos_] == '\t' || s_[pos_] == '\n' || s_[pos_] == '\r')) {
      if (s_[pos_] == '\n') ++line_;
      ++pos_;
    }
  }

  std::string string() {
    std::string out;
    ++pos_;  // opening quote
    while (pos_ < s_.size() && s_[pos_] != '"') {
      if (s_[pos_] == '\\' && pos_ + 1 < s_.size()) {
        ++pos_;
        out += s_[pos_] == 'n' ? '\n' : s_[pos_] == 't' ? '\t' : s_[pos_];
      } else {
        out += s_[pos_];
      }
      ++pos_;
    }
    ++pos_;
    return out;
  }

  void value(const std::string& ptr) {
    ws();
    lines_.emplace(ptr, line_);
    if (pos_ >= s_.size()) return;
    const char c = s_[pos_];
    if (c == '{' || c == '[') {
      const bool object = c == '{';
      ++pos_;
      ws();
      std::size_t index = 0;
      while (pos_ < s_.size() && s_[pos_] != (object ? '}' : ']')) {
        std::string child;
        if (object) {
          const std::size_t key_line = line_;
          child = ptr + "/" + escape(string());
          lines_.emplace(child, key_line);
          ws();
          ++pos_;  // ':'
        } else {
          child = ptr + "/" + std::to_string(index++);
        }
        value(child);
        ws();
        if (pos_ < s_.size() && s_[pos_] == ',') ++pos_;
        ws();
      }
      ++pos_;
    } else if (c == '"') {
      string();
    } else {
      while (pos_ < s_.size() && std::string_view(",]} \t\r\n").find(s_[pos_]) == std::string_view::npos) ++pos_;
    }
  }

  std::string_view s_;
  std::size_t pos_ = 0;
  std::size_t line_ = 1;
  std::map<std::string, std::size_t> lines_;
};

/// Where a configuration came from, for error messages.
struct ConfigSource {
  std::string name = "config";
  std::optional<JsonLineIndex> lines;

  [[noreturn]] void fail(const std::string& pointer, const std::string& msg) const {
    std::string where = name;
    if (lines) {
      if (std::size_t l = lines->line(pointer)) where += ":" + std::to_string(l);
    }
    throw ConfigError(where + ": " + (pointer.empty() ? std::string() : pointer + ": ") + msg);
  }
};

/// One JSON object being consumed. Every key must be read before finish().
class Fields {
 public:
  Fields(const json& j, std::string pointer, const ConfigSource& src)
      : j_(j), ptr_(std::move(pointer)), src_(src) {
    if (!j_.is_object()) src_.fail(ptr_, "expected an object");
  }

  bool has(const char* key) const { return j_.contains(key); }

  template <typename T>
  void get(const char* key, T& out) {
    seen_.push_back(key);
    auto it = j_.find(key);
    if (it != j_.end()) read(*it, ptr_ + "/" + key, out);
  }

  template <typename T>
  void require(const char* key, T& out) {
    if (!has(key)) src_.fail(ptr_, std::string("missing required key '") + key + "'");
    get(key, out);
  }

  /// Like get, but a JSON null stores `null_value`.
  void get_or_null(const char* key, double& out, double null_value) {
    if (auto it = j_.find(key); it != j_.end() && it->is_null()) {
      seen_.push_back(key);
      out = null_value;
      return;
    }
    get(key, out);
  }

  Fields child(const char* key) {
    seen_.push_back(key);
    return Fields(j_.at(key), ptr_ + "/" + key, src_);
  }

  void fail(const char* key, const std::string& msg) const { src_.fail(ptr_ + "/" + key, msg); }

  void finish() const {
    for (const auto& [key, _] : j_.items()) {
      if (std::find(seen_.begin(), seen_.end(), key) == seen_.end()) {
        src_.fail(ptr_ + "/" + JsonLineIndex::escape(key), "unknown key '" + key + "'");
      }
    }
  }

 private:
  void read(const json& v, const std::string& p, double& out) const {
    if (!v.is_number()) src_.fail(p, "expected a number");
    out = v.get<double>();
  }
  void read(const json& v, const std::string& p, std::size_t& out) const {
    if (!v.is_number_unsigned()) src_.fail(p, "expected a nonnegative integer");
    out = v.get<std::size_t>();
  }
  void read(const json& v, const std::string& p, bool& out) const {
    if (!v.is_boolean()) src_.fail(p, "expected true or false");
    out = v.get<bool>();
  }
  void read(const json& v, const std::string& p, std::string& out) const {
    if (!v.is_string()) src_.fail(p, "expected a string");
    out = v.get<std::string>();
  }
  void read(const json& v, const std::string& p, std::vector<std::size_t>& out) const {
    if (!v.is_array()) src_.fail(p, "expected an array of nonnegative integers");
    out.clear();
    for (std::size_t i = 0; i < v.size(); ++i) {
      std::size_t x = 0;
      read(v[i], p + "/" + std::to_string(i), x);
      out.push_back(x);
    }
  }
  void read(const json& v, const std::string& p, std::vector<std::vector<std::size_t>>& out) const {
    if (!v.is_array()) src_.fail(p, "expected an array of integer arrays");
    out.clear();
    for (std::size_t i = 0; i < v.size(); ++i) {
      out.emplace_back();
      read(v[i], p + "/" + std::to_string(i), out.back());
    }
  }
  template <typename E>
    requires std::is_enum_v<E>
  void read(const json& v, const std::string& p, E& out) const {
    std::string s;
    read(v, p, s);
    try {
      out = parse_enum<E>(s);
    } catch (const ConfigError& e) {
      src_.fail(p, e.what());
    }
  }

  template <typename E>
  static E parse_enum(const std::string& s);

  const json& j_;
  std::string ptr_;
  const ConfigSource& src_;
  std::vector<std::string> seen_;
};

template <typename E>
E enum_from_json_string(const std::string& s, const char* what) {
  const E value = json(s).get<E>();
  if (json(value).get<std::string>() != s) throw ConfigError(std::string("unknown ") + what + " '" + s + "'");
  return value;
}

template <>
inline Algorithm Fields::parse_enum<Algorithm>(const std::string& s) {
  return algorithm_from(s);
}
template <>
inline LayerKind Fields::parse_enum<LayerKind>(const std::string& s) {
  return layer_kind_from(s);
}
template <>
inline GradLoss Fields::parse_enum<GradLoss>(const std::string& s) {
  return enum_from_json_string<GradLoss>(s, "gradient loss");
}
template <>
inline AttackInit Fields::parse_enum<AttackInit>(const std::string& s) {
  return enum_from_json_string<AttackInit>(s, "attack init");
}
template <>
inline AttackOptimizer Fields::parse_enum<AttackOptimizer>(const std::string& s) {
  return enum_from_json_string<AttackOptimizer>(s, "attack optimizer");
}

}  // namespace detail

enum class DataKind { synthetic, glyphs, idx };

NLOHMANN_JSON_SERIALIZE_ENUM(DataKind,
                             {{DataKind::synthetic, "synthetic"}, {DataKind::glyphs, "glyphs"}, {DataKind::idx, "idx"}})

template <>
inline DataKind detail::Fields::parse_enum<DataKind>(const std::string& s) {
  return detail::enum_from_json_string<DataKind>(s, "data kind");
}

struct DataConfig {
  DataKind kind = DataKind::synthetic;
  SynthSpec synthetic;
  GlyphSpec glyphs;
  std::string images;
  std::string labels;
};

struct PartitionConfig {
  std::size_t clients = 20;
  PartitionSpec spec;
  /// Each shard is split train:test at this ratio.
  double train_test_ratio = 5.0;
};

/// Widths of the two dense stacks. The extractor ends in its activation; the
/// classifier ends in the softmax cross-entropy head.
struct ModelConfig {
  std::vector<std::size_t> extractor{32, 16};
  LayerKind extractor_activation = LayerKind::leaky_relu;
  std::vector<std::size_t> classifier{16, 3};
  LayerKind classifier_activation = LayerKind::relu;

  NetSpec extractor_spec() const { return make_mlp("fe", extractor, extractor_activation, true, false); }
  NetSpec classifier_spec() const { return make_mlp("cls", classifier, classifier_activation, false, true); }
};

/// An attack run: the optimizer settings plus which samples to target.
struct AttackRunConfig {
  AttackConfig attack;
  std::size_t samples = 50;
  std::size_t client = 0;
};

struct ExperimentConfig {
  Algorithm algorithm = Algorithm::hyperfl;
  DataConfig data;
  PartitionConfig partition;
  ModelConfig model;
  /// The target is derived from the model and never appears in the file.
  HypernetSpec hypernet;
  RoundConfig round;
  DPConfig dp;
  std::optional<AttackRunConfig> attack;
  std::uint64_t seed = 0;
  std::size_t threads = 1;
  std::string output_dir = "runs/default";
  /// Snapshot every N rounds; 0 keeps only the final state.
  std::size_t snapshot_every = 0;
  /// Fill the `seconds` column. Off by default so reruns are byte-identical.
  bool record_wall_clock = false;

  SimConfig sim() const {
    SimConfig s;
    s.algorithm = algorithm;
    s.extractor = model.extractor_spec();
    s.classifier = model.classifier_spec();
    s.hypernet = hypernet;
    s.round = round;
    s.dp = dp;
    s.seed = seed;
    s.threads = threads;
    return s;
  }
};

// ---------------------------------------------------------------------------
// Serialization

inline json optim_to_json(const OptimConfig& o) {
  return {{"learning_rate", o.learning_rate}, {"momentum", o.momentum}, {"weight_decay", o.weight_decay}};
}

inline json attack_run_to_json(const AttackRunConfig& a) {
  json j = to_json(a.attack);
  j["samples"] = a.samples;
  j["client"] = a.client;
  return j;
}

inline json to_json(const ExperimentConfig& c) {
  json data = {{"kind", c.data.kind}};
  switch (c.data.kind) {
    case DataKind::synthetic:
      data.update({{"num_classes", c.data.synthetic.num_classes},
                   {"dim", c.data.synthetic.dim},
                   {"per_class", c.data.synthetic.per_class},
                   {"separation", c.data.synthetic.separation},
                   {"seed", c.data.synthetic.seed}});
      break;
    case DataKind::glyphs:
      data.update({{"num_classes", c.data.glyphs.num_classes},
                   {"side", c.data.glyphs.side},
                   {"per_class", c.data.glyphs.per_class},
                   {"strokes", c.data.glyphs.strokes},
                   {"max_shift", c.data.glyphs.max_shift},
                   {"noise", c.data.glyphs.noise},
                   {"seed", c.data.glyphs.seed}});
      break;
    case DataKind::idx: data.update({{"images", c.data.images}, {"labels", c.data.labels}}); break;
  }
  const RoundConfig& r = c.round;
  json j = {
      {"algorithm", to_string(c.algorithm)},
      {"seed", c.seed},
      {"threads", c.threads},
      {"output_dir", c.output_dir},
      {"snapshot_every", c.snapshot_every},
      {"record_wall_clock", c.record_wall_clock},
      {"data", data},
      {"partition",
       {{"clients", c.partition.clients},
        {"uniform_percent", c.partition.spec.uniform_percent},
        {"samples_per_client", c.partition.spec.samples_per_client},
        {"dominant_sets", c.partition.spec.dominant_sets},
        {"train_test_ratio", c.partition.train_test_ratio}}},
      {"model",
       {{"extractor", c.model.extractor},
        {"extractor_activation", to_string(c.model.extractor_activation)},
        {"classifier", c.model.classifier},
        {"classifier_activation", to_string(c.model.classifier_activation)}}},
      {"hypernet",
       {{"embedding_dim", c.hypernet.embedding_dim},
        {"hidden_dim", c.hypernet.hidden_dim},
        {"hidden_bias", c.hypernet.hidden_bias},
        {"activation", to_string(c.hypernet.activation)}}},
      {"round",
       {{"rounds", r.rounds},
        {"local_epochs", r.local_epochs},
        {"classifier_epochs", r.classifier_epochs},
        {"batch_size", r.batch_size},
        {"sample_rate", r.sample_rate},
        {"server_learning_rate", r.server_learning_rate},
        {"eta_g", optim_to_json(r.eta_g)},
        {"eta_h", optim_to_json(r.eta_h)},
        {"eta_v", optim_to_json(r.eta_v)}}},
      // JSON has no infinity; null stands for "no clipping".
      {"dp",
       {{"clip_norm", std::isinf(c.dp.clip_norm) ? json() : json(c.dp.clip_norm)}, {"sigma", c.dp.sigma}}},
  };
  if (c.attack) j["attack"] = attack_run_to_json(*c.attack);
  return j;
}

inline bool operator==(const ExperimentConfig& a, const ExperimentConfig& b) { return to_json(a) == to_json(b); }

// ---------------------------------------------------------------------------
// Parsing

namespace detail {

inline void read_optim(Fields f, OptimConfig& o) {
  f.get("learning_rate", o.learning_rate);
  f.get("momentum", o.momentum);
  f.get("weight_decay", o.weight_decay);
  f.finish();
}

inline AttackRunConfig read_attack_run(Fields f) {
  AttackRunConfig a;
  AttackConfig& c = a.attack;
  f.get("iterations", c.iterations);
  f.get("step_size", c.step_size);
  f.get("loss", c.loss);
  f.get("tv_alpha", c.tv_alpha);
  f.get("init", c.init);
  f.get("optimizer", c.optimizer);
  std::size_t seed = c.seed;
  f.get("seed", seed);
  c.seed = seed;
  f.get("clamp", c.clamp);
  f.get("trace_every", c.trace_every);
  f.get("embedding_iterations", c.embedding_iterations);
  f.get("embedding_step", c.embedding_step);
  f.get("samples", a.samples);
  f.get("client", a.client);
  f.finish();
  try {
    c.validate();
  } catch (const ConfigError& e) {
    f.fail("", e.what());
  }
  return a;
}

inline json parse_text(std::string_view text, const std::string& name) {
  try {
    return json::parse(text);
  } catch (const json::parse_error& e) {
    std::size_t line = 1, col = 1;
    for (std::size_t i = 0; i + 1 < e.byte && i < text.size(); ++i) {
      if (text[i] == '\n') {
        ++line;
        col = 1;
      } else {
        ++col;
      }
    }
    throw ConfigError(name + ":" + std::to_string(line) + ":" + std::to_string(col) + ": invalid JSON");
  }
}

}  // namespace detail

/// Parses an experiment from an already-parsed JSON value. `src` supplies the
/// file name and line index for messages.
inline ExperimentConfig experiment_from_json(const json& j, const detail::ConfigSource& src = {}) {
  using detail::Fields;
  ExperimentConfig c;
  Fields top(j, "", src);
  top.require("algorithm", c.algorithm);
  std::size_t seed = 0;
  top.get("seed", seed);
  c.seed = seed;
  top.get("threads", c.threads);
  top.get("output_dir", c.output_dir);
  top.get("snapshot_every", c.snapshot_every);
  top.get("record_wall_clock", c.record_wall_clock);
  if (c.threads == 0) top.fail("threads", "must be at least 1");
  if (c.output_dir.empty()) top.fail("output_dir", "must not be empty");

  if (top.has("data")) {
    Fields d = top.child("data");
    d.require("kind", c.data.kind);
    std::size_t data_seed = 0;
    switch (c.data.kind) {
      case DataKind::synthetic:
        d.get("num_classes", c.data.synthetic.num_classes);
        d.get("dim", c.data.synthetic.dim);
        d.get("per_class", c.data.synthetic.per_class);
        d.get("separation", c.data.synthetic.separation);
        d.get("seed", data_seed);
        c.data.synthetic.seed = data_seed;
        break;
      case DataKind::glyphs:
        d.get("num_classes", c.data.glyphs.num_classes);
        d.get("side", c.data.glyphs.side);
        d.get("per_class", c.data.glyphs.per_class);
        d.get("strokes", c.data.glyphs.strokes);
        d.get("max_shift", c.data.glyphs.max_shift);
        d.get("noise", c.data.glyphs.noise);
        d.get("seed", data_seed);
        c.data.glyphs.seed = data_seed;
        break;
      case DataKind::idx:
        d.require("images", c.data.images);
        d.require("labels", c.data.labels);
        break;
    }
    d.finish();
  }

  if (top.has("partition")) {
    Fields p = top.child("partition");
    p.get("clients", c.partition.clients);
    p.get("uniform_percent", c.partition.spec.uniform_percent);
    p.get("samples_per_client", c.partition.spec.samples_per_client);
    p.get("train_test_ratio", c.partition.train_test_ratio);
    if (p.has("dominant_sets") && p.has("dominant")) {
      p.fail("dominant", "give either dominant_sets or dominant, not both");
    }
    p.get("dominant_sets", c.partition.spec.dominant_sets);
    if (p.has("dominant")) {
      // Generated form: `groups` sets of `set_size` consecutive classes.
      Fields g = p.child("dominant");
      std::size_t groups = 0, size = 0, stride = 1, classes = 0;
      g.require("groups", groups);
      g.require("set_size", size);
      g.get("stride", stride);
      g.require("num_classes", classes);
      g.finish();
      if (classes == 0) p.fail("dominant", "num_classes must be positive");
      c.partition.spec.dominant_sets = consecutive_dominant_sets(groups, size, stride, classes);
    }
    p.finish();
    if (c.partition.clients == 0) p.fail("clients", "must be at least 1");
    if (!(c.partition.train_test_ratio > 0.0)) p.fail("train_test_ratio", "must be positive");
    if (!(c.partition.spec.uniform_percent >= 0.0 && c.partition.spec.uniform_percent <= 100.0)) {
      p.fail("uniform_percent", "must be in [0, 100]");
    }
    if (c.partition.spec.samples_per_client == 0) p.fail("samples_per_client", "must be positive");
  }

  if (top.has("model")) {
    Fields m = top.child("model");
    m.get("extractor", c.model.extractor);
    m.get("extractor_activation", c.model.extractor_activation);
    m.get("classifier", c.model.classifier);
    m.get("classifier_activation", c.model.classifier_activation);
    m.finish();
    if (c.model.extractor.size() < 2) m.fail("extractor", "needs at least two widths");
    if (c.model.classifier.size() < 2) m.fail("classifier", "needs at least two widths");
    if (c.model.extractor.back() != c.model.classifier.front()) {
      m.fail("classifier", "first width must equal the extractor's last width");
    }
    for (std::size_t w : c.model.extractor)
      if (w == 0) m.fail("extractor", "widths must be positive");
    for (std::size_t w : c.model.classifier)
      if (w == 0) m.fail("classifier", "widths must be positive");
  }

  if (top.has("hypernet")) {
    Fields h = top.child("hypernet");
    h.get("embedding_dim", c.hypernet.embedding_dim);
    h.get("hidden_dim", c.hypernet.hidden_dim);
    h.get("hidden_bias", c.hypernet.hidden_bias);
    h.get("activation", c.hypernet.activation);
    h.finish();
    if (c.hypernet.embedding_dim == 0) h.fail("embedding_dim", "must be positive");
    if (c.hypernet.hidden_dim == 0) h.fail("hidden_dim", "must be positive");
    if (c.hypernet.activation != LayerKind::relu && c.hypernet.activation != LayerKind::leaky_relu) {
      h.fail("activation", "must be relu or leaky_relu");
    }
  }

  if (top.has("round")) {
    Fields r = top.child("round");
    RoundConfig& rc = c.round;
    r.get("rounds", rc.rounds);
    r.get("local_epochs", rc.local_epochs);
    r.get("classifier_epochs", rc.classifier_epochs);
    r.get("batch_size", rc.batch_size);
    r.get("sample_rate", rc.sample_rate);
    r.get("server_learning_rate", rc.server_learning_rate);
    using Slot = std::pair<const char*, OptimConfig*>;
    for (auto [key, opt] : {Slot{"eta_g", &rc.eta_g}, Slot{"eta_h", &rc.eta_h}, Slot{"eta_v", &rc.eta_v}}) {
      if (r.has(key)) detail::read_optim(r.child(key), *opt);
    }
    r.finish();
    try {
      rc.validate();
    } catch (const ConfigError& e) {
      src.fail("/round", e.what());
    }
  }

  if (top.has("dp")) {
    Fields d = top.child("dp");
    d.get_or_null("clip_norm", c.dp.clip_norm, std::numeric_limits<double>::infinity());
    d.get("sigma", c.dp.sigma);
    d.finish();
    try {
      c.dp.validate();
    } catch (const ConfigError& e) {
      src.fail("/dp", e.what());
    }
  }

  if (top.has("attack")) c.attack = detail::read_attack_run(top.child("attack"));
  top.finish();

  if (c.algorithm == Algorithm::dp_fedavg && c.dp.sigma > 0.0 && std::isinf(c.dp.clip_norm)) {
    src.fail("/dp", "noise needs a finite clip_norm");
  }
  return c;
}

inline ExperimentConfig parse_experiment(std::string_view text, const std::string& name = "config") {
  json j = detail::parse_text(text, name);
  detail::ConfigSource src{name, detail::JsonLineIndex(text)};
  return experiment_from_json(j, src);
}

inline ExperimentConfig load_experiment(const std::filesystem::path& path) {
  return parse_experiment(read_file(path), path.string());
}

inline AttackRunConfig parse_attack_run(std::string_view text, const std::string& name = "attack config") {
  json j = detail::parse_text(text, name);
  detail::ConfigSource src{name, detail::JsonLineIndex(text)};
  return detail::read_attack_run(detail::Fields(j, "", src));
}

inline AttackRunConfig load_attack_run(const std::filesystem::path& path) {
  return parse_attack_run(read_file(path), path.string());
}

/// Applies a HYPERFL_SEED value. Empty or null leaves the config alone.
inline void apply_seed_override(ExperimentConfig& cfg, const char* value) {
  if (!value || !*value) return;
  const std::string s(value);
  std::size_t used = 0;
  unsigned long long seed = 0;
  try {
    if (s.front() == '-') throw std::invalid_argument("negative");
    seed = std::stoull(s, &used, 10);
  } catch (const std::exception&) {
    used = 0;
  }
  if (used != s.size()) throw ConfigError("HYPERFL_SEED must be a nonnegative integer, got '" + s + "'");
  cfg.seed = seed;
}

}  // namespace hyperfl
