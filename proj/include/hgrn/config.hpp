#pragma once

#include <algorithm>
#include <cstdint>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"

#include "hgrn/tensor.hpp"

namespace hgrn {

struct ConfigError : Error {
  using Error::Error;
};

enum class LowerBoundMode { monotone, none, random, decreasing, only };
enum class UntiedInput { one, sigmoid };
enum class Schedule { inverse_sqrt, cosine };
enum class Precision { f32, f64 };
enum class TaskKind { copy, selective_copy, induction, byte_lm };

NLOHMANN_JSON_SERIALIZE_ENUM(LowerBoundMode, {{LowerBoundMode::monotone, "monotone"},
                                              {LowerBoundMode::none, "none"},
                                              {LowerBoundMode::random, "random"},
                                              {LowerBoundMode::decreasing, "decreasing"},
                                              {LowerBoundMode::only, "only"}})
NLOHMANN_JSON_SERIALIZE_ENUM(UntiedInput, {{UntiedInput::one, "one"}, {UntiedInput::sigmoid, "sigmoid"}})
NLOHMANN_JSON_SERIALIZE_ENUM(Schedule, {{Schedule::inverse_sqrt, "inverse_sqrt"}, {Schedule::cosine, "cosine"}})
NLOHMANN_JSON_SERIALIZE_ENUM(Precision, {{Precision::f32, "f32"}, {Precision::f64, "f64"}})
NLOHMANN_JSON_SERIALIZE_ENUM(TaskKind, {{TaskKind::copy, "copy"},
                                        {TaskKind::selective_copy, "selective_copy"},
                                        {TaskKind::induction, "induction"},
                                        {TaskKind::byte_lm, "byte_lm"}})

struct ModelConfig {
  std::size_t layers = 2;
  std::size_t d = 32;
  std::size_t vocab_size = 256;
  std::size_t glu_expansion = 0;  // 0 means 2d
  LowerBoundMode lower_bound_mode = LowerBoundMode::monotone;
  bool use_complex = true;
  bool theta_data_dependent = false;
  bool tie_input_gate = true;
  UntiedInput untied_input = UntiedInput::one;
  bool use_output_gate = true;
  double norm_eps = 1e-5;
  std::size_t seq_len_max = 4096;
  double rope_base = 10000.0;

  std::size_t glu_width() const { return glu_expansion == 0 ? 2 * d : glu_expansion; }
  std::size_t mix_width() const { return use_complex ? 2 * d : d; }

  void validate() const {
    if (layers < 1) throw ConfigError("model.layers must be >= 1");
    if (d < 2 || d % 2 != 0) throw ConfigError("model.d must be even and >= 2, got " + std::to_string(d));
    if (vocab_size < 2) throw ConfigError("model.vocab_size must be >= 2");
    if (glu_width() < d) throw ConfigError("model.glu_expansion must be >= d");
    if (!(norm_eps >= 0)) throw ConfigError("model.norm_eps must be >= 0");
    if (theta_data_dependent && !use_complex)
      throw ConfigError("model.theta_data_dependent requires model.use_complex");
  }
};

NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE(ModelConfig, layers, d, vocab_size, glu_expansion, lower_bound_mode, use_complex,
                                   theta_data_dependent, tie_input_gate, untied_input, use_output_gate, norm_eps,
                                   seq_len_max, rope_base)

struct TrainConfig {
  double peak_lr = 5e-4;
  double beta1 = 0.9;
  double beta2 = 0.98;
  double adam_eps = 1e-8;
  double weight_decay = 0.2;
  std::size_t warmup_steps = 400;
  Schedule schedule = Schedule::inverse_sqrt;
  double grad_clip = 0.0;  // global-norm clip, 0 disables
  std::size_t batch_size = 16;
  std::size_t seq_len = 256;
  std::size_t total_steps = 5000;
  std::uint64_t seed = 1;
  Precision precision = Precision::f32;
  std::size_t log_interval = 100;
  std::size_t eval_interval = 500;
  std::size_t eval_batches = 4;
  bool freeze_theta = false;
  // Optional warm-up stages on shorter sequences before the main run at
  // seq_len: stage i trains curriculum_steps[i] steps at curriculum_lengths[i].
  std::vector<std::size_t> curriculum_lengths;
  std::vector<std::size_t> curriculum_steps;

  void validate() const {
    if (!(peak_lr > 0)) throw ConfigError("train.peak_lr must be > 0");
    if (warmup_steps > total_steps) throw ConfigError("train.warmup_steps must be <= train.total_steps");
    if (batch_size == 0) throw ConfigError("train.batch_size must be >= 1");
    if (seq_len == 0) throw ConfigError("train.seq_len must be >= 1");
    if (log_interval == 0 || eval_interval == 0) throw ConfigError("train intervals must be >= 1");
    if (curriculum_lengths.size() != curriculum_steps.size())
      throw ConfigError("train.curriculum_lengths and train.curriculum_steps must have the same length");
    for (std::size_t i = 0; i < curriculum_lengths.size(); ++i) {
      if (curriculum_lengths[i] == 0 || curriculum_lengths[i] >= seq_len)
        throw ConfigError("train.curriculum_lengths entries must be in [1, seq_len)");
      if (curriculum_steps[i] == 0) throw ConfigError("train.curriculum_steps entries must be >= 1");
    }
  }
};

NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE(TrainConfig, peak_lr, beta1, beta2, adam_eps, weight_decay, warmup_steps, schedule,
                                   grad_clip, batch_size, seq_len, total_steps, seed, precision, log_interval,
                                   eval_interval, eval_batches, freeze_theta, curriculum_lengths,
                                   curriculum_steps)

/// Task section of a run. Sample length comes from train.seq_len.
struct TaskConfig {
  TaskKind kind = TaskKind::byte_lm;
  std::size_t payload_len = 8;
  std::size_t vocab_size = 10;
  std::uint64_t seed = 0;  // 0 follows train.seed
  std::string corpus;
  double split_ratio = 0.9;
};

NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE(TaskConfig, kind, payload_len, vocab_size, seed, corpus, split_ratio)

struct InstrumentConfig {
  std::vector<std::size_t> eval_lengths{256, 512, 1024};
  std::vector<std::size_t> bench_lengths{64, 256, 1024, 4096};
  std::size_t bench_d = 64;
  std::size_t bench_repeats = 5;
  std::string ablate_suite = "lower_bound";
  std::size_t mixing_layer = 0;
  std::vector<std::size_t> mixing_dims{0};
  std::size_t mixing_cap = 512;
  std::size_t parallel_threshold = 512;
  std::size_t threads = 1;
  std::size_t stats_batches = 4;
  double gradcheck_tolerance = 1e-4;
};

NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE(InstrumentConfig, eval_lengths, bench_lengths, bench_d, bench_repeats, ablate_suite,
                                   mixing_layer, mixing_dims, mixing_cap, parallel_threshold, threads, stats_batches,
                                   gradcheck_tolerance)

/// Full merged configuration of one run.
struct RunConfig {
  ModelConfig model;
  TrainConfig train;
  TaskConfig task;
  InstrumentConfig instrument;

  std::uint64_t data_seed() const { return task.seed == 0 ? train.seed : task.seed; }

  void validate() const {
    model.validate();
    train.validate();
    if (task.kind == TaskKind::byte_lm && model.vocab_size < 256)
      throw ConfigError("model.vocab_size must be >= 256 for byte_lm");
    if (task.kind != TaskKind::byte_lm && model.vocab_size < task.vocab_size)
      throw ConfigError("model.vocab_size must be >= task.vocab_size");
  }
};

NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE(RunConfig, model, train, task, instrument)

namespace detail {

// Rejects keys of `doc` that do not exist in `schema`, naming the full path.
inline void check_keys(const nlohmann::json& doc, const nlohmann::json& schema, const std::string& prefix) {
  if (!doc.is_object()) return;
  for (auto it = doc.begin(); it != doc.end(); ++it) {
    const std::string path = prefix.empty() ? it.key() : prefix + "." + it.key();
    if (!schema.contains(it.key())) throw ConfigError("unknown config key: " + path);
    if (schema[it.key()].is_object()) check_keys(it.value(), schema[it.key()], path);
  }
}

inline nlohmann::json parse_override_value(const nlohmann::json& current, const std::string& key,
                                           const std::string& text) {
  try {
    switch (current.type()) {
      case nlohmann::json::value_t::string:
        return text;
      case nlohmann::json::value_t::boolean:
        if (text == "true" || text == "1") return true;
        if (text == "false" || text == "0") return false;
        break;
      case nlohmann::json::value_t::number_unsigned:
      case nlohmann::json::value_t::number_integer: {
        std::size_t used = 0;
        if (text.starts_with('-')) break;
        const auto v = std::stoull(text, &used);
        if (used == text.size()) return v;
        break;
      }
      case nlohmann::json::value_t::number_float: {
        std::size_t used = 0;
        const auto v = std::stod(text, &used);
        if (used == text.size()) return v;
        break;
      }
      case nlohmann::json::value_t::array: {
        nlohmann::json arr = nlohmann::json::array();
        std::stringstream ss(text);
        std::string item;
        while (std::getline(ss, item, ','))
          if (!item.empty()) arr.push_back(std::stoull(item));
        return arr;
      }
      default:
        break;
    }
  } catch (const std::exception&) {
  }
  throw ConfigError("invalid value '" + text + "' for config key " + key);
}

}  // namespace detail

inline RunConfig config_from_json(const nlohmann::json& doc) {
  const nlohmann::json schema = RunConfig{};
  detail::check_keys(doc, schema, "");
  nlohmann::json merged = schema;
  merged.merge_patch(doc);
  try {
    RunConfig cfg = merged.get<RunConfig>();
    // enum names outside the known set decode silently; catch them on the way back
    const nlohmann::json back = cfg;
    if (const auto patch = nlohmann::json::diff(merged, back); !patch.empty()) {
      std::string key = patch[0]["path"].get<std::string>().substr(1);
      std::replace(key.begin(), key.end(), '/', '.');
      throw ConfigError("invalid value " + merged[nlohmann::json::json_pointer(patch[0]["path"].get<std::string>())].dump() +
                        " for config key " + key);
    }
    cfg.validate();
    return cfg;
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("malformed config: ") + e.what());
  }
}

/// Applies "section.key=value" overrides; the key must already exist.
inline RunConfig apply_overrides(const RunConfig& base, const std::vector<std::string>& overrides) {
  nlohmann::json doc = base;
  for (const auto& ov : overrides) {
    const auto eq = ov.find('=');
    if (eq == std::string::npos) throw ConfigError("override must be key=value: " + ov);
    const std::string key = ov.substr(0, eq), value = ov.substr(eq + 1);
    std::string path = "/";
    for (char ch : key) path += ch == '.' ? '/' : ch;
    const nlohmann::json::json_pointer ptr(path);
    if (!doc.contains(ptr) || doc[ptr].is_object()) throw ConfigError("unknown config key: " + key);
    doc[ptr] = detail::parse_override_value(doc[ptr], key, value);
  }
  return config_from_json(doc);
}

inline RunConfig load_config(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw ConfigError("cannot open config file: " + path);
  nlohmann::json doc;
  try {
    doc = nlohmann::json::parse(is);
  } catch (const nlohmann::json::parse_error& e) {
    throw ConfigError("cannot parse config file " + path + ": " + e.what());
  }
  return config_from_json(doc);
}

inline std::string config_to_text(const RunConfig& cfg) { return nlohmann::json(cfg).dump(2) + "\n"; }

}  // namespace hgrn
