#pragma once

// Run configuration files. A JSON document picks a preset ("desk" or
// "paper") and overrides individual keys:
//
//   {"preset": "desk", "mode": "grace_supervised", "dataset": "toy.jsonl",
//    "seed": 7, "train": {"rollouts": 8}, "optimizer": {"lr": 5e-4}}
//
// Unknown keys are errors. dump_config() writes every key, so the dump
// reproduces the run when loaded again.

#include <algorithm>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"

#include "grace/corpus.hpp"
#include "grace/errors.hpp"
#include "grace/model.hpp"
#include "grace/trainer.hpp"

namespace grace {

struct RunConfig {
  std::string preset = "desk";
  std::string dataset;  // JSONL path, resolved against the config file's directory
  std::uint64_t seed = 0;
  PolicyConfig model;
  TrainConfig train;
  CorpusOptions eval_corpus;

  void validate() const {
    model.validate();
    train.validate();
    const auto need = train.max_prompt_len + train.reward.max_response_len;
    if (need > static_cast<std::size_t>(model.max_seq_len)) {
      throw ConfigError("max_seq_len (" + std::to_string(model.max_seq_len) +
                        ") must be >= max_prompt_len + max_response_len (" +
                        std::to_string(need) + ")");
    }
  }

  /// Propagates the run seed into the model initializer and the trainer.
  void apply_seed(std::uint64_t s) {
    seed = s;
    model.rng_seed = s;
    train.global_seed = s;
  }
};

/// Desk scale: 4-layer d=128 policy, B=8, K=4, 300 steps over the bundled
/// 200-triple dataset.
inline RunConfig desk_preset() {
  RunConfig c;
  c.preset = "desk";
  c.model.d_model = 128;
  c.model.n_layers = 4;
  c.model.n_heads = 4;
  c.model.d_ff = 512;
  c.model.max_seq_len = 1536;
  c.train.batch_size = 8;
  c.train.rollouts = 4;
  c.train.epochs = 12;
  c.train.reward.lambda1 = 0.2;
  c.train.reward.lambda2 = 0.2;
  c.train.reward.tau = 10.0;
  c.train.reward.gamma = 1.0;
  c.train.reward.max_response_len = 256;
  c.train.max_prompt_len = 256;
  c.train.adamw.lr = 5e-5;
  c.apply_seed(0);
  return c;
}

/// Hyperparameters of the original large-model setup on the desk-size model.
inline RunConfig paper_preset() {
  RunConfig c = desk_preset();
  c.preset = "paper";
  c.model.max_seq_len = 3072;
  c.train.batch_size = 64;
  c.train.rollouts = 8;
  c.train.epochs = 2;
  c.train.max_steps = 0;
  c.train.reward.lambda1 = 0.2;
  c.train.reward.lambda2 = 0.2;
  c.train.reward.tau = 10.0;
  c.train.reward.gamma = 1.0;
  c.train.max_prompt_len = 1024;
  c.train.reward.max_response_len = 2048;
  c.train.adamw = AdamWConfig{1e-6, 0.9, 0.999, 1e-8, 0.0};
  return c;
}

inline RunConfig preset_config(const std::string& name) {
  if (name == "desk") return desk_preset();
  if (name == "paper") return paper_preset();
  throw ConfigError("unknown preset '" + name + "' (expected desk or paper)");
}

namespace config_detail {

using Json = nlohmann::ordered_json;

struct Field {
  std::string section;  // "" for top level
  std::string key;
  std::function<void(RunConfig&, const Json&)> set;
  std::function<Json(const RunConfig&)> get;
};

template <typename T>
T as(const Json& j, const std::string& key) {
  try {
    if constexpr (std::is_same_v<T, bool>) {
      if (!j.is_boolean()) throw ConfigError("");
    } else if constexpr (std::is_integral_v<T>) {
      if (!j.is_number_integer()) throw ConfigError("");
      if constexpr (std::is_unsigned_v<T>) {
        if (j.get<long long>() < 0) throw ConfigError("");
      }
    } else if constexpr (std::is_floating_point_v<T>) {
      if (!j.is_number()) throw ConfigError("");
    } else {
      if (!j.is_string()) throw ConfigError("");
    }
    return j.get<T>();
  } catch (const std::exception&) {
    const char* want = std::is_same_v<T, bool>        ? "a boolean"
                       : std::is_unsigned_v<T>        ? "a non-negative integer"
                       : std::is_integral_v<T>        ? "an integer"
                       : std::is_floating_point_v<T> ? "a number"
                                                      : "a string";
    throw ConfigError("key '" + key + "' must be " + want + ", got " + j.dump());
  }
}

#define GRACE_FIELD(SEC, KEY, TYPE, EXPR)                                              \
  Field {                                                                              \
    SEC, KEY, [](RunConfig& c, const Json& j) { EXPR = as<TYPE>(j, KEY); },            \
        [](const RunConfig& c) { return Json(EXPR); }                                  \
  }

inline const std::vector<Field>& fields() {
  static const std::vector<Field> f = {
      Field{"", "mode",
            [](RunConfig& c, const Json& j) { c.train.mode = parse_mode(as<std::string>(j, "mode")); },
            [](const RunConfig& c) { return Json(mode_name(c.train.mode)); }},
      Field{"", "algo",
            [](RunConfig& c, const Json& j) { c.train.algo = parse_algo(as<std::string>(j, "algo")); },
            [](const RunConfig& c) { return Json(algo_name(c.train.algo)); }},
      GRACE_FIELD("", "dataset", std::string, c.dataset),
      Field{"", "seed",
            [](RunConfig& c, const Json& j) { c.apply_seed(as<std::uint64_t>(j, "seed")); },
            [](const RunConfig& c) { return Json(c.seed); }},

      GRACE_FIELD("model", "d_model", int, c.model.d_model),
      GRACE_FIELD("model", "n_layers", int, c.model.n_layers),
      GRACE_FIELD("model", "n_heads", int, c.model.n_heads),
      GRACE_FIELD("model", "d_ff", int, c.model.d_ff),
      GRACE_FIELD("model", "max_seq_len", int, c.model.max_seq_len),
      GRACE_FIELD("model", "tie_embeddings", bool, c.model.tie_embeddings),
      GRACE_FIELD("model", "pool_pre_final_norm", bool, c.model.pool_pre_final_norm),

      GRACE_FIELD("train", "batch_size", std::size_t, c.train.batch_size),
      GRACE_FIELD("train", "rollouts", std::size_t, c.train.rollouts),
      GRACE_FIELD("train", "epochs", std::size_t, c.train.epochs),
      GRACE_FIELD("train", "max_steps", std::size_t, c.train.max_steps),
      GRACE_FIELD("train", "lambda1", double, c.train.reward.lambda1),
      GRACE_FIELD("train", "lambda2", double, c.train.reward.lambda2),
      GRACE_FIELD("train", "tau", double, c.train.reward.tau),
      GRACE_FIELD("train", "gamma", double, c.train.reward.gamma),
      GRACE_FIELD("train", "tau_cl", double, c.train.tau_cl),
      GRACE_FIELD("train", "max_prompt_len", std::size_t, c.train.max_prompt_len),
      GRACE_FIELD("train", "max_response_len", std::size_t, c.train.reward.max_response_len),
      GRACE_FIELD("train", "temperature", double, c.train.temperature),
      Field{"train", "pooling",
            [](RunConfig& c, const Json& j) { c.train.pooling = parse_pooling(as<std::string>(j, "pooling")); },
            [](const RunConfig& c) { return Json(pooling_name(c.train.pooling)); }},
      Field{"train", "negatives",
            [](RunConfig& c, const Json& j) {
              const auto s = as<std::string>(j, "negatives");
              if (s == "sum") c.train.reward.negatives = NegativesAggregation::kSum;
              else if (s == "mean") c.train.reward.negatives = NegativesAggregation::kMean;
              else throw ConfigError("key 'negatives' must be \"sum\" or \"mean\", got " + j.dump());
            },
            [](const RunConfig& c) {
              return Json(c.train.reward.negatives == NegativesAggregation::kSum ? "sum" : "mean");
            }},
      Field{"train", "loss_norm",
            [](RunConfig& c, const Json& j) {
              const auto s = as<std::string>(j, "loss_norm");
              if (s == "sum") c.train.loss_norm = LossNormalization::kSum;
              else if (s == "mean") c.train.loss_norm = LossNormalization::kMean;
              else throw ConfigError("key 'loss_norm' must be \"sum\" or \"mean\", got " + j.dump());
            },
            [](const RunConfig& c) {
              return Json(c.train.loss_norm == LossNormalization::kSum ? "sum" : "mean");
            }},
      GRACE_FIELD("train", "clip_eps", double, c.train.clip_eps),
      GRACE_FIELD("train", "greedy_reference", bool, c.train.greedy_reference),
      GRACE_FIELD("train", "cache_negatives", bool, c.train.cache_negatives),
      GRACE_FIELD("train", "eval_every", std::size_t, c.train.eval_every),
      GRACE_FIELD("train", "workers", std::size_t, c.train.workers),
      GRACE_FIELD("train", "record_wall_time", bool, c.train.record_wall_time),

      GRACE_FIELD("optimizer", "lr", double, c.train.adamw.lr),
      GRACE_FIELD("optimizer", "beta1", double, c.train.adamw.beta1),
      GRACE_FIELD("optimizer", "beta2", double, c.train.adamw.beta2),
      GRACE_FIELD("optimizer", "eps", double, c.train.adamw.eps),
      GRACE_FIELD("optimizer", "weight_decay", double, c.train.adamw.weight_decay),

      GRACE_FIELD("instruction", "default", std::string, c.train.instruction.fallback),

      GRACE_FIELD("eval", "topics", std::size_t, c.eval_corpus.topics),
      GRACE_FIELD("eval", "docs_per_topic", std::size_t, c.eval_corpus.docs_per_topic),
      GRACE_FIELD("eval", "queries_per_topic", std::size_t, c.eval_corpus.queries_per_topic),
      GRACE_FIELD("eval", "sts_pairs", std::size_t, c.eval_corpus.sts_pairs),
      GRACE_FIELD("eval", "corpus_seed", std::uint64_t, c.eval_corpus.seed),
  };
  return f;
}

#undef GRACE_FIELD

inline const std::vector<std::pair<std::string, SourceRole>>& role_keys() {
  static const std::vector<std::pair<std::string, SourceRole>> r = {
      {"query", SourceRole::kQuery},
      {"positive", SourceRole::kPositive},
      {"negative", SourceRole::kNegative},
      {"unsupervised", SourceRole::kUnsupervised}};
  return r;
}

/// 1-based line of the first occurrence of "key" in text, or 0.
inline std::size_t line_of_key(const std::string& text, const std::string& key) {
  const auto pos = text.find("\"" + key + "\"");
  if (pos == std::string::npos) return 0;
  return 1 + static_cast<std::size_t>(std::count(text.begin(), text.begin() + static_cast<long>(pos), '\n'));
}

}  // namespace config_detail

/// Parses a config document. `origin` prefixes error messages, which carry
/// the line of the offending key.
inline RunConfig parse_config(const std::string& text, const std::string& origin = "<config>") {
  using config_detail::Json;
  Json doc;
  try {
    doc = Json::parse(text);
  } catch (const nlohmann::json::parse_error& e) {
    const std::size_t upto = std::min<std::size_t>(e.byte, text.size());
    const auto line = 1 + std::count(text.begin(), text.begin() + static_cast<long>(upto), '\n');
    throw ConfigError(origin + ":" + std::to_string(line) + ": invalid JSON: " + e.what());
  }
  if (!doc.is_object()) throw ConfigError(origin + ":1: config must be a JSON object");

  auto fail = [&](const std::string& key, const std::string& msg) {
    const std::size_t line = config_detail::line_of_key(text, key);
    return ConfigError(origin + ":" + (line ? std::to_string(line) + ":" : std::string()) + " " + msg);
  };

  std::string preset = "desk";
  if (doc.contains("preset")) {
    if (!doc["preset"].is_string()) throw fail("preset", "key 'preset' must be a string");
    preset = doc["preset"].get<std::string>();
  }
  RunConfig cfg;
  try {
    cfg = preset_config(preset);
  } catch (const ConfigError& e) {
    throw fail("preset", e.what());
  }

  const auto& fields = config_detail::fields();
  auto apply = [&](const std::string& section, const Json& obj) {
    for (const auto& [key, value] : obj.items()) {
      if (section.empty() && key == "preset") continue;
      if (section.empty() && value.is_object()) continue;  // handled as a section
      const auto it = std::find_if(fields.begin(), fields.end(), [&](const auto& f) {
        return f.section == section && f.key == key;
      });
      const std::string full = section.empty() ? key : section + "." + key;
      if (it == fields.end()) throw fail(key, "unknown key '" + full + "'");
      try {
        it->set(cfg, value);
      } catch (const ConfigError& e) {
        throw fail(key, e.what());
      }
    }
  };
  apply("", doc);
  for (const auto& [section, value] : doc.items()) {
    if (!value.is_object()) continue;
    if (section == "instruction") {
      for (const auto& [key, v] : value.items()) {
        if (!v.is_string()) throw fail(key, "instruction '" + key + "' must be a string");
        if (key == "default") {
          cfg.train.instruction.fallback = v.get<std::string>();
          continue;
        }
        const auto& roles = config_detail::role_keys();
        const auto r = std::find_if(roles.begin(), roles.end(), [&](const auto& p) { return p.first == key; });
        if (r == roles.end()) throw fail(key, "unknown key 'instruction." + key + "'");
        cfg.train.instruction.per_role[r->second] = v.get<std::string>();
      }
      continue;
    }
    const bool known = std::any_of(fields.begin(), fields.end(),
                                   [&](const auto& f) { return f.section == section; });
    if (!known) throw fail(section, "unknown section '" + section + "'");
    apply(section, value);
  }
  cfg.preset = preset;
  try {
    cfg.validate();
  } catch (const ConfigError& e) {
    throw ConfigError(origin + ": " + e.what());
  }
  return cfg;
}

/// GRACE_SEED, when set, overrides the configured seed.
inline void apply_env_seed(RunConfig& cfg) {
  const char* s = std::getenv("GRACE_SEED");
  if (!s || !*s) return;
  char* end = nullptr;
  const unsigned long long v = std::strtoull(s, &end, 10);
  if (*end != '\0' || s[0] == '-') {
    throw ConfigError(std::string("GRACE_SEED must be a non-negative integer, got '") + s + "'");
  }
  cfg.apply_seed(v);
}

inline RunConfig load_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  RunConfig cfg = parse_config(ss.str(), path.string());
  if (!cfg.dataset.empty() && std::filesystem::path(cfg.dataset).is_relative()) {
    cfg.dataset = (path.parent_path() / cfg.dataset).lexically_normal().string();
  }
  return cfg;
}

/// Every key of the effective configuration.
inline nlohmann::ordered_json dump_config(const RunConfig& cfg) {
  config_detail::Json j;
  j["preset"] = cfg.preset;
  for (const auto& f : config_detail::fields()) {
    if (f.section == "instruction") continue;
    if (f.section.empty()) {
      j[f.key] = f.get(cfg);
    } else {
      j[f.section][f.key] = f.get(cfg);
    }
  }
  j["instruction"]["default"] = cfg.train.instruction.fallback;
  for (const auto& [name, role] : config_detail::role_keys()) {
    const auto it = cfg.train.instruction.per_role.find(role);
    if (it != cfg.train.instruction.per_role.end()) j["instruction"][name] = it->second;
  }
  return j;
}

}  // namespace grace
