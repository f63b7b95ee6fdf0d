// SPDX-License-Identifier: Apache-2.0
#pragma once

// Run configuration: line-oriented `section.key = value` text with `#`
// comments. Unknown keys are rejected and missing keys keep their defaults.
// to_text() renders the effective configuration canonically; its FNV-1a
// hash tags every output artifact.

#include <algorithm>
#include <charconv>
#include <cstdint>
#include <functional>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "flexireid/binary_io.hpp"
#include "flexireid/fusion.hpp"
#include "flexireid/loss.hpp"
#include "flexireid/model.hpp"
#include "flexireid/moe.hpp"
#include "flexireid/synth.hpp"

namespace flexireid {

class ConfigError : public Error {
 public:
  using Error::Error;
};

struct TrainConfig {
  std::size_t epochs = 60;
  std::size_t batch_identities = 16;
  double learning_rate = 1e-3;  // full-scale runs use 1e-5
  double lambda = 0.5;
  double grad_clip = 5.0;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;
  std::uint64_t seed = 1;

  void validate() const {
    if (epochs == 0 || batch_identities == 0) throw ConfigError("train: epochs and batch must be positive");
    if (!(learning_rate > 0.0)) throw ConfigError("train: learning_rate must be positive");
    if (!(lambda >= 0.0)) throw ConfigError("train: lambda must be non-negative");
    if (!(grad_clip > 0.0)) throw ConfigError("train: grad_clip must be positive");
  }
};

struct SweepConfig {
  std::vector<std::size_t> experts = {2, 4, 6, 8, 10};
  std::vector<double> thresholds = {0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9};
  double expert_sweep_threshold = 0.4;
};

struct RunConfig {
  SyntheticConfig data;
  ModelConfig model;
  SDMConfig loss;
  TrainConfig train;
  SweepConfig sweep;
  std::string eval_modes = "t,s,ir,t+s,t+ir,s+ir,t+s+ir";
  std::string dataset_dir = "data";
  std::string checkpoint = "checkpoint.flxr";

  RunConfig() { sync(); }

  // Propagates shared values (geometry, seeds) between sections.
  void sync() {
    data.adopt_encoder(model.encoder);
    model.init_seed = train.seed;
  }

  void validate() const {
    model.encoder.validate();
    data.validate();
    loss.validate();
    train.validate();
    if (model.moe.num_experts < 1) throw ConfigError("moe: num_experts must be >= 1");
    if (!(model.moe.threshold > 0.0 && model.moe.threshold <= 1.0)) {
      throw ConfigError("moe: threshold must lie in (0, 1]");
    }
    if (model.moe.top_k < 1 || model.moe.top_k > model.moe.num_experts) {
      throw ConfigError("moe: top_k must lie in [1, num_experts]");
    }
    if (model.placeholder_len < 1) throw ConfigError("fusion: placeholder_len must be >= 1");
    parse_mode_list(eval_modes);
  }

  std::string to_text() const;
  std::string hash() const { return hex64(fnv1a64(to_text())); }

  static RunConfig parse(const std::string& text);
  static RunConfig from_file(const std::filesystem::path& path) {
    return parse(read_file(path));
  }
};

namespace detail {

inline std::string trim(std::string s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

// Shortest text that parses back to the same double.
inline std::string format_double(double v) {
  char buf[32];
  const auto res = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, res.ptr);
}

inline std::string format_value(double v) { return format_double(v); }
inline std::string format_value(std::size_t v) { return std::to_string(v); }

template <class T>
std::string join(const std::vector<T>& values) {
  std::string out;
  for (std::size_t i = 0; i < values.size(); ++i) out += (i ? "," : "") + format_value(values[i]);
  return out;
}

struct KeyBinding {
  std::function<std::string(const RunConfig&)> get;
  std::function<void(RunConfig&, const std::string&)> set;
};

inline std::uint64_t parse_uint(const std::string& key, const std::string& v) {
  std::uint64_t out = 0;
  auto [ptr, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc() || ptr != v.data() + v.size()) {
    throw ConfigError("config: key '" + key + "' expects a non-negative integer, got '" + v + "'");
  }
  return out;
}

inline double parse_real(const std::string& key, const std::string& v) {
  try {
    std::size_t used = 0;
    const double out = std::stod(v, &used);
    if (used != v.size()) throw std::invalid_argument("trailing");
    return out;
  } catch (const std::exception&) {
    throw ConfigError("config: key '" + key + "' expects a real number, got '" + v + "'");
  }
}

inline bool parse_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "1" || v == "yes") return true;
  if (v == "false" || v == "0" || v == "no") return false;
  throw ConfigError("config: key '" + key + "' expects true/false, got '" + v + "'");
}

template <class T, class Parse>
std::vector<T> parse_list(const std::string& key, const std::string& v, Parse parse) {
  std::vector<T> out;
  std::stringstream ss(v);
  std::string item;
  while (std::getline(ss, item, ',')) {
    item = trim(item);
    if (!item.empty()) out.push_back(static_cast<T>(parse(key, item)));
  }
  if (out.empty()) throw ConfigError("config: key '" + key + "' expects a non-empty list");
  return out;
}

#define FLEXIREID_UINT(KEY, FIELD)                                                       \
  {KEY,                                                                                  \
   {[](const RunConfig& c) { return std::to_string(c.FIELD); },                          \
    [](RunConfig& c, const std::string& v) {                                             \
      c.FIELD = static_cast<decltype(c.FIELD)>(parse_uint(KEY, v));                      \
    }}}
#define FLEXIREID_REAL(KEY, FIELD)                                                       \
  {KEY,                                                                                  \
   {[](const RunConfig& c) { return format_double(c.FIELD); },                           \
    [](RunConfig& c, const std::string& v) { c.FIELD = parse_real(KEY, v); }}}

inline const std::map<std::string, KeyBinding>& key_bindings() {
  static const std::map<std::string, KeyBinding> bindings = {
      FLEXIREID_UINT("data.num_identities", data.num_identities),
      FLEXIREID_UINT("data.test_identities", data.test_identities),
      FLEXIREID_UINT("data.samples_per_identity", data.samples_per_identity),
      FLEXIREID_UINT("data.latent_dim", data.latent_dim),
      FLEXIREID_REAL("data.noise_scale", data.noise_scale),
      FLEXIREID_REAL("data.modality_shared", data.modality_shared),
      FLEXIREID_UINT("data.modality_seed", data.modality_seed),
      FLEXIREID_UINT("data.text_tokens", data.text_tokens),
      FLEXIREID_UINT("data.text_levels", data.text_levels),
      FLEXIREID_UINT("data.seed", data.seed),
      FLEXIREID_UINT("encoder.model_dim", model.encoder.model_dim),
      FLEXIREID_UINT("encoder.num_blocks", model.encoder.num_blocks),
      FLEXIREID_UINT("encoder.num_heads", model.encoder.num_heads),
      FLEXIREID_UINT("encoder.patch_rows", model.encoder.patch_rows),
      FLEXIREID_UINT("encoder.patch_cols", model.encoder.patch_cols),
      FLEXIREID_UINT("encoder.patch_height", model.encoder.patch_height),
      FLEXIREID_UINT("encoder.patch_width", model.encoder.patch_width),
      FLEXIREID_UINT("encoder.channels", model.encoder.channels),
      FLEXIREID_UINT("encoder.vocab_size", model.encoder.vocab_size),
      FLEXIREID_UINT("encoder.max_text_len", model.encoder.max_text_len),
      FLEXIREID_UINT("encoder.freeze_seed", model.encoder.freeze_seed),
      {"moe.enabled",
       {[](const RunConfig& c) { return std::string(c.model.use_moe ? "true" : "false"); },
        [](RunConfig& c, const std::string& v) { c.model.use_moe = parse_bool("moe.enabled", v); }}},
      FLEXIREID_UINT("moe.num_experts", model.moe.num_experts),
      FLEXIREID_REAL("moe.threshold", model.moe.threshold),
      {"moe.router",
       {[](const RunConfig& c) { return std::string(router_name(c.model.moe.router)); },
        [](RunConfig& c, const std::string& v) { c.model.moe.router = parse_router(v); }}},
      FLEXIREID_UINT("moe.top_k", model.moe.top_k),
      FLEXIREID_REAL("moe.adapter_init", model.moe.adapter_up_stddev),
      {"fusion.kind",
       {[](const RunConfig& c) { return std::string(fusion_name(c.model.fusion)); },
        [](RunConfig& c, const std::string& v) { c.model.fusion = parse_fusion(v); }}},
      {"fusion.placeholders",
       {[](const RunConfig& c) {
          return std::string(c.model.placeholders == PlaceholderKind::learned ? "learned" : "zeros");
        },
        [](RunConfig& c, const std::string& v) {
          if (v == "learned") c.model.placeholders = PlaceholderKind::learned;
          else if (v == "zeros") c.model.placeholders = PlaceholderKind::zeros;
          else throw ConfigError("config: fusion.placeholders expects learned|zeros");
        }}},
      FLEXIREID_UINT("fusion.placeholder_len", model.placeholder_len),
      FLEXIREID_REAL("loss.lambda", train.lambda),
      FLEXIREID_REAL("loss.epsilon", loss.epsilon),
      FLEXIREID_REAL("loss.temperature", loss.temperature),
      FLEXIREID_UINT("train.epochs", train.epochs),
      FLEXIREID_UINT("train.batch_identities", train.batch_identities),
      FLEXIREID_REAL("train.learning_rate", train.learning_rate),
      FLEXIREID_REAL("train.grad_clip", train.grad_clip),
      FLEXIREID_REAL("train.beta1", train.beta1),
      FLEXIREID_REAL("train.beta2", train.beta2),
      FLEXIREID_UINT("train.seed", train.seed),
      {"sweep.experts",
       {[](const RunConfig& c) { return join(c.sweep.experts); },
        [](RunConfig& c, const std::string& v) {
          c.sweep.experts = parse_list<std::size_t>("sweep.experts", v, parse_uint);
        }}},
      {"sweep.thresholds",
       {[](const RunConfig& c) { return join(c.sweep.thresholds); },
        [](RunConfig& c, const std::string& v) {
          c.sweep.thresholds = parse_list<double>("sweep.thresholds", v, parse_real);
        }}},
      FLEXIREID_REAL("sweep.expert_threshold", sweep.expert_sweep_threshold),
      {"eval.modes",
       {[](const RunConfig& c) { return c.eval_modes; },
        [](RunConfig& c, const std::string& v) { c.eval_modes = v; }}},
      {"paths.dataset_dir",
       {[](const RunConfig& c) { return c.dataset_dir; },
        [](RunConfig& c, const std::string& v) { c.dataset_dir = v; }}},
      {"paths.checkpoint",
       {[](const RunConfig& c) { return c.checkpoint; },
        [](RunConfig& c, const std::string& v) { c.checkpoint = v; }}},
  };
  return bindings;
}

#undef FLEXIREID_UINT
#undef FLEXIREID_REAL

}  // namespace detail

inline std::string RunConfig::to_text() const {
  std::ostringstream os;
  for (const auto& [key, binding] : detail::key_bindings()) os << key << " = " << binding.get(*this) << '\n';
  return os.str();
}

inline RunConfig RunConfig::parse(const std::string& text) {
  RunConfig cfg;
  std::istringstream is(text);
  std::string line;
  std::size_t lineno = 0;
  const auto& bindings = detail::key_bindings();
  while (std::getline(is, line)) {
    ++lineno;
    if (const auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
    line = detail::trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) {
      throw ConfigError("config line " + std::to_string(lineno) + ": expected 'key = value'");
    }
    const std::string key = detail::trim(line.substr(0, eq));
    const std::string value = detail::trim(line.substr(eq + 1));
    const auto it = bindings.find(key);
    if (it == bindings.end()) {
      throw ConfigError("config line " + std::to_string(lineno) + ": unknown key '" + key + "'");
    }
    try {
      it->second.set(cfg, value);
    } catch (const ConfigError&) {
      throw;
    } catch (const Error& e) {
      throw ConfigError("config line " + std::to_string(lineno) + ": " + e.what());
    }
  }
  cfg.sync();
  try {
    cfg.validate();
  } catch (const ConfigError&) {
    throw;
  } catch (const Error& e) {
    throw ConfigError(e.what());
  }
  return cfg;
}

}  // namespace flexireid
