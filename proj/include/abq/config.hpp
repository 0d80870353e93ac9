#pragma once

// Flat JSON experiment configuration. Every key is optional (defaults below);
// unknown keys and ill-typed values are hard errors. The schema is listed in
// docs/formats.md.

#include <abq/error.hpp>

#include <json.hpp>

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <sstream>
#include <string>

namespace abq {

struct ExperimentConfig {
  // model
  std::string model = "cnn";  // cnn | toy
  std::string arch = "conv:8:5:1:2:2,conv:16:5:1:2:2,dense:64,dense:10";
  std::string activation = "relu";  // relu | hardtanh

  // data
  std::string dataset = "idx";  // idx | cifar | synthetic
  std::string train_images;
  std::string train_labels;
  std::string test_images;
  std::string test_labels;
  std::string cifar_train;
  std::string cifar_test;
  std::int64_t train_samples = 0;  // 0: whole file
  std::int64_t num_classes = 10;
  std::int64_t synthetic_dims = 16;
  std::int64_t synthetic_train = 2000;
  std::int64_t synthetic_test = 500;
  double synthetic_margin = 5.0;
  double synthetic_noise = 0.5;

  // training loop
  std::string gradient_mode = "ab";  // ab | ste | fp32
  double learning_rate = 0.05;
  double momentum = 0.9;
  std::int64_t batch_size = 32;
  std::int64_t steps = 1000;
  std::string schedule = "cubic";  // cubic | exponential
  double t0 = 400;
  double t1 = 800;
  double lambda = 0.01;
  std::int64_t optimization_frequency = 1;
  std::int64_t quantizing_frequency = 1;
  bool blend_activations = true;
  bool ste_clip = true;
  std::int64_t metrics_every = 10;
  std::int64_t eval_samples = 0;
  bool prefetch = false;
  std::uint64_t seed = 1;

  // quantization
  std::int64_t weight_bits = 8;  // 32: keep full precision
  std::int64_t act_bits = 8;     // 0: activations stay in full precision
  std::string granularity = "per_layer";  // per_layer | per_channel
  std::int64_t first_layer_weight_bits = -1;  // -1: same as weight_bits
  std::int64_t last_layer_weight_bits = -1;
  std::int64_t first_layer_act_bits = 0;  // network input; 0: unquantized
  bool scaled_binary = false;
  double ema_beta = 0.99;

  // toy objective (w - toy_target)^2
  double toy_target = 5.7;
  double toy_init = 2.0;

  std::string output_dir = "out";

  friend bool operator==(const ExperimentConfig&, const ExperimentConfig&) = default;
};

namespace detail {

using Json = nlohmann::ordered_json;

struct ConfigField {
  std::function<Json(const ExperimentConfig&)> get;
  std::function<void(ExperimentConfig&, const Json&)> set;
};

template <class T>
ConfigField field(T ExperimentConfig::*member) {
  return ConfigField{
      [member](const ExperimentConfig& c) { return Json(c.*member); },
      [member](ExperimentConfig& c, const Json& v) {
        if constexpr (std::is_same_v<T, bool>) {
          if (!v.is_boolean()) throw ConfigError("expected true or false");
        } else if constexpr (std::is_same_v<T, std::string>) {
          if (!v.is_string()) throw ConfigError("expected a string");
        } else if constexpr (std::is_integral_v<T>) {
          if (!v.is_number_integer()) throw ConfigError("expected an integer");
          if constexpr (std::is_unsigned_v<T>) {
            if (v.is_number_integer() && !v.is_number_unsigned() && v.get<std::int64_t>() < 0)
              throw ConfigError("expected a non-negative integer");
          }
        } else {
          if (!v.is_number()) throw ConfigError("expected a number");
        }
        c.*member = v.get<T>();
      }};
}

// Serialization order is the declaration order above.
inline const std::vector<std::pair<std::string, ConfigField>>& config_fields() {
  using C = ExperimentConfig;
  static const std::vector<std::pair<std::string, ConfigField>> fields = {
      {"model", field(&C::model)},
      {"arch", field(&C::arch)},
      {"activation", field(&C::activation)},
      {"dataset", field(&C::dataset)},
      {"train_images", field(&C::train_images)},
      {"train_labels", field(&C::train_labels)},
      {"test_images", field(&C::test_images)},
      {"test_labels", field(&C::test_labels)},
      {"cifar_train", field(&C::cifar_train)},
      {"cifar_test", field(&C::cifar_test)},
      {"train_samples", field(&C::train_samples)},
      {"num_classes", field(&C::num_classes)},
      {"synthetic_dims", field(&C::synthetic_dims)},
      {"synthetic_train", field(&C::synthetic_train)},
      {"synthetic_test", field(&C::synthetic_test)},
      {"synthetic_margin", field(&C::synthetic_margin)},
      {"synthetic_noise", field(&C::synthetic_noise)},
      {"gradient_mode", field(&C::gradient_mode)},
      {"learning_rate", field(&C::learning_rate)},
      {"momentum", field(&C::momentum)},
      {"batch_size", field(&C::batch_size)},
      {"steps", field(&C::steps)},
      {"schedule", field(&C::schedule)},
      {"t0", field(&C::t0)},
      {"t1", field(&C::t1)},
      {"lambda", field(&C::lambda)},
      {"optimization_frequency", field(&C::optimization_frequency)},
      {"quantizing_frequency", field(&C::quantizing_frequency)},
      {"blend_activations", field(&C::blend_activations)},
      {"ste_clip", field(&C::ste_clip)},
      {"metrics_every", field(&C::metrics_every)},
      {"eval_samples", field(&C::eval_samples)},
      {"prefetch", field(&C::prefetch)},
      {"seed", field(&C::seed)},
      {"weight_bits", field(&C::weight_bits)},
      {"act_bits", field(&C::act_bits)},
      {"granularity", field(&C::granularity)},
      {"first_layer_weight_bits", field(&C::first_layer_weight_bits)},
      {"last_layer_weight_bits", field(&C::last_layer_weight_bits)},
      {"first_layer_act_bits", field(&C::first_layer_act_bits)},
      {"scaled_binary", field(&C::scaled_binary)},
      {"ema_beta", field(&C::ema_beta)},
      {"toy_target", field(&C::toy_target)},
      {"toy_init", field(&C::toy_init)},
      {"output_dir", field(&C::output_dir)},
  };
  return fields;
}

inline const ConfigField& find_field(const std::string& key) {
  for (const auto& [name, f] : config_fields())
    if (name == key) return f;
  throw ConfigError("unknown config key '" + key + "'");
}

inline void require_one_of(const std::string& key, const std::string& v, std::initializer_list<const char*> allowed) {
  std::string list;
  for (const char* a : allowed) {
    if (v == a) return;
    list += list.empty() ? a : std::string(", ") + a;
  }
  throw ConfigError(key + " must be one of {" + list + "}, got '" + v + "'");
}

inline bool supported_bits(std::int64_t b) { return (b >= 1 && b <= 8) || b == 32; }

}  // namespace detail

/// Semantic checks that don't need the dataset.
inline void validate(const ExperimentConfig& c) {
  using detail::require_one_of;
  require_one_of("model", c.model, {"cnn", "toy"});
  require_one_of("activation", c.activation, {"relu", "hardtanh"});
  require_one_of("dataset", c.dataset, {"idx", "cifar", "synthetic"});
  require_one_of("gradient_mode", c.gradient_mode, {"ab", "ste", "fp32"});
  require_one_of("schedule", c.schedule, {"cubic", "exponential"});
  require_one_of("granularity", c.granularity, {"per_layer", "per_channel"});
  if (!(c.learning_rate > 0.0)) throw ConfigError("learning_rate must be positive");
  if (c.momentum < 0.0 || c.momentum >= 1.0) throw ConfigError("momentum must lie in [0, 1)");
  if (c.batch_size < 1) throw ConfigError("batch_size must be >= 1");
  if (c.steps < 0) throw ConfigError("steps must be >= 0");
  if (c.schedule == "cubic") {
    if (c.t0 < 0.0) throw ConfigError("t0 must be >= 0");
    if (!(c.t0 < c.t1)) throw ConfigError("alpha schedule needs t0 < t1");
    if (c.t1 > static_cast<double>(c.steps)) throw ConfigError("t1 must not exceed steps");
  } else if (!(c.lambda > 0.0)) {
    throw ConfigError("lambda must be positive");
  }
  if (c.optimization_frequency < 1) throw ConfigError("optimization_frequency must be >= 1");
  if (c.quantizing_frequency < 1) throw ConfigError("quantizing_frequency must be >= 1");
  if (c.metrics_every < 1) throw ConfigError("metrics_every must be >= 1");
  if (c.eval_samples < 0 || c.train_samples < 0) throw ConfigError("sample limits must be >= 0");
  if (c.num_classes < 2) throw ConfigError("num_classes must be >= 2");
  for (auto [key, b] : {std::pair{"weight_bits", c.weight_bits}, {"first_layer_weight_bits", c.first_layer_weight_bits},
                        {"last_layer_weight_bits", c.last_layer_weight_bits}}) {
    if (b == -1 && std::string(key) != "weight_bits") continue;
    if (!detail::supported_bits(b)) throw ConfigError(std::string(key) + " must be 1..8 or 32, got " + std::to_string(b));
  }
  for (auto [key, b] : {std::pair{"act_bits", c.act_bits}, {"first_layer_act_bits", c.first_layer_act_bits}}) {
    if (b < 0 || b > 8) throw ConfigError(std::string(key) + " must be 0..8, got " + std::to_string(b));
  }
  if (!(c.ema_beta > 0.0 && c.ema_beta < 1.0)) throw ConfigError("ema_beta must lie in (0, 1)");
  if (c.dataset == "synthetic") {
    if (c.synthetic_dims < 1 || c.synthetic_train < 1 || c.synthetic_test < 1)
      throw ConfigError("synthetic sizes must be positive");
    if (!(c.synthetic_margin > 0.0) || c.synthetic_noise < 0.0) throw ConfigError("synthetic margin/noise out of range");
  }
}

inline nlohmann::ordered_json to_json(const ExperimentConfig& c) {
  nlohmann::ordered_json j = nlohmann::ordered_json::object();
  for (const auto& [name, f] : detail::config_fields()) j[name] = f.get(c);
  return j;
}

/// Canonical text form: every key, fixed order, two-space indent.
inline std::string serialize(const ExperimentConfig& c) { return to_json(c).dump(2) + "\n"; }

inline void set_key(ExperimentConfig& c, const std::string& key, const nlohmann::ordered_json& value) {
  const auto& f = detail::find_field(key);
  try {
    f.set(c, value);
  } catch (const ConfigError& e) {
    throw ConfigError("config key '" + key + "': " + e.what());
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError("config key '" + key + "': " + e.what());
  }
}

inline ExperimentConfig parse_config(const std::string& text) {
  nlohmann::ordered_json j;
  try {
    j = nlohmann::ordered_json::parse(text);
  } catch (const nlohmann::json::parse_error& e) {
    throw ConfigError(std::string("config is not valid JSON: ") + e.what());
  }
  if (!j.is_object()) throw ConfigError("config must be a JSON object");
  ExperimentConfig c;
  for (const auto& [key, value] : j.items()) set_key(c, key, value);
  return c;
}

inline ExperimentConfig load_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_config(ss.str());
}

/// Applies one `key=value` override. The value is read as JSON when it
/// parses as such, otherwise as a bare string (so `dataset=synthetic` works).
inline void apply_override(ExperimentConfig& c, const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos || eq == 0) throw ConfigError("override '" + assignment + "' is not key=value");
  const std::string key = assignment.substr(0, eq);
  const std::string raw = assignment.substr(eq + 1);
  nlohmann::ordered_json value;
  try {
    value = nlohmann::ordered_json::parse(raw);
  } catch (const nlohmann::json::parse_error&) {
    value = raw;
  }
  if (value.is_string() || value.is_boolean() || value.is_number()) {
    // A string field given something that looks numeric, e.g. arch=10.
    if (detail::find_field(key).get(c).is_string() && !value.is_string()) value = raw;
  }
  set_key(c, key, value);
}

/// 64-bit FNV-1a of the canonical serialization. The output directory is
/// left out: where results land does not change the experiment.
inline std::uint64_t config_hash(const ExperimentConfig& c) {
  auto j = to_json(c);
  j.erase("output_dir");
  std::uint64_t h = 0xcbf29ce484222325ull;
  for (unsigned char ch : j.dump()) {
    h ^= ch;
    h *= 0x100000001b3ull;
  }
  return h;
}

/// Relative dataset paths are taken relative to the config file's directory.
inline std::filesystem::path resolve_path(const std::filesystem::path& base, const std::string& p) {
  if (p.empty()) return {};
  std::filesystem::path path(p);
  return path.is_absolute() || base.empty() ? path : base / path;
}

}  // namespace abq
