#pragma once

// Flat `key = value` configuration text with `#` comments.

#include <algorithm>
#include <charconv>
#include <iomanip>
#include <cstdint>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "csrnet/data.hpp"
#include "csrnet/model.hpp"
#include "csrnet/train.hpp"

namespace csrnet {

class KeyValues {
 public:
  /// Parses `key = value` lines. Later duplicates override earlier ones.
  static KeyValues parse(std::istream& is, const std::string& source = "config") {
    KeyValues kv;
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(is, line)) {
      ++lineno;
      if (auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
      line = trim(line);
      if (line.empty()) continue;
      const auto eq = line.find('=');
      if (eq == std::string::npos) {
        throw ConfigError(detail::concat(source, ":", lineno, ": expected 'key = value', got '", line, "'"));
      }
      const auto key = trim(line.substr(0, eq));
      if (key.empty()) throw ConfigError(detail::concat(source, ":", lineno, ": empty key"));
      kv.set(key, trim(line.substr(eq + 1)));
    }
    return kv;
  }

  static KeyValues parse_file(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw ConfigError("cannot open config file '" + path + "'");
    return parse(is, path);
  }

  /// Applies a `key=value` override string.
  void apply_override(const std::string& assignment) {
    const auto eq = assignment.find('=');
    if (eq == std::string::npos || trim(assignment.substr(0, eq)).empty()) {
      throw ConfigError("override '" + assignment + "' is not of the form key=value");
    }
    set(trim(assignment.substr(0, eq)), trim(assignment.substr(eq + 1)));
  }

  void set(const std::string& key, const std::string& value) { values_[key] = value; }
  bool has(const std::string& key) const { return values_.count(key) != 0; }
  const std::map<std::string, std::string>& values() const { return values_; }

  const std::string& str(const std::string& key) const {
    auto it = values_.find(key);
    if (it == values_.end()) throw ConfigError("missing config key '" + key + "'");
    return it->second;
  }

  double real(const std::string& key) const {
    const auto& s = str(key);
    try {
      std::size_t used = 0;
      const double v = std::stod(s, &used);
      if (used == s.size()) return v;
    } catch (const std::exception&) {
    }
    throw ConfigError("config key '" + key + "' expects a number, got '" + s + "'");
  }

  std::uint64_t integer(const std::string& key) const {
    const auto& s = str(key);
    std::uint64_t v = 0;
    auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
    if (ec != std::errc() || ptr != s.data() + s.size()) {
      throw ConfigError("config key '" + key + "' expects a non-negative integer, got '" + s + "'");
    }
    return v;
  }

  bool boolean(const std::string& key) const {
    const auto& s = str(key);
    if (s == "true" || s == "1" || s == "yes" || s == "on") return true;
    if (s == "false" || s == "0" || s == "no" || s == "off") return false;
    throw ConfigError("config key '" + key + "' expects true/false, got '" + s + "'");
  }

  /// Rejects keys outside `known`.
  void require_known(const std::vector<std::string>& known) const {
    for (const auto& [k, _] : values_) {
      if (std::find(known.begin(), known.end(), k) == known.end()) {
        throw ConfigError("unknown config key '" + k + "'");
      }
    }
  }

  std::string to_text() const {
    std::ostringstream os;
    for (const auto& [k, v] : values_) os << k << " = " << v << "\n";
    return os.str();
  }

 private:
  static std::string trim(const std::string& s) {
    const auto b = s.find_first_not_of(" \t\r\n");
    if (b == std::string::npos) return "";
    const auto e = s.find_last_not_of(" \t\r\n");
    return s.substr(b, e - b + 1);
  }

  std::map<std::string, std::string> values_;
};

inline const std::vector<std::string>& model_config_keys() {
  static const std::vector<std::string> keys{"variant",     "stages",       "c",
                                             "mu",          "num_classes",  "spfm_enabled",
                                             "attention_enabled", "fuse_conv1x1_enabled"};
  return keys;
}

inline std::string format_real(double v) {
  std::ostringstream os;
  os << std::setprecision(17) << v;
  return os.str();
}

inline KeyValues to_key_values(const ModelConfig& m) {
  KeyValues kv;
  kv.set("variant", to_string(m.variant));
  kv.set("stages", std::to_string(m.stages));
  kv.set("c", std::to_string(m.c));
  kv.set("mu", format_real(m.mu));
  kv.set("num_classes", std::to_string(m.num_classes));
  kv.set("spfm_enabled", m.spfm_enabled ? "true" : "false");
  kv.set("attention_enabled", m.attention_enabled ? "true" : "false");
  kv.set("fuse_conv1x1_enabled", m.fuse_conv1x1_enabled ? "true" : "false");
  return kv;
}

/// Reads the ModelConfig fields present in `kv` over `base`.
inline ModelConfig model_config_from(const KeyValues& kv, ModelConfig base = {}) {
  if (kv.has("variant")) base.variant = parse_variant(kv.str("variant"));
  if (kv.has("stages")) base.stages = static_cast<int>(kv.integer("stages"));
  if (kv.has("c")) base.c = kv.integer("c");
  if (kv.has("mu")) base.mu = kv.real("mu");
  if (kv.has("num_classes")) base.num_classes = kv.integer("num_classes");
  if (kv.has("spfm_enabled")) base.spfm_enabled = kv.boolean("spfm_enabled");
  if (kv.has("attention_enabled")) base.attention_enabled = kv.boolean("attention_enabled");
  if (kv.has("fuse_conv1x1_enabled")) base.fuse_conv1x1_enabled = kv.boolean("fuse_conv1x1_enabled");
  base.validate();
  return base;
}

/// Model config file: exactly the ModelConfig keys.
inline ModelConfig load_model_config(const std::string& path) {
  const auto kv = KeyValues::parse_file(path);
  kv.require_known(model_config_keys());
  return model_config_from(kv);
}

/// Every key a command-line run accepts, with desk-scale defaults.
inline KeyValues run_defaults() {
  KeyValues kv = to_key_values(ModelConfig{Variant::light, 3, 16, 0.25, 6, true, true, true});
  const std::pair<const char*, const char*> rest[] = {
      // training
      {"lr_init", "4e-4"}, {"lr_min", "1e-6"}, {"weight_decay", "1e-4"}, {"batch_size", "8"},
      {"epochs", "30"}, {"seed", "0"}, {"crop", "64"}, {"augment", "true"}, {"precision", "f32"},
      // data
      {"train_data", "train.csrd"}, {"val_data", "val.csrd"}, {"train_count", "512"}, {"val_count", "128"},
      {"canvas", "64"}, {"min_objects", "2"}, {"max_objects", "6"}, {"dominant_prob", "0.3"},
      // evaluation and tools
      {"checkpoint", ""}, {"bench_warmup", "10"}, {"bench_iters", "100"}, {"bench_batch", "1"},
      {"bench_height", "64"}, {"bench_width", "64"}, {"cam_class", "1"}, {"cam_index", "0"},
      {"predict_count", "8"}, {"palette", ""}, {"gradcheck_seeds", "5"}, {"gradcheck_kernel_tol", "1e-5"},
      {"gradcheck_model_tol", "1e-4"},
  };
  for (const auto& [k, v] : rest) kv.set(k, v);
  return kv;
}

inline TrainConfig train_config_from(const KeyValues& kv) {
  TrainConfig t;
  t.lr_init = kv.real("lr_init");
  t.lr_min = kv.real("lr_min");
  t.weight_decay = kv.real("weight_decay");
  t.batch_size = kv.integer("batch_size");
  t.epochs = kv.integer("epochs");
  t.seed = kv.integer("seed");
  t.crop = kv.integer("crop");
  t.augment = kv.boolean("augment");
  t.validate();
  return t;
}

inline data::SceneSpec scene_spec_from(const KeyValues& kv, std::uint64_t seed) {
  data::SceneSpec s;
  s.num_classes = kv.integer("num_classes");
  s.height = s.width = kv.integer("canvas");
  s.min_objects = kv.integer("min_objects");
  s.max_objects = kv.integer("max_objects");
  s.dominant_prob = kv.real("dominant_prob");
  s.seed = seed;
  return s;
}

}  // namespace csrnet
