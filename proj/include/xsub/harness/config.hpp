#pragma once

#include <charconv>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "../core.hpp"
#include "../data.hpp"
#include "../explainer.hpp"
#include "../model.hpp"

namespace xsub::harness {

enum class Scenario { adversarial, backdoor };

inline const char* to_string(Scenario s) { return s == Scenario::adversarial ? "adversarial" : "backdoor"; }

struct SweepSpec {
  std::vector<double> alphas{1, 5, 10, 100, 200};
  std::vector<double> betas{1, 5, 10, 100, 200};
  std::vector<std::size_t> ks{1, 5, 30, 60, 90, 120};
  std::vector<PlacementMode> modes{PlacementMode::paired};
  std::vector<std::uint64_t> seeds{1, 2, 3, 4, 5, 6, 7, 8, 9, 10};
  std::vector<Scenario> scenarios{Scenario::adversarial};

  std::size_t cell_count() const {
    return alphas.size() * betas.size() * ks.size() * modes.size() * seeds.size() * scenarios.size();
  }
};

struct DataConfig {
  std::string source = "synth";  // synth | idx | cifar10
  Shape shape{8, 8, 1};
  std::size_t classes = 4;
  std::size_t per_class = 250;
  double separation = 4.0;
  double train_fraction = 0.8;
  std::string train_images, train_labels, test_images, test_labels;
  std::string train_path, test_path;
  std::string preset;  // overrides normalization constants for file data
  std::size_t limit_train = 0;
  std::size_t limit_test = 0;
};

struct ExperimentConfig {
  std::uint64_t seed = 1;
  DataConfig data;
  TrainConfig train;
  ExplainerConfig explainer;
  AttackConfig attack;
  /// Attacked samples per cell (first N of the filtered test set); 0 = all.
  std::size_t max_samples = 0;
  bool defense = false;
  /// Clean training samples used for calibration; 0 = all.
  std::size_t calibration = 0;
  SweepSpec sweep;
};

// ---------------------------------------------------------------------------
// Parsing
// ---------------------------------------------------------------------------

namespace detail {

inline std::string trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return std::string(s.substr(b, e - b + 1));
}

inline std::vector<std::string> split_list(const std::string& v) {
  std::vector<std::string> out;
  std::stringstream ss(v);
  std::string item;
  while (std::getline(ss, item, ','))
    if (auto t = trim(item); !t.empty()) out.push_back(t);
  return out;
}

[[noreturn]] inline void bad_value(const std::string& key, const std::string& value, const std::string& why) {
  fail(ErrorKind::config, "key '" + key + "': " + why + " (got '" + value + "')");
}

inline double to_double(const std::string& key, const std::string& v) {
  double out = 0.0;
  const auto* end = v.data() + v.size();
  auto [ptr, ec] = std::from_chars(v.data(), end, out);
  if (ec != std::errc() || ptr != end || !std::isfinite(out)) bad_value(key, v, "expected a number");
  return out;
}

inline std::uint64_t to_uint(const std::string& key, const std::string& v) {
  std::uint64_t out = 0;
  const auto* end = v.data() + v.size();
  auto [ptr, ec] = std::from_chars(v.data(), end, out);
  if (ec != std::errc() || ptr != end) bad_value(key, v, "expected a non-negative integer");
  return out;
}

inline bool to_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "on" || v == "1") return true;
  if (v == "false" || v == "off" || v == "0") return false;
  bad_value(key, v, "expected true/false");
}

template <class T, class F>
std::vector<T> to_list(const std::string& key, const std::string& v, F convert) {
  std::vector<T> out;
  for (const auto& item : split_list(v))
    out.push_back(convert(key, item));
  if (out.empty()) bad_value(key, v, "expected a non-empty list");
  return out;
}

using Setter = std::function<void(ExperimentConfig&, const std::string& key, const std::string& value)>;

inline const std::map<std::string, Setter>& schema() {
  static const std::map<std::string, Setter> keys = [] {
    std::map<std::string, Setter> m;
    m["run.seed"] = [](auto& c, auto& k, auto& v) { c.seed = to_uint(k, v); };

    m["data.source"] = [](auto& c, auto& k, auto& v) {
      if (v != "synth" && v != "idx" && v != "cifar10") bad_value(k, v, "expected synth, idx or cifar10");
      c.data.source = v;
    };
    m["data.shape"] = [](auto& c, auto& k, auto& v) {
      c.data.shape = to_list<std::size_t>(k, v, [](auto& kk, auto& s) { return static_cast<std::size_t>(to_uint(kk, s)); });
    };
    m["data.classes"] = [](auto& c, auto& k, auto& v) { c.data.classes = to_uint(k, v); };
    m["data.per_class"] = [](auto& c, auto& k, auto& v) { c.data.per_class = to_uint(k, v); };
    m["data.separation"] = [](auto& c, auto& k, auto& v) { c.data.separation = to_double(k, v); };
    m["data.train_fraction"] = [](auto& c, auto& k, auto& v) { c.data.train_fraction = to_double(k, v); };
    m["data.train_images"] = [](auto& c, auto&, auto& v) { c.data.train_images = v; };
    m["data.train_labels"] = [](auto& c, auto&, auto& v) { c.data.train_labels = v; };
    m["data.test_images"] = [](auto& c, auto&, auto& v) { c.data.test_images = v; };
    m["data.test_labels"] = [](auto& c, auto&, auto& v) { c.data.test_labels = v; };
    m["data.train_path"] = [](auto& c, auto&, auto& v) { c.data.train_path = v; };
    m["data.test_path"] = [](auto& c, auto&, auto& v) { c.data.test_path = v; };
    m["data.preset"] = [](auto& c, auto& k, auto& v) {
      if (v != "cifar10" && v != "imagenette" && v != "mnist" && v != "none") bad_value(k, v, "unknown preset");
      c.data.preset = v;
    };
    m["data.limit_train"] = [](auto& c, auto& k, auto& v) { c.data.limit_train = to_uint(k, v); };
    m["data.limit_test"] = [](auto& c, auto& k, auto& v) { c.data.limit_test = to_uint(k, v); };

    m["train.learning_rate"] = [](auto& c, auto& k, auto& v) { c.train.learning_rate = to_double(k, v); };
    m["train.epochs"] = [](auto& c, auto& k, auto& v) { c.train.epochs = to_uint(k, v); };
    m["train.batch_size"] = [](auto& c, auto& k, auto& v) { c.train.batch_size = to_uint(k, v); };
    m["train.hidden"] = [](auto& c, auto& k, auto& v) { c.train.hidden = to_uint(k, v); };
    m["train.clip_norm"] = [](auto& c, auto& k, auto& v) { c.train.clip_norm = to_double(k, v); };

    m["explainer.mode"] = [](auto& c, auto& k, auto& v) {
      if (v != "exact" && v != "kernel") bad_value(k, v, "expected exact or kernel");
      c.explainer.mode = parse_explainer_mode(v);
    };
    m["explainer.coalitions"] = [](auto& c, auto& k, auto& v) { c.explainer.coalitions = to_uint(k, v); };
    m["explainer.background"] = [](auto& c, auto& k, auto& v) { c.explainer.background_size = to_uint(k, v); };

    m["attack.alpha"] = [](auto& c, auto& k, auto& v) { c.attack.alpha = to_double(k, v); };
    m["attack.beta"] = [](auto& c, auto& k, auto& v) { c.attack.beta = to_double(k, v); };
    m["attack.k"] = [](auto& c, auto& k, auto& v) { c.attack.k = to_uint(k, v); };
    m["attack.mode"] = [](auto& c, auto& k, auto& v) {
      if (v != "paired" && v != "literal") bad_value(k, v, "expected paired or literal");
      c.attack.placement = parse_placement(v);
    };
    m["attack.clamp"] = [](auto& c, auto& k, auto& v) { c.attack.clamp = to_bool(k, v); };
    m["attack.clamp_lo"] = [](auto& c, auto& k, auto& v) { c.attack.clamp_lo = to_double(k, v); };
    m["attack.clamp_hi"] = [](auto& c, auto& k, auto& v) { c.attack.clamp_hi = to_double(k, v); };
    m["attack.golden_set_size"] = [](auto& c, auto& k, auto& v) { c.attack.golden_set_size = to_uint(k, v); };
    m["attack.poison_fraction"] = [](auto& c, auto& k, auto& v) { c.attack.poison_fraction = to_double(k, v); };
    m["attack.flip_labels"] = [](auto& c, auto& k, auto& v) { c.attack.flip_poison_labels = to_bool(k, v); };
    m["attack.max_samples"] = [](auto& c, auto& k, auto& v) { c.max_samples = to_uint(k, v); };

    m["defense.enabled"] = [](auto& c, auto& k, auto& v) { c.defense = to_bool(k, v); };
    m["defense.calibration"] = [](auto& c, auto& k, auto& v) { c.calibration = to_uint(k, v); };

    m["sweep.alphas"] = [](auto& c, auto& k, auto& v) { c.sweep.alphas = to_list<double>(k, v, to_double); };
    m["sweep.betas"] = [](auto& c, auto& k, auto& v) { c.sweep.betas = to_list<double>(k, v, to_double); };
    m["sweep.ks"] = [](auto& c, auto& k, auto& v) {
      c.sweep.ks = to_list<std::size_t>(k, v, [](auto& kk, auto& s) { return static_cast<std::size_t>(to_uint(kk, s)); });
    };
    m["sweep.modes"] = [](auto& c, auto& k, auto& v) {
      c.sweep.modes = to_list<PlacementMode>(k, v, [](auto& kk, auto& s) {
        if (s != "paired" && s != "literal") bad_value(kk, s, "expected paired or literal");
        return parse_placement(s);
      });
    };
    m["sweep.seeds"] = [](auto& c, auto& k, auto& v) { c.sweep.seeds = to_list<std::uint64_t>(k, v, to_uint); };
    m["sweep.scenarios"] = [](auto& c, auto& k, auto& v) {
      c.sweep.scenarios = to_list<Scenario>(k, v, [](auto& kk, auto& s) {
        if (s == "adversarial") return Scenario::adversarial;
        if (s == "backdoor") return Scenario::backdoor;
        bad_value(kk, s, "expected adversarial or backdoor");
      });
    };
    return m;
  }();
  return keys;
}

}  // namespace detail

/// Every accepted configuration key, sorted.
inline std::vector<std::string> config_keys() {
  std::vector<std::string> out;
  for (const auto& [k, _] : detail::schema())
    out.push_back(k);
  return out;
}

inline void validate(const ExperimentConfig& c) {
  auto check = [](bool ok, const std::string& what) {
    if (!ok) fail(ErrorKind::config, what);
  };
  check(c.data.classes >= 2, "data.classes must be >= 2");
  check(c.data.per_class >= 1, "data.per_class must be >= 1");
  check(c.data.separation > 0.0, "data.separation must be > 0");
  check(c.data.train_fraction > 0.0 && c.data.train_fraction < 1.0, "data.train_fraction must lie in (0,1)");
  check(!c.data.shape.empty() && shape_size(c.data.shape) > 0, "data.shape must be non-empty");
  check(c.train.learning_rate > 0.0, "train.learning_rate must be > 0");
  check(c.train.epochs >= 1, "train.epochs must be >= 1");
  check(c.train.batch_size >= 1, "train.batch_size must be >= 1");
  check(c.train.hidden >= 1, "train.hidden must be >= 1");
  check(c.train.clip_norm >= 0.0, "train.clip_norm must be >= 0");
  check(c.explainer.background_size >= 1, "explainer.background must be >= 1");
  check(c.attack.alpha >= 0.0 && c.attack.beta >= 0.0, "attack.alpha and attack.beta must be >= 0");
  check(c.attack.k >= 1, "attack.k must be >= 1");
  check(c.attack.golden_set_size >= 1, "attack.golden_set_size must be >= 1");
  check(c.attack.poison_fraction > 0.0 && c.attack.poison_fraction <= 1.0, "attack.poison_fraction must lie in (0,1]");
  check(c.attack.clamp_lo <= c.attack.clamp_hi, "attack.clamp_lo must be <= attack.clamp_hi");
  for (double a : c.sweep.alphas)
    check(a >= 0.0, "sweep.alphas must be >= 0");
  for (double b : c.sweep.betas)
    check(b >= 0.0, "sweep.betas must be >= 0");
  for (auto k : c.sweep.ks)
    check(k >= 1, "sweep.ks must be >= 1");
  std::set<std::uint64_t> seeds(c.sweep.seeds.begin(), c.sweep.seeds.end());
  check(seeds.size() == c.sweep.seeds.size(), "sweep.seeds must be distinct");
}

/// Parses `key = value` lines. '#' starts a comment; keys are dotted.
/// Unknown or repeated keys are config errors naming the key.
inline ExperimentConfig parse_config(std::istream& in, const std::string& origin = "config") {
  ExperimentConfig cfg;
  std::set<std::string> seen;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
    const std::string t = detail::trim(line);
    if (t.empty()) continue;
    const auto eq = t.find('=');
    if (eq == std::string::npos)
      fail(ErrorKind::config, origin + ":" + std::to_string(lineno) + ": expected 'key = value'");
    const std::string key = detail::trim(std::string_view(t).substr(0, eq));
    const std::string value = detail::trim(std::string_view(t).substr(eq + 1));
    const auto& keys = detail::schema();
    auto it = keys.find(key);
    if (it == keys.end()) fail(ErrorKind::config, "unknown key '" + key + "' at " + origin + ":" + std::to_string(lineno));
    if (!seen.insert(key).second) fail(ErrorKind::config, "key '" + key + "' repeated at " + origin + ":" + std::to_string(lineno));
    it->second(cfg, key, value);
  }
  validate(cfg);
  return cfg;
}

inline ExperimentConfig parse_config_string(const std::string& text) {
  std::istringstream in(text);
  return parse_config(in, "<string>");
}

inline ExperimentConfig load_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) fail(ErrorKind::file, "cannot open config " + path.string());
  return parse_config(in, path.string());
}

}  // namespace xsub::harness
