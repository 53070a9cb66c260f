#ifndef ENTRAIN_RUN_CONFIG_HPP_
#define ENTRAIN_RUN_CONFIG_HPP_

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "entrain/ablation_bench.hpp"
#include "entrain/error.hpp"
#include "entrain/mask_discovery.hpp"
#include "entrain/prompt_factory.hpp"
#include "entrain/relation_store.hpp"
#include "entrain/rng.hpp"

namespace entrain {

inline constexpr int kSchemaVersion = 1;
inline constexpr const char* kToolVersion = "0.1.0";

struct RunConfig {
  std::string model_id = "ref:2x2";
  std::string data_dir;                     // empty: data_dir() default
  std::vector<std::string> relation_paths;  // empty: <data>/relations
  std::vector<std::string> relation_ids;    // empty: every loaded relation
  std::vector<ContextSetting> settings = {ContextSetting::Related, ContextSetting::Irrelevant, ContextSetting::Random,
                                          ContextSetting::Counterfactual};
  std::uint64_t seed = 0;
  SplitSpec split;
  DiscoveryConfig discovery;
  std::string output_dir = "out";
  std::size_t cap = 100000;
  std::string heads_path;  // ablate / capability input; empty: <out>/heads/<relation>.json
  std::vector<TaskKind> tasks = {TaskKind::Arithmetic, TaskKind::Spelling, TaskKind::Translation};
  std::vector<int> shots = {1, 2, 5};
  TaskCounts task_counts;
  int stability_runs = 5;
};

/// Flattened "section.key" -> values; arrays keep one entry per element.
using FlatConfig = std::map<std::string, std::vector<std::string>>;

namespace detail {

inline void flatten_json(const nlohmann::json& j, const std::string& prefix, FlatConfig& out) {
  for (const auto& [k, v] : j.items()) {
    const std::string key = prefix.empty() ? k : prefix + "." + k;
    if (v.is_object()) {
      require(prefix.empty(), ErrorCode::ConfigInvalid, "config nesting deeper than one section at '" + key + "'");
      flatten_json(v, key, out);
      continue;
    }
    auto scalar = [&](const nlohmann::json& x) {
      require(!x.is_object() && !x.is_array(), ErrorCode::ConfigInvalid, "nested value at '" + key + "'");
      return x.is_string() ? x.get<std::string>() : x.dump();
    };
    std::vector<std::string> vals;
    if (v.is_array()) {
      for (const auto& x : v) vals.push_back(scalar(x));
    } else if (!v.is_null()) {
      vals.push_back(scalar(v));
    }
    out[key] = vals;
  }
}

// "a,b" and ["a","b"] both mean two values.
inline std::vector<std::string> split_list(const std::vector<std::string>& vals) {
  std::vector<std::string> out;
  for (const auto& v : vals) {
    std::stringstream ss(v);
    std::string item;
    while (std::getline(ss, item, ',')) {
      item = trim(item);
      if (!item.empty()) out.push_back(item);
    }
  }
  return out;
}

inline const std::string& single(const std::string& key, const std::vector<std::string>& vals) {
  require(vals.size() == 1, ErrorCode::ConfigInvalid, "'" + key + "' expects one value");
  return vals.front();
}

template <typename T>
T number(const std::string& key, const std::vector<std::string>& vals) {
  const std::string& s = single(key, vals);
  try {
    std::size_t used = 0;
    T v{};
    if constexpr (std::is_floating_point_v<T>) {
      v = static_cast<T>(std::stod(s, &used));
    } else if constexpr (std::is_unsigned_v<T>) {
      require(!s.empty() && s[0] != '-', ErrorCode::ConfigInvalid, "'" + key + "' must be non-negative");
      v = static_cast<T>(std::stoull(s, &used));
    } else {
      v = static_cast<T>(std::stoll(s, &used));
    }
    require(used == s.size(), ErrorCode::ConfigInvalid, "'" + key + "': trailing characters in '" + s + "'");
    return v;
  } catch (const std::logic_error&) {
    fail(ErrorCode::ConfigInvalid, "'" + key + "': not a number: '" + s + "'");
  }
}

inline bool boolean(const std::string& key, const std::vector<std::string>& vals) {
  const std::string& s = single(key, vals);
  if (s == "true" || s == "1") return true;
  if (s == "false" || s == "0") return false;
  fail(ErrorCode::ConfigInvalid, "'" + key + "': expected true or false, got '" + s + "'");
}

}  // namespace detail

/// Reads a flat config: JSON when the file ends in ".json", TOML otherwise.
/// One level of sections at most ("[discovery]" / {"discovery": {...}}).
inline FlatConfig read_flat_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  require(static_cast<bool>(in), ErrorCode::ConfigInvalid, "cannot open config " + path.string());
  FlatConfig out;
  if (path.extension() == ".json") {
    nlohmann::json j;
    try {
      in >> j;
    } catch (const nlohmann::json::exception& e) {
      fail(ErrorCode::ConfigInvalid, path.string() + ": " + e.what());
    }
    require(j.is_object(), ErrorCode::ConfigInvalid, path.string() + ": top level must be an object");
    detail::flatten_json(j, "", out);
    return out;
  }
  std::vector<CLI::ConfigItem> items;
  try {
    items = CLI::ConfigTOML().from_config(in);
  } catch (const CLI::Error& e) {
    fail(ErrorCode::ConfigInvalid, path.string() + ": " + e.what());
  }
  for (const auto& item : items) {
    // Section open/close markers.
    if (item.name == "++" || item.name == "--") continue;
    require(item.parents.size() <= 1, ErrorCode::ConfigInvalid,
            path.string() + ": config nesting deeper than one section at '" + item.fullname() + "'");
    out[item.fullname()] = item.inputs;
  }
  return out;
}

/// Applies every key of `flat` to `cfg`; unknown keys are errors.
inline void apply_config(RunConfig& cfg, const FlatConfig& flat) {
  using namespace detail;
  for (const auto& [key, vals] : flat) {
    if (key == "model") {
      cfg.model_id = single(key, vals);
    } else if (key == "data_dir") {
      cfg.data_dir = single(key, vals);
    } else if (key == "relations" || key == "relation_paths") {
      cfg.relation_paths = split_list(vals);
    } else if (key == "relation_ids" || key == "relation") {
      cfg.relation_ids = split_list(vals);
    } else if (key == "settings") {
      cfg.settings.clear();
      for (const auto& s : split_list(vals)) {
        try {
          cfg.settings.push_back(parse_setting(s));
        } catch (const Error&) {
          fail(ErrorCode::ConfigInvalid, "unknown setting '" + s + "'");
        }
      }
    } else if (key == "seed") {
      cfg.seed = number<std::uint64_t>(key, vals);
    } else if (key == "output_dir" || key == "out") {
      cfg.output_dir = single(key, vals);
    } else if (key == "cap") {
      cfg.cap = number<std::size_t>(key, vals);
    } else if (key == "heads") {
      cfg.heads_path = single(key, vals);
    } else if (key == "split.train") {
      cfg.split.train_fraction = number<double>(key, vals);
    } else if (key == "split.dev") {
      cfg.split.dev_fraction = number<double>(key, vals);
    } else if (key == "split.test") {
      cfg.split.test_fraction = number<double>(key, vals);
    } else if (key == "discovery.epochs") {
      cfg.discovery.epochs = number<int>(key, vals);
    } else if (key == "discovery.lambda") {
      cfg.discovery.lambda = number<double>(key, vals);
    } else if (key == "discovery.tau") {
      cfg.discovery.tau = number<double>(key, vals);
    } else if (key == "discovery.lr") {
      cfg.discovery.lr = number<double>(key, vals);
    } else if (key == "discovery.init_logit") {
      cfg.discovery.init_logit = number<double>(key, vals);
    } else if (key == "discovery.weight_decay") {
      cfg.discovery.weight_decay = number<double>(key, vals);
    } else if (key == "discovery.head_penalty") {
      cfg.discovery.head_penalty = number<double>(key, vals);
    } else if (key == "discovery.max_removed") {
      cfg.discovery.max_removed = number<std::size_t>(key, vals);
    } else if (key == "discovery.allow_degenerate") {
      cfg.discovery.allow_degenerate = boolean(key, vals);
    } else if (key == "capability.tasks") {
      cfg.tasks.clear();
      for (const auto& t : split_list(vals)) cfg.tasks.push_back(parse_task(t));
    } else if (key == "capability.shots") {
      cfg.shots.clear();
      for (const auto& s : split_list(vals)) cfg.shots.push_back(number<int>(key, {s}));
    } else if (key == "capability.count") {
      const auto n = number<std::size_t>(key, vals);
      cfg.task_counts = {n, n, n};
    } else if (key == "stability.runs") {
      cfg.stability_runs = number<int>(key, vals);
    } else {
      fail(ErrorCode::ConfigInvalid, "unknown config key '" + key + "'");
    }
  }
}

/// Range checks that do not touch the filesystem.
inline void validate_config(const RunConfig& cfg) {
  auto check = [](bool ok, const std::string& msg) { require(ok, ErrorCode::ConfigInvalid, msg); };
  check(!cfg.model_id.empty(), "model is empty");
  check(!cfg.settings.empty(), "no context settings selected");
  const auto& s = cfg.split;
  check(s.train_fraction > 0 && s.dev_fraction > 0 && s.test_fraction > 0 &&
            std::abs(s.train_fraction + s.dev_fraction + s.test_fraction - 1.0) < 1e-9,
        "split fractions must be positive and sum to 1");
  const auto& d = cfg.discovery;
  check(d.epochs >= 1, "discovery.epochs must be at least 1");
  check(d.tau > 0 && d.lr > 0 && d.lambda >= 0 && d.weight_decay >= 0 && d.head_penalty >= 0,
        "discovery: tau and lr must be positive; lambda, weight_decay and head_penalty non-negative");
  check(cfg.cap >= 1, "cap must be at least 1");
  for (int k : cfg.shots) check(k >= 1, "capability.shots entries must be at least 1");
  check(cfg.stability_runs >= 2, "stability.runs must be at least 2");
}

inline nlohmann::json config_to_json(const RunConfig& c) {
  std::vector<std::string> settings, tasks;
  for (auto s : c.settings) settings.emplace_back(to_string(s));
  for (auto t : c.tasks) tasks.push_back(to_string(t));
  auto disc = discovery_config_to_json(c.discovery);
  disc.erase("seed");  // the run seed lives at the top level
  return {{"model", c.model_id},
          {"relations", c.relation_paths},
          {"relation_ids", c.relation_ids},
          {"settings", settings},
          {"seed", c.seed},
          {"split", {{"train", c.split.train_fraction}, {"dev", c.split.dev_fraction}, {"test", c.split.test_fraction}}},
          {"discovery", disc},
          {"cap", c.cap},
          {"heads", c.heads_path},
          {"capability",
           {{"tasks", tasks},
            {"shots", c.shots},
            {"counts",
             {c.task_counts.arithmetic, c.task_counts.spelling, c.task_counts.translation}}}},
          {"stability", {{"runs", c.stability_runs}}}};
}

/// Hash of everything that affects results (the output location does not).
inline std::string config_hash(const RunConfig& c) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(fnv1a(config_to_json(c).dump())));
  return buf;
}

}  // namespace entrain

#endif  // ENTRAIN_RUN_CONFIG_HPP_
