#pragma once

// Experiment configuration: a flat key = value document with optional
// [section] headers that prefix keys ("[optimizer]" + "lr = 0.01" is
// "optimizer.lr"). Parsing is strict: unknown keys, duplicate keys and
// malformed values are ConfigErrors.

#include <algorithm>
#include <charconv>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <type_traits>
#include <vector>

#include "hyperlab/datasynth.hpp"
#include "hyperlab/errors.hpp"
#include "hyperlab/hypersphere.hpp"
#include "hyperlab/netblocks.hpp"
#include "hyperlab/optim.hpp"

namespace hyperlab {

inline std::string format_real(double d) {
  char buf[64];
  auto [ptr, ec] = std::to_chars(buf, buf + sizeof(buf), d);
  return std::string(buf, ptr);
}

enum class TaskSet { Completion, Classification, Both };
enum class Strategy { Equal, PcGrad, Uncertainty, Fixed };

inline const char* to_string(TaskSet t) {
  switch (t) {
    case TaskSet::Completion: return "completion";
    case TaskSet::Classification: return "classification";
    case TaskSet::Both: return "both";
  }
  return "?";
}

inline const char* to_string(Strategy s) {
  switch (s) {
    case Strategy::Equal: return "equal";
    case Strategy::PcGrad: return "pcgrad";
    case Strategy::Uncertainty: return "uncertainty";
    case Strategy::Fixed: return "fixed";
  }
  return "?";
}

struct ExperimentConfig {
  std::string dataset = "data";
  std::string output = "out";
  std::string run_id;  // derived when empty
  std::uint64_t seed = 1;
  std::size_t epochs = 20;
  std::size_t batch_size = 32;
  std::size_t jobs = 1;
  TaskSet tasks = TaskSet::Completion;
  Strategy strategy = Strategy::Equal;
  std::vector<double> weights{1.0, 1.0};
  OptimizerKind optimizer = OptimizerKind::Adam;
  double lr = 1e-3;
  ArchConfig arch;
  DatasetOptions data;
  bool log_wall_clock = false;
  std::size_t eval_max_samples = 0;  // 0 = whole test split
  std::vector<double> sweep_lrs{1e-3, 1e-2, 1e-1, 1.0};
  std::vector<double> search_weights{0.0, 0.01, 0.1, 0.5, 1.0, 2.0};
  std::size_t diag_bins = 32;
  std::size_t interp_steps = 5;
  std::size_t interp_src = 0;
  std::size_t interp_dst = 1;
  std::string interp_mode = "auto";

  bool multitask() const { return tasks == TaskSet::Both; }

  std::string derived_run_id() const {
    if (!run_id.empty()) return run_id;
    std::ostringstream os;
    os << (arch.hyper_enabled ? "hyper" : "plain") << '-' << to_string(tasks);
    if (multitask()) os << '-' << to_string(strategy);
    os << '-' << to_string(optimizer) << '-' << format_real(lr) << "-s" << seed;
    return os.str();
  }

  void validate() const {
    if (epochs == 0) throw ConfigError("epochs must be >= 1");
    if (batch_size == 0) throw ConfigError("batch_size must be >= 1");
    if (jobs == 0) throw ConfigError("jobs must be >= 1");
    if (!(lr >= 0.0) || !std::isfinite(lr)) throw ConfigError("optimizer.lr must be finite and >= 0");
    if (strategy == Strategy::Fixed) {
      if (weights.size() != 2) throw ConfigError("weights must list two task weights");
      if (std::any_of(weights.begin(), weights.end(), [](double w) { return !(w >= 0.0); }) ||
          std::all_of(weights.begin(), weights.end(), [](double w) { return w == 0.0; })) {
        throw ConfigError("weights must be >= 0 and not all zero");
      }
    }
    if (interp_steps < 2) throw ConfigError("diagnose.interp_steps must be >= 2");
    if (interp_mode != "auto" && interp_mode != "linear" && interp_mode != "spherical") {
      throw ConfigError("diagnose.interp_mode must be auto, linear or spherical");
    }
    if (!(data.keep_fraction > 0.0 && data.keep_fraction <= 1.0)) throw ConfigError("data.keep_fraction in (0,1]");
    if (data.complete_points < 64) throw ConfigError("data.complete_points must be >= 64");
    if (data.partial_points == 0) throw ConfigError("data.partial_points must be >= 1");
    ArchConfig a = arch;
    a.completion = tasks != TaskSet::Classification;
    a.classification = tasks != TaskSet::Completion;
    a.validate();
  }

  // Architecture with decoder switches taken from the task set.
  ArchConfig arch_for_tasks() const {
    ArchConfig a = arch;
    a.completion = tasks != TaskSet::Classification;
    a.classification = tasks != TaskSet::Completion;
    return a;
  }
};

namespace detail {

inline std::string trim(std::string s) {
  auto not_space = [](unsigned char c) { return !std::isspace(c); };
  s.erase(s.begin(), std::find_if(s.begin(), s.end(), not_space));
  s.erase(std::find_if(s.rbegin(), s.rend(), not_space).base(), s.end());
  return s;
}

inline double parse_real(const std::string& key, const std::string& v) {
  try {
    std::size_t pos = 0;
    const double d = std::stod(v, &pos);
    if (pos != v.size() || !std::isfinite(d)) throw ConfigError("");
    return d;
  } catch (const std::exception&) {
    throw ConfigError("key '" + key + "': expected a real number, got '" + v + "'");
  }
}

inline std::uint64_t parse_uint(const std::string& key, const std::string& v) {
  std::uint64_t out = 0;
  auto [ptr, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc{} || ptr != v.data() + v.size()) {
    throw ConfigError("key '" + key + "': expected a non-negative integer, got '" + v + "'");
  }
  return out;
}

inline bool parse_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "on" || v == "1" || v == "yes") return true;
  if (v == "false" || v == "off" || v == "0" || v == "no") return false;
  throw ConfigError("key '" + key + "': expected a boolean, got '" + v + "'");
}

inline std::vector<std::string> split_list(const std::string& v) {
  std::vector<std::string> out;
  std::string item;
  std::istringstream is(v);
  while (std::getline(is, item, ',')) {
    item = trim(item);
    if (!item.empty()) out.push_back(item);
  }
  return out;
}

inline std::vector<double> parse_real_list(const std::string& key, const std::string& v) {
  std::vector<double> out;
  for (const auto& s : split_list(v)) out.push_back(parse_real(key, s));
  return out;
}

inline std::vector<std::size_t> parse_uint_list(const std::string& key, const std::string& v) {
  std::vector<std::size_t> out;
  for (const auto& s : split_list(v)) out.push_back(parse_uint(key, s));
  return out;
}

template <typename T>
std::string join(const std::vector<T>& v) {
  std::string out;
  for (std::size_t i = 0; i < v.size(); ++i) {
    if (i) out += ",";
    if constexpr (std::is_floating_point_v<T>) out += format_real(v[i]);
    else out += std::to_string(v[i]);
  }
  return out;
}

struct KeyHandler {
  std::function<void(ExperimentConfig&, const std::string&)> set;
  std::function<std::string(const ExperimentConfig&)> get;
};

inline const std::map<std::string, KeyHandler>& key_table() {
  using C = ExperimentConfig;
  static const std::map<std::string, KeyHandler> table = [] {
    std::map<std::string, KeyHandler> t;
    auto str = [](auto member) {
      return KeyHandler{[member](C& c, const std::string& v) { c.*member = v; },
                        [member](const C& c) { return c.*member; }};
    };
    auto uint = [](const char* key, auto getter) {
      return KeyHandler{[key, getter](C& c, const std::string& v) { getter(c) = parse_uint(key, v); },
                        [getter](const C& c) { return std::to_string(getter(const_cast<C&>(c))); }};
    };
    auto real = [](const char* key, auto getter) {
      return KeyHandler{[key, getter](C& c, const std::string& v) { getter(c) = parse_real(key, v); },
                        [getter](const C& c) { return format_real(getter(const_cast<C&>(c))); }};
    };
    auto boolean = [](const char* key, auto getter) {
      return KeyHandler{[key, getter](C& c, const std::string& v) { getter(c) = parse_bool(key, v); },
                        [getter](const C& c) { return std::string(getter(const_cast<C&>(c)) ? "true" : "false"); }};
    };
    t["dataset"] = str(&C::dataset);
    t["output"] = str(&C::output);
    t["run_id"] = str(&C::run_id);
    t["seed"] = KeyHandler{[](C& c, const std::string& v) { c.seed = parse_uint("seed", v); },
                           [](const C& c) { return std::to_string(c.seed); }};
    t["epochs"] = uint("epochs", [](C& c) -> std::size_t& { return c.epochs; });
    t["batch_size"] = uint("batch_size", [](C& c) -> std::size_t& { return c.batch_size; });
    t["jobs"] = uint("jobs", [](C& c) -> std::size_t& { return c.jobs; });
    t["tasks"] = KeyHandler{[](C& c, const std::string& v) {
                              if (v == "completion") c.tasks = TaskSet::Completion;
                              else if (v == "classification") c.tasks = TaskSet::Classification;
                              else if (v == "both") c.tasks = TaskSet::Both;
                              else throw ConfigError("tasks must be completion, classification or both");
                            },
                            [](const C& c) { return std::string(to_string(c.tasks)); }};
    t["strategy"] = KeyHandler{[](C& c, const std::string& v) {
                                 if (v == "equal") c.strategy = Strategy::Equal;
                                 else if (v == "pcgrad") c.strategy = Strategy::PcGrad;
                                 else if (v == "uncertainty") c.strategy = Strategy::Uncertainty;
                                 else if (v == "fixed") c.strategy = Strategy::Fixed;
                                 else throw ConfigError("strategy must be equal, pcgrad, uncertainty or fixed");
                               },
                               [](const C& c) { return std::string(to_string(c.strategy)); }};
    t["weights"] = KeyHandler{[](C& c, const std::string& v) { c.weights = parse_real_list("weights", v); },
                              [](const C& c) { return join(c.weights); }};
    t["optimizer.kind"] = KeyHandler{[](C& c, const std::string& v) { c.optimizer = parse_optimizer_kind(v); },
                                     [](const C& c) { return std::string(to_string(c.optimizer)); }};
    t["optimizer.lr"] = real("optimizer.lr", [](C& c) -> double& { return c.lr; });
    t["model.embedding_dim"] = uint("model.embedding_dim", [](C& c) -> std::size_t& { return c.arch.embedding_dim; });
    t["model.encoder_hidden"] =
        KeyHandler{[](C& c, const std::string& v) { c.arch.encoder_hidden = parse_uint_list("model.encoder_hidden", v); },
                   [](const C& c) { return join(c.arch.encoder_hidden); }};
    t["model.grid_side"] = uint("model.grid_side", [](C& c) -> std::size_t& { return c.arch.grid_side; });
    t["model.decoder_hidden"] =
        KeyHandler{[](C& c, const std::string& v) { c.arch.decoder_hidden = parse_uint_list("model.decoder_hidden", v); },
                   [](const C& c) { return join(c.arch.decoder_hidden); }};
    t["model.classifier_hidden"] =
        uint("model.classifier_hidden", [](C& c) -> std::size_t& { return c.arch.classifier_hidden; });
    t["hyper.enabled"] = boolean("hyper.enabled", [](C& c) -> bool& { return c.arch.hyper_enabled; });
    t["hyper.mlp_layers"] = KeyHandler{
        [](C& c, const std::string& v) { c.arch.hyper.mlp_layers = static_cast<int>(parse_uint("hyper.mlp_layers", v)); },
        [](const C& c) { return std::to_string(c.arch.hyper.mlp_layers); }};
    t["hyper.relu_bn"] = boolean("hyper.relu_bn", [](C& c) -> bool& { return c.arch.hyper.use_relu_bn; });
    t["hyper.norm_p"] = KeyHandler{
        [](C& c, const std::string& v) { c.arch.hyper.norm_p = static_cast<int>(parse_uint("hyper.norm_p", v)); },
        [](const C& c) { return std::to_string(c.arch.hyper.norm_p); }};
    t["hyper.normalize"] = boolean("hyper.normalize", [](C& c) -> bool& { return c.arch.hyper.apply_norm; });
    t["hyper.output_dim"] = uint("hyper.output_dim", [](C& c) -> std::size_t& { return c.arch.hyper.output_dim; });
    t["hyper.eps_guard"] = real("hyper.eps_guard", [](C& c) -> double& { return c.arch.hyper.eps_guard; });
    t["data.train_samples"] = uint("data.train_samples", [](C& c) -> std::size_t& { return c.data.train_samples; });
    t["data.test_samples"] = uint("data.test_samples", [](C& c) -> std::size_t& { return c.data.test_samples; });
    t["data.complete_points"] =
        uint("data.complete_points", [](C& c) -> std::size_t& { return c.data.complete_points; });
    t["data.partial_points"] = uint("data.partial_points", [](C& c) -> std::size_t& { return c.data.partial_points; });
    t["data.keep_fraction"] = real("data.keep_fraction", [](C& c) -> double& { return c.data.keep_fraction; });
    t["log.wall_clock"] = boolean("log.wall_clock", [](C& c) -> bool& { return c.log_wall_clock; });
    t["eval.max_samples"] = uint("eval.max_samples", [](C& c) -> std::size_t& { return c.eval_max_samples; });
    t["sweep.lrs"] = KeyHandler{[](C& c, const std::string& v) { c.sweep_lrs = parse_real_list("sweep.lrs", v); },
                                [](const C& c) { return join(c.sweep_lrs); }};
    t["search.classification_weights"] =
        KeyHandler{[](C& c, const std::string& v) {
                     c.search_weights = parse_real_list("search.classification_weights", v);
                   },
                   [](const C& c) { return join(c.search_weights); }};
    t["diagnose.bins"] = uint("diagnose.bins", [](C& c) -> std::size_t& { return c.diag_bins; });
    t["diagnose.interp_steps"] = uint("diagnose.interp_steps", [](C& c) -> std::size_t& { return c.interp_steps; });
    t["diagnose.interp_src"] = uint("diagnose.interp_src", [](C& c) -> std::size_t& { return c.interp_src; });
    t["diagnose.interp_dst"] = uint("diagnose.interp_dst", [](C& c) -> std::size_t& { return c.interp_dst; });
    t["diagnose.interp_mode"] = str(&C::interp_mode);
    return t;
  }();
  return table;
}

}  // namespace detail

inline void apply_setting(ExperimentConfig& cfg, const std::string& key, const std::string& value) {
  const auto& table = detail::key_table();
  auto it = table.find(key);
  if (it == table.end()) throw ConfigError("unknown config key '" + key + "'");
  it->second.set(cfg, value);
  // The hypersphere input always follows the encoder width.
  cfg.arch.hyper.input_dim = cfg.arch.embedding_dim;
}

// "key=value" as given to --override.
inline void apply_override(ExperimentConfig& cfg, const std::string& kv) {
  const auto eq = kv.find('=');
  if (eq == std::string::npos) throw ConfigError("override '" + kv + "' is not key=value");
  apply_setting(cfg, detail::trim(kv.substr(0, eq)), detail::trim(kv.substr(eq + 1)));
}

inline ExperimentConfig parse_config(std::istream& in, ExperimentConfig cfg = {}) {
  std::string line;
  std::string section;
  std::set<std::string> seen;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line = line.substr(0, hash);
    line = detail::trim(line);
    if (line.empty()) continue;
    if (line.front() == '[') {
      if (line.back() != ']') throw ConfigError("line " + std::to_string(lineno) + ": malformed section header");
      section = detail::trim(line.substr(1, line.size() - 2));
      continue;
    }
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw ConfigError("line " + std::to_string(lineno) + ": expected key = value");
    std::string key = detail::trim(line.substr(0, eq));
    if (!section.empty()) key = section + "." + key;
    if (!seen.insert(key).second) throw ConfigError("line " + std::to_string(lineno) + ": duplicate key '" + key + "'");
    try {
      apply_setting(cfg, key, detail::trim(line.substr(eq + 1)));
    } catch (const ConfigError& e) {
      throw ConfigError("line " + std::to_string(lineno) + ": " + e.what());
    }
  }
  return cfg;
}

inline ExperimentConfig load_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open config " + path.string());
  return parse_config(in);
}

// Every key with its current value, sorted; parse_config of this text gives
// back an equal configuration.
inline std::map<std::string, std::string> config_entries(const ExperimentConfig& cfg) {
  std::map<std::string, std::string> out;
  for (const auto& [key, handler] : detail::key_table()) out[key] = handler.get(cfg);
  return out;
}

inline std::string render_config(const ExperimentConfig& cfg) {
  std::ostringstream os;
  for (const auto& [k, v] : config_entries(cfg)) os << k << " = " << v << '\n';
  return os.str();
}

}  // namespace hyperlab
