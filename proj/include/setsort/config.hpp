#pragma once

// Flat `key = value` experiment configuration. Keys are the field names of
// EnvConfig, TrainConfig and EvalConfig; `#` starts a comment. Later
// assignments win, so command-line overrides are applied with set() after
// the file is loaded.

#include <charconv>
#include <cstdint>
#include <fstream>
#include <limits>
#include <map>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "setsort/agent.hpp"
#include "setsort/env.hpp"
#include "setsort/eval.hpp"

namespace setsort {

/// Names the offending key.
struct ConfigError : std::invalid_argument {
  std::string key;
  ConfigError(std::string k, const std::string& what)
      : std::invalid_argument("config key '" + k + "': " + what), key(std::move(k)) {}
};

struct ExperimentConfig {
  EnvConfig env;
  TrainConfig train;
  EvalConfig eval;
  int train_seeds = 5;  // training runs use seeds train.seed .. train.seed + train_seeds - 1

  void validate() const {
    env.validate();
    train.validate();
    eval.validate();
    if (train_seeds < 0) throw ConfigError("train_seeds", "must be >= 0");
  }

  std::vector<std::uint64_t> training_seeds() const {
    std::vector<std::uint64_t> out;
    for (int i = 0; i < train_seeds; ++i) out.push_back(train.seed + static_cast<std::uint64_t>(i));
    return out;
  }
};

namespace detail {

inline std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

template <typename T>
T parse_number(const std::string& key, const std::string& value) {
  T out{};
  const char* end = value.data() + value.size();
  auto [ptr, ec] = std::from_chars(value.data(), end, out);
  if (ec != std::errc() || ptr != end)
    throw ConfigError(key, "cannot parse '" + value + "' as a number");
  return out;
}

template <typename T>
std::vector<T> parse_list(const std::string& key, const std::string& value) {
  std::vector<T> out;
  std::stringstream ss(value);
  std::string item;
  while (std::getline(ss, item, ',')) {
    item = trim(item);
    if (!item.empty()) out.push_back(parse_number<T>(key, item));
  }
  if (out.empty()) throw ConfigError(key, "list is empty");
  return out;
}

inline std::string join_seeds(const std::vector<std::uint64_t>& v) {
  std::string s;
  for (std::size_t i = 0; i < v.size(); ++i) s += (i ? "," : "") + std::to_string(v[i]);
  return s;
}

inline std::string format_double(double v) {
  char buf[64];
  auto [ptr, ec] = std::to_chars(buf, buf + sizeof buf, v);
  (void)ec;
  return std::string(buf, ptr);
}

}  // namespace detail

/// Assigns one key. Throws ConfigError naming the key on unknown keys or
/// unparsable values.
inline void set(ExperimentConfig& c, const std::string& key, const std::string& raw) {
  using detail::parse_number;
  const std::string value = detail::trim(raw);
  auto as_int = [&] { return parse_number<int>(key, value); };
  auto as_double = [&] { return parse_number<double>(key, value); };
  TrainConfig& t = c.train;

  if (key == "episode_limit") {
    t.episode_limit = as_int();
    c.env.episode_limit = t.episode_limit;
  } else if (key == "instance_embedding") t.instance_embedding = as_int();
  else if (key == "state_embedding") t.state_embedding = as_int();
  else if (key == "q_hidden") t.q_hidden = as_int();
  else if (key == "discount") t.discount = as_double();
  else if (key == "replay_capacity") {
    if (value != "inf" && value != "unbounded")
      throw ConfigError(key, "only an unbounded replay memory is supported (use 'inf')");
  } else if (key == "frame_stack") t.frame_stack = as_int();
  else if (key == "batch_size") t.batch_size = as_int();
  else if (key == "learning_rate") t.learning_rate = as_double();
  else if (key == "epsilon_initial") t.epsilon_initial = as_double();
  else if (key == "epsilon_final") t.epsilon_final = as_double();
  else if (key == "epsilon_anneal_episodes") t.epsilon_anneal_episodes = as_int();
  else if (key == "max_episodes") t.max_episodes = as_int();
  else if (key == "pooling") {
    try {
      t.pooling = encoder_mode_from_string(value);
    } catch (const std::invalid_argument& e) {
      throw ConfigError(key, e.what());
    }
  } else if (key == "seed") t.seed = parse_number<std::uint64_t>(key, value);
  else if (key == "target_sync_interval") t.target_sync_interval = as_int();
  else if (key == "train_seeds") c.train_seeds = as_int();
  else if (key == "num_classes") c.env.num_classes = as_int();
  else if (key == "objects_per_bin") c.env.objects_per_bin = as_int();
  else if (key == "objects_per_bin_list") c.eval.objects_per_bin_list = detail::parse_list<int>(key, value);
  else if (key == "episodes_per_setting") c.eval.episodes_per_setting = as_int();
  else if (key == "seeds") c.eval.seeds = detail::parse_list<std::uint64_t>(key, value);
  else if (key == "greedy_epsilon") c.eval.greedy_epsilon = as_double();
  else throw ConfigError(key, "unknown key");
}

inline void load_config_text(ExperimentConfig& c, const std::string& text) {
  std::istringstream in(text);
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (auto hash = line.find('#'); hash != std::string::npos) line.resize(hash);
    line = detail::trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos)
      throw ConfigError(line, "line " + std::to_string(lineno) + " is not 'key = value'");
    set(c, detail::trim(line.substr(0, eq)), line.substr(eq + 1));
  }
}

inline void load_config_file(ExperimentConfig& c, const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot read config file '" + path + "'");
  std::stringstream ss;
  ss << in.rdbuf();
  load_config_text(c, ss.str());
}

/// Fully resolved configuration as `key = value` lines, in a fixed order.
inline std::map<std::string, std::string> to_key_values(const ExperimentConfig& c) {
  using detail::format_double;
  const TrainConfig& t = c.train;
  std::string opb;
  for (std::size_t i = 0; i < c.eval.objects_per_bin_list.size(); ++i)
    opb += (i ? "," : "") + std::to_string(c.eval.objects_per_bin_list[i]);
  return {
      {"episode_limit", std::to_string(t.episode_limit)},
      {"instance_embedding", std::to_string(t.instance_embedding)},
      {"state_embedding", std::to_string(t.state_embedding)},
      {"q_hidden", std::to_string(t.q_hidden)},
      {"discount", format_double(t.discount)},
      {"replay_capacity", "inf"},
      {"frame_stack", std::to_string(t.frame_stack)},
      {"batch_size", std::to_string(t.batch_size)},
      {"learning_rate", format_double(t.learning_rate)},
      {"epsilon_initial", format_double(t.epsilon_initial)},
      {"epsilon_final", format_double(t.epsilon_final)},
      {"epsilon_anneal_episodes", std::to_string(t.epsilon_anneal_episodes)},
      {"max_episodes", std::to_string(t.max_episodes)},
      {"pooling", to_string(t.pooling)},
      {"seed", std::to_string(t.seed)},
      {"target_sync_interval", std::to_string(t.target_sync_interval)},
      {"train_seeds", std::to_string(c.train_seeds)},
      {"num_classes", std::to_string(c.env.num_classes)},
      {"objects_per_bin", std::to_string(c.env.objects_per_bin)},
      {"objects_per_bin_list", opb},
      {"episodes_per_setting", std::to_string(c.eval.episodes_per_setting)},
      {"seeds", detail::join_seeds(c.eval.seeds)},
      {"greedy_epsilon", format_double(c.eval.greedy_epsilon)},
  };
}

inline std::string to_config_text(const ExperimentConfig& c) {
  std::string out;
  for (const auto& [k, v] : to_key_values(c)) out += k + " = " + v + "\n";
  return out;
}

}  // namespace setsort
