#pragma once

// Policy evaluation: fraction-correct traces per action step, their
// aggregation, and the object-count generalization sweep.

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdint>
#include <map>
#include <optional>
#include <random>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

#include "setsort/agent.hpp"
#include "setsort/env.hpp"

namespace setsort {

struct EvalConfig {
  std::vector<int> objects_per_bin_list{3, 5, 10, 100};
  int episodes_per_setting = 20;
  std::vector<std::uint64_t> seeds{0, 1, 2, 3, 4};
  double greedy_epsilon = 0.0;

  void validate() const {
    if (objects_per_bin_list.empty()) throw std::invalid_argument("objects_per_bin_list is empty");
    if (seeds.empty()) throw std::invalid_argument("seeds is empty");
    if (episodes_per_setting <= 0)
      throw std::invalid_argument("episodes_per_setting must be positive");
    if (greedy_epsilon < 0 || greedy_epsilon > 1)
      throw std::invalid_argument("greedy_epsilon must lie in [0, 1]");
    for (int n : objects_per_bin_list)
      if (n < 0) throw std::invalid_argument("objects_per_bin_list entries must be >= 0");
  }
};

struct EpisodeTrace {
  std::vector<double> fraction_correct;  // one entry per action step, padded to the limit
  std::vector<int> actions;              // actions actually taken
  int steps = 0;
  bool solved = false;
};

struct RolloutOptions {
  double epsilon = 0.0;
  std::uint64_t action_seed = 0;
  /// When set, every observation's instance list is shuffled before the
  /// policy sees it.
  std::optional<std::uint64_t> shuffle_seed;
};

/// Rolls out `net` in a fresh environment seeded with env_config.seed.
inline EpisodeTrace run_episode(const PolicyNet& net, const EnvConfig& env_config,
                                const RolloutOptions& options = {}) {
  if (net.num_classes != env_config.num_classes)
    throw DimensionError("policy and environment disagree on the number of classes");
  std::mt19937_64 rng(options.action_seed);
  std::optional<std::mt19937_64> shuffler;
  if (options.shuffle_seed) shuffler.emplace(*options.shuffle_seed);
  auto perceive = [&](Observation obs) {
    if (shuffler) std::shuffle(obs.instances.begin(), obs.instances.end(), *shuffler);
    return obs;
  };

  EpisodeTrace trace;
  trace.fraction_correct.reserve(static_cast<std::size_t>(env_config.episode_limit));
  EnvState state = reset(env_config);
  FrameStack<Observation> stack(static_cast<std::size_t>(net.frame_stack));
  stack.push(perceive(observe(env_config, state)));
  while (!is_done(env_config, state)) {
    const int action = select_action(q_values(net, stack.window()), options.epsilon, rng);
    StepResult sr = step(env_config, state, Action::from_index(action, env_config.num_classes));
    trace.actions.push_back(action);
    trace.fraction_correct.push_back(sr.fraction_correct);
    stack.push(perceive(std::move(sr.observation)));
    state = std::move(sr.state);
  }
  trace.steps = state.step_count;
  trace.solved = is_solved(state);
  const double last = fraction_correct(state);
  trace.fraction_correct.resize(static_cast<std::size_t>(env_config.episode_limit), last);
  return trace;
}

struct EvalSummary {
  double final_fraction_correct = 0.0;  // mean over runs
  double final_fraction_correct_std = 0.0;
  double mean_steps_to_solve = 0.0;  // unsolved runs count as the episode limit
  double solve_rate = 0.0;
  std::size_t runs = 0;
};

struct AggregateMetrics {
  std::vector<double> mean;
  std::vector<double> std;
  EvalSummary summary;
};

/// Pointwise mean and population standard deviation of equal-length traces.
inline AggregateMetrics aggregate_metrics(const std::vector<const EpisodeTrace*>& runs) {
  if (runs.empty()) throw std::invalid_argument("aggregate_metrics needs at least one run");
  const std::size_t len = runs.front()->fraction_correct.size();
  for (const auto* r : runs)
    if (r->fraction_correct.size() != len) throw DimensionError("traces have different lengths");
  const double n = static_cast<double>(runs.size());
  AggregateMetrics out;
  out.mean.assign(len, 0.0);
  out.std.assign(len, 0.0);
  for (std::size_t t = 0; t < len; ++t) {
    double sum = 0.0;
    for (const auto* r : runs) sum += r->fraction_correct[t];
    const double mu = sum / n;
    double var = 0.0;
    for (const auto* r : runs) var += (r->fraction_correct[t] - mu) * (r->fraction_correct[t] - mu);
    out.mean[t] = mu;
    out.std[t] = std::sqrt(var / n);
  }
  EvalSummary& s = out.summary;
  s.runs = runs.size();
  double final_sum = 0.0, steps_sum = 0.0, solved = 0.0;
  for (const auto* r : runs) {
    final_sum += len ? r->fraction_correct.back() : 1.0;
    steps_sum += r->solved ? r->steps : static_cast<double>(len);
    solved += r->solved ? 1.0 : 0.0;
  }
  s.final_fraction_correct = final_sum / n;
  double var = 0.0;
  for (const auto* r : runs) {
    const double f = len ? r->fraction_correct.back() : 1.0;
    var += (f - s.final_fraction_correct) * (f - s.final_fraction_correct);
  }
  s.final_fraction_correct_std = std::sqrt(var / n);
  s.mean_steps_to_solve = steps_sum / n;
  s.solve_rate = solved / n;
  return out;
}

inline AggregateMetrics aggregate_metrics(const std::vector<EpisodeTrace>& runs) {
  std::vector<const EpisodeTrace*> ptrs;
  for (const auto& r : runs) ptrs.push_back(&r);
  return aggregate_metrics(ptrs);
}

/// A policy under evaluation. Runs are aggregated per `group` (e.g. the
/// pooling kind, pooling several training seeds together).
struct NamedPolicy {
  std::string name;
  std::string group;
  const PolicyNet* net = nullptr;
};

struct EpisodeRecord {
  std::string policy;
  std::string group;
  EncoderMode mode = EncoderMode::kMax;
  int objects_per_bin = 0;
  std::uint64_t seed = 0;
  int episode = 0;
  EpisodeTrace trace;
};

struct EvalRow {
  std::string group;
  int objects_per_bin = 0;
  AggregateMetrics metrics;
};

struct EvalReport {
  std::vector<EpisodeRecord> episodes;  // sorted by (policy, setting, seed, episode)
  std::vector<EvalRow> rows;            // sorted by (group, setting)

  const EvalRow* find(const std::string& group, int objects_per_bin) const {
    for (const auto& r : rows)
      if (r.group == group && r.objects_per_bin == objects_per_bin) return &r;
    return nullptr;
  }

  /// Summary over the episodes of one policy in one setting.
  EvalSummary summarize_policy(const std::string& policy, int objects_per_bin) const {
    std::vector<const EpisodeTrace*> runs;
    for (const auto& e : episodes)
      if (e.policy == policy && e.objects_per_bin == objects_per_bin) runs.push_back(&e.trace);
    return aggregate_metrics(runs).summary;
  }
};

inline std::uint64_t eval_env_seed(std::uint64_t seed, int objects_per_bin, int episode) {
  constexpr std::uint64_t kEvalSalt = 0x5EEDE7A1C0FFEEULL;
  return derive_seed(derive_seed(seed ^ kEvalSalt, static_cast<std::uint64_t>(objects_per_bin)),
                     static_cast<std::uint64_t>(episode));
}

/// Evaluates every policy in every objects-per-bin setting for each seed and
/// episode. Work is spread over `threads` workers; results do not depend on
/// the thread count.
inline EvalReport generalization_sweep(const std::vector<NamedPolicy>& policies,
                                       const EvalConfig& config, const EnvConfig& base_env,
                                       int threads = 1) {
  config.validate();
  EvalReport report;
  if (policies.empty()) return report;

  struct Task {
    std::size_t policy;
    std::size_t setting;
  };
  std::vector<Task> tasks;
  for (std::size_t p = 0; p < policies.size(); ++p)
    for (std::size_t s = 0; s < config.objects_per_bin_list.size(); ++s) tasks.push_back({p, s});
  std::vector<std::vector<EpisodeRecord>> results(tasks.size());

  auto run_task = [&](std::size_t index) {
    const Task& task = tasks[index];
    const NamedPolicy& np = policies[task.policy];
    EnvConfig env = base_env;
    env.objects_per_bin = config.objects_per_bin_list[task.setting];
    for (std::uint64_t seed : config.seeds)
      for (int ep = 0; ep < config.episodes_per_setting; ++ep) {
        env.seed = eval_env_seed(seed, env.objects_per_bin, ep);
        RolloutOptions opts;
        opts.epsilon = config.greedy_epsilon;
        opts.action_seed = derive_seed(env.seed, 1);
        EpisodeRecord rec{np.name, np.group, np.net->mode, env.objects_per_bin, seed, ep,
                          run_episode(*np.net, env, opts)};
        results[index].push_back(std::move(rec));
      }
  };

  const auto workers = static_cast<std::size_t>(std::max(1, threads));
  if (workers == 1) {
    for (std::size_t i = 0; i < tasks.size(); ++i) run_task(i);
  } else {
    std::atomic<std::size_t> next{0};
    std::vector<std::jthread> pool;
    for (std::size_t w = 0; w < std::min(workers, tasks.size()); ++w)
      pool.emplace_back([&] {
        for (std::size_t i = next++; i < tasks.size(); i = next++) run_task(i);
      });
  }

  for (auto& r : results)
    for (auto& e : r) report.episodes.push_back(std::move(e));

  std::map<std::pair<std::string, int>, std::vector<const EpisodeTrace*>> grouped;
  for (const auto& e : report.episodes)
    grouped[{e.group, e.objects_per_bin}].push_back(&e.trace);
  for (const auto& [key, runs] : grouped)
    report.rows.push_back({key.first, key.second, aggregate_metrics(runs)});
  return report;
}

}  // namespace setsort
