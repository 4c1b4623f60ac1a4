#pragma once

// Abstracted object-sorting task. One bin per class, the robot sees a single
// bin at a time, and acts through move/grasp/drop primitives that always
// succeed when feasible.

#include <algorithm>
#include <cstdint>
#include <optional>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

#include "setsort/observation.hpp"

namespace setsort {

struct UsageError : std::logic_error {
  using std::logic_error::logic_error;
};

struct EnvConfig {
  int num_classes = 3;
  int objects_per_bin = 3;
  int episode_limit = 300;
  std::uint64_t seed = 0;

  void validate() const {
    if (num_classes <= 0) throw std::invalid_argument("num_classes must be positive");
    if (objects_per_bin < 0) throw std::invalid_argument("objects_per_bin must be >= 0");
    if (episode_limit <= 0) throw std::invalid_argument("episode_limit must be positive");
  }
  int total_objects() const { return num_classes * objects_per_bin; }
};

/// Bin b is the home of class b.
inline int assigned_class(int bin) { return bin; }

struct EnvState {
  std::vector<std::vector<int>> bins;  // class labels, in arrival order
  int robot_bin = 0;
  std::optional<int> held;
  int step_count = 0;

  bool operator==(const EnvState&) const = default;

  int object_count() const {
    int n = held ? 1 : 0;
    for (const auto& b : bins) n += static_cast<int>(b.size());
    return n;
  }
};

enum class ActionKind { kMoveTo, kGrasp, kDrop };

/// Canonical action indexing for n classes: MoveTo(0..n-1), Grasp(0..n-1), Drop.
struct Action {
  ActionKind kind = ActionKind::kDrop;
  int target = 0;  // bin for MoveTo, class for Grasp

  static Action move_to(int bin) { return {ActionKind::kMoveTo, bin}; }
  static Action grasp(int cls) { return {ActionKind::kGrasp, cls}; }
  static Action drop() { return {ActionKind::kDrop, 0}; }

  static Action from_index(int index, int num_classes) {
    if (index < 0 || index > 2 * num_classes)
      throw std::out_of_range("action index " + std::to_string(index) + " out of range");
    if (index < num_classes) return move_to(index);
    if (index < 2 * num_classes) return grasp(index - num_classes);
    return drop();
  }

  int index(int num_classes) const {
    switch (kind) {
      case ActionKind::kMoveTo: return target;
      case ActionKind::kGrasp: return num_classes + target;
      case ActionKind::kDrop: return 2 * num_classes;
    }
    return -1;
  }

  bool operator==(const Action&) const = default;
};

inline int num_actions(int num_classes) { return 2 * num_classes + 1; }

inline std::string to_string(const Action& a) {
  switch (a.kind) {
    case ActionKind::kMoveTo: return "MoveTo" + std::to_string(a.target);
    case ActionKind::kGrasp: return "Grasp" + std::to_string(a.target);
    case ActionKind::kDrop: return "Drop";
  }
  return "?";
}

struct StepResult {
  EnvState state;
  Observation observation;
  double reward = 0.0;
  bool done = false;
  bool feasible = false;
  double fraction_correct = 0.0;
};

/// Objects in their home bin over all objects; a held object is never in
/// place. An empty world counts as solved.
inline double fraction_correct(const EnvState& state) {
  int total = state.held ? 1 : 0;
  int in_place = 0;
  for (std::size_t b = 0; b < state.bins.size(); ++b) {
    total += static_cast<int>(state.bins[b].size());
    in_place += static_cast<int>(std::count(state.bins[b].begin(), state.bins[b].end(),
                                            assigned_class(static_cast<int>(b))));
  }
  if (total == 0) return 1.0;
  return static_cast<double>(in_place) / static_cast<double>(total);
}

inline bool is_solved(const EnvState& state) {
  if (state.held) return false;
  for (std::size_t b = 0; b < state.bins.size(); ++b)
    for (int c : state.bins[b])
      if (c != assigned_class(static_cast<int>(b))) return false;
  return true;
}

inline bool is_done(const EnvConfig& config, const EnvState& state) {
  return is_solved(state) || state.step_count >= config.episode_limit;
}

inline Observation observe(const EnvConfig& config, const EnvState& state) {
  const auto n = static_cast<std::size_t>(config.num_classes);
  Observation obs;
  obs.instances = state.bins.at(static_cast<std::size_t>(state.robot_bin));
  obs.agent_state.assign(agent_state_dim(n), 0.0);
  obs.agent_state[static_cast<std::size_t>(state.robot_bin)] = 1.0;
  obs.agent_state[n + (state.held ? static_cast<std::size_t>(*state.held) : n)] = 1.0;
  return obs;
}

/// Every object's starting bin is drawn uniformly and independently; the
/// robot starts over the centre bin with an empty gripper.
inline EnvState reset(const EnvConfig& config) {
  config.validate();
  std::mt19937_64 rng(config.seed);
  std::vector<int> objects;
  objects.reserve(static_cast<std::size_t>(config.total_objects()));
  for (int c = 0; c < config.num_classes; ++c)
    objects.insert(objects.end(), static_cast<std::size_t>(config.objects_per_bin), c);
  std::shuffle(objects.begin(), objects.end(), rng);

  EnvState state;
  state.bins.resize(static_cast<std::size_t>(config.num_classes));
  std::uniform_int_distribution<int> pick(0, config.num_classes - 1);
  for (int c : objects) state.bins[static_cast<std::size_t>(pick(rng))].push_back(c);
  state.robot_bin = config.num_classes / 2;
  return state;
}

inline bool is_feasible(const EnvState& state, const Action& action) {
  switch (action.kind) {
    case ActionKind::kMoveTo:
      return action.target >= 0 && action.target < static_cast<int>(state.bins.size()) &&
             action.target != state.robot_bin;
    case ActionKind::kGrasp: {
      if (state.held) return false;
      const auto& bin = state.bins[static_cast<std::size_t>(state.robot_bin)];
      return std::find(bin.begin(), bin.end(), action.target) != bin.end();
    }
    case ActionKind::kDrop: return state.held.has_value();
  }
  return false;
}

/// Grasping a misplaced object and dropping into the matching bin earn +1;
/// disturbing a placed object or dropping into the wrong bin earn -1.
/// Moves and infeasible actions earn 0; infeasible actions only consume time.
inline StepResult step(const EnvConfig& config, const EnvState& state, const Action& action) {
  if (is_done(config, state)) throw UsageError("step called on a finished episode");
  StepResult result;
  result.state = state;
  EnvState& s = result.state;
  s.step_count += 1;
  result.feasible = is_feasible(state, action);
  if (result.feasible) {
    const int home = assigned_class(s.robot_bin);
    auto& bin = s.bins[static_cast<std::size_t>(s.robot_bin)];
    switch (action.kind) {
      case ActionKind::kMoveTo:
        s.robot_bin = action.target;
        break;
      case ActionKind::kGrasp:
        bin.erase(std::find(bin.begin(), bin.end(), action.target));
        s.held = action.target;
        result.reward = action.target != home ? 1.0 : -1.0;
        break;
      case ActionKind::kDrop:
        bin.push_back(*s.held);
        result.reward = *s.held == home ? 1.0 : -1.0;
        s.held.reset();
        break;
    }
  }
  result.done = is_done(config, s);
  result.observation = observe(config, s);
  result.fraction_correct = fraction_correct(s);
  return result;
}

}  // namespace setsort
