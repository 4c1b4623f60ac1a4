#pragma once

#include <cstddef>
#include <vector>

namespace setsort {

/// What the agent perceives in one time step: the class labels of every
/// object in the bin under the camera (any order, possibly empty) and the
/// robot's own state as a flat vector.
///
/// Agent state layout: one-hot(robot bin, num_classes) followed by
/// one-hot(held class or "none", num_classes + 1).
struct Observation {
  std::vector<int> instances;
  std::vector<double> agent_state;

  bool operator==(const Observation&) const = default;
};

inline std::size_t agent_state_dim(std::size_t num_classes) { return 2 * num_classes + 1; }

}  // namespace setsort
