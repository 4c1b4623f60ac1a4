#pragma once

// Observation encoders. The deep-sets path embeds each detected instance
// with a shared MLP and reduces the embeddings with a symmetric pooling, so
// the result ignores instance order and count. The baseline path lays the
// instances out in a fixed number of slots, which does neither.

#include <algorithm>
#include <atomic>
#include <cstddef>
#include <deque>
#include <iostream>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "setsort/numeric.hpp"
#include "setsort/observation.hpp"

namespace setsort {

enum class PoolingKind { kSum, kMean, kMax };

/// How observations become policy inputs: one of the pooled deep-sets
/// encoders, or the fixed-slot baseline.
enum class EncoderMode { kSum, kMean, kMax, kBaseline };

inline constexpr std::size_t kBaselineMaxObjects = 300;

inline const char* to_string(EncoderMode m) {
  switch (m) {
    case EncoderMode::kSum: return "sum";
    case EncoderMode::kMean: return "mean";
    case EncoderMode::kMax: return "max";
    case EncoderMode::kBaseline: return "baseline";
  }
  return "?";
}

inline EncoderMode encoder_mode_from_string(const std::string& s) {
  if (s == "sum") return EncoderMode::kSum;
  if (s == "mean") return EncoderMode::kMean;
  if (s == "max") return EncoderMode::kMax;
  if (s == "baseline") return EncoderMode::kBaseline;
  throw std::invalid_argument("unknown pooling '" + s + "' (expected sum, mean, max or baseline)");
}

inline PoolingKind pooling_of(EncoderMode m) {
  switch (m) {
    case EncoderMode::kSum: return PoolingKind::kSum;
    case EncoderMode::kMean: return PoolingKind::kMean;
    case EncoderMode::kMax: return PoolingKind::kMax;
    case EncoderMode::kBaseline: break;
  }
  throw std::invalid_argument("baseline encoder has no pooling");
}

inline EncoderMode mode_of(PoolingKind k) {
  switch (k) {
    case PoolingKind::kSum: return EncoderMode::kSum;
    case PoolingKind::kMean: return EncoderMode::kMean;
    case PoolingKind::kMax: return EncoderMode::kMax;
  }
  return EncoderMode::kMax;
}

/// One one-hot row per instance label.
inline RowMatrix<double> instance_features(std::span<const int> labels, int num_classes) {
  RowMatrix<double> x = RowMatrix<double>::Zero(static_cast<Eigen::Index>(labels.size()),
                                                num_classes);
  for (std::size_t j = 0; j < labels.size(); ++j) {
    if (labels[j] < 0 || labels[j] >= num_classes)
      throw DimensionError("instance label " + std::to_string(labels[j]) + " out of range");
    x(static_cast<Eigen::Index>(j), labels[j]) = 1.0;
  }
  return x;
}

/// Applies the shared instance encoder to every row of `instances`.
inline RowMatrix<double> encode_instances(const Layers<double>& encoder,
                                          const RowMatrix<double>& instances,
                                          ForwardCache<double>* cache = nullptr) {
  if (static_cast<std::size_t>(instances.cols()) != encoder.front().in_dim())
    throw DimensionError("instance width " + std::to_string(instances.cols()) +
                         " does not match encoder input " +
                         std::to_string(encoder.front().in_dim()));
  return forward(encoder, instances, cache);
}

/// Per-feature reduction over the rows of `phis`. The empty set pools to
/// zeros for every kind.
inline Vec<double> pool(const RowMatrix<double>& phis, PoolingKind kind) {
  const Eigen::Index n = phis.rows();
  if (n == 0) return Vec<double>::Zero(phis.cols());
  switch (kind) {
    case PoolingKind::kSum: return phis.colwise().sum().transpose();
    case PoolingKind::kMean:
      return (phis.colwise().sum() / static_cast<double>(n)).transpose();
    case PoolingKind::kMax: return phis.colwise().maxCoeff().transpose();
  }
  return {};
}

inline RowMatrix<double> stack_rows(std::span<const Vec<double>> phis) {
  if (phis.empty()) return RowMatrix<double>(0, 0);
  const Eigen::Index d = phis.front().size();
  RowMatrix<double> m(static_cast<Eigen::Index>(phis.size()), d);
  for (std::size_t j = 0; j < phis.size(); ++j) {
    if (phis[j].size() != d) throw DimensionError("pooled vectors have mixed lengths");
    m.row(static_cast<Eigen::Index>(j)) = phis[j].transpose();
  }
  return m;
}

inline Vec<double> pool(std::span<const Vec<double>> phis, PoolingKind kind) {
  return pool(stack_rows(phis), kind);
}

/// Gradient of pool() with respect to each instance embedding. Max routes
/// each feature's gradient to the lowest-index instance attaining the max.
inline RowMatrix<double> pool_backward(const RowMatrix<double>& phis, PoolingKind kind,
                                       const Vec<double>& output_grad) {
  const Eigen::Index n = phis.rows();
  if (n == 0) return RowMatrix<double>(0, output_grad.size());
  if (output_grad.size() != phis.cols())
    throw DimensionError("pooling gradient length mismatch");
  RowMatrix<double> grads(n, phis.cols());
  switch (kind) {
    case PoolingKind::kSum: grads.rowwise() = output_grad.transpose(); break;
    case PoolingKind::kMean:
      grads.rowwise() = (output_grad / static_cast<double>(n)).transpose();
      break;
    case PoolingKind::kMax:
      grads.setZero();
      for (Eigen::Index i = 0; i < phis.cols(); ++i) {
        Eigen::Index arg = 0;
        for (Eigen::Index j = 1; j < n; ++j)
          if (phis(j, i) > phis(arg, i)) arg = j;
        grads(arg, i) = output_grad(i);
      }
      break;
  }
  return grads;
}

// Instances are one-hot class labels, so every instance of class c has the
// same embedding. The functions below pool from a per-class embedding table
// (row c = encoder(one-hot c)) and are exactly equivalent to running the
// encoder per instance.

inline Vec<double> pool_labels(const RowMatrix<double>& table, std::span<const int> labels,
                               PoolingKind kind) {
  const Eigen::Index d = table.cols();
  Vec<double> z = Vec<double>::Zero(d);
  if (labels.empty()) return z;
  if (kind == PoolingKind::kMax) {
    z = table.row(labels[0]).transpose();
    for (std::size_t j = 1; j < labels.size(); ++j)
      z = z.cwiseMax(table.row(labels[j]).transpose());
    return z;
  }
  for (int c : labels) z += table.row(c).transpose();
  if (kind == PoolingKind::kMean) z /= static_cast<double>(labels.size());
  return z;
}

/// Accumulates d(pool)/d(table) * output_grad into `table_grad`.
inline void pool_labels_backward(const RowMatrix<double>& table, std::span<const int> labels,
                                 PoolingKind kind, const Eigen::Ref<const Vec<double>>& output_grad,
                                 RowMatrix<double>& table_grad) {
  if (labels.empty()) return;
  switch (kind) {
    case PoolingKind::kSum:
      for (int c : labels) table_grad.row(c) += output_grad.transpose();
      break;
    case PoolingKind::kMean: {
      const double inv = 1.0 / static_cast<double>(labels.size());
      for (int c : labels) table_grad.row(c) += inv * output_grad.transpose();
      break;
    }
    case PoolingKind::kMax:
      for (Eigen::Index i = 0; i < table.cols(); ++i) {
        int arg = labels[0];
        for (std::size_t j = 1; j < labels.size(); ++j)
          if (table(labels[j], i) > table(arg, i)) arg = labels[j];
        table_grad(arg, i) += output_grad(i);
      }
      break;
  }
}

/// pool(encode_instances(obs)) followed by the agent state.
inline Vec<double> encode_frame(const Layers<double>& encoder, const Observation& obs,
                                PoolingKind kind, int num_classes) {
  const RowMatrix<double> phis =
      encode_instances(encoder, instance_features(obs.instances, num_classes));
  Vec<double> z = phis.rows() == 0 ? Vec<double>::Zero(static_cast<Eigen::Index>(
                                         encoder.back().out_dim()))
                                   : pool(phis, kind);
  Vec<double> frame(z.size() + static_cast<Eigen::Index>(obs.agent_state.size()));
  frame << z, Eigen::Map<const Vec<double>>(obs.agent_state.data(),
                                            static_cast<Eigen::Index>(obs.agent_state.size()));
  return frame;
}

/// Reports dropped instances on stderr, once per process.
inline void warn_truncated(std::size_t count, std::size_t slots) {
  static std::atomic<bool> warned{false};
  if (!warned.exchange(true))
    std::cerr << "warning: baseline encoder truncated " << count << " instances to " << slots
              << " slots (further truncations are not reported)\n";
}

inline std::size_t baseline_frame_dim(int num_classes, std::size_t max_objects = kBaselineMaxObjects) {
  const auto n = static_cast<std::size_t>(num_classes);
  return max_objects * (n + 1) + agent_state_dim(n);
}

/// Fixed-size slot layout: `max_objects` slots, each one-hot over the classes
/// plus an "empty" category, filled in observation order, then the agent
/// state. Instances past the last slot are dropped.
inline Vec<double> baseline_encode(const Observation& obs, int num_classes,
                                   std::size_t max_objects = kBaselineMaxObjects) {
  const auto width = static_cast<std::size_t>(num_classes) + 1;
  Vec<double> v = Vec<double>::Zero(
      static_cast<Eigen::Index>(baseline_frame_dim(num_classes, max_objects)));
  if (obs.instances.size() > max_objects) warn_truncated(obs.instances.size(), max_objects);
  for (std::size_t slot = 0; slot < max_objects; ++slot) {
    std::size_t hot = static_cast<std::size_t>(num_classes);
    if (slot < obs.instances.size()) {
      const int c = obs.instances[slot];
      if (c < 0 || c >= num_classes)
        throw DimensionError("instance label " + std::to_string(c) + " out of range");
      hot = static_cast<std::size_t>(c);
    }
    v(static_cast<Eigen::Index>(slot * width + hot)) = 1.0;
  }
  const auto offset = static_cast<Eigen::Index>(max_objects * width);
  for (std::size_t k = 0; k < obs.agent_state.size(); ++k)
    v(offset + static_cast<Eigen::Index>(k)) = obs.agent_state[k];
  return v;
}

/// The most recent `capacity` items, oldest first. Until the buffer fills,
/// the oldest item stands in for the missing ones.
template <typename T>
class FrameStack {
 public:
  explicit FrameStack(std::size_t capacity = 4) : capacity_(capacity) {
    if (capacity == 0) throw std::invalid_argument("frame stack capacity must be positive");
  }

  void push(T frame) {
    frames_.push_back(std::move(frame));
    if (frames_.size() > capacity_) frames_.pop_front();
  }

  void clear() { frames_.clear(); }
  std::size_t capacity() const { return capacity_; }
  std::size_t size() const { return frames_.size(); }
  bool empty() const { return frames_.empty(); }

  /// Exactly `capacity` items, oldest first.
  std::vector<T> window() const {
    if (frames_.empty()) throw std::logic_error("frame stack is empty");
    std::vector<T> out;
    out.reserve(capacity_);
    for (std::size_t i = frames_.size(); i < capacity_; ++i) out.push_back(frames_.front());
    out.insert(out.end(), frames_.begin(), frames_.end());
    return out;
  }

 private:
  std::size_t capacity_;
  std::deque<T> frames_;
};

/// Pushes `frame` and returns the concatenated window, oldest to newest.
inline Vec<double> stack_frames(FrameStack<Vec<double>>& stack, Vec<double> frame) {
  stack.push(std::move(frame));
  const auto frames = stack.window();
  const Eigen::Index d = frames.front().size();
  Vec<double> out(d * static_cast<Eigen::Index>(frames.size()));
  for (std::size_t i = 0; i < frames.size(); ++i) {
    if (frames[i].size() != d) throw DimensionError("stacked frames have mixed lengths");
    out.segment(static_cast<Eigen::Index>(i) * d, d) = frames[i];
  }
  return out;
}

}  // namespace setsort
