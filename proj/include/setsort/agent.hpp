#pragma once

// DQN agent for the sorting task: a pooled (or fixed-slot) observation
// encoder, a post-stack encoding layer and a 2-layer Q head, trained with
// epsilon-greedy exploration, an unbounded replay memory and a periodically
// synced target network.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <functional>
#include <iostream>
#include <limits>
#include <optional>
#include <random>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "setsort/encoder.hpp"
#include "setsort/env.hpp"
#include "setsort/numeric.hpp"

namespace setsort {

struct TrainConfig {
  int episode_limit = 300;
  int instance_embedding = 128;
  int state_embedding = 128;
  int q_hidden = 128;
  double discount = 0.9;
  int frame_stack = 4;
  int batch_size = 64;
  double learning_rate = 1e-4;
  double epsilon_initial = 1.0;
  double epsilon_final = 0.05;
  int epsilon_anneal_episodes = 20;
  int max_episodes = 100;
  EncoderMode pooling = EncoderMode::kMax;
  std::uint64_t seed = 0;
  int target_sync_interval = 100;

  void validate() const {
    auto positive = [](bool ok, const char* key) {
      if (!ok) throw std::invalid_argument(std::string(key) + " must be positive");
    };
    positive(episode_limit > 0, "episode_limit");
    positive(instance_embedding > 0, "instance_embedding");
    positive(state_embedding > 0, "state_embedding");
    positive(q_hidden > 0, "q_hidden");
    positive(discount > 0 && discount <= 1, "discount");
    positive(frame_stack > 0, "frame_stack");
    positive(batch_size > 0, "batch_size");
    positive(learning_rate > 0, "learning_rate");
    positive(epsilon_anneal_episodes >= 0, "epsilon_anneal_episodes");
    positive(max_episodes >= 0, "max_episodes");
    positive(target_sync_interval > 0, "target_sync_interval");
    if (epsilon_initial < 0 || epsilon_initial > 1 || epsilon_final < 0 || epsilon_final > 1)
      throw std::invalid_argument("epsilon values must lie in [0, 1]");
    if (epsilon_final > epsilon_initial)
      throw std::invalid_argument("epsilon_final must not exceed epsilon_initial");
  }
};

/// Frame window, oldest first.
using StackedObservation = std::vector<Observation>;

struct Transition {
  StackedObservation stacked_obs;
  int action = 0;
  double reward = 0.0;
  StackedObservation next_stacked_obs;
  bool done = false;
};

/// Append-only; nothing is ever evicted.
class ReplayBuffer {
 public:
  void push(Transition t) { items_.push_back(std::move(t)); }
  std::size_t size() const { return items_.size(); }
  bool empty() const { return items_.empty(); }
  const Transition& operator[](std::size_t i) const { return items_[i]; }

 private:
  std::vector<Transition> items_;
};

struct PolicyGrads {
  LayerGrads<double> instance_encoder;
  LayerGrads<double> state_encoder;
  LayerGrads<double> q_head;
};

/// Cached intermediates of a batched Q evaluation.
struct PolicyCache {
  ForwardCache<double> instance_encoder;
  RowMatrix<double> class_table;  // row c = embedding of class c
  ForwardCache<double> state_encoder;
  ForwardCache<double> q_head;
};

class PolicyNet {
 public:
  EncoderMode mode = EncoderMode::kMax;
  int num_classes = 3;
  int frame_stack = 4;
  int baseline_slots = static_cast<int>(kBaselineMaxObjects);
  Layers<double> instance_encoder;  // empty for the baseline
  Layers<double> state_encoder;
  Layers<double> q_head;

  PolicyNet() = default;

  /// Freshly initialized network with the given sizes.
  static PolicyNet create(EncoderMode mode, int num_classes, int frame_stack,
                          int instance_embedding, int state_embedding, int q_hidden,
                          std::mt19937_64& rng,
                          int baseline_slots = static_cast<int>(kBaselineMaxObjects)) {
    PolicyNet net;
    net.mode = mode;
    net.baseline_slots = baseline_slots;
    net.num_classes = num_classes;
    net.frame_stack = frame_stack;
    const auto n = static_cast<std::size_t>(num_classes);
    const auto emb = static_cast<std::size_t>(instance_embedding);
    if (mode != EncoderMode::kBaseline)
      net.instance_encoder = init_params<double>(
          NetworkSpec{{{n, emb, Activation::kRectifier}, {emb, emb, Activation::kRectifier}}}, rng);
    const std::size_t stacked = net.frame_dim() * static_cast<std::size_t>(frame_stack);
    net.state_encoder = init_params<double>(
        NetworkSpec{{{stacked, static_cast<std::size_t>(state_embedding), Activation::kRectifier}}},
        rng);
    net.q_head = init_params<double>(
        NetworkSpec{{{static_cast<std::size_t>(state_embedding),
                      static_cast<std::size_t>(q_hidden), Activation::kRectifier},
                     {static_cast<std::size_t>(q_hidden),
                      static_cast<std::size_t>(setsort::num_actions(num_classes)),
                      Activation::kIdentity}}},
        rng);
    return net;
  }

  static PolicyNet create(const TrainConfig& config, int num_classes, std::mt19937_64& rng) {
    return create(config.pooling, num_classes, config.frame_stack, config.instance_embedding,
                  config.state_embedding, config.q_hidden, rng);
  }

  bool deep_sets() const { return mode != EncoderMode::kBaseline; }
  int num_actions() const { return setsort::num_actions(num_classes); }

  std::size_t embedding_dim() const {
    return deep_sets() ? instance_encoder.back().out_dim() : 0;
  }

  std::size_t frame_dim() const {
    const auto n = static_cast<std::size_t>(num_classes);
    if (deep_sets()) return embedding_dim() + agent_state_dim(n);
    return baseline_frame_dim(num_classes, static_cast<std::size_t>(baseline_slots));
  }

  std::size_t stacked_dim() const { return frame_dim() * static_cast<std::size_t>(frame_stack); }

  bool operator==(const PolicyNet&) const = default;

  /// Per-class embedding table: row c = instance_encoder(one-hot c).
  RowMatrix<double> class_table(ForwardCache<double>* cache = nullptr) const {
    return forward(instance_encoder, RowMatrix<double>(RowMatrix<double>::Identity(
                                         num_classes, num_classes)),
                   cache);
  }

  /// Frame vector of one observation, computed per instance (no table).
  Vec<double> encode_frame(const Observation& obs) const {
    if (deep_sets())
      return setsort::encode_frame(instance_encoder, obs, pooling_of(mode), num_classes);
    return baseline_encode(obs, num_classes, static_cast<std::size_t>(baseline_slots));
  }

  /// Stacked input rows for a batch of frame windows.
  RowMatrix<double> encode_batch(std::span<const StackedObservation* const> batch,
                                 PolicyCache* cache = nullptr) const {
    RowMatrix<double> x(static_cast<Eigen::Index>(batch.size()),
                        static_cast<Eigen::Index>(stacked_dim()));
    const auto fd = static_cast<Eigen::Index>(frame_dim());
    const auto sd = static_cast<Eigen::Index>(agent_state_dim(static_cast<std::size_t>(num_classes)));
    RowMatrix<double> table;
    if (deep_sets()) table = class_table(cache ? &cache->instance_encoder : nullptr);
    for (std::size_t b = 0; b < batch.size(); ++b) {
      const StackedObservation& frames = *batch[b];
      if (static_cast<int>(frames.size()) != frame_stack)
        throw DimensionError("expected " + std::to_string(frame_stack) + " frames, got " +
                             std::to_string(frames.size()));
      for (std::size_t f = 0; f < frames.size(); ++f) {
        const Observation& obs = frames[f];
        if (static_cast<Eigen::Index>(obs.agent_state.size()) != sd)
          throw DimensionError("agent state has wrong length");
        auto seg = x.row(static_cast<Eigen::Index>(b))
                       .segment(static_cast<Eigen::Index>(f) * fd, fd);
        if (deep_sets()) {
          for (int c : obs.instances)
            if (c < 0 || c >= num_classes)
              throw DimensionError("instance label " + std::to_string(c) + " out of range");
          const auto d = static_cast<Eigen::Index>(embedding_dim());
          seg.head(d) = pool_labels(table, obs.instances, pooling_of(mode)).transpose();
          for (Eigen::Index k = 0; k < sd; ++k)
            seg(d + k) = obs.agent_state[static_cast<std::size_t>(k)];
        } else {
          seg = baseline_encode(obs, num_classes, static_cast<std::size_t>(baseline_slots))
                    .transpose();
        }
      }
    }
    if (cache) cache->class_table = std::move(table);
    return x;
  }

  RowMatrix<double> q_batch(std::span<const StackedObservation* const> batch,
                            PolicyCache* cache = nullptr) const {
    RowMatrix<double> h;
    if (deep_sets()) {
      const RowMatrix<double> x = encode_batch(batch, cache);
      h = forward(state_encoder, x, cache ? &cache->state_encoder : nullptr);
    } else {
      h = baseline_state_forward(batch, cache);
    }
    return forward(q_head, h, cache ? &cache->q_head : nullptr);
  }

  /// Backpropagates d(loss)/d(Q) for a batch evaluated with q_batch(.., cache).
  void backward_batch(std::span<const StackedObservation* const> batch, const PolicyCache& cache,
                      const RowMatrix<double>& q_grad, PolicyGrads& grads) const {
    const RowMatrix<double> dh = backward(q_head, cache.q_head, q_grad, grads.q_head);
    if (!deep_sets()) {
      baseline_state_backward(batch, cache, dh, grads);
      return;
    }
    const RowMatrix<double> dx = backward(state_encoder, cache.state_encoder, dh,
                                          grads.state_encoder);
    const auto fd = static_cast<Eigen::Index>(frame_dim());
    const auto d = static_cast<Eigen::Index>(embedding_dim());
    RowMatrix<double> table_grad = RowMatrix<double>::Zero(num_classes, d);
    for (std::size_t b = 0; b < batch.size(); ++b)
      for (std::size_t f = 0; f < batch[b]->size(); ++f) {
        const Vec<double> g =
            dx.row(static_cast<Eigen::Index>(b))
                .segment(static_cast<Eigen::Index>(f) * fd, d)
                .transpose();
        pool_labels_backward(cache.class_table, (*batch[b])[f].instances, pooling_of(mode), g,
                             table_grad);
      }
    backward(instance_encoder, cache.instance_encoder, table_grad, grads.instance_encoder);
  }

  PolicyGrads zero_grads() const {
    return {zeros_like(instance_encoder), zeros_like(state_encoder), zeros_like(q_head)};
  }

  // The baseline input is one-hot per slot and every slot past the observed
  // instances is "empty", so the state-encoder layer is evaluated as a sum of
  // weight columns: one per observed instance, one per set agent-state entry,
  // plus a precomputed suffix sum over the empty-slot columns. This equals
  // the dense product with baseline_encode() up to summation order.

  Eigen::Index baseline_column(std::size_t frame, std::size_t slot, std::size_t category) const {
    return static_cast<Eigen::Index>(frame * frame_dim() +
                                     slot * static_cast<std::size_t>(num_classes + 1) + category);
  }

  RowMatrix<double> baseline_state_forward(std::span<const StackedObservation* const> batch,
                                           PolicyCache* cache) const {
    if (state_encoder.size() != 1)
      throw DimensionError("baseline state encoder must be a single layer");
    const DenseLayer<double>& layer = state_encoder.front();
    if (layer.in_dim() != stacked_dim()) throw DimensionError("state encoder input mismatch");
    const auto slots = static_cast<std::size_t>(baseline_slots);
    const auto empty = static_cast<std::size_t>(num_classes);
    const auto sd = agent_state_dim(static_cast<std::size_t>(num_classes));
    const Eigen::Index out = layer.weights.rows();

    // suffix[f](:, n) = sum over slots s >= n of the empty-category column.
    std::vector<Eigen::MatrixXd> suffix(static_cast<std::size_t>(frame_stack),
                                        Eigen::MatrixXd::Zero(out, static_cast<Eigen::Index>(slots + 1)));
    const auto stride = static_cast<std::size_t>(num_classes + 1);
    for (Eigen::Index o = 0; o < out; ++o) {
      const double* row = layer.weights.row(o).data();
      for (std::size_t f = 0; f < suffix.size(); ++f) {
        double running = 0.0;
        const double* col0 = row + f * frame_dim() + empty;
        for (std::size_t s = slots; s-- > 0;) {
          running += col0[s * stride];
          suffix[f](o, static_cast<Eigen::Index>(s)) = running;
        }
      }
    }

    RowMatrix<double> pre(static_cast<Eigen::Index>(batch.size()), out);
    for (std::size_t b = 0; b < batch.size(); ++b) {
      const StackedObservation& frames = *batch[b];
      if (static_cast<int>(frames.size()) != frame_stack)
        throw DimensionError("expected " + std::to_string(frame_stack) + " frames, got " +
                             std::to_string(frames.size()));
      Vec<double> acc = layer.biases;
      for (std::size_t f = 0; f < frames.size(); ++f) {
        const Observation& obs = frames[f];
        if (obs.agent_state.size() != sd) throw DimensionError("agent state has wrong length");
        if (obs.instances.size() > slots) warn_truncated(obs.instances.size(), slots);
        const std::size_t n = std::min(obs.instances.size(), slots);
        for (std::size_t s = 0; s < n; ++s) {
          const int c = obs.instances[s];
          if (c < 0 || c >= num_classes)
            throw DimensionError("instance label " + std::to_string(c) + " out of range");
          acc += layer.weights.col(baseline_column(f, s, static_cast<std::size_t>(c)));
        }
        acc += suffix[f].col(static_cast<Eigen::Index>(n));
        const Eigen::Index base = baseline_column(f, slots, 0);
        for (std::size_t k = 0; k < sd; ++k)
          if (obs.agent_state[k] != 0.0)
            acc += obs.agent_state[k] * layer.weights.col(base + static_cast<Eigen::Index>(k));
      }
      pre.row(static_cast<Eigen::Index>(b)) = acc.transpose();
    }
    RowMatrix<double> h = layer.activation == Activation::kRectifier
                              ? RowMatrix<double>(pre.cwiseMax(0.0))
                              : pre;
    if (cache) {
      cache->state_encoder.inputs.clear();
      cache->state_encoder.preacts.assign(1, std::move(pre));
    }
    return h;
  }

  void baseline_state_backward(std::span<const StackedObservation* const> batch,
                               const PolicyCache& cache, const RowMatrix<double>& dh,
                               PolicyGrads& grads) const {
    const DenseLayer<double>& layer = state_encoder.front();
    DenseLayer<double>& grad = grads.state_encoder.front();
    if (cache.state_encoder.preacts.size() != 1) throw DimensionError("baseline cache mismatch");
    const RowMatrix<double>& pre = cache.state_encoder.preacts.front();
    const RowMatrix<double> g = layer.activation == Activation::kRectifier
                                    ? RowMatrix<double>((pre.array() > 0.0).select(dh, 0.0))
                                    : dh;
    const auto slots = static_cast<std::size_t>(baseline_slots);
    const auto empty = static_cast<std::size_t>(num_classes);
    const auto sd = agent_state_dim(static_cast<std::size_t>(num_classes));
    const Eigen::Index out = layer.weights.rows();

    // first_empty[f](:, n) collects gradients of samples whose first empty
    // slot in frame f is n; a prefix sum spreads them over slots >= n.
    std::vector<Eigen::MatrixXd> first_empty(
        static_cast<std::size_t>(frame_stack),
        Eigen::MatrixXd::Zero(out, static_cast<Eigen::Index>(slots + 1)));
    for (std::size_t b = 0; b < batch.size(); ++b) {
      const Vec<double> gb = g.row(static_cast<Eigen::Index>(b)).transpose();
      grad.biases += gb;
      const StackedObservation& frames = *batch[b];
      for (std::size_t f = 0; f < frames.size(); ++f) {
        const Observation& obs = frames[f];
        const std::size_t n = std::min(obs.instances.size(), slots);
        for (std::size_t s = 0; s < n; ++s)
          grad.weights.col(baseline_column(f, s, static_cast<std::size_t>(obs.instances[s]))) += gb;
        first_empty[f].col(static_cast<Eigen::Index>(n)) += gb;
        const Eigen::Index base = baseline_column(f, slots, 0);
        for (std::size_t k = 0; k < sd; ++k)
          if (obs.agent_state[k] != 0.0)
            grad.weights.col(base + static_cast<Eigen::Index>(k)) += obs.agent_state[k] * gb;
      }
    }
    for (std::size_t f = 0; f < first_empty.size(); ++f) {
      Vec<double> running = Vec<double>::Zero(out);
      for (std::size_t s = 0; s < slots; ++s) {
        running += first_empty[f].col(static_cast<Eigen::Index>(s));
        grad.weights.col(baseline_column(f, s, empty)) += running;
      }
    }
  }

  bool all_finite() const {
    auto fin = [](const Layers<double>& ls) {
      return std::all_of(ls.begin(), ls.end(), [](const auto& l) { return l.all_finite(); });
    };
    return fin(instance_encoder) && fin(state_encoder) && fin(q_head);
  }
};

/// Q estimate per canonical action index for one frame window.
inline Vec<double> q_values(const PolicyNet& net, const StackedObservation& stacked) {
  const StackedObservation* ptr = &stacked;
  return net.q_batch(std::span<const StackedObservation* const>(&ptr, 1)).row(0).transpose();
}

/// Online network, its target copy and the optimizer state of the online
/// network.
struct Policy {
  PolicyNet online;
  PolicyNet target;
};

struct PolicyOptimizer {
  OptimizerState<double> instance_encoder;
  OptimizerState<double> state_encoder;
  OptimizerState<double> q_head;

  PolicyOptimizer() = default;
  explicit PolicyOptimizer(const PolicyNet& net)
      : instance_encoder(net.instance_encoder),
        state_encoder(net.state_encoder),
        q_head(net.q_head) {}

  void step(PolicyNet& net, const PolicyGrads& grads, double learning_rate) {
    if (!all_finite(grads.instance_encoder) || !all_finite(grads.state_encoder) ||
        !all_finite(grads.q_head))
      throw NonFiniteError("non-finite gradient in policy update");
    if (!net.instance_encoder.empty())
      optimizer_step(net.instance_encoder, grads.instance_encoder, instance_encoder,
                     learning_rate);
    optimizer_step(net.state_encoder, grads.state_encoder, state_encoder, learning_rate);
    optimizer_step(net.q_head, grads.q_head, q_head, learning_rate);
  }
};

/// Target := online, exactly.
inline void sync_target(Policy& policy) { policy.target = policy.online; }

/// Linear from epsilon_initial at episode 0 to epsilon_final at
/// epsilon_anneal_episodes, then flat.
inline double epsilon_at(const TrainConfig& config, int episode) {
  if (episode < 0) throw std::invalid_argument("episode index must be >= 0");
  if (episode >= config.epsilon_anneal_episodes) return config.epsilon_final;
  const double frac =
      static_cast<double>(episode) / static_cast<double>(config.epsilon_anneal_episodes);
  return config.epsilon_initial + (config.epsilon_final - config.epsilon_initial) * frac;
}

/// Index of the largest value; ties go to the lowest index.
inline int greedy_action(const Vec<double>& q) {
  int best = 0;
  for (Eigen::Index i = 1; i < q.size(); ++i)
    if (q(i) > q(best)) best = static_cast<int>(i);
  return best;
}

/// Uniform over all actions with probability epsilon, otherwise greedy.
inline int select_action(const Vec<double>& q, double epsilon, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> coin(0.0, 1.0);
  if (coin(rng) < epsilon) {
    std::uniform_int_distribution<int> pick(0, static_cast<int>(q.size()) - 1);
    return pick(rng);
  }
  return greedy_action(q);
}

/// r + discount * max_a Q_target(s', a), or r for terminal transitions.
inline Vec<double> td_targets(std::span<const Transition* const> batch, const PolicyNet& target,
                              double discount) {
  if (batch.empty()) throw std::invalid_argument("td_targets needs a non-empty batch");
  std::vector<const StackedObservation*> next;
  std::vector<std::size_t> rows;
  for (std::size_t i = 0; i < batch.size(); ++i)
    if (!batch[i]->done) {
      next.push_back(&batch[i]->next_stacked_obs);
      rows.push_back(i);
    }
  Vec<double> y(static_cast<Eigen::Index>(batch.size()));
  for (std::size_t i = 0; i < batch.size(); ++i) y(static_cast<Eigen::Index>(i)) = batch[i]->reward;
  if (!next.empty()) {
    const RowMatrix<double> q = target.q_batch(next);
    for (std::size_t k = 0; k < rows.size(); ++k)
      y(static_cast<Eigen::Index>(rows[k])) += discount * q.row(static_cast<Eigen::Index>(k)).maxCoeff();
  }
  return y;
}

/// Mean squared error between Q(s, a) and fixed targets; accumulates its
/// gradient into `grads` when given.
inline double td_loss(const PolicyNet& net, std::span<const Transition* const> batch,
                      const Vec<double>& targets, PolicyGrads* grads = nullptr) {
  std::vector<const StackedObservation*> states;
  states.reserve(batch.size());
  for (const auto* t : batch) states.push_back(&t->stacked_obs);
  PolicyCache cache;
  const RowMatrix<double> q = net.q_batch(states, grads ? &cache : nullptr);
  const double inv_n = 1.0 / static_cast<double>(batch.size());
  RowMatrix<double> dq = RowMatrix<double>::Zero(q.rows(), q.cols());
  double loss = 0.0;
  for (std::size_t i = 0; i < batch.size(); ++i) {
    const auto r = static_cast<Eigen::Index>(i);
    const double residual = q(r, batch[i]->action) - targets(r);
    loss += residual * residual;
    dq(r, batch[i]->action) = 2.0 * residual * inv_n;
  }
  if (grads) net.backward_batch(states, cache, dq, *grads);
  return loss * inv_n;
}

/// One minibatch update of the online network. Returns nullopt (and does
/// nothing) while the buffer holds fewer than batch_size transitions.
inline std::optional<double> train_step(Policy& policy, PolicyOptimizer& optimizer,
                                        const ReplayBuffer& buffer, std::mt19937_64& rng,
                                        const TrainConfig& config) {
  if (buffer.size() < static_cast<std::size_t>(config.batch_size)) return std::nullopt;
  std::uniform_int_distribution<std::size_t> pick(0, buffer.size() - 1);
  std::vector<const Transition*> batch;
  batch.reserve(static_cast<std::size_t>(config.batch_size));
  for (int i = 0; i < config.batch_size; ++i) batch.push_back(&buffer[pick(rng)]);
  const Vec<double> targets = td_targets(batch, policy.target, config.discount);
  PolicyGrads grads = policy.online.zero_grads();
  const double loss = td_loss(policy.online, batch, targets, &grads);
  if (!std::isfinite(loss)) throw NonFiniteError("non-finite TD loss");
  optimizer.step(policy.online, grads, config.learning_rate);
  return loss;
}

/// Stable per-episode seed derived from a base seed.
inline std::uint64_t derive_seed(std::uint64_t base, std::uint64_t index) {
  std::uint64_t z = base + 0x9E3779B97F4A7C15ULL * (index + 1);
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  return z ^ (z >> 31);
}

struct EpisodeLog {
  int episode = 0;
  int steps_to_solve = 0;  // episode_limit when unsolved
  bool solved = false;
  double total_reward = 0.0;
  double epsilon = 0.0;
  double mean_loss = std::numeric_limits<double>::quiet_NaN();  // NaN when no update ran
  double wall_ms = 0.0;
};

struct TrainResult {
  Policy policy;
  std::vector<EpisodeLog> log;
  std::size_t buffer_size = 0;
  std::size_t total_steps = 0;
};

/// Runs config.max_episodes episodes of epsilon-greedy DQN. Episode e uses
/// environment seed derive_seed(env_config.seed, e). Deterministic given
/// both seeds.
inline TrainResult train(const EnvConfig& env_config, const TrainConfig& config,
                         const std::function<void(const EpisodeLog&)>& on_episode = {}) {
  config.validate();
  env_config.validate();
  EnvConfig env = env_config;
  env.episode_limit = config.episode_limit;

  std::mt19937_64 rng(config.seed);
  TrainResult result;
  result.policy.online = PolicyNet::create(config, env.num_classes, rng);
  result.policy.target = result.policy.online;
  PolicyOptimizer optimizer(result.policy.online);
  ReplayBuffer buffer;
  FrameStack<Observation> stack(static_cast<std::size_t>(config.frame_stack));

  for (int episode = 0; episode < config.max_episodes; ++episode) {
    const auto t0 = std::chrono::steady_clock::now();
    env.seed = derive_seed(env_config.seed, static_cast<std::uint64_t>(episode));
    EnvState state = reset(env);
    stack.clear();
    stack.push(observe(env, state));

    EpisodeLog entry;
    entry.episode = episode;
    entry.epsilon = epsilon_at(config, episode);
    double loss_sum = 0.0;
    int updates = 0;
    while (!is_done(env, state)) {
      StackedObservation current = stack.window();
      const int action = select_action(q_values(result.policy.online, current), entry.epsilon, rng);
      StepResult sr = step(env, state, Action::from_index(action, env.num_classes));
      stack.push(sr.observation);
      const bool solved = is_solved(sr.state);
      buffer.push({std::move(current), action, sr.reward, stack.window(), solved});
      entry.total_reward += sr.reward;
      state = std::move(sr.state);
      ++result.total_steps;

      if (auto loss = train_step(result.policy, optimizer, buffer, rng, config)) {
        loss_sum += *loss;
        ++updates;
      }
      if (result.total_steps % static_cast<std::size_t>(config.target_sync_interval) == 0)
        sync_target(result.policy);
    }
    entry.solved = is_solved(state);
    entry.steps_to_solve = entry.solved ? state.step_count : config.episode_limit;
    if (updates > 0) entry.mean_loss = loss_sum / updates;
    entry.wall_ms =
        std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
    result.log.push_back(entry);
    if (on_episode) on_episode(entry);
  }
  result.buffer_size = buffer.size();
  return result;
}

/// Distance of a batch evaluation from the nearest non-differentiable point:
/// the smallest |pre-activation| of any rectifier unit, and for max pooling
/// the smallest gap between the winning class and the runner-up class in any
/// pooled coordinate. Repeated instances of one class never compete, since
/// they share an embedding.
inline double kink_margin(const PolicyNet& net, std::span<const Transition* const> batch) {
  std::vector<const StackedObservation*> frames;
  for (const Transition* t : batch) frames.push_back(&t->stacked_obs);
  PolicyCache cache;
  net.q_batch(frames, &cache);
  double margin = std::min(rectifier_margin(net.q_head, cache.q_head),
                           rectifier_margin(net.state_encoder, cache.state_encoder));
  if (!net.deep_sets()) return margin;
  margin = std::min(margin, rectifier_margin(net.instance_encoder, cache.instance_encoder));
  if (net.mode != EncoderMode::kMax) return margin;
  const RowMatrix<double>& table = cache.class_table;
  for (const StackedObservation* stacked : frames)
    for (const Observation& obs : *stacked) {
      std::vector<int> present(obs.instances.begin(), obs.instances.end());
      std::sort(present.begin(), present.end());
      present.erase(std::unique(present.begin(), present.end()), present.end());
      if (present.size() < 2) continue;
      for (Eigen::Index i = 0; i < table.cols(); ++i) {
        double best = -std::numeric_limits<double>::infinity(), second = best;
        for (int c : present) {
          const double v = table(c, i);
          if (v > best) {
            second = best;
            best = v;
          } else if (v > second) {
            second = v;
          }
        }
        // All classes rectified to zero: flat, not a kink.
        if (best <= 0.0) continue;
        margin = std::min(margin, best - second);
      }
    }
  return margin;
}

/// Max relative error between backward_batch and central differences of the
/// TD loss (targets held fixed), per parameter group.
struct PolicyGradCheck {
  double instance_encoder = 0.0;
  double state_encoder = 0.0;
  double q_head = 0.0;
  double max() const { return std::max({instance_encoder, state_encoder, q_head}); }
};

inline PolicyGradCheck check_policy_gradients(
    PolicyNet net, std::span<const Transition* const> batch, const Vec<double>& targets,
    double epsilon, const std::function<void(PolicyGrads&)>& tamper = {}) {
  if (!(epsilon > 0)) throw std::invalid_argument("epsilon must be positive");
  PolicyGrads grads = net.zero_grads();
  td_loss(net, batch, targets, &grads);
  if (tamper) tamper(grads);
  auto check = [&](Layers<double>& layers, const LayerGrads<double>& g) {
    double worst = 0.0;
    for_each_param(layers, [&](std::size_t k, bool is_weight, Eigen::Index i, double& p) {
      const double saved = p;
      p = saved + epsilon;
      const double up = td_loss(net, batch, targets);
      p = saved - epsilon;
      const double down = td_loss(net, batch, targets);
      p = saved;
      const double numeric = (up - down) / (2.0 * epsilon);
      const double analytic = is_weight ? g[k].weights.data()[i] : g[k].biases.data()[i];
      worst = std::max(worst, relative_error(analytic, numeric));
    });
    return worst;
  };
  PolicyGradCheck out;
  out.instance_encoder = check(net.instance_encoder, grads.instance_encoder);
  out.state_encoder = check(net.state_encoder, grads.state_encoder);
  out.q_head = check(net.q_head, grads.q_head);
  return out;
}

}  // namespace setsort
