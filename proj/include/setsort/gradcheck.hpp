#pragma once

// Randomized finite-difference sweep over every differentiable path: plain
// MLPs, each pooling kind through the instance encoder, and the fixed-slot
// baseline.

#include <algorithm>
#include <functional>
#include <map>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

#include "setsort/agent.hpp"
#include "setsort/numeric.hpp"

namespace setsort {

struct GradCheckOptions {
  int configurations = 100;
  std::uint64_t seed = 0;
  double epsilon = 1e-5;
  double tolerance = 1e-4;
  /// Scales every analytic gradient before comparison. 1.0 checks the real
  /// backward pass; anything else simulates a broken one.
  double analytic_scale = 1.0;
  /// Draws whose kink margin (see kink_margin) falls below this are redrawn.
  double min_margin = 1e-3;
};

struct GradCheckReport {
  std::map<std::string, double> max_error;  // component -> max relative error
  int configurations = 0;
  int redrawn = 0;  // draws rejected for sitting too close to a kink
  double tolerance = 1e-4;

  double worst() const {
    double w = 0.0;
    for (const auto& [name, e] : max_error) w = std::max(w, e);
    return w;
  }
  bool passed() const { return worst() <= tolerance; }
};

namespace detail {

inline Observation random_observation(std::mt19937_64& rng, int num_classes, int max_instances) {
  std::uniform_int_distribution<int> count(0, max_instances);
  std::uniform_int_distribution<int> label(0, num_classes - 1);
  std::uniform_int_distribution<int> held(-1, num_classes - 1);
  Observation obs;
  obs.instances.resize(static_cast<std::size_t>(count(rng)));
  for (int& c : obs.instances) c = label(rng);
  const auto n = static_cast<std::size_t>(num_classes);
  obs.agent_state.assign(agent_state_dim(n), 0.0);
  obs.agent_state[static_cast<std::size_t>(label(rng))] = 1.0;
  const int h = held(rng);
  obs.agent_state[h < 0 ? 2 * n : n + static_cast<std::size_t>(h)] = 1.0;
  return obs;
}

// Nonzero biases move rectifier kinks away from the evaluation points.
inline void jitter_biases(Layers<double>& layers, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> u(-0.1, 0.3);
  for (auto& l : layers)
    for (Eigen::Index i = 0; i < l.biases.size(); ++i) l.biases(i) = u(rng);
}

}  // namespace detail

inline GradCheckReport run_gradient_checks(const GradCheckOptions& options) {
  GradCheckReport report;
  report.tolerance = options.tolerance;
  std::mt19937_64 rng(options.seed);
  std::uniform_int_distribution<int> small(2, 6);
  std::normal_distribution<double> normal;
  const double scale = options.analytic_scale;

  auto record = [&](const std::string& name, double err) {
    double& slot = report.max_error[name];
    slot = std::max(slot, err);
  };

  auto scale_all = [scale](LayerGrads<double>& gr) {
    for (auto& l : gr) {
      l.weights *= scale;
      l.biases *= scale;
    }
  };

  constexpr EncoderMode kPolicyModes[] = {EncoderMode::kSum, EncoderMode::kMean, EncoderMode::kMax,
                                          EncoderMode::kBaseline};
  constexpr int kMaxDraws = 1000;
  for (int c = 0; c < options.configurations; ++c) {
    int draws = 0;
    auto too_close = [&](double margin) {
      if (margin >= options.min_margin) return false;
      if (++draws >= kMaxDraws) throw std::runtime_error("gradient check could not avoid kinks");
      ++report.redrawn;
      return true;
    };

    if (c % 5 == 0) {
      const auto in = static_cast<std::size_t>(small(rng));
      const auto hidden = static_cast<std::size_t>(small(rng) + 2);
      const auto out = static_cast<std::size_t>(small(rng));
      const Activation last = c % 2 ? Activation::kIdentity : Activation::kRectifier;
      Layers<double> net;
      Vec<double> x(static_cast<Eigen::Index>(in)), g(static_cast<Eigen::Index>(out));
      for (;;) {
        net = init_params<double>(
            NetworkSpec{{{in, hidden, Activation::kRectifier}, {hidden, out, last}}}, rng);
        detail::jitter_biases(net, rng);
        for (Eigen::Index i = 0; i < x.size(); ++i) x(i) = normal(rng);
        for (Eigen::Index i = 0; i < g.size(); ++i) g(i) = normal(rng);
        ForwardCache<double> cache;
        forward(net, x, &cache);
        if (!too_close(rectifier_margin(net, cache))) break;
      }
      record("mlp", check_gradients(net, x, g, options.epsilon, scale_all));
    } else {
      const EncoderMode mode = kPolicyModes[(c % 5) - 1];
      const int num_classes = 3;
      const int frames = 1 + c % 3;
      PolicyNet net;
      std::vector<Transition> storage;
      std::vector<const Transition*> batch;
      Vec<double> targets;
      for (;;) {
        net = PolicyNet::create(mode, num_classes, frames, small(rng), small(rng), small(rng), rng,
                                small(rng));
        detail::jitter_biases(net.instance_encoder, rng);
        detail::jitter_biases(net.state_encoder, rng);
        detail::jitter_biases(net.q_head, rng);

        const int batch_size = small(rng);
        storage.clear();
        std::uniform_int_distribution<int> action(0, net.num_actions() - 1);
        for (int b = 0; b < batch_size; ++b) {
          Transition t;
          for (int f = 0; f < frames; ++f)
            t.stacked_obs.push_back(detail::random_observation(rng, num_classes, 8));
          t.action = action(rng);
          storage.push_back(std::move(t));
        }
        batch.clear();
        for (const auto& t : storage) batch.push_back(&t);
        targets.resize(batch_size);
        for (Eigen::Index i = 0; i < targets.size(); ++i) targets(i) = normal(rng);
        if (!too_close(kink_margin(net, batch))) break;
      }

      const PolicyGradCheck r = check_policy_gradients(
          net, batch, targets, options.epsilon, [&](PolicyGrads& g) {
            scale_all(g.instance_encoder);
            scale_all(g.state_encoder);
            scale_all(g.q_head);
          });
      const std::string prefix = to_string(mode);
      if (net.deep_sets()) record(prefix + "/instance_encoder", r.instance_encoder);
      record(prefix + "/state_encoder", r.state_encoder);
      record(prefix + "/q_head", r.q_head);
    }
    ++report.configurations;
  }
  return report;
}

}  // namespace setsort
