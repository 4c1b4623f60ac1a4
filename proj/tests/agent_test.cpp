#include <gtest/gtest.h>

#include <algorithm>
#include <array>
#include <random>

#include "setsort/agent.hpp"
#include "setsort/gradcheck.hpp"

namespace setsort {
namespace {

Observation random_observation(std::mt19937_64& rng, int max_instances) {
  std::uniform_int_distribution<int> count(0, max_instances);
  std::uniform_int_distribution<int> label(0, 2);
  std::uniform_int_distribution<int> held(-1, 2);
  Observation obs;
  obs.instances.resize(static_cast<std::size_t>(count(rng)));
  for (int& c : obs.instances) c = label(rng);
  obs.agent_state.assign(7, 0.0);
  obs.agent_state[static_cast<std::size_t>(label(rng))] = 1.0;
  const int h = held(rng);
  obs.agent_state[h < 0 ? 6 : static_cast<std::size_t>(3 + h)] = 1.0;
  return obs;
}

StackedObservation random_stack(std::mt19937_64& rng, int frames, int max_instances) {
  StackedObservation s;
  for (int f = 0; f < frames; ++f) s.push_back(random_observation(rng, max_instances));
  return s;
}

struct Batch {
  std::vector<Transition> storage;
  std::vector<const Transition*> ptrs;
};

Batch random_batch(std::mt19937_64& rng, int size, int frames, int max_instances) {
  Batch b;
  std::uniform_int_distribution<int> action(0, 6);
  std::uniform_int_distribution<int> reward(-1, 1);
  for (int i = 0; i < size; ++i)
    b.storage.push_back({random_stack(rng, frames, max_instances), action(rng),
                         static_cast<double>(reward(rng)), random_stack(rng, frames, max_instances),
                         i % 3 == 0});
  for (const auto& t : b.storage) b.ptrs.push_back(&t);
  return b;
}

// Bias-randomized so that rectifier kinks are not sitting exactly at zero.
PolicyNet small_net(EncoderMode mode, std::uint64_t seed, int frames = 2, int slots = 6) {
  std::mt19937_64 rng(seed);
  PolicyNet net = PolicyNet::create(mode, 3, frames, 5, 6, 4, rng, slots);
  std::uniform_real_distribution<double> u(-0.1, 0.3);
  for (Layers<double>* group : {&net.instance_encoder, &net.state_encoder, &net.q_head})
    for (auto& l : *group)
      for (Eigen::Index i = 0; i < l.biases.size(); ++i) l.biases(i) = u(rng);
  return net;
}

constexpr EncoderMode kModes[] = {EncoderMode::kSum, EncoderMode::kMean, EncoderMode::kMax,
                                  EncoderMode::kBaseline};

TEST(Epsilon, LinearScheduleThenFlat) {
  TrainConfig c;
  EXPECT_EQ(epsilon_at(c, 0), 1.0);
  EXPECT_NEAR(epsilon_at(c, 10), 0.525, 1e-12);
  EXPECT_NEAR(epsilon_at(c, 19), 1.0 - 0.95 * 19.0 / 20.0, 1e-12);
  EXPECT_EQ(epsilon_at(c, 20), 0.05);
  EXPECT_EQ(epsilon_at(c, 99), 0.05);
  EXPECT_THROW(epsilon_at(c, -1), std::invalid_argument);
}

TEST(Epsilon, ZeroAnnealIsImmediatelyFinal) {
  TrainConfig c;
  c.epsilon_anneal_episodes = 0;
  EXPECT_EQ(epsilon_at(c, 0), 0.05);
}

TEST(SelectAction, GreedyPicksArgmaxAndLowestTie) {
  std::mt19937_64 rng(1);
  Vec<double> q(7);
  q << 0, 0, 3, 0, 0, 0, 0;
  EXPECT_EQ(select_action(q, 0.0, rng), 2);
  q << 1, 5, 5, 0, 5, 0, 0;
  EXPECT_EQ(select_action(q, 0.0, rng), 1);
  q.setConstant(-2.0);
  EXPECT_EQ(select_action(q, 0.0, rng), 0);
}

TEST(SelectAction, FullExplorationIsUniform) {
  // Chi-squared goodness of fit, 6 degrees of freedom, alpha = 0.01.
  std::mt19937_64 rng(2024);
  Vec<double> q = Vec<double>::Zero(7);
  q(3) = 10.0;
  std::array<int, 7> counts{};
  constexpr int kDraws = 10000;
  for (int i = 0; i < kDraws; ++i) counts[static_cast<std::size_t>(select_action(q, 1.0, rng))] += 1;
  const double expected = kDraws / 7.0;
  double chi2 = 0.0;
  for (int c : counts) chi2 += (c - expected) * (c - expected) / expected;
  EXPECT_LT(chi2, 16.812);
}

TEST(SelectAction, SameSeedSameChoices) {
  Vec<double> q(7);
  q << 0.1, 0.4, 0.3, 0.2, 0.0, -1, 2;
  std::mt19937_64 a(5), b(5);
  for (int i = 0; i < 200; ++i) EXPECT_EQ(select_action(q, 0.3, a), select_action(q, 0.3, b));
}

TEST(PolicyNet, DeepSetsShapes) {
  std::mt19937_64 rng(0);
  const PolicyNet net = PolicyNet::create(TrainConfig{}, 3, rng);
  EXPECT_EQ(net.frame_dim(), 135u);
  EXPECT_EQ(net.stacked_dim(), 540u);
  EXPECT_EQ(net.state_encoder.front().in_dim(), 540u);
  EXPECT_EQ(net.q_head.back().out_dim(), 7u);
  EXPECT_EQ(net.q_head.back().activation, Activation::kIdentity);
}

TEST(PolicyNet, BaselineShapes) {
  TrainConfig c;
  c.pooling = EncoderMode::kBaseline;
  std::mt19937_64 rng(0);
  const PolicyNet net = PolicyNet::create(c, 3, rng);
  EXPECT_TRUE(net.instance_encoder.empty());
  EXPECT_EQ(net.frame_dim(), 1207u);
  EXPECT_EQ(net.stacked_dim(), 4828u);
}

TEST(PolicyNet, WrongFrameCountThrows) {
  std::mt19937_64 rng(3);
  const PolicyNet net = small_net(EncoderMode::kSum, 1, 2);
  EXPECT_THROW(q_values(net, random_stack(rng, 3, 4)), DimensionError);
}

TEST(PolicyNet, DeepSetsIgnoreInstanceOrder) {
  std::mt19937_64 rng(8);
  for (EncoderMode mode : {EncoderMode::kSum, EncoderMode::kMean, EncoderMode::kMax}) {
    const PolicyNet net = small_net(mode, 2);
    for (int trial = 0; trial < 20; ++trial) {
      StackedObservation s = random_stack(rng, 2, 8);
      StackedObservation shuffled = s;
      for (auto& o : shuffled) std::shuffle(o.instances.begin(), o.instances.end(), rng);
      EXPECT_LE((q_values(net, s) - q_values(net, shuffled)).cwiseAbs().maxCoeff(), 1e-12);
    }
  }
}

TEST(PolicyNet, BaselineSeesInstanceOrder) {
  const PolicyNet net = small_net(EncoderMode::kBaseline, 2);
  const std::vector<double> state{0, 1, 0, 0, 0, 0, 1};
  const StackedObservation a{{{0, 1, 2}, state}, {{0, 1, 2}, state}};
  const StackedObservation b{{{2, 1, 0}, state}, {{2, 1, 0}, state}};
  EXPECT_GT((q_values(net, a) - q_values(net, b)).cwiseAbs().maxCoeff(), 1e-9);
}

TEST(PolicyNet, TablePathMatchesPerInstanceFrames) {
  std::mt19937_64 rng(12);
  for (EncoderMode mode : kModes) {
    const PolicyNet net = small_net(mode, 4);
    for (int trial = 0; trial < 10; ++trial) {
      const StackedObservation s = random_stack(rng, 2, 7);
      Vec<double> x(static_cast<Eigen::Index>(net.stacked_dim()));
      const auto fd = static_cast<Eigen::Index>(net.frame_dim());
      for (std::size_t f = 0; f < s.size(); ++f)
        x.segment(static_cast<Eigen::Index>(f) * fd, fd) = net.encode_frame(s[f]);
      const Vec<double> reference = forward(net.q_head, forward(net.state_encoder, x));
      EXPECT_LE((q_values(net, s) - reference).cwiseAbs().maxCoeff(), 1e-12) << to_string(mode);
    }
  }
}

TEST(PolicyNet, BaselineSparseGradientMatchesDense) {
  std::mt19937_64 rng(31);
  const PolicyNet net = small_net(EncoderMode::kBaseline, 9, 2, 5);
  Batch batch = random_batch(rng, 6, 2, 7);  // some frames overflow the 5 slots
  std::vector<const StackedObservation*> states;
  for (const auto* t : batch.ptrs) states.push_back(&t->stacked_obs);

  PolicyCache cache;
  const RowMatrix<double> q = net.q_batch(states, &cache);
  RowMatrix<double> dq(q.rows(), q.cols());
  std::normal_distribution<double> d;
  for (Eigen::Index i = 0; i < dq.size(); ++i) dq.data()[i] = d(rng);
  PolicyGrads sparse = net.zero_grads();
  net.backward_batch(states, cache, dq, sparse);

  const auto fd = static_cast<Eigen::Index>(net.frame_dim());
  RowMatrix<double> x(static_cast<Eigen::Index>(states.size()),
                      static_cast<Eigen::Index>(net.stacked_dim()));
  for (std::size_t b = 0; b < states.size(); ++b)
    for (std::size_t f = 0; f < 2; ++f)
      x.row(static_cast<Eigen::Index>(b)).segment(static_cast<Eigen::Index>(f) * fd, fd) =
          baseline_encode((*states[b])[f], 3, 5).transpose();
  ForwardCache<double> c1, c2;
  const RowMatrix<double> h = forward(net.state_encoder, x, &c1);
  const RowMatrix<double> q_dense = forward(net.q_head, h, &c2);
  EXPECT_LE((q - q_dense).cwiseAbs().maxCoeff(), 1e-12);
  PolicyGrads dense = net.zero_grads();
  const RowMatrix<double> dh = backward(net.q_head, c2, dq, dense.q_head);
  backward(net.state_encoder, c1, dh, dense.state_encoder);
  EXPECT_LE((sparse.state_encoder[0].weights - dense.state_encoder[0].weights).cwiseAbs().maxCoeff(),
            1e-12);
  EXPECT_LE((sparse.state_encoder[0].biases - dense.state_encoder[0].biases).cwiseAbs().maxCoeff(),
            1e-12);
}

TEST(TdTargets, TerminalAndBootstrapped) {
  std::mt19937_64 rng(5);
  const PolicyNet target = small_net(EncoderMode::kMean, 6);
  const StackedObservation s = random_stack(rng, 2, 4);
  const StackedObservation next = random_stack(rng, 2, 4);
  const Transition terminal{s, 3, 1.0, next, true};
  const Transition live{s, 3, -1.0, next, false};
  const std::vector<const Transition*> batch{&terminal, &live};
  const Vec<double> y = td_targets(batch, target, 0.9);
  EXPECT_EQ(y(0), 1.0);
  EXPECT_NEAR(y(1), -1.0 + 0.9 * q_values(target, next).maxCoeff(), 1e-12);
  EXPECT_THROW(td_targets(std::vector<const Transition*>{}, target, 0.9), std::invalid_argument);
}

TEST(TdLoss, ZeroResidualGivesZeroLossAndGradient) {
  std::mt19937_64 rng(5);
  const PolicyNet net = small_net(EncoderMode::kSum, 6);
  Batch batch = random_batch(rng, 5, 2, 4);
  Vec<double> targets(5);
  for (std::size_t i = 0; i < 5; ++i)
    targets(static_cast<Eigen::Index>(i)) =
        q_values(net, batch.storage[i].stacked_obs)(batch.storage[i].action);
  PolicyGrads grads = net.zero_grads();
  EXPECT_LE(td_loss(net, batch.ptrs, targets, &grads), 1e-28);
  EXPECT_LE(grads.q_head[1].weights.cwiseAbs().maxCoeff(), 1e-14);
  EXPECT_LE(grads.instance_encoder[0].weights.cwiseAbs().maxCoeff(), 1e-14);
}

TEST(TdLoss, HandComputedMeanSquaredError) {
  std::mt19937_64 rng(7);
  const PolicyNet net = small_net(EncoderMode::kMax, 6);
  Batch batch = random_batch(rng, 2, 2, 4);
  Vec<double> targets(2);
  const double q0 = q_values(net, batch.storage[0].stacked_obs)(batch.storage[0].action);
  const double q1 = q_values(net, batch.storage[1].stacked_obs)(batch.storage[1].action);
  targets << q0 + 1.0, q1 - 3.0;
  EXPECT_NEAR(td_loss(net, batch.ptrs, targets), (1.0 + 9.0) / 2.0, 1e-12);
}

TEST(Gradients, PolicyMatchesFiniteDifferencesForEveryMode) {
  std::mt19937_64 rng(77);
  for (EncoderMode mode : kModes) {
    for (int trial = 0; trial < 3; ++trial) {
      const PolicyNet net = small_net(mode, static_cast<std::uint64_t>(100 + trial));
      Batch batch = random_batch(rng, 4, 2, 5);
      std::normal_distribution<double> d;
      Vec<double> targets(4);
      for (Eigen::Index i = 0; i < 4; ++i) targets(i) = d(rng);
      const PolicyGradCheck r = check_policy_gradients(net, batch.ptrs, targets, 1e-6);
      EXPECT_LE(r.max(), 1e-4) << to_string(mode) << " trial " << trial;
    }
  }
}

TEST(Gradients, CorruptedGradientIsDetected) {
  // Negative control: a wrong analytic gradient must fail the same comparison.
  std::mt19937_64 rng(3);
  const PolicyNet net = small_net(EncoderMode::kSum, 3);
  Batch batch = random_batch(rng, 3, 2, 4);
  const Vec<double> targets = Vec<double>::Constant(3, 0.5);
  PolicyGrads grads = net.zero_grads();
  td_loss(net, batch.ptrs, targets, &grads);
  PolicyNet probe = net;
  double& p = probe.q_head[1].weights(0, 0);
  const double eps = 1e-6, saved = p;
  p = saved + eps;
  const double up = td_loss(probe, batch.ptrs, targets);
  p = saved - eps;
  const double down = td_loss(probe, batch.ptrs, targets);
  const double numeric = (up - down) / (2 * eps);
  EXPECT_LE(relative_error(grads.q_head[1].weights(0, 0), numeric), 1e-4);
  EXPECT_GT(relative_error(grads.q_head[1].weights(0, 0) * 1.01 + 1e-3, numeric), 1e-4);
}

Transition single(StackedObservation frames) {
  Transition t;
  t.stacked_obs = std::move(frames);
  return t;
}

TEST(KinkMargin, ZeroPreactivationGivesZeroMargin) {
  PolicyNet net = small_net(EncoderMode::kSum, 5);
  const Transition t = single(StackedObservation(2, Observation{{1}, {1, 0, 0, 0, 0, 0, 1}}));
  const Transition* batch[] = {&t};
  EXPECT_GT(kink_margin(net, batch), 0.0);
  // Unit 0 of the first layer now sits exactly at its kink for class 1.
  net.instance_encoder[0].biases(0) = -net.instance_encoder[0].weights(0, 1);
  EXPECT_EQ(kink_margin(net, batch), 0.0);
}

TEST(KinkMargin, MaxTieBetweenClassesCountsButRepeatsDoNot) {
  PolicyNet net = small_net(EncoderMode::kMax, 6);
  // Classes 0 and 1 share an embedding; every unit is active.
  for (auto& layer : net.instance_encoder) {
    layer.weights = layer.weights.cwiseAbs();
    layer.biases.setConstant(0.5);
  }
  net.instance_encoder[0].weights.col(1) = net.instance_encoder[0].weights.col(0);
  const Observation agent{{}, {1, 0, 0, 0, 0, 0, 1}};
  Observation repeats = agent, mixed = agent;
  repeats.instances = {0, 0, 0};
  mixed.instances = {0, 1};
  const Transition a = single(StackedObservation(2, repeats)), b = single(StackedObservation(2, mixed));
  const Transition* only_repeats[] = {&a};
  const Transition* with_tie[] = {&b};
  EXPECT_GT(kink_margin(net, only_repeats), 0.0);
  EXPECT_EQ(kink_margin(net, with_tie), 0.0);
}

TEST(GradientSweep, PassesAndReportsRedraws) {
  GradCheckOptions opts;
  opts.configurations = 100;
  opts.seed = 2024;
  const GradCheckReport r = run_gradient_checks(opts);
  EXPECT_TRUE(r.passed()) << r.worst();
  EXPECT_EQ(r.configurations, 100);
  EXPECT_LT(r.redrawn, 50);
  for (const char* name : {"mlp", "sum/instance_encoder", "max/instance_encoder", "baseline/state_encoder"})
    EXPECT_TRUE(r.max_error.count(name)) << name;
}

TEST(GradientSweep, WrongBackwardFails) {
  GradCheckOptions opts;
  opts.configurations = 10;
  opts.analytic_scale = 1.1;
  EXPECT_FALSE(run_gradient_checks(opts).passed());
}

TEST(TrainStep, SkipsUntilBufferHoldsABatch) {
  std::mt19937_64 rng(1);
  TrainConfig c;
  c.batch_size = 4;
  Policy policy{small_net(EncoderMode::kSum, 1), {}};
  policy.target = policy.online;
  PolicyOptimizer opt(policy.online);
  ReplayBuffer buffer;
  Batch batch = random_batch(rng, 4, 2, 3);
  for (int i = 0; i < 3; ++i) buffer.push(batch.storage[static_cast<std::size_t>(i)]);
  const PolicyNet before = policy.online;
  EXPECT_FALSE(train_step(policy, opt, buffer, rng, c).has_value());
  EXPECT_EQ(policy.online, before);
  buffer.push(batch.storage[3]);
  EXPECT_TRUE(train_step(policy, opt, buffer, rng, c).has_value());
  EXPECT_FALSE(policy.online == before);
  EXPECT_EQ(policy.target, before);  // only the online network moves
}

TEST(TrainStep, RepeatedUpdatesReduceLossOnFixedBatch) {
  std::mt19937_64 rng(2);
  TrainConfig c;
  c.batch_size = 8;
  c.learning_rate = 1e-3;
  Policy policy{small_net(EncoderMode::kMean, 2), {}};
  policy.target = policy.online;
  PolicyOptimizer opt(policy.online);
  ReplayBuffer buffer;
  Batch batch = random_batch(rng, 8, 2, 3);
  for (auto& t : batch.storage) {
    t.done = true;  // fixed targets
    buffer.push(t);
  }
  const Vec<double> targets = td_targets(batch.ptrs, policy.target, c.discount);
  const double start = td_loss(policy.online, batch.ptrs, targets);
  for (int i = 0; i < 300; ++i) train_step(policy, opt, buffer, rng, c);
  EXPECT_LT(td_loss(policy.online, batch.ptrs, targets), 0.5 * start);
}

TEST(SyncTarget, CopiesExactly) {
  Policy policy{small_net(EncoderMode::kMax, 1), small_net(EncoderMode::kMax, 2)};
  EXPECT_FALSE(policy.online == policy.target);
  sync_target(policy);
  EXPECT_EQ(policy.online, policy.target);
}

TEST(Optimizer, NonFiniteGradientIsRejected) {
  PolicyNet net = small_net(EncoderMode::kSum, 1);
  PolicyOptimizer opt(net);
  PolicyGrads g = net.zero_grads();
  g.q_head[0].biases(0) = std::numeric_limits<double>::infinity();
  const PolicyNet before = net;
  EXPECT_THROW(opt.step(net, g, 1e-4), NonFiniteError);
  EXPECT_EQ(net, before);
}

TrainConfig tiny_config(EncoderMode mode) {
  TrainConfig c;
  c.pooling = mode;
  c.instance_embedding = 8;
  c.state_embedding = 8;
  c.q_hidden = 8;
  c.batch_size = 8;
  c.max_episodes = 3;
  c.episode_limit = 25;
  c.epsilon_anneal_episodes = 2;
  c.target_sync_interval = 10;
  c.seed = 11;
  return c;
}

TEST(Train, DeterministicGivenSeeds) {
  EnvConfig env;
  env.seed = 4;
  for (EncoderMode mode : kModes) {
    const TrainResult a = train(env, tiny_config(mode));
    const TrainResult b = train(env, tiny_config(mode));
    EXPECT_EQ(a.policy.online, b.policy.online) << to_string(mode);
    ASSERT_EQ(a.log.size(), b.log.size());
    for (std::size_t i = 0; i < a.log.size(); ++i) {
      EXPECT_EQ(a.log[i].steps_to_solve, b.log[i].steps_to_solve);
      EXPECT_EQ(a.log[i].total_reward, b.log[i].total_reward);
      EXPECT_TRUE(a.log[i].mean_loss == b.log[i].mean_loss ||
                  (std::isnan(a.log[i].mean_loss) && std::isnan(b.log[i].mean_loss)));
    }
  }
}

TEST(Train, DifferentSeedsDiverge) {
  EnvConfig env;
  TrainConfig c = tiny_config(EncoderMode::kSum);
  const TrainResult a = train(env, c);
  c.seed = 12;
  EXPECT_FALSE(a.policy.online == train(env, c).policy.online);
}

TEST(Train, BufferKeepsEveryTransition) {
  EnvConfig env;
  const TrainResult r = train(env, tiny_config(EncoderMode::kMean));
  EXPECT_EQ(r.buffer_size, r.total_steps);
  std::size_t steps = 0;
  for (const auto& e : r.log) {
    EXPECT_LE(e.steps_to_solve, 25);
    steps += static_cast<std::size_t>(e.solved ? e.steps_to_solve : 25);
  }
  EXPECT_EQ(steps, r.total_steps);
  EXPECT_TRUE(r.policy.online.all_finite());
}

TEST(Train, EpisodeLogRecordsSchedule) {
  EnvConfig env;
  const TrainResult r = train(env, tiny_config(EncoderMode::kMax));
  ASSERT_EQ(r.log.size(), 3u);
  EXPECT_EQ(r.log[0].epsilon, 1.0);
  EXPECT_NEAR(r.log[1].epsilon, 0.525, 1e-12);
  EXPECT_EQ(r.log[2].epsilon, 0.05);
  EXPECT_FALSE(std::isnan(r.log[2].mean_loss));
}

TEST(Train, ZeroEpisodesReturnsUntrainedPolicy) {
  TrainConfig c = tiny_config(EncoderMode::kSum);
  c.max_episodes = 0;
  const TrainResult r = train(EnvConfig{}, c);
  EXPECT_TRUE(r.log.empty());
  EXPECT_EQ(r.total_steps, 0u);
  std::mt19937_64 rng(c.seed);
  EXPECT_EQ(r.policy.online, PolicyNet::create(c, 3, rng));
}

TEST(Train, CallbackSeesEveryEpisode) {
  std::vector<int> seen;
  train(EnvConfig{}, tiny_config(EncoderMode::kSum),
        [&](const EpisodeLog& e) { seen.push_back(e.episode); });
  EXPECT_EQ(seen, (std::vector<int>{0, 1, 2}));
}

TEST(TrainConfig, RejectsBadValues) {
  TrainConfig c;
  c.batch_size = 0;
  EXPECT_THROW(c.validate(), std::invalid_argument);
  c = TrainConfig{};
  c.epsilon_final = 1.5;
  EXPECT_THROW(c.validate(), std::invalid_argument);
  c = TrainConfig{};
  c.discount = 0.0;
  EXPECT_THROW(train(EnvConfig{}, c), std::invalid_argument);
}

}  // namespace
}  // namespace setsort
