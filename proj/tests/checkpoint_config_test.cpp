#include <gtest/gtest.h>

#include <filesystem>
#include <random>
#include <sstream>

#include "setsort/checkpoint.hpp"
#include "setsort/config.hpp"

namespace setsort {
namespace {

PolicyNet net_for(EncoderMode mode, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  return PolicyNet::create(mode, 3, 4, 12, 10, 8, rng);
}

std::string serialize(const Checkpoint& ck) {
  std::ostringstream out;
  save_checkpoint(out, ck);
  return out.str();
}

Checkpoint parse(const std::string& text) {
  std::istringstream in(text);
  return load_checkpoint(in);
}

TEST(Checkpoint, RoundTripIsBitExact) {
  for (EncoderMode mode : {EncoderMode::kSum, EncoderMode::kMean, EncoderMode::kMax,
                           EncoderMode::kBaseline}) {
    Checkpoint ck;
    ck.net = net_for(mode, 3);
    // Values without a short decimal form.
    ck.net.q_head[0].biases(0) = 1.0 / 3.0;
    ck.net.q_head[0].biases(1) = -5e-320;  // subnormal
    ck.config = to_key_values(ExperimentConfig{});
    const Checkpoint back = parse(serialize(ck));
    EXPECT_EQ(back.net, ck.net) << to_string(mode);
    EXPECT_EQ(back.config, ck.config);
    EXPECT_EQ(serialize(back), serialize(ck));
  }
}

TEST(Checkpoint, LoadedPolicyActsIdentically) {
  Checkpoint ck;
  ck.net = net_for(EncoderMode::kMax, 8);
  const Checkpoint back = parse(serialize(ck));
  const StackedObservation s(4, Observation{{0, 2, 2, 1}, {0, 0, 1, 0, 0, 0, 1}});
  EXPECT_EQ(q_values(back.net, s), q_values(ck.net, s));
}

TEST(Checkpoint, FileRoundTrip) {
  const auto path = std::filesystem::temp_directory_path() / "setsort_ckpt_test.txt";
  Checkpoint ck;
  ck.net = net_for(EncoderMode::kSum, 1);
  save_checkpoint_file(path.string(), ck);
  EXPECT_EQ(load_checkpoint_file(path.string()).net, ck.net);
  std::filesystem::remove(path);
  EXPECT_THROW(load_checkpoint_file(path.string()), CheckpointError);
}

TEST(Checkpoint, VersionMismatchIsRejected) {
  Checkpoint ck;
  ck.net = net_for(EncoderMode::kSum, 1);
  ck.format_version = 2;
  try {
    parse(serialize(ck));
    FAIL() << "expected CheckpointError";
  } catch (const CheckpointError& e) {
    EXPECT_NE(std::string(e.what()).find("format_version 2"), std::string::npos);
  }
}

TEST(Checkpoint, CorruptionIsRejected) {
  Checkpoint ck;
  ck.net = net_for(EncoderMode::kMean, 1);
  const std::string good = serialize(ck);

  EXPECT_THROW(parse("garbage"), CheckpointError);
  EXPECT_THROW(parse(good.substr(0, good.size() / 2)), CheckpointError);

  std::string bad_number = good;
  bad_number.replace(bad_number.find("biases ") + 7, 1, "x");
  EXPECT_THROW(parse(bad_number), CheckpointError);

  std::string nan_value = good;
  nan_value.replace(nan_value.find("biases ") + 7, 1, "nan ");
  EXPECT_THROW(parse(nan_value), CheckpointError);

  std::string wrong_pooling = good;
  wrong_pooling.replace(wrong_pooling.find("pooling mean"), 12, "pooling medn");
  EXPECT_THROW(parse(wrong_pooling), CheckpointError);
}

TEST(Checkpoint, ShapeMismatchIsRejected) {
  Checkpoint ck;
  ck.net = net_for(EncoderMode::kSum, 1);
  ck.net.frame_stack = 3;  // state encoder still expects four frames
  EXPECT_THROW(parse(serialize(ck)), CheckpointError);
}

TEST(Config, DefaultsMatchTheExperiment) {
  ExperimentConfig c;
  EXPECT_EQ(c.train.discount, 0.9);
  EXPECT_EQ(c.train.batch_size, 64);
  EXPECT_EQ(c.train.learning_rate, 1e-4);
  EXPECT_EQ(c.train.frame_stack, 4);
  EXPECT_EQ(c.train.max_episodes, 100);
  EXPECT_EQ(c.train.episode_limit, 300);
  EXPECT_EQ(c.train.target_sync_interval, 100);
  EXPECT_EQ(c.train.epsilon_anneal_episodes, 20);
  EXPECT_EQ(c.train.pooling, EncoderMode::kMax);
  EXPECT_EQ(c.eval.objects_per_bin_list, (std::vector<int>{3, 5, 10, 100}));
  EXPECT_EQ(c.eval.episodes_per_setting, 20);
  EXPECT_EQ(c.training_seeds(), (std::vector<std::uint64_t>{0, 1, 2, 3, 4}));
  EXPECT_NO_THROW(c.validate());
}

TEST(Config, ParsesKeyValueText) {
  ExperimentConfig c;
  load_config_text(c, R"(
# comment line
pooling = sum
learning_rate = 5e-4   # trailing comment
objects_per_bin_list = 3, 7
seeds = 4,5
episode_limit = 50
replay_capacity = inf
)");
  EXPECT_EQ(c.train.pooling, EncoderMode::kSum);
  EXPECT_EQ(c.train.learning_rate, 5e-4);
  EXPECT_EQ(c.eval.objects_per_bin_list, (std::vector<int>{3, 7}));
  EXPECT_EQ(c.eval.seeds, (std::vector<std::uint64_t>{4, 5}));
  EXPECT_EQ(c.train.episode_limit, 50);
  EXPECT_EQ(c.env.episode_limit, 50);
}

TEST(Config, LaterAssignmentsOverrideEarlierOnes) {
  ExperimentConfig c;
  load_config_text(c, "batch_size = 32\n");
  set(c, "batch_size", "16");  // command-line override after the file
  EXPECT_EQ(c.train.batch_size, 16);
}

TEST(Config, UnknownKeyIsNamed) {
  ExperimentConfig c;
  try {
    load_config_text(c, "lerning_rate = 0.1\n");
    FAIL() << "expected ConfigError";
  } catch (const ConfigError& e) {
    EXPECT_EQ(e.key, "lerning_rate");
  }
}

TEST(Config, BadValuesAreNamed) {
  ExperimentConfig c;
  auto key_of = [&](const std::string& text) {
    try {
      load_config_text(c, text);
    } catch (const ConfigError& e) {
      return e.key;
    }
    return std::string("<none>");
  };
  EXPECT_EQ(key_of("batch_size = many\n"), "batch_size");
  EXPECT_EQ(key_of("pooling = median\n"), "pooling");
  EXPECT_EQ(key_of("replay_capacity = 1000\n"), "replay_capacity");
  EXPECT_EQ(key_of("seeds = \n"), "seeds");
  EXPECT_EQ(key_of("no equals sign\n"), "no equals sign");
}

TEST(Config, ResolvedTextRoundTrips) {
  ExperimentConfig c;
  set(c, "learning_rate", "0.000123");
  set(c, "greedy_epsilon", "0.05");
  set(c, "seed", "17");
  ExperimentConfig back;
  load_config_text(back, to_config_text(c));
  EXPECT_EQ(to_key_values(back), to_key_values(c));
  EXPECT_EQ(back.train.learning_rate, 0.000123);
}

TEST(Config, MissingFileIsReported) {
  ExperimentConfig c;
  EXPECT_THROW(load_config_file(c, "/nonexistent/setsort.cfg"), std::runtime_error);
}

}  // namespace
}  // namespace setsort
