// setsort: train, evaluate and compare set-pooling DQN policies on the
// abstract bin-sorting task.
//
//   setsort train      [--config F] [--seed S] [--seeds N] [--pooling P] [--episodes N] ...
//   setsort eval       --checkpoint F [F ...] [--objects-per-bin N] [--seeds N] ...
//   setsort sweep      [--config F] [--parallel N] ...
//   setsort check-grad [--seed S] [--configs N]
//
// Exit codes: 0 success, 1 usage or configuration error, 2 runtime failure.

#include <openssl/sha.h>

#include <CLI11.hpp>
#include <atomic>
#include <chrono>
#include <cmath>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <json.hpp>
#include <map>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include "setsort/checkpoint.hpp"
#include "setsort/config.hpp"
#include "setsort/eval.hpp"
#include "setsort/gradcheck.hpp"

namespace fs = std::filesystem;
using json = nlohmann::json;
using namespace setsort;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitUsage = 1;
constexpr int kExitRuntime = 2;

constexpr const char* kTrainSchema = "# setsort-train v1";
constexpr const char* kTraceSchema = "# setsort-eval-trace v1";
constexpr const char* kSummarySchema = "# setsort-eval-summary v1";
constexpr const char* kCurveSchema = "# setsort-train-curve v1";
constexpr const char* kGeneralizationSchema = "# setsort-generalization v1";

struct RuntimeFailure : std::runtime_error {
  using std::runtime_error::runtime_error;
};

std::string fmt(double v) {
  if (std::isnan(v)) return "nan";
  return detail::format_double(v);
}

std::string utc_now() {
  const std::time_t t = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&t, &tm);
  std::ostringstream out;
  out << std::put_time(&tm, "%Y-%m-%dT%H:%M:%SZ");
  return out.str();
}

/// Same digest `git hash-object` gives for a file with this content.
std::string git_blob_sha1(const std::string& content) {
  const std::string blob = "blob " + std::to_string(content.size()) + '\0' + content;
  unsigned char digest[SHA_DIGEST_LENGTH];
  SHA1(reinterpret_cast<const unsigned char*>(blob.data()), blob.size(), digest);
  std::ostringstream hex;
  for (unsigned char b : digest) hex << std::hex << std::setw(2) << std::setfill('0') << int(b);
  return hex.str();
}

/// Run record written when a command starts and rewritten when it ends.
class RunManifest {
 public:
  RunManifest(fs::path dir, std::string command, const ExperimentConfig& config,
              std::vector<std::uint64_t> seeds, std::vector<fs::path> outputs)
      : path_(dir / "manifest.json"), started_(std::chrono::steady_clock::now()) {
    const std::string text = to_config_text(config);
    doc_["schema"] = "setsort-manifest v1";
    doc_["command"] = std::move(command);
    doc_["config"] = to_key_values(config);
    doc_["config_sha1"] = git_blob_sha1(text);
    doc_["seeds"] = std::move(seeds);
    json outs = json::array();
    for (const auto& p : outputs) outs.push_back(p.string());
    doc_["outputs"] = outs;
    doc_["started_at"] = utc_now();
    doc_["status"] = "running";
    doc_["timings_s"] = json::object();
    write();
  }

  void time(const std::string& label, double seconds) { doc_["timings_s"][label] = seconds; }

  void finish(const std::string& status) {
    doc_["status"] = status;
    doc_["finished_at"] = utc_now();
    doc_["wall_clock_s"] =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - started_).count();
    write();
  }

 private:
  void write() const {
    std::ofstream out(path_);
    out << doc_.dump(2) << "\n";
    if (!out) throw RuntimeFailure("cannot write " + path_.string());
  }

  fs::path path_;
  std::chrono::steady_clock::time_point started_;
  json doc_;
};

struct CommonOptions {
  std::string config_path;
  std::optional<std::uint64_t> seed;
  std::optional<int> seeds;
  std::string pooling;
  std::optional<int> objects_per_bin;
  std::optional<int> episodes;
  std::string out;
  int parallel = 1;
  std::vector<std::string> checkpoints;
  int grad_configs = 100;
  bool corrupt_backward = false;
};

fs::path default_out_dir() {
  if (const char* env = std::getenv("SETSORT_OUT_DIR"); env && *env) return env;
  return "runs";
}

/// Defaults, then the config file, then command-line flags.
ExperimentConfig resolve_config(const CommonOptions& o) {
  ExperimentConfig c;
  if (!o.config_path.empty()) load_config_file(c, o.config_path);
  if (!o.pooling.empty()) set(c, "pooling", o.pooling);
  c.validate();
  return c;
}

fs::path prepare_out_dir(const CommonOptions& o) {
  const fs::path dir = o.out.empty() ? default_out_dir() : fs::path(o.out);
  fs::create_directories(dir);
  return dir;
}

std::ofstream open_csv(const fs::path& path, const char* schema, const char* columns) {
  std::ofstream out(path);
  if (!out) throw RuntimeFailure("cannot write " + path.string());
  out << schema << "\n" << columns << "\n";
  return out;
}

fs::path checkpoint_path(const fs::path& dir, EncoderMode mode, std::uint64_t seed) {
  return dir / "checkpoints" / (std::string(to_string(mode)) + "-seed" + std::to_string(seed) + ".ckpt");
}

struct TrainJob {
  EncoderMode mode;
  std::uint64_t seed;
  TrainResult result;
  double seconds = 0.0;
};

/// Trains every job, `parallel` at a time. Each job writes only its own
/// checkpoint; logs are collected in memory and merged by the caller.
void run_training(std::vector<TrainJob>& jobs, const ExperimentConfig& config, const fs::path& dir,
                  int parallel) {
  fs::create_directories(dir / "checkpoints");
  std::atomic<std::size_t> next{0};
  std::vector<std::string> errors(jobs.size());
  auto worker = [&] {
    for (std::size_t i = next++; i < jobs.size(); i = next++) {
      TrainJob& job = jobs[i];
      try {
        TrainConfig tc = config.train;
        tc.pooling = job.mode;
        tc.seed = job.seed;
        EnvConfig env = config.env;
        env.seed = job.seed;
        const auto t0 = std::chrono::steady_clock::now();
        job.result = train(env, tc);
        job.seconds =
            std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
        Checkpoint ck;
        ck.config = to_key_values(config);
        ck.config["pooling"] = to_string(job.mode);
        ck.config["seed"] = std::to_string(job.seed);
        ck.net = job.result.policy.online;
        save_checkpoint_file(checkpoint_path(dir, job.mode, job.seed).string(), ck);
        std::cerr << to_string(job.mode) << " seed " << job.seed << ": "
                  << job.result.log.size() << " episodes in " << job.seconds << " s\n";
      } catch (const std::exception& e) {
        errors[i] = e.what();
      }
    }
  };
  {
    std::vector<std::jthread> pool;
    const auto n = std::min<std::size_t>(static_cast<std::size_t>(std::max(1, parallel)), jobs.size());
    for (std::size_t w = 0; w < n; ++w) pool.emplace_back(worker);
  }
  for (std::size_t i = 0; i < jobs.size(); ++i)
    if (!errors[i].empty())
      throw RuntimeFailure(std::string(to_string(jobs[i].mode)) + " seed " +
                           std::to_string(jobs[i].seed) + ": " + errors[i]);
}

void write_train_csv(const fs::path& path, const std::vector<const TrainJob*>& jobs) {
  std::ofstream out = open_csv(path, kTrainSchema,
                               "seed,episode,steps_to_solve,total_reward,epsilon,mean_loss,wall_ms");
  for (const TrainJob* job : jobs)
    for (const EpisodeLog& e : job->result.log)
      out << job->seed << ',' << e.episode << ',' << e.steps_to_solve << ',' << fmt(e.total_reward)
          << ',' << fmt(e.epsilon) << ',' << fmt(e.mean_loss) << ',' << fmt(e.wall_ms) << '\n';
}

void write_eval_csvs(const fs::path& trace_path, const fs::path& summary_path,
                     const EvalReport& report, const std::vector<NamedPolicy>& policies,
                     const EvalConfig& eval) {
  std::ofstream trace = open_csv(
      trace_path, kTraceSchema,
      "policy,pooling,objects_per_bin,seed,episode,action_step,fraction_correct");
  for (const EpisodeRecord& e : report.episodes)
    for (std::size_t t = 0; t < e.trace.fraction_correct.size(); ++t)
      trace << e.policy << ',' << to_string(e.mode) << ',' << e.objects_per_bin << ',' << e.seed
            << ',' << e.episode << ',' << t + 1 << ',' << fmt(e.trace.fraction_correct[t]) << '\n';

  std::ofstream summary = open_csv(summary_path, kSummarySchema,
                                   "policy,pooling,objects_per_bin,runs,final_fraction_correct,"
                                   "final_fraction_correct_std,mean_steps_to_solve,solve_rate");
  auto row = [&](const std::string& policy, const std::string& pooling, int opb,
                 const EvalSummary& s) {
    summary << policy << ',' << pooling << ',' << opb << ',' << s.runs << ','
            << fmt(s.final_fraction_correct) << ',' << fmt(s.final_fraction_correct_std) << ','
            << fmt(s.mean_steps_to_solve) << ',' << fmt(s.solve_rate) << '\n';
  };
  for (const NamedPolicy& p : policies)
    for (int opb : eval.objects_per_bin_list)
      row(p.name, to_string(p.net->mode), opb, report.summarize_policy(p.name, opb));
  // Pooled over every policy of a group.
  for (const EvalRow& r : report.rows) row("*", r.group, r.objects_per_bin, r.metrics.summary);
}

int cmd_train(const CommonOptions& o) {
  ExperimentConfig config = resolve_config(o);
  if (o.seed) config.train.seed = *o.seed;
  if (o.seeds) config.train_seeds = *o.seeds;
  if (o.episodes) config.train.max_episodes = *o.episodes;
  if (o.objects_per_bin) config.env.objects_per_bin = *o.objects_per_bin;
  config.validate();

  const fs::path dir = prepare_out_dir(o);
  const auto seeds = config.training_seeds();
  std::vector<fs::path> outputs{dir / "train.csv"};
  for (auto s : seeds) outputs.push_back(checkpoint_path(dir, config.train.pooling, s));
  RunManifest manifest(dir, "train", config, seeds, outputs);
  try {
    std::vector<TrainJob> jobs;
    for (auto s : seeds) jobs.push_back({config.train.pooling, s, {}, 0.0});
    run_training(jobs, config, dir, o.parallel);
    std::vector<const TrainJob*> ptrs;
    for (const auto& j : jobs) {
      ptrs.push_back(&j);
      manifest.time(std::string(to_string(j.mode)) + "-seed" + std::to_string(j.seed), j.seconds);
    }
    write_train_csv(dir / "train.csv", ptrs);
  } catch (...) {
    manifest.finish("failed");
    throw;
  }
  manifest.finish("ok");
  std::cout << "wrote " << (dir / "train.csv").string() << " and " << seeds.size()
            << " checkpoints\n";
  return kExitOk;
}

int cmd_eval(const CommonOptions& o) {
  ExperimentConfig config = resolve_config(o);
  if (o.objects_per_bin) config.eval.objects_per_bin_list = {*o.objects_per_bin};
  if (o.episodes) config.eval.episodes_per_setting = *o.episodes;
  if (o.seed || o.seeds) {
    const std::uint64_t first = o.seed.value_or(config.eval.seeds.front());
    const int count = o.seeds.value_or(static_cast<int>(config.eval.seeds.size()));
    config.eval.seeds.clear();
    for (int i = 0; i < count; ++i) config.eval.seeds.push_back(first + static_cast<std::uint64_t>(i));
  }
  config.validate();

  const fs::path dir = prepare_out_dir(o);
  RunManifest manifest(dir, "eval", config, config.eval.seeds,
                       {dir / "eval_trace.csv", dir / "eval_summary.csv"});
  try {
    std::vector<Checkpoint> loaded;
    loaded.reserve(o.checkpoints.size());
    for (const auto& path : o.checkpoints) loaded.push_back(load_checkpoint_file(path));
    std::vector<NamedPolicy> policies;
    for (std::size_t i = 0; i < loaded.size(); ++i)
      policies.push_back({fs::path(o.checkpoints[i]).stem().string(), to_string(loaded[i].net.mode),
                          &loaded[i].net});
    const auto t0 = std::chrono::steady_clock::now();
    const EvalReport report = generalization_sweep(policies, config.eval, config.env, o.parallel);
    manifest.time("evaluation",
                  std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count());
    write_eval_csvs(dir / "eval_trace.csv", dir / "eval_summary.csv", report, policies, config.eval);
  } catch (...) {
    manifest.finish("failed");
    throw;
  }
  manifest.finish("ok");
  std::cout << "wrote " << (dir / "eval_trace.csv").string() << " and "
            << (dir / "eval_summary.csv").string() << "\n";
  return kExitOk;
}

int cmd_sweep(const CommonOptions& o) {
  ExperimentConfig config = resolve_config(o);
  if (o.seed) config.train.seed = *o.seed;
  if (o.seeds) config.train_seeds = *o.seeds;
  if (o.episodes) config.train.max_episodes = *o.episodes;
  if (o.objects_per_bin) config.env.objects_per_bin = *o.objects_per_bin;
  config.validate();

  constexpr EncoderMode kModes[] = {EncoderMode::kSum, EncoderMode::kMean, EncoderMode::kMax,
                                    EncoderMode::kBaseline};
  const fs::path dir = prepare_out_dir(o);
  const auto seeds = config.training_seeds();
  std::vector<fs::path> outputs;
  for (EncoderMode m : kModes) {
    outputs.push_back(dir / ("train_" + std::string(to_string(m)) + ".csv"));
    for (auto s : seeds) outputs.push_back(checkpoint_path(dir, m, s));
  }
  for (const char* f : {"train_curves.csv", "eval_trace.csv", "eval_summary.csv",
                        "generalization.csv"})
    outputs.push_back(dir / f);
  RunManifest manifest(dir, "sweep", config, seeds, outputs);
  try {
    std::vector<TrainJob> jobs;
    for (EncoderMode m : kModes)
      for (auto s : seeds) jobs.push_back({m, s, {}, 0.0});
    run_training(jobs, config, dir, o.parallel);

    std::ofstream curves = open_csv(dir / "train_curves.csv", kCurveSchema,
                                    "pooling,episode,seeds,steps_to_solve_mean,steps_to_solve_std");
    std::vector<NamedPolicy> policies;
    for (EncoderMode m : kModes) {
      std::vector<const TrainJob*> mine;
      for (const auto& j : jobs)
        if (j.mode == m) {
          mine.push_back(&j);
          manifest.time(std::string(to_string(m)) + "-seed" + std::to_string(j.seed), j.seconds);
          policies.push_back({std::string(to_string(m)) + "-seed" + std::to_string(j.seed),
                              to_string(m), &j.result.policy.online});
        }
      write_train_csv(dir / ("train_" + std::string(to_string(m)) + ".csv"), mine);
      for (int ep = 0; ep < config.train.max_episodes && !mine.empty(); ++ep) {
        double sum = 0.0, sq = 0.0;
        for (const TrainJob* j : mine) sum += j->result.log[static_cast<std::size_t>(ep)].steps_to_solve;
        const double mean = sum / static_cast<double>(mine.size());
        for (const TrainJob* j : mine) {
          const double d = j->result.log[static_cast<std::size_t>(ep)].steps_to_solve - mean;
          sq += d * d;
        }
        curves << to_string(m) << ',' << ep << ',' << mine.size() << ',' << fmt(mean) << ','
               << fmt(std::sqrt(sq / static_cast<double>(mine.size()))) << '\n';
      }
    }

    const auto t0 = std::chrono::steady_clock::now();
    const EvalReport report = generalization_sweep(policies, config.eval, config.env, o.parallel);
    manifest.time("evaluation",
                  std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count());
    write_eval_csvs(dir / "eval_trace.csv", dir / "eval_summary.csv", report, policies, config.eval);

    std::ofstream gen = open_csv(dir / "generalization.csv", kGeneralizationSchema,
                                 "pooling,objects_per_bin,action_step,fraction_correct_mean,"
                                 "fraction_correct_std");
    for (const EvalRow& r : report.rows)
      for (std::size_t t = 0; t < r.metrics.mean.size(); ++t)
        gen << r.group << ',' << r.objects_per_bin << ',' << t + 1 << ','
            << fmt(r.metrics.mean[t]) << ',' << fmt(r.metrics.std[t]) << '\n';

    std::cout << "pooling   opb  final_fraction_correct  solve_rate\n";
    for (const EvalRow& r : report.rows)
      std::cout << std::left << std::setw(9) << r.group << ' ' << std::setw(4) << r.objects_per_bin
                << ' ' << std::setw(23) << r.metrics.summary.final_fraction_correct << ' '
                << r.metrics.summary.solve_rate << '\n';
  } catch (...) {
    manifest.finish("failed");
    throw;
  }
  manifest.finish("ok");
  return kExitOk;
}

int cmd_check_grad(const CommonOptions& o) {
  GradCheckOptions opts;
  opts.seed = o.seed.value_or(0);
  opts.configurations = o.grad_configs;
  if (o.corrupt_backward) opts.analytic_scale = 1.1;

  ExperimentConfig config;
  const fs::path dir = prepare_out_dir(o);
  RunManifest manifest(dir, "check-grad", config, {opts.seed}, {});
  const GradCheckReport report = run_gradient_checks(opts);
  std::cout << "component                    max_relative_error\n";
  for (const auto& [name, err] : report.max_error)
    std::cout << std::left << std::setw(28) << name << ' ' << std::scientific
              << std::setprecision(3) << err << (err <= opts.tolerance ? "" : "  FAIL") << '\n';
  std::cout << std::defaultfloat << report.configurations << " configurations ("
            << report.redrawn << " redrawn near a kink), worst "
            << report.worst() << ", tolerance " << opts.tolerance << ": "
            << (report.passed() ? "PASS" : "FAIL") << '\n';
  manifest.finish(report.passed() ? "ok" : "failed");
  return report.passed() ? kExitOk : kExitRuntime;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Set-pooling DQN experiments on the abstract bin-sorting task"};
  app.require_subcommand(1);
  CommonOptions o;

  auto add_common = [&](CLI::App* cmd) {
    cmd->add_option("--config", o.config_path, "key = value config file")->check(CLI::ExistingFile);
    cmd->add_option("--seed", o.seed, "first seed");
    cmd->add_option("--seeds", o.seeds, "number of consecutive seeds")->check(CLI::NonNegativeNumber);
    cmd->add_option("--pooling", o.pooling, "sum, mean, max or baseline")
        ->check(CLI::IsMember({"sum", "mean", "max", "baseline"}));
    cmd->add_option("--objects-per-bin", o.objects_per_bin, "objects of each class")
        ->check(CLI::NonNegativeNumber);
    cmd->add_option("--episodes", o.episodes,
                    "training episodes (train, sweep) or episodes per setting (eval)")
        ->check(CLI::NonNegativeNumber);
    cmd->add_option("--out", o.out, "output directory (default $SETSORT_OUT_DIR or ./runs)");
    cmd->add_option("--parallel", o.parallel, "concurrent runs")->check(CLI::PositiveNumber);
  };

  CLI::App* train_cmd = app.add_subcommand("train", "train one pooling variant over several seeds");
  add_common(train_cmd);
  CLI::App* eval_cmd = app.add_subcommand("eval", "evaluate checkpoints across object counts");
  add_common(eval_cmd);
  eval_cmd->add_option("--checkpoint", o.checkpoints, "checkpoint file(s)")->required();
  CLI::App* sweep_cmd = app.add_subcommand("sweep", "train and evaluate all four variants");
  add_common(sweep_cmd);
  CLI::App* grad_cmd = app.add_subcommand("check-grad", "finite-difference gradient checks");
  grad_cmd->add_option("--seed", o.seed, "random seed");
  grad_cmd->add_option("--configs", o.grad_configs, "random configurations")
      ->check(CLI::PositiveNumber);
  grad_cmd->add_option("--out", o.out, "output directory for the manifest");
  grad_cmd->add_flag("--corrupt-backward", o.corrupt_backward,
                     "scale analytic gradients by 1.1 (negative control)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kExitOk : kExitUsage;
  }

  try {
    if (*train_cmd) return cmd_train(o);
    if (*eval_cmd) return cmd_eval(o);
    if (*sweep_cmd) return cmd_sweep(o);
    if (*grad_cmd) return cmd_check_grad(o);
  } catch (const ConfigError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const CheckpointError& e) {
    std::cerr << "error: failed to load checkpoint: " << e.what() << "\n";
    return kExitRuntime;
  } catch (const NonFiniteError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitRuntime;
  } catch (const RuntimeFailure& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitRuntime;
  } catch (const std::invalid_argument& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitRuntime;
  }
  return kExitUsage;
}
