#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "iqn/chain.hpp"
#include "iqn/envs.hpp"

namespace iqn {

enum class ExperimentKind { kIfqiCarOnHill, kIdqnTabular, kLqrGeometry, kTable1, kPropChecks };

std::string to_string(ExperimentKind kind);

// Config files are JSON objects. Every key is optional except "kind"; unknown
// keys are errors. See README.md for the full schema with defaults.
struct ExperimentConfig {
  ExperimentKind kind = ExperimentKind::kIfqiCarOnHill;
  std::string name;                  // default: the kind
  std::vector<std::uint64_t> seeds{0};
  std::filesystem::path output_dir;  // empty: $IQN_OUTPUT_ROOT/<name>-<hash>
  std::vector<std::size_t> ks{1};    // window sizes swept; train.k is ignored

  TrainConfig train;

  // car-on-hill
  std::size_t n_samples = 10000;
  CarOnHillState initial_state = car_on_hill::kInitialState;
  std::size_t oracle_resolution = 1025;

  // tabular chain
  std::size_t chain_states = 10;
  double goal_reward = 1.0;
  std::size_t max_episode_steps = 50;

  // LQR
  LqrModel lqr;
  std::size_t lqr_steps = 30;
  double lqr_learning_rate = 0.05;
  std::size_t lqr_inits = 10;

  // diagnostics
  std::size_t nu_samples = 1000;  // leading samples of the dataset; 0 = all
  std::size_t cadence = 5;
  std::uint64_t checkpoint_every = 0;  // gradient events; 0 = final only
  bool keep_checkpoints = false;       // also keep checkpoint_<events>.bin
  std::size_t bootstrap_resamples = 2000;
  double ci_level = 0.95;

  void validate() const;
};

// Strict parse. Throws ConfigError with kMissingFile, kSyntax (with line),
// kUnknownKey (naming the key and its line) or kInvariant.
ExperimentConfig parse_config(const std::filesystem::path& path);
ExperimentConfig parse_config_text(const std::string& text);

// Canonical JSON with every default filled in, keys sorted. output_dir is
// not part of it: where results go does not change what is computed.
std::string canonical_json(const ExperimentConfig& config);
// SHA-256 of canonical_json, lowercase hex.
std::string config_hash(const ExperimentConfig& config);

inline constexpr const char* kOutputRootEnv = "IQN_OUTPUT_ROOT";

// `override_dir` wins, then config.output_dir, then
// $IQN_OUTPUT_ROOT (default "runs") / <name>-<first 12 hash chars>.
std::filesystem::path resolve_output_dir(const ExperimentConfig& config,
                                         const std::filesystem::path& override_dir = {});

struct SeedResult {
  std::size_t k = 0;
  std::uint64_t seed = 0;
  std::vector<std::pair<std::string, double>> metrics;  // ordered
};

struct MetricSummary {
  std::size_t k = 0;
  std::string metric;
  std::vector<double> per_seed;  // in seed order
  double iqm = 0.0;
  double ci_low = 0.0;
  double ci_high = 0.0;
};

struct RunSummary {
  std::string config_hash;
  std::filesystem::path output_dir;
  std::vector<SeedResult> runs;
  std::vector<MetricSummary> summaries;
  double wall_clock_seconds = 0.0;
};

// Runs every (K, seed), writing per-run CSVs, checkpoints and metrics under
// the output directory, then summary.json and summary.csv. `threads` > 1 runs
// seeds concurrently; results are ordered by (K, seed) either way.
RunSummary run_experiment(const ExperimentConfig& config, const std::filesystem::path& output_dir,
                          std::size_t threads = 1);

// Continues an i-FQI run from a checkpoint written by run_experiment and
// rewrites that run's outputs. Returns the run directory.
std::filesystem::path resume_run(const std::filesystem::path& checkpoint);

// Collects K*/seed*/curves.csv into <run_dir>/plot_data.csv with columns
// series,x,y,seed. Throws InputError listing what is missing.
std::filesystem::path emit_plot_data(const std::filesystem::path& run_dir);

}  // namespace iqn
