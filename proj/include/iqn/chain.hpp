#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "iqn/approximator.hpp"
#include "iqn/envs.hpp"
#include "iqn/replay.hpp"

namespace iqn {

enum class Execution { kSerial, kParallel };

struct TrainConfig {
  std::size_t k = 1;                // window size K
  std::size_t d = 1;                // rolling target update period
  std::size_t t = 0;                // window shift period; 0 = derive (i-FQI)
  std::size_t g = 1;                // environment steps per gradient event (i-DQN)
  std::size_t batch_size = 100;
  AdamConfig adam{};
  std::vector<std::size_t> hidden{50};
  double gamma = 0.95;

  // i-FQI
  std::size_t bellman_iterations = 40;   // N
  std::size_t gradient_budget = 20000;   // B, non-parallelizable gradient events

  // i-DQN
  std::size_t env_steps = 10000;
  std::size_t replay_capacity = 10000;
  std::size_t learning_starts = 0;
  double epsilon_start = 1.0;
  double epsilon_end = 0.01;
  std::size_t epsilon_decay_steps = 1000;

  std::uint64_t seed = 0;
  Execution execution = Execution::kSerial;
  std::size_t threads = 0;  // 0 = one per network

  void validate() const;
};

// Online parameters theta_1..theta_K live in online[0..K-1]; target
// parameters theta_bar_0..theta_bar_{K-1} in target[0..K-1], so online[i]
// regresses onto the Bellman update of target[i].
struct QChain {
  std::vector<MlpParams> online;
  std::vector<MlpParams> target;
  std::vector<AdamState> adam;

  std::uint64_t gradient_events = 0;
  std::uint64_t rolling_updates = 0;
  std::uint64_t window_shifts = 0;
  std::uint64_t since_rolling = 0;  // gradient events since last rolling update
  std::uint64_t since_shift = 0;    // gradient events since last window shift

  std::size_t k() const { return online.size(); }

  friend bool operator==(const QChain&, const QChain&) = default;
};

// theta_bar_0 is drawn first, then theta_1..theta_K; afterwards
// theta_bar_k <- theta_k for k = 1..K-1.
QChain make_chain(const MlpArchitecture& arch, std::size_t k, const AdamConfig& adam, Rng& rng);

// Parameters at a rolling-update instant: params[0] is theta_bar_0 and
// params[k] is theta_k (equal to theta_bar_k for k < K).
struct SnapshotRecord {
  std::uint64_t index = 0;
  std::uint64_t gradient_events = 0;
  std::uint64_t window_shifts = 0;
  std::vector<MlpParams> params;

  std::size_t k() const { return params.empty() ? 0 : params.size() - 1; }
};

// r if terminal, otherwise r + gamma * max_a' Q_target(s', a').
double empirical_bellman_optimal(const MlpParams& target, const Transition& t, double gamma);

// sum_{i<n} gamma^i r_i + gamma^n max_a' Q(s_n, a'), truncated at a terminal.
// Throws InputError when window[i].next_state != window[i+1].state.
double empirical_bellman_nstep(const MlpParams& target, std::span<const Transition> window,
                               double gamma, std::size_t n);

// Policy-evaluation variant: the bootstrap uses Q(s_n, policy(s_n)).
double empirical_bellman_nstep_policy(
    const MlpParams& target, std::span<const Transition> window, double gamma, std::size_t n,
    const std::function<std::size_t(std::span<const double>)>& policy);

// One QN loss per network on a shared batch; gradients flow into online[i]
// only, with targets built from target[i].
std::vector<LossAndGradient> iqn_loss(const QChain& chain, std::span<const Transition> batch,
                                      double gamma);

// One Adam step per network on its own loss. Targets are computed for every
// network before any parameter is written, so results do not depend on the
// execution mode.
void gradient_update_all(QChain& chain, std::span<const Transition> batch, double gamma,
                         Execution execution = Execution::kSerial, std::size_t threads = 0);

// theta_bar_k <- theta_k for k = 1..K-1. Returns the snapshot at this instant.
SnapshotRecord rolling_target_update(QChain& chain);

// theta_bar_k <- theta_{k+1} for k = 0..K-1.
void window_shift(QChain& chain);

// Uniform index into chain.online. K = 1 returns 0 without touching `rng`.
std::size_t sample_behavior_network(std::size_t k, Rng& rng);

// Uniform action with probability epsilon, else argmax (lowest index on ties).
std::size_t epsilon_greedy_action(std::span<const double> q_values, double epsilon, Rng& rng);

std::size_t argmax(std::span<const double> values);

double linear_epsilon(const TrainConfig& config, std::uint64_t step);

// Window-shift period for i-FQI: floor(B / (N - K + 1)).
std::size_t ifqi_shift_period(std::size_t budget, std::size_t n_iterations, std::size_t k);

// Called after every gradient event with the chain in its post-event state.
using EventObserver = std::function<void(const QChain&)>;
using SnapshotObserver = std::function<void(const SnapshotRecord&)>;

// Offline i-FQI on a fixed dataset. The runner owns the full run state so
// that a checkpoint taken between events resumes bit-for-bit.
class IfqiRunner {
 public:
  IfqiRunner(TrainConfig config, std::vector<Transition> dataset);

  // Runs the remaining budget.
  void run(const SnapshotObserver& on_snapshot = {}, const EventObserver& on_event = {});
  // Runs at most `events` more gradient events.
  void advance(std::uint64_t events, const SnapshotObserver& on_snapshot = {},
               const EventObserver& on_event = {});
  bool finished() const { return chain_.gradient_events >= config_.gradient_budget; }

  const TrainConfig& config() const { return config_; }
  const QChain& chain() const { return chain_; }
  const std::vector<Transition>& dataset() const { return dataset_; }
  std::size_t shift_period() const { return shift_period_; }

  // Q_0..Q_j: theta_bar_0 at start and after every shift, then the online
  // networks once the run is finished.
  std::vector<MlpParams> bellman_iterates() const;

  // Serialization hooks for checkpoints.
  struct State {
    QChain chain;
    std::string rng_state;
    std::vector<MlpParams> frozen;  // theta_bar_0 history
    std::uint64_t snapshots = 0;
  };
  State state() const;
  void restore(State state);

 private:
  void one_event(const SnapshotObserver& on_snapshot, const EventObserver& on_event);

  TrainConfig config_;
  std::vector<Transition> dataset_;
  MlpArchitecture arch_;
  std::size_t shift_period_ = 0;
  std::size_t max_shifts_ = 0;
  Rng rng_;
  QChain chain_;
  std::vector<MlpParams> frozen_;
  std::uint64_t snapshots_ = 0;
};

struct IfqiResult {
  QChain chain;
  std::vector<MlpParams> iterates;
};

IfqiResult run_ifqi(const TrainConfig& config, std::vector<Transition> dataset,
                    const SnapshotObserver& on_snapshot = {}, const EventObserver& on_event = {});

// Plain FQI with one online and one target network. Shares no chain code;
// used to check the K = 1 reduction.
std::vector<std::vector<double>> run_fqi_sequential_trajectory(const TrainConfig& config,
                                                               std::span<const Transition> dataset);

struct IdqnResult {
  QChain chain;
  std::vector<double> episode_returns;
  std::vector<Transition> replay_contents;
};

// Online i-DQN. Per environment step: sample the behavior network, act
// epsilon-greedily, store the transition; every G steps one shared-batch
// gradient event; every T steps a window shift; every D steps a rolling update.
IdqnResult run_idqn(const TrainConfig& config, Environment& env,
                    const SnapshotObserver& on_snapshot = {}, const EventObserver& on_event = {});

// Sequential DQN (one online, one target network) for the K = 1 reduction.
std::vector<std::vector<double>> run_dqn_sequential_trajectory(const TrainConfig& config,
                                                               Environment& env);

// Binary checkpoint of an i-FQI run:
//   magic "IQNCKPT1", u32 format version,
//   config JSON (u64 length + bytes), RNG state (u64 length + text),
//   chain counters (5 x u64), K, architecture, online/target parameter
//   vectors, Adam states, snapshot counter, frozen theta_bar_0 history.
// Integers are little-endian u64, reals little-endian IEEE-754 float64.
struct Checkpoint {
  std::string config_json;
  IfqiRunner::State state;
};

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& checkpoint);
Checkpoint load_checkpoint(const std::filesystem::path& path);

}  // namespace iqn
