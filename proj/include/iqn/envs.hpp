#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <random>
#include <span>
#include <vector>

namespace iqn {

using Rng = std::mt19937_64;

// One (s, a, r, s', terminal) sample. Terminal transitions are never
// bootstrapped: the empirical Bellman target is r alone.
struct Transition {
  std::vector<double> state;
  std::size_t action = 0;
  double reward = 0.0;
  std::vector<double> next_state;
  bool terminal = false;

  friend bool operator==(const Transition&, const Transition&) = default;
};

// ---------------------------------------------------------------------------
// Car-on-hill.
//
// Unit mass, g = 9.81, hill H(p) = p^2 + p for p < 0 and p / sqrt(1 + 5p^2)
// otherwise. Actions apply -4 N (0) or +4 N (1) for 0.1 s, integrated with
// 10 RK4 substeps. Reward -1 when p < -1 or |v| > 3, +1 when p > 1 and
// |v| <= 3, else 0; the episode ends on any non-zero reward.
// ---------------------------------------------------------------------------

struct CarOnHillState {
  double position = 0.0;
  double velocity = 0.0;

  friend bool operator==(const CarOnHillState&, const CarOnHillState&) = default;
};

namespace car_on_hill {
inline constexpr double kGravity = 9.81;
inline constexpr double kMass = 1.0;
inline constexpr double kForce = 4.0;
inline constexpr double kTimeStep = 0.1;
inline constexpr int kSubsteps = 10;
inline constexpr double kDiscount = 0.95;
inline constexpr double kMaxPosition = 1.0;
inline constexpr double kMaxSpeed = 3.0;
inline constexpr std::size_t kNumActions = 2;
inline constexpr CarOnHillState kInitialState{-0.5, 0.0};

double hill_slope(double p);      // H'(p)
double hill_curvature(double p);  // H''(p)

// (dp/dt, dv/dt) under a constant horizontal force.
std::array<double, 2> derivatives(CarOnHillState s, double force);

// Integrates the ODE for `duration` seconds with `substeps` RK4 steps.
CarOnHillState integrate(CarOnHillState s, double force, double duration = kTimeStep,
                         int substeps = kSubsteps);

// Reward of arriving in `s`; non-zero means terminal.
double reward(CarOnHillState s);
bool is_terminal(CarOnHillState s);
}  // namespace car_on_hill

struct CarOnHillStep {
  CarOnHillState next;
  double reward = 0.0;
  bool terminal = false;
};

CarOnHillStep car_on_hill_step(CarOnHillState state, std::size_t action);

// ---------------------------------------------------------------------------
// Scalar LQR: s' = 0.8 s - 0.9 a, r = 0.5 s^2 + 0.4 s a - 0.5 a^2.
// ---------------------------------------------------------------------------

struct LqrModel {
  double a = 0.8;
  double b = -0.9;
  double q = 0.5;
  double c = 0.4;
  double r_a = -0.5;
  double discount = 0.5;

  // Throws ModelError unless the coefficient-space value iteration of the
  // optimal Q-function converges (see diagnostics::lqr_oracle_qstar).
  void validate() const;
};

struct LqrStep {
  double next = 0.0;
  double reward = 0.0;
};

LqrStep lqr_step(const LqrModel& model, double state, double action);

// ---------------------------------------------------------------------------
// Tabular MDPs.
// ---------------------------------------------------------------------------

struct TabularMdp {
  std::size_t n_states = 0;
  std::size_t n_actions = 0;
  // transitions[s][a] is a probability vector over next states.
  std::vector<std::vector<std::vector<double>>> transitions;
  std::vector<std::vector<double>> rewards;  // R[s][a]
  // Absorbing states end an episode when entered.
  std::vector<bool> terminal;
  double discount = 0.9;

  // Throws ModelError on bad shapes, rows not summing to 1 within 1e-12,
  // or discount outside [0, 1).
  void validate() const;

  // Deterministic 1-D chain of `n` states, actions {left, right}. Moving
  // right out of state n-2 into n-1 pays `goal_reward` and terminates.
  static TabularMdp chain(std::size_t n, double discount, double goal_reward = 1.0);
};

struct TabularStep {
  std::size_t next = 0;
  double reward = 0.0;
};

TabularStep tabular_step(const TabularMdp& mdp, std::size_t state, std::size_t action, Rng& rng);

std::vector<double> one_hot(std::size_t index, std::size_t size);

// ---------------------------------------------------------------------------
// Online environments (observation vectors, discrete actions) for i-DQN.
// ---------------------------------------------------------------------------

struct EnvStep {
  std::vector<double> observation;
  double reward = 0.0;
  bool terminal = false;   // true absorbing end: no bootstrap
  bool truncated = false;  // time limit hit: episode restarts, still bootstrapped
};

class Environment {
 public:
  virtual ~Environment() = default;
  virtual std::size_t observation_dim() const = 0;
  virtual std::size_t num_actions() const = 0;
  virtual double discount() const = 0;
  virtual std::vector<double> reset(Rng& rng) = 0;
  virtual EnvStep step(std::size_t action, Rng& rng) = 0;
};

class CarOnHillEnv final : public Environment {
 public:
  explicit CarOnHillEnv(CarOnHillState initial = car_on_hill::kInitialState,
                        std::size_t max_episode_steps = 0)
      : initial_(initial), max_steps_(max_episode_steps) {}

  std::size_t observation_dim() const override { return 2; }
  std::size_t num_actions() const override { return car_on_hill::kNumActions; }
  double discount() const override { return car_on_hill::kDiscount; }
  std::vector<double> reset(Rng& rng) override;
  EnvStep step(std::size_t action, Rng& rng) override;

 private:
  CarOnHillState initial_;
  CarOnHillState state_;
  std::size_t max_steps_;
  std::size_t steps_ = 0;
};

// Observations are one-hot encodings of the state index.
class TabularEnv final : public Environment {
 public:
  TabularEnv(TabularMdp mdp, std::size_t start_state, std::size_t max_episode_steps);

  std::size_t observation_dim() const override { return mdp_.n_states; }
  std::size_t num_actions() const override { return mdp_.n_actions; }
  double discount() const override { return mdp_.discount; }
  std::vector<double> reset(Rng& rng) override;
  EnvStep step(std::size_t action, Rng& rng) override;

  const TabularMdp& mdp() const { return mdp_; }

 private:
  TabularMdp mdp_;
  std::size_t start_;
  std::size_t max_steps_;
  std::size_t state_ = 0;
  std::size_t steps_ = 0;
};

// ---------------------------------------------------------------------------
// Offline datasets.
// ---------------------------------------------------------------------------

// Uniform-random car-on-hill dataset: episodes start at `initial` and restart
// after every terminal transition. Exactly `n_samples` transitions.
std::vector<Transition> collect_uniform_dataset(std::size_t n_samples, CarOnHillState initial,
                                                std::uint64_t seed);

// Same contract for any online environment.
std::vector<Transition> collect_uniform_dataset(Environment& env, std::size_t n_samples,
                                                std::uint64_t seed);

// CSV: header `p,v,a,r,p_next,v_next,terminal`, one row per transition,
// values printed with 17 significant digits. Requires 2-d states.
void write_dataset_csv(const std::filesystem::path& path, std::span<const Transition> data);
std::vector<Transition> read_dataset_csv(const std::filesystem::path& path);

// Binary: 8-byte magic "IQNDS001", uint64 row count, then per row seven
// little-endian float64 values in CSV column order (terminal as 0.0 / 1.0).
void write_dataset_binary(const std::filesystem::path& path, std::span<const Transition> data);
std::vector<Transition> read_dataset_binary(const std::filesystem::path& path);

}  // namespace iqn
