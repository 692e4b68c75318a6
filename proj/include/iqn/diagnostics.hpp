#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <limits>
#include <optional>
#include <span>
#include <utility>
#include <vector>

#include "iqn/approximator.hpp"
#include "iqn/chain.hpp"
#include "iqn/envs.hpp"

namespace iqn {

// ---------------------------------------------------------------------------
// Exact oracles
// ---------------------------------------------------------------------------

struct OracleQ {
  std::size_t n_states = 0;
  std::size_t n_actions = 0;
  std::vector<double> q;  // n_states x n_actions, row-major
  std::vector<double> v;  // max_a Q*(s, a)
  double residual = 0.0;  // sup-norm of the last Bellman update
  std::vector<double> residual_history;

  double at(std::size_t s, std::size_t a) const { return q[s * n_actions + a]; }
};

// Iterates the optimal Bellman operator from Q = 0 until the sup-norm change
// is <= tol. Throws ModelError if the model fails TabularMdp::validate().
OracleQ exact_value_iteration(const TabularMdp& mdp, double tol = 1e-10,
                              std::size_t max_sweeps = 1000000);

// Regular car-on-hill grid of `resolution` x `resolution` nodes over
// [-1, 1] x [-3, 3]; node (i, j) has position index i and velocity index j.
struct StateGrid {
  std::size_t resolution = 17;

  std::size_t size() const { return resolution * resolution; }
  double position(std::size_t i) const;
  double velocity(std::size_t j) const;
  CarOnHillState state(std::size_t node) const;
  std::size_t node(std::size_t i, std::size_t j) const { return i * resolution + j; }
  std::size_t nearest(CarOnHillState s) const;
};

// The 17 x 17 evaluation grid with rho uniform over nodes x actions.
struct EvaluationGrid {
  StateGrid grid{17};
  std::size_t n_actions = car_on_hill::kNumActions;
};

// Car-on-hill value iteration on a grid (semi-Lagrangian): each node/action
// is integrated with the true dynamics and V* at the successor is bilinearly
// interpolated from the four surrounding nodes. Terminal successors pay their
// reward and stop.
struct DiscretizedOracle {
  struct Stencil {
    std::array<std::uint32_t, 4> node{};
    std::array<double, 4> weight{};
    bool terminal = false;
  };

  StateGrid grid;
  double gamma = car_on_hill::kDiscount;
  OracleQ oracle;
  std::vector<Stencil> successor;  // node * 2 + a
  std::vector<double> reward;      // node * 2 + a

  double value_at(CarOnHillState s) const;  // interpolated V*
  // V* at the nodes of a coarser grid whose nodes coincide with this one's.
  std::vector<double> values_on(const StateGrid& coarse) const;
  // One-step lookahead on the interpolated V*.
  std::size_t greedy_action(CarOnHillState s) const;
  // Exact discounted return of greedy_action rolled out from each node of
  // `eval`. The interpolated V* is smeared across the discontinuities of the
  // true V*; the rollout returns are what the refinement study compares.
  std::vector<double> policy_values_on(const StateGrid& eval) const;
};

DiscretizedOracle discretized_oracle(std::size_t resolution, double tol = 1e-10);

inline constexpr std::size_t kDefaultOracleResolution = 1025;

// V* on the evaluation grid: policy_values_on at kDefaultOracleResolution.
std::vector<double> car_on_hill_v_star(const EvaluationGrid& grid = {},
                                       std::size_t resolution = kDefaultOracleResolution);
// Q*(s, a) = r + gamma V*(s') on nodes x actions (row-major), V* at the
// off-grid successor again from an exact rollout of the oracle's policy.
std::vector<double> car_on_hill_q_star(const EvaluationGrid& grid = {},
                                       std::size_t resolution = kDefaultOracleResolution);

// Discounted return of a deterministic rollout from every grid node.
// `horizon` defaults to the smallest H with gamma^H < 1e-4.
std::vector<double> greedy_policy_value(const std::function<std::size_t(CarOnHillState)>& policy,
                                        const StateGrid& grid, double gamma,
                                        std::size_t horizon = 0);
std::vector<double> greedy_policy_value(const MlpParams& q_params, const StateGrid& grid,
                                        double gamma, std::size_t horizon = 0);
// Q^pi on nodes x actions: take each action once, then follow `policy`.
std::vector<double> greedy_policy_q_value(const std::function<std::size_t(CarOnHillState)>& policy,
                                          const StateGrid& grid, double gamma,
                                          std::size_t horizon = 0);

std::size_t rollout_horizon(double gamma, double tail = 1e-4);

// Mean absolute gap between two value tables (the L1 norm under uniform rho).
double performance_loss(std::span<const double> star, std::span<const double> pi);
// ||Q* - Q^pi||_{1, rho} with rho uniform over evaluation nodes x actions and
// pi greedy with respect to q_params.
double performance_loss(const MlpParams& q_params, std::span<const double> q_star,
                        const EvaluationGrid& grid, double gamma);

// ---------------------------------------------------------------------------
// Approximation errors and the sufficient condition for CSAE decrease
// ---------------------------------------------------------------------------

// mean_i (empirical_bellman_optimal(prev, t_i) - Q_cur(s_i, a_i))^2.
double approximation_error(const MlpParams& prev, const MlpParams& cur,
                           std::span<const Transition> dataset, double gamma);

// Per-snapshot quantities on a fixed sample of nu: for each j = 0..K the
// Bellman targets built from params[j] and the predictions Q_j(s_i, a_i).
struct SnapshotEvaluation {
  std::uint64_t index = 0;
  std::uint64_t window_shifts = 0;
  std::vector<std::vector<double>> targets;      // [j][i], j = 0..K-1
  std::vector<std::vector<double>> predictions;  // [j][i], j = 1..K stored at j-1

  std::size_t k() const { return predictions.size(); }
};

SnapshotEvaluation evaluate_snapshot(const SnapshotRecord& snap, std::span<const Transition> nu,
                                     double gamma);

// e_k = ||Gamma* Q_{k-1} - Q_k||^2_{2,nu} for k = 1..K.
std::vector<double> approximation_errors(const SnapshotEvaluation& eval);

struct Proposition1Result {
  std::vector<double> before;        // ||G Q_{k-1}^t - Q_k^t||
  std::vector<double> after_cross;   // ||G Q_{k-1}^t - Q_k^{t+1}||
  std::vector<double> displacement;  // ||G Q_{k-1}^{t+1} - G Q_{k-1}^t||
  std::vector<double> errors_t;      // e_k(t), squared
  std::vector<double> errors_t1;     // e_k(t+1), squared
  std::vector<bool> eq5;
  bool eq6 = false;
  double csae_t = 0.0;
  double csae_t1 = 0.0;

  bool all_eq5() const;
};

Proposition1Result proposition1_check(const SnapshotEvaluation& t, const SnapshotEvaluation& t1);
Proposition1Result proposition1_check(const SnapshotRecord& t, const SnapshotRecord& t1,
                                      std::span<const Transition> nu, double gamma);

// One consecutive snapshot pair (t, t+1).
struct DiagnosticsRecord {
  std::uint64_t snapshot_t = 0;
  std::vector<double> approx_error;  // e_k(t)
  double csae = 0.0;                 // CSAE(t) = sum_k e_k(t)
  double csae_next = 0.0;            // CSAE(t+1)
  std::vector<bool> eq5;
  bool eq6 = false;
  std::vector<double> displacement;
  double perf_loss = std::numeric_limits<double>::quiet_NaN();
  bool crosses_shift = false;  // a window shift happened between t and t+1

  bool all_eq5() const;
};

// Builds DiagnosticsRecords from a snapshot stream. Pairs (t, t+1) are
// evaluated for every t divisible by `cadence`.
class DiagnosticsCollector {
 public:
  DiagnosticsCollector(std::vector<Transition> nu, double gamma, std::size_t cadence = 1);

  void observe(const SnapshotRecord& snap);
  SnapshotObserver observer();
  // Restores the collector after a resume: `last` is the most recent
  // snapshot before the checkpoint (null if the checkpoint did not follow a
  // rolling update) and `records` the pairs already closed.
  void prime(const SnapshotRecord* last, std::vector<DiagnosticsRecord> records);

  const std::vector<DiagnosticsRecord>& records() const { return records_; }
  std::vector<DiagnosticsRecord> take() { return std::move(records_); }

 private:
  std::vector<Transition> nu_;
  double gamma_;
  std::size_t cadence_;
  std::optional<SnapshotEvaluation> pending_;
  std::vector<DiagnosticsRecord> records_;
};

struct Table1Metrics {
  double m1 = 0.0;  // % of pairs where CSAE increased
  double m2 = 0.0;  // mean CSAE(t) - CSAE(t+1)
  double m3 = 0.0;  // % of all-displacement pairs where the CSAE does not increase
  double m4 = 0.0;  // % of the summed positive CSAE decreases that occur on all-displacement pairs
  double m4_count = 0.0;  // auxiliary: % of decreasing pairs where every displacement condition holds
  std::size_t pairs = 0;
  std::size_t eq5_pairs = 0;
  std::size_t soundness_violations = 0;  // every displacement condition holds, CSAE increased
};

// Pairs that cross a window shift are skipped (their targets changed by
// construction). Percentages are in [0, 100]; undefined ratios are NaN.
Table1Metrics table1_metrics(std::span<const DiagnosticsRecord> records);

// Counts all-displacement pairs (including shift-crossing ones) and violations.
std::pair<std::size_t, std::size_t> soundness_counts(std::span<const DiagnosticsRecord> records);

// ---------------------------------------------------------------------------
// Equivalence of the summed QN loss and the nu-weighted approximation error
// ---------------------------------------------------------------------------

struct Prop2Sample {
  std::vector<double> key;  // state-action identity used for grouping
  double target_hat = 0.0;  // empirical Bellman target of this sample
  // Exact Gamma Q_bar(s, a) when known; NaN otherwise.
  double true_target = std::numeric_limits<double>::quiet_NaN();
};

struct Prop2Result {
  double spread = 0.0;  // max - min of (sum QN loss - M * ||G Q_bar - Q||^2)
  double scale = 0.0;   // max |sum QN loss| over probes
  double relative() const { return scale > 0.0 ? spread / scale : spread; }
};

// probes[p][i] is Q_{theta_p}(s_i, a_i). With `deterministic`, every
// (s, a) group must carry a single target_hat, which then is Gamma Q_bar.
// Otherwise every sample needs true_target and each group's mean target_hat
// must match it. Violations throw UsageError.
Prop2Result prop2_equivalence_check(std::span<const Prop2Sample> samples,
                                    std::span<const std::vector<double>> probes,
                                    bool deterministic);

// MLP wrapper: targets from `target`, probes drawn He-uniform from `rng`.
// `true_bellman`, when set, gives the exact Gamma Q_bar(s, a).
Prop2Result prop2_equivalence_check(
    const MlpParams& target, std::span<const Transition> dataset, double gamma,
    std::size_t n_probes, Rng& rng,
    const std::function<double(const Transition&)>& true_bellman = {});

// ---------------------------------------------------------------------------
// LQR
// ---------------------------------------------------------------------------

// Q(s, a) = A s^2 + B s a + C a^2
struct LqrQuadratic {
  double a = 0.0;
  double b = 0.0;
  double c = 0.0;

  double operator()(double s, double act) const { return a * s * s + b * s * act + c * act * act; }
};

// One exact optimal Bellman update in coefficient space.
LqrQuadratic lqr_bellman_update(const LqrModel& model, const LqrQuadratic& q);

struct LqrOracle {
  LqrQuadratic q_star;
  std::size_t iterations = 0;
  double last_change = 0.0;
};

LqrOracle lqr_oracle_qstar(const LqrModel& model, double tol = 1e-12,
                           std::size_t max_iterations = 100000);

struct LqrSample {
  double state = 0.0;
  double action = 0.0;
};

// Uniform (s, a) grid over [-1, 1]^2 with `per_axis` points per axis.
std::vector<LqrSample> lqr_grid(std::size_t per_axis = 21);

struct LqrTrajectory {
  std::size_t k = 1;
  std::vector<QuadraticQParams> path;  // last network after each step, path[0] = init
  std::vector<double> distance;        // nu-weighted L2 distance of path[i] to Q*
  std::vector<std::vector<QuadraticQParams>> chain_path;  // all networks per step
  QuadraticQParams final_params;
  double final_distance = 0.0;
};

double lqr_distance(const QuadraticQParams& p, const LqrQuadratic& q_star,
                    std::span<const LqrSample> nu);

// K = 1 is QN and K = 2 is i-QN (rolling update every step, no window
// shift) in the projected (M, G) family, trained with Adam on the mean
// squared TD error over nu.
LqrTrajectory lqr_trajectory_experiment(const LqrModel& model, std::size_t k,
                                        QuadraticQParams init, std::size_t steps = 30,
                                        double lr = 0.05, std::span<const LqrSample> nu = {});

Prop2Result prop2_equivalence_check_lqr(const LqrModel& model, const QuadraticQParams& target,
                                        std::span<const LqrSample> nu, std::size_t n_probes,
                                        Rng& rng);

// ---------------------------------------------------------------------------
// Aggregation across seeds
// ---------------------------------------------------------------------------

// Mean after dropping floor(n/4) lowest and floor(n/4) highest scores.
double iqm(std::span<const double> scores);

// Percentile bootstrap of the IQM over seed resamples.
std::pair<double, double> bootstrap_ci(std::span<const double> scores, std::size_t n_resamples,
                                       double level, Rng& rng);

// ---------------------------------------------------------------------------
// Bellman-iteration curves for the i-FQI study
// ---------------------------------------------------------------------------

struct IterationCurves {
  std::vector<double> perf_loss;     // greedy policy of Q_k, k = 0..N
  std::vector<double> approx_error;  // e_k for k = 1..N stored at k-1
  std::vector<double> error_sum;     // running sum of approx_error
};

IterationCurves iteration_curves(std::span<const MlpParams> iterates,
                                 std::span<const Transition> nu, std::span<const double> q_star,
                                 const EvaluationGrid& grid, double gamma);

// Diagnostics CSV: snapshot_t,k,approx_error,csae,eq5_holds,eq6_holds,
// displacement,perf_loss,csae_next,crosses_shift. One row per (t, k) and a
// summary row with k = -1 (approx_error and displacement left empty).
void write_diagnostics_csv(const std::filesystem::path& path,
                           std::span<const DiagnosticsRecord> records);

}  // namespace iqn
