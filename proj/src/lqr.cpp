#include <algorithm>
#include <cmath>
#include <string>

#include "iqn/diagnostics.hpp"
#include "iqn/errors.hpp"

namespace iqn {

namespace {

// max_a' Q(s', a') = P s'^2 for the quadratic Q.
double greedy_curvature(const LqrQuadratic& q) {
  if (q.c < 0.0) return q.a - q.b * q.b / (4.0 * q.c);
  if (q.c == 0.0 && q.b == 0.0) return q.a;
  throw ModelError("LQR: Q is unbounded in the action (C >= 0); value iteration diverges");
}

}  // namespace

LqrQuadratic lqr_bellman_update(const LqrModel& model, const LqrQuadratic& q) {
  const double p = model.discount * greedy_curvature(q);
  return {model.q + p * model.a * model.a, model.c + 2.0 * p * model.a * model.b,
          model.r_a + p * model.b * model.b};
}

LqrOracle lqr_oracle_qstar(const LqrModel& model, double tol, std::size_t max_iterations) {
  if (!(model.discount >= 0.0 && model.discount < 1.0)) {
    throw ModelError("LQR: discount must be in [0, 1)");
  }
  LqrOracle out;
  LqrQuadratic q;
  for (std::size_t it = 1; it <= max_iterations; ++it) {
    const auto next = lqr_bellman_update(model, q);
    const double change =
        std::max({std::abs(next.a - q.a), std::abs(next.b - q.b), std::abs(next.c - q.c)});
    q = next;
    out.iterations = it;
    out.last_change = change;
    if (!std::isfinite(change)) throw ModelError("LQR: value iteration produced non-finite values");
    if (change <= tol) {
      if (q.c >= 0.0) throw ModelError("LQR: converged Q* is not concave in the action");
      out.q_star = q;
      return out;
    }
  }
  throw ModelError("LQR: value iteration did not converge in " + std::to_string(max_iterations) +
                   " iterations");
}

void LqrModel::validate() const {
  const auto oracle = lqr_oracle_qstar(*this);
  const auto& q = oracle.q_star;
  const double gain = a + b * (-q.b / (2.0 * q.c));
  if (!(discount * gain * gain < 1.0)) {
    throw ModelError("LQR: discount * closed-loop gain^2 = " +
                     std::to_string(discount * gain * gain) + " must be < 1");
  }
}

std::vector<LqrSample> lqr_grid(std::size_t per_axis) {
  if (per_axis < 2) throw InputError("lqr_grid: need at least two points per axis");
  std::vector<LqrSample> out;
  out.reserve(per_axis * per_axis);
  for (std::size_t i = 0; i < per_axis; ++i) {
    for (std::size_t j = 0; j < per_axis; ++j) {
      const double s = -1.0 + 2.0 * static_cast<double>(i) / static_cast<double>(per_axis - 1);
      const double act = -1.0 + 2.0 * static_cast<double>(j) / static_cast<double>(per_axis - 1);
      out.push_back({s, act});
    }
  }
  return out;
}

double lqr_distance(const QuadraticQParams& p, const LqrQuadratic& q_star,
                    std::span<const LqrSample> nu) {
  double total = 0.0;
  for (const auto& x : nu) {
    const double d = q_star(x.state, x.action) - quadratic_q_forward(p, x.state, x.action);
    total += d * d;
  }
  return std::sqrt(total / static_cast<double>(nu.size()));
}

namespace {

double quadratic_target(const LqrModel& model, const QuadraticQParams& target, const LqrSample& x) {
  const auto step = lqr_step(model, x.state, x.action);
  // M < 0 after projection, so the greedy next action is 0.
  return step.reward + model.discount * target.g * step.next * step.next;
}

std::array<double, 2> quadratic_loss_gradient(const LqrModel& model, const QuadraticQParams& online,
                                              const QuadraticQParams& target,
                                              std::span<const LqrSample> nu) {
  std::array<double, 2> grad{0.0, 0.0};
  for (const auto& x : nu) {
    const double err = quadratic_q_forward(online, x.state, x.action) - quadratic_target(model, target, x);
    const auto dq = quadratic_q_gradient(x.state, x.action);
    grad[0] += 2.0 * err * dq[0];
    grad[1] += 2.0 * err * dq[1];
  }
  const double n = static_cast<double>(nu.size());
  return {grad[0] / n, grad[1] / n};
}

}  // namespace

LqrTrajectory lqr_trajectory_experiment(const LqrModel& model, std::size_t k,
                                        QuadraticQParams init, std::size_t steps, double lr,
                                        std::span<const LqrSample> nu) {
  if (k < 1) throw InputError("lqr_trajectory_experiment: K must be >= 1");
  const auto default_nu = lqr_grid();
  if (nu.empty()) nu = default_nu;
  const auto q_star = lqr_oracle_qstar(model).q_star;

  init = project_quadratic(init);
  std::vector<QuadraticQParams> target(k, init);
  std::vector<QuadraticQParams> online(k, init);
  AdamConfig cfg;
  cfg.lr = lr;
  std::vector<AdamState> adam(k, AdamState(cfg, 2));

  LqrTrajectory out;
  out.k = k;
  auto record = [&] {
    out.path.push_back(online.back());
    out.distance.push_back(lqr_distance(online.back(), q_star, nu));
    out.chain_path.push_back(online);
  };
  record();
  for (std::size_t step = 0; step < steps; ++step) {
    std::vector<std::array<double, 2>> grads(k);
    for (std::size_t i = 0; i < k; ++i) {
      grads[i] = quadratic_loss_gradient(model, online[i], target[i], nu);
    }
    for (std::size_t i = 0; i < k; ++i) {
      std::array<double, 2> theta{online[i].m, online[i].g};
      adam_step(theta, grads[i], adam[i]);
      online[i] = project_quadratic({theta[0], theta[1]});
    }
    for (std::size_t i = 1; i < k; ++i) target[i] = online[i - 1];
    record();
  }
  out.final_params = online.back();
  out.final_distance = out.distance.back();
  return out;
}

Prop2Result prop2_equivalence_check_lqr(const LqrModel& model, const QuadraticQParams& target,
                                        std::span<const LqrSample> nu, std::size_t n_probes,
                                        Rng& rng) {
  std::vector<Prop2Sample> samples;
  samples.reserve(nu.size());
  for (const auto& x : nu) {
    samples.push_back({{x.state, x.action}, quadratic_target(model, target, x)});
  }
  std::uniform_real_distribution<double> m_dist(-2.0, 0.0);
  std::uniform_real_distribution<double> g_dist(-kQuadraticGBound, kQuadraticGBound);
  std::vector<std::vector<double>> probes;
  for (std::size_t p = 0; p < n_probes; ++p) {
    const QuadraticQParams theta{m_dist(rng), g_dist(rng)};
    std::vector<double> q;
    q.reserve(nu.size());
    for (const auto& x : nu) q.push_back(quadratic_q_forward(theta, x.state, x.action));
    probes.push_back(std::move(q));
  }
  return prop2_equivalence_check(samples, probes, true);
}

}  // namespace iqn
