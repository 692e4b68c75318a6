#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <utility>

#include "iqn/diagnostics.hpp"
#include "iqn/errors.hpp"

namespace iqn {

OracleQ exact_value_iteration(const TabularMdp& mdp, double tol, std::size_t max_sweeps) {
  mdp.validate();
  const std::size_t ns = mdp.n_states;
  const std::size_t na = mdp.n_actions;
  OracleQ out;
  out.n_states = ns;
  out.n_actions = na;
  out.q.assign(ns * na, 0.0);
  out.v.assign(ns, 0.0);
  std::vector<double> next(ns * na);
  for (std::size_t sweep = 0; sweep < max_sweeps; ++sweep) {
    double change = 0.0;
    for (std::size_t s = 0; s < ns; ++s) {
      for (std::size_t a = 0; a < na; ++a) {
        const auto& row = mdp.transitions[s][a];
        double backup = 0.0;
        for (std::size_t s2 = 0; s2 < ns; ++s2) {
          if (row[s2] != 0.0) backup += row[s2] * out.v[s2];
        }
        const double value = mdp.rewards[s][a] + mdp.discount * backup;
        change = std::max(change, std::abs(value - out.q[s * na + a]));
        next[s * na + a] = value;
      }
    }
    out.q.swap(next);
    for (std::size_t s = 0; s < ns; ++s) {
      out.v[s] = *std::max_element(out.q.begin() + static_cast<std::ptrdiff_t>(s * na),
                                   out.q.begin() + static_cast<std::ptrdiff_t>((s + 1) * na));
    }
    out.residual = change;
    out.residual_history.push_back(change);
    if (change <= tol) return out;
  }
  throw ModelError("exact_value_iteration: no convergence within the sweep limit");
}

double StateGrid::position(std::size_t i) const {
  return -car_on_hill::kMaxPosition +
         2.0 * car_on_hill::kMaxPosition * static_cast<double>(i) /
             static_cast<double>(resolution - 1);
}

double StateGrid::velocity(std::size_t j) const {
  return -car_on_hill::kMaxSpeed +
         2.0 * car_on_hill::kMaxSpeed * static_cast<double>(j) / static_cast<double>(resolution - 1);
}

CarOnHillState StateGrid::state(std::size_t node) const {
  return {position(node / resolution), velocity(node % resolution)};
}

std::size_t StateGrid::nearest(CarOnHillState s) const {
  auto snap = [&](double x, double bound) {
    const double u = (x + bound) / (2.0 * bound) * static_cast<double>(resolution - 1);
    const double r = std::clamp(std::round(u), 0.0, static_cast<double>(resolution - 1));
    return static_cast<std::size_t>(r);
  };
  return node(snap(s.position, car_on_hill::kMaxPosition), snap(s.velocity, car_on_hill::kMaxSpeed));
}

namespace {

DiscretizedOracle::Stencil bilinear(const StateGrid& grid, CarOnHillState s) {
  const double last = static_cast<double>(grid.resolution - 1);
  auto locate = [&](double x, double bound) {
    const double u = std::clamp((x + bound) / (2.0 * bound) * last, 0.0, last);
    const double cell = std::min(std::floor(u), last - 1.0);
    return std::pair{static_cast<std::size_t>(cell), u - cell};
  };
  const auto [i, fp] = locate(s.position, car_on_hill::kMaxPosition);
  const auto [j, fv] = locate(s.velocity, car_on_hill::kMaxSpeed);
  DiscretizedOracle::Stencil st;
  st.node = {static_cast<std::uint32_t>(grid.node(i, j)), static_cast<std::uint32_t>(grid.node(i + 1, j)),
             static_cast<std::uint32_t>(grid.node(i, j + 1)),
             static_cast<std::uint32_t>(grid.node(i + 1, j + 1))};
  st.weight = {(1 - fp) * (1 - fv), fp * (1 - fv), (1 - fp) * fv, fp * fv};
  return st;
}

double interpolate(const DiscretizedOracle::Stencil& st, std::span<const double> v) {
  double x = 0.0;
  for (int c = 0; c < 4; ++c) x += st.weight[c] * v[st.node[c]];
  return x;
}

}  // namespace

DiscretizedOracle discretized_oracle(std::size_t resolution, double tol) {
  if (resolution < 17) throw InputError("discretized_oracle: resolution must be >= 17");
  DiscretizedOracle d;
  d.grid.resolution = resolution;
  const std::size_t nodes = d.grid.size();
  constexpr std::size_t na = car_on_hill::kNumActions;
  d.successor.resize(nodes * na);
  d.reward.assign(nodes * na, 0.0);
  for (std::size_t n = 0; n < nodes; ++n) {
    const auto s = d.grid.state(n);
    for (std::size_t a = 0; a < na; ++a) {
      auto& st = d.successor[n * na + a];
      const auto step = car_on_hill_step(s, a);
      d.reward[n * na + a] = step.reward;
      if (step.terminal) {
        st.terminal = true;
      } else {
        st = bilinear(d.grid, step.next);
      }
    }
  }

  OracleQ& o = d.oracle;
  o.n_states = nodes;
  o.n_actions = na;
  o.q.assign(nodes * na, 0.0);
  o.v.assign(nodes, 0.0);
  // Gauss-Seidel sweeps: V is updated in place, which converges in fewer
  // sweeps to the same fixed point.
  for (std::size_t sweep = 0; sweep < 100000; ++sweep) {
    double change = 0.0;
    for (std::size_t n = 0; n < nodes; ++n) {
      for (std::size_t a = 0; a < na; ++a) {
        const std::size_t idx = n * na + a;
        const auto& st = d.successor[idx];
        const double value = d.reward[idx] + (st.terminal ? 0.0 : d.gamma * interpolate(st, o.v));
        change = std::max(change, std::abs(value - o.q[idx]));
        o.q[idx] = value;
      }
      o.v[n] = std::max(o.q[n * na], o.q[n * na + 1]);
    }
    o.residual = change;
    o.residual_history.push_back(change);
    if (change <= tol) return d;
  }
  throw ModelError("discretized_oracle: no convergence");
}

double DiscretizedOracle::value_at(CarOnHillState s) const {
  return interpolate(bilinear(grid, s), oracle.v);
}

std::vector<double> DiscretizedOracle::values_on(const StateGrid& coarse) const {
  const std::size_t fine = grid.resolution - 1;
  const std::size_t c = coarse.resolution - 1;
  if (c == 0 || fine % c != 0) {
    throw InputError("DiscretizedOracle::values_on: grids are not nested");
  }
  const std::size_t stride = fine / c;
  std::vector<double> out(coarse.size());
  for (std::size_t i = 0; i < coarse.resolution; ++i) {
    for (std::size_t j = 0; j < coarse.resolution; ++j) {
      out[coarse.node(i, j)] = oracle.v[grid.node(i * stride, j * stride)];
    }
  }
  return out;
}

std::size_t DiscretizedOracle::greedy_action(CarOnHillState s) const {
  double best = -std::numeric_limits<double>::infinity();
  std::size_t best_a = 0;
  for (std::size_t a = 0; a < car_on_hill::kNumActions; ++a) {
    const auto step = car_on_hill_step(s, a);
    const double q = step.reward + (step.terminal ? 0.0 : gamma * value_at(step.next));
    if (q > best) {
      best = q;
      best_a = a;
    }
  }
  return best_a;
}

std::vector<double> DiscretizedOracle::policy_values_on(const StateGrid& eval) const {
  return greedy_policy_value([this](CarOnHillState s) { return greedy_action(s); }, eval, gamma);
}

std::vector<double> car_on_hill_v_star(const EvaluationGrid& grid, std::size_t resolution) {
  return discretized_oracle(resolution).policy_values_on(grid.grid);
}

std::vector<double> car_on_hill_q_star(const EvaluationGrid& grid, std::size_t resolution) {
  const auto oracle = discretized_oracle(resolution);
  return greedy_policy_q_value([&](CarOnHillState s) { return oracle.greedy_action(s); },
                               grid.grid, oracle.gamma);
}

std::size_t rollout_horizon(double gamma, double tail) {
  if (gamma <= 0.0) return 1;
  std::size_t h = 0;
  for (double w = 1.0; w >= tail; w *= gamma) ++h;
  return h;
}

namespace {

double rollout_return(const std::function<std::size_t(CarOnHillState)>& policy, CarOnHillState s,
                      double gamma, std::size_t horizon) {
  if (car_on_hill::is_terminal(s)) return 0.0;
  double value = 0.0;
  double discount = 1.0;
  for (std::size_t h = 0; h < horizon; ++h) {
    const auto step = car_on_hill_step(s, policy(s));
    value += discount * step.reward;
    if (step.terminal) break;
    discount *= gamma;
    s = step.next;
  }
  return value;
}

std::function<std::size_t(CarOnHillState)> greedy_of(const MlpParams& q_params) {
  return [&q_params](CarOnHillState s) {
    const double x[2] = {s.position, s.velocity};
    return argmax(mlp_forward(q_params, x));
  };
}

}  // namespace

std::vector<double> greedy_policy_value(const std::function<std::size_t(CarOnHillState)>& policy,
                                        const StateGrid& grid, double gamma, std::size_t horizon) {
  if (horizon == 0) horizon = rollout_horizon(gamma);
  std::vector<double> values(grid.size(), 0.0);
  for (std::size_t n = 0; n < grid.size(); ++n) {
    values[n] = rollout_return(policy, grid.state(n), gamma, horizon);
  }
  return values;
}

std::vector<double> greedy_policy_value(const MlpParams& q_params, const StateGrid& grid,
                                        double gamma, std::size_t horizon) {
  return greedy_policy_value(greedy_of(q_params), grid, gamma, horizon);
}

std::vector<double> greedy_policy_q_value(const std::function<std::size_t(CarOnHillState)>& policy,
                                          const StateGrid& grid, double gamma,
                                          std::size_t horizon) {
  if (horizon == 0) horizon = rollout_horizon(gamma);
  constexpr std::size_t na = car_on_hill::kNumActions;
  std::vector<double> values(grid.size() * na, 0.0);
  for (std::size_t n = 0; n < grid.size(); ++n) {
    const auto s = grid.state(n);
    if (car_on_hill::is_terminal(s)) continue;
    for (std::size_t a = 0; a < na; ++a) {
      const auto step = car_on_hill_step(s, a);
      values[n * na + a] =
          step.reward + (step.terminal ? 0.0 : gamma * rollout_return(policy, step.next, gamma, horizon));
    }
  }
  return values;
}

double performance_loss(std::span<const double> star, std::span<const double> pi) {
  if (star.size() != pi.size() || star.empty()) {
    throw InputError("performance_loss: value tables differ in size");
  }
  double total = 0.0;
  for (std::size_t i = 0; i < star.size(); ++i) total += std::abs(star[i] - pi[i]);
  return total / static_cast<double>(star.size());
}

double performance_loss(const MlpParams& q_params, std::span<const double> q_star,
                        const EvaluationGrid& grid, double gamma) {
  return performance_loss(q_star, greedy_policy_q_value(greedy_of(q_params), grid.grid, gamma));
}

}  // namespace iqn
