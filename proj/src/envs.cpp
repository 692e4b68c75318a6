#include "iqn/envs.hpp"

#include <array>
#include <bit>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <iomanip>
#include <sstream>
#include <string>

#include "iqn/diagnostics.hpp"
#include "iqn/errors.hpp"

namespace iqn {

namespace car_on_hill {

double hill_slope(double p) {
  if (p < 0.0) return 2.0 * p + 1.0;
  return 1.0 / std::pow(1.0 + 5.0 * p * p, 1.5);
}

double hill_curvature(double p) {
  if (p < 0.0) return 2.0;
  return -15.0 * p / std::pow(1.0 + 5.0 * p * p, 2.5);
}

std::array<double, 2> derivatives(CarOnHillState s, double force) {
  const double h1 = hill_slope(s.position);
  const double h2 = hill_curvature(s.position);
  const double denom = 1.0 + h1 * h1;
  const double acc = force / (kMass * denom) - kGravity * h1 / denom -
                     s.velocity * s.velocity * h1 * h2 / denom;
  return {s.velocity, acc};
}

CarOnHillState integrate(CarOnHillState s, double force, double duration, int substeps) {
  const double h = duration / substeps;
  for (int i = 0; i < substeps; ++i) {
    const auto k1 = derivatives(s, force);
    const auto k2 = derivatives({s.position + 0.5 * h * k1[0], s.velocity + 0.5 * h * k1[1]}, force);
    const auto k3 = derivatives({s.position + 0.5 * h * k2[0], s.velocity + 0.5 * h * k2[1]}, force);
    const auto k4 = derivatives({s.position + h * k3[0], s.velocity + h * k3[1]}, force);
    s.position += h / 6.0 * (k1[0] + 2.0 * k2[0] + 2.0 * k3[0] + k4[0]);
    s.velocity += h / 6.0 * (k1[1] + 2.0 * k2[1] + 2.0 * k3[1] + k4[1]);
  }
  return s;
}

double reward(CarOnHillState s) {
  if (s.position < -kMaxPosition || std::abs(s.velocity) > kMaxSpeed) return -1.0;
  if (s.position > kMaxPosition) return 1.0;
  return 0.0;
}

bool is_terminal(CarOnHillState s) { return reward(s) != 0.0; }

}  // namespace car_on_hill

CarOnHillStep car_on_hill_step(CarOnHillState state, std::size_t action) {
  if (car_on_hill::is_terminal(state)) throw UsageError("car_on_hill_step: state is terminal");
  if (action >= car_on_hill::kNumActions) throw InputError("car_on_hill_step: invalid action");
  const double force = action == 0 ? -car_on_hill::kForce : car_on_hill::kForce;
  CarOnHillStep out;
  out.next = car_on_hill::integrate(state, force);
  out.reward = car_on_hill::reward(out.next);
  out.terminal = out.reward != 0.0;
  return out;
}

LqrStep lqr_step(const LqrModel& model, double state, double action) {
  return {model.a * state + model.b * action,
          model.q * state * state + model.c * state * action + model.r_a * action * action};
}

void TabularMdp::validate() const {
  if (!(discount >= 0.0 && discount < 1.0)) throw ModelError("TabularMdp: discount must be in [0, 1)");
  if (n_states == 0 || n_actions == 0) throw ModelError("TabularMdp: empty state or action set");
  if (transitions.size() != n_states || rewards.size() != n_states ||
      (!terminal.empty() && terminal.size() != n_states)) {
    throw ModelError("TabularMdp: table sizes do not match n_states");
  }
  for (std::size_t s = 0; s < n_states; ++s) {
    if (transitions[s].size() != n_actions || rewards[s].size() != n_actions) {
      throw ModelError("TabularMdp: table sizes do not match n_actions");
    }
    for (std::size_t a = 0; a < n_actions; ++a) {
      const auto& row = transitions[s][a];
      if (row.size() != n_states) throw ModelError("TabularMdp: transition row has wrong length");
      double total = 0.0;
      for (double p : row) {
        if (p < 0.0) throw ModelError("TabularMdp: negative transition probability");
        total += p;
      }
      if (std::abs(total - 1.0) > 1e-12) {
        throw ModelError("TabularMdp: P[" + std::to_string(s) + "][" + std::to_string(a) +
                         "] sums to " + std::to_string(total));
      }
    }
  }
}

TabularMdp TabularMdp::chain(std::size_t n, double discount, double goal_reward) {
  if (n < 2) throw InputError("TabularMdp::chain: need at least 2 states");
  TabularMdp mdp;
  mdp.n_states = n;
  mdp.n_actions = 2;
  mdp.discount = discount;
  mdp.transitions.assign(n, std::vector<std::vector<double>>(2, std::vector<double>(n, 0.0)));
  mdp.rewards.assign(n, std::vector<double>(2, 0.0));
  mdp.terminal.assign(n, false);
  mdp.terminal[n - 1] = true;
  for (std::size_t s = 0; s < n; ++s) {
    if (s == n - 1) {
      mdp.transitions[s][0][s] = 1.0;
      mdp.transitions[s][1][s] = 1.0;
      continue;
    }
    mdp.transitions[s][0][s == 0 ? 0 : s - 1] = 1.0;
    mdp.transitions[s][1][s + 1] = 1.0;
    if (s + 1 == n - 1) mdp.rewards[s][1] = goal_reward;
  }
  mdp.validate();
  return mdp;
}

TabularStep tabular_step(const TabularMdp& mdp, std::size_t state, std::size_t action, Rng& rng) {
  if (state >= mdp.n_states || action >= mdp.n_actions) {
    throw InputError("tabular_step: index out of range");
  }
  const auto& row = mdp.transitions[state][action];
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  const double u = unit(rng);
  double cumulative = 0.0;
  std::size_t next = mdp.n_states - 1;
  for (std::size_t j = 0; j < mdp.n_states; ++j) {
    cumulative += row[j];
    if (u < cumulative) {
      next = j;
      break;
    }
  }
  // Guard against rounding in the cumulative sum landing on a zero entry.
  while (row[next] == 0.0 && next > 0) --next;
  return {next, mdp.rewards[state][action]};
}

std::vector<double> one_hot(std::size_t index, std::size_t size) {
  if (index >= size) throw InputError("one_hot: index out of range");
  std::vector<double> v(size, 0.0);
  v[index] = 1.0;
  return v;
}

std::vector<double> CarOnHillEnv::reset(Rng&) {
  state_ = initial_;
  steps_ = 0;
  return {state_.position, state_.velocity};
}

EnvStep CarOnHillEnv::step(std::size_t action, Rng&) {
  const auto s = car_on_hill_step(state_, action);
  state_ = s.next;
  ++steps_;
  EnvStep out;
  out.observation = {state_.position, state_.velocity};
  out.reward = s.reward;
  out.terminal = s.terminal;
  out.truncated = !s.terminal && max_steps_ > 0 && steps_ >= max_steps_;
  return out;
}

TabularEnv::TabularEnv(TabularMdp mdp, std::size_t start_state, std::size_t max_episode_steps)
    : mdp_(std::move(mdp)), start_(start_state), max_steps_(max_episode_steps) {
  mdp_.validate();
  if (start_ >= mdp_.n_states) throw InputError("TabularEnv: start state out of range");
}

std::vector<double> TabularEnv::reset(Rng&) {
  state_ = start_;
  steps_ = 0;
  return one_hot(state_, mdp_.n_states);
}

EnvStep TabularEnv::step(std::size_t action, Rng& rng) {
  const auto s = tabular_step(mdp_, state_, action, rng);
  state_ = s.next;
  ++steps_;
  EnvStep out;
  out.observation = one_hot(state_, mdp_.n_states);
  out.reward = s.reward;
  out.terminal = !mdp_.terminal.empty() && mdp_.terminal[state_];
  out.truncated = !out.terminal && max_steps_ > 0 && steps_ >= max_steps_;
  return out;
}

std::vector<Transition> collect_uniform_dataset(Environment& env, std::size_t n_samples,
                                                std::uint64_t seed) {
  if (n_samples == 0) throw InputError("collect_uniform_dataset: n_samples must be >= 1");
  Rng rng(seed);
  std::uniform_int_distribution<std::size_t> pick(0, env.num_actions() - 1);
  std::vector<Transition> data;
  data.reserve(n_samples);
  auto obs = env.reset(rng);
  while (data.size() < n_samples) {
    const std::size_t a = pick(rng);
    auto step = env.step(a, rng);
    data.push_back({obs, a, step.reward, step.observation, step.terminal});
    if (step.terminal || step.truncated) {
      obs = env.reset(rng);
    } else {
      obs = std::move(step.observation);
    }
  }
  return data;
}

std::vector<Transition> collect_uniform_dataset(std::size_t n_samples, CarOnHillState initial,
                                                std::uint64_t seed) {
  CarOnHillEnv env(initial);
  return collect_uniform_dataset(env, n_samples, seed);
}

namespace {

void require_2d(std::span<const Transition> data) {
  for (const auto& t : data) {
    if (t.state.size() != 2 || t.next_state.size() != 2) {
      throw InputError("dataset serialization requires 2-d states");
    }
  }
}

void put_f64(std::ostream& out, double x) {
  const auto bits = std::bit_cast<std::uint64_t>(x);
  std::array<char, 8> bytes;
  for (int i = 0; i < 8; ++i) bytes[i] = static_cast<char>((bits >> (8 * i)) & 0xffu);
  out.write(bytes.data(), 8);
}

void put_u64(std::ostream& out, std::uint64_t bits) {
  std::array<char, 8> bytes;
  for (int i = 0; i < 8; ++i) bytes[i] = static_cast<char>((bits >> (8 * i)) & 0xffu);
  out.write(bytes.data(), 8);
}

std::uint64_t get_u64(std::istream& in) {
  std::array<unsigned char, 8> bytes{};
  in.read(reinterpret_cast<char*>(bytes.data()), 8);
  if (!in) throw InputError("dataset: truncated binary file");
  std::uint64_t bits = 0;
  for (int i = 0; i < 8; ++i) bits |= static_cast<std::uint64_t>(bytes[i]) << (8 * i);
  return bits;
}

double get_f64(std::istream& in) { return std::bit_cast<double>(get_u64(in)); }

constexpr char kDatasetMagic[8] = {'I', 'Q', 'N', 'D', 'S', '0', '0', '1'};

}  // namespace

void write_dataset_csv(const std::filesystem::path& path, std::span<const Transition> data) {
  require_2d(data);
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot open " + path.string() + " for writing");
  out << "p,v,a,r,p_next,v_next,terminal\n" << std::setprecision(17);
  for (const auto& t : data) {
    out << t.state[0] << ',' << t.state[1] << ',' << t.action << ',' << t.reward << ','
        << t.next_state[0] << ',' << t.next_state[1] << ',' << (t.terminal ? 1 : 0) << '\n';
  }
}

std::vector<Transition> read_dataset_csv(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  std::string line;
  std::getline(in, line);
  if (line != "p,v,a,r,p_next,v_next,terminal") throw InputError("dataset csv: unexpected header");
  std::vector<Transition> data;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::istringstream row(line);
    std::array<double, 7> v{};
    for (std::size_t i = 0; i < v.size(); ++i) {
      std::string cell;
      if (!std::getline(row, cell, ',')) throw InputError("dataset csv: short row: " + line);
      v[i] = std::stod(cell);
    }
    data.push_back({{v[0], v[1]}, static_cast<std::size_t>(v[2]), v[3], {v[4], v[5]}, v[6] != 0.0});
  }
  return data;
}

void write_dataset_binary(const std::filesystem::path& path, std::span<const Transition> data) {
  require_2d(data);
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot open " + path.string() + " for writing");
  out.write(kDatasetMagic, 8);
  put_u64(out, data.size());
  for (const auto& t : data) {
    put_f64(out, t.state[0]);
    put_f64(out, t.state[1]);
    put_f64(out, static_cast<double>(t.action));
    put_f64(out, t.reward);
    put_f64(out, t.next_state[0]);
    put_f64(out, t.next_state[1]);
    put_f64(out, t.terminal ? 1.0 : 0.0);
  }
}

std::vector<Transition> read_dataset_binary(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  char magic[8];
  in.read(magic, 8);
  if (!in || !std::equal(magic, magic + 8, kDatasetMagic)) {
    throw InputError("dataset binary: bad magic");
  }
  const std::uint64_t n = get_u64(in);
  std::vector<Transition> data;
  data.reserve(n);
  for (std::uint64_t i = 0; i < n; ++i) {
    Transition t;
    t.state = {get_f64(in), get_f64(in)};
    t.action = static_cast<std::size_t>(get_f64(in));
    t.reward = get_f64(in);
    t.next_state = {get_f64(in), get_f64(in)};
    t.terminal = get_f64(in) != 0.0;
    data.push_back(std::move(t));
  }
  return data;
}

}  // namespace iqn
