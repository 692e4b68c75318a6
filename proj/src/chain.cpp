#include "iqn/chain.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>
#include <thread>

#include "iqn/errors.hpp"

namespace iqn {

void TrainConfig::validate() const {
  auto fail = [](const std::string& msg) {
    throw ConfigError(ConfigError::Category::kInvariant, msg);
  };
  if (k < 1) fail("K must be >= 1");
  if (d < 1) fail("D must be >= 1");
  if (g < 1) fail("G must be >= 1");
  if (batch_size < 1) fail("batch_size must be >= 1");
  if (!(gamma >= 0.0 && gamma < 1.0)) fail("gamma must be in [0, 1)");
  if (!(adam.lr >= 0.0)) fail("learning rate must be >= 0");
  if (gradient_budget < 1) fail("gradient_budget must be >= 1");
  if (env_steps < 1) fail("env_steps must be >= 1");
  if (replay_capacity < 1) fail("replay_capacity must be >= 1");
  if (!(epsilon_start >= 0.0 && epsilon_start <= 1.0 && epsilon_end >= 0.0 &&
        epsilon_end <= 1.0)) {
    fail("epsilon values must be in [0, 1]");
  }
  for (std::size_t w : hidden) {
    if (w < 1) fail("hidden layer widths must be >= 1");
  }
}

QChain make_chain(const MlpArchitecture& arch, std::size_t k, const AdamConfig& adam, Rng& rng) {
  if (k < 1) throw InputError("make_chain: K must be >= 1");
  QChain chain;
  chain.target.push_back(init_he_uniform(arch, rng));
  for (std::size_t i = 0; i < k; ++i) chain.online.push_back(init_he_uniform(arch, rng));
  for (std::size_t i = 1; i < k; ++i) chain.target.push_back(chain.online[i - 1]);
  for (std::size_t i = 0; i < k; ++i) chain.adam.emplace_back(adam, arch.num_params());
  return chain;
}

std::size_t argmax(std::span<const double> values) {
  if (values.empty()) throw InputError("argmax: empty input");
  std::size_t best = 0;
  for (std::size_t i = 1; i < values.size(); ++i) {
    if (values[i] > values[best]) best = i;
  }
  return best;
}

double empirical_bellman_optimal(const MlpParams& target, const Transition& t, double gamma) {
  if (t.terminal) return t.reward;
  const auto q = mlp_forward(target, t.next_state);
  return t.reward + gamma * *std::max_element(q.begin(), q.end());
}

namespace {

template <typename Bootstrap>
double nstep_return(std::span<const Transition> window, double gamma, std::size_t n,
                    Bootstrap&& bootstrap) {
  if (n == 0 || window.size() < n) throw InputError("empirical_bellman_nstep: window shorter than n");
  for (std::size_t i = 0; i + 1 < n; ++i) {
    if (!window[i].terminal && window[i].next_state != window[i + 1].state) {
      throw InputError("empirical_bellman_nstep: window transitions are not consecutive");
    }
  }
  double value = 0.0;
  double discount = 1.0;
  for (std::size_t i = 0; i < n; ++i) {
    value += discount * window[i].reward;
    discount *= gamma;
    if (window[i].terminal) return value;
  }
  return value + discount * bootstrap(window[n - 1].next_state);
}

}  // namespace

double empirical_bellman_nstep(const MlpParams& target, std::span<const Transition> window,
                               double gamma, std::size_t n) {
  return nstep_return(window, gamma, n, [&](const std::vector<double>& s) {
    const auto q = mlp_forward(target, s);
    return *std::max_element(q.begin(), q.end());
  });
}

double empirical_bellman_nstep_policy(
    const MlpParams& target, std::span<const Transition> window, double gamma, std::size_t n,
    const std::function<std::size_t(std::span<const double>)>& policy) {
  return nstep_return(window, gamma, n, [&](const std::vector<double>& s) {
    return mlp_forward(target, s)[policy(s)];
  });
}

namespace {

std::vector<double> bellman_targets(const MlpParams& target, std::span<const Transition> batch,
                                    double gamma) {
  std::vector<double> y;
  y.reserve(batch.size());
  for (const auto& t : batch) y.push_back(empirical_bellman_optimal(target, t, gamma));
  return y;
}

std::vector<TdRow> td_rows(std::span<const Transition> batch, const std::vector<double>& targets) {
  std::vector<TdRow> rows;
  rows.reserve(batch.size());
  for (std::size_t i = 0; i < batch.size(); ++i) {
    rows.push_back({batch[i].state, batch[i].action, targets[i]});
  }
  return rows;
}

// Runs body(i) for i in [0, n), either inline or spread over worker threads.
template <typename Body>
void for_each_network(std::size_t n, Execution execution, std::size_t threads, Body&& body) {
  if (execution == Execution::kSerial || n == 1) {
    for (std::size_t i = 0; i < n; ++i) body(i);
    return;
  }
  const std::size_t workers = std::min(n, threads == 0 ? n : threads);
  std::vector<std::jthread> pool;
  pool.reserve(workers);
  for (std::size_t w = 0; w < workers; ++w) {
    pool.emplace_back([&, w] {
      for (std::size_t i = w; i < n; i += workers) body(i);
    });
  }
}

}  // namespace

std::vector<LossAndGradient> iqn_loss(const QChain& chain, std::span<const Transition> batch,
                                      double gamma) {
  if (batch.empty()) throw InputError("iqn_loss: empty batch");
  std::vector<LossAndGradient> out;
  out.reserve(chain.k());
  for (std::size_t i = 0; i < chain.k(); ++i) {
    const auto targets = bellman_targets(chain.target[i], batch, gamma);
    const auto rows = td_rows(batch, targets);
    out.push_back(td_loss_and_gradient(chain.online[i], rows));
  }
  return out;
}

void gradient_update_all(QChain& chain, std::span<const Transition> batch, double gamma,
                         Execution execution, std::size_t threads) {
  if (batch.empty()) throw InputError("gradient_update_all: empty batch");
  const std::size_t k = chain.k();
  std::vector<std::vector<double>> targets(k);
  for_each_network(k, execution, threads, [&](std::size_t i) {
    targets[i] = bellman_targets(chain.target[i], batch, gamma);
  });
  for_each_network(k, execution, threads, [&](std::size_t i) {
    const auto rows = td_rows(batch, targets[i]);
    const auto lg = td_loss_and_gradient(chain.online[i], rows);
    adam_step(chain.online[i].flat(), lg.gradient, chain.adam[i]);
  });
  chain.gradient_events += 1;
  chain.since_rolling += 1;
  chain.since_shift += 1;
}

SnapshotRecord rolling_target_update(QChain& chain) {
  for (std::size_t i = 1; i < chain.k(); ++i) chain.target[i] = chain.online[i - 1];
  chain.since_rolling = 0;
  SnapshotRecord snap;
  snap.index = chain.rolling_updates++;
  snap.gradient_events = chain.gradient_events;
  snap.window_shifts = chain.window_shifts;
  snap.params.reserve(chain.k() + 1);
  snap.params.push_back(chain.target[0]);
  for (const auto& p : chain.online) snap.params.push_back(p);
  return snap;
}

void window_shift(QChain& chain) {
  for (std::size_t i = 0; i < chain.k(); ++i) chain.target[i] = chain.online[i];
  chain.window_shifts += 1;
  chain.since_shift = 0;
}

std::size_t sample_behavior_network(std::size_t k, Rng& rng) {
  if (k == 0) throw InputError("sample_behavior_network: K must be >= 1");
  if (k == 1) return 0;
  return std::uniform_int_distribution<std::size_t>(0, k - 1)(rng);
}

std::size_t epsilon_greedy_action(std::span<const double> q_values, double epsilon, Rng& rng) {
  if (q_values.empty()) throw InputError("epsilon_greedy_action: no actions");
  if (!(epsilon >= 0.0 && epsilon <= 1.0)) throw InputError("epsilon_greedy_action: epsilon outside [0, 1]");
  const double u = std::uniform_real_distribution<double>(0.0, 1.0)(rng);
  if (u < epsilon) {
    return std::uniform_int_distribution<std::size_t>(0, q_values.size() - 1)(rng);
  }
  return argmax(q_values);
}

double linear_epsilon(const TrainConfig& config, std::uint64_t step) {
  if (config.epsilon_decay_steps == 0 || step >= config.epsilon_decay_steps) {
    return config.epsilon_end;
  }
  const double frac = static_cast<double>(step) / static_cast<double>(config.epsilon_decay_steps);
  return config.epsilon_start + frac * (config.epsilon_end - config.epsilon_start);
}

std::size_t ifqi_shift_period(std::size_t budget, std::size_t n_iterations, std::size_t k) {
  if (k > n_iterations) {
    throw ConfigError(ConfigError::Category::kInvariant,
                      "K (" + std::to_string(k) + ") exceeds the number of Bellman iterations (" +
                          std::to_string(n_iterations) + ")");
  }
  const std::size_t period = budget / (n_iterations - k + 1);
  if (period == 0) {
    throw ConfigError(ConfigError::Category::kInvariant,
                      "gradient budget too small for the requested number of Bellman iterations");
  }
  return period;
}

namespace {

MlpArchitecture architecture_for(const TrainConfig& config, std::size_t input_dim,
                                 std::size_t n_actions) {
  MlpArchitecture arch;
  arch.input_dim = input_dim;
  arch.hidden = config.hidden;
  arch.output_dim = n_actions;
  arch.validate();
  return arch;
}

MlpArchitecture dataset_architecture(const TrainConfig& config,
                                     std::span<const Transition> dataset) {
  if (dataset.empty()) throw InputError("i-FQI: empty dataset");
  std::size_t n_actions = 0;
  for (const auto& t : dataset) n_actions = std::max(n_actions, t.action + 1);
  // Car-on-hill always has two actions even if a tiny dataset only shows one.
  n_actions = std::max<std::size_t>(n_actions, 2);
  return architecture_for(config, dataset.front().state.size(), n_actions);
}

std::vector<Transition> gather(std::span<const Transition> dataset,
                               std::span<const std::size_t> idx) {
  std::vector<Transition> batch;
  batch.reserve(idx.size());
  for (std::size_t i : idx) batch.push_back(dataset[i]);
  return batch;
}

std::vector<std::size_t> sample_dataset_indices(std::size_t n, std::size_t batch_size, Rng& rng) {
  std::uniform_int_distribution<std::size_t> pick(0, n - 1);
  std::vector<std::size_t> idx(batch_size);
  for (auto& i : idx) i = pick(rng);
  return idx;
}

std::string rng_to_string(const Rng& rng) {
  std::ostringstream out;
  out << rng;
  return out.str();
}

Rng rng_from_string(const std::string& text) {
  Rng rng;
  std::istringstream in(text);
  in >> rng;
  if (!in) throw InputError("checkpoint: corrupt RNG state");
  return rng;
}

}  // namespace

IfqiRunner::IfqiRunner(TrainConfig config, std::vector<Transition> dataset)
    : config_(std::move(config)), dataset_(std::move(dataset)) {
  config_.validate();
  arch_ = dataset_architecture(config_, dataset_);
  const std::size_t derived =
      ifqi_shift_period(config_.gradient_budget, config_.bellman_iterations, config_.k);
  shift_period_ = config_.t == 0 ? derived : config_.t;
  max_shifts_ = config_.bellman_iterations - config_.k;
  rng_.seed(config_.seed);
  chain_ = make_chain(arch_, config_.k, config_.adam, rng_);
  frozen_.push_back(chain_.target[0]);
}

void IfqiRunner::one_event(const SnapshotObserver& on_snapshot, const EventObserver& on_event) {
  const auto idx = sample_dataset_indices(dataset_.size(), config_.batch_size, rng_);
  const auto batch = gather(dataset_, idx);
  gradient_update_all(chain_, batch, config_.gamma, config_.execution, config_.threads);
  if (chain_.since_shift >= shift_period_ && chain_.window_shifts < max_shifts_) {
    window_shift(chain_);
    frozen_.push_back(chain_.target[0]);
  }
  if (chain_.since_rolling >= config_.d) {
    auto snap = rolling_target_update(chain_);
    ++snapshots_;
    if (on_snapshot) on_snapshot(snap);
  }
  if (on_event) on_event(chain_);
}

void IfqiRunner::advance(std::uint64_t events, const SnapshotObserver& on_snapshot,
                         const EventObserver& on_event) {
  for (std::uint64_t i = 0; i < events && !finished(); ++i) one_event(on_snapshot, on_event);
}

void IfqiRunner::run(const SnapshotObserver& on_snapshot, const EventObserver& on_event) {
  while (!finished()) one_event(on_snapshot, on_event);
}

std::vector<MlpParams> IfqiRunner::bellman_iterates() const {
  std::vector<MlpParams> out = frozen_;
  if (finished()) {
    for (const auto& p : chain_.online) out.push_back(p);
  }
  return out;
}

IfqiRunner::State IfqiRunner::state() const {
  return {chain_, rng_to_string(rng_), frozen_, snapshots_};
}

void IfqiRunner::restore(State state) {
  if (state.chain.k() != config_.k) throw InputError("checkpoint: K does not match the config");
  for (const auto& p : state.chain.online) {
    if (p.arch() != arch_) throw InputError("checkpoint: architecture does not match the config");
  }
  chain_ = std::move(state.chain);
  rng_ = rng_from_string(state.rng_state);
  frozen_ = std::move(state.frozen);
  snapshots_ = state.snapshots;
}

IfqiResult run_ifqi(const TrainConfig& config, std::vector<Transition> dataset,
                    const SnapshotObserver& on_snapshot, const EventObserver& on_event) {
  IfqiRunner runner(config, std::move(dataset));
  runner.run(on_snapshot, on_event);
  return {runner.chain(), runner.bellman_iterates()};
}

std::vector<std::vector<double>> run_fqi_sequential_trajectory(
    const TrainConfig& config, std::span<const Transition> dataset) {
  config.validate();
  if (config.k != 1) throw InputError("sequential FQI is the K = 1 algorithm");
  const auto arch = dataset_architecture(config, dataset);
  const std::size_t period =
      config.t == 0 ? ifqi_shift_period(config.gradient_budget, config.bellman_iterations, 1)
                    : config.t;
  const std::size_t max_updates = config.bellman_iterations - 1;

  Rng rng(config.seed);
  MlpParams target = init_he_uniform(arch, rng);
  MlpParams online = init_he_uniform(arch, rng);
  AdamState adam(config.adam, arch.num_params());

  std::vector<std::vector<double>> trajectory;
  std::size_t updates = 0;
  std::size_t since_update = 0;
  for (std::size_t step = 0; step < config.gradient_budget; ++step) {
    const auto idx = sample_dataset_indices(dataset.size(), config.batch_size, rng);
    std::vector<TdRow> rows;
    std::vector<double> y;
    y.reserve(idx.size());
    for (std::size_t i : idx) y.push_back(empirical_bellman_optimal(target, dataset[i], config.gamma));
    for (std::size_t j = 0; j < idx.size(); ++j) {
      rows.push_back({dataset[idx[j]].state, dataset[idx[j]].action, y[j]});
    }
    const auto lg = td_loss_and_gradient(online, rows);
    adam_step(online.flat(), lg.gradient, adam);
    ++since_update;
    if (since_update >= period && updates < max_updates) {
      target = online;
      ++updates;
      since_update = 0;
    }
    trajectory.push_back(online.flatten());
  }
  return trajectory;
}

IdqnResult run_idqn(const TrainConfig& config, Environment& env,
                    const SnapshotObserver& on_snapshot, const EventObserver& on_event) {
  config.validate();
  if (config.t < 1) throw ConfigError(ConfigError::Category::kInvariant, "i-DQN requires T >= 1");
  const auto arch = architecture_for(config, env.observation_dim(), env.num_actions());
  Rng rng(config.seed);
  IdqnResult out;
  out.chain = make_chain(arch, config.k, config.adam, rng);
  QChain& chain = out.chain;
  ReplayBuffer buffer(config.replay_capacity);

  auto obs = env.reset(rng);
  double episode_return = 0.0;
  const std::size_t warmup = std::max<std::size_t>(1, config.learning_starts);
  for (std::size_t step = 1; step <= config.env_steps; ++step) {
    const std::size_t behavior = sample_behavior_network(chain.k(), rng);
    const auto q = mlp_forward(chain.online[behavior], obs);
    const std::size_t action = epsilon_greedy_action(q, linear_epsilon(config, step - 1), rng);
    auto result = env.step(action, rng);
    buffer.push({obs, action, result.reward, result.observation, result.terminal});
    episode_return += result.reward;
    if (result.terminal || result.truncated) {
      out.episode_returns.push_back(episode_return);
      episode_return = 0.0;
      obs = env.reset(rng);
    } else {
      obs = std::move(result.observation);
    }

    if (step % config.g == 0 && buffer.size() >= warmup) {
      const auto batch = buffer.sample_minibatch(config.batch_size, rng);
      gradient_update_all(chain, batch, config.gamma, config.execution, config.threads);
      if (on_event) on_event(chain);
    }
    if (step % config.t == 0) window_shift(chain);
    if (step % config.d == 0) {
      auto snap = rolling_target_update(chain);
      if (on_snapshot) on_snapshot(snap);
    }
  }
  out.replay_contents = buffer.contents();
  return out;
}

std::vector<std::vector<double>> run_dqn_sequential_trajectory(const TrainConfig& config,
                                                               Environment& env) {
  config.validate();
  if (config.k != 1) throw InputError("sequential DQN is the K = 1 algorithm");
  if (config.t < 1) throw ConfigError(ConfigError::Category::kInvariant, "DQN requires T >= 1");
  const auto arch = architecture_for(config, env.observation_dim(), env.num_actions());
  Rng rng(config.seed);
  MlpParams target = init_he_uniform(arch, rng);
  MlpParams online = init_he_uniform(arch, rng);
  AdamState adam(config.adam, arch.num_params());
  ReplayBuffer buffer(config.replay_capacity);

  std::vector<std::vector<double>> trajectory;
  auto obs = env.reset(rng);
  const std::size_t warmup = std::max<std::size_t>(1, config.learning_starts);
  for (std::size_t step = 1; step <= config.env_steps; ++step) {
    const auto q = mlp_forward(online, obs);
    const std::size_t action = epsilon_greedy_action(q, linear_epsilon(config, step - 1), rng);
    auto result = env.step(action, rng);
    buffer.push({obs, action, result.reward, result.observation, result.terminal});
    if (result.terminal || result.truncated) {
      obs = env.reset(rng);
    } else {
      obs = std::move(result.observation);
    }
    if (step % config.g == 0 && buffer.size() >= warmup) {
      const auto batch = buffer.sample_minibatch(config.batch_size, rng);
      std::vector<TdRow> rows;
      std::vector<double> y;
      for (const auto& t : batch) y.push_back(empirical_bellman_optimal(target, t, config.gamma));
      for (std::size_t j = 0; j < batch.size(); ++j) {
        rows.push_back({batch[j].state, batch[j].action, y[j]});
      }
      const auto lg = td_loss_and_gradient(online, rows);
      adam_step(online.flat(), lg.gradient, adam);
      trajectory.push_back(online.flatten());
    }
    if (step % config.t == 0) target = online;
  }
  return trajectory;
}

}  // namespace iqn
