#include "iqn/experiment.hpp"

#include <openssl/evp.h>

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <cstdlib>
#include <exception>
#include <fstream>
#include <iomanip>
#include <map>
#include <mutex>
#include <regex>
#include <set>
#include <sstream>
#include <thread>

#include <json.hpp>

#include "iqn/diagnostics.hpp"
#include "iqn/errors.hpp"

namespace iqn {

using json = nlohmann::json;
namespace fs = std::filesystem;

namespace {

constexpr std::pair<ExperimentKind, const char*> kKindNames[] = {
    {ExperimentKind::kIfqiCarOnHill, "ifqi_car_on_hill"},
    {ExperimentKind::kIdqnTabular, "idqn_tabular"},
    {ExperimentKind::kLqrGeometry, "lqr_geometry"},
    {ExperimentKind::kTable1, "table1"},
    {ExperimentKind::kPropChecks, "prop_checks"},
};

[[noreturn]] void invariant(const std::string& msg) {
  throw ConfigError(ConfigError::Category::kInvariant, "config: " + msg);
}

std::size_t line_of_offset(const std::string& text, std::size_t offset) {
  offset = std::min(offset, text.size());
  return 1 + static_cast<std::size_t>(std::count(text.begin(), text.begin() + offset, '\n'));
}

// Field-level reader that tracks the JSON path, rejects unknown keys and
// reports the line where a key first appears.
class Reader {
 public:
  Reader(const json& obj, std::string path, const std::string& text)
      : obj_(obj), path_(std::move(path)), text_(text) {
    if (!obj_.is_object()) invariant(where() + " must be an object");
  }

  ~Reader() noexcept(false) {
    if (std::uncaught_exceptions() > 0) return;
    for (const auto& [key, value] : obj_.items()) {
      if (seen_.count(key) == 0) {
        throw ConfigError(ConfigError::Category::kUnknownKey,
                          "config: unknown key \"" + key + "\" in " + where() + " (line " +
                              std::to_string(line_of(key)) + ")");
      }
    }
  }

  bool has(const std::string& key) {
    seen_.insert(key);
    return obj_.contains(key);
  }

  const json& at(const std::string& key) { return obj_.at(key); }

  void size(const std::string& key, std::size_t& out) {
    if (!has(key)) return;
    const auto& v = obj_.at(key);
    if (!v.is_number_unsigned()) bad(key, "a non-negative integer");
    out = v.get<std::size_t>();
  }
  void u64(const std::string& key, std::uint64_t& out) {
    if (!has(key)) return;
    const auto& v = obj_.at(key);
    if (!v.is_number_unsigned()) bad(key, "a non-negative integer");
    out = v.get<std::uint64_t>();
  }
  void real(const std::string& key, double& out) {
    if (!has(key)) return;
    const auto& v = obj_.at(key);
    if (!v.is_number()) bad(key, "a number");
    out = v.get<double>();
  }
  void boolean(const std::string& key, bool& out) {
    if (!has(key)) return;
    const auto& v = obj_.at(key);
    if (!v.is_boolean()) bad(key, "true or false");
    out = v.get<bool>();
  }
  void string(const std::string& key, std::string& out) {
    if (!has(key)) return;
    const auto& v = obj_.at(key);
    if (!v.is_string()) bad(key, "a string");
    out = v.get<std::string>();
  }
  template <typename T>
  void uints(const std::string& key, std::vector<T>& out) {
    if (!has(key)) return;
    const auto& v = obj_.at(key);
    if (!v.is_array()) bad(key, "an array of non-negative integers");
    out.clear();
    for (const auto& x : v) {
      if (!x.is_number_unsigned()) bad(key, "an array of non-negative integers");
      out.push_back(x.get<T>());
    }
  }

  Reader sub(const std::string& key) {
    seen_.insert(key);
    return Reader(obj_.at(key), path_ + "/" + key, text_);
  }

  std::string where() const { return path_.empty() ? "the top level" : "\"" + path_ + "\""; }

  [[noreturn]] void bad(const std::string& key, const std::string& expected) {
    invariant("\"" + path_ + "/" + key + "\" (line " + std::to_string(line_of(key)) +
              ") must be " + expected);
  }

 private:
  std::size_t line_of(const std::string& key) const {
    const auto pos = text_.find("\"" + key + "\"");
    return pos == std::string::npos ? 0 : line_of_offset(text_, pos);
  }

  const json& obj_;
  std::string path_;
  const std::string& text_;
  std::set<std::string> seen_;
};

ExperimentConfig from_json(const json& root, const std::string& text) {
  ExperimentConfig c;
  Reader r(root, "", text);
  if (!r.has("kind")) invariant("missing required key \"kind\"");
  std::string kind;
  r.string("kind", kind);
  bool known = false;
  for (const auto& [k, name] : kKindNames) {
    if (kind == name) {
      c.kind = k;
      known = true;
    }
  }
  if (!known) invariant("unknown experiment kind \"" + kind + "\"");
  c.name = kind;
  r.string("name", c.name);
  r.uints("seeds", c.seeds);
  std::string out;
  r.string("output_dir", out);
  c.output_dir = out;
  r.uints("ks", c.ks);

  if (r.has("train")) {
    auto t = r.sub("train");
    auto& tc = c.train;
    t.size("d", tc.d);
    t.size("t", tc.t);
    t.size("g", tc.g);
    t.size("batch_size", tc.batch_size);
    t.real("learning_rate", tc.adam.lr);
    t.real("adam_beta1", tc.adam.beta1);
    t.real("adam_beta2", tc.adam.beta2);
    t.real("adam_eps", tc.adam.eps);
    t.uints("hidden", tc.hidden);
    t.real("gamma", tc.gamma);
    t.size("bellman_iterations", tc.bellman_iterations);
    t.size("gradient_budget", tc.gradient_budget);
    t.size("env_steps", tc.env_steps);
    t.size("replay_capacity", tc.replay_capacity);
    t.size("learning_starts", tc.learning_starts);
    t.real("epsilon_start", tc.epsilon_start);
    t.real("epsilon_end", tc.epsilon_end);
    t.size("epsilon_decay_steps", tc.epsilon_decay_steps);
    bool parallel = false;
    t.boolean("parallel", parallel);
    tc.execution = parallel ? Execution::kParallel : Execution::kSerial;
    t.size("threads", tc.threads);
  }
  if (r.has("car_on_hill")) {
    auto e = r.sub("car_on_hill");
    e.size("n_samples", c.n_samples);
    if (e.has("initial_state")) {
      const auto& v = e.at("initial_state");
      if (!v.is_array() || v.size() != 2 || !v[0].is_number() || !v[1].is_number()) {
        e.bad("initial_state", "a [position, velocity] pair");
      }
      c.initial_state = {v[0].get<double>(), v[1].get<double>()};
    }
    e.size("oracle_resolution", c.oracle_resolution);
  }
  if (r.has("tabular")) {
    auto e = r.sub("tabular");
    e.size("chain_states", c.chain_states);
    e.real("goal_reward", c.goal_reward);
    e.size("max_episode_steps", c.max_episode_steps);
  }
  if (r.has("lqr")) {
    auto e = r.sub("lqr");
    e.real("a", c.lqr.a);
    e.real("b", c.lqr.b);
    e.real("q", c.lqr.q);
    e.real("c", c.lqr.c);
    e.real("r_a", c.lqr.r_a);
    e.real("discount", c.lqr.discount);
    e.size("steps", c.lqr_steps);
    e.real("learning_rate", c.lqr_learning_rate);
    e.size("inits", c.lqr_inits);
  }
  if (r.has("diagnostics")) {
    auto d = r.sub("diagnostics");
    d.size("nu_samples", c.nu_samples);
    d.size("cadence", c.cadence);
    d.u64("checkpoint_every", c.checkpoint_every);
    d.boolean("keep_checkpoints", c.keep_checkpoints);
    d.size("bootstrap_resamples", c.bootstrap_resamples);
    d.real("ci_level", c.ci_level);
  }
  return c;
}

json to_json(const ExperimentConfig& c) {
  const auto& tc = c.train;
  json j;
  j["kind"] = to_string(c.kind);
  j["name"] = c.name;
  j["seeds"] = c.seeds;
  j["ks"] = c.ks;
  j["train"] = {
      {"d", tc.d},
      {"t", tc.t},
      {"g", tc.g},
      {"batch_size", tc.batch_size},
      {"learning_rate", tc.adam.lr},
      {"adam_beta1", tc.adam.beta1},
      {"adam_beta2", tc.adam.beta2},
      {"adam_eps", tc.adam.eps},
      {"hidden", tc.hidden},
      {"gamma", tc.gamma},
      {"bellman_iterations", tc.bellman_iterations},
      {"gradient_budget", tc.gradient_budget},
      {"env_steps", tc.env_steps},
      {"replay_capacity", tc.replay_capacity},
      {"learning_starts", tc.learning_starts},
      {"epsilon_start", tc.epsilon_start},
      {"epsilon_end", tc.epsilon_end},
      {"epsilon_decay_steps", tc.epsilon_decay_steps},
      {"parallel", tc.execution == Execution::kParallel},
      {"threads", tc.threads},
  };
  j["car_on_hill"] = {
      {"n_samples", c.n_samples},
      {"initial_state", {c.initial_state.position, c.initial_state.velocity}},
      {"oracle_resolution", c.oracle_resolution},
  };
  j["tabular"] = {
      {"chain_states", c.chain_states},
      {"goal_reward", c.goal_reward},
      {"max_episode_steps", c.max_episode_steps},
  };
  j["lqr"] = {
      {"a", c.lqr.a},          {"b", c.lqr.b},
      {"q", c.lqr.q},          {"c", c.lqr.c},
      {"r_a", c.lqr.r_a},      {"discount", c.lqr.discount},
      {"steps", c.lqr_steps},  {"learning_rate", c.lqr_learning_rate},
      {"inits", c.lqr_inits},
  };
  j["diagnostics"] = {
      {"nu_samples", c.nu_samples},
      {"cadence", c.cadence},
      {"checkpoint_every", c.checkpoint_every},
      {"keep_checkpoints", c.keep_checkpoints},
      {"bootstrap_resamples", c.bootstrap_resamples},
      {"ci_level", c.ci_level},
  };
  return j;
}

bool is_ifqi(ExperimentKind k) {
  return k == ExperimentKind::kIfqiCarOnHill || k == ExperimentKind::kTable1;
}

// Independent stream for dataset collection so the dataset does not share
// draws with the training RNG seeded by the same seed.
std::uint64_t dataset_seed(std::uint64_t seed) {
  std::uint64_t z = seed + 0x9e3779b97f4a7c15ULL;
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

std::string fmt(double x) {
  if (std::isnan(x)) return "";
  std::ostringstream s;
  s << std::setprecision(17) << x;
  return s.str();
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  out << text;
  if (!out) throw std::runtime_error("cannot write " + path.string());
}

std::string read_text(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw InputError("cannot read " + path.string());
  std::ostringstream s;
  s << in.rdbuf();
  return s.str();
}

json metrics_json(const std::vector<std::pair<std::string, double>>& metrics) {
  json j = json::object();
  for (const auto& [name, value] : metrics) {
    j[name] = std::isnan(value) ? json(nullptr) : json(value);
  }
  return j;
}

void add_table1(std::vector<std::pair<std::string, double>>& m,
                std::span<const DiagnosticsRecord> records) {
  const double nan = std::numeric_limits<double>::quiet_NaN();
  Table1Metrics t;
  bool any = false;
  try {
    t = table1_metrics(records);
    any = true;
  } catch (const InputError&) {
  }
  const auto [eq5_all, violations] = soundness_counts(records);
  m.emplace_back("m1", any ? t.m1 : nan);
  m.emplace_back("m2", any ? t.m2 : nan);
  m.emplace_back("m3", any ? t.m3 : nan);
  m.emplace_back("m4", any ? t.m4 : nan);
  m.emplace_back("m4_count", any ? t.m4_count : nan);
  m.emplace_back("pairs", static_cast<double>(records.size()));
  m.emplace_back("eq5_pairs", static_cast<double>(eq5_all));
  m.emplace_back("soundness_violations", static_cast<double>(violations));
}

json records_to_json(std::span<const DiagnosticsRecord> records) {
  json arr = json::array();
  for (const auto& r : records) {
    arr.push_back({{"t", r.snapshot_t},
                   {"e", r.approx_error},
                   {"csae", r.csae},
                   {"csae_next", r.csae_next},
                   {"eq5", r.eq5},
                   {"eq6", r.eq6},
                   {"disp", r.displacement},
                   {"cross", r.crosses_shift}});
  }
  return arr;
}

std::vector<DiagnosticsRecord> records_from_json(const json& arr) {
  std::vector<DiagnosticsRecord> out;
  for (const auto& j : arr) {
    DiagnosticsRecord r;
    r.snapshot_t = j.at("t").get<std::uint64_t>();
    r.approx_error = j.at("e").get<std::vector<double>>();
    r.csae = j.at("csae").get<double>();
    r.csae_next = j.at("csae_next").get<double>();
    r.eq5 = j.at("eq5").get<std::vector<bool>>();
    r.eq6 = j.at("eq6").get<bool>();
    r.displacement = j.at("disp").get<std::vector<double>>();
    r.crosses_shift = j.at("cross").get<bool>();
    out.push_back(std::move(r));
  }
  return out;
}

// ---------------------------------------------------------------------------
// i-FQI on car-on-hill (also the soundness-metrics study)
// ---------------------------------------------------------------------------

struct IfqiSetup {
  TrainConfig train;
  std::vector<Transition> dataset;
  std::vector<Transition> nu;
};

IfqiSetup ifqi_setup(const ExperimentConfig& c, std::size_t k, std::uint64_t seed) {
  IfqiSetup s;
  s.train = c.train;
  s.train.k = k;
  s.train.seed = seed;
  s.dataset = collect_uniform_dataset(c.n_samples, c.initial_state, dataset_seed(seed));
  const std::size_t n = c.nu_samples == 0 ? s.dataset.size() : std::min(c.nu_samples, s.dataset.size());
  s.nu.assign(s.dataset.begin(), s.dataset.begin() + static_cast<std::ptrdiff_t>(n));
  return s;
}

std::string checkpoint_header(const ExperimentConfig& c, std::size_t k, std::uint64_t seed) {
  return json{{"config", to_json(c)}, {"k", k}, {"seed", seed}}.dump();
}

fs::path records_sidecar(const fs::path& checkpoint) {
  auto p = checkpoint;
  return p.replace_extension(".records.json");
}

void save_checkpoint_pair(const fs::path& checkpoint, const ExperimentConfig& c, std::size_t k,
                          std::uint64_t seed, const IfqiRunner& runner,
                          std::span<const DiagnosticsRecord> records) {
  // Sidecar first: a checkpoint never points at records it cannot find.
  write_text(records_sidecar(checkpoint), records_to_json(records).dump());
  save_checkpoint(checkpoint, {checkpoint_header(c, k, seed), runner.state()});
}

void save_progress(const fs::path& dir, const ExperimentConfig& c, std::size_t k,
                   std::uint64_t seed, const IfqiRunner& runner,
                   std::span<const DiagnosticsRecord> records) {
  save_checkpoint_pair(dir / "checkpoint.bin", c, k, seed, runner, records);
  if (c.keep_checkpoints && !runner.finished()) {
    std::ostringstream name;
    name << "checkpoint_" << std::setw(8) << std::setfill('0') << runner.chain().gradient_events
         << ".bin";
    save_checkpoint_pair(dir / name.str(), c, k, seed, runner, records);
  }
}

SeedResult finish_ifqi(const fs::path& dir, const ExperimentConfig& c, std::size_t k,
                       std::uint64_t seed, const IfqiRunner& runner,
                       std::span<const DiagnosticsRecord> records,
                       std::span<const double> q_star) {
  save_progress(dir, c, k, seed, runner, records);
  write_diagnostics_csv(dir / "diagnostics.csv", records);

  const EvaluationGrid grid;
  const auto iterates = runner.bellman_iterates();
  const auto curves = iteration_curves(iterates, runner.dataset(), q_star, grid, runner.config().gamma);
  std::ostringstream csv;
  csv << "iteration,perf_loss,approx_error,error_sum\n";
  for (std::size_t i = 0; i < curves.perf_loss.size(); ++i) {
    csv << i << ',' << fmt(curves.perf_loss[i]) << ','
        << (i == 0 ? "" : fmt(curves.approx_error[i - 1])) << ','
        << (i == 0 ? "" : fmt(curves.error_sum[i - 1])) << '\n';
  }
  write_text(dir / "curves.csv", csv.str());

  SeedResult res;
  res.k = k;
  res.seed = seed;
  res.metrics.emplace_back("final_perf_loss", curves.perf_loss.back());
  res.metrics.emplace_back("final_error_sum",
                           curves.error_sum.empty() ? 0.0 : curves.error_sum.back());
  res.metrics.emplace_back("bellman_iterations", static_cast<double>(iterates.size() - 1));
  add_table1(res.metrics, records);
  write_text(dir / "metrics.json", metrics_json(res.metrics).dump(2) + "\n");
  return res;
}

SeedResult run_ifqi_seed(const ExperimentConfig& c, std::size_t k, std::uint64_t seed,
                         const fs::path& dir, std::span<const double> q_star) {
  auto setup = ifqi_setup(c, k, seed);
  IfqiRunner runner(setup.train, std::move(setup.dataset));
  DiagnosticsCollector collector(std::move(setup.nu), setup.train.gamma, c.cadence);
  const auto observer = collector.observer();
  while (!runner.finished()) {
    if (c.checkpoint_every == 0) {
      runner.run(observer);
    } else {
      runner.advance(c.checkpoint_every, observer);
      if (!runner.finished()) save_progress(dir, c, k, seed, runner, collector.records());
    }
  }
  return finish_ifqi(dir, c, k, seed, runner, collector.records(), q_star);
}

// ---------------------------------------------------------------------------
// i-DQN on the tabular chain
// ---------------------------------------------------------------------------

SeedResult run_idqn_seed(const ExperimentConfig& c, std::size_t k, std::uint64_t seed,
                         const fs::path& dir) {
  const auto mdp = TabularMdp::chain(c.chain_states, c.train.gamma, c.goal_reward);
  const auto q_star = exact_value_iteration(mdp);
  std::vector<Transition> nu;
  for (std::size_t s = 0; s < mdp.n_states; ++s) {
    if (mdp.terminal[s]) continue;
    for (std::size_t a = 0; a < mdp.n_actions; ++a) {
      const auto& row = mdp.transitions[s][a];
      const auto next = static_cast<std::size_t>(std::max_element(row.begin(), row.end()) - row.begin());
      nu.push_back({one_hot(s, mdp.n_states), a, mdp.rewards[s][a], one_hot(next, mdp.n_states),
                    static_cast<bool>(mdp.terminal[next])});
    }
  }
  TrainConfig tc = c.train;
  tc.k = k;
  tc.seed = seed;
  TabularEnv env(mdp, 0, c.max_episode_steps);
  DiagnosticsCollector collector(nu, tc.gamma, c.cadence);
  const auto result = run_idqn(tc, env, collector.observer());

  double q_error = 0.0;
  const auto& last = result.chain.online.back();
  for (const auto& t : nu) {
    const std::size_t s = static_cast<std::size_t>(
        std::max_element(t.state.begin(), t.state.end()) - t.state.begin());
    q_error = std::max(q_error, std::abs(mlp_forward(last, t.state)[t.action] - q_star.at(s, t.action)));
  }
  std::ostringstream csv;
  csv << "episode,return\n";
  for (std::size_t i = 0; i < result.episode_returns.size(); ++i) {
    csv << i << ',' << fmt(result.episode_returns[i]) << '\n';
  }
  write_text(dir / "episode_returns.csv", csv.str());
  write_diagnostics_csv(dir / "diagnostics.csv", collector.records());

  SeedResult res;
  res.k = k;
  res.seed = seed;
  res.metrics.emplace_back("q_sup_error", q_error);
  const auto& ret = result.episode_returns;
  const std::size_t tail = std::min<std::size_t>(10, ret.size());
  double mean_tail = 0.0;
  for (std::size_t i = ret.size() - tail; i < ret.size(); ++i) mean_tail += ret[i];
  res.metrics.emplace_back("final_return", tail == 0 ? 0.0 : mean_tail / static_cast<double>(tail));
  res.metrics.emplace_back("episodes", static_cast<double>(ret.size()));
  add_table1(res.metrics, collector.records());
  write_text(dir / "metrics.json", metrics_json(res.metrics).dump(2) + "\n");
  return res;
}

// ---------------------------------------------------------------------------
// LQR geometry
// ---------------------------------------------------------------------------

// Initial (M, G) inside the constrained family, away from the M bound.
std::vector<QuadraticQParams> lqr_inits(std::size_t n, std::uint64_t seed) {
  Rng rng(dataset_seed(seed));
  std::uniform_real_distribution<double> m(-1.0, -0.05);
  std::uniform_real_distribution<double> g(-kQuadraticGBound, kQuadraticGBound);
  std::vector<QuadraticQParams> out;
  for (std::size_t i = 0; i < n; ++i) {
    const double mi = m(rng);
    out.push_back({mi, g(rng)});
  }
  return out;
}

SeedResult run_lqr_seed(const ExperimentConfig& c, std::uint64_t seed, const fs::path& dir) {
  const auto inits = lqr_inits(c.lqr_inits, seed);
  std::ostringstream csv;
  csv << "init,k,step,m,g,distance\n";
  std::size_t closer = 0;
  double qn_total = 0.0;
  double iqn_total = 0.0;
  for (std::size_t i = 0; i < inits.size(); ++i) {
    const auto qn = lqr_trajectory_experiment(c.lqr, 1, inits[i], c.lqr_steps, c.lqr_learning_rate);
    const auto iqn = lqr_trajectory_experiment(c.lqr, 2, inits[i], c.lqr_steps, c.lqr_learning_rate);
    for (const auto* tr : {&qn, &iqn}) {
      for (std::size_t s = 0; s < tr->path.size(); ++s) {
        csv << i << ',' << tr->k << ',' << s << ',' << fmt(tr->path[s].m) << ','
            << fmt(tr->path[s].g) << ',' << fmt(tr->distance[s]) << '\n';
      }
    }
    if (iqn.final_distance <= qn.final_distance) ++closer;
    qn_total += qn.final_distance;
    iqn_total += iqn.final_distance;
  }
  write_text(dir / "trajectories.csv", csv.str());
  const auto q = lqr_oracle_qstar(c.lqr).q_star;
  SeedResult res;
  res.k = 2;
  res.seed = seed;
  const double n = static_cast<double>(inits.size());
  res.metrics.emplace_back("iqn_closer_fraction", static_cast<double>(closer) / n);
  res.metrics.emplace_back("qn_final_distance", qn_total / n);
  res.metrics.emplace_back("iqn_final_distance", iqn_total / n);
  res.metrics.emplace_back("q_star_a", q.a);
  res.metrics.emplace_back("q_star_b", q.b);
  res.metrics.emplace_back("q_star_c", q.c);
  write_text(dir / "metrics.json", metrics_json(res.metrics).dump(2) + "\n");
  return res;
}

// ---------------------------------------------------------------------------
// Property checks
// ---------------------------------------------------------------------------

SeedResult run_checks_seed(const ExperimentConfig& c, std::uint64_t seed, const fs::path& dir) {
  Rng rng(seed);
  SeedResult res;
  res.k = 0;
  res.seed = seed;

  // Deterministic LQR data on the (s, a) grid.
  const auto nu = lqr_grid();
  const auto lqr = prop2_equivalence_check_lqr(c.lqr, {-0.7, 0.1}, nu, 10, rng);
  res.metrics.emplace_back("prop2_lqr_relative_spread", lqr.relative());

  // Deterministic car-on-hill transitions.
  const auto data = collect_uniform_dataset(500, c.initial_state, dataset_seed(seed));
  MlpArchitecture arch{2, c.train.hidden, 2};
  const auto target = init_he_uniform(arch, rng);
  const auto coh = prop2_equivalence_check(target, data, c.train.gamma, 10, rng);
  res.metrics.emplace_back("prop2_car_on_hill_relative_spread", coh.relative());

  // Stochastic chain: every successor appears in proportion to its probability.
  TabularMdp mdp = TabularMdp::chain(c.chain_states, c.train.gamma, c.goal_reward);
  for (std::size_t s = 0; s + 1 < mdp.n_states; ++s) {
    auto& right = mdp.transitions[s][1];
    std::fill(right.begin(), right.end(), 0.0);
    right[s + 1] = 0.75;
    right[s] = 0.25;
  }
  mdp.validate();
  MlpArchitecture tab_arch{mdp.n_states, c.train.hidden, 2};
  const auto tab_target = init_he_uniform(tab_arch, rng);
  std::vector<Transition> dup;
  for (std::size_t s = 0; s + 1 < mdp.n_states; ++s) {
    for (std::size_t a = 0; a < 2; ++a) {
      for (std::size_t s2 = 0; s2 < mdp.n_states; ++s2) {
        const auto copies = static_cast<std::size_t>(std::lround(4.0 * mdp.transitions[s][a][s2]));
        for (std::size_t i = 0; i < copies; ++i) {
          dup.push_back({one_hot(s, mdp.n_states), a, mdp.rewards[s][a], one_hot(s2, mdp.n_states),
                         static_cast<bool>(mdp.terminal[s2])});
        }
      }
    }
  }
  const auto exact = [&](const Transition& t) {
    const std::size_t s = static_cast<std::size_t>(
        std::max_element(t.state.begin(), t.state.end()) - t.state.begin());
    double v = mdp.rewards[s][t.action];
    for (std::size_t s2 = 0; s2 < mdp.n_states; ++s2) {
      const double p = mdp.transitions[s][t.action][s2];
      if (p == 0.0 || mdp.terminal[s2]) continue;
      const auto q = mlp_forward(tab_target, one_hot(s2, mdp.n_states));
      v += p * mdp.discount * *std::max_element(q.begin(), q.end());
    }
    return v;
  };
  const auto dupr = prop2_equivalence_check(tab_target, dup, mdp.discount, 10, rng, exact);
  res.metrics.emplace_back("prop2_duplication_relative_spread", dupr.relative());

  res.metrics.emplace_back("chain_vi_residual", exact_value_iteration(mdp).residual);
  write_text(dir / "metrics.json", metrics_json(res.metrics).dump(2) + "\n");
  return res;
}

// ---------------------------------------------------------------------------

struct Task {
  std::size_t k;
  std::uint64_t seed;
  fs::path dir;
};

std::vector<MetricSummary> summarize(const ExperimentConfig& c, std::span<const SeedResult> runs) {
  std::vector<MetricSummary> out;
  std::map<std::pair<std::size_t, std::string>, std::size_t> index;
  for (const auto& r : runs) {
    for (const auto& [name, value] : r.metrics) {
      const auto key = std::pair{r.k, name};
      if (!index.count(key)) {
        index[key] = out.size();
        out.push_back({r.k, name, {}, 0.0, 0.0, 0.0});
      }
      out[index[key]].per_seed.push_back(value);
    }
  }
  const double nan = std::numeric_limits<double>::quiet_NaN();
  for (auto& m : out) {
    std::vector<double> finite;
    for (double x : m.per_seed) {
      if (!std::isnan(x)) finite.push_back(x);
    }
    m.iqm = finite.empty() ? nan : iqm(finite);
    m.ci_low = m.ci_high = nan;
    if (finite.size() >= 2) {
      Rng rng(0);
      std::tie(m.ci_low, m.ci_high) = bootstrap_ci(finite, c.bootstrap_resamples, c.ci_level, rng);
    }
  }
  return out;
}

void write_summary(const RunSummary& s, const ExperimentConfig& c) {
  json runs = json::array();
  for (const auto& r : s.runs) {
    runs.push_back({{"k", r.k}, {"seed", r.seed}, {"metrics", metrics_json(r.metrics)}});
  }
  json sums = json::array();
  std::ostringstream csv;
  csv << "k,metric,iqm,ci_low,ci_high,per_seed\n";
  auto num = [](double x) { return std::isnan(x) ? json(nullptr) : json(x); };
  for (const auto& m : s.summaries) {
    json per = json::array();
    for (double x : m.per_seed) per.push_back(num(x));
    sums.push_back({{"k", m.k},
                    {"metric", m.metric},
                    {"iqm", num(m.iqm)},
                    {"ci", {num(m.ci_low), num(m.ci_high)}},
                    {"per_seed", per}});
    csv << m.k << ',' << m.metric << ',' << fmt(m.iqm) << ',' << fmt(m.ci_low) << ','
        << fmt(m.ci_high) << ',';
    for (std::size_t i = 0; i < m.per_seed.size(); ++i) {
      csv << (i ? ";" : "") << fmt(m.per_seed[i]);
    }
    csv << '\n';
  }
  json j{{"config_hash", s.config_hash},
         {"kind", to_string(c.kind)},
         {"name", c.name},
         {"seeds", c.seeds},
         {"wall_clock_seconds", s.wall_clock_seconds},
         {"runs", runs},
         {"summaries", sums}};
  write_text(s.output_dir / "summary.json", j.dump(2) + "\n");
  write_text(s.output_dir / "summary.csv", csv.str());
}

SnapshotRecord snapshot_of(const QChain& chain) {
  SnapshotRecord snap;
  snap.index = chain.rolling_updates - 1;
  snap.gradient_events = chain.gradient_events;
  snap.window_shifts = chain.window_shifts;
  snap.params.push_back(chain.target[0]);
  for (const auto& p : chain.online) snap.params.push_back(p);
  return snap;
}

}  // namespace

std::string to_string(ExperimentKind kind) {
  for (const auto& [k, name] : kKindNames) {
    if (k == kind) return name;
  }
  return "unknown";
}

void ExperimentConfig::validate() const {
  if (seeds.empty()) invariant("seed list must be non-empty");
  if (ks.empty()) invariant("ks must be non-empty");
  if (std::set<std::uint64_t>(seeds.begin(), seeds.end()).size() != seeds.size()) {
    invariant("seeds must be distinct");
  }
  for (std::size_t k : ks) {
    TrainConfig tc = train;
    tc.k = k;
    tc.validate();
    if (is_ifqi(kind) && k > train.bellman_iterations) {
      invariant("K = " + std::to_string(k) + " exceeds bellman_iterations = " +
                std::to_string(train.bellman_iterations));
    }
  }
  if (n_samples < 1) invariant("car_on_hill.n_samples must be >= 1");
  if (oracle_resolution < 17 || (oracle_resolution - 1) % 16 != 0) {
    invariant("car_on_hill.oracle_resolution must be 16m + 1 so that it nests the 17x17 grid");
  }
  if (chain_states < 2) invariant("tabular.chain_states must be >= 2");
  if (cadence < 1) invariant("diagnostics.cadence must be >= 1");
  if (bootstrap_resamples < 1) invariant("diagnostics.bootstrap_resamples must be >= 1");
  if (!(ci_level > 0.0 && ci_level < 1.0)) invariant("diagnostics.ci_level must be in (0, 1)");
  if (lqr_inits < 1) invariant("lqr.inits must be >= 1");
  if (kind == ExperimentKind::kLqrGeometry || kind == ExperimentKind::kPropChecks) {
    try {
      lqr.validate();
    } catch (const ModelError& e) {
      invariant(std::string("lqr: ") + e.what());
    }
  }
}

ExperimentConfig parse_config_text(const std::string& text) {
  json root;
  try {
    root = json::parse(text);
  } catch (const json::parse_error& e) {
    throw ConfigError(ConfigError::Category::kSyntax,
                      "config: syntax error at line " + std::to_string(line_of_offset(text, e.byte)) +
                          ": " + e.what());
  }
  if (!root.is_object()) invariant("the top level must be a JSON object");
  auto config = from_json(root, text);
  config.validate();
  return config;
}

ExperimentConfig parse_config(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) {
    throw ConfigError(ConfigError::Category::kMissingFile,
                      "config: cannot open " + path.string());
  }
  std::ostringstream s;
  s << in.rdbuf();
  return parse_config_text(s.str());
}

std::string canonical_json(const ExperimentConfig& config) { return to_json(config).dump(); }

std::string config_hash(const ExperimentConfig& config) {
  const auto text = canonical_json(config);
  unsigned char digest[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  if (EVP_Digest(text.data(), text.size(), digest, &len, EVP_sha256(), nullptr) != 1) {
    throw std::runtime_error("SHA-256 failed");
  }
  std::ostringstream out;
  for (unsigned int i = 0; i < len; ++i) {
    out << std::hex << std::setw(2) << std::setfill('0') << static_cast<int>(digest[i]);
  }
  return out.str();
}

fs::path resolve_output_dir(const ExperimentConfig& config, const fs::path& override_dir) {
  if (!override_dir.empty()) return override_dir;
  if (!config.output_dir.empty()) return config.output_dir;
  const char* root = std::getenv(kOutputRootEnv);
  const fs::path base = root && *root ? fs::path(root) : fs::path("runs");
  return base / (config.name + "-" + config_hash(config).substr(0, 12));
}

RunSummary run_experiment(const ExperimentConfig& config, const fs::path& output_dir,
                          std::size_t threads) {
  config.validate();
  const auto start = std::chrono::steady_clock::now();
  RunSummary summary;
  summary.config_hash = config_hash(config);
  summary.output_dir = output_dir;
  fs::create_directories(output_dir);
  write_text(output_dir / "config.json", to_json(config).dump(2) + "\n");

  std::vector<Task> tasks;
  const bool per_k = is_ifqi(config.kind) || config.kind == ExperimentKind::kIdqnTabular;
  const std::vector<std::size_t> ks = per_k ? config.ks : std::vector<std::size_t>{0};
  for (std::size_t k : ks) {
    for (std::uint64_t seed : config.seeds) {
      fs::path dir = output_dir;
      if (config.kind == ExperimentKind::kLqrGeometry) dir /= "lqr";
      else if (config.kind == ExperimentKind::kPropChecks) dir /= "checks";
      else dir /= "K" + std::to_string(k);
      dir /= "seed" + std::to_string(seed);
      fs::create_directories(dir);
      tasks.push_back({k, seed, dir});
    }
  }

  std::vector<double> q_star;
  if (is_ifqi(config.kind)) {
    q_star = car_on_hill_q_star(EvaluationGrid{}, config.oracle_resolution);
  }

  std::vector<SeedResult> results(tasks.size());
  std::vector<std::exception_ptr> errors(tasks.size());
  auto work = [&](std::size_t i) {
    const auto& t = tasks[i];
    try {
      switch (config.kind) {
        case ExperimentKind::kIfqiCarOnHill:
        case ExperimentKind::kTable1:
          results[i] = run_ifqi_seed(config, t.k, t.seed, t.dir, q_star);
          break;
        case ExperimentKind::kIdqnTabular:
          results[i] = run_idqn_seed(config, t.k, t.seed, t.dir);
          break;
        case ExperimentKind::kLqrGeometry:
          results[i] = run_lqr_seed(config, t.seed, t.dir);
          break;
        case ExperimentKind::kPropChecks:
          results[i] = run_checks_seed(config, t.seed, t.dir);
          break;
      }
    } catch (...) {
      errors[i] = std::current_exception();
    }
  };
  if (threads <= 1) {
    for (std::size_t i = 0; i < tasks.size(); ++i) work(i);
  } else {
    std::atomic<std::size_t> next{0};
    std::vector<std::jthread> pool;
    for (std::size_t w = 0; w < std::min(threads, tasks.size()); ++w) {
      pool.emplace_back([&] {
        for (std::size_t i = next++; i < tasks.size(); i = next++) work(i);
      });
    }
  }

  std::size_t failed = 0;
  std::string first_error;
  for (std::size_t i = 0; i < tasks.size(); ++i) {
    if (!errors[i]) {
      summary.runs.push_back(results[i]);
      continue;
    }
    if (failed++ == 0) {
      try {
        std::rethrow_exception(errors[i]);
      } catch (const std::exception& e) {
        first_error = tasks[i].dir.string() + ": " + e.what();
      }
    }
  }
  summary.summaries = summarize(config, summary.runs);
  summary.wall_clock_seconds =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  write_summary(summary, config);
  if (failed > 0) {
    throw std::runtime_error(std::to_string(failed) + " of " + std::to_string(tasks.size()) +
                             " runs failed (partial results in " + output_dir.string() +
                             "); first error: " + first_error);
  }
  return summary;
}

fs::path resume_run(const fs::path& checkpoint) {
  auto ck = load_checkpoint(checkpoint);
  json header;
  try {
    header = json::parse(ck.config_json);
  } catch (const json::parse_error&) {
    throw InputError("checkpoint: embedded config is not valid JSON");
  }
  if (!header.contains("config") || !header.contains("k") || !header.contains("seed")) {
    throw InputError("checkpoint: embedded config lacks config/k/seed");
  }
  const auto config = parse_config_text(header["config"].dump());
  if (!is_ifqi(config.kind)) throw InputError("resume: only i-FQI runs are checkpointed");
  const auto k = header["k"].get<std::size_t>();
  const auto seed = header["seed"].get<std::uint64_t>();
  const fs::path dir = checkpoint.parent_path().empty() ? fs::path(".") : checkpoint.parent_path();

  auto setup = ifqi_setup(config, k, seed);
  IfqiRunner runner(setup.train, std::move(setup.dataset));
  const bool after_rolling = ck.state.chain.gradient_events > 0 && ck.state.chain.since_rolling == 0 &&
                             ck.state.chain.rolling_updates > 0;
  runner.restore(std::move(ck.state));

  std::vector<DiagnosticsRecord> records;
  const auto partial = records_sidecar(checkpoint);
  if (fs::exists(partial)) {
    records = records_from_json(json::parse(read_text(partial)));
  } else if (runner.chain().gradient_events > 0) {
    throw InputError("resume: missing " + partial.string());
  }
  DiagnosticsCollector collector(std::move(setup.nu), setup.train.gamma, config.cadence);
  if (after_rolling) {
    const auto last = snapshot_of(runner.chain());
    collector.prime(&last, std::move(records));
  } else {
    collector.prime(nullptr, std::move(records));
  }
  const auto observer = collector.observer();
  while (!runner.finished()) {
    if (config.checkpoint_every == 0) {
      runner.run(observer);
    } else {
      runner.advance(config.checkpoint_every, observer);
      if (!runner.finished()) save_progress(dir, config, k, seed, runner, collector.records());
    }
  }
  const auto q_star = car_on_hill_q_star(EvaluationGrid{}, config.oracle_resolution);
  finish_ifqi(dir, config, k, seed, runner, collector.records(), q_star);
  return dir;
}

fs::path emit_plot_data(const fs::path& run_dir) {
  if (!fs::is_directory(run_dir)) throw InputError("plotdata: " + run_dir.string() + " is not a directory");
  const std::regex k_re("K([0-9]+)");
  const std::regex seed_re("seed([0-9]+)");
  std::map<std::size_t, std::map<std::uint64_t, fs::path>> found;
  std::vector<std::string> missing;
  for (const auto& kdir : fs::directory_iterator(run_dir)) {
    std::smatch m;
    const auto kname = kdir.path().filename().string();
    if (!kdir.is_directory() || !std::regex_match(kname, m, k_re)) continue;
    const auto k = static_cast<std::size_t>(std::stoull(m[1]));
    for (const auto& sdir : fs::directory_iterator(kdir.path())) {
      const auto sname = sdir.path().filename().string();
      if (!sdir.is_directory() || !std::regex_match(sname, m, seed_re)) continue;
      const auto curves = sdir.path() / "curves.csv";
      if (fs::exists(curves)) {
        found[k][std::stoull(m[1])] = curves;
      } else {
        missing.push_back(curves.string());
      }
    }
  }
  if (found.empty() || !missing.empty()) {
    std::sort(missing.begin(), missing.end());
    std::string msg = "plotdata: missing inputs under " + run_dir.string() + ":";
    if (missing.empty()) msg += " no K*/seed*/curves.csv files";
    for (const auto& f : missing) msg += "\n  " + f;
    throw InputError(msg);
  }

  std::ostringstream out;
  out << "series,x,y,seed\n";
  for (const auto& [k, seeds] : found) {
    std::vector<std::string> perf;
    std::vector<std::string> err;
    for (const auto& [seed, path] : seeds) {
      std::istringstream in(read_text(path));
      std::string line;
      std::getline(in, line);
      if (line != "iteration,perf_loss,approx_error,error_sum") {
        throw InputError("plotdata: unexpected header in " + path.string());
      }
      while (std::getline(in, line)) {
        std::vector<std::string> cols;
        std::stringstream ls(line);
        std::string cell;
        while (std::getline(ls, cell, ',')) cols.push_back(cell);
        while (cols.size() < 4) cols.emplace_back();
        const auto s = std::to_string(seed);
        if (!cols[1].empty()) perf.push_back(cols[0] + ',' + cols[1] + ',' + s);
        if (!cols[3].empty()) err.push_back(cols[0] + ',' + cols[3] + ',' + s);
      }
    }
    for (const auto& row : perf) out << "perf_loss_K" << k << ',' << row << '\n';
    for (const auto& row : err) out << "error_sum_K" << k << ',' << row << '\n';
  }
  const auto path = run_dir / "plot_data.csv";
  write_text(path, out.str());
  return path;
}

}  // namespace iqn
