#include <pybind11/pybind11.h>
#include <pybind11/stl.h>
#include <pybind11/stl/filesystem.h>

#include "iqn/chain.hpp"
#include "iqn/diagnostics.hpp"
#include "iqn/errors.hpp"
#include "iqn/experiment.hpp"

namespace py = pybind11;
using namespace iqn;

namespace {

MlpArchitecture make_arch(std::size_t input_dim, std::vector<std::size_t> hidden,
                          std::size_t output_dim) {
  MlpArchitecture arch{input_dim, std::move(hidden), output_dim};
  arch.validate();
  return arch;
}

py::dict summary_dict(const RunSummary& s) {
  py::dict out;
  out["config_hash"] = s.config_hash;
  out["output_dir"] = s.output_dir.string();
  out["wall_clock_seconds"] = s.wall_clock_seconds;
  py::list runs;
  for (const auto& r : s.runs) {
    py::dict d;
    d["k"] = r.k;
    d["seed"] = r.seed;
    py::dict m;
    for (const auto& [name, value] : r.metrics) m[py::str(name)] = value;
    d["metrics"] = m;
    runs.append(d);
  }
  out["runs"] = runs;
  py::list sums;
  for (const auto& m : s.summaries) {
    py::dict d;
    d["k"] = m.k;
    d["metric"] = m.metric;
    d["iqm"] = m.iqm;
    d["ci"] = py::make_tuple(m.ci_low, m.ci_high);
    d["per_seed"] = m.per_seed;
    sums.append(d);
  }
  out["summaries"] = sums;
  return out;
}

}  // namespace

PYBIND11_MODULE(iqn, m) {
  m.doc() = "Iterated Q-Networks: chains of Q-functions learning consecutive Bellman updates";

  py::register_exception<InputError>(m, "InputError", PyExc_ValueError);
  py::register_exception<UsageError>(m, "UsageError", PyExc_RuntimeError);
  py::register_exception<ModelError>(m, "ModelError", PyExc_ValueError);
  py::register_exception<ConfigError>(m, "ConfigError", PyExc_ValueError);

  m.def(
      "car_on_hill_step",
      [](double p, double v, std::size_t action) {
        const auto s = iqn::car_on_hill_step({p, v}, action);
        return py::make_tuple(s.next.position, s.next.velocity, s.reward, s.terminal);
      },
      py::arg("position"), py::arg("velocity"), py::arg("action"),
      "One 0.1 s car-on-hill step: (position, velocity, reward, terminal).");

  m.def(
      "collect_dataset",
      [](std::size_t n, std::uint64_t seed) {
        std::vector<std::array<double, 7>> rows;
        for (const auto& t : collect_uniform_dataset(n, car_on_hill::kInitialState, seed)) {
          rows.push_back({t.state[0], t.state[1], double(t.action), t.reward, t.next_state[0],
                          t.next_state[1], t.terminal ? 1.0 : 0.0});
        }
        return rows;
      },
      py::arg("n_samples"), py::arg("seed"),
      "Uniform-policy car-on-hill dataset as rows p, v, a, r, p', v', terminal.");

  m.def(
      "mlp_init",
      [](std::size_t input_dim, std::vector<std::size_t> hidden, std::size_t output_dim,
         std::uint64_t seed) {
        Rng rng(seed);
        return init_he_uniform(make_arch(input_dim, std::move(hidden), output_dim), rng).flatten();
      },
      py::arg("input_dim"), py::arg("hidden"), py::arg("output_dim"), py::arg("seed"));

  m.def(
      "mlp_forward",
      [](std::size_t input_dim, std::vector<std::size_t> hidden, std::size_t output_dim,
         std::vector<double> params, std::vector<double> state) {
        const auto arch = make_arch(input_dim, std::move(hidden), output_dim);
        return iqn::mlp_forward(MlpParams::unflatten(arch, params), state);
      },
      py::arg("input_dim"), py::arg("hidden"), py::arg("output_dim"), py::arg("params"),
      py::arg("state"));

  m.def("ifqi_shift_period", &ifqi_shift_period, py::arg("budget"), py::arg("n_iterations"),
        py::arg("k"));

  m.def(
      "chain_value_iteration",
      [](std::size_t n, double discount, double goal_reward) {
        const auto o = exact_value_iteration(TabularMdp::chain(n, discount, goal_reward));
        return py::make_tuple(o.q, o.residual);
      },
      py::arg("n_states"), py::arg("discount"), py::arg("goal_reward") = 1.0,
      "Q* of the deterministic chain MDP (row-major states x 2) and the final residual.");

  m.def(
      "lqr_q_star",
      [](double a, double b, double q, double c, double r_a, double discount) {
        const LqrModel model{a, b, q, c, r_a, discount};
        const auto o = lqr_oracle_qstar(model).q_star;
        return py::make_tuple(o.a, o.b, o.c);
      },
      py::arg("a") = 0.8, py::arg("b") = -0.9, py::arg("q") = 0.5, py::arg("c") = 0.4,
      py::arg("r_a") = -0.5, py::arg("discount") = 0.5,
      "Coefficients (A, B, C) of Q*(s, a) = A s^2 + B s a + C a^2.");

  m.def(
      "iqm", [](std::vector<double> scores) { return iqn::iqm(scores); }, py::arg("scores"));

  m.def(
      "config_hash", [](const std::string& text) { return iqn::config_hash(parse_config_text(text)); },
      py::arg("config_json"));
  m.def(
      "canonical_config",
      [](const std::string& text) { return canonical_json(parse_config_text(text)); },
      py::arg("config_json"));

  m.def(
      "run_experiment",
      [](const std::filesystem::path& config, const std::filesystem::path& out, std::size_t threads) {
        const auto c = parse_config(config);
        RunSummary s;
        {
          py::gil_scoped_release release;
          s = iqn::run_experiment(c, resolve_output_dir(c, out), threads);
        }
        return summary_dict(s);
      },
      py::arg("config"), py::arg("out") = std::filesystem::path{}, py::arg("threads") = 1);

  m.def(
      "resume",
      [](const std::filesystem::path& checkpoint) {
        py::gil_scoped_release release;
        return resume_run(checkpoint);
      },
      py::arg("checkpoint"));

  m.def("plot_data", &emit_plot_data, py::arg("run_dir"));
}
