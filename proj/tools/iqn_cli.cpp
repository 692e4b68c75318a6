#include <cstdio>
#include <cstdlib>
#include <iostream>
#include <sstream>

#include <CLI11.hpp>

#include "iqn/errors.hpp"
#include "iqn/experiment.hpp"

namespace {

std::vector<std::uint64_t> parse_seeds(const std::string& text) {
  // "0,1,2" or "0-9"
  std::vector<std::uint64_t> out;
  std::stringstream ss(text);
  std::string part;
  while (std::getline(ss, part, ',')) {
    const auto dash = part.find('-');
    try {
      if (dash == std::string::npos) {
        out.push_back(std::stoull(part));
      } else {
        const auto lo = std::stoull(part.substr(0, dash));
        const auto hi = std::stoull(part.substr(dash + 1));
        if (hi < lo) throw std::invalid_argument(part);
        for (auto s = lo; s <= hi; ++s) out.push_back(s);
      }
    } catch (const std::logic_error&) {
      throw CLI::ValidationError("--seeds", "expected a list like 0,1,2 or 0-9, got \"" + text + "\"");
    }
  }
  if (out.empty()) throw CLI::ValidationError("--seeds", "empty seed list");
  return out;
}

void print_summary(const iqn::RunSummary& s) {
  std::printf("config hash %s\noutput      %s\nwall clock  %.1f s\n", s.config_hash.c_str(),
              s.output_dir.string().c_str(), s.wall_clock_seconds);
  for (const auto& m : s.summaries) {
    std::printf("  K=%-3zu %-34s IQM %-12.6g CI [%.6g, %.6g]\n", m.k, m.metric.c_str(), m.iqm,
                m.ci_low, m.ci_high);
  }
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Iterated Q-Network experiments"};
  app.require_subcommand(1);

  std::string seeds_text;
  std::string out_dir;
  std::size_t threads = 1;

  auto* run = app.add_subcommand("run", "Run every (K, seed) of an experiment config");
  std::string run_config;
  run->add_option("config", run_config, "Experiment config (JSON)")->required();
  run->add_option("--seeds", seeds_text, "Override the seed list: 0,1,2 or 0-9");
  run->add_option("--out", out_dir,
                  std::string("Output directory (default: $") + iqn::kOutputRootEnv +
                      " or ./runs, then <name>-<hash>)");
  run->add_option("--threads", threads, "Seeds run concurrently")->check(CLI::PositiveNumber);

  auto* resume = app.add_subcommand("resume", "Continue an i-FQI run from its checkpoint");
  std::string checkpoint;
  resume->add_option("checkpoint", checkpoint, "checkpoint.bin of one run")->required();

  auto* plot = app.add_subcommand("plotdata", "Write plot_data.csv (series,x,y,seed) for a run dir");
  std::string run_dir;
  plot->add_option("run-dir", run_dir, "Output directory of `run`")->required();

  auto* validate = app.add_subcommand("validate", "Parse a config and print it with defaults");
  std::string validate_config;
  validate->add_option("config", validate_config, "Experiment config (JSON)")->required();

  CLI11_PARSE(app, argc, argv);

  try {
    if (*run) {
      auto config = iqn::parse_config(run_config);
      if (!seeds_text.empty()) {
        config.seeds = parse_seeds(seeds_text);
        config.validate();
      }
      const auto dir = iqn::resolve_output_dir(config, out_dir);
      print_summary(iqn::run_experiment(config, dir, threads));
    } else if (*resume) {
      std::cout << "resumed into " << iqn::resume_run(checkpoint).string() << "\n";
    } else if (*plot) {
      std::cout << iqn::emit_plot_data(run_dir).string() << "\n";
    } else if (*validate) {
      const auto config = iqn::parse_config(validate_config);
      std::cout << iqn::canonical_json(config) << "\nhash " << iqn::config_hash(config) << "\n";
    }
  } catch (const iqn::ConfigError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const CLI::Error& e) {
    return app.exit(e);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
