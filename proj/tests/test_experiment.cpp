#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>

#include <doctest.h>

#include "iqn/errors.hpp"
#include "iqn/experiment.hpp"

using namespace iqn;
namespace fs = std::filesystem;

namespace {

ConfigError::Category category_of(const std::string& text) {
  try {
    parse_config_text(text);
  } catch (const ConfigError& e) {
    return e.category();
  }
  FAIL("expected a ConfigError");
  return ConfigError::Category::kInvariant;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

fs::path fresh_dir(const std::string& name) {
  const auto dir = fs::temp_directory_path() / ("iqn_test_" + name);
  fs::remove_all(dir);
  return dir;
}

const char* kTiny = R"({
  "kind": "ifqi_car_on_hill",
  "name": "tiny",
  "seeds": [0, 1],
  "ks": [1, 2],
  "train": {"hidden": [6], "batch_size": 10, "bellman_iterations": 4, "gradient_budget": 40},
  "car_on_hill": {"n_samples": 200, "oracle_resolution": 17},
  "diagnostics": {"nu_samples": 50, "cadence": 2, "checkpoint_every": 10, "bootstrap_resamples": 50}
})";

}  // namespace

TEST_CASE("defaults") {
  const auto c = parse_config_text(R"({"kind": "table1"})");
  CHECK(c.kind == ExperimentKind::kTable1);
  CHECK(c.name == "table1");
  CHECK(c.train.d == 1);
  CHECK(c.train.batch_size == 100);
  CHECK(c.seeds == std::vector<std::uint64_t>{0});
}

TEST_CASE("config errors are categorised") {
  CHECK(category_of("{\"kind\": \"table1\",\n \"bogus\": 1}") == ConfigError::Category::kUnknownKey);
  CHECK(category_of(R"({"kind": "table1", "train": {"dd": 1}})") == ConfigError::Category::kUnknownKey);
  CHECK(category_of("{\"kind\": \"table1\",\n\n ]") == ConfigError::Category::kSyntax);
  CHECK(category_of(R"({"name": "x"})") == ConfigError::Category::kInvariant);
  CHECK(category_of(R"({"kind": "nope"})") == ConfigError::Category::kInvariant);
  CHECK(category_of(R"({"kind": "table1", "seeds": [1, 1]})") == ConfigError::Category::kInvariant);
  CHECK(category_of(R"({"kind": "table1", "ks": [41]})") == ConfigError::Category::kInvariant);
  CHECK(category_of(R"({"kind": "table1", "train": {"gamma": 1.0}})") ==
        ConfigError::Category::kInvariant);
  CHECK(category_of(R"({"kind": "lqr_geometry", "lqr": {"discount": 0.99}})") ==
        ConfigError::Category::kInvariant);
  try {
    parse_config(fs::temp_directory_path() / "iqn_no_such_config.json");
    FAIL("expected a ConfigError");
  } catch (const ConfigError& e) {
    CHECK(e.category() == ConfigError::Category::kMissingFile);
  }
}

TEST_CASE("unknown key errors name the key and its line") {
  try {
    parse_config_text("{\"kind\": \"table1\",\n\"train\": {\n  \"lrr\": 3}}");
    FAIL("expected a ConfigError");
  } catch (const ConfigError& e) {
    const std::string msg = e.what();
    CHECK(msg.find("lrr") != std::string::npos);
    CHECK(msg.find("line 3") != std::string::npos);
  }
}

TEST_CASE("config hash ignores key order, whitespace and output_dir") {
  const auto a = parse_config_text(R"({"kind": "table1", "seeds": [0, 1], "ks": [1, 4]})");
  const auto b = parse_config_text(
      "{\n  \"ks\": [1, 4],\n  \"output_dir\": \"/tmp/x\",\n  \"seeds\": [0, 1],\n  \"kind\": \"table1\"\n}");
  CHECK(config_hash(a) == config_hash(b));
  CHECK(config_hash(a).size() == 64);
  const auto c = parse_config_text(R"({"kind": "table1", "seeds": [0, 2], "ks": [1, 4]})");
  CHECK(config_hash(a) != config_hash(c));
  // Canonical JSON round-trips to the same hash.
  CHECK(config_hash(parse_config_text(canonical_json(a))) == config_hash(a));
}

TEST_CASE("output directory resolution") {
  auto c = parse_config_text(R"({"kind": "table1", "name": "t"})");
  CHECK(resolve_output_dir(c, "/o") == fs::path("/o"));
  ::setenv(kOutputRootEnv, "/root_x", 1);
  CHECK(resolve_output_dir(c) == fs::path("/root_x") / ("t-" + config_hash(c).substr(0, 12)));
  ::unsetenv(kOutputRootEnv);
  CHECK(resolve_output_dir(c).parent_path() == fs::path("runs"));
  c.output_dir = "/cfg";
  CHECK(resolve_output_dir(c) == fs::path("/cfg"));
}

TEST_CASE("runs are deterministic, thread-count independent and resumable") {
  const auto config = parse_config_text(kTiny);
  const auto a = fresh_dir("run_a");
  const auto b = fresh_dir("run_b");
  run_experiment(config, a, 1);
  const auto summary = run_experiment(config, b, 3);
  CHECK(summary.runs.size() == 4);
  for (const char* f : {"K1/seed0/metrics.json", "K2/seed1/curves.csv", "K2/seed0/diagnostics.csv",
                        "summary.csv", "config.json"}) {
    CHECK_MESSAGE(slurp(a / f) == slurp(b / f), f);
  }

  // Resume from an intermediate checkpoint after deleting the outputs.
  const auto run = a / "K2" / "seed1";
  const auto metrics = slurp(run / "metrics.json");
  const auto curves = slurp(run / "curves.csv");
  const auto diag = slurp(run / "diagnostics.csv");
  auto cfg_keep = config;
  cfg_keep.keep_checkpoints = true;
  const auto c = fresh_dir("run_c");
  run_experiment(cfg_keep, c, 1);
  const auto rc = c / "K2" / "seed1";
  REQUIRE(fs::exists(rc / "checkpoint_00000020.bin"));
  fs::remove(rc / "metrics.json");
  fs::remove(rc / "curves.csv");
  fs::remove(rc / "diagnostics.csv");
  CHECK(resume_run(rc / "checkpoint_00000020.bin") == rc);
  CHECK(slurp(rc / "metrics.json") == metrics);
  CHECK(slurp(rc / "curves.csv") == curves);
  CHECK(slurp(rc / "diagnostics.csv") == diag);

  const auto plot = emit_plot_data(a);
  const auto text = slurp(plot);
  CHECK(text.rfind("series,x,y,seed\n", 0) == 0);
  CHECK(text.find("perf_loss_K2") != std::string::npos);
  CHECK(text.find("error_sum_K1") != std::string::npos);
  for (const auto& d : {a, b, c}) fs::remove_all(d);
}

TEST_CASE("plotdata reports missing inputs") {
  const auto dir = fresh_dir("empty_run");
  fs::create_directories(dir);
  CHECK_THROWS_AS(emit_plot_data(dir), InputError);
  CHECK_THROWS_AS(emit_plot_data(dir / "nope"), InputError);
  fs::remove_all(dir);
}

TEST_CASE("misspelled key and zero window size") {
  try {
    parse_config_text(R"({"kind": "table1", "train": {"lerning_rate": 0.1}})");
    FAIL("expected a ConfigError");
  } catch (const ConfigError& e) {
    CHECK(e.category() == ConfigError::Category::kUnknownKey);
    CHECK(std::string(e.what()).find("lerning_rate") != std::string::npos);
  }
  CHECK(category_of(R"({"kind": "table1", "ks": [0]})") == ConfigError::Category::kInvariant);
}
