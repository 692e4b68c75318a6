#include <cmath>
#include <deque>
#include <filesystem>
#include <random>

#include <doctest.h>

#include "iqn/envs.hpp"
#include "iqn/errors.hpp"
#include "iqn/replay.hpp"

using namespace iqn;

namespace {

// Forward Euler with a very small step: an independent oracle for the RK4
// integrator.
CarOnHillState euler(CarOnHillState s, double force, double duration, int steps) {
  const double h = duration / steps;
  for (int i = 0; i < steps; ++i) {
    const double p = s.position;
    const double v = s.velocity;
    const double d1 = p < 0 ? 2 * p + 1 : 1 / std::pow(1 + 5 * p * p, 1.5);
    const double d2 = p < 0 ? 2 : -15 * p / std::pow(1 + 5 * p * p, 2.5);
    const double acc = force / (1 + d1 * d1) - 9.81 * d1 / (1 + d1 * d1) - v * v * d1 * d2 / (1 + d1 * d1);
    s.position = p + h * v;
    s.velocity = v + h * acc;
  }
  return s;
}

std::filesystem::path temp_path(const std::string& name) {
  return std::filesystem::temp_directory_path() / ("iqn_test_" + name);
}

}  // namespace

TEST_CASE("car-on-hill full-thrust trajectory tracks a fine Euler oracle per step") {
  CarOnHillState s = car_on_hill::kInitialState;
  for (int step = 0; step < 200 && !car_on_hill::is_terminal(s); ++step) {
    const auto next = car_on_hill_step(s, 1).next;
    const auto oracle = euler(s, 4.0, 0.1, 1000);  // dt = 1e-4
    CHECK(std::abs(next.position - oracle.position) < 1e-4);
    s = next;
  }
}

TEST_CASE("car-on-hill RK4 agrees with a very fine Euler oracle on the smooth branch") {
  std::mt19937_64 rng(4);
  std::uniform_real_distribution<double> p(-0.9, -0.3);
  std::uniform_real_distribution<double> v(-1.0, 1.0);
  for (int i = 0; i < 30; ++i) {
    const CarOnHillState s{p(rng), v(rng)};
    for (double force : {-4.0, 4.0}) {
      const auto rk = car_on_hill::integrate(s, force);
      const auto eu = euler(s, force, 0.1, 200000);
      if (rk.position >= 0.0 || eu.position >= 0.0) continue;  // crossed the kink in H''
      CHECK(rk.position == doctest::Approx(eu.position).epsilon(1e-5));
      CHECK(rk.velocity == doctest::Approx(eu.velocity).epsilon(1e-5));
    }
  }
}

TEST_CASE("zero thrust changes velocity by less than g dt per step") {
  CarOnHillState s{0.3, 0.5};
  for (int i = 0; i < 20 && !car_on_hill::is_terminal(s); ++i) {
    const auto next = car_on_hill::integrate(s, 0.0);
    CHECK(std::abs(next.velocity - s.velocity) < 9.81 * 0.1);
    s = next;
  }
}

TEST_CASE("car-on-hill hill derivatives") {
  CHECK(car_on_hill::hill_slope(-0.5) == 0.0);
  CHECK(car_on_hill::hill_slope(0.0) == 1.0);
  CHECK(car_on_hill::hill_curvature(-0.3) == 2.0);
  // H(p) = p / sqrt(1 + 5p^2) for p >= 0; check H' numerically.
  const auto h = [](double x) { return x / std::sqrt(1 + 5 * x * x); };
  const double x = 0.4, e = 1e-6;
  CHECK(car_on_hill::hill_slope(x) == doctest::Approx((h(x + e) - h(x - e)) / (2 * e)).epsilon(1e-8));
}

TEST_CASE("car-on-hill rewards and terminals") {
  CHECK(car_on_hill::reward({1.01, 0.0}) == 1.0);
  CHECK(car_on_hill::reward({-1.01, 0.0}) == -1.0);
  CHECK(car_on_hill::reward({0.0, 3.01}) == -1.0);
  CHECK(car_on_hill::reward({1.01, 3.5}) == -1.0);
  CHECK(car_on_hill::reward({1.0, 3.0}) == 0.0);
  CHECK(car_on_hill::is_terminal({1.5, 0.0}));
  CHECK_FALSE(car_on_hill::is_terminal({0.0, 0.0}));
  CHECK_THROWS_AS(car_on_hill_step({1.5, 0.0}, 0), UsageError);
  CHECK_THROWS_AS(car_on_hill_step({0.0, 0.0}, 2), InputError);
}

TEST_CASE("car-on-hill starting at rest in the valley bottom") {
  // H'(-0.5) = 0: with force -4 the car accelerates left at -4 / (1 + 0).
  const auto s = car_on_hill::derivatives({-0.5, 0.0}, -4.0);
  CHECK(s[0] == 0.0);
  CHECK(s[1] == doctest::Approx(-4.0));
}

TEST_CASE("LQR step") {
  LqrModel m;
  const auto s = lqr_step(m, 1.0, 0.5);
  CHECK(s.next == doctest::Approx(0.8 - 0.45));
  CHECK(s.reward == doctest::Approx(0.5 + 0.2 - 0.125));
  CHECK_NOTHROW(m.validate());
  LqrModel bad;
  bad.discount = 0.9;
  CHECK_THROWS_AS(bad.validate(), ModelError);
}

TEST_CASE("tabular MDP validation") {
  auto mdp = TabularMdp::chain(4, 0.9);
  CHECK_NOTHROW(mdp.validate());
  mdp.transitions[0][0][0] = 0.9;
  CHECK_THROWS_AS(mdp.validate(), ModelError);
  auto d = TabularMdp::chain(4, 0.9);
  d.discount = 1.0;
  CHECK_THROWS_AS(d.validate(), ModelError);
}

TEST_CASE("tabular step frequencies match the transition row") {
  TabularMdp mdp = TabularMdp::chain(3, 0.9);
  mdp.transitions[0][1] = {0.2, 0.5, 0.3};
  mdp.validate();
  Rng rng(9);
  const int n = 100000;
  std::vector<int> counts(3);
  for (int i = 0; i < n; ++i) counts[tabular_step(mdp, 0, 1, rng).next]++;
  for (std::size_t j = 0; j < 3; ++j) {
    const double p = mdp.transitions[0][1][j];
    const double sigma = std::sqrt(n * p * (1 - p));
    CHECK(std::abs(counts[j] - n * p) < 4 * sigma);
  }
}

TEST_CASE("chain MDP structure") {
  const auto mdp = TabularMdp::chain(5, 0.9, 2.0);
  Rng rng(0);
  CHECK(tabular_step(mdp, 0, 0, rng).next == 0);
  CHECK(tabular_step(mdp, 2, 1, rng).next == 3);
  const auto goal = tabular_step(mdp, 3, 1, rng);
  CHECK(goal.next == 4);
  CHECK(goal.reward == 2.0);
  CHECK(mdp.terminal[4]);
}

TEST_CASE("uniform dataset has exactly n samples and restarts after terminals") {
  const auto data = collect_uniform_dataset(3000, car_on_hill::kInitialState, 7);
  CHECK(data.size() == 3000);
  CHECK(data.front().state == std::vector<double>{-0.5, 0.0});
  for (std::size_t i = 0; i + 1 < data.size(); ++i) {
    if (data[i].terminal) {
      CHECK(data[i + 1].state == std::vector<double>{-0.5, 0.0});
    } else {
      CHECK(data[i + 1].state == data[i].next_state);
    }
  }
  CHECK(collect_uniform_dataset(3000, car_on_hill::kInitialState, 7) == data);
}

TEST_CASE("dataset CSV and binary round trips are exact") {
  const auto data = collect_uniform_dataset(200, car_on_hill::kInitialState, 3);
  const auto csv = temp_path("ds.csv");
  const auto bin = temp_path("ds.bin");
  write_dataset_csv(csv, data);
  write_dataset_binary(bin, data);
  CHECK(read_dataset_csv(csv) == data);
  CHECK(read_dataset_binary(bin) == data);
  std::filesystem::remove(csv);
  std::filesystem::remove(bin);
}

TEST_CASE("replay buffer is FIFO against a reference deque") {
  ReplayBuffer buf(7);
  std::deque<Transition> ref;
  for (int i = 0; i < 30; ++i) {
    Transition t{{static_cast<double>(i)}, 0, static_cast<double>(i), {0.0}, false};
    buf.push(t);
    ref.push_back(t);
    if (ref.size() > 7) ref.pop_front();
    REQUIRE(buf.size() == ref.size());
    for (std::size_t j = 0; j < ref.size(); ++j) CHECK(buf.at(j) == ref[j]);
  }
  CHECK(buf.pushes() == 30);
  CHECK(buf.capacity() == 7);
  CHECK_THROWS_AS(buf.at(7), InputError);
}

TEST_CASE("replay sampling is uniform and deterministic") {
  ReplayBuffer buf(4);
  for (int i = 0; i < 4; ++i) buf.push({{static_cast<double>(i)}, 0, 0.0, {0.0}, false});
  Rng rng(1);
  const int n = 40000;
  std::vector<int> counts(4);
  for (std::size_t i : buf.sample_indices(n, rng)) counts[i]++;
  for (int c : counts) CHECK(std::abs(c - n / 4.0) < 4 * std::sqrt(n * 0.25 * 0.75));
  Rng a(5), b(5);
  CHECK(buf.sample_indices(10, a) == buf.sample_indices(10, b));
}

TEST_CASE("sampling an empty buffer is a usage error") {
  ReplayBuffer buf(3);
  Rng rng(0);
  CHECK_THROWS_AS(buf.sample_indices(1, rng), UsageError);
  CHECK_THROWS_AS(ReplayBuffer(0), InputError);
}

TEST_CASE("car-on-hill terminal regions and reward support") {
  CHECK(car_on_hill::reward({1.05, 0.0}) == 1.0);
  CHECK(car_on_hill::is_terminal({1.05, 0.0}));
  CHECK(car_on_hill::reward({-1.05, 0.0}) == -1.0);
  CHECK(car_on_hill::is_terminal({-1.05, 0.0}));
  const auto data = collect_uniform_dataset(5000, car_on_hill::kInitialState, 11);
  for (const auto& t : data) CHECK((t.reward == -1.0 || t.reward == 0.0 || t.reward == 1.0));
}

TEST_CASE("LQR examples and linearity") {
  LqrModel m;
  CHECK(lqr_step(m, 1, 0).next == doctest::Approx(0.8));
  CHECK(lqr_step(m, 1, 0).reward == doctest::Approx(0.5));
  CHECK(lqr_step(m, 0, 0).next == 0.0);
  CHECK(lqr_step(m, 0, 0).reward == 0.0);
  CHECK(lqr_step(m, 1, 1).next == doctest::Approx(-0.1));
  CHECK(lqr_step(m, 1, 1).reward == doctest::Approx(0.4));
  for (double alpha : {-3.0, 0.5, 2.0}) {
    CHECK(lqr_step(m, alpha * 0.7, alpha * -0.2).next ==
          doctest::Approx(alpha * lqr_step(m, 0.7, -0.2).next));
  }
}

TEST_CASE("dataset edge cases") {
  const auto one = collect_uniform_dataset(1, car_on_hill::kInitialState, 0);
  REQUIRE(one.size() == 1);
  CHECK(one[0].state == std::vector<double>{-0.5, 0.0});
  CHECK_THROWS_AS(collect_uniform_dataset(0, car_on_hill::kInitialState, 0), InputError);
}

TEST_CASE("tabular step examples") {
  TabularMdp mdp = TabularMdp::chain(3, 0.9);
  mdp.rewards[0][1] = 2.0;
  Rng rng(1);
  for (int i = 0; i < 10; ++i) {
    const auto s = tabular_step(mdp, 0, 1, rng);
    CHECK(s.next == 1);
    CHECK(s.reward == 2.0);
  }
  mdp.transitions[0][1] = {0.5, 0.5, 0.0};
  const int n = 100000;
  int zeros = 0;
  for (int i = 0; i < n; ++i) zeros += tabular_step(mdp, 0, 1, rng).next == 0;
  CHECK(std::abs(zeros - n * 0.5) < 3 * std::sqrt(n * 0.25));
}

TEST_CASE("replay buffer examples") {
  ReplayBuffer buf(2);
  auto t = [](double x) { return Transition{{x}, 0, x, {x}, false}; };
  buf.push(t(1));
  CHECK(buf.size() == 1);
  buf.push(t(2));
  buf.push(t(3));
  CHECK(buf.contents() == std::vector<Transition>{t(2), t(3)});

  ReplayBuffer single(5);
  single.push(t(9));
  Rng rng(0);
  for (const auto& x : single.sample_minibatch(7, rng)) CHECK(x == t(9));

  ReplayBuffer ten(10);
  for (int i = 0; i < 10; ++i) ten.push(t(i));
  const int n = 100000;
  std::vector<int> counts(10);
  for (std::size_t i : ten.sample_indices(n, rng)) counts[i]++;
  for (int c : counts) CHECK(std::abs(c - n * 0.1) < 3.5 * std::sqrt(n * 0.1 * 0.9));
}
