#include <cmath>
#include <random>

#include <doctest.h>

#include "iqn/approximator.hpp"
#include "iqn/errors.hpp"

using namespace iqn;

namespace {

// Central finite differences of the summed squared TD loss.
std::vector<double> numeric_gradient(const MlpParams& p, std::span<const TdRow> batch, double h) {
  std::vector<double> g(p.flat().size());
  for (std::size_t i = 0; i < g.size(); ++i) {
    MlpParams plus = p;
    MlpParams minus = p;
    plus.flat()[i] += h;
    minus.flat()[i] -= h;
    g[i] = (td_loss_and_gradient(plus, batch).loss - td_loss_and_gradient(minus, batch).loss) /
           (2.0 * h);
  }
  return g;
}

}  // namespace

TEST_CASE("forward pass matches a hand computation") {
  // 1 -> 2 (relu) -> 1
  MlpArchitecture arch{1, {2}, 1};
  MlpParams p(arch, {1.0, -2.0, 0.5, 0.0, 3.0, 4.0, -1.0});
  // hidden: relu(1*x + .5), relu(-2x + 0); out: 3 h0 + 4 h1 - 1
  const double x = 0.7;
  const double h0 = std::max(0.0, x + 0.5);
  const double h1 = std::max(0.0, -2.0 * x);
  CHECK(mlp_forward(p, std::vector<double>{x})[0] == doctest::Approx(3 * h0 + 4 * h1 - 1).epsilon(1e-15));
  const double xn = -0.4;
  CHECK(mlp_forward(p, std::vector<double>{xn})[0] ==
        doctest::Approx(3 * std::max(0.0, xn + 0.5) + 4 * std::max(0.0, -2 * xn) - 1));
}

TEST_CASE("batched forward equals per-state forward bitwise") {
  std::mt19937_64 rng(3);
  MlpArchitecture arch{3, {7, 5}, 4};
  const auto p = init_he_uniform(arch, rng);
  std::uniform_real_distribution<double> u(-2, 2);
  std::vector<double> states(3 * 11);
  for (auto& x : states) x = u(rng);
  const auto batch = mlp_forward_batch(p, states, 11);
  for (std::size_t i = 0; i < 11; ++i) {
    const auto q = mlp_forward(p, std::span<const double>(states).subspan(i * 3, 3));
    for (std::size_t a = 0; a < 4; ++a) CHECK(batch[i * 4 + a] == q[a]);
  }
}

TEST_CASE("He-uniform init respects the limit and zero biases") {
  std::mt19937_64 rng(1);
  MlpArchitecture arch{2, {50}, 2};
  const auto p = init_he_uniform(arch, rng);
  CHECK(p.flat().size() == arch.num_params());
  CHECK(arch.num_params() == 2 * 50 + 50 + 50 * 2 + 2);
  for (double w : p.weights(0)) CHECK(std::abs(w) <= std::sqrt(6.0 / 2.0));
  for (double w : p.weights(1)) CHECK(std::abs(w) <= std::sqrt(6.0 / 50.0));
  for (double b : p.bias(0)) CHECK(b == 0.0);
  for (double b : p.bias(1)) CHECK(b == 0.0);
}

TEST_CASE("flatten / unflatten round trip") {
  std::mt19937_64 rng(2);
  MlpArchitecture arch{4, {3, 6}, 2};
  const auto p = init_he_uniform(arch, rng);
  CHECK(MlpParams::unflatten(arch, p.flatten()) == p);
  CHECK_THROWS_AS(MlpParams::unflatten(arch, std::vector<double>(3)), InputError);
}

TEST_CASE("perfect fit gives zero loss and zero gradient") {
  std::mt19937_64 rng(5);
  MlpArchitecture arch{2, {8}, 3};
  const auto p = init_he_uniform(arch, rng);
  std::vector<std::vector<double>> states{{0.1, -0.3}, {0.5, 0.9}};
  std::vector<TdRow> rows;
  for (std::size_t i = 0; i < states.size(); ++i) {
    rows.push_back({states[i], i, mlp_forward(p, states[i])[i]});
  }
  const auto lg = td_loss_and_gradient(p, rows);
  CHECK(lg.loss == 0.0);
  for (double g : lg.gradient) CHECK(g == 0.0);
}

TEST_CASE("backprop matches central differences on random architectures") {
  std::mt19937_64 rng(11);
  std::uniform_int_distribution<int> depth(0, 3);
  std::uniform_int_distribution<int> width(1, 9);
  std::uniform_real_distribution<double> u(-1.5, 1.5);
  for (int trial = 0; trial < 25; ++trial) {
    MlpArchitecture arch;
    arch.input_dim = static_cast<std::size_t>(width(rng));
    for (int l = depth(rng); l > 0; --l) arch.hidden.push_back(static_cast<std::size_t>(width(rng)));
    arch.output_dim = static_cast<std::size_t>(width(rng));
    auto p = init_he_uniform(arch, rng);
    for (auto& x : p.flat()) x += 0.1 * u(rng);  // non-zero biases too
    std::vector<std::vector<double>> states(5, std::vector<double>(arch.input_dim));
    std::vector<TdRow> rows;
    std::uniform_int_distribution<std::size_t> act(0, arch.output_dim - 1);
    for (auto& s : states) {
      for (auto& x : s) x = u(rng);
      rows.push_back({s, act(rng), u(rng)});
    }
    const auto exact = td_loss_and_gradient(p, rows).gradient;
    const auto num = numeric_gradient(p, rows, 1e-6);
    for (std::size_t i = 0; i < exact.size(); ++i) {
      if (std::abs(exact[i]) <= 1e-8) continue;
      CHECK(std::abs(exact[i] - num[i]) / std::max(std::abs(exact[i]), std::abs(num[i])) < 1e-5);
    }
  }
}

TEST_CASE("td gradient rejects mismatched inputs") {
  MlpArchitecture arch{2, {3}, 2};
  MlpParams p(arch);
  std::vector<double> bad{1.0};
  std::vector<TdRow> rows{{bad, 0, 0.0}};
  CHECK_THROWS_AS(td_loss_and_gradient(p, rows), InputError);
  std::vector<double> ok{1.0, 2.0};
  std::vector<TdRow> bad_action{{ok, 5, 0.0}};
  CHECK_THROWS_AS(td_loss_and_gradient(p, bad_action), InputError);
  CHECK_THROWS_AS(td_loss_and_gradient(p, std::span<const TdRow>{}), InputError);
}

TEST_CASE("Adam first step matches the scalar formula") {
  AdamConfig cfg{0.1, 0.9, 0.999, 1.5e-4};
  AdamState st(cfg, 1);
  std::vector<double> theta{2.0};
  const double g = 0.3;
  adam_step(theta, std::vector<double>{g}, st);
  // m_hat = g, v_hat = g^2 after bias correction
  CHECK(theta[0] == doctest::Approx(2.0 - 0.1 * g / (std::abs(g) + 1.5e-4)).epsilon(1e-14));
  CHECK(st.t == 1);
}

TEST_CASE("Adam second step matches a hand recursion") {
  AdamConfig cfg{0.05, 0.9, 0.999, 1e-8};
  AdamState st(cfg, 1);
  std::vector<double> theta{0.0};
  const double g1 = 1.0, g2 = -0.5;
  adam_step(theta, std::vector<double>{g1}, st);
  adam_step(theta, std::vector<double>{g2}, st);
  double m = 0.1 * g1, v = 0.001 * g1 * g1;
  double x = -0.05 * (m / 0.1) / (std::sqrt(v / 0.001) + 1e-8);
  m = 0.9 * m + 0.1 * g2;
  v = 0.999 * v + 0.001 * g2 * g2;
  x -= 0.05 * (m / (1 - 0.81)) / (std::sqrt(v / (1 - 0.999 * 0.999)) + 1e-8);
  CHECK(theta[0] == doctest::Approx(x).epsilon(1e-13));
}

TEST_CASE("Adam with a constant gradient moves by about lr per step") {
  AdamConfig cfg{0.01, 0.9, 0.999, 1e-8};
  AdamState st(cfg, 1);
  std::vector<double> theta{0.0};
  for (int i = 0; i < 2000; ++i) {
    const double before = theta[0];
    adam_step(theta, std::vector<double>{4.0}, st);
    if (i > 1000) CHECK(before - theta[0] == doctest::Approx(0.01).epsilon(1e-6));
  }
}

TEST_CASE("Adam with zero gradient leaves parameters unchanged") {
  AdamState st(AdamConfig{}, 3);
  std::vector<double> theta{1.0, -2.0, 3.0};
  adam_step(theta, std::vector<double>(3, 0.0), st);
  CHECK(theta == std::vector<double>{1.0, -2.0, 3.0});
}

TEST_CASE("quadratic family: forward, gradient, projection") {
  QuadraticQParams p{-0.5, 0.3};
  CHECK(quadratic_q_forward(p, 2.0, 3.0) == doctest::Approx(-0.5 * 9 + 0.3 * 4));
  const auto g = quadratic_q_gradient(2.0, 3.0);
  CHECK(g[0] == 9.0);
  CHECK(g[1] == 4.0);
  const auto q = project_quadratic({0.2, 0.9});
  CHECK(q.m == kQuadraticMaxM);
  CHECK(q.g == kQuadraticGBound);
  CHECK(project_quadratic({-3.0, -1.0}).g == -kQuadraticGBound);
  CHECK(project_quadratic({-3.0, 0.1}) == QuadraticQParams{-3.0, 0.1});
}

TEST_CASE("identity cases of the forward pass") {
  MlpArchitecture arch{2, {3}, 2};
  MlpParams zero(arch);
  CHECK(mlp_forward(zero, std::vector<double>{0.3, -7.0}) == std::vector<double>{0.0, 0.0});
  MlpParams eye(MlpArchitecture{2, {}, 2}, {1.0, 0.0, 0.0, 1.0, 0.0, 0.0});
  CHECK(mlp_forward(eye, std::vector<double>{1.0, -2.0}) == std::vector<double>{1.0, -2.0});
}

TEST_CASE("forward pass is pure and matches a scalar re-implementation") {
  std::mt19937_64 rng(0);
  MlpArchitecture arch{2, {50}, 2};
  const auto p = init_he_uniform(arch, rng);
  const std::vector<double> s{-0.4, 1.3};
  const auto q = mlp_forward(p, s);
  CHECK(mlp_forward(p, s) == q);
  const auto w0 = p.weights(0), b0 = p.bias(0), w1 = p.weights(1), b1 = p.bias(1);
  for (std::size_t a = 0; a < 2; ++a) {
    double out = b1[a];
    for (std::size_t h = 0; h < 50; ++h) {
      double z = b0[h];
      z += w0[h * 2 + 0] * s[0];
      z += w0[h * 2 + 1] * s[1];
      out += w1[a * 50 + h] * (z > 0.0 ? z : 0.0);
    }
    CHECK(q[a] == doctest::Approx(out).epsilon(1e-14));
  }
}

TEST_CASE("single-row gradient is -2 delta dQ/dtheta") {
  // Linear output: dQ(s, a)/dW[a][i] = s_i, dQ/db[a] = 1.
  MlpParams p(MlpArchitecture{2, {}, 2}, {0.5, -1.0, 2.0, 0.25, 0.1, -0.2});
  const std::vector<double> s{0.7, -0.3};
  const double q = mlp_forward(p, s)[1];
  const double delta = 0.8;
  std::vector<TdRow> rows{{s, 1, q + delta}};
  const auto g = td_loss_and_gradient(p, rows).gradient;
  CHECK(g[0] == 0.0);
  CHECK(g[1] == 0.0);
  CHECK(g[2] == doctest::Approx(-2 * delta * s[0]));
  CHECK(g[3] == doctest::Approx(-2 * delta * s[1]));
  CHECK(g[4] == 0.0);
  CHECK(g[5] == doctest::Approx(-2 * delta));
}

TEST_CASE("quadratic family examples and projection idempotence") {
  CHECK(quadratic_q_forward({-1.0, 0.4}, 0.0, 0.0) == 0.0);
  CHECK(quadratic_q_forward({-1.0, 0.4}, 1.0, 2.0) == doctest::Approx(-3.6));
  CHECK(quadratic_q_gradient(1.0, 2.0) == std::array<double, 2>{4.0, 1.0});
  CHECK(project_quadratic({-1.0, 0.0}) == QuadraticQParams{-1.0, 0.0});
  CHECK(project_quadratic({0.5, 0.0}) == QuadraticQParams{-1e-6, 0.0});
  CHECK(project_quadratic({-1.0, 0.9}) == QuadraticQParams{-1.0, 0.4});
  for (QuadraticQParams p : {QuadraticQParams{3.0, -2.0}, QuadraticQParams{-0.2, 0.1}}) {
    CHECK(project_quadratic(project_quadratic(p)) == project_quadratic(p));
  }
}
