#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <random>
#include <span>
#include <vector>

namespace iqn {

enum class Activation { kRelu };

// Shape of a dense feed-forward Q-network: input -> hidden... -> one output
// per discrete action. An empty `hidden` list gives a single linear layer.
struct MlpArchitecture {
  std::size_t input_dim = 0;
  std::vector<std::size_t> hidden;
  std::size_t output_dim = 0;
  Activation activation = Activation::kRelu;

  // Layer widths including input and output.
  std::vector<std::size_t> widths() const;
  std::size_t num_layers() const { return hidden.size() + 1; }
  std::size_t num_params() const;
  void validate() const;

  friend bool operator==(const MlpArchitecture&, const MlpArchitecture&) = default;
};

// Parameters stored as one flat vector theta. Layer l occupies a weight block
// (out x in, row-major) followed by its bias vector.
class MlpParams {
 public:
  MlpParams() = default;
  explicit MlpParams(MlpArchitecture arch);  // all zeros
  MlpParams(MlpArchitecture arch, std::vector<double> flat);

  const MlpArchitecture& arch() const { return arch_; }

  std::span<double> flat() { return theta_; }
  std::span<const double> flat() const { return theta_; }
  std::vector<double> flatten() const { return theta_; }
  static MlpParams unflatten(const MlpArchitecture& arch, std::span<const double> flat);

  std::span<double> weights(std::size_t layer);
  std::span<const double> weights(std::size_t layer) const;
  std::span<double> bias(std::size_t layer);
  std::span<const double> bias(std::size_t layer) const;

  friend bool operator==(const MlpParams&, const MlpParams&) = default;

 private:
  void index_layers();

  MlpArchitecture arch_;
  std::vector<double> theta_;
  std::vector<std::size_t> widths_;
  std::vector<std::size_t> offsets_;  // start of each layer's weight block
};

// He-uniform weights (limit sqrt(6 / fan_in)), zero biases.
MlpParams init_he_uniform(const MlpArchitecture& arch, std::mt19937_64& rng);

std::vector<double> mlp_forward(const MlpParams& params, std::span<const double> state);

// Q-values for `count` states stored contiguously (count x input_dim);
// result is count x output_dim, row-major.
std::vector<double> mlp_forward_batch(const MlpParams& params, std::span<const double> states,
                                      std::size_t count);

struct TdRow {
  std::span<const double> state;
  std::size_t action = 0;
  double target = 0.0;
};

struct LossAndGradient {
  double loss = 0.0;
  std::vector<double> gradient;  // same layout as MlpParams::flat()
};

// loss = sum_i (target_i - Q(s_i, a_i))^2 with its exact gradient w.r.t. theta.
LossAndGradient td_loss_and_gradient(const MlpParams& params, std::span<const TdRow> batch);

struct AdamConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1.5e-4;

  friend bool operator==(const AdamConfig&, const AdamConfig&) = default;
};

struct AdamState {
  AdamConfig config;
  std::vector<double> m;
  std::vector<double> v;
  std::uint64_t t = 0;

  AdamState() = default;
  AdamState(AdamConfig cfg, std::size_t dim) : config(cfg), m(dim, 0.0), v(dim, 0.0) {}

  friend bool operator==(const AdamState&, const AdamState&) = default;
};

// Bias-corrected Adam, epsilon added outside the square root:
//   theta -= lr * m_hat / (sqrt(v_hat) + eps)
void adam_step(std::span<double> params, std::span<const double> gradient, AdamState& state);

// Q(s, a) = M a^2 + G s^2, the two-parameter family used for the LQR study.
struct QuadraticQParams {
  double m = -1.0;
  double g = 0.0;

  friend bool operator==(const QuadraticQParams&, const QuadraticQParams&) = default;
};

inline constexpr double kQuadraticMaxM = -1e-6;
inline constexpr double kQuadraticGBound = 0.4;

double quadratic_q_forward(const QuadraticQParams& params, double state, double action);

// d Q / d (M, G) = (a^2, s^2).
std::array<double, 2> quadratic_q_gradient(double state, double action);

// M <= -1e-6, G in [-0.4, 0.4].
QuadraticQParams project_quadratic(QuadraticQParams params);

}  // namespace iqn
