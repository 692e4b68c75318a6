#include "iqn/approximator.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "iqn/errors.hpp"

namespace iqn {

std::vector<std::size_t> MlpArchitecture::widths() const {
  std::vector<std::size_t> w;
  w.reserve(hidden.size() + 2);
  w.push_back(input_dim);
  w.insert(w.end(), hidden.begin(), hidden.end());
  w.push_back(output_dim);
  return w;
}

std::size_t MlpArchitecture::num_params() const {
  const auto w = widths();
  std::size_t n = 0;
  for (std::size_t l = 0; l + 1 < w.size(); ++l) n += w[l + 1] * w[l] + w[l + 1];
  return n;
}

void MlpArchitecture::validate() const {
  for (std::size_t width : widths()) {
    if (width == 0) throw InputError("MlpArchitecture: all layer widths must be >= 1");
  }
}

MlpParams::MlpParams(MlpArchitecture arch) : arch_(std::move(arch)) {
  arch_.validate();
  theta_.assign(arch_.num_params(), 0.0);
  index_layers();
}

MlpParams::MlpParams(MlpArchitecture arch, std::vector<double> flat)
    : arch_(std::move(arch)), theta_(std::move(flat)) {
  arch_.validate();
  if (theta_.size() != arch_.num_params()) {
    throw InputError("MlpParams: expected " + std::to_string(arch_.num_params()) +
                     " parameters, got " + std::to_string(theta_.size()));
  }
  index_layers();
}

MlpParams MlpParams::unflatten(const MlpArchitecture& arch, std::span<const double> flat) {
  return MlpParams(arch, std::vector<double>(flat.begin(), flat.end()));
}

void MlpParams::index_layers() {
  widths_ = arch_.widths();
  offsets_.clear();
  std::size_t off = 0;
  for (std::size_t l = 0; l + 1 < widths_.size(); ++l) {
    offsets_.push_back(off);
    off += widths_[l + 1] * widths_[l] + widths_[l + 1];
  }
}

std::span<double> MlpParams::weights(std::size_t layer) {
  return std::span<double>(theta_).subspan(offsets_.at(layer), widths_[layer + 1] * widths_[layer]);
}

std::span<const double> MlpParams::weights(std::size_t layer) const {
  return std::span<const double>(theta_).subspan(offsets_.at(layer),
                                                 widths_[layer + 1] * widths_[layer]);
}

std::span<double> MlpParams::bias(std::size_t layer) {
  return std::span<double>(theta_).subspan(offsets_.at(layer) + widths_[layer + 1] * widths_[layer],
                                           widths_[layer + 1]);
}

std::span<const double> MlpParams::bias(std::size_t layer) const {
  return std::span<const double>(theta_).subspan(
      offsets_.at(layer) + widths_[layer + 1] * widths_[layer], widths_[layer + 1]);
}

MlpParams init_he_uniform(const MlpArchitecture& arch, std::mt19937_64& rng) {
  MlpParams params(arch);
  const auto w = arch.widths();
  for (std::size_t l = 0; l + 1 < w.size(); ++l) {
    const double limit = std::sqrt(6.0 / static_cast<double>(w[l]));
    std::uniform_real_distribution<double> dist(-limit, limit);
    for (double& x : params.weights(l)) x = dist(rng);
  }
  return params;
}

namespace {

// Activations of every layer for one input; acts[0] is the input and
// acts.back() the Q-values. Hidden entries hold post-ReLU values.
class ForwardPass {
 public:
  explicit ForwardPass(const MlpArchitecture& arch) : widths_(arch.widths()) {
    acts_.resize(widths_.size());
    for (std::size_t l = 0; l < widths_.size(); ++l) acts_[l].resize(widths_[l]);
  }

  std::span<const double> run(const MlpParams& params, std::span<const double> state) {
    std::copy(state.begin(), state.end(), acts_[0].begin());
    const std::size_t layers = widths_.size() - 1;
    for (std::size_t l = 0; l < layers; ++l) {
      const auto W = params.weights(l);
      const auto b = params.bias(l);
      const std::size_t in = widths_[l];
      const std::size_t out = widths_[l + 1];
      const bool hidden = l + 1 < layers;
      const auto& x = acts_[l];
      auto& y = acts_[l + 1];
      for (std::size_t o = 0; o < out; ++o) {
        double z = b[o];
        const double* row = W.data() + o * in;
        for (std::size_t i = 0; i < in; ++i) z += row[i] * x[i];
        y[o] = hidden ? std::max(z, 0.0) : z;
      }
    }
    return acts_.back();
  }

  // Accumulates d(scale * Q[action]) / d theta into `grad`.
  void backward(const MlpParams& params, std::size_t action, double scale,
                std::span<double> grad) {
    const std::size_t layers = widths_.size() - 1;
    delta_.assign(widths_.back(), 0.0);
    delta_[action] = scale;
    std::size_t offset = params.flat().size();
    for (std::size_t l = layers; l-- > 0;) {
      const std::size_t in = widths_[l];
      const std::size_t out = widths_[l + 1];
      offset -= out * in + out;
      double* gW = grad.data() + offset;
      double* gb = gW + out * in;
      const auto& x = acts_[l];
      for (std::size_t o = 0; o < out; ++o) {
        const double d = delta_[o];
        if (d == 0.0) continue;
        gb[o] += d;
        double* row = gW + o * in;
        for (std::size_t i = 0; i < in; ++i) row[i] += d * x[i];
      }
      if (l == 0) break;
      const auto W = params.weights(l);
      prev_.assign(in, 0.0);
      for (std::size_t o = 0; o < out; ++o) {
        const double d = delta_[o];
        if (d == 0.0) continue;
        const double* row = W.data() + o * in;
        for (std::size_t i = 0; i < in; ++i) prev_[i] += d * row[i];
      }
      // ReLU derivative, taken as 0 at the kink.
      for (std::size_t i = 0; i < in; ++i) {
        if (x[i] <= 0.0) prev_[i] = 0.0;
      }
      delta_.swap(prev_);
    }
  }

 private:
  std::vector<std::size_t> widths_;
  std::vector<std::vector<double>> acts_;
  std::vector<double> delta_;
  std::vector<double> prev_;
};

void check_state(const MlpArchitecture& arch, std::size_t dim) {
  if (dim != arch.input_dim) {
    throw InputError("mlp: state has dimension " + std::to_string(dim) + ", expected " +
                     std::to_string(arch.input_dim));
  }
}

}  // namespace

std::vector<double> mlp_forward(const MlpParams& params, std::span<const double> state) {
  check_state(params.arch(), state.size());
  ForwardPass pass(params.arch());
  const auto q = pass.run(params, state);
  return {q.begin(), q.end()};
}

std::vector<double> mlp_forward_batch(const MlpParams& params, std::span<const double> states,
                                      std::size_t count) {
  const auto& arch = params.arch();
  if (states.size() != count * arch.input_dim) {
    throw InputError("mlp_forward_batch: states buffer does not match count x input_dim");
  }
  std::vector<double> out(count * arch.output_dim);
  ForwardPass pass(arch);
  for (std::size_t i = 0; i < count; ++i) {
    const auto q = pass.run(params, states.subspan(i * arch.input_dim, arch.input_dim));
    std::copy(q.begin(), q.end(), out.begin() + static_cast<std::ptrdiff_t>(i * arch.output_dim));
  }
  return out;
}

LossAndGradient td_loss_and_gradient(const MlpParams& params, std::span<const TdRow> batch) {
  if (batch.empty()) throw InputError("td_loss_and_gradient: empty batch");
  const auto& arch = params.arch();
  LossAndGradient out;
  out.gradient.assign(params.flat().size(), 0.0);
  ForwardPass pass(arch);
  for (const TdRow& row : batch) {
    check_state(arch, row.state.size());
    if (row.action >= arch.output_dim) throw InputError("td_loss_and_gradient: invalid action");
    const auto q = pass.run(params, row.state);
    const double err = row.target - q[row.action];
    out.loss += err * err;
    pass.backward(params, row.action, -2.0 * err, out.gradient);
  }
  return out;
}

void adam_step(std::span<double> params, std::span<const double> gradient, AdamState& state) {
  if (params.size() != gradient.size() || state.m.size() != params.size() ||
      state.v.size() != params.size()) {
    throw InputError("adam_step: dimension mismatch");
  }
  const AdamConfig& c = state.config;
  state.t += 1;
  const double t = static_cast<double>(state.t);
  const double bc1 = 1.0 - std::pow(c.beta1, t);
  const double bc2 = 1.0 - std::pow(c.beta2, t);
  for (std::size_t i = 0; i < params.size(); ++i) {
    const double g = gradient[i];
    state.m[i] = c.beta1 * state.m[i] + (1.0 - c.beta1) * g;
    state.v[i] = c.beta2 * state.v[i] + (1.0 - c.beta2) * g * g;
    const double m_hat = state.m[i] / bc1;
    const double v_hat = state.v[i] / bc2;
    params[i] -= c.lr * m_hat / (std::sqrt(v_hat) + c.eps);
  }
}

double quadratic_q_forward(const QuadraticQParams& params, double state, double action) {
  return params.m * action * action + params.g * state * state;
}

std::array<double, 2> quadratic_q_gradient(double state, double action) {
  return {action * action, state * state};
}

QuadraticQParams project_quadratic(QuadraticQParams params) {
  params.m = std::min(params.m, kQuadraticMaxM);
  params.g = std::clamp(params.g, -kQuadraticGBound, kQuadraticGBound);
  return params;
}

}  // namespace iqn
