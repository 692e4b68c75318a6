#include <algorithm>
#include <cmath>
#include <numeric>

#include "iqn/diagnostics.hpp"
#include "iqn/errors.hpp"

namespace iqn {

double iqm(std::span<const double> scores) {
  if (scores.empty()) throw InputError("iqm: no scores");
  std::vector<double> sorted(scores.begin(), scores.end());
  std::sort(sorted.begin(), sorted.end());
  const std::size_t trim = sorted.size() / 4;
  const auto first = sorted.begin() + static_cast<std::ptrdiff_t>(trim);
  const auto last = sorted.end() - static_cast<std::ptrdiff_t>(trim);
  return std::accumulate(first, last, 0.0) / static_cast<double>(last - first);
}

namespace {

// Linear interpolation between order statistics.
double quantile(const std::vector<double>& sorted, double q) {
  const double pos = q * static_cast<double>(sorted.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(pos));
  const auto hi = std::min(lo + 1, sorted.size() - 1);
  const double frac = pos - static_cast<double>(lo);
  return sorted[lo] + frac * (sorted[hi] - sorted[lo]);
}

}  // namespace

std::pair<double, double> bootstrap_ci(std::span<const double> scores, std::size_t n_resamples,
                                       double level, Rng& rng) {
  if (scores.size() < 2) throw InputError("bootstrap_ci: need at least two seeds");
  if (n_resamples == 0) throw InputError("bootstrap_ci: need at least one resample");
  if (!(level > 0.0 && level < 1.0)) throw InputError("bootstrap_ci: level must be in (0, 1)");
  std::uniform_int_distribution<std::size_t> pick(0, scores.size() - 1);
  std::vector<double> stats;
  stats.reserve(n_resamples);
  std::vector<double> resample(scores.size());
  for (std::size_t b = 0; b < n_resamples; ++b) {
    for (auto& x : resample) x = scores[pick(rng)];
    stats.push_back(iqm(resample));
  }
  std::sort(stats.begin(), stats.end());
  const double alpha = 1.0 - level;
  return {quantile(stats, alpha / 2.0), quantile(stats, 1.0 - alpha / 2.0)};
}

}  // namespace iqn
