#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <map>
#include <sstream>

#include "iqn/diagnostics.hpp"
#include "iqn/errors.hpp"

namespace iqn {

namespace {

double mean_squared_gap(std::span<const double> x, std::span<const double> y) {
  double total = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double d = x[i] - y[i];
    total += d * d;
  }
  return total / static_cast<double>(x.size());
}

// Row-major matrices of current and next states for batched forwards.
struct PackedStates {
  std::size_t count = 0;
  std::vector<double> states;
  std::vector<double> next_states;
};

PackedStates pack(std::span<const Transition> data) {
  PackedStates p;
  p.count = data.size();
  for (const auto& t : data) {
    p.states.insert(p.states.end(), t.state.begin(), t.state.end());
    p.next_states.insert(p.next_states.end(), t.next_state.begin(), t.next_state.end());
  }
  return p;
}

std::vector<double> targets_for(const MlpParams& params, std::span<const Transition> data,
                                const PackedStates& packed, double gamma) {
  const std::size_t na = params.arch().output_dim;
  const auto q_next = mlp_forward_batch(params, packed.next_states, packed.count);
  std::vector<double> y(data.size());
  for (std::size_t i = 0; i < data.size(); ++i) {
    if (data[i].terminal) {
      y[i] = data[i].reward;
      continue;
    }
    const auto row = std::span<const double>(q_next).subspan(i * na, na);
    y[i] = data[i].reward + gamma * *std::max_element(row.begin(), row.end());
  }
  return y;
}

std::vector<double> predictions_for(const MlpParams& params, std::span<const Transition> data,
                                    const PackedStates& packed) {
  const std::size_t na = params.arch().output_dim;
  const auto q = mlp_forward_batch(params, packed.states, packed.count);
  std::vector<double> out(data.size());
  for (std::size_t i = 0; i < data.size(); ++i) out[i] = q[i * na + data[i].action];
  return out;
}

}  // namespace

double approximation_error(const MlpParams& prev, const MlpParams& cur,
                           std::span<const Transition> dataset, double gamma) {
  if (dataset.empty()) throw InputError("approximation_error: empty dataset");
  std::vector<double> targets;
  std::vector<double> preds;
  targets.reserve(dataset.size());
  preds.reserve(dataset.size());
  for (const auto& t : dataset) {
    targets.push_back(empirical_bellman_optimal(prev, t, gamma));
    preds.push_back(mlp_forward(cur, t.state)[t.action]);
  }
  return mean_squared_gap(targets, preds);
}

SnapshotEvaluation evaluate_snapshot(const SnapshotRecord& snap, std::span<const Transition> nu,
                                     double gamma) {
  if (nu.empty()) throw InputError("evaluate_snapshot: empty nu sample");
  if (snap.k() == 0) throw InputError("evaluate_snapshot: snapshot has no networks");
  const auto packed = pack(nu);
  SnapshotEvaluation e;
  e.index = snap.index;
  e.window_shifts = snap.window_shifts;
  const std::size_t k = snap.k();
  for (std::size_t j = 0; j < k; ++j) e.targets.push_back(targets_for(snap.params[j], nu, packed, gamma));
  for (std::size_t j = 1; j <= k; ++j) e.predictions.push_back(predictions_for(snap.params[j], nu, packed));
  return e;
}

std::vector<double> approximation_errors(const SnapshotEvaluation& eval) {
  std::vector<double> out;
  out.reserve(eval.k());
  for (std::size_t k = 0; k < eval.k(); ++k) {
    out.push_back(mean_squared_gap(eval.targets[k], eval.predictions[k]));
  }
  return out;
}

bool Proposition1Result::all_eq5() const {
  return std::all_of(eq5.begin(), eq5.end(), [](bool b) { return b; });
}

bool DiagnosticsRecord::all_eq5() const {
  return std::all_of(eq5.begin(), eq5.end(), [](bool b) { return b; });
}

Proposition1Result proposition1_check(const SnapshotEvaluation& t, const SnapshotEvaluation& t1) {
  if (t.k() != t1.k()) throw InputError("proposition1_check: snapshots have different K");
  Proposition1Result r;
  const std::size_t k = t.k();
  for (std::size_t i = 0; i < k; ++i) {
    const double before = std::sqrt(mean_squared_gap(t.targets[i], t.predictions[i]));
    const double after = std::sqrt(mean_squared_gap(t.targets[i], t1.predictions[i]));
    const double disp = std::sqrt(mean_squared_gap(t1.targets[i], t.targets[i]));
    r.before.push_back(before);
    r.after_cross.push_back(after);
    r.displacement.push_back(disp);
    r.eq5.push_back(before - after >= disp);
  }
  r.errors_t = approximation_errors(t);
  r.errors_t1 = approximation_errors(t1);
  for (double e : r.errors_t) r.csae_t += e;
  for (double e : r.errors_t1) r.csae_t1 += e;
  r.eq6 = r.csae_t1 <= r.csae_t;
  return r;
}

Proposition1Result proposition1_check(const SnapshotRecord& t, const SnapshotRecord& t1,
                                      std::span<const Transition> nu, double gamma) {
  if (t.k() != t1.k()) throw InputError("proposition1_check: snapshots have different K");
  return proposition1_check(evaluate_snapshot(t, nu, gamma), evaluate_snapshot(t1, nu, gamma));
}

DiagnosticsCollector::DiagnosticsCollector(std::vector<Transition> nu, double gamma,
                                           std::size_t cadence)
    : nu_(std::move(nu)), gamma_(gamma), cadence_(cadence) {
  if (nu_.empty()) throw InputError("DiagnosticsCollector: empty nu sample");
  if (cadence_ == 0) throw InputError("DiagnosticsCollector: cadence must be >= 1");
}

void DiagnosticsCollector::observe(const SnapshotRecord& snap) {
  const bool closes_pair = pending_ && pending_->index + 1 == snap.index;
  const bool opens_pair = snap.index % cadence_ == 0;
  if (!closes_pair && !opens_pair) {
    pending_.reset();
    return;
  }
  auto eval = evaluate_snapshot(snap, nu_, gamma_);
  if (closes_pair) {
    const auto r = proposition1_check(*pending_, eval);
    DiagnosticsRecord rec;
    rec.snapshot_t = pending_->index;
    rec.approx_error = r.errors_t;
    rec.csae = r.csae_t;
    rec.csae_next = r.csae_t1;
    rec.eq5 = r.eq5;
    rec.eq6 = r.eq6;
    rec.displacement = r.displacement;
    rec.crosses_shift = pending_->window_shifts != eval.window_shifts;
    records_.push_back(std::move(rec));
  }
  if (opens_pair) {
    pending_ = std::move(eval);
  } else {
    pending_.reset();
  }
}

void DiagnosticsCollector::prime(const SnapshotRecord* last, std::vector<DiagnosticsRecord> records) {
  records_ = std::move(records);
  pending_.reset();
  if (last && last->index % cadence_ == 0) pending_ = evaluate_snapshot(*last, nu_, gamma_);
}

SnapshotObserver DiagnosticsCollector::observer() {
  return [this](const SnapshotRecord& s) { observe(s); };
}

Table1Metrics table1_metrics(std::span<const DiagnosticsRecord> records) {
  Table1Metrics m;
  double total_decrease = 0.0;
  double positive_decrease = 0.0;
  double eq5_positive_decrease = 0.0;
  std::size_t increases = 0;
  std::size_t eq6_given_eq5 = 0;
  std::size_t decreasing = 0;
  std::size_t decreasing_eq5 = 0;
  for (const auto& r : records) {
    if (r.crosses_shift) continue;
    ++m.pairs;
    const double dec = r.csae - r.csae_next;
    total_decrease += dec;
    if (r.csae_next > r.csae) ++increases;
    if (dec > 0.0) {
      ++decreasing;
      positive_decrease += dec;
    }
    if (r.all_eq5()) {
      ++m.eq5_pairs;
      if (r.eq6) {
        ++eq6_given_eq5;
      } else {
        ++m.soundness_violations;
      }
      if (dec > 0.0) {
        ++decreasing_eq5;
        eq5_positive_decrease += dec;
      }
    }
  }
  if (m.pairs == 0) throw InputError("table1_metrics: need at least two consecutive snapshots");
  const double nan = std::numeric_limits<double>::quiet_NaN();
  m.m1 = 100.0 * static_cast<double>(increases) / static_cast<double>(m.pairs);
  m.m2 = total_decrease / static_cast<double>(m.pairs);
  m.m3 = m.eq5_pairs == 0 ? nan
                          : 100.0 * static_cast<double>(eq6_given_eq5) /
                                static_cast<double>(m.eq5_pairs);
  m.m4 = positive_decrease == 0.0 ? nan : 100.0 * eq5_positive_decrease / positive_decrease;
  m.m4_count = decreasing == 0 ? nan
                               : 100.0 * static_cast<double>(decreasing_eq5) /
                                     static_cast<double>(decreasing);
  return m;
}

std::pair<std::size_t, std::size_t> soundness_counts(std::span<const DiagnosticsRecord> records) {
  std::size_t holds = 0;
  std::size_t violations = 0;
  for (const auto& r : records) {
    if (!r.all_eq5()) continue;
    ++holds;
    if (!r.eq6) ++violations;
  }
  return {holds, violations};
}

Prop2Result prop2_equivalence_check(std::span<const Prop2Sample> samples,
                                    std::span<const std::vector<double>> probes,
                                    bool deterministic) {
  if (samples.empty()) throw InputError("prop2_equivalence_check: empty dataset");
  if (probes.empty()) throw InputError("prop2_equivalence_check: need at least one probe");
  std::map<std::vector<double>, std::vector<std::size_t>> groups;
  for (std::size_t i = 0; i < samples.size(); ++i) groups[samples[i].key].push_back(i);

  std::vector<double> exact(samples.size());
  for (const auto& [key, members] : groups) {
    if (deterministic) {
      const double y = samples[members.front()].target_hat;
      for (std::size_t i : members) {
        if (samples[i].target_hat != y) {
          throw UsageError(
              "prop2_equivalence_check: dataset is not deterministic; supply exact Bellman targets");
        }
        exact[i] = y;
      }
      continue;
    }
    double mean = 0.0;
    for (std::size_t i : members) {
      if (!std::isfinite(samples[i].true_target)) {
        throw UsageError("prop2_equivalence_check: stochastic dataset without exact targets");
      }
      mean += samples[i].target_hat;
    }
    mean /= static_cast<double>(members.size());
    const double truth = samples[members.front()].true_target;
    if (std::abs(mean - truth) > 1e-12 * std::max(1.0, std::abs(truth))) {
      throw UsageError(
          "prop2_equivalence_check: empirical mean target differs from the exact Bellman target");
    }
    for (std::size_t i : members) exact[i] = truth;
  }

  const double m = static_cast<double>(samples.size());
  Prop2Result out;
  double lo = std::numeric_limits<double>::infinity();
  double hi = -lo;
  for (const auto& q : probes) {
    if (q.size() != samples.size()) throw InputError("prop2_equivalence_check: probe size mismatch");
    double loss = 0.0;
    double gap = 0.0;
    for (std::size_t i = 0; i < samples.size(); ++i) {
      const double e = samples[i].target_hat - q[i];
      loss += e * e;
      const double g = exact[i] - q[i];
      gap += g * g;
    }
    const double value = loss - m * (gap / m);
    lo = std::min(lo, value);
    hi = std::max(hi, value);
    out.scale = std::max(out.scale, std::abs(loss));
  }
  out.spread = hi - lo;
  return out;
}

Prop2Result prop2_equivalence_check(const MlpParams& target, std::span<const Transition> dataset,
                                    double gamma, std::size_t n_probes, Rng& rng,
                                    const std::function<double(const Transition&)>& true_bellman) {
  std::vector<Prop2Sample> samples;
  samples.reserve(dataset.size());
  for (const auto& t : dataset) {
    Prop2Sample s;
    s.key = t.state;
    s.key.push_back(static_cast<double>(t.action));
    s.target_hat = empirical_bellman_optimal(target, t, gamma);
    if (true_bellman) s.true_target = true_bellman(t);
    samples.push_back(std::move(s));
  }
  std::vector<std::vector<double>> probes;
  for (std::size_t p = 0; p < n_probes; ++p) {
    const auto theta = init_he_uniform(target.arch(), rng);
    std::vector<double> q;
    q.reserve(dataset.size());
    for (const auto& t : dataset) q.push_back(mlp_forward(theta, t.state)[t.action]);
    probes.push_back(std::move(q));
  }
  return prop2_equivalence_check(samples, probes, !true_bellman);
}

IterationCurves iteration_curves(std::span<const MlpParams> iterates,
                                 std::span<const Transition> nu, std::span<const double> q_star,
                                 const EvaluationGrid& grid, double gamma) {
  IterationCurves c;
  double running = 0.0;
  for (std::size_t k = 0; k < iterates.size(); ++k) {
    c.perf_loss.push_back(performance_loss(iterates[k], q_star, grid, gamma));
    if (k == 0) continue;
    const double e = approximation_error(iterates[k - 1], iterates[k], nu, gamma);
    running += e;
    c.approx_error.push_back(e);
    c.error_sum.push_back(running);
  }
  return c;
}

void write_diagnostics_csv(const std::filesystem::path& path,
                           std::span<const DiagnosticsRecord> records) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot open " + path.string() + " for writing");
  out << "snapshot_t,k,approx_error,csae,eq5_holds,eq6_holds,displacement,perf_loss,csae_next,"
         "crosses_shift\n";
  out << std::setprecision(17);
  auto perf = [](double x) {
    if (std::isnan(x)) return std::string();
    std::ostringstream s;
    s << std::setprecision(17) << x;
    return s.str();
  };
  for (const auto& r : records) {
    for (std::size_t k = 0; k < r.approx_error.size(); ++k) {
      out << r.snapshot_t << ',' << (k + 1) << ',' << r.approx_error[k] << ',' << r.csae << ','
          << (r.eq5[k] ? 1 : 0) << ',' << (r.eq6 ? 1 : 0) << ',' << r.displacement[k] << ','
          << perf(r.perf_loss) << ',' << r.csae_next << ',' << (r.crosses_shift ? 1 : 0) << '\n';
    }
    out << r.snapshot_t << ",-1,," << r.csae << ',' << (r.all_eq5() ? 1 : 0) << ','
        << (r.eq6 ? 1 : 0) << ",," << perf(r.perf_loss) << ',' << r.csae_next << ','
        << (r.crosses_shift ? 1 : 0) << '\n';
  }
}

}  // namespace iqn
