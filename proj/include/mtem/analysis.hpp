#ifndef MTEM_ANALYSIS_HPP_
#define MTEM_ANALYSIS_HPP_

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "core.hpp"
#include "macro.hpp"
#include "micro.hpp"
#include "noise.hpp"
#include "parallel.hpp"

namespace mtem {

/// Recursive pairwise summation; the association order depends only on the
/// length of the input.
inline double pairwise_sum(std::span<const double> v) {
  if (v.size() <= 8) {
    double s = 0.0;
    for (double x : v) {
      s += x;
    }
    return s;
  }
  const std::size_t half = v.size() / 2;
  return pairwise_sum(v.first(half)) + pairwise_sum(v.subspan(half));
}

inline double mean_of(std::span<const double> v) {
  return v.empty() ? std::nan("") : pairwise_sum(v) / static_cast<double>(v.size());
}

/// Unbiased sample variance.
inline double variance_of(std::span<const double> v) {
  if (v.size() < 2) {
    return 0.0;
  }
  const double m = mean_of(v);
  std::vector<double> sq(v.size());
  std::transform(v.begin(), v.end(), sq.begin(),
                 [m](double x) { return (x - m) * (x - m); });
  return pairwise_sum(sq) / static_cast<double>(v.size() - 1);
}

inline double standard_error_of(std::span<const double> v) {
  return v.size() < 2 ? 0.0
                      : std::sqrt(variance_of(v) / static_cast<double>(v.size()));
}

struct PathView {
  std::span<const double> times;
  std::span<const Vector> states;
  bool diverged = false;
};

inline PathView view(const MacroTrajectory &t) {
  return {t.times, t.slow_states, t.diverged()};
}
inline PathView view(const ExactAveragedPath &p) { return {p.times, p.values, false}; }

struct PathPair {
  PathView reference;
  PathView numerical;
};

struct SmseSeries {
  std::vector<double> times;
  std::vector<double> values;
  std::size_t n_samples = 0;  ///< pairs used
  std::size_t n_excluded = 0; ///< pairs dropped because a path diverged

  double terminal() const { return values.empty() ? std::nan("") : values.back(); }
  double maximum() const {
    return values.empty() ? std::nan("")
                          : *std::max_element(values.begin(), values.end());
  }
};

/// Pointwise (1/N) sum_j |reference_j(t) - numerical_j(t)|^2 over the pairs
/// whose paths did not diverge.
inline SmseSeries smse(std::span<const PathPair> pairs) {
  SmseSeries out;
  std::vector<const PathPair *> used;
  for (const PathPair &p : pairs) {
    if (p.reference.diverged || p.numerical.diverged) {
      ++out.n_excluded;
      continue;
    }
    used.push_back(&p);
  }
  out.n_samples = used.size();
  if (used.empty()) {
    return out;
  }
  const std::span<const double> grid = used.front()->reference.times;
  for (const PathPair *p : used) {
    for (const PathView *v : {&p->reference, &p->numerical}) {
      if (v->times.size() != grid.size() || v->states.size() != grid.size() ||
          !std::equal(grid.begin(), grid.end(), v->times.begin())) {
        throw ShapeError("paths do not share a common time grid");
      }
    }
  }
  out.times.assign(grid.begin(), grid.end());
  out.values.resize(grid.size());
  std::vector<double> gaps(used.size());
  for (std::size_t n = 0; n < grid.size(); ++n) {
    for (std::size_t j = 0; j < used.size(); ++j) {
      const Vector &a = used[j]->reference.states[n];
      const Vector &b = used[j]->numerical.states[n];
      if (a.size() != b.size()) {
        throw ShapeError("paired states have different dimensions");
      }
      gaps[j] = (a - b).squaredNorm();
    }
    out.values[n] = mean_of(gaps);
  }
  return out;
}

struct LevelPoint {
  double q = 0.0;
  double smse = 0.0;
};

/// Least-squares slope of log2(smse) against q.
inline double fit_slope(std::span<const LevelPoint> levels) {
  if (levels.size() < 3) {
    throw DomainError("slope fit needs at least 3 levels");
  }
  double mq = 0.0;
  double ml = 0.0;
  for (const auto &p : levels) {
    if (!(p.smse > 0.0) || !std::isfinite(p.smse)) {
      throw DomainError("degenerate slope fit: smse must be positive and finite");
    }
    mq += p.q;
    ml += std::log2(p.smse);
  }
  const double n = static_cast<double>(levels.size());
  mq /= n;
  ml /= n;
  double sxy = 0.0;
  double sxx = 0.0;
  for (const auto &p : levels) {
    sxy += (p.q - mq) * (std::log2(p.smse) - ml);
    sxx += (p.q - mq) * (p.q - mq);
  }
  if (sxx == 0.0) {
    throw DomainError("degenerate slope fit: all levels share the same q");
  }
  return sxy / sxx;
}

/// Exact empirical Wasserstein-2 distance on the line: root mean square gap of
/// matched order statistics. A larger sample is reduced to the size of the
/// smaller one by taking its order statistics at the midpoint quantiles.
inline double w2_1d(std::span<const double> sample_a,
                    std::span<const double> sample_b) {
  if (sample_a.empty() || sample_b.empty()) {
    throw DomainError("w2_1d needs non-empty samples");
  }
  std::vector<double> a(sample_a.begin(), sample_a.end());
  std::vector<double> b(sample_b.begin(), sample_b.end());
  std::sort(a.begin(), a.end());
  std::sort(b.begin(), b.end());
  auto reduce = [](std::vector<double> &big, std::size_t n) {
    std::vector<double> out(n);
    const double scale = static_cast<double>(big.size()) / static_cast<double>(n);
    for (std::size_t i = 0; i < n; ++i) {
      const auto k = static_cast<std::size_t>((static_cast<double>(i) + 0.5) * scale);
      out[i] = big[std::min(k, big.size() - 1)];
    }
    big = std::move(out);
  };
  if (a.size() > b.size()) {
    reduce(a, b.size());
  } else if (b.size() > a.size()) {
    reduce(b, a.size());
  }
  std::vector<double> sq(a.size());
  for (std::size_t i = 0; i < a.size(); ++i) {
    sq[i] = (a[i] - b[i]) * (a[i] - b[i]);
  }
  return std::sqrt(mean_of(sq));
}

/// Log-log slope of w2 against delta2 (least squares on log2 both sides).
inline double loglog_slope(std::span<const double> xs, std::span<const double> ys) {
  std::vector<LevelPoint> pts;
  for (std::size_t i = 0; i < xs.size(); ++i) {
    pts.push_back({std::log2(xs[i]), ys[i]});
  }
  return fit_slope(pts);
}

struct EstimatorErrorPoint {
  std::size_t M = 0;
  double mse = 0.0;
  double standard_error = 0.0;
  std::size_t used = 0;
  std::size_t excluded = 0;
};

/// Monte Carlo estimate of E|b_bar(x) - B_M(x)|^2 for each M. Sample j, level
/// i runs the micro chain from sys.y0() on micro stream i of plan.sample(j).
inline std::vector<EstimatorErrorPoint>
estimator_error_curve(const SystemSpec &sys, const Vector &x, double delta2,
                      std::span<const std::size_t> M_values,
                      std::size_t n_samples, const NoisePlan &plan,
                      unsigned threads = 1) {
  const CoefficientSet &c = sys.coefficients();
  if (!c.averaged_drift) {
    throw ConfigError("estimator_error_curve needs a closed-form averaged drift");
  }
  if (n_samples == 0) {
    throw ConfigError("estimator_error_curve needs n_samples >= 1");
  }
  const Vector target = c.averaged_drift(x);
  const std::size_t L = M_values.size();
  // errors[i * n_samples + j]; NaN marks a diverged run.
  std::vector<double> errors(L * n_samples);
  parallel_for(n_samples, threads, [&](std::size_t j) {
    const NoisePlan p = plan.sample(j);
    for (std::size_t i = 0; i < L; ++i) {
      IncrementStream noise(p, StreamKind::micro, i, c.dim_noise_fast, delta2);
      const auto est =
          detail::streamed_estimate(c, x, sys.y0(), delta2, M_values[i], noise);
      errors[i * n_samples + j] =
          est ? (*est - target).squaredNorm() : std::nan("");
    }
  });
  std::vector<EstimatorErrorPoint> out;
  for (std::size_t i = 0; i < L; ++i) {
    std::vector<double> ok;
    EstimatorErrorPoint pt;
    pt.M = M_values[i];
    for (std::size_t j = 0; j < n_samples; ++j) {
      const double e = errors[i * n_samples + j];
      if (std::isnan(e)) {
        ++pt.excluded;
      } else {
        ok.push_back(e);
      }
    }
    pt.used = ok.size();
    pt.mse = mean_of(ok);
    pt.standard_error = standard_error_of(ok);
    out.push_back(pt);
  }
  return out;
}

struct AveragedDriftEstimate {
  Vector mean;
  Vector standard_error;
  std::size_t used = 0;
  std::size_t excluded = 0;
};

/// Mean of n_reps independent estimators B_M(x) (rep j uses micro stream 0 of
/// plan.sample(j)), with componentwise standard errors.
inline AveragedDriftEstimate
estimate_averaged_drift(const SystemSpec &sys, const Vector &x, double delta2,
                        std::size_t M, std::size_t n_reps, const NoisePlan &plan,
                        unsigned threads = 1) {
  if (n_reps == 0 || M == 0) {
    throw ConfigError("estimate_averaged_drift needs n_reps >= 1 and M >= 1");
  }
  const CoefficientSet &c = sys.coefficients();
  std::vector<std::optional<Vector>> reps(n_reps);
  parallel_for(n_reps, threads, [&](std::size_t j) {
    IncrementStream noise(plan.sample(j), StreamKind::micro, 0,
                          c.dim_noise_fast, delta2);
    reps[j] = detail::streamed_estimate(c, x, sys.y0(), delta2, M, noise);
  });
  AveragedDriftEstimate out;
  out.mean = Vector::Zero(c.dim_slow);
  out.standard_error = Vector::Zero(c.dim_slow);
  for (int k = 0; k < c.dim_slow; ++k) {
    std::vector<double> comp;
    for (const auto &r : reps) {
      if (r) {
        comp.push_back((*r)[k]);
      }
    }
    out.mean[k] = mean_of(comp);
    out.standard_error[k] = standard_error_of(comp);
    out.used = comp.size();
  }
  out.excluded = n_reps - out.used;
  return out;
}

/// Per-time sample mean of |X(t)|^2 over non-diverged trajectories sharing a
/// grid.
inline std::vector<double>
second_moment_profile(std::span<const MacroTrajectory> runs) {
  std::vector<const MacroTrajectory *> used;
  for (const auto &r : runs) {
    if (!r.diverged()) {
      used.push_back(&r);
    }
  }
  if (used.empty()) {
    return {};
  }
  const std::size_t n = used.front()->slow_states.size();
  std::vector<double> out(n);
  std::vector<double> vals(used.size());
  for (std::size_t t = 0; t < n; ++t) {
    for (std::size_t j = 0; j < used.size(); ++j) {
      if (used[j]->slow_states.size() != n) {
        throw ShapeError("trajectories do not share a grid");
      }
      vals[j] = used[j]->slow_states[t].squaredNorm();
    }
    out[t] = mean_of(vals);
  }
  return out;
}

/// delta1 = delta2 = 2^-q, M = 2^(2q).
inline SolverConfig convergence_schedule(int q, double T, unsigned refine_levels,
                                         std::uint64_t seed) {
  if (q < 0 || q > 15) {
    throw ConfigError("q must be in [0, 15]");
  }
  const double d = std::ldexp(1.0, -q);
  return SolverConfig(d, d, std::size_t{1} << (2 * q), T, refine_levels, seed);
}

enum class SmseTime { terminal, maximum };

struct ConvergenceLevel {
  int q = 0;
  double delta1 = 0.0;
  double delta2 = 0.0;
  std::size_t M = 0;
  double smse = 0.0;
  std::size_t diverged = 0;
  double wall_seconds = 0.0;
};

struct ConvergenceReport {
  std::vector<ConvergenceLevel> levels;
  std::optional<double> fitted_slope; ///< over levels without divergences
  std::size_t n_samples = 0;
};

/// MTEM against the closed-form averaged solution on a shared W1 path, for
/// each level of the delta1 = delta2 = 2^-q, M = 2^(2q) schedule.
inline ConvergenceReport
run_convergence(const SystemSpec &sys, std::span<const int> q_levels, double T,
                std::size_t samples, std::uint64_t seed,
                unsigned refine_levels = 4, unsigned threads = 1,
                SmseTime when = SmseTime::terminal) {
  if (!sys.coefficients().closed_form_averaged_path) {
    throw ConfigError("system '" + sys.coefficients().name +
                      "' has no closed-form averaged solution");
  }
  if (samples == 0) {
    throw ConfigError("convergence study needs samples >= 1");
  }
  for (std::size_t i = 1; i < q_levels.size(); ++i) {
    if (q_levels[i] <= q_levels[i - 1]) {
      throw ConfigError("q_levels must be strictly increasing");
    }
  }
  ConvergenceReport report;
  report.n_samples = samples;
  for (int q : q_levels) {
    const auto start = std::chrono::steady_clock::now();
    const SolverConfig cfg = convergence_schedule(q, T, refine_levels, seed);
    std::vector<MacroTrajectory> numerical(samples);
    std::vector<ExactAveragedPath> exact(samples);
    parallel_for(samples, threads, [&](std::size_t j) {
      const NoisePlan plan{seed, j};
      numerical[j] = mtem_run(sys, cfg, plan);
      const MacroIncrements w1 = macro_increments(
          plan, 1, cfg.delta1(), cfg.macro_steps(), cfg.refine_levels());
      exact[j] = exact_averaged_path(cfg, sys.x0(), w1.fine);
    });
    std::vector<PathPair> pairs;
    pairs.reserve(samples);
    for (std::size_t j = 0; j < samples; ++j) {
      pairs.push_back({view(exact[j]), view(numerical[j])});
    }
    const SmseSeries series = smse(pairs);
    ConvergenceLevel level;
    level.q = q;
    level.delta1 = cfg.delta1();
    level.delta2 = cfg.delta2();
    level.M = cfg.M();
    level.diverged = series.n_excluded;
    level.smse = when == SmseTime::terminal ? series.terminal() : series.maximum();
    level.wall_seconds = std::chrono::duration<double>(
                             std::chrono::steady_clock::now() - start)
                             .count();
    report.levels.push_back(level);
  }
  std::vector<LevelPoint> clean;
  for (const auto &l : report.levels) {
    if (l.diverged == 0) {
      clean.push_back({static_cast<double>(l.q), l.smse});
    }
  }
  if (clean.size() >= 3) {
    report.fitted_slope = fit_slope(clean);
  }
  return report;
}

} // namespace mtem

#endif // MTEM_ANALYSIS_HPP_
