#ifndef MTEM_MICRO_HPP_
#define MTEM_MICRO_HPP_

// Euler-Maruyama for the frozen fast equation
//   Y_{m+1} = Y_m + f(x, Y_m) delta2 + g(x, Y_m) dW2_m
// and the time-average drift estimator
//   B_M(x) = (1/M) sum_{m=1..M} b(x, Y_m)       (Y_0 is excluded).

#include <cmath>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "core.hpp"
#include "noise.hpp"

namespace mtem {

struct EstimatorError : Error {
  EstimatorError(const std::string &what, std::size_t index)
      : Error(what), divergence_index(index) {}
  std::size_t divergence_index;
};

struct FrozenPath {
  Vector frozen_x;
  double delta2 = 0.0;
  /// Columns Y_0 .. Y_M; a diverged path stops at the offending index.
  Matrix states;
  std::optional<std::size_t> diverged_at;

  std::size_t steps() const { return static_cast<std::size_t>(states.cols()) - 1; }
  bool diverged() const { return diverged_at.has_value(); }
};

struct DriftEstimate {
  Vector value;
  std::size_t M_used = 0;
  Vector frozen_x;
};

namespace detail {

template <typename Increment>
inline Vector frozen_step(const CoefficientSet &c, const Vector &x,
                          const Vector &y, double delta2, const Increment &dw) {
  return y + c.fast_drift(x, y) * delta2 + c.fast_diffusion(x, y) * dw;
}

/// Runs the micro chain and folds the estimator without storing the path.
/// Performs exactly the floating-point operations of frozen_em followed by
/// estimate_drift. Returns nullopt on divergence.
inline std::optional<Vector> streamed_estimate(const CoefficientSet &c,
                                               const Vector &x,
                                               const Vector &y_init,
                                               double delta2, std::size_t M,
                                               IncrementStream &noise) {
  Vector dw(c.dim_noise_fast);
  Vector y = y_init;
  Vector sum;
  for (std::size_t m = 0; m < M; ++m) {
    noise.next(dw);
    y = frozen_step(c, x, y, delta2, dw);
    if (is_diverged(y)) {
      return std::nullopt;
    }
    if (m == 0) {
      sum = c.slow_drift(x, y);
    } else {
      sum += c.slow_drift(x, y);
    }
  }
  return Vector(sum / static_cast<double>(M));
}

} // namespace detail

inline FrozenPath frozen_em(const SystemSpec &sys, const Vector &frozen_x,
                            const Vector &y_init, double delta2,
                            const IncrementGrid &noise) {
  const CoefficientSet &c = sys.coefficients();
  if (!(delta2 > 0.0 && delta2 <= 1.0)) {
    throw ConfigError("delta2 must be in (0,1]");
  }
  if (noise.dim() != c.dim_noise_fast) {
    throw ShapeError("micro noise has dimension " + std::to_string(noise.dim()) +
                     ", expected " + std::to_string(c.dim_noise_fast));
  }
  if (y_init.size() != c.dim_fast) {
    throw ShapeError("initial fast state has the wrong dimension");
  }
  const std::size_t M = noise.count();
  FrozenPath path;
  path.frozen_x = frozen_x;
  path.delta2 = delta2;
  path.states.resize(c.dim_fast, static_cast<Eigen::Index>(M + 1));
  path.states.col(0) = y_init;
  Vector y = y_init;
  Vector dw(c.dim_noise_fast);
  for (std::size_t m = 0; m < M; ++m) {
    dw = noise.increment(m);
    y = detail::frozen_step(c, frozen_x, y, delta2, dw);
    if (is_diverged(y)) {
      path.diverged_at = m + 1;
      path.states.conservativeResize(Eigen::NoChange,
                                     static_cast<Eigen::Index>(m + 2));
      path.states.col(static_cast<Eigen::Index>(m + 1)) = y;
      return path;
    }
    path.states.col(static_cast<Eigen::Index>(m + 1)) = y;
  }
  return path;
}

inline DriftEstimate estimate_drift(const SystemSpec &sys,
                                    const Vector &frozen_x,
                                    const FrozenPath &path) {
  if (path.diverged()) {
    throw EstimatorError("micro path diverged at step " +
                             std::to_string(*path.diverged_at),
                         *path.diverged_at);
  }
  if (path.frozen_x.size() != frozen_x.size() || path.frozen_x != frozen_x) {
    throw ShapeError("path was generated for a different frozen state");
  }
  const std::size_t M = path.steps();
  if (M == 0) {
    throw ShapeError("estimator needs at least one micro step");
  }
  const CoefficientSet &c = sys.coefficients();
  Vector sum;
  for (std::size_t m = 1; m <= M; ++m) {
    const Vector y = path.states.col(static_cast<Eigen::Index>(m));
    if (m == 1) {
      sum = c.slow_drift(frozen_x, y);
    } else {
      sum += c.slow_drift(frozen_x, y);
    }
  }
  return DriftEstimate{Vector(sum / static_cast<double>(M)), M, frozen_x};
}

/// min(beta / (2 L^2), 2 / beta, 1) for a Lipschitz estimate L of f and g.
inline double stability_threshold(double beta, double lipschitz) {
  if (!(beta > 0.0) || !(lipschitz > 0.0)) {
    throw ConfigError("stability_threshold needs beta > 0 and L > 0");
  }
  return std::min({beta / (2.0 * lipschitz * lipschitz), 2.0 / beta, 1.0});
}

struct GapPoint {
  std::size_t m = 0;
  double mean_sq_gap = 0.0;
};

struct ContractionReport {
  std::vector<GapPoint> points;
  std::size_t used_samples = 0;
  std::size_t excluded_samples = 0;
  /// True when a Lipschitz estimate was supplied and delta2 is below the
  /// computed threshold; false means the step was not verified (warn-only).
  bool step_verified = false;
};

/// 0, 1, 2, 4, ... up to and including M.
inline std::vector<std::size_t> logarithmic_steps(std::size_t M) {
  std::vector<std::size_t> out{0};
  for (std::size_t m = 1; m < M; m *= 2) {
    out.push_back(m);
  }
  if (M > 0) {
    out.push_back(M);
  }
  return out;
}

/// Mean squared distance between two frozen chains started at y and z and
/// driven by the same increments, at the requested steps (default: a
/// logarithmic set). Sample j uses the micro stream 0 of plan.sample(j).
inline ContractionReport
contraction_probe(const SystemSpec &sys, const Vector &frozen_x,
                  const Vector &y, const Vector &z, double delta2,
                  std::size_t M, std::size_t n_samples, const NoisePlan &plan,
                  std::optional<double> lipschitz = std::nullopt,
                  std::span<const std::size_t> probe_steps = {}) {
  if (y == z) {
    throw ConfigError("contraction_probe needs distinct initial values");
  }
  if (n_samples == 0) {
    throw ConfigError("contraction_probe needs n_samples >= 1");
  }
  const CoefficientSet &c = sys.coefficients();
  ContractionReport report;
  if (lipschitz) {
    const double bound = stability_threshold(c.dissipativity_beta, *lipschitz);
    if (delta2 > bound) {
      throw ConfigError("delta2 = " + std::to_string(delta2) +
                        " exceeds the stability threshold " +
                        std::to_string(bound));
    }
    report.step_verified = true;
  }
  std::vector<std::size_t> steps(probe_steps.begin(), probe_steps.end());
  if (steps.empty()) {
    steps = logarithmic_steps(M);
  }
  for (std::size_t s : steps) {
    if (s > M) {
      throw ConfigError("probe step exceeds M");
    }
  }
  std::vector<double> sums(M + 1, 0.0);
  for (std::size_t j = 0; j < n_samples; ++j) {
    const IncrementGrid noise =
        micro_increments(plan.sample(j), 0, c.dim_noise_fast, delta2, M);
    const FrozenPath a = frozen_em(sys, frozen_x, y, delta2, noise);
    const FrozenPath b = frozen_em(sys, frozen_x, z, delta2, noise);
    if (a.diverged() || b.diverged()) {
      ++report.excluded_samples;
      continue;
    }
    ++report.used_samples;
    for (std::size_t m = 0; m <= M; ++m) {
      sums[m] += (a.states.col(static_cast<Eigen::Index>(m)) -
                  b.states.col(static_cast<Eigen::Index>(m)))
                     .squaredNorm();
    }
  }
  for (std::size_t s : steps) {
    report.points.push_back(
        {s, report.used_samples == 0
                ? std::nan("")
                : sums[s] / static_cast<double>(report.used_samples)});
  }
  return report;
}

/// ceil(8 / (beta delta2)): several contraction time constants.
inline std::size_t default_burn_in(double beta, double delta2) {
  return static_cast<std::size_t>(std::ceil(8.0 / (beta * delta2)));
}

/// Draws from one long frozen chain started at sys.y0(): n_draws states taken
/// every `thinning` steps after `burn_in` steps. Uses micro stream
/// `stream_index` of `plan`.
inline std::vector<Vector>
empirical_invariant(const SystemSpec &sys, const Vector &frozen_x,
                    double delta2, std::size_t burn_in, std::size_t n_draws,
                    std::size_t thinning, const NoisePlan &plan,
                    std::uint64_t stream_index = 0) {
  if (burn_in == 0) {
    throw ConfigError("empirical_invariant needs burn_in >= 1");
  }
  if (thinning == 0) {
    throw ConfigError("empirical_invariant needs thinning >= 1");
  }
  if (!(delta2 > 0.0 && delta2 <= 1.0)) {
    throw ConfigError("delta2 must be in (0,1]");
  }
  const CoefficientSet &c = sys.coefficients();
  IncrementStream noise(plan, StreamKind::micro, stream_index,
                        c.dim_noise_fast, delta2);
  Vector dw(c.dim_noise_fast);
  Vector y = sys.y0();
  std::size_t step = 0;
  auto advance = [&] {
    noise.next(dw);
    y = detail::frozen_step(c, frozen_x, y, delta2, dw);
    ++step;
    if (is_diverged(y)) {
      throw EstimatorError("invariant chain diverged at step " +
                               std::to_string(step),
                           step);
    }
  };
  for (std::size_t i = 0; i < burn_in; ++i) {
    advance();
  }
  std::vector<Vector> draws;
  draws.reserve(n_draws);
  for (std::size_t k = 0; k < n_draws; ++k) {
    for (std::size_t t = 0; t < thinning; ++t) {
      advance();
    }
    draws.push_back(y);
  }
  return draws;
}

} // namespace mtem

#endif // MTEM_MICRO_HPP_
