#ifndef MTEM_MACRO_HPP_
#define MTEM_MACRO_HPP_

// Slow-component integrators.
//
//   MTEM      X_{n+1} = X_n + B_M(T(X_n)) delta1 + sigma(X_n) dW1_n
//   TEM       Z_{n+1} = Z_n + b_bar(T(Z_n)) delta1 + sigma(Z_n) dW1_n
//   PI        MTEM with T replaced by the identity
//   COUPLED   truncated EM on the full (x, y) system with step h
//
// T is the radial truncation x -> min(|x|, cap) x / |x| with
// cap = phi^{-1}(K delta1^{-1/2}) = (K delta1^{-1/2} - 1)^{1 / (max(theta3, theta4) - 1)}.
// The micro chain behind B_M restarts from y0 at every macro step and uses
// the micro stream n of the plan.

#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "core.hpp"
#include "micro.hpp"
#include "noise.hpp"

namespace mtem {

class TruncationMap {
public:
  TruncationMap(double K, double exponent, double delta1)
      : K_(K), exponent_(exponent), delta1_(delta1) {
    if (!(exponent > 0.0)) {
      throw ConfigError("truncation exponent must be positive");
    }
    if (!(delta1 > 0.0)) {
      throw ConfigError("truncation step must be positive");
    }
    if (!(K >= 1.0)) {
      throw ConfigError("truncation constant K must be >= 1");
    }
    cap_ = std::pow(K / std::sqrt(delta1) - 1.0, 1.0 / exponent);
    if (!std::isfinite(cap_)) {
      throw ConfigError("truncation cap is not finite");
    }
  }

  static TruncationMap for_system(const SystemSpec &sys, double delta1) {
    return TruncationMap(sys.truncation_K(),
                         sys.coefficients().theta.truncation_exponent(), delta1);
  }

  /// A map that never truncates.
  static TruncationMap identity() {
    TruncationMap m;
    m.cap_ = std::numeric_limits<double>::infinity();
    return m;
  }

  double K() const { return K_; }
  double exponent() const { return exponent_; }
  double delta1() const { return delta1_; }
  double cap() const { return cap_; }

private:
  TruncationMap() = default;
  double K_ = 0.0;
  double exponent_ = 0.0;
  double delta1_ = 0.0;
  double cap_ = 0.0;
};

/// Returns x itself whenever |x| <= cap, so an inactive cap leaves the state
/// bit-for-bit unchanged.
inline Vector truncate(const TruncationMap &map, const Vector &x) {
  const double norm = x.norm();
  if (norm <= map.cap()) {
    return x;
  }
  return x * (map.cap() / norm);
}

enum class Scheme { mtem, tem, pi, coupled };

inline const char *scheme_name(Scheme s) {
  switch (s) {
  case Scheme::mtem:
    return "MTEM";
  case Scheme::tem:
    return "TEM";
  case Scheme::pi:
    return "PI";
  case Scheme::coupled:
    return "COUPLED";
  }
  return "?";
}

/// Slow states on the grid t_n = n * step. A diverged run stops at the first
/// offending state, which is still stored.
struct MacroTrajectory {
  Scheme scheme = Scheme::mtem;
  double step = 0.0;
  std::vector<double> times;
  std::vector<Vector> slow_states;
  std::optional<std::vector<Vector>> fast_states;
  std::optional<std::size_t> diverged_at;

  bool diverged() const { return diverged_at.has_value(); }
};

/// Closed-form averaged solution of the built-in example on the macro grid.
struct ExactAveragedPath {
  std::vector<double> times;
  std::vector<Vector> values;
};

/// Drift used by the macro recursion at step n, evaluated at the truncated
/// state. Returning nullopt marks the run diverged.
using MacroDrift =
    std::function<std::optional<Vector>(std::size_t, const Vector &)>;

namespace detail {

inline MacroTrajectory macro_recursion(const SystemSpec &sys,
                                       const SolverConfig &cfg,
                                       const NoisePlan &plan, Scheme scheme,
                                       const TruncationMap &map,
                                       const MacroDrift &drift) {
  const CoefficientSet &c = sys.coefficients();
  const std::size_t N = cfg.macro_steps();
  const MacroIncrements w1 = macro_increments(
      plan, c.dim_noise_slow, cfg.delta1(), N, cfg.refine_levels());

  MacroTrajectory out;
  out.scheme = scheme;
  out.step = cfg.delta1();
  out.times.reserve(N + 1);
  out.slow_states.reserve(N + 1);
  out.times.push_back(0.0);
  out.slow_states.push_back(sys.x0());

  Vector x = sys.x0();
  Vector dw(c.dim_noise_slow);
  for (std::size_t n = 0; n < N; ++n) {
    const Vector xt = truncate(map, x);
    const std::optional<Vector> b = drift(n, xt);
    if (!b) {
      out.diverged_at = n + 1;
      return out;
    }
    dw = w1.coarse.increment(n);
    x = x + *b * cfg.delta1() + c.slow_diffusion(x) * dw;
    out.times.push_back(static_cast<double>(n + 1) * cfg.delta1());
    out.slow_states.push_back(x);
    if (is_diverged(x)) {
      out.diverged_at = n + 1;
      return out;
    }
  }
  return out;
}

inline MacroDrift micro_estimator(const SystemSpec &sys, const SolverConfig &cfg,
                                  const NoisePlan &plan) {
  return [&sys, &cfg, plan](std::size_t n,
                            const Vector &xt) -> std::optional<Vector> {
    const CoefficientSet &c = sys.coefficients();
    IncrementStream noise(plan, StreamKind::micro, n, c.dim_noise_fast,
                          cfg.delta2());
    return streamed_estimate(c, xt, sys.y0(), cfg.delta2(), cfg.M(), noise);
  };
}

} // namespace detail

inline MacroTrajectory mtem_run(const SystemSpec &sys, const SolverConfig &cfg,
                                const NoisePlan &plan) {
  return detail::macro_recursion(sys, cfg, plan, Scheme::mtem,
                                 TruncationMap::for_system(sys, cfg.delta1()),
                                 detail::micro_estimator(sys, cfg, plan));
}

/// MTEM with the micro estimator replaced by `drift` (e.g. the exact b_bar,
/// emulating M -> infinity).
inline MacroTrajectory mtem_run(const SystemSpec &sys, const SolverConfig &cfg,
                                const NoisePlan &plan,
                                const CoefficientSet::AveragedDriftFn &drift) {
  return detail::macro_recursion(
      sys, cfg, plan, Scheme::mtem,
      TruncationMap::for_system(sys, cfg.delta1()),
      [&drift](std::size_t, const Vector &xt) -> std::optional<Vector> {
        return drift(xt);
      });
}

inline MacroTrajectory tem_run(const SystemSpec &sys, const SolverConfig &cfg,
                               const NoisePlan &plan) {
  const auto &bbar = sys.coefficients().averaged_drift;
  if (!bbar) {
    throw ConfigError("tem_run needs a closed-form averaged drift for '" +
                      sys.coefficients().name + "'");
  }
  return detail::macro_recursion(
      sys, cfg, plan, Scheme::tem, TruncationMap::for_system(sys, cfg.delta1()),
      [&bbar](std::size_t, const Vector &zt) -> std::optional<Vector> {
        return bbar(zt);
      });
}

inline MacroTrajectory pi_baseline_run(const SystemSpec &sys,
                                       const SolverConfig &cfg,
                                       const NoisePlan &plan) {
  return detail::macro_recursion(sys, cfg, plan, Scheme::pi,
                                 TruncationMap::identity(),
                                 detail::micro_estimator(sys, cfg, plan));
}

/// Largest h / epsilon accepted by coupled_reference_run.
inline constexpr double kCoupledStepRatio = 0.25;

/// Substep count must be a power of two, so the slow noise is exactly the
/// refined W1 grid macro_increments(plan, ..., log2(substeps)).fine.
inline unsigned substep_refine_levels(std::size_t micro_substeps) {
  if (micro_substeps == 0 || (micro_substeps & (micro_substeps - 1)) != 0) {
    throw ConfigError("micro_substeps must be a power of two, got " +
                      std::to_string(micro_substeps));
  }
  unsigned r = 0;
  while ((std::size_t{1} << r) < micro_substeps) {
    ++r;
  }
  return r;
}

/// Truncated EM on the full slow-fast system with step h = delta1 / substeps:
///   x <- x + b(T_h(x), y) h + sigma(x) dW1
///   y <- y + f(x, y) h / eps + g(x, y) dW2 / sqrt(eps)
/// Slow (and fast) states are recorded every `micro_substeps` steps.
inline MacroTrajectory coupled_reference_run(const SystemSpec &sys,
                                             const SolverConfig &cfg,
                                             std::size_t micro_substeps,
                                             const NoisePlan &plan) {
  const CoefficientSet &c = sys.coefficients();
  const unsigned r = substep_refine_levels(micro_substeps);
  const double h = cfg.delta1() / static_cast<double>(micro_substeps);
  const double eps = sys.epsilon();
  if (h / eps > kCoupledStepRatio) {
    throw ConfigError("coupled step h / epsilon = " + std::to_string(h / eps) +
                      " exceeds " + std::to_string(kCoupledStepRatio));
  }
  const std::size_t N = cfg.macro_steps();
  const MacroIncrements w1 =
      macro_increments(plan, c.dim_noise_slow, cfg.delta1(), N, r);
  IncrementStream fast_noise(plan, StreamKind::fast, 0, c.dim_noise_fast, h);
  const TruncationMap map = TruncationMap::for_system(sys, h);
  const double inv_sqrt_eps = 1.0 / std::sqrt(eps);
  const double h_over_eps = h / eps;

  MacroTrajectory out;
  out.scheme = Scheme::coupled;
  out.step = cfg.delta1();
  out.fast_states.emplace();
  out.times.push_back(0.0);
  out.slow_states.push_back(sys.x0());
  out.fast_states->push_back(sys.y0());

  Vector x = sys.x0();
  Vector y = sys.y0();
  Vector dw1(c.dim_noise_slow);
  Vector dw2(c.dim_noise_fast);
  for (std::size_t n = 0; n < N; ++n) {
    for (std::size_t k = 0; k < micro_substeps; ++k) {
      dw1 = w1.fine.increment(n * micro_substeps + k);
      fast_noise.next(dw2);
      Vector x_next =
          x + c.slow_drift(truncate(map, x), y) * h + c.slow_diffusion(x) * dw1;
      Vector y_next = y + c.fast_drift(x, y) * h_over_eps +
                      c.fast_diffusion(x, y) * dw2 * inv_sqrt_eps;
      x = std::move(x_next);
      y = std::move(y_next);
      if (is_diverged(x) || is_diverged(y)) {
        out.times.push_back(static_cast<double>(n + 1) * cfg.delta1());
        out.slow_states.push_back(x);
        out.fast_states->push_back(y);
        out.diverged_at = n + 1;
        return out;
      }
    }
    out.times.push_back(static_cast<double>(n + 1) * cfg.delta1());
    out.slow_states.push_back(x);
    out.fast_states->push_back(y);
  }
  return out;
}

/// x_bar(t) = x0 exp(-3t/2 + W(t)) / sqrt(1 + 2 x0^2 int_0^t exp(-3s + 2W(s)) ds)
/// with W the cumulative sum of `fine` and the integral a left-endpoint
/// Riemann sum on the fine grid. Values are reported every delta1.
inline ExactAveragedPath exact_averaged_path(const SolverConfig &cfg,
                                             double x0,
                                             const IncrementGrid &fine) {
  if (fine.dim() != 1) {
    throw UnsupportedSystem(
        "the closed-form averaged solution is one-dimensional");
  }
  const double ratio = cfg.delta1() / fine.dt;
  const auto block = static_cast<std::size_t>(std::llround(ratio));
  if (block == 0 || std::abs(ratio - static_cast<double>(block)) > 1e-9 * ratio) {
    throw ShapeError("fine grid step does not divide delta1");
  }
  const std::size_t N = cfg.macro_steps();
  if (fine.count() < N * block) {
    throw ShapeError("fine grid is shorter than the horizon");
  }
  ExactAveragedPath out;
  out.times.reserve(N + 1);
  out.values.reserve(N + 1);
  out.times.push_back(0.0);
  out.values.push_back(Vector::Constant(1, x0));

  const double delta = fine.dt;
  double w = 0.0;
  double integral = 0.0;
  for (std::size_t k = 0; k < N * block; ++k) {
    const double s = static_cast<double>(k) * delta;
    integral += std::exp(-3.0 * s + 2.0 * w) * delta;
    w += fine.values(0, static_cast<Eigen::Index>(k));
    if ((k + 1) % block == 0) {
      const double t = static_cast<double>(k + 1) * delta;
      const double value = x0 * std::exp(-1.5 * t + w) /
                           std::sqrt(1.0 + 2.0 * x0 * x0 * integral);
      out.times.push_back(static_cast<double>((k + 1) / block) * cfg.delta1());
      out.values.push_back(Vector::Constant(1, value));
    }
  }
  return out;
}

inline ExactAveragedPath exact_averaged_path(const SolverConfig &cfg,
                                             const Vector &x0,
                                             const IncrementGrid &fine) {
  if (x0.size() != 1) {
    throw UnsupportedSystem(
        "the closed-form averaged solution is one-dimensional");
  }
  return exact_averaged_path(cfg, x0[0], fine);
}

} // namespace mtem

#endif // MTEM_MACRO_HPP_
