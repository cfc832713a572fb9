#ifndef MTEM_PROBE_HPP_
#define MTEM_PROBE_HPP_

// Numeric spot checks of the fast-process structure conditions on random
// points in a ball:
//
//   monotonicity   2 (y1 - y2).(f(x,y1) - f(x,y2)) + |g(x,y1) - g(x,y2)|^2
//                      <= -beta |y1 - y2|^2
//   dissipativity  y.f(x,y) + (k - 1)/2 |g(x,y)|^2 <= -alpha |y|^2 + L (1 + |x|^2)
//
// A finite sample can only refute these, never prove them. For the
// dissipativity check alpha is fitted by least squares of the left side on
// (-|y|^2, 1 + |x|^2) and L is then the smallest constant that makes every
// sampled point satisfy the bound; the check passes when alpha > 0.

#include <cstdint>
#include <limits>
#include <sstream>
#include <string>
#include <vector>

#include "core.hpp"
#include "noise.hpp"

namespace mtem {

struct ProbeError : Error {
  using Error::Error;
};

struct AssumptionCheck {
  std::string name;
  bool passed = true;
  /// Largest value of (left side - right side) over the sample.
  double worst_margin = -std::numeric_limits<double>::infinity();
  Vector witness_x;
  Vector witness_y1;
  Vector witness_y2; ///< empty for single-point checks
  double fitted_alpha = 0.0;
  double fitted_L = 0.0;
};

struct AssumptionReport {
  AssumptionCheck monotonicity;
  AssumptionCheck dissipativity;
  std::size_t n_points = 0;

  bool passed() const { return monotonicity.passed && dissipativity.passed; }
};

namespace detail {

inline std::string format_point(const Vector &x, const Vector &y) {
  std::ostringstream os;
  os.precision(17);
  os << "x = [" << x.transpose() << "], y = [" << y.transpose() << "]";
  return os.str();
}

template <typename T>
const T &require_finite(const T &value, const char *coefficient,
                        const Vector &x, const Vector &y) {
  if (!value.allFinite()) {
    throw ProbeError(std::string("coefficient ") + coefficient +
                     " returned a non-finite value at " + format_point(x, y));
  }
  return value;
}

inline Vector uniform_in_ball(NormalStream &rng, int dim, double radius) {
  Vector v(dim);
  double norm = 0.0;
  do {
    for (int i = 0; i < dim; ++i) {
      v[i] = rng.standard();
    }
    norm = v.norm();
  } while (norm == 0.0);
  const double r = radius * std::pow(rng.uniform(), 1.0 / dim);
  return v * (r / norm);
}

} // namespace detail

inline AssumptionReport probe_assumptions(const SystemSpec &sys,
                                          std::size_t n_points, double radius,
                                          std::uint64_t rng_seed) {
  if (n_points == 0) {
    throw ConfigError("probe_assumptions needs n_points >= 1");
  }
  if (!(radius > 0.0)) {
    throw ConfigError("probe_assumptions needs a positive radius");
  }
  const CoefficientSet &c = sys.coefficients();
  const double beta = c.dissipativity_beta;
  NormalStream rng(mix64(rng_seed));

  AssumptionReport report;
  report.n_points = n_points;
  report.monotonicity.name = "monotonicity";
  report.dissipativity.name = "dissipativity";

  std::vector<double> lhs(n_points);
  std::vector<double> y_sq(n_points);
  std::vector<double> x_sq(n_points);
  std::vector<Vector> xs(n_points);
  std::vector<Vector> ys(n_points);

  for (std::size_t i = 0; i < n_points; ++i) {
    const Vector x = detail::uniform_in_ball(rng, c.dim_slow, radius);
    const Vector y1 = detail::uniform_in_ball(rng, c.dim_fast, radius);
    const Vector y2 = detail::uniform_in_ball(rng, c.dim_fast, radius);

    const Vector f1 = detail::require_finite(c.fast_drift(x, y1), "f", x, y1);
    const Vector f2 = detail::require_finite(c.fast_drift(x, y2), "f", x, y2);
    const Matrix g1 = detail::require_finite(c.fast_diffusion(x, y1), "g", x, y1);
    const Matrix g2 = detail::require_finite(c.fast_diffusion(x, y2), "g", x, y2);

    const Vector dy = y1 - y2;
    const double cross = 2.0 * dy.dot(f1 - f2);
    const double noise = (g1 - g2).squaredNorm();
    const double rhs = -beta * dy.squaredNorm();
    const double margin = cross + noise - rhs;
    const double tol =
        1e-10 * (std::abs(cross) + noise + std::abs(rhs)) + 1e-300;
    if (margin > report.monotonicity.worst_margin) {
      report.monotonicity.worst_margin = margin;
      report.monotonicity.witness_x = x;
      report.monotonicity.witness_y1 = y1;
      report.monotonicity.witness_y2 = y2;
    }
    if (margin > tol) {
      report.monotonicity.passed = false;
    }

    // k = 2 dissipativity; (k - 1) / 2 = 1/2.
    lhs[i] = y1.dot(f1) + 0.5 * g1.squaredNorm();
    y_sq[i] = y1.squaredNorm();
    x_sq[i] = 1.0 + x.squaredNorm();
    xs[i] = x;
    ys[i] = y1;
  }

  // Least squares of lhs on columns (-|y|^2, 1 + |x|^2).
  double a11 = 0, a12 = 0, a22 = 0, r1 = 0, r2 = 0;
  for (std::size_t i = 0; i < n_points; ++i) {
    a11 += y_sq[i] * y_sq[i];
    a12 += -y_sq[i] * x_sq[i];
    a22 += x_sq[i] * x_sq[i];
    r1 += -y_sq[i] * lhs[i];
    r2 += x_sq[i] * lhs[i];
  }
  const double det = a11 * a22 - a12 * a12;
  double alpha = 0.0;
  if (std::abs(det) > 1e-300) {
    alpha = (a22 * r1 - a12 * r2) / det;
  } else if (a11 > 0.0) {
    alpha = r1 / a11;
  }

  AssumptionCheck &d = report.dissipativity;
  d.fitted_alpha = alpha;
  d.fitted_L = -std::numeric_limits<double>::infinity();
  for (std::size_t i = 0; i < n_points; ++i) {
    const double ratio = (lhs[i] + alpha * y_sq[i]) / x_sq[i];
    if (ratio > d.fitted_L) {
      d.fitted_L = ratio;
      d.witness_x = xs[i];
      d.witness_y1 = ys[i];
    }
  }
  d.fitted_L = std::max(d.fitted_L, 0.0);
  d.worst_margin = 0.0;
  for (std::size_t i = 0; i < n_points; ++i) {
    d.worst_margin = std::max(
        d.worst_margin, lhs[i] + alpha * y_sq[i] - d.fitted_L * x_sq[i]);
  }
  d.passed = alpha > 0.0 && std::isfinite(d.fitted_L);
  return report;
}

} // namespace mtem

#endif // MTEM_PROBE_HPP_
