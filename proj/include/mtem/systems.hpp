#ifndef MTEM_SYSTEMS_HPP_
#define MTEM_SYSTEMS_HPP_

#include <cmath>
#include <functional>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "core.hpp"
#include "noise.hpp"

namespace mtem {

/// Parameters of the cubic slow drift / Ornstein-Uhlenbeck fast family
///   b(x, y) = -a |x|^2 x - c y,   sigma(x) = s diag(x),
///   f(x, y) = lambda (x - y),     g = gamma I,
/// with dim_fast = dim_slow = dim. The frozen fast process has invariant law
/// Normal(x, gamma^2 / (2 lambda) I), hence b_bar(x) = -a |x|^2 x - c x.
struct CubicOuParams {
  int dim = 1;
  double a = 1.0;
  double c = 1.0;
  double s = 1.0;
  double lambda = 1.0;
  double gamma = 1.0;
};

inline CoefficientSet cubic_ou_coefficients(const CubicOuParams &p) {
  if (p.dim < 1) {
    throw ConfigError("cubic-ou: dim must be positive");
  }
  if (!(p.lambda > 0.0)) {
    throw ConfigError("cubic-ou: lambda must be positive");
  }
  if (!(p.a >= 0.0)) {
    throw ConfigError("cubic-ou: a must be non-negative");
  }
  CoefficientSet cs;
  cs.name = "cubic-ou";
  cs.dim_slow = cs.dim_fast = cs.dim_noise_slow = cs.dim_noise_fast = p.dim;

  const double a = p.a;
  const double c = p.c;
  const double s = p.s;
  const double lambda = p.lambda;
  const double gamma = p.gamma;
  const int dim = p.dim;

  cs.slow_drift = [a, c](const Vector &x, const Vector &y) -> Vector {
    return -(a * x.squaredNorm()) * x - c * y;
  };
  cs.slow_diffusion = [s](const Vector &x) -> Matrix {
    return (s * x).asDiagonal();
  };
  cs.fast_drift = [lambda](const Vector &x, const Vector &y) -> Vector {
    return lambda * (x - y);
  };
  cs.fast_diffusion = [gamma, dim](const Vector &, const Vector &) -> Matrix {
    return gamma * Matrix::Identity(dim, dim);
  };
  cs.theta = GrowthExponents{2.0, 1.0, 3.0, 1.0};
  cs.dissipativity_beta = 2.0 * lambda;
  cs.averaged_drift = [a, c](const Vector &x) -> Vector {
    return -(a * x.squaredNorm()) * x - c * x;
  };
  const double spread = std::abs(gamma) / std::sqrt(2.0 * lambda);
  cs.invariant_sampler = [spread, dim](const Vector &x, NormalStream &rng) {
    Vector y(dim);
    for (int i = 0; i < dim; ++i) {
      y[i] = x[i] + spread * rng.standard();
    }
    return y;
  };
  cs.closed_form_averaged_path =
      p.dim == 1 && p.a == 1.0 && p.c == 1.0 && p.s == 1.0;
  return cs;
}

/// The one-dimensional system
///   dx = (-x^3 - y) dt + x dW1,   dy = (x - y) dt / eps + dW2 / sqrt(eps),
/// with averaged drift -x^3 - x and frozen invariant law Normal(x, 1/2).
///
/// The truncation cap is (2 delta1^(-1/2) - 1)^(1/2), i.e. K = 2 with
/// phi(u) = 1 + u^2. K is kept at its published value for every x0, so the
/// spec is built with TruncationBound::asserted.
inline SystemSpec builtin_example_7_1() {
  CoefficientSet cs = cubic_ou_coefficients(CubicOuParams{});
  cs.name = "example-7.1";
  cs.slow_drift = [](const Vector &x, const Vector &y) -> Vector {
    return Vector::Constant(1, -(x[0] * x[0] * x[0]) - y[0]);
  };
  cs.slow_diffusion = [](const Vector &x) -> Matrix {
    return Matrix::Constant(1, 1, x[0]);
  };
  cs.fast_drift = [](const Vector &x, const Vector &y) -> Vector {
    return Vector::Constant(1, x[0] - y[0]);
  };
  cs.fast_diffusion = [](const Vector &, const Vector &) -> Matrix {
    return Matrix::Constant(1, 1, 1.0);
  };
  cs.averaged_drift = [](const Vector &x) -> Vector {
    return Vector::Constant(1, -(x[0] * x[0] * x[0]) - x[0]);
  };
  cs.invariant_sampler = [](const Vector &x, NormalStream &rng) -> Vector {
    return Vector::Constant(1, rng.normal(x[0], std::sqrt(0.5)));
  };
  return SystemSpec(std::move(cs), Vector::Constant(1, 1.0),
                    Vector::Constant(1, 1.0), 1e-3, 2.0,
                    TruncationBound::asserted);
}

struct SystemEntry {
  std::string name;
  std::string description;
  std::function<SystemSpec()> make;
};

inline const std::vector<SystemEntry> &builtin_systems() {
  static const std::vector<SystemEntry> entries = {
      {"example-7.1",
       "1-D cubic slow drift with OU fast process: b = -x^3 - y, sigma = x, "
       "f = x - y, g = 1; K = 2",
       builtin_example_7_1},
  };
  return entries;
}

inline std::optional<SystemSpec> find_builtin(std::string_view name) {
  for (const auto &e : builtin_systems()) {
    if (e.name == name) {
      return e.make();
    }
  }
  return std::nullopt;
}

struct FamilyEntry {
  std::string name;
  std::string description;
};

inline const std::vector<FamilyEntry> &coefficient_families() {
  static const std::vector<FamilyEntry> entries = {
      {"cubic-ou",
       "b = -a|x|^2 x - c y, sigma = s diag(x), f = lambda (x - y), "
       "g = gamma I; parameters dim, a, c, s, lambda, gamma"},
  };
  return entries;
}

} // namespace mtem

#endif // MTEM_SYSTEMS_HPP_
