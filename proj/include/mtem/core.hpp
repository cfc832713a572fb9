#ifndef MTEM_CORE_HPP_
#define MTEM_CORE_HPP_

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <stdexcept>
#include <string>
#include <utility>

#include <Eigen/Dense>

namespace mtem {

using Vector = Eigen::VectorXd;
using Matrix = Eigen::MatrixXd;

// Error taxonomy. Divergence of a simulated path is never an exception; it is
// recorded on the path itself.
struct Error : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct ConfigError : Error {
  using Error::Error;
};
struct PlanningError : Error {
  using Error::Error;
};
struct ShapeError : Error {
  using Error::Error;
};
struct DomainError : Error {
  using Error::Error;
};
struct UnsupportedSystem : Error {
  using Error::Error;
};

/// A state component above this magnitude (or non-finite) marks a path as
/// diverged.
inline constexpr double kDivergenceThreshold = 1e10;

inline bool is_diverged(const Vector &v) {
  for (Eigen::Index i = 0; i < v.size(); ++i) {
    const double c = v[i];
    if (!std::isfinite(c) || std::abs(c) > kDivergenceThreshold) {
      return true;
    }
  }
  return false;
}

inline bool all_finite(const Vector &v) { return v.allFinite(); }
inline bool all_finite(const Matrix &m) { return m.allFinite(); }

/// Growth exponents of the slow drift and slow diffusion. Only
/// max(theta3, theta4) enters the scheme (through the truncation map); the
/// rest are carried as metadata.
struct GrowthExponents {
  double theta1 = 1.0;
  double theta2 = 1.0;
  double theta3 = 1.0;
  double theta4 = 1.0;

  double truncation_exponent() const { return std::max(theta3, theta4) - 1.0; }
};

class NormalStream;

/// Evaluators and structural constants of one slow-fast system
///   dx = b(x, y) dt + sigma(x) dW1,
///   dy = f(x, y) dt / eps + g(x, y) dW2 / sqrt(eps).
struct CoefficientSet {
  using DriftFn = std::function<Vector(const Vector &, const Vector &)>;
  using SlowDiffusionFn = std::function<Matrix(const Vector &)>;
  using FastDiffusionFn = std::function<Matrix(const Vector &, const Vector &)>;
  using AveragedDriftFn = std::function<Vector(const Vector &)>;
  using InvariantSamplerFn = std::function<Vector(const Vector &, NormalStream &)>;

  std::string name;
  int dim_slow = 1;
  int dim_fast = 1;
  int dim_noise_slow = 1;
  int dim_noise_fast = 1;

  DriftFn slow_drift;
  SlowDiffusionFn slow_diffusion;
  DriftFn fast_drift;
  FastDiffusionFn fast_diffusion;

  GrowthExponents theta;
  double dissipativity_beta = 1.0;

  // Optional closed forms; empty when unknown.
  AveragedDriftFn averaged_drift;
  InvariantSamplerFn invariant_sampler;
  /// True when the averaged equation is dx = (-x^3 - x) dt + x dW1, whose
  /// pathwise solution exact_averaged_path evaluates.
  bool closed_form_averaged_path = false;

  /// phi(u) = 1 + u^(max(theta3, theta4) - 1)
  double phi(double u) const {
    return 1.0 + std::pow(u, theta.truncation_exponent());
  }

  void validate() const {
    if (dim_slow < 1 || dim_fast < 1 || dim_noise_slow < 1 ||
        dim_noise_fast < 1) {
      throw ConfigError("coefficient set '" + name +
                        "': all dimensions must be positive");
    }
    if (!slow_drift || !slow_diffusion || !fast_drift || !fast_diffusion) {
      throw ConfigError("coefficient set '" + name +
                        "': b, sigma, f and g evaluators are required");
    }
    if (theta.theta1 < 1.0 || theta.theta3 < 1.0 || theta.theta4 < 1.0) {
      throw ConfigError("coefficient set '" + name +
                        "': growth exponents theta1, theta3, theta4 must be >= 1");
    }
    if (!(theta.truncation_exponent() > 0.0)) {
      throw ConfigError("coefficient set '" + name +
                        "': max(theta3, theta4) must exceed 1");
    }
    if (!(dissipativity_beta > 0.0)) {
      throw ConfigError("coefficient set '" + name +
                        "': dissipativity_beta must be positive");
    }
  }
};

/// How SystemSpec treats the truncation constant K.
enum class TruncationBound {
  checked,  ///< reject K < 1 + phi(|x0|)
  asserted, ///< caller supplies a published constant; bound not enforced
};

/// A coefficient set together with its initial data, timescale ratio and
/// truncation constant. Immutable; copies share the coefficient set.
class SystemSpec {
public:
  SystemSpec(CoefficientSet coefficients, Vector x0, Vector y0, double epsilon,
             double truncation_K,
             TruncationBound bound = TruncationBound::checked)
      : coefficients_(
            std::make_shared<const CoefficientSet>(std::move(coefficients))),
        x0_(std::move(x0)), y0_(std::move(y0)), epsilon_(epsilon),
        truncation_K_(truncation_K), bound_(bound) {
    coefficients_->validate();
    check();
  }

  const CoefficientSet &coefficients() const { return *coefficients_; }
  const Vector &x0() const { return x0_; }
  const Vector &y0() const { return y0_; }
  double epsilon() const { return epsilon_; }
  double truncation_K() const { return truncation_K_; }
  TruncationBound truncation_bound() const { return bound_; }

  int dim_slow() const { return coefficients_->dim_slow; }
  int dim_fast() const { return coefficients_->dim_fast; }

  SystemSpec with_initial(Vector x0, Vector y0) const {
    SystemSpec copy = *this;
    copy.x0_ = std::move(x0);
    copy.y0_ = std::move(y0);
    copy.check();
    return copy;
  }

  SystemSpec with_epsilon(double epsilon) const {
    SystemSpec copy = *this;
    copy.epsilon_ = epsilon;
    copy.check();
    return copy;
  }

  SystemSpec with_truncation_K(double K, TruncationBound bound) const {
    SystemSpec copy = *this;
    copy.truncation_K_ = K;
    copy.bound_ = bound;
    copy.check();
    return copy;
  }

  /// Smallest K accepted under TruncationBound::checked.
  double minimal_truncation_K() const {
    return 1.0 + coefficients_->phi(x0_.norm());
  }

private:
  void check() const {
    if (x0_.size() != coefficients_->dim_slow) {
      throw ConfigError("x0 has dimension " + std::to_string(x0_.size()) +
                        ", expected " + std::to_string(coefficients_->dim_slow));
    }
    if (y0_.size() != coefficients_->dim_fast) {
      throw ConfigError("y0 has dimension " + std::to_string(y0_.size()) +
                        ", expected " + std::to_string(coefficients_->dim_fast));
    }
    if (!all_finite(x0_) || !all_finite(y0_)) {
      throw ConfigError("initial values must be finite");
    }
    if (!(epsilon_ > 0.0)) {
      throw ConfigError("epsilon must be positive");
    }
    if (!(truncation_K_ >= 1.0) || !std::isfinite(truncation_K_)) {
      throw ConfigError("truncation_K must be a finite value >= 1");
    }
    if (bound_ == TruncationBound::checked &&
        truncation_K_ < minimal_truncation_K()) {
      throw ConfigError("truncation_K = " + std::to_string(truncation_K_) +
                        " is below 1 + phi(|x0|) = " +
                        std::to_string(minimal_truncation_K()));
    }
  }

  std::shared_ptr<const CoefficientSet> coefficients_;
  Vector x0_;
  Vector y0_;
  double epsilon_;
  double truncation_K_;
  TruncationBound bound_;
};

/// Step sizes, estimator length, horizon and seed of one run. The horizon is
/// rounded down to a whole number of macro steps at construction.
class SolverConfig {
public:
  SolverConfig(double delta1, double delta2, std::size_t M, double T,
               unsigned refine_levels = 4, std::uint64_t seed = 0)
      : delta1_(delta1), delta2_(delta2), M_(M), requested_T_(T),
        refine_levels_(refine_levels), seed_(seed) {
    if (!(delta1 > 0.0 && delta1 <= 1.0)) {
      throw ConfigError("delta1 must be in (0,1]");
    }
    if (!(delta2 > 0.0 && delta2 <= 1.0)) {
      throw ConfigError("delta2 must be in (0,1]");
    }
    if (M == 0) {
      throw ConfigError("M must be a positive integer");
    }
    if (!(T > 0.0) || !std::isfinite(T)) {
      throw ConfigError("T must be positive");
    }
    if (refine_levels > 30) {
      throw ConfigError("refine_levels must be at most 30");
    }
    // The relative slack absorbs representation error in T / delta1 for
    // horizons that are meant to be exact multiples.
    const double steps = std::floor(T / delta1 * (1.0 + 1e-12));
    if (steps < 1.0) {
      throw ConfigError("T must be at least one macro step delta1");
    }
    macro_steps_ = static_cast<std::size_t>(steps);
  }

  double delta1() const { return delta1_; }
  double delta2() const { return delta2_; }
  std::size_t M() const { return M_; }
  /// Effective horizon N * delta1.
  double T() const { return static_cast<double>(macro_steps_) * delta1_; }
  double requested_T() const { return requested_T_; }
  std::size_t macro_steps() const { return macro_steps_; }
  unsigned refine_levels() const { return refine_levels_; }
  std::uint64_t seed() const { return seed_; }

  SolverConfig with_seed(std::uint64_t seed) const {
    SolverConfig copy = *this;
    copy.seed_ = seed;
    return copy;
  }
  SolverConfig with_refine_levels(unsigned r) const {
    return SolverConfig(delta1_, delta2_, M_, requested_T_, r, seed_);
  }

private:
  double delta1_;
  double delta2_;
  std::size_t M_;
  double requested_T_;
  unsigned refine_levels_;
  std::uint64_t seed_;
  std::size_t macro_steps_ = 0;
};

} // namespace mtem

#endif // MTEM_CORE_HPP_
