#include <gtest/gtest.h>

#include <cmath>
#include <limits>
#include <string>
#include <vector>

#include "test_support.hpp"

using namespace mtem;
using mtem::testing::scalar_coefficients;
using mtem::testing::scalar_system;
using mtem::testing::vec;

TEST(Example71, AveragedDrift) {
  const SystemSpec sys = builtin_example_7_1();
  const auto &bbar = sys.coefficients().averaged_drift;
  EXPECT_EQ(bbar(vec(1.0))[0], -2.0);
  EXPECT_EQ(bbar(vec(0.0))[0], 0.0);
  EXPECT_EQ(bbar(vec(2.0))[0], -10.0);
}

TEST(Example71, Structure) {
  const SystemSpec sys = builtin_example_7_1();
  const CoefficientSet &c = sys.coefficients();
  EXPECT_EQ(c.name, "example-7.1");
  EXPECT_EQ(c.dim_slow, 1);
  EXPECT_EQ(c.dim_fast, 1);
  EXPECT_EQ(c.theta.theta1, 2.0);
  EXPECT_EQ(c.theta.theta2, 1.0);
  EXPECT_EQ(c.theta.truncation_exponent(), 2.0);
  EXPECT_EQ(c.phi(3.0), 10.0);
  EXPECT_EQ(c.dissipativity_beta, 2.0);
  EXPECT_EQ(sys.truncation_K(), 2.0);
  EXPECT_EQ(sys.truncation_bound(), TruncationBound::asserted);
  EXPECT_TRUE(c.closed_form_averaged_path);
  EXPECT_EQ(c.slow_diffusion(vec(-1.5))(0, 0), -1.5);
  EXPECT_EQ(c.fast_diffusion(vec(4.0), vec(2.0))(0, 0), 1.0);
  EXPECT_EQ(c.fast_drift(vec(4.0), vec(2.5))[0], 1.5);
}

TEST(Example71, SlowDriftIdentity) {
  const CoefficientSet &c = builtin_example_7_1().coefficients();
  NormalStream rng(7);
  for (int i = 0; i < 1000; ++i) {
    const double x = 20.0 * rng.standard();
    const double y = 20.0 * rng.standard();
    EXPECT_DOUBLE_EQ(c.slow_drift(vec(x), vec(y))[0], -x * x * x - y);
  }
}

TEST(Example71, InvariantSamplerMoments) {
  const CoefficientSet &c = builtin_example_7_1().coefficients();
  NormalStream rng(NoisePlan{11, 0}.stream_seed(StreamKind::reference, 0));
  std::vector<double> draws(100000);
  for (auto &d : draws) {
    d = c.invariant_sampler(vec(3.0), rng)[0];
  }
  EXPECT_NEAR(mean_of(draws), 3.0, 0.01);
  EXPECT_NEAR(variance_of(draws), 0.5, 0.01);
}

TEST(Example71, RegisteredByName) {
  ASSERT_TRUE(find_builtin("example-7.1").has_value());
  EXPECT_FALSE(find_builtin("example-9.9").has_value());
  EXPECT_FALSE(coefficient_families().empty());
}

TEST(CubicOu, MatchesExampleAtDefaults) {
  const CoefficientSet family = cubic_ou_coefficients(CubicOuParams{});
  const CoefficientSet &ex = builtin_example_7_1().coefficients();
  NormalStream rng(3);
  for (int i = 0; i < 100; ++i) {
    const Vector x = vec(3.0 * rng.standard());
    const Vector y = vec(3.0 * rng.standard());
    EXPECT_EQ(family.slow_drift(x, y)[0], ex.slow_drift(x, y)[0]);
    EXPECT_EQ(family.fast_drift(x, y)[0], ex.fast_drift(x, y)[0]);
    EXPECT_EQ(family.averaged_drift(x)[0], ex.averaged_drift(x)[0]);
  }
  EXPECT_TRUE(family.closed_form_averaged_path);
}

TEST(CubicOu, MultiDimensional) {
  CubicOuParams p;
  p.dim = 3;
  p.lambda = 2.0;
  const CoefficientSet cs = cubic_ou_coefficients(p);
  EXPECT_FALSE(cs.closed_form_averaged_path);
  EXPECT_EQ(cs.dissipativity_beta, 4.0);
  const Vector x = Vector::Constant(3, 1.0);
  EXPECT_EQ(cs.slow_diffusion(x).rows(), 3);
  EXPECT_EQ(cs.averaged_drift(x), Vector::Constant(3, -4.0));
  EXPECT_THROW(cubic_ou_coefficients(CubicOuParams{0}), ConfigError);
}

TEST(SystemSpec, RejectsSmallTruncationConstant) {
  const CoefficientSet cs = scalar_coefficients();
  // 1 + phi(|x0|) = 2 + x0^2 = 6 at x0 = 2
  EXPECT_THROW(SystemSpec(cs, vec(2.0), vec(0.0), 1e-3, 5.9), ConfigError);
  EXPECT_NO_THROW(SystemSpec(cs, vec(2.0), vec(0.0), 1e-3, 6.0));
  EXPECT_NO_THROW(
      SystemSpec(cs, vec(2.0), vec(0.0), 1e-3, 2.0, TruncationBound::asserted));
  const SystemSpec ok(cs, vec(2.0), vec(0.0), 1e-3, 6.0);
  EXPECT_EQ(ok.minimal_truncation_K(), 6.0);
  EXPECT_THROW(ok.with_initial(vec(3.0), vec(0.0)), ConfigError);
}

TEST(SystemSpec, RejectsBadInputs) {
  const CoefficientSet cs = scalar_coefficients();
  const auto asserted = TruncationBound::asserted;
  EXPECT_THROW(SystemSpec(cs, Vector::Zero(2), vec(0.0), 1e-3, 2.0, asserted),
               ConfigError);
  EXPECT_THROW(SystemSpec(cs, vec(0.0), Vector::Zero(2), 1e-3, 2.0, asserted),
               ConfigError);
  EXPECT_THROW(SystemSpec(cs, vec(0.0), vec(0.0), 0.0, 2.0, asserted),
               ConfigError);
  EXPECT_THROW(SystemSpec(cs, vec(0.0), vec(0.0), 1e-3, 0.5, asserted),
               ConfigError);
  EXPECT_THROW(SystemSpec(cs, vec(std::nan("")), vec(0.0), 1e-3, 2.0, asserted),
               ConfigError);
  CoefficientSet broken = cs;
  broken.fast_drift = nullptr;
  EXPECT_THROW(SystemSpec(broken, vec(0.0), vec(0.0), 1e-3, 2.0, asserted),
               ConfigError);
  CoefficientSet flat = cs;
  flat.theta = GrowthExponents{1.0, 1.0, 1.0, 1.0};
  EXPECT_THROW(SystemSpec(flat, vec(0.0), vec(0.0), 1e-3, 2.0, asserted),
               ConfigError);
  EXPECT_THROW(scalar_system(cs).with_epsilon(-1.0), ConfigError);
}

TEST(SolverConfig, RangeChecks) {
  try {
    SolverConfig(0.0, 0.1, 4, 1.0);
    FAIL() << "expected ConfigError";
  } catch (const ConfigError &e) {
    EXPECT_STREQ(e.what(), "delta1 must be in (0,1]");
  }
  EXPECT_THROW(SolverConfig(1.5, 0.1, 4, 1.0), ConfigError);
  EXPECT_THROW(SolverConfig(0.1, 0.0, 4, 1.0), ConfigError);
  EXPECT_THROW(SolverConfig(0.1, 0.1, 0, 1.0), ConfigError);
  EXPECT_THROW(SolverConfig(0.1, 0.1, 4, -1.0), ConfigError);
  EXPECT_THROW(SolverConfig(0.5, 0.1, 4, 0.25), ConfigError);
}

TEST(SolverConfig, HorizonRoundsDownToWholeSteps) {
  const SolverConfig a(0.25, 0.1, 4, 1.01);
  EXPECT_EQ(a.macro_steps(), 4u);
  EXPECT_EQ(a.T(), 1.0);
  EXPECT_EQ(a.requested_T(), 1.01);
  const SolverConfig b(std::ldexp(1.0, -6), 0.1, 4, 1.0);
  EXPECT_EQ(b.macro_steps(), 64u);
  const SolverConfig c(0.1, 0.1, 4, 0.3); // 0.3 / 0.1 is 2.9999999999999996
  EXPECT_EQ(c.macro_steps(), 3u);
  EXPECT_EQ(b.with_seed(9).seed(), 9u);
  EXPECT_EQ(b.with_refine_levels(2).refine_levels(), 2u);
}

TEST(Probe, ExampleMonotonicityIsTight) {
  const AssumptionReport r =
      probe_assumptions(builtin_example_7_1(), 1000, 10.0, 1);
  EXPECT_TRUE(r.monotonicity.passed);
  // 2 (y1 - y2)(f1 - f2) = -2 |y1 - y2|^2 holds with equality.
  EXPECT_LE(std::abs(r.monotonicity.worst_margin), 1e-9);
  EXPECT_EQ(r.n_points, 1000u);
}

TEST(Probe, AntiDissipativeDriftFails) {
  CoefficientSet cs = scalar_coefficients();
  cs.fast_drift = [](const Vector &, const Vector &y) -> Vector { return y; };
  cs.dissipativity_beta = 1.0;
  const AssumptionReport r = probe_assumptions(scalar_system(cs), 200, 10.0, 2);
  EXPECT_FALSE(r.monotonicity.passed);
  EXPECT_FALSE(r.passed());
  const Vector dy = r.monotonicity.witness_y1 - r.monotonicity.witness_y2;
  EXPECT_GT(2.0 * dy.squaredNorm(), 0.0);
  EXPECT_GT(r.monotonicity.worst_margin, 0.0);
}

TEST(Probe, DissipativityFitsAlphaNearOne) {
  const AssumptionReport r =
      probe_assumptions(builtin_example_7_1(), 2000, 10.0, 3);
  EXPECT_TRUE(r.dissipativity.passed);
  EXPECT_NEAR(r.dissipativity.fitted_alpha, 1.0, 0.1);
  EXPECT_GE(r.dissipativity.fitted_L, 0.0);
  EXPECT_LE(r.dissipativity.worst_margin, 1e-9);
}

TEST(Probe, Deterministic) {
  const SystemSpec sys = builtin_example_7_1();
  const AssumptionReport a = probe_assumptions(sys, 300, 5.0, 42);
  const AssumptionReport b = probe_assumptions(sys, 300, 5.0, 42);
  EXPECT_EQ(a.monotonicity.worst_margin, b.monotonicity.worst_margin);
  EXPECT_EQ(a.dissipativity.fitted_alpha, b.dissipativity.fitted_alpha);
  EXPECT_EQ(a.dissipativity.fitted_L, b.dissipativity.fitted_L);
}

TEST(Probe, NonFiniteEvaluatorNamesCoefficientAndPoint) {
  CoefficientSet cs = scalar_coefficients();
  cs.fast_diffusion = [](const Vector &, const Vector &) -> Matrix {
    return Matrix::Constant(1, 1, std::numeric_limits<double>::infinity());
  };
  try {
    probe_assumptions(scalar_system(cs), 10, 1.0, 0);
    FAIL() << "expected ProbeError";
  } catch (const ProbeError &e) {
    const std::string what = e.what();
    EXPECT_NE(what.find("coefficient g"), std::string::npos) << what;
    EXPECT_NE(what.find("x = ["), std::string::npos) << what;
  }
  EXPECT_THROW(probe_assumptions(builtin_example_7_1(), 0, 1.0, 0), ConfigError);
  EXPECT_THROW(probe_assumptions(builtin_example_7_1(), 1, 0.0, 0), ConfigError);
}

TEST(Divergence, Threshold) {
  EXPECT_FALSE(is_diverged(vec(1e10)));
  EXPECT_TRUE(is_diverged(vec(-1.0000001e10)));
  EXPECT_TRUE(is_diverged(vec(std::nan(""))));
  EXPECT_TRUE(is_diverged(vec(std::numeric_limits<double>::infinity())));
}
