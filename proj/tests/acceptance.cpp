// Acceptance checks, one line per criterion:
//   [PASS] <id>: <measured values>
//   [FAIL] <id>: <measured values>
// Lines starting with "[INFO]" are diagnostics and never affect the exit code.
//
//   acceptance               run every check
//   acceptance --only <id>   run one check
//   acceptance --list        print the ids

#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <functional>
#include <sstream>
#include <string>
#include <vector>

#include <mtem/experiment.hpp>
#include <mtem/mtem.hpp>

using namespace mtem;

namespace {

constexpr std::uint64_t kSeed = 1;

struct Outcome {
  bool pass = false;
  std::string detail;
  std::vector<std::string> info;
};

std::string fmt(double v, int digits = 6) {
  std::ostringstream os;
  os.precision(digits);
  os << v;
  return os.str();
}

Vector vec(double v) { return Vector::Constant(1, v); }

unsigned threads() { return hardware_threads(); }

// Example 7.1 under the q = 2..5 schedule, T = 1, 200 samples; SMSE at the
// terminal time; slope of log2 SMSE against q.
Outcome convergence_slope() {
  const std::vector<int> qs{2, 3, 4, 5};
  const ConvergenceReport r =
      run_convergence(builtin_example_7_1(), qs, 1.0, 200, kSeed, 4, threads());
  Outcome o;
  std::string levels;
  std::size_t diverged = 0;
  for (const auto &l : r.levels) {
    levels += " q" + std::to_string(l.q) + "=" + fmt(l.smse, 4);
    diverged += l.diverged;
  }
  if (!r.fitted_slope) {
    o.detail = "no slope (divergent levels)";
    return o;
  }
  const double s = *r.fitted_slope;
  o.pass = s >= -1.4 && s <= -0.6 && diverged == 0;
  o.detail = "slope " + fmt(s, 4) + " (band [-1.4, -0.6]); smse" + levels +
             "; diverged " + std::to_string(diverged);

  // Same scheme on finer levels, reported only.
  const std::vector<int> fine{5, 6, 7};
  const ConvergenceReport f =
      run_convergence(builtin_example_7_1(), fine, 1.0, 200, kSeed, 4, threads());
  std::string fl;
  for (const auto &l : f.levels) {
    fl += " q" + std::to_string(l.q) + "=" + fmt(l.smse, 4);
  }
  o.info.push_back("slope over q in {5,6,7}: " +
                   (f.fitted_slope ? fmt(*f.fitted_slope, 4) : std::string("n/a")) +
                   "; smse" + fl);
  return o;
}

// x0 = 12, delta1 = 2^-6, zero noise: PI diverges within 50 steps, MTEM stays
// below 10 in magnitude for t <= 3.
Outcome divergence_contrast() {
  const double d = std::ldexp(1.0, -6);
  const SystemSpec sys = builtin_example_7_1().with_initial(vec(12.0), vec(1.0));
  const SolverConfig cfg(d, d, 1024, 3.0);
  const NoisePlan quiet{kSeed, 0, true};
  const MacroTrajectory pi = pi_baseline_run(sys, cfg, quiet);
  const MacroTrajectory mt = mtem_run(sys, cfg, quiet);

  double peak = 0.0;
  double peak_after = 0.0;
  for (std::size_t n = 0; n < mt.slow_states.size(); ++n) {
    const double a = std::abs(mt.slow_states[n][0]);
    peak = std::max(peak, a);
    if (n >= 1) {
      peak_after = std::max(peak_after, a);
    }
  }
  const bool pi_ok = pi.diverged() && *pi.diverged_at <= 50;
  const bool mt_ok = !mt.diverged() && peak <= 10.0;
  Outcome o;
  o.pass = pi_ok && mt_ok;
  o.detail = "PI diverged at step " +
             (pi.diverged() ? std::to_string(*pi.diverged_at) : std::string("never")) +
             "; MTEM diverged " + (mt.diverged() ? "yes" : "no") +
             ", max |X| over t <= 3 = " + fmt(peak, 6) + " (bound 10; X(0) = 12)";
  o.info.push_back("MTEM max |X| over 0 < t <= 3: " + fmt(peak_after, 6) +
                   "; X(3) = " + fmt(mt.slow_states.back()[0], 6));
  return o;
}

// Frozen chain of example 7.1 at x = 3: moments at delta2 = 2^-6, and W2 to
// 1e5 exact draws across delta2 in {2^-4, 2^-6, 2^-8}.
Outcome invariant_measure() {
  const json doc{{"experiment", "invariant-check"},
                 {"system", "example-7.1"},
                 {"x", 3.0},
                 {"delta2_levels", {0.0625, 0.015625, 0.00390625}},
                 {"n_draws", 100000},
                 {"thinning", "auto"},
                 {"solver", {{"seed", kSeed}}},
                 {"threads", threads()}};
  const ResultBundle b = run_experiment(doc);
  const json &levels = b.manifest["summary"]["levels"];
  const double mean = levels[1]["mean"].get<double>();
  const double var = levels[1]["variance"].get<double>();
  std::vector<double> d2, w2;
  for (const auto &row : b.tables[0].rows) {
    d2.push_back(std::get<double>(row[0]));
    w2.push_back(std::get<double>(row[1]));
  }
  const double slope = loglog_slope(d2, w2);
  const bool monotone = w2[0] > w2[1] && w2[1] > w2[2];
  const bool moments = std::abs(mean - 3.0) <= 0.02 && std::abs(var - 0.5) <= 0.03;
  Outcome o;
  o.pass = moments && monotone && slope >= 0.2 && slope <= 0.8;
  o.detail = "mean " + fmt(mean, 5) + ", variance " + fmt(var, 5) +
             " at delta2 = 2^-6; w2 " + fmt(w2[0], 4) + ", " + fmt(w2[1], 4) +
             ", " + fmt(w2[2], 4) + " (monotone " + (monotone ? "yes" : "no") +
             "), log-slope " + fmt(slope, 3) + " (band [0.2, 0.8])";
  std::vector<double> exact;
  for (double h : d2) {
    exact.push_back(std::abs(std::sqrt(1.0 / (2.0 - h)) - std::sqrt(0.5)));
  }
  o.info.push_back("population W2 of the EM chain law N(3, 1/(2 - delta2)): " +
                   fmt(exact[0], 4) + ", " + fmt(exact[1], 4) + ", " +
                   fmt(exact[2], 4));
  return o;
}

// Estimator error at x = 1, delta2 = 2^-6, M in {2^8, 2^10, 2^12}.
Outcome estimator_error() {
  const std::vector<std::size_t> Ms{256, 1024, 4096};
  const auto pts = estimator_error_curve(builtin_example_7_1(), vec(1.0),
                                         std::ldexp(1.0, -6), Ms, 500,
                                         NoisePlan{kSeed}, threads());
  const bool monotone = pts[0].mse > pts[1].mse && pts[1].mse > pts[2].mse;
  const double ratio = pts[0].mse / pts[2].mse;
  Outcome o;
  o.pass = monotone && ratio >= 8.0 && ratio <= 24.0;
  o.detail = "mse " + fmt(pts[0].mse, 4) + ", " + fmt(pts[1].mse, 4) + ", " +
             fmt(pts[2].mse, 4) + "; ratio " + fmt(ratio, 4) + " (band [8, 24])";
  return o;
}

// OU pair with |y - z| = 1, delta2 = 0.1.
Outcome contraction() {
  const double d2 = 0.1;
  std::vector<std::size_t> steps;
  for (std::size_t m = 0; m <= 64; ++m) {
    steps.push_back(m);
  }
  const ContractionReport r = contraction_probe(
      builtin_example_7_1(), vec(1.0), vec(1.0), vec(0.0), d2, 64, 50,
      NoisePlan{kSeed}, std::nullopt, steps);
  double worst_rel = 0.0;
  bool bounded = true;
  for (const auto &g : r.points) {
    const double exact = std::pow(1.0 - d2, 2.0 * static_cast<double>(g.m));
    worst_rel = std::max(worst_rel, std::abs(g.mean_sq_gap - exact) / exact);
    bounded = bounded && g.mean_sq_gap <= std::exp(-static_cast<double>(g.m) * d2);
  }
  Outcome o;
  o.pass = worst_rel <= 1e-12 && bounded;
  o.detail = "max relative error " + fmt(worst_rel, 3) +
             " over m = 0..64; gap <= exp(-m delta2) " + (bounded ? "yes" : "no");
  return o;
}

bool same(const MacroTrajectory &a, const MacroTrajectory &b) {
  if (a.slow_states.size() != b.slow_states.size() || a.diverged_at != b.diverged_at) {
    return false;
  }
  for (std::size_t i = 0; i < a.slow_states.size(); ++i) {
    if (!(a.slow_states[i].array() == b.slow_states[i].array()).all()) {
      return false;
    }
  }
  return true;
}

std::string strip_wall(const CsvTable &t) {
  CsvTable c = t;
  for (std::size_t k = 0; k < c.header.size(); ++k) {
    if (c.header[k] == "wall_seconds") {
      for (auto &row : c.rows) {
        row[k] = std::string("-");
      }
    }
  }
  return c.render();
}

Outcome scheme_identities() {
  const double d = std::ldexp(1.0, -6);
  const SystemSpec sys = builtin_example_7_1();
  const TruncationMap map = TruncationMap::for_system(sys, d);

  // (a) cap never active
  const SolverConfig cfg(d, d, 256, 1.0);
  std::size_t a_ok = 0, a_total = 0;
  for (std::uint64_t j = 0; j < 20; ++j) {
    const NoisePlan plan{kSeed, j};
    const MacroTrajectory mt = mtem_run(sys, cfg, plan);
    double peak = 0.0;
    for (const auto &s : mt.slow_states) {
      peak = std::max(peak, s.norm());
    }
    if (peak < map.cap()) {
      ++a_total;
      a_ok += same(mt, pi_baseline_run(sys, cfg, plan));
    }
  }
  // (b) injected b_bar, with the cap active at the start
  const SystemSpec hot = sys.with_initial(vec(5.0), vec(1.0));
  std::size_t b_ok = 0;
  for (std::uint64_t j = 0; j < 20; ++j) {
    const NoisePlan plan{kSeed, j};
    b_ok += same(mtem_run(hot, cfg, plan, hot.coefficients().averaged_drift),
                 tem_run(hot, cfg, plan));
  }
  // (c) every experiment's CSVs with 1 and 4 threads
  const std::vector<json> docs{
      json{{"experiment", "converge"}, {"system", "example-7.1"},
           {"solver", {{"T", 1.0}, {"seed", kSeed}}}, {"samples", 12},
           {"q_levels", {1, 2, 3}}},
      json{{"experiment", "trajectory"}, {"system", "example-7.1"},
           {"solver", {{"delta1", 0.0625}, {"delta2", 0.0625}, {"M", 64}, {"T", 1.0}, {"seed", kSeed}}},
           {"samples", 6}},
      json{{"experiment", "diverge-demo"}, {"system", "example-7.1"}, {"x0", 12.0},
           {"solver", {{"delta1", 0.015625}, {"delta2", 0.015625}, {"M", 64}, {"T", 1.0}, {"seed", kSeed}}},
           {"samples", 6}},
      json{{"experiment", "invariant-check"}, {"system", "example-7.1"}, {"x", 3.0},
           {"delta2_levels", {0.0625, 0.03125, 0.015625}}, {"n_draws", 2000},
           {"solver", {{"seed", kSeed}}}},
      json{{"experiment", "estimator-curve"}, {"system", "example-7.1"}, {"x", 1.0},
           {"solver", {{"delta2", 0.015625}, {"seed", kSeed}}},
           {"M_values", {64, 256}}, {"samples", 40}},
      json{{"experiment", "averaging-check"}, {"system", "example-7.1"},
           {"solver", {{"delta1", 0.0625}, {"T", 0.5}, {"seed", kSeed}}},
           {"epsilon_levels", {0.1, 0.01}}, {"samples", 8}},
  };
  std::size_t c_ok = 0, c_total = 0;
  for (json doc : docs) {
    doc["threads"] = 1;
    const ResultBundle one = run_experiment(doc);
    doc["threads"] = 4;
    const ResultBundle four = run_experiment(doc);
    bool equal = one.tables.size() == four.tables.size();
    for (std::size_t i = 0; equal && i < one.tables.size(); ++i) {
      equal = strip_wall(one.tables[i]) == strip_wall(four.tables[i]);
    }
    ++c_total;
    c_ok += equal;
  }
  Outcome o;
  o.pass = a_total > 0 && a_ok == a_total && b_ok == 20 && c_ok == c_total;
  o.detail = "(a) " + std::to_string(a_ok) + "/" + std::to_string(a_total) +
             " identical; (b) " + std::to_string(b_ok) +
             "/20 identical; (c) " + std::to_string(c_ok) + "/" +
             std::to_string(c_total) + " experiments thread-invariant";
  return o;
}

// Coupled reference at epsilon in {1e-2, 1e-3}, h = epsilon / 8, T = 1.
Outcome averaging_principle() {
  const json doc{{"experiment", "averaging-check"},
                 {"system", "example-7.1"},
                 {"solver", {{"delta1", 0.015625}, {"T", 1.0}, {"seed", kSeed}}},
                 {"epsilon_levels", {0.01, 0.001}},
                 {"substep_ratio", 0.125},
                 {"samples", 200},
                 {"threads", threads()}};
  const ResultBundle b = run_experiment(doc);
  const auto &rows = b.tables[0].rows;
  const double g1 = std::get<double>(rows[0][1]), s1 = std::get<double>(rows[0][2]);
  const double g2 = std::get<double>(rows[1][1]), s2 = std::get<double>(rows[1][2]);
  const double sep = (g1 - g2) / std::sqrt(s1 * s1 + s2 * s2);
  Outcome o;
  o.pass = sep >= 3.0;
  o.detail = "gap(1e-2) = " + fmt(g1, 4) + " +- " + fmt(s1, 3) + ", gap(1e-3) = " +
             fmt(g2, 4) + " +- " + fmt(s2, 3) + "; separation " + fmt(sep, 3) +
             " sigma (need >= 3)";
  return o;
}

Outcome hand_step() {
  const double d = std::ldexp(1.0, -6);
  const MacroTrajectory run =
      mtem_run(builtin_example_7_1(), SolverConfig(d, 0.5, 2, d), NoisePlan{kSeed, 0, true});
  const double x1 = run.slow_states.at(1)[0];
  Outcome o;
  o.pass = x1 == 0.96875;
  o.detail = "X1 = " + format_double(x1) + " (expected 0.96875)";
  return o;
}

struct Check {
  const char *id;
  std::function<Outcome()> run;
};

const std::vector<Check> &checks() {
  static const std::vector<Check> all{
      {"convergence-slope", convergence_slope},
      {"divergence-contrast", divergence_contrast},
      {"invariant-measure", invariant_measure},
      {"estimator-error", estimator_error},
      {"contraction", contraction},
      {"scheme-identities", scheme_identities},
      {"averaging-principle", averaging_principle},
      {"hand-step", hand_step},
  };
  return all;
}

} // namespace

int main(int argc, char **argv) {
  std::string only;
  for (int i = 1; i < argc; ++i) {
    if (std::strcmp(argv[i], "--only") == 0 && i + 1 < argc) {
      only = argv[++i];
    } else if (std::strcmp(argv[i], "--list") == 0) {
      for (const auto &c : checks()) {
        std::printf("%s\n", c.id);
      }
      return 0;
    } else {
      std::fprintf(stderr, "usage: %s [--only <id>] [--list]\n", argv[0]);
      return 2;
    }
  }
  int failed = 0;
  int ran = 0;
  for (const auto &c : checks()) {
    if (!only.empty() && only != c.id) {
      continue;
    }
    ++ran;
    const auto start = std::chrono::steady_clock::now();
    Outcome o;
    try {
      o = c.run();
    } catch (const std::exception &e) {
      o.pass = false;
      o.detail = std::string("exception: ") + e.what();
    }
    const double secs =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    std::printf("[%s] %s: %s [%.1f s]\n", o.pass ? "PASS" : "FAIL", c.id,
                o.detail.c_str(), secs);
    for (const auto &line : o.info) {
      std::printf("[INFO] %s: %s\n", c.id, line.c_str());
    }
    std::fflush(stdout);
    failed += !o.pass;
  }
  if (ran == 0) {
    std::fprintf(stderr, "unknown check '%s'\n", only.c_str());
    return 2;
  }
  return failed == 0 ? 0 : 1;
}
