#ifndef MTEM_EXPERIMENT_HPP_
#define MTEM_EXPERIMENT_HPP_

// Config-driven experiment orchestration: JSON in, CSV tables plus a manifest
// out. Requires nlohmann/json on the include path.

#include <charconv>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <cstdlib>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <initializer_list>
#include <optional>
#include <sstream>
#include <string>
#include <string_view>
#include <variant>
#include <vector>

#include <json.hpp>

#include "analysis.hpp"
#include "core.hpp"
#include "macro.hpp"
#include "micro.hpp"
#include "noise.hpp"
#include "parallel.hpp"
#include "systems.hpp"

#ifndef MTEM_VERSION
#define MTEM_VERSION "0.1.0"
#endif

namespace mtem {

using json = nlohmann::json;

enum class ExperimentKind {
  diverge_demo,
  trajectory,
  converge,
  invariant_check,
  estimator_curve,
  averaging_check,
};

inline constexpr std::pair<ExperimentKind, std::string_view> kExperimentNames[] = {
    {ExperimentKind::diverge_demo, "diverge-demo"},
    {ExperimentKind::trajectory, "trajectory"},
    {ExperimentKind::converge, "converge"},
    {ExperimentKind::invariant_check, "invariant-check"},
    {ExperimentKind::estimator_curve, "estimator-curve"},
    {ExperimentKind::averaging_check, "averaging-check"},
};

inline std::string_view experiment_name(ExperimentKind k) {
  for (const auto &[kind, name] : kExperimentNames) {
    if (kind == k) {
      return name;
    }
  }
  return "?";
}

struct ExperimentConfig {
  ExperimentKind kind = ExperimentKind::converge;
  json source; ///< the document as read, echoed into the manifest
  std::optional<SystemSpec> system;

  // solver block; absent fields keep these placeholders
  double delta1 = 0.0;
  double delta2 = 0.0;
  std::size_t M = 0;
  double T = 0.0;
  unsigned refine_levels = 4;
  std::uint64_t seed = 0;

  std::size_t samples = 0;
  std::vector<int> q_levels;
  std::vector<double> epsilon_levels;
  std::optional<std::size_t> micro_substeps;
  double substep_ratio = 0.125;
  Vector x;
  std::vector<double> delta2_levels;
  std::vector<std::size_t> M_values;
  std::size_t n_draws = 0;
  std::optional<std::size_t> burn_in;
  std::optional<std::size_t> thinning; ///< nullopt means "auto"
  bool zero_noise = false;
  SmseTime smse_time = SmseTime::terminal;
  std::filesystem::path output_dir = "out";
  unsigned threads = 1;

  NoisePlan plan() const { return NoisePlan{seed, 0, zero_noise}; }

  /// Solver settings for experiments that use a single configuration.
  SolverConfig solver() const {
    return SolverConfig(delta1, delta2, M, T, refine_levels, seed);
  }
};

struct ValidationResult {
  std::optional<ExperimentConfig> config;
  std::vector<std::string> errors;

  bool ok() const { return errors.empty(); }
  std::string message() const {
    std::string out;
    for (const auto &e : errors) {
      out += "  - " + e + "\n";
    }
    return out;
  }
};

/// Thrown by run_experiment for a config that does not validate.
struct ValidationFailure : ConfigError {
  std::vector<std::string> errors;
  explicit ValidationFailure(std::vector<std::string> errs)
      : ConfigError(join(errs)), errors(std::move(errs)) {}

private:
  static std::string join(const std::vector<std::string> &errs) {
    std::string s = "invalid configuration:";
    for (const auto &e : errs) {
      s += "\n  - " + e;
    }
    return s;
  }
};

namespace detail {

// nlohmann stores literal 12 as signed; JSON text "12" parses as unsigned.
inline bool is_non_negative_integer(const json &v) {
  return v.is_number_unsigned() || (v.is_number_integer() && v.get<std::int64_t>() >= 0);
}

// Reads typed fields out of one JSON object, appending one message per problem.
class FieldReader {
public:
  FieldReader(const json &obj, std::string prefix,
              std::vector<std::string> &errors)
      : obj_(obj), prefix_(std::move(prefix)), errors_(errors) {}

  bool has(std::string_view key) const { return obj_.contains(key); }

  void fail(std::string_view key, const std::string &what) const {
    errors_.push_back(std::string(prefix_) + std::string(key) + ": " + what);
  }

  void missing(std::string_view key, std::string_view experiment) const {
    errors_.push_back("missing field '" + prefix_ + std::string(key) +
                      "' (required by " + std::string(experiment) + ")");
  }

  std::optional<double> number(std::string_view key) const {
    if (!has(key)) {
      return std::nullopt;
    }
    const json &v = obj_.at(key);
    if (!v.is_number()) {
      fail(key, "expected a number");
      return std::nullopt;
    }
    const double d = v.get<double>();
    if (!std::isfinite(d)) {
      fail(key, "must be finite");
      return std::nullopt;
    }
    return d;
  }

  std::optional<std::uint64_t> unsigned_int(std::string_view key) const {
    if (!has(key)) {
      return std::nullopt;
    }
    const json &v = obj_.at(key);
    if (!detail::is_non_negative_integer(v)) {
      fail(key, "expected a non-negative integer");
      return std::nullopt;
    }
    return v.get<std::uint64_t>();
  }

  std::optional<std::size_t> count(std::string_view key) const {
    auto v = unsigned_int(key);
    if (v && *v == 0) {
      fail(key, "must be a positive integer");
      return std::nullopt;
    }
    return v;
  }

  std::optional<bool> boolean(std::string_view key) const {
    if (!has(key)) {
      return std::nullopt;
    }
    if (!obj_.at(key).is_boolean()) {
      fail(key, "expected true or false");
      return std::nullopt;
    }
    return obj_.at(key).get<bool>();
  }

  std::optional<std::string> string(std::string_view key) const {
    if (!has(key)) {
      return std::nullopt;
    }
    if (!obj_.at(key).is_string()) {
      fail(key, "expected a string");
      return std::nullopt;
    }
    return obj_.at(key).get<std::string>();
  }

  std::optional<std::vector<double>> numbers(std::string_view key) const {
    if (!has(key)) {
      return std::nullopt;
    }
    const json &v = obj_.at(key);
    if (!v.is_array() || v.empty()) {
      fail(key, "expected a non-empty array of numbers");
      return std::nullopt;
    }
    std::vector<double> out;
    for (const auto &e : v) {
      if (!e.is_number() || !std::isfinite(e.get<double>())) {
        fail(key, "expected a non-empty array of numbers");
        return std::nullopt;
      }
      out.push_back(e.get<double>());
    }
    return out;
  }

  std::optional<std::vector<std::uint64_t>> unsigned_ints(std::string_view key) const {
    if (!has(key)) {
      return std::nullopt;
    }
    const json &v = obj_.at(key);
    if (!v.is_array() || v.empty()) {
      fail(key, "expected a non-empty array of non-negative integers");
      return std::nullopt;
    }
    std::vector<std::uint64_t> out;
    for (const auto &e : v) {
      if (!detail::is_non_negative_integer(e)) {
        fail(key, "expected a non-empty array of non-negative integers");
        return std::nullopt;
      }
      out.push_back(e.get<std::uint64_t>());
    }
    return out;
  }

  /// A scalar or an array of numbers.
  std::optional<Vector> vector(std::string_view key) const {
    if (!has(key)) {
      return std::nullopt;
    }
    const json &v = obj_.at(key);
    if (v.is_number()) {
      return Vector::Constant(1, v.get<double>());
    }
    auto xs = numbers(key);
    if (!xs) {
      return std::nullopt;
    }
    return Eigen::Map<const Vector>(xs->data(), static_cast<Eigen::Index>(xs->size()));
  }

  void reject_unknown(std::initializer_list<std::string_view> known) const {
    for (auto it = obj_.begin(); it != obj_.end(); ++it) {
      bool found = false;
      for (auto k : known) {
        found = found || it.key() == k;
      }
      if (!found) {
        errors_.push_back("unknown field '" + prefix_ + it.key() + "'");
      }
    }
  }

private:
  const json &obj_;
  std::string prefix_;
  std::vector<std::string> &errors_;
};

inline Vector resize_initial(const Vector &v, int dim) {
  return v.size() == 1 && dim > 1 ? Vector::Constant(dim, v[0]) : v;
}

inline std::optional<SystemSpec> read_system(const json &doc,
                                             std::vector<std::string> &errors) {
  if (!doc.contains("system")) {
    errors.push_back("missing field 'system'");
    return std::nullopt;
  }
  const FieldReader top(doc, "", errors);
  const auto x0 = top.vector("x0");
  const auto y0 = top.vector("y0");
  const auto eps = top.number("epsilon");
  const json &sys = doc.at("system");

  std::optional<SystemSpec> spec;
  try {
    if (sys.is_string()) {
      spec = find_builtin(sys.get<std::string>());
      if (!spec) {
        errors.push_back("system: unknown built-in system '" +
                         sys.get<std::string>() + "'");
        return std::nullopt;
      }
      if (x0 || y0) {
        spec = spec->with_initial(
            x0 ? resize_initial(*x0, spec->dim_slow()) : spec->x0(),
            y0 ? resize_initial(*y0, spec->dim_fast()) : spec->y0());
      }
    } else if (sys.is_object()) {
      const FieldReader r(sys, "system.", errors);
      r.reject_unknown({"family", "params", "K", "truncation_bound"});
      const auto family = r.string("family");
      if (!family) {
        errors.push_back("missing field 'system.family'");
        return std::nullopt;
      }
      if (*family != "cubic-ou") {
        errors.push_back("system.family: unknown coefficient family '" +
                         *family + "'");
        return std::nullopt;
      }
      CubicOuParams p;
      if (sys.contains("params")) {
        const json &pj = sys.at("params");
        if (!pj.is_object()) {
          errors.push_back("system.params: expected an object");
          return std::nullopt;
        }
        const FieldReader pr(pj, "system.params.", errors);
        pr.reject_unknown({"dim", "a", "c", "s", "lambda", "gamma"});
        if (auto d = pr.count("dim")) {
          p.dim = static_cast<int>(*d);
        }
        p.a = pr.number("a").value_or(p.a);
        p.c = pr.number("c").value_or(p.c);
        p.s = pr.number("s").value_or(p.s);
        p.lambda = pr.number("lambda").value_or(p.lambda);
        p.gamma = pr.number("gamma").value_or(p.gamma);
      }
      TruncationBound bound = TruncationBound::checked;
      if (auto b = r.string("truncation_bound")) {
        if (*b == "asserted") {
          bound = TruncationBound::asserted;
        } else if (*b != "checked") {
          r.fail("truncation_bound", "expected \"checked\" or \"asserted\"");
        }
      }
      CoefficientSet cs = cubic_ou_coefficients(p);
      const Vector xi = resize_initial(x0.value_or(Vector::Ones(1)), p.dim);
      const Vector yi = resize_initial(y0.value_or(Vector::Ones(1)), p.dim);
      const double K =
          r.number("K").value_or(std::max(2.0, 1.0 + cs.phi(xi.norm())));
      spec = SystemSpec(std::move(cs), xi, yi, eps.value_or(1e-3), K, bound);
    } else {
      errors.push_back(
          "system: expected a built-in name or a {\"family\": ...} object");
      return std::nullopt;
    }
    if (eps) {
      spec = spec->with_epsilon(*eps);
    }
  } catch (const Error &e) {
    errors.push_back(std::string("system: ") + e.what());
    return std::nullopt;
  }
  return spec;
}

} // namespace detail

/// Structural and semantic validation without running anything. All problems
/// are reported together.
inline ValidationResult validate_config(const json &doc) {
  ValidationResult result;
  auto &errors = result.errors;
  if (!doc.is_object()) {
    errors.push_back("config must be a JSON object");
    return result;
  }
  ExperimentConfig cfg;
  cfg.source = doc;
  const detail::FieldReader top(doc, "", errors);
  top.reject_unknown({"experiment", "system", "x0", "y0", "epsilon", "solver",
                      "samples", "q_levels", "epsilon_levels", "micro_substeps",
                      "substep_ratio", "x", "delta2_levels", "M_values",
                      "n_draws", "burn_in", "thinning", "zero_noise",
                      "smse_time", "output_dir", "threads"});

  const auto kind_name = top.string("experiment");
  std::optional<ExperimentKind> kind;
  if (!kind_name) {
    if (!top.has("experiment")) {
      errors.push_back("missing field 'experiment'");
    }
  } else {
    for (const auto &[k, name] : kExperimentNames) {
      if (name == *kind_name) {
        kind = k;
      }
    }
    if (!kind) {
      errors.push_back("experiment: unknown experiment '" + *kind_name + "'");
    }
  }
  const std::string exp_name = kind_name.value_or("?");

  cfg.system = detail::read_system(doc, errors);

  // solver block
  json solver = doc.value("solver", json::object());
  if (!solver.is_object()) {
    errors.push_back("solver: expected an object");
    solver = json::object();
  }
  const detail::FieldReader sr(solver, "solver.", errors);
  sr.reject_unknown({"delta1", "delta2", "M", "T", "refine_levels", "seed"});
  const auto d1 = sr.number("delta1");
  const auto d2 = sr.number("delta2");
  const auto M = sr.count("M");
  const auto T = sr.number("T");
  const auto r = sr.unsigned_int("refine_levels");
  const auto seed = sr.unsigned_int("seed");
  if (d1 && !(*d1 > 0.0 && *d1 <= 1.0)) {
    errors.push_back("delta1 must be in (0,1]");
  }
  if (d2 && !(*d2 > 0.0 && *d2 <= 1.0)) {
    errors.push_back("delta2 must be in (0,1]");
  }
  if (T && !(*T > 0.0)) {
    errors.push_back("T must be positive");
  }
  if (d1 && T && *d1 > 0.0 && *T > 0.0 && *T < *d1 * (1.0 - 1e-12)) {
    errors.push_back("T must be at least one macro step delta1");
  }
  if (r && *r > 30) {
    errors.push_back("refine_levels must be at most 30");
  }
  cfg.delta1 = d1.value_or(0.0);
  cfg.delta2 = d2.value_or(0.0);
  cfg.M = M.value_or(0);
  cfg.T = T.value_or(0.0);
  cfg.refine_levels = static_cast<unsigned>(r.value_or(4));
  cfg.seed = seed.value_or(0);

  // common fields
  if (auto s = top.count("samples")) {
    cfg.samples = *s;
  }
  cfg.zero_noise = top.boolean("zero_noise").value_or(false);
  if (auto when = top.string("smse_time")) {
    if (*when == "maximum") {
      cfg.smse_time = SmseTime::maximum;
    } else if (*when != "terminal") {
      top.fail("smse_time", "expected \"terminal\" or \"maximum\"");
    }
  }
  if (auto dir = top.string("output_dir")) {
    cfg.output_dir = *dir;
  }
  if (top.has("threads")) {
    const json &t = doc.at("threads");
    if (t.is_string() && t.get<std::string>() == "auto") {
      cfg.threads = hardware_threads();
    } else if (detail::is_non_negative_integer(t) && t.get<std::uint64_t>() >= 1 &&
               t.get<std::uint64_t>() <= 4096) {
      cfg.threads = static_cast<unsigned>(t.get<std::uint64_t>());
    } else {
      top.fail("threads", "expected a positive integer or \"auto\"");
    }
  }
  if (const char *env = std::getenv("MTEM_THREADS"); env && *env) {
    unsigned v = 0;
    const auto [p, ec] = std::from_chars(env, env + std::strlen(env), v);
    if (ec != std::errc() || *p != '\0' || v == 0) {
      errors.push_back("MTEM_THREADS must be a positive integer");
    } else {
      cfg.threads = v;
    }
  }

  // experiment-specific fields
  if (auto q = top.unsigned_ints("q_levels")) {
    for (auto v : *q) {
      if (v > 15) {
        top.fail("q_levels", "entries must be in [0, 15]");
        break;
      }
      cfg.q_levels.push_back(static_cast<int>(v));
    }
    for (std::size_t i = 1; i < cfg.q_levels.size(); ++i) {
      if (cfg.q_levels[i] <= cfg.q_levels[i - 1]) {
        top.fail("q_levels", "must be strictly increasing");
        break;
      }
    }
  }
  if (auto e = top.numbers("epsilon_levels")) {
    for (double v : *e) {
      if (!(v > 0.0)) {
        top.fail("epsilon_levels", "entries must be positive");
        break;
      }
    }
    cfg.epsilon_levels = *e;
  }
  cfg.micro_substeps = top.count("micro_substeps");
  if (cfg.micro_substeps) {
    const std::size_t s = *cfg.micro_substeps;
    if ((s & (s - 1)) != 0) {
      top.fail("micro_substeps", "must be a power of two");
    }
  }
  if (auto ratio = top.number("substep_ratio")) {
    if (!(*ratio > 0.0 && *ratio <= kCoupledStepRatio)) {
      top.fail("substep_ratio", "must be in (0, 0.25]");
    } else {
      cfg.substep_ratio = *ratio;
    }
  }
  if (auto x = top.vector("x")) {
    cfg.x = *x;
  }
  if (auto levels = top.numbers("delta2_levels")) {
    for (double v : *levels) {
      if (!(v > 0.0 && v <= 1.0)) {
        errors.push_back("delta2 must be in (0,1]");
        break;
      }
    }
    cfg.delta2_levels = *levels;
  }
  if (auto ms = top.unsigned_ints("M_values")) {
    for (auto v : *ms) {
      if (v == 0) {
        top.fail("M_values", "entries must be positive");
        break;
      }
      cfg.M_values.push_back(v);
    }
  }
  if (auto n = top.count("n_draws")) {
    cfg.n_draws = *n;
  }
  cfg.burn_in = top.count("burn_in");
  if (top.has("thinning")) {
    const json &t = doc.at("thinning");
    if (t.is_string() && t.get<std::string>() == "auto") {
      cfg.thinning = std::nullopt;
    } else {
      cfg.thinning = top.count("thinning");
    }
  } else {
    cfg.thinning = 1;
  }

  if (!kind) {
    return result;
  }
  cfg.kind = *kind;
  auto require = [&](std::initializer_list<std::string_view> keys) {
    for (auto k : keys) {
      if (!top.has(k)) {
        top.missing(k, exp_name);
      }
    }
  };
  auto require_solver = [&](std::initializer_list<std::string_view> keys) {
    for (auto k : keys) {
      if (!sr.has(k)) {
        sr.missing(k, exp_name);
      }
    }
  };
  const SystemSpec *sys = cfg.system ? &*cfg.system : nullptr;
  auto need_closed_form = [&] {
    if (sys && !sys->coefficients().closed_form_averaged_path) {
      errors.push_back("system '" + sys->coefficients().name +
                       "' has no closed-form averaged solution, which " +
                       exp_name + " requires");
    }
  };
  auto check_x = [&] {
    if (sys && top.has("x") && cfg.x.size() != sys->dim_slow()) {
      cfg.x = detail::resize_initial(cfg.x, sys->dim_slow());
      if (cfg.x.size() != sys->dim_slow()) {
        top.fail("x", "dimension does not match the slow dimension");
      }
    }
  };

  switch (cfg.kind) {
  case ExperimentKind::diverge_demo:
    require({"samples"});
    require_solver({"delta1", "delta2", "M", "T"});
    break;
  case ExperimentKind::trajectory:
    require({"samples"});
    require_solver({"delta1", "delta2", "M", "T"});
    need_closed_form();
    break;
  case ExperimentKind::converge:
    require({"samples", "q_levels"});
    require_solver({"T"});
    need_closed_form();
    if (top.has("q_levels") && cfg.q_levels.size() < 3 &&
        !cfg.q_levels.empty()) {
      top.fail("q_levels", "at least 3 levels are needed for a slope fit");
    }
    break;
  case ExperimentKind::invariant_check:
    require({"x", "delta2_levels", "n_draws"});
    check_x();
    if (sys && sys->dim_slow() != 1) {
      errors.push_back("invariant-check compares one-dimensional laws; system '" +
                       sys->coefficients().name + "' is not one-dimensional");
    }
    if (sys && !sys->coefficients().invariant_sampler) {
      errors.push_back("system '" + sys->coefficients().name +
                       "' has no exact invariant sampler");
    }
    break;
  case ExperimentKind::estimator_curve:
    require({"x", "M_values", "samples"});
    require_solver({"delta2"});
    check_x();
    if (sys && !sys->coefficients().averaged_drift) {
      errors.push_back("system '" + sys->coefficients().name +
                       "' has no closed-form averaged drift");
    }
    break;
  case ExperimentKind::averaging_check:
    require({"samples", "epsilon_levels"});
    require_solver({"delta1", "T"});
    need_closed_form();
    if (cfg.micro_substeps && top.has("substep_ratio")) {
      errors.push_back("give either micro_substeps or substep_ratio, not both");
    }
    if (cfg.micro_substeps && cfg.delta1 > 0.0) {
      const double h = cfg.delta1 / static_cast<double>(*cfg.micro_substeps);
      for (double eps : cfg.epsilon_levels) {
        if (eps > 0.0 && h / eps > kCoupledStepRatio) {
          std::ostringstream msg;
          msg << "coupled step guard violated: h / epsilon = " << h / eps
              << " exceeds 0.25 at epsilon = " << eps;
          errors.push_back(msg.str());
        }
      }
    }
    break;
  }

  if (errors.empty()) {
    result.config = std::move(cfg);
  }
  return result;
}

inline ValidationResult validate_config_file(const std::filesystem::path &path) {
  ValidationResult result;
  std::ifstream in(path);
  if (!in) {
    result.errors.push_back("cannot open config file '" + path.string() + "'");
    return result;
  }
  json doc;
  try {
    doc = json::parse(in);
  } catch (const json::parse_error &e) {
    result.errors.push_back("config is not valid JSON: " + std::string(e.what()));
    return result;
  }
  return validate_config(doc);
}

/// Shortest decimal form that reads back to the same double.
inline std::string format_double(double v) {
  char buf[64];
  const auto res = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, res.ptr);
}

using Cell = std::variant<double, std::uint64_t, std::string>;

struct CsvTable {
  std::string file_name;
  std::vector<std::string> header;
  std::vector<std::vector<Cell>> rows;

  std::string render() const {
    std::string out;
    auto line = [&out](const auto &cells, auto &&fmt) {
      for (std::size_t i = 0; i < cells.size(); ++i) {
        if (i) {
          out += ',';
        }
        out += fmt(cells[i]);
      }
      out += '\n';
    };
    line(header, [](const std::string &s) { return s; });
    for (const auto &row : rows) {
      line(row, [](const Cell &c) {
        if (const double *d = std::get_if<double>(&c)) {
          return format_double(*d);
        }
        if (const std::uint64_t *u = std::get_if<std::uint64_t>(&c)) {
          return std::to_string(*u);
        }
        return std::get<std::string>(c);
      });
    }
    return out;
  }
};

struct ResultBundle {
  json manifest;
  std::vector<CsvTable> tables;
  std::string summary; ///< human-oriented, not part of the determinism contract
};

namespace detail {

/// Scalar written to path CSVs: the state itself in 1-D, its norm otherwise.
inline double path_value(const Vector &v) {
  return v.size() == 1 ? v[0] : v.norm();
}

inline void append_path(CsvTable &t, std::size_t sample,
                        const MacroTrajectory &run) {
  for (std::size_t n = 0; n < run.slow_states.size(); ++n) {
    t.rows.push_back({std::uint64_t{sample}, run.times[n],
                      path_value(run.slow_states[n]),
                      std::string(scheme_name(run.scheme))});
  }
}

inline ResultBundle run_diverge_demo(const ExperimentConfig &cfg) {
  const SystemSpec &sys = *cfg.system;
  const SolverConfig sc = cfg.solver();
  const NoisePlan plan = cfg.plan();
  std::vector<MacroTrajectory> pi(cfg.samples), mt(cfg.samples);
  parallel_for(cfg.samples, cfg.threads, [&](std::size_t j) {
    pi[j] = pi_baseline_run(sys, sc, plan.sample(j));
    mt[j] = mtem_run(sys, sc, plan.sample(j));
  });
  ResultBundle b;
  CsvTable t{"diverge_demo.csv", {"sample", "t", "value", "scheme"}, {}};
  json summary = json::object();
  for (const auto *runs : {&pi, &mt}) {
    std::size_t diverged = 0;
    std::optional<std::size_t> first;
    double max_abs = 0.0;
    for (std::size_t j = 0; j < cfg.samples; ++j) {
      const MacroTrajectory &run = (*runs)[j];
      append_path(t, j, run);
      if (run.diverged()) {
        ++diverged;
        first = std::min(first.value_or(*run.diverged_at), *run.diverged_at);
      } else {
        for (const auto &s : run.slow_states) {
          max_abs = std::max(max_abs, s.lpNorm<Eigen::Infinity>());
        }
      }
    }
    const std::string name = scheme_name(runs->front().scheme);
    summary[name] = {{"diverged", diverged},
                     {"first_divergence_step",
                      first ? json(*first) : json(nullptr)},
                     {"max_abs_state_non_diverged", max_abs}};
    b.summary += name + ": " + std::to_string(diverged) + " of " +
                 std::to_string(cfg.samples) + " samples diverged\n";
  }
  b.tables.push_back(std::move(t));
  b.manifest["summary"] = summary;
  return b;
}

inline ResultBundle run_trajectory(const ExperimentConfig &cfg) {
  const SystemSpec &sys = *cfg.system;
  const SolverConfig sc = cfg.solver();
  const NoisePlan plan = cfg.plan();
  std::vector<MacroTrajectory> mt(cfg.samples);
  std::vector<ExactAveragedPath> ex(cfg.samples);
  parallel_for(cfg.samples, cfg.threads, [&](std::size_t j) {
    const NoisePlan p = plan.sample(j);
    mt[j] = mtem_run(sys, sc, p);
    ex[j] = exact_averaged_path(
        sc, sys.x0(),
        macro_increments(p, 1, sc.delta1(), sc.macro_steps(), sc.refine_levels())
            .fine);
  });
  ResultBundle b;
  std::vector<PathPair> pairs;
  for (std::size_t j = 0; j < cfg.samples; ++j) {
    CsvTable t{"trajectory_sample_" + std::to_string(j) + ".csv",
               {"sample", "t", "exact", "mtem"},
               {}};
    const std::size_t n = mt[j].slow_states.size();
    for (std::size_t i = 0; i < n; ++i) {
      t.rows.push_back({std::uint64_t{j}, ex[j].times[i], ex[j].values[i][0],
                        mt[j].slow_states[i][0]});
    }
    b.tables.push_back(std::move(t));
    pairs.push_back({view(ex[j]), view(mt[j])});
  }
  const SmseSeries s = smse(pairs);
  b.manifest["summary"] = {{"terminal_smse", s.terminal()},
                           {"max_smse", s.maximum()},
                           {"diverged", s.n_excluded}};
  b.summary = "terminal SMSE " + format_double(s.terminal()) + " over " +
              std::to_string(s.n_samples) + " samples (" +
              std::to_string(s.n_excluded) + " diverged)\n";
  return b;
}

inline ResultBundle run_converge(const ExperimentConfig &cfg) {
  const ConvergenceReport rep =
      run_convergence(*cfg.system, cfg.q_levels, cfg.T, cfg.samples, cfg.seed,
                      cfg.refine_levels, cfg.threads, cfg.smse_time);
  ResultBundle b;
  CsvTable t{"converge.csv",
             {"q", "delta1", "delta2", "M", "smse", "diverged", "wall_seconds"},
             {}};
  for (const auto &l : rep.levels) {
    t.rows.push_back({std::uint64_t(l.q), l.delta1, l.delta2,
                      std::uint64_t{l.M}, l.smse, std::uint64_t{l.diverged},
                      l.wall_seconds});
    b.summary += "q = " + std::to_string(l.q) + ": smse " +
                 format_double(l.smse) + ", " + std::to_string(l.diverged) +
                 " diverged, " + format_double(l.wall_seconds) + " s\n";
  }
  b.tables.push_back(std::move(t));
  b.manifest["summary"] = {
      {"fitted_slope", rep.fitted_slope ? json(*rep.fitted_slope) : json(nullptr)},
      {"n_samples", rep.n_samples},
      {"smse_time", cfg.smse_time == SmseTime::terminal ? "terminal" : "maximum"}};
  b.summary += "fitted log2 slope: " +
               (rep.fitted_slope ? format_double(*rep.fitted_slope)
                                 : std::string("n/a")) +
               "\n";
  return b;
}

/// Thinning of one relaxation time 2 / (beta delta2) when set to "auto".
inline std::size_t invariant_thinning(const ExperimentConfig &cfg,
                                      double delta2) {
  if (cfg.thinning) {
    return *cfg.thinning;
  }
  const double beta = cfg.system->coefficients().dissipativity_beta;
  return static_cast<std::size_t>(std::ceil(2.0 / (beta * delta2)));
}

inline ResultBundle run_invariant_check(const ExperimentConfig &cfg) {
  const SystemSpec &sys = *cfg.system;
  const NoisePlan plan = cfg.plan();
  const double beta = sys.coefficients().dissipativity_beta;

  // One exact reference sample shared by every level.
  std::vector<double> reference(cfg.n_draws);
  {
    NormalStream rng = plan.normals(StreamKind::reference, 0);
    for (auto &v : reference) {
      v = sys.coefficients().invariant_sampler(cfg.x, rng)[0];
    }
  }
  const std::size_t L = cfg.delta2_levels.size();
  std::vector<double> w2(L), means(L), vars(L);
  parallel_for(L, cfg.threads, [&](std::size_t i) {
    const double d2 = cfg.delta2_levels[i];
    const auto draws = empirical_invariant(
        sys, cfg.x, d2, cfg.burn_in.value_or(default_burn_in(beta, d2)),
        cfg.n_draws, invariant_thinning(cfg, d2), plan, i);
    std::vector<double> a(draws.size());
    for (std::size_t k = 0; k < draws.size(); ++k) {
      a[k] = draws[k][0];
    }
    means[i] = mean_of(a);
    vars[i] = variance_of(a);
    w2[i] = w2_1d(a, reference);
  });
  ResultBundle b;
  CsvTable t{"invariant_check.csv", {"delta2", "w2", "n_draws"}, {}};
  json levels = json::array();
  for (std::size_t i = 0; i < L; ++i) {
    t.rows.push_back({cfg.delta2_levels[i], w2[i], std::uint64_t{cfg.n_draws}});
    levels.push_back({{"delta2", cfg.delta2_levels[i]},
                      {"mean", means[i]},
                      {"variance", vars[i]},
                      {"thinning", invariant_thinning(cfg, cfg.delta2_levels[i])}});
    b.summary += "delta2 = " + format_double(cfg.delta2_levels[i]) +
                 ": mean " + format_double(means[i]) + ", variance " +
                 format_double(vars[i]) + ", w2 " + format_double(w2[i]) + "\n";
  }
  b.tables.push_back(std::move(t));
  b.manifest["summary"] = {{"levels", levels}};
  if (L >= 3) {
    b.manifest["summary"]["w2_loglog_slope"] =
        loglog_slope(cfg.delta2_levels, w2);
  }
  return b;
}

inline ResultBundle run_estimator_curve(const ExperimentConfig &cfg) {
  const auto pts =
      estimator_error_curve(*cfg.system, cfg.x, cfg.delta2, cfg.M_values,
                            cfg.samples, cfg.plan(), cfg.threads);
  ResultBundle b;
  CsvTable t{"estimator_curve.csv", {"M", "mse", "stderr"}, {}};
  json excluded = json::array();
  for (const auto &p : pts) {
    t.rows.push_back({std::uint64_t{p.M}, p.mse, p.standard_error});
    excluded.push_back(p.excluded);
    b.summary += "M = " + std::to_string(p.M) + ": mse " +
                 format_double(p.mse) + " +- " +
                 format_double(p.standard_error) + "\n";
  }
  b.tables.push_back(std::move(t));
  b.manifest["summary"] = {{"excluded", excluded}};
  return b;
}

/// Power-of-two substep count for one epsilon: the configured count, or the
/// smallest one with h / epsilon <= substep_ratio.
inline std::size_t averaging_substeps(const ExperimentConfig &cfg, double eps) {
  if (cfg.micro_substeps) {
    return *cfg.micro_substeps;
  }
  std::size_t s = 1;
  while (cfg.delta1 / static_cast<double>(s) > cfg.substep_ratio * eps) {
    s *= 2;
    if (s > (std::size_t{1} << 30)) {
      throw ConfigError("epsilon too small for the coupled reference solver");
    }
  }
  return s;
}

inline ResultBundle run_averaging_check(const ExperimentConfig &cfg) {
  const NoisePlan plan = cfg.plan();
  const SolverConfig sc(cfg.delta1, cfg.delta1, 1, cfg.T, cfg.refine_levels,
                        cfg.seed);
  ResultBundle b;
  CsvTable t{"averaging_check.csv", {"epsilon", "terminal_msq_gap", "stderr"}, {}};
  json levels = json::array();
  for (double eps : cfg.epsilon_levels) {
    const SystemSpec sys = cfg.system->with_epsilon(eps);
    const std::size_t substeps = averaging_substeps(cfg, eps);
    const unsigned r = substep_refine_levels(substeps);
    std::vector<double> gaps(cfg.samples, std::nan(""));
    parallel_for(cfg.samples, cfg.threads, [&](std::size_t j) {
      const NoisePlan p = plan.sample(j);
      const MacroTrajectory run = coupled_reference_run(sys, sc, substeps, p);
      if (run.diverged()) {
        return;
      }
      const ExactAveragedPath ex = exact_averaged_path(
          sc, sys.x0(), macro_increments(p, 1, sc.delta1(), sc.macro_steps(), r).fine);
      gaps[j] = (run.slow_states.back() - ex.values.back()).squaredNorm();
    });
    std::vector<double> ok;
    for (double g : gaps) {
      if (!std::isnan(g)) {
        ok.push_back(g);
      }
    }
    const double mean = mean_of(ok);
    const double se = standard_error_of(ok);
    t.rows.push_back({eps, mean, se});
    levels.push_back({{"epsilon", eps},
                      {"micro_substeps", substeps},
                      {"diverged", cfg.samples - ok.size()}});
    b.summary += "epsilon = " + format_double(eps) + " (" +
                 std::to_string(substeps) + " substeps): gap " +
                 format_double(mean) + " +- " + format_double(se) + "\n";
  }
  b.tables.push_back(std::move(t));
  b.manifest["summary"] = {{"levels", levels}};
  return b;
}

inline std::string version_string() { return MTEM_VERSION; }

} // namespace detail

/// Runs a validated config and returns its tables and manifest; nothing is
/// written.
inline ResultBundle run_experiment(const ExperimentConfig &cfg) {
  const auto start = std::chrono::steady_clock::now();
  ResultBundle b;
  switch (cfg.kind) {
  case ExperimentKind::diverge_demo:
    b = detail::run_diverge_demo(cfg);
    break;
  case ExperimentKind::trajectory:
    b = detail::run_trajectory(cfg);
    break;
  case ExperimentKind::converge:
    b = detail::run_converge(cfg);
    break;
  case ExperimentKind::invariant_check:
    b = detail::run_invariant_check(cfg);
    break;
  case ExperimentKind::estimator_curve:
    b = detail::run_estimator_curve(cfg);
    break;
  case ExperimentKind::averaging_check:
    b = detail::run_averaging_check(cfg);
    break;
  }
  b.manifest["experiment"] = std::string(experiment_name(cfg.kind));
  b.manifest["config"] = cfg.source;
  b.manifest["seed"] = cfg.seed;
  b.manifest["version"] = detail::version_string();
  b.manifest["threads"] = cfg.threads;
  b.manifest["wall_seconds"] =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - start)
          .count();
  json files = json::array();
  for (const auto &t : b.tables) {
    files.push_back(t.file_name);
  }
  b.manifest["tables"] = files;
  return b;
}

inline ResultBundle run_experiment(const json &doc) {
  ValidationResult v = validate_config(doc);
  if (!v.ok()) {
    throw ValidationFailure(std::move(v.errors));
  }
  return run_experiment(*v.config);
}

/// Writes every table and manifest.json into `dir`, creating it if needed.
inline void write_bundle(const ResultBundle &b, const std::filesystem::path &dir) {
  std::filesystem::create_directories(dir);
  auto write = [&dir](const std::string &name, const std::string &content) {
    std::ofstream out(dir / name, std::ios::binary | std::ios::trunc);
    if (!out) {
      throw Error("cannot write " + (dir / name).string());
    }
    out << content;
  };
  for (const auto &t : b.tables) {
    write(t.file_name, t.render());
  }
  write("manifest.json", b.manifest.dump(2) + "\n");
}

} // namespace mtem

#endif // MTEM_EXPERIMENT_HPP_
