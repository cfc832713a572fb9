#ifndef MTEM_NOISE_HPP_
#define MTEM_NOISE_HPP_

// Deterministic Brownian increments.
//
// Every random number is a pure function of
//   (master_seed, sample_index, stream kind, stream index, position).
// The tuple is packed into a 64-bit counter and passed through a bijective
// mixer keyed by the master seed, so distinct tuples always receive distinct
// engine seeds. Each stream is a std::mt19937_64 (bit-exact across standard
// libraries) and standard normals are produced with the Marsaglia polar
// method on 53-bit uniforms. Golden outputs depend on this exact recipe.

#include <cmath>
#include <cstdint>
#include <limits>
#include <random>
#include <string>

#include "core.hpp"

namespace mtem {

/// SplitMix64 finalizer; a bijection on 64-bit words.
constexpr std::uint64_t mix64(std::uint64_t z) {
  z += 0x9e3779b97f4a7c15ULL;
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

enum class StreamKind : std::uint64_t {
  macro = 0,     ///< W1, always drawn at the finest requested resolution
  micro = 1,     ///< W2_n, one stream per macro step n
  fast = 2,      ///< fast noise of the coupled reference solver
  reference = 3, ///< exact-sampler draws used by diagnostics
};

inline constexpr std::uint64_t kMaxSampleIndex = (1ULL << 32) - 1;
inline constexpr std::uint64_t kMaxStreamIndex = (1ULL << 30) - 1;

class NormalStream {
public:
  explicit NormalStream(std::uint64_t seed, bool silent = false)
      : engine_(seed), silent_(silent) {}

  /// Uniform on [0, 1) with 53 random bits.
  double uniform() {
    return static_cast<double>(engine_() >> 11) * 0x1.0p-53;
  }

  double standard() {
    if (silent_) {
      return 0.0;
    }
    if (has_spare_) {
      has_spare_ = false;
      return spare_;
    }
    double u = 0.0;
    double v = 0.0;
    double s = 0.0;
    do {
      u = 2.0 * uniform() - 1.0;
      v = 2.0 * uniform() - 1.0;
      s = u * u + v * v;
    } while (s >= 1.0 || s == 0.0);
    const double factor = std::sqrt(-2.0 * std::log(s) / s);
    spare_ = v * factor;
    has_spare_ = true;
    return u * factor;
  }

  double normal(double mean, double stddev) { return mean + stddev * standard(); }

private:
  std::mt19937_64 engine_;
  bool silent_;
  bool has_spare_ = false;
  double spare_ = 0.0;
};

/// Seed layout for one Monte Carlo sample. A plan with `zero_noise` set yields
/// all-zero increments while keeping the same stream layout.
struct NoisePlan {
  std::uint64_t master_seed = 0;
  std::uint64_t sample_index = 0;
  bool zero_noise = false;

  NoisePlan sample(std::uint64_t index) const {
    NoisePlan p = *this;
    p.sample_index = index;
    return p;
  }

  std::uint64_t stream_seed(StreamKind kind, std::uint64_t index) const {
    if (sample_index > kMaxSampleIndex) {
      throw PlanningError("sample index " + std::to_string(sample_index) +
                          " exceeds the seed layout");
    }
    if (index > kMaxStreamIndex) {
      throw PlanningError("stream index " + std::to_string(index) +
                          " exceeds the seed layout");
    }
    const std::uint64_t counter = (sample_index << 32) |
                                  (static_cast<std::uint64_t>(kind) << 30) |
                                  index;
    return mix64(counter ^ mix64(master_seed));
  }

  NormalStream normals(StreamKind kind, std::uint64_t index) const {
    return NormalStream(stream_seed(kind, index), zero_noise);
  }
};

/// Draws Normal(0, dt I) increments of a fixed dimension one at a time.
class IncrementStream {
public:
  IncrementStream(NormalStream normals, int dim, double dt)
      : normals_(std::move(normals)), dim_(dim), dt_(dt), scale_(std::sqrt(dt)) {}

  IncrementStream(const NoisePlan &plan, StreamKind kind, std::uint64_t index,
                  int dim, double dt)
      : IncrementStream(plan.normals(kind, index), dim, dt) {}

  int dim() const { return dim_; }
  double dt() const { return dt_; }

  template <typename Out> void next(Out &&out) {
    for (int i = 0; i < dim_; ++i) {
      out[i] = scale_ * normals_.standard();
    }
  }

  Vector next() {
    Vector v(dim_);
    next(v);
    return v;
  }

private:
  NormalStream normals_;
  int dim_;
  double dt_;
  double scale_;
};

/// Brownian increments on a uniform grid; column i is W(t_{i+1}) - W(t_i).
struct IncrementGrid {
  double dt = 0.0;
  Matrix values;

  std::size_t count() const { return static_cast<std::size_t>(values.cols()); }
  int dim() const { return static_cast<int>(values.rows()); }
  auto increment(std::size_t i) const {
    return values.col(static_cast<Eigen::Index>(i));
  }

  /// Sums of consecutive blocks of `block` increments, accumulated left to
  /// right. The grid length must be a multiple of the block.
  IncrementGrid block_sums(std::size_t block) const {
    if (block == 0 || count() % block != 0) {
      throw ShapeError("grid of " + std::to_string(count()) +
                       " increments is not divisible into blocks of " +
                       std::to_string(block));
    }
    IncrementGrid out;
    out.dt = dt * static_cast<double>(block);
    const std::size_t n = count() / block;
    out.values.resize(values.rows(), static_cast<Eigen::Index>(n));
    for (std::size_t k = 0; k < n; ++k) {
      Vector acc = values.col(static_cast<Eigen::Index>(k * block));
      for (std::size_t j = 1; j < block; ++j) {
        acc += values.col(static_cast<Eigen::Index>(k * block + j));
      }
      out.values.col(static_cast<Eigen::Index>(k)) = acc;
    }
    return out;
  }

  static IncrementGrid draw(IncrementStream &stream, std::size_t count) {
    IncrementGrid g;
    g.dt = stream.dt();
    g.values.resize(stream.dim(), static_cast<Eigen::Index>(count));
    for (std::size_t i = 0; i < count; ++i) {
      stream.next(g.values.col(static_cast<Eigen::Index>(i)));
    }
    return g;
  }
};

struct MacroIncrements {
  IncrementGrid fine;   ///< step delta1 / 2^r
  IncrementGrid coarse; ///< step delta1, block sums of `fine`
};

/// W1 increments for n_steps macro steps, drawn on the refined grid and
/// aggregated, so the exact averaged solution and a scheme driven by `coarse`
/// see the same Brownian path.
inline MacroIncrements macro_increments(const NoisePlan &plan, int dim,
                                        double delta1, std::size_t n_steps,
                                        unsigned refine_levels) {
  if (n_steps == 0) {
    throw PlanningError("macro_increments needs at least one step");
  }
  if (dim < 1) {
    throw PlanningError("macro_increments needs a positive dimension");
  }
  if (refine_levels > 40) {
    throw PlanningError("refine_levels too large");
  }
  const std::size_t block = std::size_t{1} << refine_levels;
  constexpr std::size_t kMaxDraws = std::size_t{1} << 40;
  if (n_steps > kMaxDraws / block ||
      n_steps * block > kMaxDraws / static_cast<std::size_t>(dim)) {
    throw PlanningError("n_steps * 2^r = " + std::to_string(n_steps) + " * " +
                        std::to_string(block) + " exceeds the addressable range");
  }
  IncrementStream stream(plan, StreamKind::macro, 0, dim,
                         delta1 / static_cast<double>(block));
  MacroIncrements out;
  out.fine = IncrementGrid::draw(stream, n_steps * block);
  out.coarse = out.fine.block_sums(block);
  out.coarse.dt = delta1;
  return out;
}

/// M increments of W2_n for the micro chain run at macro step n.
inline IncrementGrid micro_increments(const NoisePlan &plan,
                                      std::uint64_t macro_index, int dim,
                                      double delta2, std::size_t M) {
  if (M == 0) {
    throw PlanningError("micro_increments needs M >= 1");
  }
  IncrementStream stream(plan, StreamKind::micro, macro_index, dim, delta2);
  return IncrementGrid::draw(stream, M);
}

} // namespace mtem

#endif // MTEM_NOISE_HPP_
