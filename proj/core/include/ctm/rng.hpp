#pragma once

#include <cstdint>
#include <random>
#include <string_view>

namespace ctm {

/// Seeded 64-bit generator. `split` derives an independent stream per
/// component so adding draws in one place never shifts another.
///
/// Distributions are implemented here instead of using <random>'s, whose
/// output is implementation-defined.
class Rng {
 public:
  explicit Rng(std::uint64_t seed = 0) : seed_(seed), engine_(mix(seed)) {}

  std::uint64_t seed() const { return seed_; }

  Rng split(std::string_view stream) const;
  Rng split(std::uint64_t stream) const;

  std::uint64_t next_u64() { return engine_(); }
  /// Uniform in [0, 1) with 53 random bits.
  double uniform();
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }
  /// Uniform integer in [0, n).
  std::uint64_t below(std::uint64_t n);
  int uniform_int(int lo, int hi_inclusive);
  double normal();
  double normal(double mean, double stddev) { return mean + stddev * normal(); }

  static std::uint64_t mix(std::uint64_t x);

 private:
  std::uint64_t seed_;
  std::mt19937_64 engine_;
  bool has_spare_ = false;
  double spare_ = 0.0;
};

/// FNV-1a 64-bit hash of a string; stable across platforms.
std::uint64_t stable_hash(std::string_view s);

}  // namespace ctm
