#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace htcl {

/// Deterministic PRNG built on splitmix64. The draw sequence depends only on
/// the seed, never on platform or standard library, so generated datasets and
/// training runs are reproducible bit-for-bit.
class Rng {
public:
  explicit Rng(std::uint64_t seed);

  std::uint64_t seed() const { return seed_; }
  std::uint64_t next_u64();

  /// Uniform in [0, 1).
  double uniform();
  double uniform(double lo, double hi);
  /// Box-Muller normal draw.
  double normal(double mean = 0.0, double stddev = 1.0);
  /// Uniform integer in the inclusive range [lo, hi].
  int uniform_int(int lo, int hi);
  bool bernoulli(double p);

  ///Derive an independent substream. Forks depend only on (seed, label),
  /// not on how much the parent has already drawn.
  Rng fork(const std::string& label) const;
  Rng fork(std::uint64_t salt) const;

  template <class T>
  void shuffle(std::vector<T>& v) {
    for (std::size_t i = v.size(); i > 1; --i) {
      const std::size_t j = static_cast<std::size_t>(uniform_int(0, static_cast<int>(i) - 1));
      std::swap(v[i - 1], v[j]);
    }
  }

private:
  std::uint64_t seed_ = 0;
  std::uint64_t state_ = 0;
  bool has_cached_normal_ = false;
  double cached_normal_ = 0.0;
};

std::uint64_t splitmix64(std::uint64_t& state);
std::uint64_t fnv1a64(const std::string& s);

}  // namespace htcl
