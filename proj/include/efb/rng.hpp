#pragma once

#include <cmath>
#include <complex>
#include <cstdint>

namespace efb {

/// Deterministic random source. All randomness in the project flows through
/// this class so that results are reproducible from a single seed. Substreams
/// are derived by hashing (seed, a, b), which keeps per-(epoch, batch) and
/// per-realization draws independent of iteration order.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : seed_(seed), state_(seed) {
    // Warm up so that small seeds do not produce correlated first draws.
    next_u64();
    next_u64();
  }

  std::uint64_t seed() const { return seed_; }

  /// Derived independent stream keyed by (a, b).
  Rng substream(std::uint64_t a, std::uint64_t b = 0) const {
    std::uint64_t s = seed_;
    s = mix(s ^ (0x9e3779b97f4a7c15ULL + a));
    s = mix(s ^ (0xbf58476d1ce4e5b9ULL + b));
    return Rng(s);
  }

  std::uint64_t next_u64() {
    // splitmix64: tiny, fast, and identical on every platform.
    std::uint64_t z = (state_ += 0x9e3779b97f4a7c15ULL);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
  }

  /// Uniform in [0, 1).
  double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  /// Standard normal via Box-Muller.
  double normal() {
    if (have_spare_) {
      have_spare_ = false;
      return spare_;
    }
    double u1 = uniform();
    double u2 = uniform();
    // Map u1 from [0,1) to (0,1] to keep the log finite.
    double r = std::sqrt(-2.0 * std::log(1.0 - u1));
    double t = 2.0 * M_PI * u2;
    spare_ = r * std::sin(t);
    have_spare_ = true;
    return r * std::cos(t);
  }

  double normal(double mean, double stddev) { return mean + stddev * normal(); }

  /// Circularly-symmetric complex Gaussian with E|z|^2 = variance.
  std::complex<double> cnormal(double variance = 1.0) {
    double s = std::sqrt(variance / 2.0);
    double re = normal();
    double im = normal();
    return {s * re, s * im};
  }

 private:
  static std::uint64_t mix(std::uint64_t z) {
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
  }

  std::uint64_t seed_;
  std::uint64_t state_;
  double spare_ = 0.0;
  bool have_spare_ = false;
};

}  // namespace efb
