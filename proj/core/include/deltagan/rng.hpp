#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <sstream>
#include <stdexcept>
#include <string>

namespace deltagan {

/// Deterministic PRNG with hand-rolled distributions so that draws are
/// reproducible independent of the standard library's distribution
/// implementations. Single consumer; for parallel sampling derive one
/// instance per worker with derive_seed(base, ordinal).
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : engine_(seed) {}

  std::uint64_t next_u64() { return engine_(); }

  /// Uniform in [0, 1) with 53-bit resolution.
  double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  /// Standard normal via Box-Muller (uncached; one draw per call).
  double normal() {
    double u1 = uniform();
    while (u1 <= 0.0) u1 = uniform();
    const double u2 = uniform();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * M_PI * u2);
  }

  /// Uniform integer in [0, n). Rejection sampling, bias-free.
  std::uint64_t below(std::uint64_t n) {
    if (n == 0) throw std::invalid_argument("Rng::below: n must be positive");
    const std::uint64_t limit = UINT64_MAX - UINT64_MAX % n;
    std::uint64_t r = next_u64();
    while (r >= limit) r = next_u64();
    return r % n;
  }

  /// Seed-derivation rule for parallel samplers: splitmix64 of (base, ordinal).
  static std::uint64_t derive_seed(std::uint64_t base, std::uint64_t ordinal) {
    std::uint64_t z = base + 0x9E3779B97F4A7C15ULL * (ordinal + 1);
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
    return z ^ (z >> 31);
  }

  std::string state_string() const {
    std::ostringstream os;
    os << engine_;
    return os.str();
  }

  void set_state_string(const std::string& s) {
    std::istringstream is(s);
    is >> engine_;
    if (is.fail()) throw std::invalid_argument("Rng: bad serialized state");
  }

 private:
  std::mt19937_64 engine_;
};

}  // namespace deltagan
