#pragma once

#include <cmath>
#include <cstdint>
#include <initializer_list>
#include <numbers>

namespace bracket {

namespace detail {
inline uint64_t mix64(uint64_t x) {
  x += 0x9E3779B97F4A7C15ULL;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ULL;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBULL;
  return x ^ (x >> 31);
}
}  // namespace detail

// Counter-based generator: output i is a pure function of (key, i), so
// streams can be split per scene / per step / per worker and parallel
// generation is bit-identical to serial generation.
class Rng {
 public:
  explicit Rng(uint64_t key) : key_(key) {}

  // Hash-chains the path elements onto a master seed. Same path, same stream.
  static Rng derive(uint64_t master, std::initializer_list<uint64_t> path) {
    uint64_t k = detail::mix64(master);
    for (uint64_t e : path) k = detail::mix64(k ^ detail::mix64(e));
    return Rng(k);
  }

  uint64_t next_u64() { return detail::mix64(key_ ^ detail::mix64(counter_++)); }

  // [0, 1)
  double uniform() { return double(next_u64() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // Box-Muller; consumes two uniforms, no cached spare.
  double normal() {
    double u1 = double((next_u64() >> 11) + 1) * 0x1.0p-53;  // (0, 1]
    double u2 = uniform();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
  }

  double normal(double mean, double stddev) { return mean + stddev * normal(); }

  // Uniform integer in [0, n)
  uint64_t below(uint64_t n) { return next_u64() % n; }

  bool coin() { return (next_u64() & 1) != 0; }

 private:
  uint64_t key_;
  uint64_t counter_ = 0;
};

}  // namespace bracket
