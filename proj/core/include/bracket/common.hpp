#pragma once

#include <cstdint>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace bracket {

// Invalid arguments, malformed configs, dimension/shape mismatches.
// The CLI maps this to exit code 2.
class ValueError : public std::invalid_argument {
 public:
  explicit ValueError(const std::string& msg) : std::invalid_argument(msg) {}
};

// Non-finite values where finite ones are required (diverged training,
// NaN gradients). The CLI maps this to exit code 3.
class NumericError : public std::runtime_error {
 public:
  explicit NumericError(const std::string& msg) : std::runtime_error(msg) {}
};

// Missing/corrupt/truncated files. The CLI maps this to exit code 2.
class IoError : public std::runtime_error {
 public:
  explicit IoError(const std::string& msg) : std::runtime_error(msg) {}
};

inline void require(bool cond, const std::string& msg) {
  if (!cond) throw ValueError(msg);
}

// Pairwise (cascade) summation. Fixed association order, so results are
// reproducible across runs and far more accurate than a running sum on
// long inputs.
template <class S>
S pairwise_sum(std::span<const S> v) {
  if (v.size() <= 16) {
    S acc = S(0);
    for (S x : v) acc += x;
    return acc;
  }
  size_t half = v.size() / 2;
  return pairwise_sum(v.subspan(0, half)) + pairwise_sum(v.subspan(half));
}

template <class S>
S pairwise_sum(const std::vector<S>& v) {
  return pairwise_sum(std::span<const S>(v));
}

// FNV-1a, used for content checksums in dataset manifests.
inline uint64_t fnv1a64(const void* data, size_t n, uint64_t h = 0xcbf29ce484222325ULL) {
  const auto* p = static_cast<const unsigned char*>(data);
  for (size_t i = 0; i < n; ++i) {
    h ^= p[i];
    h *= 0x100000001b3ULL;
  }
  return h;
}

inline uint64_t fnv1a64(const std::string& s) { return fnv1a64(s.data(), s.size()); }

}  // namespace bracket
