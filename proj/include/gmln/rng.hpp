#pragma once

#include <cstdint>
#include <random>
#include <string_view>

#include "gmln/tensor.hpp"

namespace gmln {

/// 64-bit FNV-1a, used to derive independent deterministic streams from names.
constexpr std::uint64_t fnv1a(std::string_view text, std::uint64_t h = 1469598103934665603ull) {
  for (char c : text) h = (h ^ static_cast<unsigned char>(c)) * 1099511628211ull;
  return h;
}

/// Stream seed for (base seed, label); stable across platforms and runs.
inline std::uint64_t derive_seed(std::uint64_t seed, std::string_view label) {
  std::uint64_t h = fnv1a(label);
  h ^= seed + 0x9e3779b97f4a7c15ull + (h << 6) + (h >> 2);
  return h;
}

class Rng {
 public:
  explicit Rng(std::uint64_t seed) : engine_(seed) {}
  Rng(std::uint64_t seed, std::string_view label) : engine_(derive_seed(seed, label)) {}

  /// Uniform in [lo, hi).
  double uniform(double lo = 0.0, double hi = 1.0) {
    return lo + (hi - lo) * std::generate_canonical<double, 53>(engine_);
  }
  double normal(double mean = 0.0, double stddev = 1.0) { return normal_(engine_) * stddev + mean; }
  std::uint64_t next() { return engine_(); }
  std::int64_t below(std::int64_t n) { return static_cast<std::int64_t>(engine_() % static_cast<std::uint64_t>(n)); }
  std::mt19937_64& engine() { return engine_; }

 private:
  std::mt19937_64 engine_;
  std::normal_distribution<double> normal_{0.0, 1.0};
};

Tensor random_uniform(const Shape& shape, Rng& rng, double lo = -1.0, double hi = 1.0,
                      DType dtype = DType::f64);
Tensor random_normal(const Shape& shape, Rng& rng, double stddev = 1.0, DType dtype = DType::f64);

}  // namespace gmln
