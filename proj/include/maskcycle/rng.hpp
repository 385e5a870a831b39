// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <random>

namespace maskcycle {

/// Seeded random source threaded explicitly through every stochastic operation.
/// Same seed and same call sequence give the same draws.
class Rng {
 public:
  explicit Rng(std::uint64_t seed = 0) : seed_(seed), engine_(seed) {}

  std::uint64_t seed() const { return seed_; }
  std::uint64_t draws() const { return draws_; }

  /// Integer uniform on the closed range [lo, hi].
  std::int64_t uniform_int(std::int64_t lo, std::int64_t hi) {
    ++draws_;
    return std::uniform_int_distribution<std::int64_t>(lo, hi)(engine_);
  }

  /// Real uniform on [0, 1).
  double uniform() {
    ++draws_;
    return std::uniform_real_distribution<double>(0.0, 1.0)(engine_);
  }

  bool coin(double p = 0.5) { return uniform() < p; }

  /// Fresh 64-bit value, used to derive child seeds.
  std::uint64_t next_u64() {
    ++draws_;
    return engine_();
  }

  std::mt19937_64& engine() { return engine_; }

 private:
  std::uint64_t seed_;
  std::uint64_t draws_ = 0;
  std::mt19937_64 engine_;
};

}  // namespace maskcycle
