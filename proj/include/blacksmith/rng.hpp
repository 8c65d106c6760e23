#pragma once

#include <cstdint>
#include <string_view>

namespace blacksmith {

// Deterministic keyed random stream (xoshiro256++ seeded via splitmix64).
// Every consumer derives its own substream from (seed, purpose, indices),
// so results never depend on scheduling order or worker count, and adding
// draws to one substream cannot shift any other.
class RngStream {
 public:
  static RngStream keyed(std::uint64_t seed, std::string_view purpose,
                         std::uint64_t a = 0, std::uint64_t b = 0,
                         std::uint64_t c = 0);

  std::uint64_t next_u64();

  // Uniform in [0, 1) with 53 random bits.
  double next_double();

  // Uniform in [lo, hi).
  double uniform(double lo, double hi);

  // Standard normal via Box-Muller (two u64 draws per sample).
  double normal();

  // Uniform integer in [0, n), n > 0. Debiased (Lemire).
  std::uint64_t bounded(std::uint64_t n);

 private:
  std::uint64_t s_[4] = {};
};

}  // namespace blacksmith
