#pragma once

#include <cstdint>
#include <string_view>

namespace gmx {

// Counter-based generator: output i depends only on (key, counter_start + i),
// so any consumer can be reproduced from a seed and a name without sharing
// mutable state. Derived streams are keyed by fnv1a of the stream name.
struct Rng {
  uint64_t key = 0;
  uint64_t counter = 0;

  Rng() = default;
  explicit Rng(uint64_t seed, uint64_t stream = 0);

  static uint64_t mix(uint64_t z);
  static uint64_t hash_name(std::string_view name);
  static Rng from_name(uint64_t seed, std::string_view name);

  Rng fork(std::string_view name) const;

  uint64_t next_u64();
  // [0, 1)
  double uniform();
  double uniform(double lo, double hi);
  // [0, n)
  int64_t uniform_int(int64_t n);
  bool bernoulli(double p);
  // Box-Muller, two uniforms per draw
  double normal();
  // rejection-sampled normal confined to [-clip, clip] sigmas, then scaled
  double trunc_normal(double stddev, double clip = 2.0);
};

}  // namespace gmx
