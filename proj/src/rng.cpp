#include "gmx/rng.hpp"

#include <cmath>

namespace gmx {

namespace {
constexpr uint64_t kGolden = 0x9e3779b97f4a7c15ull;
constexpr double kTwoPi = 6.283185307179586476925286766559;
}  // namespace

Rng::Rng(uint64_t seed, uint64_t stream) {
  // decorrelate (seed, stream) pairs before use
  key = mix(seed + kGolden * (stream + 1));
  counter = 0;
}

uint64_t Rng::mix(uint64_t z) {
  z += kGolden;
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
  return z ^ (z >> 31);
}

uint64_t Rng::hash_name(std::string_view name) {
  uint64_t h = 0xcbf29ce484222325ull;  // fnv1a-64
  for (unsigned char c : name) {
    h ^= c;
    h *= 0x100000001b3ull;
  }
  return h;
}

Rng Rng::from_name(uint64_t seed, std::string_view name) {
  return Rng(seed, hash_name(name));
}

Rng Rng::fork(std::string_view name) const {
  return Rng(key, hash_name(name));
}

uint64_t Rng::next_u64() { return mix(key + kGolden * (++counter)); }

double Rng::uniform() {
  // 53 mantissa bits -> [0, 1)
  return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
}

double Rng::uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

int64_t Rng::uniform_int(int64_t n) {
  return n <= 0 ? 0 : static_cast<int64_t>(next_u64() % static_cast<uint64_t>(n));
}

bool Rng::bernoulli(double p) { return uniform() < p; }

double Rng::normal() {
  double u1 = uniform();
  double u2 = uniform();
  if (u1 <= 0.0) u1 = 0x1.0p-53;
  return std::sqrt(-2.0 * std::log(u1)) * std::cos(kTwoPi * u2);
}

double Rng::trunc_normal(double stddev, double clip) {
  double z;
  do {
    z = normal();
  } while (z < -clip || z > clip);
  return z * stddev;
}

}  // namespace gmx
