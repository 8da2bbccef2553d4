#include "nca/rng.hpp"

#include <cmath>
#include <stdexcept>

namespace nca {

uint64_t mix64(uint64_t x) {
  x += 0x9E3779B97F4A7C15ull;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ull;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBull;
  return x ^ (x >> 31);
}

uint64_t hash_combine(uint64_t a, uint64_t b) { return mix64(a ^ mix64(b + 0x632BE59BD9B4E019ull)); }

Rng::Rng(uint64_t seed, uint64_t stream, uint64_t counter)
    : seed_(seed), stream_(stream), counter_(counter), key_(hash_combine(seed, stream)) {}

uint64_t Rng::next_u64() { return mix64(key_ ^ mix64(counter_++)); }

float Rng::uniform() { return static_cast<float>(next_u64() >> 40) * 0x1.0p-24f; }

double Rng::uniform_double() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

int Rng::uniform_int(int lo, int hi) {
  if (hi < lo) throw std::invalid_argument("uniform_int: empty range");
  const uint64_t range = static_cast<uint64_t>(static_cast<int64_t>(hi) - lo) + 1;
  const uint64_t r = ((next_u64() >> 32) * range) >> 32;
  return lo + static_cast<int>(r);
}

float Rng::normal() {
  double u1 = uniform_double();
  const double u2 = uniform_double();
  if (u1 < 1e-300) u1 = 1e-300;
  return static_cast<float>(std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * M_PI * u2));
}

}  // namespace nca
