#pragma once

#include <cstdint>

namespace nca {

// SplitMix64 finalizer; a bijective 64-bit mixer.
uint64_t mix64(uint64_t x);
uint64_t hash_combine(uint64_t a, uint64_t b);

// Counter-based generator. The full state is (seed, stream, counter), so a
// checkpoint can capture and restore any stream position exactly.
class Rng {
 public:
  enum Stream : uint64_t { pool = 1, damage = 2, projections = 3, init = 4, rollout = 5, eval = 6, service = 7 };

  Rng(uint64_t seed, uint64_t stream, uint64_t counter = 0);

  uint64_t next_u64();
  // Uniform in [0,1) with 24 bits of precision.
  float uniform();
  double uniform_double();
  float uniform(float lo, float hi) { return lo + (hi - lo) * uniform(); }
  // Uniform integer in [lo, hi] (inclusive).
  int uniform_int(int lo, int hi);
  float normal();

  // An independent generator keyed by (seed, stream, id).
  Rng substream(uint64_t id) const { return Rng(seed_, hash_combine(stream_, id)); }

  uint64_t seed() const { return seed_; }
  uint64_t stream() const { return stream_; }
  uint64_t counter() const { return counter_; }

 private:
  uint64_t seed_;
  uint64_t stream_;
  uint64_t counter_;
  uint64_t key_;
};

}  // namespace nca
