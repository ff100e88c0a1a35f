// SPDX-License-Identifier: Apache-2.0
//
// Seeded randomness with platform-stable output. The engine is
// std::mt19937_64, whose sequence the C++ standard fixes exactly; the
// conversions below are written out here because the standard library
// distributions are implementation-defined.
//
//   uniform()        : (x >> 11) * 2^-53, in [0, 1)
//   uniform_int(a,b) : rejection sampling on the raw 64-bit output
//   normal()         : Box-Muller, one variate per call (second discarded)
#pragma once

#include <cstdint>
#include <initializer_list>
#include <random>

namespace sparsedet {

class Rng {
 public:
  explicit Rng(std::uint64_t seed) : engine_(seed) {}
  // Mixes several integers into one engine state via std::seed_seq, whose
  // algorithm is also fixed by the standard.
  Rng(std::initializer_list<std::uint64_t> words);

  std::uint64_t next_u64() { return engine_(); }
  double uniform();
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }
  // Inclusive on both ends; lo <= hi.
  std::int64_t uniform_int(std::int64_t lo, std::int64_t hi);
  double normal();

 private:
  std::mt19937_64 engine_;
};

}  // namespace sparsedet
