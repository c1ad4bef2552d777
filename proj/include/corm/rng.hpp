// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <optional>

namespace corm {

/// SplitMix64: a Weyl counter passed through a 64-bit finaliser. Normals come
/// from the Box-Muller transform; both outputs of a pair are used.
class Rng {
 public:
  explicit Rng(std::uint64_t seed = 0) : state_(seed) {}

  std::uint64_t next_u64() {
    std::uint64_t z = (state_ += 0x9e3779b97f4a7c15ULL);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
  }

  /// Uniform on [0, 1) with 53 bits of resolution.
  double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  /// Uniform integer in [0, bound).
  std::uint64_t below(std::uint64_t bound);

  double normal();

  /// Independent stream derived from this generator's seed and a stream id;
  /// does not advance this generator.
  Rng split(std::uint64_t stream) const;

 private:
  std::uint64_t state_;
  std::optional<double> spare_;
};

}  // namespace corm
