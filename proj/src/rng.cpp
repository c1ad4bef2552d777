// SPDX-License-Identifier: Apache-2.0
#include "corm/rng.hpp"

#include "corm/error.hpp"

#include <cmath>
#include <numbers>

namespace corm {

std::uint64_t Rng::below(std::uint64_t bound) {
  if (bound == 0) throw Error("rng", "empty range");
  // Rejection keeps the result exactly uniform.
  const std::uint64_t limit = UINT64_MAX - UINT64_MAX % bound;
  std::uint64_t x;
  do x = next_u64();
  while (x >= limit);
  return x % bound;
}

double Rng::normal() {
  if (spare_) {
    const double z = *spare_;
    spare_.reset();
    return z;
  }
  const double u1 = 1.0 - uniform();  // (0, 1]
  const double u2 = uniform();
  const double radius = std::sqrt(-2.0 * std::log(u1));
  const double angle = 2.0 * std::numbers::pi * u2;
  spare_ = radius * std::sin(angle);
  return radius * std::cos(angle);
}

Rng Rng::split(std::uint64_t stream) const {
  Rng mixer(state_ ^ (stream * 0xd1b54a32d192ed03ULL));
  return Rng(mixer.next_u64());
}

}  // namespace corm
