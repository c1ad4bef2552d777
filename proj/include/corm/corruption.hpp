// SPDX-License-Identifier: Apache-2.0
#pragma once

#include "corm/masks.hpp"
#include "corm/rng.hpp"
#include "corm/tensor.hpp"

#include <cstdint>

namespace corm {

struct NoiseSpec {
  double sigma = 0.25;
  double apply_probability = 0.5;
  std::uint64_t seed = 0;

  void validate() const;
};

/// One i.i.d. standard normal per image element, drawn in row-major order.
Tensor draw_standard_normal(const Dims& dims, Rng& rng);

/// x + sigma * (z * region) with the region broadcast over channels. `image`
/// is H x W or C x H x W. Elements where the region is 0 are copied
/// untouched; nothing is clamped.
Tensor apply_noise(const Tensor& image, const SoftMask& region, double sigma, const Tensor& z);

/// apply_noise with fresh noise from `rng`.
Tensor corrupt(const Tensor& image, const SoftMask& region, double sigma, Rng& rng);

/// Bernoulli(p) draw deciding whether noise is applied.
bool draw_apply(double probability, Rng& rng);

struct MaybeCorrupted {
  Tensor image;
  bool applied = false;
};

MaybeCorrupted maybe_corrupt(const Tensor& image, const SoftMask& region, const NoiseSpec& spec, Rng& rng);

}  // namespace corm
