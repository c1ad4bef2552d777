// SPDX-License-Identifier: Apache-2.0
#include "corm/corruption.hpp"

#include "corm/error.hpp"

namespace corm {

void NoiseSpec::validate() const {
  if (!(sigma >= 0.0)) throw Error("noise_spec", "sigma must be >= 0");
  if (!(apply_probability >= 0.0 && apply_probability <= 1.0))
    throw Error("noise_spec", "apply probability must lie in [0, 1]");
}

Tensor draw_standard_normal(const Dims& dims, Rng& rng) {
  Tensor z(dims);
  for (auto& v : z.data()) v = rng.normal();
  return z;
}

Tensor apply_noise(const Tensor& image, const SoftMask& region, double sigma, const Tensor& z) {
  if (!(sigma >= 0.0)) throw Error("corrupt", "sigma must be >= 0");
  if (image.rank() != 2 && image.rank() != 3)
    throw Error("corrupt", "image must be HxW or CxHxW, got " + dims_to_string(image.dims()));
  const std::size_t h = image.dim(image.rank() - 2), w = image.dim(image.rank() - 1);
  if (region.height() != h || region.width() != w)
    throw Error("corrupt", "region " + std::to_string(region.height()) + "x" + std::to_string(region.width()) +
                               " does not match image " + dims_to_string(image.dims()));
  if (z.dims() != image.dims()) throw Error("corrupt", "noise dims differ from image dims");
  Tensor out = image;
  const std::size_t pixels = h * w;
  const double* mask = region.values().data();
  for (std::size_t i = 0; i < image.size(); ++i) {
    const double m = mask[i % pixels];
    if (m != 0.0) out[i] = image[i] + sigma * (z[i] * m);
  }
  return out;
}

Tensor corrupt(const Tensor& image, const SoftMask& region, double sigma, Rng& rng) {
  return apply_noise(image, region, sigma, draw_standard_normal(image.dims(), rng));
}

bool draw_apply(double probability, Rng& rng) { return rng.uniform() < probability; }

MaybeCorrupted maybe_corrupt(const Tensor& image, const SoftMask& region, const NoiseSpec& spec, Rng& rng) {
  spec.validate();
  if (!draw_apply(spec.apply_probability, rng)) return {image, false};
  return {corrupt(image, region, spec.sigma, rng), true};
}

}  // namespace corm
