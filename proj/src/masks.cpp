// SPDX-License-Identifier: Apache-2.0
#include "corm/masks.hpp"

#include "corm/error.hpp"

#include <algorithm>
#include <cmath>

namespace corm {

using Eigen::Index;

SoftMask::SoftMask(std::size_t height, std::size_t width, double fill)
    : SoftMask(MaskArray::Constant(static_cast<Index>(height), static_cast<Index>(width), fill)) {}

SoftMask::SoftMask(MaskArray values) : values_(std::move(values)) {
  if (!((values_ >= 0.0).all() && (values_ <= 1.0).all()))
    throw Error("soft_mask", "values must lie in [0, 1]");
}

SoftMask SoftMask::from_tensor(const Tensor& tensor) {
  if (tensor.rank() != 2) throw Error("soft_mask", "expected a rank-2 tensor, got " + dims_to_string(tensor.dims()));
  MaskArray values = tensor.matrix(tensor.dim(0), tensor.dim(1)).array();
  return SoftMask(std::move(values));
}

Tensor SoftMask::to_tensor() const {
  Tensor out({height(), width()});
  out.matrix(height(), width()) = values_.matrix();
  return out;
}

MaskArray resize_bilinear(const MaskArray& source, std::size_t height, std::size_t width) {
  const Index in_h = source.rows(), in_w = source.cols();
  if (in_h == static_cast<Index>(height) && in_w == static_cast<Index>(width)) return source;
  const double scale_y = static_cast<double>(in_h) / static_cast<double>(height);
  const double scale_x = static_cast<double>(in_w) / static_cast<double>(width);
  auto sample = [](double centre, Index extent, Index& lo, Index& hi, double& frac) {
    const double pos = std::clamp(centre, 0.0, static_cast<double>(extent - 1));
    lo = static_cast<Index>(std::floor(pos));
    hi = std::min(lo + 1, extent - 1);
    frac = pos - static_cast<double>(lo);
  };
  MaskArray out(static_cast<Index>(height), static_cast<Index>(width));
  for (Index r = 0; r < out.rows(); ++r) {
    Index y0, y1;
    double fy;
    sample((static_cast<double>(r) + 0.5) * scale_y - 0.5, in_h, y0, y1, fy);
    for (Index c = 0; c < out.cols(); ++c) {
      Index x0, x1;
      double fx;
      sample((static_cast<double>(c) + 0.5) * scale_x - 0.5, in_w, x0, x1, fx);
      const double top = source(y0, x0) * (1.0 - fx) + source(y0, x1) * fx;
      const double bottom = source(y1, x0) * (1.0 - fx) + source(y1, x1) * fx;
      out(r, c) = top * (1.0 - fy) + bottom * fy;
    }
  }
  return out;
}

SoftMask nam(const Tensor& feature_map, std::size_t height, std::size_t width) {
  if (feature_map.rank() != 2) throw Error("nam", "feature map must be 2-D, got " + dims_to_string(feature_map.dims()));
  if (!feature_map.all_finite()) throw Error("nam", "non-finite feature map");
  const MaskArray raw = feature_map.matrix(feature_map.dim(0), feature_map.dim(1)).array();
  const double lo = raw.minCoeff(), hi = raw.maxCoeff();
  if (!(hi > lo)) return SoftMask(height, width, 0.0);
  const MaskArray normalised = (raw - lo) / (hi - lo);
  return SoftMask(resize_bilinear(normalised, height, width).cwiseMax(0.0).cwiseMin(1.0));
}

SoftMask consolidate(std::span<const SoftMask> masks) {
  if (masks.empty()) throw Error("consolidate", "no masks given");
  MaskArray out = masks.front().values();
  for (const auto& m : masks.subspan(1)) {
    if (m.height() != masks.front().height() || m.width() != masks.front().width())
      throw Error("consolidate", "mask dims differ");
    out = out.max(m.values());
  }
  return SoftMask(std::move(out));
}

SoftMask dilate(const SoftMask& mask, int k, int iterations) {
  if (k < 0 || iterations < 0) throw Error("dilate", "k and iterations must be non-negative");
  MaskArray current = mask.values();
  if (k == 0 || current.size() == 0) return mask;
  const Index rows = current.rows(), cols = current.cols();
  MaskArray across(rows, cols);
  for (int it = 0; it < iterations; ++it) {
    // A square window max is a row-window max followed by a column-window max.
    for (Index r = 0; r < rows; ++r)
      for (Index c = 0; c < cols; ++c)
        across(r, c) = current.row(r).segment(std::max<Index>(0, c - k),
                                              std::min<Index>(cols - 1, c + k) - std::max<Index>(0, c - k) + 1)
                           .maxCoeff();
    for (Index r = 0; r < rows; ++r) {
      const Index lo = std::max<Index>(0, r - k), hi = std::min<Index>(rows - 1, r + k);
      for (Index c = 0; c < cols; ++c) current(r, c) = across.col(c).segment(lo, hi - lo + 1).maxCoeff();
    }
  }
  return SoftMask(std::move(current));
}

SoftMask complement(const SoftMask& mask) { return SoftMask(1.0 - mask.values()); }

}  // namespace corm
