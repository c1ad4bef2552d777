// SPDX-License-Identifier: Apache-2.0
#pragma once

#include "corm/tensor.hpp"

#include <Eigen/Dense>

#include <cstddef>
#include <span>

namespace corm {

using MaskArray = Eigen::Array<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

/// Spatial mask with every value in [0, 1].
class SoftMask {
 public:
  SoftMask() = default;
  SoftMask(std::size_t height, std::size_t width, double fill = 0.0);
  /// Throws if any value lies outside [0, 1].
  explicit SoftMask(MaskArray values);

  static SoftMask from_tensor(const Tensor& tensor);
  Tensor to_tensor() const;

  std::size_t height() const noexcept { return static_cast<std::size_t>(values_.rows()); }
  std::size_t width() const noexcept { return static_cast<std::size_t>(values_.cols()); }
  const MaskArray& values() const noexcept { return values_; }
  double operator()(std::size_t row, std::size_t col) const {
    return values_(static_cast<Eigen::Index>(row), static_cast<Eigen::Index>(col));
  }

  friend bool operator==(const SoftMask& a, const SoftMask& b) {
    return a.values_.rows() == b.values_.rows() && a.values_.cols() == b.values_.cols() &&
           (a.values_ == b.values_).all();
  }

 private:
  MaskArray values_;
};

/// Bilinear resize, half-pixel centres (align_corners = false), clamped
/// at the borders.
MaskArray resize_bilinear(const MaskArray& source, std::size_t height, std::size_t width);

/// Neural activation map: min-max normalise a 2-D feature map, then resize
/// it to the image grid. A constant map yields all zeros.
SoftMask nam(const Tensor& feature_map, std::size_t height, std::size_t width);

/// Elementwise maximum.
SoftMask consolidate(std::span<const SoftMask> masks);

/// `iterations` rounds of (2k+1) x (2k+1) max filtering. Window positions
/// outside the mask are ignored.
SoftMask dilate(const SoftMask& mask, int k, int iterations);

SoftMask complement(const SoftMask& mask);

}  // namespace corm
