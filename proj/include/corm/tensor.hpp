// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <Eigen/Dense>

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <utility>
#include <vector>

namespace corm {

using Dims = std::vector<std::size_t>;
using RowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using RowMatrixMap = Eigen::Map<RowMatrix>;
using ConstRowMatrixMap = Eigen::Map<const RowMatrix>;

std::size_t element_count(const Dims& dims);

namespace detail {

// Tensor storage is recycled through per-thread free lists keyed by size:
// training builds graphs with the same shapes every step, and fresh pages
// are far more expensive than reused ones.
void* pool_allocate(std::size_t bytes);
void pool_deallocate(void* ptr, std::size_t bytes) noexcept;

template <class T>
struct PoolAllocator {
  using value_type = T;
  PoolAllocator() = default;
  template <class U>
  PoolAllocator(const PoolAllocator<U>&) noexcept {}
  T* allocate(std::size_t n) { return static_cast<T*>(pool_allocate(n * sizeof(T))); }
  void deallocate(T* p, std::size_t n) noexcept { pool_deallocate(p, n * sizeof(T)); }
  // Default-initialise so Tensor::uninitialized skips the zero fill.
  template <class U>
  void construct(U* p) noexcept {
    ::new (static_cast<void*>(p)) U;
  }
  template <class U, class... Args>
  void construct(U* p, Args&&... args) {
    ::new (static_cast<void*>(p)) U(std::forward<Args>(args)...);
  }
  template <class U>
  bool operator==(const PoolAllocator<U>&) const noexcept { return true; }
};

}  // namespace detail

using TensorStorage = std::vector<double, detail::PoolAllocator<double>>;
std::string dims_to_string(const Dims& dims);

/// Dense row-major array of doubles. Rank 0 is a scalar holding one element.
class Tensor {
 public:
  Tensor() : data_(1, 0.0) {}
  explicit Tensor(Dims dims);
  Tensor(Dims dims, std::vector<double> data);

  static Tensor scalar(double value) { return Tensor({}, {value}); }
  static Tensor filled(Dims dims, double value);
  /// Contents unspecified; for results that overwrite every element.
  static Tensor uninitialized(Dims dims);

  const Dims& dims() const noexcept { return dims_; }
  std::size_t rank() const noexcept { return dims_.size(); }
  std::size_t size() const noexcept { return data_.size(); }
  std::size_t dim(std::size_t axis) const { return dims_.at(axis); }

  std::span<const double> data() const noexcept { return data_; }
  std::span<double> data() noexcept { return data_; }
  std::vector<double> values() const { return {data_.begin(), data_.end()}; }

  double operator[](std::size_t i) const { return data_[i]; }
  double& operator[](std::size_t i) { return data_[i]; }

  /// Value of a single-element tensor.
  double item() const;

  Eigen::Map<const Eigen::ArrayXd> array() const {
    return {data_.data(), static_cast<Eigen::Index>(data_.size())};
  }
  Eigen::Map<Eigen::ArrayXd> array() {
    return {data_.data(), static_cast<Eigen::Index>(data_.size())};
  }
  /// View as a rows x cols row-major matrix; rows * cols must equal size().
  ConstRowMatrixMap matrix(std::size_t rows, std::size_t cols) const;
  RowMatrixMap matrix(std::size_t rows, std::size_t cols);

  bool all_finite() const;
  Tensor reshaped(Dims dims) const;

 private:
  Dims dims_;
  TensorStorage data_;
};

/// Same dims and identical bit patterns.
bool bitwise_equal(const Tensor& a, const Tensor& b);

// CRMT on-disk format: "CRMT", u32le version (1), u8 dtype (0 = f64),
// u8 rank, rank x u32le dims, row-major little-endian f64 payload.
inline constexpr std::uint32_t kCrmtVersion = 1;

std::vector<std::uint8_t> encode_crmt(const Tensor& tensor);
/// `source` names the blob in error messages.
Tensor decode_crmt(std::span<const std::uint8_t> bytes, const std::string& source = "<memory>");
void write_crmt(const std::filesystem::path& path, const Tensor& tensor);
Tensor read_crmt(const std::filesystem::path& path);

}  // namespace corm
