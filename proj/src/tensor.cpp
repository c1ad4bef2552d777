// SPDX-License-Identifier: Apache-2.0
#include "corm/tensor.hpp"

#include "corm/error.hpp"

#include <cmath>
#include <cstring>
#include <fstream>
#include <iterator>
#include <limits>
#include <numeric>
#include <sstream>
#include <unordered_map>

namespace corm {

std::size_t element_count(const Dims& dims) {
  return std::accumulate(dims.begin(), dims.end(), std::size_t{1}, std::multiplies<>());
}

std::string dims_to_string(const Dims& dims) {
  std::ostringstream out;
  out << '[';
  for (std::size_t i = 0; i < dims.size(); ++i) {
    if (i) out << ',';
    out << dims[i];
  }
  out << ']';
  return out.str();
}

Tensor::Tensor(Dims dims) : dims_(std::move(dims)), data_(element_count(dims_), 0.0) {
  for (auto d : dims_)
    if (d == 0) throw Error("tensor", "zero extent in dims " + dims_to_string(dims_));
}

Tensor::Tensor(Dims dims, std::vector<double> data) : dims_(std::move(dims)), data_(data.begin(), data.end()) {
  for (auto d : dims_)
    if (d == 0) throw Error("tensor", "zero extent in dims " + dims_to_string(dims_));
  if (element_count(dims_) != data_.size())
    throw Error("tensor", "dims " + dims_to_string(dims_) + " do not match " +
                              std::to_string(data_.size()) + " elements");
}

Tensor Tensor::uninitialized(Dims dims) {
  // The pool hands back recycled memory; skipping the fill is the point.
  Tensor t;
  t.dims_ = std::move(dims);
  for (auto d : t.dims_)
    if (d == 0) throw Error("tensor", "zero extent in dims " + dims_to_string(t.dims_));
  t.data_ = TensorStorage();
  t.data_.reserve(element_count(t.dims_));
  t.data_.resize(element_count(t.dims_));
  return t;
}

Tensor Tensor::filled(Dims dims, double value) {
  Tensor t(std::move(dims));
  std::fill(t.data_.begin(), t.data_.end(), value);
  return t;
}

double Tensor::item() const {
  if (data_.size() != 1) throw Error("tensor", "item() on tensor with dims " + dims_to_string(dims_));
  return data_[0];
}

ConstRowMatrixMap Tensor::matrix(std::size_t rows, std::size_t cols) const {
  if (rows * cols != data_.size()) throw Error("tensor", "matrix view does not cover the data");
  return {data_.data(), static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols)};
}

RowMatrixMap Tensor::matrix(std::size_t rows, std::size_t cols) {
  if (rows * cols != data_.size()) throw Error("tensor", "matrix view does not cover the data");
  return {data_.data(), static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols)};
}

bool Tensor::all_finite() const {
  // Counting form vectorises; NaN fails the comparison, inf exceeds max.
  std::size_t bad = 0;
  for (double v : data_) bad += !(std::abs(v) <= std::numeric_limits<double>::max());
  return bad == 0;
}

Tensor Tensor::reshaped(Dims dims) const {
  if (element_count(dims) != data_.size())
    throw Error("reshape", "cannot reshape " + dims_to_string(dims_) + " to " + dims_to_string(dims));
  Tensor out = *this;
  out.dims_ = std::move(dims);
  return out;
}

bool bitwise_equal(const Tensor& a, const Tensor& b) {
  return a.dims() == b.dims() &&
         std::memcmp(a.data().data(), b.data().data(), a.size() * sizeof(double)) == 0;
}

namespace detail {

namespace {

constexpr std::size_t kPoolLimitBytes = std::size_t{1} << 30;
constexpr std::size_t kPooledMinBytes = 4096;

struct FreeLists {
  std::unordered_map<std::size_t, std::vector<void*>> by_size;
  std::size_t cached_bytes = 0;
  ~FreeLists() {
    for (auto& [bytes, list] : by_size)
      for (void* p : list) ::operator delete(p);
  }
};

FreeLists& free_lists() {
  thread_local FreeLists lists;
  return lists;
}

}  // namespace

void* pool_allocate(std::size_t bytes) {
  if (bytes >= kPooledMinBytes) {
    auto& lists = free_lists();
    if (auto it = lists.by_size.find(bytes); it != lists.by_size.end() && !it->second.empty()) {
      void* p = it->second.back();
      it->second.pop_back();
      lists.cached_bytes -= bytes;
      return p;
    }
  }
  return ::operator new(bytes);
}

void pool_deallocate(void* ptr, std::size_t bytes) noexcept {
  if (bytes >= kPooledMinBytes) {
    auto& lists = free_lists();
    if (lists.cached_bytes + bytes <= kPoolLimitBytes) {
      try {
        lists.by_size[bytes].push_back(ptr);
        lists.cached_bytes += bytes;
        return;
      } catch (...) {
      }
    }
  }
  ::operator delete(ptr);
}

}  // namespace detail

namespace {

void put_u32(std::vector<std::uint8_t>& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

std::uint32_t get_u32(std::span<const std::uint8_t> bytes, std::size_t at) {
  std::uint32_t v = 0;
  for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(bytes[at + i]) << (8 * i);
  return v;
}

}  // namespace

std::vector<std::uint8_t> encode_crmt(const Tensor& tensor) {
  if (tensor.rank() > 255) throw Error("encode_crmt", "rank above 255");
  std::vector<std::uint8_t> out{'C', 'R', 'M', 'T'};
  out.reserve(10 + 4 * tensor.rank() + 8 * tensor.size());
  put_u32(out, kCrmtVersion);
  out.push_back(0);
  out.push_back(static_cast<std::uint8_t>(tensor.rank()));
  for (auto d : tensor.dims()) {
    if (d > 0xffffffffu) throw Error("encode_crmt", "extent does not fit in u32");
    put_u32(out, static_cast<std::uint32_t>(d));
  }
  for (double v : tensor.data()) {
    auto bits = std::bit_cast<std::uint64_t>(v);
    for (int i = 0; i < 8; ++i) out.push_back(static_cast<std::uint8_t>(bits >> (8 * i)));
  }
  return out;
}

Tensor decode_crmt(std::span<const std::uint8_t> bytes, const std::string& source) {
  const std::string op = "read_crmt(" + source + ")";
  if (bytes.size() < 10) throw Error(op, "truncated header");
  if (std::memcmp(bytes.data(), "CRMT", 4) != 0) throw Error(op, "bad magic");
  if (auto version = get_u32(bytes, 4); version != kCrmtVersion)
    throw Error(op, "unsupported version " + std::to_string(version));
  if (bytes[8] != 0) throw Error(op, "unsupported dtype " + std::to_string(bytes[8]));
  const std::size_t rank = bytes[9];
  if (bytes.size() < 10 + 4 * rank) throw Error(op, "truncated dims");
  Dims dims(rank);
  for (std::size_t i = 0; i < rank; ++i) {
    dims[i] = get_u32(bytes, 10 + 4 * i);
    if (dims[i] == 0) throw Error(op, "zero extent");
  }
  const std::size_t offset = 10 + 4 * rank;
  const std::size_t count = element_count(dims);
  if (bytes.size() != offset + 8 * count)
    throw Error(op, bytes.size() < offset + 8 * count ? "truncated payload" : "trailing bytes after payload");
  std::vector<double> data(count);
  for (std::size_t k = 0; k < count; ++k) {
    std::uint64_t bits = 0;
    for (int i = 0; i < 8; ++i) bits |= static_cast<std::uint64_t>(bytes[offset + 8 * k + i]) << (8 * i);
    data[k] = std::bit_cast<double>(bits);
    if (!std::isfinite(data[k])) throw Error(op, "non-finite element");
  }
  return Tensor(std::move(dims), std::move(data));
}

void write_crmt(const std::filesystem::path& path, const Tensor& tensor) {
  auto bytes = encode_crmt(tensor);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error("write_crmt(" + path.string() + ")", "cannot open for writing");
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw Error("write_crmt(" + path.string() + ")", "write failed");
}

Tensor read_crmt(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("read_crmt(" + path.string() + ")", "cannot open file");
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return decode_crmt(bytes, path.string());
}

}  // namespace corm
