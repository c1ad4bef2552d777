// SPDX-License-Identifier: Apache-2.0
#include "corm/diffgraph.hpp"

#include "corm/error.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <string>

namespace corm {

namespace {

constexpr std::array<std::string_view, 28> kOpNames = {
    "leaf",           "add",
    "sub",            "mul",
    "scale",          "scale_by",
    "matmul",         "transpose",
    "conv2d",         "conv2d_input_grad",
    "conv2d_kernel_grad", "relu",
    "relu_gate",      "softplus",
    "sigmoid",        "global_avg_pool",
    "spatial_broadcast", "dense",
    "bias_add",       "axis1_sum",
    "axis1_broadcast", "sum",
    "fill",           "squared_norm",
    "softmax",        "row_sum_broadcast",
    "softmax_cross_entropy", "reshape",
};

// Kinds whose outputs are copies, selections or bounded maps of finite
// inputs cannot produce inf or NaN, so their results skip the scan.
bool can_overflow(OpKind kind) {
  switch (kind) {
    case OpKind::Transpose:
    case OpKind::Relu:
    case OpKind::ReluGate:
    case OpKind::Sigmoid:
    case OpKind::Softmax:
    case OpKind::Axis1Broadcast:
    case OpKind::Fill:
    case OpKind::Reshape:
      return false;
    default:
      return true;
  }
}

[[noreturn]] void shape_error(OpKind kind, const std::string& what) {
  throw Error("apply(" + std::string(op_name(kind)) + ")", what);
}

void expect_arity(OpKind kind, std::size_t got, std::size_t want) {
  if (got != want)
    shape_error(kind, "expected " + std::to_string(want) + " inputs, got " + std::to_string(got));
}

void expect_same_dims(OpKind kind, const Tensor& a, const Tensor& b) {
  if (a.dims() != b.dims())
    shape_error(kind, "dims " + dims_to_string(a.dims()) + " vs " + dims_to_string(b.dims()));
}

// ---- convolution kernels (stride 1, same zero padding) ----

struct ConvShape {
  std::size_t batch, in_channels, out_channels, height, width, kernel_h, kernel_w;
  std::size_t patch() const { return in_channels * kernel_h * kernel_w; }
  std::size_t pixels() const { return height * width; }
};

ConvShape conv_shape(OpKind kind, const Dims& image, const Dims& kernel) {
  if (image.size() != 4) shape_error(kind, "image must be NCHW, got " + dims_to_string(image));
  if (kernel.size() != 4) shape_error(kind, "kernel must be OIHW, got " + dims_to_string(kernel));
  if (kernel[2] % 2 == 0 || kernel[3] % 2 == 0) shape_error(kind, "kernel extents must be odd");
  return {image[0], kernel[1], kernel[0], image[2], image[3], kernel[2], kernel[3]};
}

// cols is (C*kh*kw) x (H*W), row index (c*kh + u)*kw + v. Each tap is one
// contiguous copy of the shifted plane; positions that wrap across a row
// edge or fall outside the image are then zeroed.
void im2col(const double* image, const ConvShape& s, double* cols) {
  const long ph = static_cast<long>(s.kernel_h / 2), pw = static_cast<long>(s.kernel_w / 2);
  const long h = static_cast<long>(s.height), w = static_cast<long>(s.width);
  for (std::size_t c = 0; c < s.in_channels; ++c)
    for (std::size_t u = 0; u < s.kernel_h; ++u)
      for (std::size_t v = 0; v < s.kernel_w; ++v) {
        double* dst = cols + ((c * s.kernel_h + u) * s.kernel_w + v) * s.pixels();
        const double* plane = image + c * s.pixels();
        const long du = static_cast<long>(u) - ph, dv = static_cast<long>(v) - pw;
        const long r0 = std::max(0L, -du), r1 = std::min(h, h - du);
        std::fill(dst, dst + r0 * w, 0.0);
        std::fill(dst + r1 * w, dst + h * w, 0.0);
        if (r1 <= r0) continue;
        // Element i of the valid rows reads plane[i + du*w + dv]; clip the
        // span to the plane and patch the wrapped columns afterwards.
        const long first = r0 * w, last = r1 * w;
        const long lo = std::max(first, -(du * w + dv)), hi = std::min(last, h * w - (du * w + dv));
        std::fill(dst + first, dst + lo, 0.0);
        std::copy(plane + lo + du * w + dv, plane + hi + du * w + dv, dst + lo);
        std::fill(dst + hi, dst + last, 0.0);
        for (long r = r0; r < r1; ++r) {
          for (long q = 0; q < -dv; ++q) dst[r * w + q] = 0.0;
          for (long q = w - dv; q < w; ++q) dst[r * w + q] = 0.0;
        }
      }
}

// Adjoint of im2col: scatter-add each tap back into the image.
void col2im_accumulate(const double* cols, const ConvShape& s, double* image) {
  const long ph = static_cast<long>(s.kernel_h / 2), pw = static_cast<long>(s.kernel_w / 2);
  const long h = static_cast<long>(s.height), w = static_cast<long>(s.width);
  for (std::size_t c = 0; c < s.in_channels; ++c)
    for (std::size_t u = 0; u < s.kernel_h; ++u)
      for (std::size_t v = 0; v < s.kernel_w; ++v) {
        const double* src = cols + ((c * s.kernel_h + u) * s.kernel_w + v) * s.pixels();
        double* plane = image + c * s.pixels();
        for (long r = 0; r < h; ++r) {
          const long sr = r + static_cast<long>(u) - ph;
          if (sr < 0 || sr >= h) continue;
          const double* row = src + r * w;
          double* dst = plane + sr * w;
          const long shift = static_cast<long>(v) - pw;
          const long lo = std::max(0L, -shift), hi = std::min(w, w - shift);
          for (long col = lo; col < hi; ++col) dst[col + shift] += row[col];
        }
      }
}

using Eigen::Index;

Tensor conv2d_forward(const Tensor& image, const Tensor& kernel) {
  const auto s = conv_shape(OpKind::Conv2d, image.dims(), kernel.dims());
  if (image.dim(1) != s.in_channels)
    shape_error(OpKind::Conv2d, "input channels " + std::to_string(image.dim(1)) + " vs kernel " +
                                    std::to_string(s.in_channels));
  Tensor out = Tensor::uninitialized(Dims{s.batch, s.out_channels, s.height, s.width});
  RowMatrix cols(static_cast<Index>(s.patch()), static_cast<Index>(s.pixels()));
  const auto k = kernel.matrix(s.out_channels, s.patch());
  for (std::size_t n = 0; n < s.batch; ++n) {
    im2col(image.data().data() + n * s.in_channels * s.pixels(), s, cols.data());
    RowMatrixMap dst(out.data().data() + n * s.out_channels * s.pixels(), static_cast<Index>(s.out_channels),
                     static_cast<Index>(s.pixels()));
    dst.noalias() = k * cols;
  }
  return out;
}

Tensor conv2d_input_grad(const Tensor& grad_out, const Tensor& kernel) {
  const auto& g = grad_out.dims();
  if (g.size() != 4) shape_error(OpKind::Conv2dInputGrad, "gradient must be NCHW");
  if (kernel.rank() != 4) shape_error(OpKind::Conv2dInputGrad, "kernel must be OIHW");
  const auto s = conv_shape(OpKind::Conv2dInputGrad, {g[0], kernel.dim(1), g[2], g[3]}, kernel.dims());
  if (g[1] != s.out_channels) shape_error(OpKind::Conv2dInputGrad, "gradient channels do not match kernel");
  Tensor out({s.batch, s.in_channels, s.height, s.width});
  RowMatrix cols(static_cast<Index>(s.patch()), static_cast<Index>(s.pixels()));
  const auto k = kernel.matrix(s.out_channels, s.patch());
  for (std::size_t n = 0; n < s.batch; ++n) {
    ConstRowMatrixMap gn(grad_out.data().data() + n * s.out_channels * s.pixels(),
                         static_cast<Index>(s.out_channels), static_cast<Index>(s.pixels()));
    cols.noalias() = k.transpose() * gn;
    col2im_accumulate(cols.data(), s, out.data().data() + n * s.in_channels * s.pixels());
  }
  return out;
}

Tensor conv2d_kernel_grad(const Tensor& image, const Tensor& grad_out, const Dims& kernel_dims) {
  const auto s = conv_shape(OpKind::Conv2dKernelGrad, image.dims(), kernel_dims);
  const Dims expected{s.batch, s.out_channels, s.height, s.width};
  if (grad_out.dims() != expected || image.dim(1) != s.in_channels)
    shape_error(OpKind::Conv2dKernelGrad, "image " + dims_to_string(image.dims()) + ", gradient " +
                                              dims_to_string(grad_out.dims()) + ", kernel " +
                                              dims_to_string(kernel_dims));
  Tensor out(kernel_dims);
  auto dk = out.matrix(s.out_channels, s.patch());
  RowMatrix cols(static_cast<Index>(s.patch()), static_cast<Index>(s.pixels()));
  for (std::size_t n = 0; n < s.batch; ++n) {
    im2col(image.data().data() + n * s.in_channels * s.pixels(), s, cols.data());
    ConstRowMatrixMap gn(grad_out.data().data() + n * s.out_channels * s.pixels(),
                         static_cast<Index>(s.out_channels), static_cast<Index>(s.pixels()));
    dk.noalias() += gn * cols.transpose();
  }
  return out;
}

// ---- elementwise helpers ----

double softplus_value(double x) { return std::max(x, 0.0) + std::log1p(std::exp(-std::abs(x))); }

double sigmoid_value(double x) {
  if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

template <class F>
Tensor map_elements(const Tensor& a, F f) {
  Tensor out = Tensor::uninitialized(a.dims());
  for (std::size_t i = 0; i < a.size(); ++i) out[i] = f(a[i]);
  return out;
}

std::pair<std::size_t, std::size_t> rows_cols(OpKind kind, const Tensor& t) {
  if (t.rank() == 1) return {1, t.dim(0)};
  if (t.rank() == 2) return {t.dim(0), t.dim(1)};
  shape_error(kind, "expected rank 1 or 2, got " + dims_to_string(t.dims()));
}

std::size_t axis1_extent(OpKind kind, const Dims& dims) {
  if (dims.size() < 2) shape_error(kind, "expected rank >= 2, got " + dims_to_string(dims));
  return dims[1];
}

Tensor compute(OpKind kind, std::span<const Tensor* const> in, const OpAttrs& attrs) {
  switch (kind) {
    case OpKind::Leaf:
      shape_error(kind, "leaves are created with Graph::leaf");
    case OpKind::Add:
    case OpKind::Sub:
    case OpKind::Mul: {
      expect_arity(kind, in.size(), 2);
      expect_same_dims(kind, *in[0], *in[1]);
      Tensor out = Tensor::uninitialized(in[0]->dims());
      if (kind == OpKind::Add) out.array() = in[0]->array() + in[1]->array();
      if (kind == OpKind::Sub) out.array() = in[0]->array() - in[1]->array();
      if (kind == OpKind::Mul) out.array() = in[0]->array() * in[1]->array();
      return out;
    }
    case OpKind::Scale: {
      expect_arity(kind, in.size(), 1);
      Tensor out = Tensor::uninitialized(in[0]->dims());
      out.array() = in[0]->array() * attrs.scalar;
      return out;
    }
    case OpKind::ScaleBy: {
      expect_arity(kind, in.size(), 2);
      if (in[0]->size() != 1) shape_error(kind, "factor must hold a single element");
      Tensor out = Tensor::uninitialized(in[1]->dims());
      out.array() = in[1]->array() * (*in[0])[0];
      return out;
    }
    case OpKind::Matmul: {
      expect_arity(kind, in.size(), 2);
      const auto& a = *in[0];
      const auto& b = *in[1];
      if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0))
        shape_error(kind, dims_to_string(a.dims()) + " x " + dims_to_string(b.dims()));
      Tensor out = Tensor::uninitialized(Dims{a.dim(0), b.dim(1)});
      out.matrix(a.dim(0), b.dim(1)).noalias() = a.matrix(a.dim(0), a.dim(1)) * b.matrix(b.dim(0), b.dim(1));
      return out;
    }
    case OpKind::Transpose: {
      expect_arity(kind, in.size(), 1);
      const auto& a = *in[0];
      if (a.rank() != 2) shape_error(kind, "expected rank 2");
      Tensor out = Tensor::uninitialized(Dims{a.dim(1), a.dim(0)});
      out.matrix(a.dim(1), a.dim(0)) = a.matrix(a.dim(0), a.dim(1)).transpose();
      return out;
    }
    case OpKind::Conv2d:
      expect_arity(kind, in.size(), 2);
      return conv2d_forward(*in[0], *in[1]);
    case OpKind::Conv2dInputGrad:
      expect_arity(kind, in.size(), 2);
      return conv2d_input_grad(*in[0], *in[1]);
    case OpKind::Conv2dKernelGrad:
      expect_arity(kind, in.size(), 2);
      return conv2d_kernel_grad(*in[0], *in[1], attrs.dims);
    case OpKind::Relu:
      expect_arity(kind, in.size(), 1);
      return map_elements(*in[0], [](double x) { return x > 0 ? x : 0.0; });
    case OpKind::ReluGate: {
      expect_arity(kind, in.size(), 2);
      expect_same_dims(kind, *in[0], *in[1]);
      const Tensor& g = *in[0];
      const Tensor& x = *in[1];
      Tensor out = Tensor::uninitialized(g.dims());
      for (std::size_t i = 0; i < g.size(); ++i) out[i] = x[i] > 0 ? g[i] : 0.0;
      return out;
    }
    case OpKind::Softplus:
      expect_arity(kind, in.size(), 1);
      return map_elements(*in[0], softplus_value);
    case OpKind::Sigmoid:
      expect_arity(kind, in.size(), 1);
      return map_elements(*in[0], sigmoid_value);
    case OpKind::GlobalAvgPool: {
      expect_arity(kind, in.size(), 1);
      const auto& a = *in[0];
      if (a.rank() != 4) shape_error(kind, "expected NCHW, got " + dims_to_string(a.dims()));
      const std::size_t planes = a.dim(0) * a.dim(1), pixels = a.dim(2) * a.dim(3);
      Tensor out = Tensor::uninitialized(Dims{a.dim(0), a.dim(1)});
      for (std::size_t p = 0; p < planes; ++p) {
        double total = 0.0;
        for (std::size_t i = 0; i < pixels; ++i) total += a[p * pixels + i];
        out[p] = total / static_cast<double>(pixels);
      }
      return out;
    }
    case OpKind::SpatialBroadcast: {
      expect_arity(kind, in.size(), 1);
      const auto& a = *in[0];
      const auto& d = attrs.dims;
      if (a.rank() != 2 || d.size() != 4 || d[0] != a.dim(0) || d[1] != a.dim(1))
        shape_error(kind, dims_to_string(a.dims()) + " -> " + dims_to_string(d));
      const std::size_t pixels = d[2] * d[3];
      Tensor out = Tensor::uninitialized(d);
      for (std::size_t p = 0; p < a.size(); ++p) {
        const double v = a[p] / static_cast<double>(pixels);
        std::fill_n(out.data().begin() + static_cast<std::ptrdiff_t>(p * pixels), pixels, v);
      }
      return out;
    }
    case OpKind::Dense: {
      expect_arity(kind, in.size(), 3);
      const auto& x = *in[0];
      const auto& w = *in[1];
      const auto& b = *in[2];
      if (x.rank() != 2 || w.rank() != 2 || b.rank() != 1 || x.dim(1) != w.dim(1) || b.dim(0) != w.dim(0))
        shape_error(kind, "x " + dims_to_string(x.dims()) + ", w " + dims_to_string(w.dims()) + ", b " +
                              dims_to_string(b.dims()));
      const std::size_t rows = x.dim(0), features = x.dim(1), classes = w.dim(0);
      Tensor out = Tensor::uninitialized(Dims{rows, classes});
      for (std::size_t n = 0; n < rows; ++n)
        for (std::size_t c = 0; c < classes; ++c) {
          double acc = 0.0;
          for (std::size_t f = 0; f < features; ++f) acc += x[n * features + f] * w[c * features + f];
          out[n * classes + c] = acc + b[c];
        }
      return out;
    }
    case OpKind::BiasAdd: {
      expect_arity(kind, in.size(), 2);
      const auto& a = *in[0];
      const auto& b = *in[1];
      const std::size_t channels = axis1_extent(kind, a.dims());
      if (b.rank() != 1 || b.dim(0) != channels) shape_error(kind, "bias length does not match axis 1");
      const std::size_t inner = a.size() / (a.dim(0) * channels);
      Tensor out = Tensor::uninitialized(a.dims());
      for (std::size_t block = 0, i = 0; block < a.dim(0) * channels; ++block) {
        const double bias = b[block % channels];
        for (std::size_t k = 0; k < inner; ++k, ++i) out[i] = a[i] + bias;
      }
      return out;
    }
    case OpKind::Axis1Sum: {
      expect_arity(kind, in.size(), 1);
      const auto& a = *in[0];
      const std::size_t channels = axis1_extent(kind, a.dims());
      const std::size_t inner = a.size() / (a.dim(0) * channels);
      Tensor out({channels});
      for (std::size_t block = 0, i = 0; block < a.dim(0) * channels; ++block) {
        double total = 0.0;
        for (std::size_t k = 0; k < inner; ++k, ++i) total += a[i];
        out[block % channels] += total;
      }
      return out;
    }
    case OpKind::Axis1Broadcast: {
      expect_arity(kind, in.size(), 1);
      const auto& v = *in[0];
      const std::size_t channels = axis1_extent(kind, attrs.dims);
      if (v.rank() != 1 || v.dim(0) != channels) shape_error(kind, "vector length does not match axis 1");
      Tensor out = Tensor::uninitialized(attrs.dims);
      const std::size_t inner = out.size() / (attrs.dims[0] * channels);
      for (std::size_t block = 0; block < attrs.dims[0] * channels; ++block)
        std::fill_n(out.data().begin() + static_cast<std::ptrdiff_t>(block * inner), inner, v[block % channels]);
      return out;
    }
    case OpKind::Sum: {
      expect_arity(kind, in.size(), 1);
      double total = 0.0;
      for (double v : in[0]->data()) total += v;
      return Tensor::scalar(total);
    }
    case OpKind::Fill: {
      expect_arity(kind, in.size(), 1);
      if (in[0]->size() != 1) shape_error(kind, "fill value must hold a single element");
      return Tensor::filled(attrs.dims, (*in[0])[0]);
    }
    case OpKind::SquaredNorm: {
      expect_arity(kind, in.size(), 1);
      double total = 0.0;
      for (double v : in[0]->data()) total += v * v;
      return Tensor::scalar(total);
    }
    case OpKind::Softmax: {
      expect_arity(kind, in.size(), 1);
      const auto& a = *in[0];
      const auto [rows, cols] = rows_cols(kind, a);
      Tensor out(a.dims());
      for (std::size_t r = 0; r < rows; ++r) {
        const double* z = a.data().data() + r * cols;
        const double top = *std::max_element(z, z + cols);
        double total = 0.0;
        for (std::size_t c = 0; c < cols; ++c) total += (out[r * cols + c] = std::exp(z[c] - top));
        for (std::size_t c = 0; c < cols; ++c) out[r * cols + c] /= total;
      }
      return out;
    }
    case OpKind::RowSumBroadcast: {
      expect_arity(kind, in.size(), 1);
      const auto& a = *in[0];
      const auto [rows, cols] = rows_cols(kind, a);
      Tensor out(a.dims());
      for (std::size_t r = 0; r < rows; ++r) {
        double total = 0.0;
        for (std::size_t c = 0; c < cols; ++c) total += a[r * cols + c];
        for (std::size_t c = 0; c < cols; ++c) out[r * cols + c] = total;
      }
      return out;
    }
    case OpKind::SoftmaxCrossEntropy: {
      expect_arity(kind, in.size(), 1);
      const auto& a = *in[0];
      const auto [rows, cols] = rows_cols(kind, a);
      if (attrs.labels.size() != rows) shape_error(kind, "one label per row required");
      double total = 0.0;
      for (std::size_t r = 0; r < rows; ++r) {
        if (attrs.labels[r] >= cols) shape_error(kind, "label " + std::to_string(attrs.labels[r]) + " out of range");
        const double* z = a.data().data() + r * cols;
        const double top = *std::max_element(z, z + cols);
        double partition = 0.0;
        for (std::size_t c = 0; c < cols; ++c) partition += std::exp(z[c] - top);
        total += top + std::log(partition) - z[attrs.labels[r]];
      }
      return Tensor::scalar(total);
    }
    case OpKind::Reshape:
      expect_arity(kind, in.size(), 1);
      return in[0]->reshaped(attrs.dims);
  }
  throw Error("apply", "unknown op kind " + std::to_string(static_cast<int>(kind)));
}

}  // namespace

std::string_view op_name(OpKind kind) {
  const auto i = static_cast<std::size_t>(kind);
  return i < kOpNames.size() ? kOpNames[i] : std::string_view("unknown");
}

OpKind op_kind_from_name(std::string_view name) {
  for (std::size_t i = 0; i < kOpNames.size(); ++i)
    if (kOpNames[i] == name) return static_cast<OpKind>(i);
  throw Error("apply", "unknown op kind '" + std::string(name) + "'");
}

const Graph::Node& Graph::node(NodeId id) const {
  if (id.index >= nodes_.size()) throw Error("graph", "node " + std::to_string(id.index) + " not in graph");
  return nodes_[id.index];
}

NodeId Graph::leaf(Tensor values) {
  if (!values.all_finite()) throw Error("leaf", "non-finite input value");
  nodes_.push_back({OpKind::Leaf, {}, {}, std::move(values)});
  return {static_cast<std::uint32_t>(nodes_.size() - 1)};
}

NodeId Graph::apply(OpKind kind, std::span<const NodeId> inputs, OpAttrs attrs) {
  if (static_cast<std::size_t>(kind) >= kOpNames.size())
    throw Error("apply", "unknown op kind " + std::to_string(static_cast<int>(kind)));
  std::vector<const Tensor*> values;
  values.reserve(inputs.size());
  for (auto id : inputs) values.push_back(&node(id).value);
  Tensor out = compute(kind, values, attrs);
  if (can_overflow(kind) && !out.all_finite()) throw Error("apply(" + std::string(op_name(kind)) + ")", "non-finite result");
  nodes_.push_back({kind, {inputs.begin(), inputs.end()}, std::move(attrs), std::move(out)});
  return {static_cast<std::uint32_t>(nodes_.size() - 1)};
}

void Graph::backward_rule(NodeId id, NodeId g, const std::vector<char>& needs,
                          std::vector<std::optional<NodeId>>& adjoints) {
  // Copy what we need: apply() may reallocate nodes_.
  const OpKind kind = nodes_[id.index].kind;
  const std::vector<NodeId> in = nodes_[id.index].inputs;
  const OpAttrs attrs = nodes_[id.index].attrs;

  auto accumulate = [&](std::size_t slot, auto&& make) {
    const NodeId target = in[slot];
    if (!needs[target.index]) return;
    const NodeId contribution = make();
    auto& slot_adjoint = adjoints[target.index];
    slot_adjoint = slot_adjoint ? apply(OpKind::Add, {*slot_adjoint, contribution}) : contribution;
  };
  auto dims_of = [&](NodeId n) { return nodes_[n.index].value.dims(); };

  switch (kind) {
    case OpKind::Leaf:
      return;
    case OpKind::ReluGate:
      accumulate(0, [&] { return apply(OpKind::ReluGate, {g, in[1]}); });
      return;
    case OpKind::Add:
      accumulate(0, [&] { return g; });
      accumulate(1, [&] { return g; });
      return;
    case OpKind::Sub:
      accumulate(0, [&] { return g; });
      accumulate(1, [&] { return apply(OpKind::Scale, {g}, {.scalar = -1.0}); });
      return;
    case OpKind::Mul:
      accumulate(0, [&] { return apply(OpKind::Mul, {g, in[1]}); });
      accumulate(1, [&] { return apply(OpKind::Mul, {g, in[0]}); });
      return;
    case OpKind::Scale:
      accumulate(0, [&] { return apply(OpKind::Scale, {g}, {.scalar = attrs.scalar}); });
      return;
    case OpKind::ScaleBy:
      accumulate(0, [&] { return apply(OpKind::Sum, {apply(OpKind::Mul, {in[1], g})}); });
      accumulate(1, [&] { return apply(OpKind::ScaleBy, {in[0], g}); });
      return;
    case OpKind::Matmul:
      accumulate(0, [&] { return apply(OpKind::Matmul, {g, apply(OpKind::Transpose, {in[1]})}); });
      accumulate(1, [&] { return apply(OpKind::Matmul, {apply(OpKind::Transpose, {in[0]}), g}); });
      return;
    case OpKind::Transpose:
      accumulate(0, [&] { return apply(OpKind::Transpose, {g}); });
      return;
    case OpKind::Conv2d:
      accumulate(0, [&] { return apply(OpKind::Conv2dInputGrad, {g, in[1]}); });
      accumulate(1, [&] { return apply(OpKind::Conv2dKernelGrad, {in[0], g}, {.dims = dims_of(in[1])}); });
      return;
    case OpKind::Conv2dInputGrad:
      // out = A(w)^T g; <h, A^T g> = <A h, g>
      accumulate(0, [&] { return apply(OpKind::Conv2d, {g, in[1]}); });
      accumulate(1, [&] { return apply(OpKind::Conv2dKernelGrad, {g, in[0]}, {.dims = dims_of(in[1])}); });
      return;
    case OpKind::Conv2dKernelGrad:
      // <K, kg(x, g)> = <conv(x, K), g> = <x, conv^T(g, K)>
      accumulate(0, [&] { return apply(OpKind::Conv2dInputGrad, {in[1], g}); });
      accumulate(1, [&] { return apply(OpKind::Conv2d, {in[0], g}); });
      return;
    case OpKind::Relu:
      accumulate(0, [&] { return apply(OpKind::ReluGate, {g, in[0]}); });
      return;
    case OpKind::Softplus:
      accumulate(0, [&] { return apply(OpKind::Mul, {g, apply(OpKind::Sigmoid, {in[0]})}); });
      return;
    case OpKind::Sigmoid:
      accumulate(0, [&] {
        const NodeId slope = apply(OpKind::Sub, {id, apply(OpKind::Mul, {id, id})});
        return apply(OpKind::Mul, {g, slope});
      });
      return;
    case OpKind::GlobalAvgPool:
      accumulate(0, [&] { return apply(OpKind::SpatialBroadcast, {g}, {.dims = dims_of(in[0])}); });
      return;
    case OpKind::SpatialBroadcast:
      accumulate(0, [&] { return apply(OpKind::GlobalAvgPool, {g}); });
      return;
    case OpKind::Dense:
      accumulate(0, [&] { return apply(OpKind::Matmul, {g, in[1]}); });
      accumulate(1, [&] { return apply(OpKind::Matmul, {apply(OpKind::Transpose, {g}), in[0]}); });
      accumulate(2, [&] { return apply(OpKind::Axis1Sum, {g}); });
      return;
    case OpKind::BiasAdd:
      accumulate(0, [&] { return g; });
      accumulate(1, [&] { return apply(OpKind::Axis1Sum, {g}); });
      return;
    case OpKind::Axis1Sum:
      accumulate(0, [&] { return apply(OpKind::Axis1Broadcast, {g}, {.dims = dims_of(in[0])}); });
      return;
    case OpKind::Axis1Broadcast:
      accumulate(0, [&] { return apply(OpKind::Axis1Sum, {g}); });
      return;
    case OpKind::Sum:
      accumulate(0, [&] { return apply(OpKind::Fill, {g}, {.dims = dims_of(in[0])}); });
      return;
    case OpKind::Fill:
      accumulate(0, [&] {
        const NodeId total = apply(OpKind::Sum, {g});
        return dims_of(in[0]).empty() ? total : apply(OpKind::Reshape, {total}, {.dims = dims_of(in[0])});
      });
      return;
    case OpKind::SquaredNorm:
      accumulate(0, [&] { return apply(OpKind::ScaleBy, {g, apply(OpKind::Scale, {in[0]}, {.scalar = 2.0})}); });
      return;
    case OpKind::Softmax:
      accumulate(0, [&] {
        const NodeId weighted = apply(OpKind::Mul, {id, g});
        const NodeId centered = apply(OpKind::Mul, {id, apply(OpKind::RowSumBroadcast, {weighted})});
        return apply(OpKind::Sub, {weighted, centered});
      });
      return;
    case OpKind::RowSumBroadcast:
      accumulate(0, [&] { return apply(OpKind::RowSumBroadcast, {g}); });
      return;
    case OpKind::SoftmaxCrossEntropy:
      accumulate(0, [&] {
        const Dims& zd = dims_of(in[0]);
        Tensor one_hot(zd);
        const std::size_t cols = zd.back();
        for (std::size_t r = 0; r < attrs.labels.size(); ++r) one_hot[r * cols + attrs.labels[r]] = 1.0;
        const NodeId residual = apply(OpKind::Sub, {apply(OpKind::Softmax, {in[0]}), leaf(std::move(one_hot))});
        return apply(OpKind::ScaleBy, {g, residual});
      });
      return;
    case OpKind::Reshape:
      accumulate(0, [&] { return apply(OpKind::Reshape, {g}, {.dims = dims_of(in[0])}); });
      return;
  }
}

std::vector<NodeId> Graph::grad(NodeId output, std::span<const NodeId> wrt) {
  if (node(output).value.size() != 1)
    throw Error("grad", "output must be a single element, got dims " + dims_to_string(node(output).value.dims()));
  for (auto w : wrt) (void)node(w);

  const std::size_t end = output.index + 1;
  std::vector<char> needs(nodes_.size(), 0);
  for (auto w : wrt) needs[w.index] = 1;
  for (std::size_t i = 0; i < end; ++i) {
    // A relu gate has zero derivative in its second input.
    const auto& inputs = nodes_[i].inputs;
    const std::size_t live = nodes_[i].kind == OpKind::ReluGate ? 1 : inputs.size();
    for (std::size_t k = 0; k < live; ++k)
      if (needs[inputs[k].index]) {
        needs[i] = 1;
        break;
      }
  }

  std::vector<std::optional<NodeId>> adjoints(end);
  if (needs[output.index]) {
    adjoints[output.index] = leaf(Tensor::filled(node(output).value.dims(), 1.0));
    for (std::size_t i = end; i-- > 0;) {
      if (!adjoints[i] || !needs[i]) continue;
      backward_rule({static_cast<std::uint32_t>(i)}, *adjoints[i], needs, adjoints);
    }
  }

  std::vector<NodeId> result;
  result.reserve(wrt.size());
  for (auto w : wrt) {
    if (w.index < end && adjoints[w.index])
      result.push_back(*adjoints[w.index]);
    else
      result.push_back(leaf(Tensor(node(w).value.dims())));
  }
  return result;
}

Tensor Graph::evaluate(NodeId target, std::span<const std::pair<NodeId, Tensor>> leaf_overrides) const {
  (void)node(target);
  const std::size_t end = target.index + 1;
  std::vector<bool> live(end, false);
  live[target.index] = true;
  for (std::size_t i = end; i-- > 0;)
    if (live[i])
      for (auto input : nodes_[i].inputs) live[input.index] = true;

  std::vector<const Tensor*> current(end, nullptr);
  std::vector<std::optional<Tensor>> recomputed(end);
  for (const auto& [id, values] : leaf_overrides) {
    if (node(id).kind != OpKind::Leaf) throw Error("evaluate", "only leaves can be overridden");
    if (values.dims() != node(id).value.dims()) throw Error("evaluate", "override dims differ from the leaf");
    if (id.index < end) current[id.index] = &values;
  }
  for (std::size_t i = 0; i < end; ++i) {
    if (!live[i]) continue;
    const Node& n = nodes_[i];
    if (n.kind == OpKind::Leaf) {
      if (!current[i]) current[i] = &n.value;
      continue;
    }
    std::vector<const Tensor*> inputs;
    inputs.reserve(n.inputs.size());
    for (auto input : n.inputs) inputs.push_back(current[input.index]);
    recomputed[i] = compute(n.kind, inputs, n.attrs);
    current[i] = &*recomputed[i];
  }
  return *current[target.index];
}

double finite_diff_check(Graph& graph, NodeId output, NodeId wrt, double epsilon) {
  if (!(epsilon > 0.0 && epsilon <= 1e-2)) throw Error("finite_diff_check", "epsilon must be in (0, 1e-2]");
  if (graph.kind(wrt) != OpKind::Leaf) throw Error("finite_diff_check", "wrt must be a leaf");
  const Tensor analytic = graph.value(graph.grad(output, {wrt}).front());
  const Tensor base = graph.value(wrt);
  double worst = 0.0;
  std::pair<NodeId, Tensor> override{wrt, base};
  std::span<const std::pair<NodeId, Tensor>> overrides(&override, 1);
  for (std::size_t i = 0; i < base.size(); ++i) {
    override.second[i] = base[i] + epsilon;
    const double up = graph.evaluate(output, overrides).item();
    override.second[i] = base[i] - epsilon;
    const double down = graph.evaluate(output, overrides).item();
    override.second[i] = base[i];
    const double numeric = (up - down) / (2.0 * epsilon);
    const double denom = std::max({std::abs(analytic[i]), std::abs(numeric), 1e-8});
    worst = std::max(worst, std::abs(analytic[i] - numeric) / denom);
  }
  return worst;
}

std::vector<Var> grad(Var output, std::span<const Var> wrt) {
  std::vector<NodeId> ids;
  ids.reserve(wrt.size());
  for (const auto& w : wrt) {
    if (&w.graph() != &output.graph()) throw Error("grad", "variables belong to different graphs");
    ids.push_back(w.id());
  }
  auto grads = output.graph().grad(output.id(), ids);
  std::vector<Var> out;
  out.reserve(grads.size());
  for (auto g : grads) out.emplace_back(output.graph(), g);
  return out;
}

namespace ops {

namespace {
Var unary(OpKind kind, Var a, OpAttrs attrs = {}) { return {a.graph(), a.graph().apply(kind, {a.id()}, std::move(attrs))}; }
Var binary(OpKind kind, Var a, Var b) {
  if (&a.graph() != &b.graph()) throw Error("apply(" + std::string(op_name(kind)) + ")", "operands from different graphs");
  return {a.graph(), a.graph().apply(kind, {a.id(), b.id()})};
}
}  // namespace

Var add(Var a, Var b) { return binary(OpKind::Add, a, b); }
Var sub(Var a, Var b) { return binary(OpKind::Sub, a, b); }
Var mul(Var a, Var b) { return binary(OpKind::Mul, a, b); }
Var scale(Var a, double factor) { return unary(OpKind::Scale, a, {.scalar = factor}); }
Var scale_by(Var factor, Var a) { return binary(OpKind::ScaleBy, factor, a); }
Var matmul(Var a, Var b) { return binary(OpKind::Matmul, a, b); }
Var transpose(Var a) { return unary(OpKind::Transpose, a); }
Var conv2d(Var input, Var kernel) { return binary(OpKind::Conv2d, input, kernel); }
Var relu(Var a) { return unary(OpKind::Relu, a); }
Var softplus(Var a) { return unary(OpKind::Softplus, a); }
Var sigmoid(Var a) { return unary(OpKind::Sigmoid, a); }
Var global_avg_pool(Var a) { return unary(OpKind::GlobalAvgPool, a); }
Var dense(Var x, Var weight, Var bias) {
  return {x.graph(), x.graph().apply(OpKind::Dense, {x.id(), weight.id(), bias.id()})};
}
Var bias_add(Var a, Var bias) { return binary(OpKind::BiasAdd, a, bias); }
Var sum(Var a) { return unary(OpKind::Sum, a); }
Var squared_norm(Var a) { return unary(OpKind::SquaredNorm, a); }
Var softmax(Var a) { return unary(OpKind::Softmax, a); }
Var softmax_cross_entropy(Var logits, std::vector<std::size_t> labels) {
  return unary(OpKind::SoftmaxCrossEntropy, logits, {.labels = std::move(labels)});
}
Var reshape(Var a, Dims dims) { return unary(OpKind::Reshape, a, {.dims = std::move(dims)}); }

}  // namespace ops

}  // namespace corm
