// SPDX-License-Identifier: Apache-2.0
#pragma once

#include "corm/diffgraph.hpp"
#include "corm/masks.hpp"
#include "corm/tensor.hpp"

#include <array>
#include <cstdint>
#include <filesystem>
#include <string>
#include <string_view>
#include <vector>

namespace corm {

enum class Nonlinearity { Relu, Softplus };

std::string_view to_string(Nonlinearity n);
Nonlinearity nonlinearity_from_string(std::string_view name);

/// Two 3x3 same-padded convolutions, global average pooling to the feature
/// vector r(x), then a dense layer to the logits.
struct ClassifierModel {
  static constexpr std::size_t kParameterCount = 6;
  static constexpr std::array<std::string_view, kParameterCount> kParameterNames = {
      "conv1.weight", "conv1.bias", "conv2.weight", "conv2.bias", "dense.weight", "dense.bias"};

  Nonlinearity nonlinearity = Nonlinearity::Relu;
  std::uint64_t seed = 0;
  Tensor conv1_weight;  // hidden x in x 3 x 3
  Tensor conv1_bias;    // hidden
  Tensor conv2_weight;  // features x hidden x 3 x 3
  Tensor conv2_bias;    // features
  Tensor dense_weight;  // classes x features
  Tensor dense_bias;    // classes

  std::size_t in_channels() const { return conv1_weight.dim(1); }
  std::size_t hidden() const { return conv1_weight.dim(0); }
  std::size_t features() const { return conv2_weight.dim(0); }
  std::size_t classes() const { return dense_weight.dim(0); }

  std::array<Tensor*, kParameterCount> parameters();
  std::array<const Tensor*, kParameterCount> parameters() const;
};

/// Glorot-uniform half-width sqrt(6 / (fan_in + fan_out)).
double glorot_bound(std::size_t fan_in, std::size_t fan_out);

/// Weights ~ U[-b, b] per layer (b from glorot_bound, receptive field
/// counted in the conv fans), biases zero. Deterministic in `seed`.
ClassifierModel init_model(std::uint64_t seed, std::size_t in_channels, std::size_t features, std::size_t classes,
                           Nonlinearity nonlinearity, std::size_t hidden = 8);

/// The model's parameters as leaves of one graph.
struct ParameterVars {
  std::array<Var, ClassifierModel::kParameterCount> all;
  Var conv1_weight() const { return all[0]; }
  Var conv1_bias() const { return all[1]; }
  Var conv2_weight() const { return all[2]; }
  Var conv2_bias() const { return all[3]; }
  Var dense_weight() const { return all[4]; }
  Var dense_bias() const { return all[5]; }
};

ParameterVars bind_parameters(Graph& graph, const ClassifierModel& model);

struct ForwardVars {
  Var logits;        // N x C
  Var features;      // N x F, the neural feature vector r(x)
  Var feature_maps;  // N x F x H x W, last activation before pooling
};

/// Builds the forward pass for a batch of N x C x H x W images.
ForwardVars forward(const ParameterVars& params, Nonlinearity nonlinearity, Var images);

struct ForwardResult {
  Tensor logits;
  Tensor features;
  Tensor feature_maps;
};

/// Single image (C x H x W): logits (C), features (F), maps (F x H x W).
ForwardResult forward(const ClassifierModel& model, const Tensor& image);
/// Batch (N x C x H x W): logits (N x C), features (N x F), maps (N x F x H x W).
ForwardResult forward_batch(const ClassifierModel& model, const Tensor& images);

/// Index of the largest logit; ties go to the lowest index.
std::size_t argmax(std::span<const double> logits);

/// argmax of each row of the logits for a batch of images.
std::vector<std::size_t> predict(const ClassifierModel& model, const Tensor& images);

struct AttackSettings {
  double step = 0.5;
  int iterations = 25;
  double rho = -1.0;  // negative: 0.5 * sqrt(image element count)
};

/// Gradient ascent on r(x)_feature, projecting onto the L2 ball of radius
/// rho around x0 after every step.
Tensor feature_attack(const ClassifierModel& model, const Tensor& x0, std::size_t feature, AttackSettings settings);

/// Piecewise-linear jet colormap: r, g, b = clamp(1.5 - |4t - c|) with
/// c = 3, 2, 1 respectively.
std::array<double, 3> jet(double t);

/// jet(nam) + image, divided by its global maximum. `image` is H x W x 3.
Tensor heatmap(const Tensor& image, const SoftMask& nam);

Tensor chw_to_hwc(const Tensor& image);
/// Binary PPM (P6, 8-bit) of an H x W x 3 image with values in [0, 1].
void write_ppm(const std::filesystem::path& path, const Tensor& hwc);

void save_checkpoint(const std::filesystem::path& dir, const ClassifierModel& model);
ClassifierModel load_checkpoint(const std::filesystem::path& dir);

}  // namespace corm
