// SPDX-License-Identifier: Apache-2.0
#pragma once

#include "corm/diffgraph.hpp"
#include "corm/masks.hpp"
#include "corm/model.hpp"
#include "corm/rng.hpp"

#include <optional>
#include <string_view>
#include <vector>

namespace corm {

/// Training recipes: plain ERM, random non-core noising, saliency
/// regularisation, and both combined.
enum class Method { Erm, Noise, SalReg, Corm };

std::string_view to_string(Method method);
Method method_from_string(std::string_view name);

struct LossConfig {
  Method method = Method::Erm;
  double sigma = 0.25;        // noise std-dev in image units
  double p = 0.5;             // probability a batch is noised
  double lambda_sal = 1.0;    // saliency penalty weight
  bool sal_on_noised = true;  // penalise gradients on the noised input

  bool uses_noise() const { return method == Method::Noise || method == Method::Corm; }
  bool uses_saliency() const { return method == Method::SalReg || method == Method::Corm; }
  bool uses_masks() const { return method != Method::Erm; }
  void validate() const;
};

/// A mini-batch. `core_masks` holds one consolidated, undilated core mask
/// per sample and may be empty for ERM.
struct Batch {
  Tensor images;  // N x C x H x W
  std::vector<std::size_t> labels;
  std::vector<SoftMask> core_masks;
};

/// Mean softmax cross-entropy of the model on `images`.
Var classification_loss(const ParameterVars& params, Nonlinearity nonlinearity, Var images,
                        const std::vector<std::size_t>& labels);

/// Mean over the batch of ||(1 - c) * grad_x l(f(x), y)||^2, with the mask
/// broadcast over channels. `images` must be a leaf. Differentiable in the
/// parameters.
Var saliency_loss(const ParameterVars& params, Nonlinearity nonlinearity, Var images,
                  const std::vector<std::size_t>& labels, const std::vector<SoftMask>& core_masks);

struct StepLoss {
  Var total;
  Var classification;
  std::optional<Var> saliency;
  bool noised = false;
};

/// Loss of one training step under `config`. Noise is applied to the whole
/// batch with probability p, with a fresh draw per sample.
StepLoss corm_step_loss(Graph& graph, const ParameterVars& params, Nonlinearity nonlinearity, const Batch& batch,
                        const LossConfig& config, Rng& rng);

}  // namespace corm
