// SPDX-License-Identifier: Apache-2.0
#include "corm/losses.hpp"

#include "corm/corruption.hpp"
#include "corm/error.hpp"

namespace corm {

std::string_view to_string(Method method) {
  switch (method) {
    case Method::Erm: return "erm";
    case Method::Noise: return "noise";
    case Method::SalReg: return "salreg";
    case Method::Corm: return "corm";
  }
  return "unknown";
}

Method method_from_string(std::string_view name) {
  for (auto m : {Method::Erm, Method::Noise, Method::SalReg, Method::Corm})
    if (to_string(m) == name) return m;
  throw Error("method", "unknown method '" + std::string(name) + "' (expected erm, noise, salreg or corm)");
}

void LossConfig::validate() const {
  if (!(lambda_sal >= 0.0)) throw Error("loss_config", "lambda_sal must be >= 0");
  if (!(sigma >= 0.0)) throw Error("loss_config", "sigma must be >= 0");
  if (!(p >= 0.0 && p <= 1.0)) throw Error("loss_config", "p must lie in [0, 1]");
}

namespace {

Var cross_entropy_sum(const ParameterVars& params, Nonlinearity nonlinearity, Var images,
                      const std::vector<std::size_t>& labels) {
  const std::size_t classes = params.dense_weight().dims()[0];
  if (labels.size() != images.dims()[0]) throw Error("classification_loss", "one label per image required");
  for (auto y : labels)
    if (y >= classes)
      throw Error("classification_loss", "label " + std::to_string(y) + " out of range for " +
                                             std::to_string(classes) + " classes");
  return ops::softmax_cross_entropy(forward(params, nonlinearity, images).logits, labels);
}

// Summing the per-sample losses keeps each sample's input gradient intact.
Var saliency_penalty(Var loss_sum, Var images, const std::vector<SoftMask>& core_masks) {
  const Dims d = images.dims();
  if (core_masks.size() != d[0]) throw Error("saliency_loss", "one core mask per image required");
  const std::size_t channels = d[1], pixels = d[2] * d[3];
  Tensor outside(d);
  for (std::size_t n = 0; n < d[0]; ++n) {
    const auto& m = core_masks[n];
    if (m.height() != d[2] || m.width() != d[3]) throw Error("saliency_loss", "core mask dims do not match image");
    for (std::size_t c = 0; c < channels; ++c)
      for (std::size_t p = 0; p < pixels; ++p)
        outside[(n * channels + c) * pixels + p] = 1.0 - m.values().data()[p];
  }
  Var input_grad = grad(loss_sum, images);
  Var masked = input_grad * leaf(images.graph(), std::move(outside));
  return ops::scale(ops::squared_norm(masked), 1.0 / static_cast<double>(d[0]));
}

void check_images(const char* op, Var images) {
  if (images.dims().size() != 4) throw Error(op, "images must be N x C x H x W");
}

}  // namespace

Var classification_loss(const ParameterVars& params, Nonlinearity nonlinearity, Var images,
                        const std::vector<std::size_t>& labels) {
  check_images("classification_loss", images);
  return ops::scale(cross_entropy_sum(params, nonlinearity, images, labels),
                    1.0 / static_cast<double>(images.dims()[0]));
}

Var saliency_loss(const ParameterVars& params, Nonlinearity nonlinearity, Var images,
                  const std::vector<std::size_t>& labels, const std::vector<SoftMask>& core_masks) {
  check_images("saliency_loss", images);
  if (images.graph().kind(images.id()) != OpKind::Leaf) throw Error("saliency_loss", "images must be a leaf");
  return saliency_penalty(cross_entropy_sum(params, nonlinearity, images, labels), images, core_masks);
}

StepLoss corm_step_loss(Graph& graph, const ParameterVars& params, Nonlinearity nonlinearity, const Batch& batch,
                        const LossConfig& config, Rng& rng) {
  config.validate();
  if (batch.images.rank() != 4) throw Error("corm_step_loss", "images must be N x C x H x W");
  const Dims& d = batch.images.dims();
  const std::size_t count = d[0];
  if (config.uses_masks() && batch.core_masks.size() != count)
    throw Error("corm_step_loss", std::string("method ") + std::string(to_string(config.method)) +
                                      " needs one core mask per sample");

  Tensor inputs = batch.images;
  bool noised = false;
  if (config.uses_noise() && draw_apply(config.p, rng)) {
    noised = true;
    const std::size_t stride = d[1] * d[2] * d[3];
    for (std::size_t n = 0; n < count; ++n) {
      Tensor sample({d[1], d[2], d[3]}, {inputs.data().begin() + static_cast<std::ptrdiff_t>(n * stride),
                                         inputs.data().begin() + static_cast<std::ptrdiff_t>((n + 1) * stride)});
      const Tensor noisy = corrupt(sample, complement(batch.core_masks[n]), config.sigma, rng);
      std::copy(noisy.data().begin(), noisy.data().end(), inputs.data().begin() + static_cast<std::ptrdiff_t>(n * stride));
    }
  }

  Var images = leaf(graph, std::move(inputs));
  Var ce_sum = cross_entropy_sum(params, nonlinearity, images, batch.labels);
  Var ce = ops::scale(ce_sum, 1.0 / static_cast<double>(count));
  StepLoss result{ce, ce, std::nullopt, noised};
  if (!config.uses_saliency()) return result;

  Var penalty = (noised && !config.sal_on_noised)
                    ? saliency_loss(params, nonlinearity, leaf(graph, batch.images), batch.labels, batch.core_masks)
                    : saliency_penalty(ce_sum, images, batch.core_masks);
  result.saliency = penalty;
  result.total = ce + ops::scale(penalty, config.lambda_sal);
  return result;
}

}  // namespace corm
