// SPDX-License-Identifier: Apache-2.0
#include "corm/trainer.hpp"

#include "corm/error.hpp"
#include "corm/io.hpp"
#include "corm/rng.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>

namespace corm {

std::string_view to_string(LrSchedule s) { return s == LrSchedule::Linear ? "linear" : "triangular"; }

LrSchedule lr_schedule_from_string(std::string_view name) {
  if (name == "linear") return LrSchedule::Linear;
  if (name == "triangular") return LrSchedule::Triangular;
  throw Error("lr_schedule", "unknown schedule '" + std::string(name) + "' (expected linear or triangular)");
}

void TrainConfig::validate() const {
  if (epochs < 1) throw Error("train_config", "epochs must be >= 1");
  if (batch_size == 0) throw Error("train_config", "batch size must be positive");
  if (!(lr_start >= 0.0) || !(lr_end >= 0.0)) throw Error("train_config", "learning rates must be >= 0");
  if (!(momentum >= 0.0 && momentum < 1.0)) throw Error("train_config", "momentum must lie in [0, 1)");
  if (eval_every < 0) throw Error("train_config", "eval_every must be >= 0");
  loss.validate();
  eval_protocol.validate();
}

double lr_at(std::size_t step, std::size_t total_steps, double lr_start, double lr_end, LrSchedule schedule) {
  if (step > total_steps) throw Error("lr_at", "step beyond total_steps");
  if (total_steps == 0) return lr_start;
  const double t = static_cast<double>(step) / static_cast<double>(total_steps);
  if (schedule == LrSchedule::Linear) return (1.0 - t) * lr_start + t * lr_end;
  const double rise = t <= 0.5 ? 2.0 * t : 2.0 * (1.0 - t);
  return lr_end + (lr_start - lr_end) * rise;
}

TrainResult train(const ClassifierModel& initial, const Dataset& dataset, const TrainConfig& config) {
  config.validate();
  if (dataset.size() == 0) throw Error("train", "dataset is empty");
  if (dataset.classes != initial.classes())
    throw Error("train", "dataset has " + std::to_string(dataset.classes) + " classes, model has " +
                             std::to_string(initial.classes()));

  TrainResult result{initial, {}};
  ClassifierModel& model = result.model;
  const Rng root(config.seed);
  Rng order_rng = root.split(1);
  Rng noise_rng = root.split(2);

  const std::size_t n = dataset.size();
  const std::size_t steps_per_epoch = (n + config.batch_size - 1) / config.batch_size;
  const std::size_t total = steps_per_epoch * static_cast<std::size_t>(config.epochs);
  const bool has_masks = std::all_of(dataset.samples.begin(), dataset.samples.end(),
                                     [](const MaskedSample& s) { return !s.core_masks.empty(); });

  std::array<Tensor, ClassifierModel::kParameterCount> velocity;
  {
    const auto params = model.parameters();
    for (std::size_t k = 0; k < params.size(); ++k) velocity[k] = Tensor(params[k]->dims());
  }
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::size_t step = 0;

  for (int epoch = 1; epoch <= config.epochs; ++epoch) {
    for (std::size_t i = n; i > 1; --i) std::swap(order[i - 1], order[order_rng.below(i)]);
    double loss_sum = 0;
    double lr = config.lr_start;
    for (std::size_t start = 0; start < n; start += config.batch_size, ++step) {
      const std::span<const std::size_t> idx(order.data() + start, std::min(config.batch_size, n - start));
      const Batch batch = make_batch(dataset, idx);
      lr = lr_at(step, total > 1 ? total - 1 : 1, config.lr_start, config.lr_end, config.schedule);

      Graph graph;
      const auto vars = bind_parameters(graph, model);
      const StepLoss loss = corm_step_loss(graph, vars, model.nonlinearity, batch, config.loss, noise_rng);
      const double value = loss.total.value().item();
      if (!std::isfinite(value)) throw Error("train", "loss became non-finite at step " + std::to_string(step));
      loss_sum += value;
      const auto grads = grad(loss.total, vars.all);
      auto params = model.parameters();
      for (std::size_t k = 0; k < params.size(); ++k) {
        velocity[k].array() = config.momentum * velocity[k].array() + grads[k].value().array();
        params[k]->array() -= lr * velocity[k].array();
      }
    }

    EpochRecord record{epoch, lr, loss_sum / static_cast<double>(steps_per_epoch), std::nullopt, std::nullopt};
    if (config.eval_every > 0 && (epoch % config.eval_every == 0 || epoch == config.epochs)) {
      record.clean_acc = evaluate_clean(model, dataset);
      if (has_masks)
        record.core_acc =
            core_spurious_accuracy(model, dataset, ground_truth_feature_map(dataset), config.eval_protocol)
                .core_accuracy;
    }
    result.history.push_back(record);
  }
  return result;
}

void write_history_csv(const std::filesystem::path& path, const std::vector<EpochRecord>& history) {
  std::ostringstream out;
  out << "epoch,lr,mean_loss,clean_acc,core_acc\n";
  auto optional = [](const std::optional<double>& v) { return v ? format_number(*v) : std::string(); };
  for (const auto& r : history)
    out << r.epoch << ',' << format_number(r.lr) << ',' << format_number(r.mean_loss) << ',' << optional(r.clean_acc)
        << ',' << optional(r.core_acc) << '\n';
  write_text_file(path, out.str());
}

}  // namespace corm
