// SPDX-License-Identifier: Apache-2.0
#pragma once

#include "corm/losses.hpp"
#include "corm/metrics.hpp"
#include "corm/model.hpp"
#include "corm/synthdata.hpp"

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string_view>
#include <vector>

namespace corm {

enum class LrSchedule { Linear, Triangular };
std::string_view to_string(LrSchedule s);
LrSchedule lr_schedule_from_string(std::string_view name);

struct TrainConfig {
  int epochs = 15;
  std::size_t batch_size = 32;
  double lr_start = 0.1;
  double lr_end = 0.004;
  double momentum = 0.9;
  LrSchedule schedule = LrSchedule::Linear;
  std::uint64_t seed = 0;
  LossConfig loss;
  int eval_every = 1;          // 0: no per-epoch evaluation
  EvalProtocol eval_protocol;  // used for the history's core accuracy

  void validate() const;
};

/// Linear: lr_start at step 0 to lr_end at total_steps. Triangular: lr_end
/// up to lr_start at the midpoint and back down.
double lr_at(std::size_t step, std::size_t total_steps, double lr_start, double lr_end,
             LrSchedule schedule = LrSchedule::Linear);

struct EpochRecord {
  int epoch = 0;
  double lr = 0;  // rate used by the epoch's last step
  double mean_loss = 0;
  std::optional<double> clean_acc;
  std::optional<double> core_acc;
};

struct TrainResult {
  ClassifierModel model;
  std::vector<EpochRecord> history;
};

/// Mini-batch SGD with momentum (v = mu v + g; theta -= lr v) on
/// corm_step_loss. Batch order comes from seed stream 1, training noise from
/// stream 2. Deterministic in the config.
TrainResult train(const ClassifierModel& initial, const Dataset& dataset, const TrainConfig& config);

void write_history_csv(const std::filesystem::path& path, const std::vector<EpochRecord>& history);

}  // namespace corm
