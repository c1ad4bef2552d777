// SPDX-License-Identifier: Apache-2.0
#pragma once

#include "corm/losses.hpp"
#include "corm/metrics.hpp"
#include "corm/model.hpp"
#include "corm/synthdata.hpp"
#include "corm/trainer.hpp"

#include <cstdint>
#include <filesystem>
#include <functional>
#include <vector>

namespace corm {

struct Table1Config {
  DatasetSpec data;
  TrainConfig train;  // method and seed are set per run
  EvalProtocol eval;  // seed is offset by the trial index
  std::size_t trials = 4;
  std::uint64_t base_seed = 0;
  std::size_t features = 16;
  std::size_t hidden = 8;
  Nonlinearity nonlinearity = Nonlinearity::Relu;
  std::vector<Method> methods = {Method::Erm, Method::Noise, Method::SalReg, Method::Corm};
  bool full_core_masks = false;  // replace every training core mask by all ones
  unsigned jobs = 0;             // worker threads; 0 picks the hardware count

  void validate() const;
};

struct TrialResult {
  Method method = Method::Erm;
  std::size_t trial = 0;
  std::uint64_t seed = 0;
  double clean = 0, core = 0, spurious = 0, rcs = 0;
  std::vector<EpochRecord> history;
  double seconds = 0;
};

struct Stat {
  double mean = 0, sd = 0;
};

struct ComparisonRow {
  Method method = Method::Erm;
  std::size_t trials = 0;
  Stat clean, core, spurious, rcs;
};

struct Table1Result {
  std::vector<TrialResult> runs;  // method-major, then trial
  std::vector<ComparisonRow> rows;
  double seconds = 0;
};

/// Mean and sample standard deviation (n - 1); sd is 0 for one value.
Stat summarize(const std::vector<double>& values);

/// Rows in order of first appearance of each method.
std::vector<ComparisonRow> aggregate(const std::vector<TrialResult>& runs);

/// Trains every method in every trial on one dataset generated from
/// `config.data`. Trial t uses seed base_seed + t for initialisation and
/// training, shared by all methods, and evaluates on the test split with
/// ground-truth core masks. Runs are independent and may execute in parallel;
/// results do not depend on the thread count.
Table1Result run_table1(const Table1Config& config, const std::function<void(const TrialResult&)>& on_done = {});
Table1Result run_table1(const Table1Config& config, const DatasetPair& data,
                        const std::function<void(const TrialResult&)>& on_done = {});

void write_trials_csv(const std::filesystem::path& path, const std::vector<TrialResult>& runs);
std::vector<TrialResult> read_trials_csv(const std::filesystem::path& path);
void write_table1_csv(const std::filesystem::path& path, const std::vector<ComparisonRow>& rows);
void write_table1_md(const std::filesystem::path& path, const std::vector<ComparisonRow>& rows);

}  // namespace corm
