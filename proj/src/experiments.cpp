// SPDX-License-Identifier: Apache-2.0
#include "corm/experiments.hpp"

#include "corm/error.hpp"
#include "corm/io.hpp"

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <exception>
#include <mutex>
#include <sstream>
#include <thread>

namespace corm {

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point start) {
  return std::chrono::duration<double>(Clock::now() - start).count();
}

std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> out;
  std::stringstream s(line);
  std::string cell;
  while (std::getline(s, cell, ',')) out.push_back(cell);
  if (!line.empty() && line.back() == ',') out.emplace_back();
  return out;
}

double parse_number(const std::string& text, const std::string& op) {
  try {
    std::size_t used = 0;
    const double v = std::stod(text, &used);
    if (used != text.size()) throw std::invalid_argument(text);
    return v;
  } catch (const std::exception&) {
    throw Error(op, "bad number '" + text + "'");
  }
}

std::string percent(const Stat& s) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.2f%% ± %.2f", 100.0 * s.mean, 100.0 * s.sd);
  return buf;
}

std::string_view row_title(Method m) {
  switch (m) {
    case Method::Erm: return "Baseline (ERM)";
    case Method::Noise: return "Random 1-c Noising";
    case Method::SalReg: return "Saliency Regularization";
    case Method::Corm: return "Rand Noising + Sal Reg";
  }
  return "";
}

}  // namespace

void Table1Config::validate() const {
  data.validate();
  train.validate();
  eval.validate();
  if (trials == 0) throw Error("table1", "trials must be >= 1");
  if (methods.empty()) throw Error("table1", "no methods selected");
  if (features == 0 || hidden == 0) throw Error("table1", "model dimensions must be positive");
}

Stat summarize(const std::vector<double>& values) {
  if (values.empty()) throw Error("summarize", "no values");
  Stat s;
  for (double v : values) s.mean += v;
  s.mean /= static_cast<double>(values.size());
  if (values.size() > 1) {
    double ss = 0;
    for (double v : values) ss += (v - s.mean) * (v - s.mean);
    s.sd = std::sqrt(ss / static_cast<double>(values.size() - 1));
  }
  return s;
}

std::vector<ComparisonRow> aggregate(const std::vector<TrialResult>& runs) {
  std::vector<Method> order;
  for (const auto& r : runs)
    if (std::find(order.begin(), order.end(), r.method) == order.end()) order.push_back(r.method);
  std::vector<ComparisonRow> rows;
  for (auto m : order) {
    std::vector<double> clean, core, spurious, scores;
    for (const auto& r : runs) {
      if (r.method != m) continue;
      clean.push_back(r.clean);
      core.push_back(r.core);
      spurious.push_back(r.spurious);
      scores.push_back(r.rcs);
    }
    rows.push_back({m, clean.size(), summarize(clean), summarize(core), summarize(spurious), summarize(scores)});
  }
  return rows;
}

Table1Result run_table1(const Table1Config& config, const std::function<void(const TrialResult&)>& on_done) {
  config.validate();
  return run_table1(config, generate(config.data), on_done);
}

Table1Result run_table1(const Table1Config& config, const DatasetPair& data,
                        const std::function<void(const TrialResult&)>& on_done) {
  config.validate();
  const auto start = Clock::now();
  Dataset train_set = data.train;
  if (config.full_core_masks)
    for (auto& s : train_set.samples)
      s.core_masks = {{"full", SoftMask(s.image.dim(1), s.image.dim(2), 1.0)}};
  const auto feature_map = ground_truth_feature_map(data.test);
  const std::size_t in_channels = data.train.samples.at(0).image.dim(0);

  Table1Result result;
  for (auto m : config.methods)
    for (std::size_t t = 0; t < config.trials; ++t) {
      TrialResult r;
      r.method = m;
      r.trial = t;
      r.seed = config.base_seed + t;
      result.runs.push_back(r);
    }

  std::mutex mutex;
  std::exception_ptr failure;
  std::atomic<std::size_t> next{0};
  auto worker = [&] {
    for (std::size_t job; (job = next.fetch_add(1)) < result.runs.size();) {
      TrialResult& r = result.runs[job];
      try {
        const auto job_start = Clock::now();
        TrainConfig tc = config.train;
        tc.loss.method = r.method;
        tc.seed = r.seed;
        const auto initial =
            init_model(r.seed, in_channels, config.features, data.train.classes, config.nonlinearity, config.hidden);
        auto trained = train(initial, train_set, tc);
        EvalProtocol protocol = config.eval;
        protocol.seed = config.eval.seed + r.trial;
        const auto report = core_spurious_accuracy(trained.model, data.test, feature_map, protocol);
        r.clean = report.clean_accuracy;
        r.core = report.core_accuracy;
        r.spurious = report.spurious_accuracy;
        r.rcs = report.rcs;
        r.history = std::move(trained.history);
        r.seconds = seconds_since(job_start);
        std::lock_guard lock(mutex);
        if (on_done) on_done(r);
      } catch (...) {
        std::lock_guard lock(mutex);
        if (!failure) failure = std::current_exception();
        next = result.runs.size();
      }
    }
  };

  unsigned jobs = config.jobs ? config.jobs : std::max(1u, std::thread::hardware_concurrency());
  jobs = static_cast<unsigned>(std::min<std::size_t>(jobs, result.runs.size()));
  if (jobs <= 1) {
    worker();
  } else {
    std::vector<std::thread> pool;
    for (unsigned j = 0; j < jobs; ++j) pool.emplace_back(worker);
    for (auto& th : pool) th.join();
  }
  if (failure) std::rethrow_exception(failure);
  result.rows = aggregate(result.runs);
  result.seconds = seconds_since(start);
  return result;
}

void write_trials_csv(const std::filesystem::path& path, const std::vector<TrialResult>& runs) {
  std::ostringstream out;
  out << "method,trial,seed,clean_acc,core_acc,spurious_acc,rcs\n";
  for (const auto& r : runs)
    out << to_string(r.method) << ',' << r.trial << ',' << r.seed << ',' << format_number(r.clean) << ','
        << format_number(r.core) << ',' << format_number(r.spurious) << ',' << format_number(r.rcs) << '\n';
  write_text_file(path, out.str());
}

std::vector<TrialResult> read_trials_csv(const std::filesystem::path& path) {
  const std::string op = "read_trials_csv(" + path.string() + ")";
  std::stringstream in(read_text_file(path));
  std::string line;
  if (!std::getline(in, line) || line != "method,trial,seed,clean_acc,core_acc,spurious_acc,rcs")
    throw Error(op, "unexpected header");
  std::vector<TrialResult> runs;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    const auto cells = split_csv_line(line);
    if (cells.size() != 7) throw Error(op, "expected 7 columns in '" + line + "'");
    TrialResult r;
    r.method = method_from_string(cells[0]);
    r.trial = static_cast<std::size_t>(parse_number(cells[1], op));
    r.seed = std::stoull(cells[2]);
    r.clean = parse_number(cells[3], op);
    r.core = parse_number(cells[4], op);
    r.spurious = parse_number(cells[5], op);
    r.rcs = parse_number(cells[6], op);
    runs.push_back(r);
  }
  return runs;
}

void write_table1_csv(const std::filesystem::path& path, const std::vector<ComparisonRow>& rows) {
  std::ostringstream out;
  out << "method,trials,clean_mean,clean_sd,core_mean,core_sd,spurious_mean,spurious_sd,rcs_mean,rcs_sd\n";
  for (const auto& r : rows) {
    out << to_string(r.method) << ',' << r.trials;
    for (const Stat* s : {&r.clean, &r.core, &r.spurious, &r.rcs})
      out << ',' << format_number(s->mean) << ',' << format_number(s->sd);
    out << '\n';
  }
  write_text_file(path, out.str());
}

void write_table1_md(const std::filesystem::path& path, const std::vector<ComparisonRow>& rows) {
  std::ostringstream out;
  const std::size_t trials = rows.empty() ? 0 : rows.front().trials;
  out << "| Training Procedure | Clean Accuracy (↑) | Core Accuracy (↑) | Spurious Accuracy (↓) | RCS (↑) |\n"
      << "|---|---|---|---|---|\n";
  for (const auto& r : rows) {
    char rcs_cell[64];
    std::snprintf(rcs_cell, sizeof rcs_cell, "%.3f ± %.3f", r.rcs.mean, r.rcs.sd);
    out << "| " << row_title(r.method) << " | " << percent(r.clean) << " | " << percent(r.core) << " | "
        << percent(r.spurious) << " | " << rcs_cell << " |\n";
  }
  out << "\nMean ± sample standard deviation over " << trials << " trial" << (trials == 1 ? "" : "s") << ".\n";
  write_text_file(path, out.str());
}

}  // namespace corm
