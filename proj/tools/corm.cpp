// SPDX-License-Identifier: Apache-2.0
// corm: dataset generation, training, evaluation and analysis front end.
//
// Exit status: 0 on success, 2 for flag or usage errors, 1 for runtime
// failures. Defaults marked [paper] follow the published recipe; [toolkit]
// defaults are this implementation's own choices.
#include "corm/error.hpp"
#include "corm/experiments.hpp"
#include "corm/io.hpp"
#include "corm/metrics.hpp"
#include "corm/model.hpp"
#include "corm/synthdata.hpp"
#include "corm/trainer.hpp"

#include <CLI11.hpp>
#include <json.hpp>

#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <iostream>
#include <optional>
#include <string>

namespace fs = std::filesystem;
using namespace corm;
using nlohmann::ordered_json;

namespace {

struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Flags shared by several subcommands.
struct Options {
  std::string out, data, model, annotator;
  std::optional<std::uint64_t> seed;

  DatasetSpec spec;

  std::string method = "erm";
  LossConfig loss;
  TrainConfig train;
  std::string schedule = "linear";
  std::size_t features = 16, hidden = 8;
  std::string nonlinearity = "relu";

  EvalProtocol eval;
  std::string masks = "ground-truth";
  std::size_t top_k = 0;  // 0: 20% of the class size
  std::size_t top = 5;

  std::optional<std::size_t> viz_class, viz_feature, viz_sample;
  AttackSettings attack;

  std::size_t trials = 4;
  unsigned jobs = 0;
  bool full_core_masks = false;
};

std::string paper(const std::string& text) { return text + " [paper]"; }
std::string toolkit(const std::string& text) { return text + " [toolkit]"; }

std::uint64_t resolve_seed(const Options& o) {
  if (o.seed) return *o.seed;
  if (const char* env = std::getenv("CORM_SEED")) {
    try {
      std::size_t used = 0;
      const std::string text(env);
      const auto v = std::stoull(text, &used);
      if (used != text.size()) throw std::invalid_argument(text);
      return v;
    } catch (const std::exception&) {
      throw UsageError("CORM_SEED must be a non-negative integer, got '" + std::string(env) + "'");
    }
  }
  return 0;
}

ordered_json spec_json(const DatasetSpec& s) {
  return {{"classes", s.classes},         {"train_count", s.train_count}, {"test_count", s.test_count},
          {"image_size", s.image_size},   {"q_train", s.q_train},         {"q_test", s.resolved_q_test()},
          {"glyph_size", s.glyph_size},   {"patch_size", s.patch_size},   {"background", s.background},
          {"glyph_level", s.glyph_level}, {"glyph_jitter", s.glyph_jitter}, {"seed", s.seed}};
}

ordered_json loss_json(const LossConfig& l) {
  return {{"method", to_string(l.method)}, {"sigma", l.sigma}, {"p", l.p}, {"lambda_sal", l.lambda_sal},
          {"sal_on_noised", l.sal_on_noised}};
}

ordered_json train_json(const TrainConfig& t) {
  return {{"epochs", t.epochs},       {"batch_size", t.batch_size},         {"lr_start", t.lr_start},
          {"lr_end", t.lr_end},       {"momentum", t.momentum},             {"schedule", to_string(t.schedule)},
          {"seed", t.seed},           {"eval_every", t.eval_every},         {"loss", loss_json(t.loss)}};
}

ordered_json eval_json(const EvalProtocol& e) {
  return {{"sigma", e.sigma}, {"dilate_k", e.dilate_k}, {"dilate_iters", e.dilate_iters}, {"draws", e.draws},
          {"seed", e.seed}};
}

void write_echo(const Options& o, const std::string& command, ordered_json resolved) {
  ordered_json echo;
  echo["command"] = command;
  echo["out"] = o.out;
  for (auto& [key, value] : resolved.items()) echo[key] = value;
  write_text_file(fs::path(o.out) / "config-echo.json", echo.dump(2) + "\n");
}

// A dataset directory, or a gen-data output root holding `split`.
Dataset open_dataset(const std::string& dir, const std::string& split) {
  const fs::path root(dir);
  if (fs::exists(root / "manifest.json")) return load_dataset(root);
  if (fs::exists(root / split / "manifest.json")) return load_dataset(root / split);
  throw Error("open_dataset(" + dir + ")", "no manifest.json here or in " + split + "/");
}

std::size_t resolve_k(const Options& o, const Dataset& d) {
  if (o.top_k > 0) return o.top_k;
  std::size_t smallest = d.size();
  for (std::size_t c = 0; c < d.classes; ++c) {
    const auto n = d.indices_of_class(c).size();
    if (n > 0) smallest = std::min(smallest, n);
  }
  return std::max<std::size_t>(1, smallest / 5);
}

void add_out(CLI::App* sub, Options& o) {
  sub->add_option("--out", o.out, "Output directory")->required();
}

void add_seed(CLI::App* sub, Options& o) {
  sub->add_option("--seed", o.seed, toolkit("Random seed; overrides CORM_SEED (default 0)"));
}

void add_dataset_flags(CLI::App* sub, Options& o) {
  auto& s = o.spec;
  sub->add_option("--classes", s.classes, toolkit("Number of classes (2-8)"))->capture_default_str();
  sub->add_option("--train", s.train_count, toolkit("Training samples"))->capture_default_str();
  sub->add_option("--test", s.test_count, toolkit("Test samples"))->capture_default_str();
  sub->add_option("--image-size", s.image_size, toolkit("Image height and width"))->capture_default_str();
  sub->add_option("--q-train", s.q_train, toolkit("P(patch matches label), train split"))->capture_default_str();
  sub->add_option("--q-test", s.q_test, toolkit("P(patch matches label), test split; negative means 1/C"))
      ->capture_default_str();
  sub->add_option("--glyph-size", s.glyph_size, toolkit("Core glyph box size"))->capture_default_str();
  sub->add_option("--patch-size", s.patch_size, toolkit("Spurious patch size"))->capture_default_str();
  sub->add_option("--background", s.background, toolkit("Background noise amplitude"))->capture_default_str();
  sub->add_option("--glyph-level", s.glyph_level, toolkit("Peak glyph intensity"))->capture_default_str();
  sub->add_option("--glyph-jitter", s.glyph_jitter, toolkit("Relative glyph intensity jitter"))
      ->capture_default_str();
}

void add_training_flags(CLI::App* sub, Options& o, bool with_method) {
  if (with_method)
    sub->add_option("--method", o.method, "Training method: erm, noise, salreg or corm")
        ->check(CLI::IsMember({"erm", "noise", "salreg", "corm"}))
        ->capture_default_str();
  sub->add_option("--sigma", o.loss.sigma, paper("Training noise standard deviation"))->capture_default_str();
  sub->add_option("--p", o.loss.p, paper("Probability a batch is noised"))->capture_default_str();
  sub->add_option("--lambda-sal", o.loss.lambda_sal, toolkit("Saliency penalty weight"))->capture_default_str();
  sub->add_option("--sal-on-noised", o.loss.sal_on_noised, toolkit("Penalise gradients on the noised input"))
      ->capture_default_str();
  sub->add_option("--epochs", o.train.epochs, paper("Training epochs"))->capture_default_str();
  sub->add_option("--batch-size", o.train.batch_size, toolkit("Mini-batch size"))->capture_default_str();
  sub->add_option("--lr-start", o.train.lr_start, paper("Initial learning rate"))->capture_default_str();
  sub->add_option("--lr-end", o.train.lr_end, paper("Final learning rate"))->capture_default_str();
  sub->add_option("--momentum", o.train.momentum, toolkit("SGD momentum"))->capture_default_str();
  sub->add_option("--schedule", o.schedule, toolkit("Learning-rate shape: linear or triangular"))
      ->check(CLI::IsMember({"linear", "triangular"}))
      ->capture_default_str();
  sub->add_option("--features", o.features, toolkit("Neural features F (second conv width)"))->capture_default_str();
  sub->add_option("--hidden", o.hidden, toolkit("First conv width"))->capture_default_str();
  sub->add_option("--nonlinearity", o.nonlinearity, toolkit("relu or softplus"))
      ->check(CLI::IsMember({"relu", "softplus"}))
      ->capture_default_str();
}

void add_eval_flags(CLI::App* sub, Options& o, int default_iters, bool iters_from_paper,
                    const std::string& sigma_flag = "--sigma") {
  o.eval.dilate_iters = default_iters;
  sub->add_option(sigma_flag, o.eval.sigma, paper("Evaluation noise standard deviation"))->capture_default_str();
  sub->add_option("--dilate-k", o.eval.dilate_k, paper("Dilation half-width k"))->capture_default_str();
  const std::string iters_text = "Dilation iterations";
  sub->add_option("--dilate-iters", o.eval.dilate_iters,
                  iters_from_paper ? paper(iters_text) : toolkit(iters_text + " (rescaled to 32-pixel images)"))
      ->capture_default_str();
  sub->add_option("--draws", o.eval.draws, toolkit("Noise draws per image"))->capture_default_str();
}

void apply_training(Options& o) {
  o.train.loss = o.loss;
  o.train.loss.method = method_from_string(o.method);
  o.train.schedule = lr_schedule_from_string(o.schedule);
}

// --- subcommands -----------------------------------------------------------

void cmd_gen_data(Options& o) {
  o.spec.seed = resolve_seed(o);
  const auto data = generate(o.spec);
  save_dataset(fs::path(o.out) / "train", data.train);
  save_dataset(fs::path(o.out) / "test", data.test);
  write_echo(o, "gen-data", {{"dataset", spec_json(o.spec)}});
  std::printf("wrote %zu train and %zu test samples to %s\n", data.train.size(), data.test.size(), o.out.c_str());
}

void cmd_train(Options& o) {
  apply_training(o);
  o.train.seed = resolve_seed(o);
  const auto data = open_dataset(o.data, "train");
  const auto initial = init_model(o.train.seed, data.samples.at(0).image.dim(0), o.features, data.classes,
                                  nonlinearity_from_string(o.nonlinearity), o.hidden);
  const auto result = train(initial, data, o.train);
  save_checkpoint(fs::path(o.out) / "checkpoint", result.model);
  write_history_csv(fs::path(o.out) / "history.csv", result.history);
  write_echo(o, "train",
             {{"data", o.data},
              {"model", {{"features", o.features}, {"hidden", o.hidden}, {"nonlinearity", o.nonlinearity},
                         {"init_seed", o.train.seed}}},
              {"train", train_json(o.train)},
              {"history_eval", eval_json(o.train.eval_protocol)}});
  const auto& last = result.history.back();
  std::printf("trained %s for %d epochs: final mean loss %s\n", o.method.c_str(), o.train.epochs,
              format_number(last.mean_loss).c_str());
}

ClassFeatureMap feature_map_for(const Options& o, const ClassifierModel& model, const Dataset& data,
                                std::size_t k) {
  if (o.masks == "ground-truth") return ground_truth_feature_map(data);
  const ClassifierModel annotator = o.annotator.empty() ? model : load_checkpoint(o.annotator);
  return nam_feature_map(annotator, data, annotate_features(annotator, data, k, o.top));
}

void cmd_eval(Options& o) {
  o.eval.seed = resolve_seed(o);
  const auto model = load_checkpoint(o.model);
  const auto data = open_dataset(o.data, "test");
  const std::size_t k = resolve_k(o, data);
  const auto report = core_spurious_accuracy(model, data, feature_map_for(o, model, data, k), o.eval);
  write_metrics_csv(fs::path(o.out) / "metrics.csv", report);
  write_metrics_json(fs::path(o.out) / "metrics.json", report);
  write_echo(o, "eval",
             {{"model", o.model},
              {"data", o.data},
              {"masks", o.masks},
              {"annotator", o.annotator.empty() ? o.model : o.annotator},
              {"k", k},
              {"top", o.top},
              {"eval", eval_json(o.eval)}});
  std::printf("clean %.4f  core %.4f  spurious %.4f  RCS %.4f\n", report.clean_accuracy, report.core_accuracy,
              report.spurious_accuracy, report.rcs);
  if (!report.excluded.empty()) std::printf("%zu classes without core features excluded\n", report.excluded.size());
}

void cmd_analyze(Options& o) {
  const auto model = load_checkpoint(o.model);
  const auto data = open_dataset(o.data, "test");
  const std::size_t k = resolve_k(o, data);
  const auto annotations = annotate_features(model, data, k, o.top);
  const auto report = error_analysis(model, data, roles_from(annotations, data.classes));
  write_analysis_json(fs::path(o.out) / "analysis.json", report, annotations);
  write_echo(o, "analyze", {{"model", o.model}, {"data", o.data}, {"k", k}, {"top", o.top}});
  std::printf("hurt %zu  helped %zu  other %zu  missing %zu  opposite-sign %zu\n", report.hurt, report.helped,
              report.other, report.missing, report.opposite_sign);
}

void cmd_rank_features(Options& o) {
  const auto model = load_checkpoint(o.model);
  const auto data = open_dataset(o.data, "test");
  const auto outputs = evaluate_outputs(model, data);
  std::string csv = "class,rank,feature,importance\n";
  for (std::size_t c = 0; c < data.classes; ++c) {
    if (std::find(outputs.predictions.begin(), outputs.predictions.end(), c) == outputs.predictions.end()) {
      std::printf("class %zu: no samples predicted\n", c);
      continue;
    }
    const auto fi = feature_importance(model, outputs, c);
    std::printf("class %zu:", c);
    for (std::size_t r = 0; r < std::min(o.top, fi.order.size()); ++r) {
      const std::size_t j = fi.order[r];
      csv += std::to_string(c) + "," + std::to_string(r + 1) + "," + std::to_string(j) + "," +
             format_number(fi.values[j]) + "\n";
      std::printf(" #%zu=f%zu(%.4g)", r + 1, j, fi.values[j]);
    }
    std::printf("\n");
  }
  write_text_file(fs::path(o.out) / "feature_ranks.csv", csv);
  write_echo(o, "rank-features", {{"model", o.model}, {"data", o.data}, {"top", o.top}});
}

void cmd_visualize(Options& o) {
  const auto model = load_checkpoint(o.model);
  const auto data = open_dataset(o.data, "test");
  const std::size_t label = o.viz_class.value_or(0);
  const std::size_t feature = o.viz_feature.value_or(0);
  if (label >= data.classes) throw Error("visualize", "class out of range");
  if (feature >= model.features()) throw Error("visualize", "feature out of range");
  std::size_t index = 0;
  if (o.viz_sample) {
    index = *o.viz_sample;
    if (index >= data.size()) throw Error("visualize", "sample out of range");
  } else {
    index = select_top_activations(data, model, label, feature, 1).front();
  }
  const Tensor& image = data.samples[index].image;
  const std::size_t h = image.dim(1), w = image.dim(2);
  auto nam_of = [&](const Tensor& x) {
    const auto maps = forward(model, x).feature_maps;
    const std::size_t plane = maps.dim(1) * maps.dim(2);
    const auto first = maps.data().begin() + static_cast<std::ptrdiff_t>(feature * plane);
    return nam(Tensor({maps.dim(1), maps.dim(2)}, std::vector<double>(first, first + static_cast<std::ptrdiff_t>(plane))),
               h, w);
  };
  const Tensor attacked = feature_attack(model, image, feature, o.attack);
  const fs::path dir = fs::path(o.out) / "viz";
  fs::create_directories(dir);
  const std::string stem = "class" + std::to_string(label) + "_feature" + std::to_string(feature) + "_sample" +
                           std::to_string(index);
  write_ppm(dir / (stem + "_image.ppm"), chw_to_hwc(image));
  write_ppm(dir / (stem + "_heatmap.ppm"), heatmap(chw_to_hwc(image), nam_of(image)));
  write_ppm(dir / (stem + "_attack.ppm"), chw_to_hwc(attacked));
  write_ppm(dir / (stem + "_attack_heatmap.ppm"), heatmap(chw_to_hwc(attacked), nam_of(attacked)));
  write_echo(o, "visualize",
             {{"model", o.model},
              {"data", o.data},
              {"class", label},
              {"feature", feature},
              {"sample", index},
              {"attack", {{"step", o.attack.step}, {"iterations", o.attack.iterations}, {"rho", o.attack.rho}}}});
  std::printf("wrote %s/%s_*.ppm\n", dir.string().c_str(), stem.c_str());
}

void cmd_table1(Options& o) {
  apply_training(o);
  Table1Config config;
  config.data = o.spec;
  config.train = o.train;
  config.train.eval_every = 0;
  config.eval = o.eval;
  config.trials = o.trials;
  config.base_seed = resolve_seed(o);
  config.data.seed = config.base_seed;
  config.eval.seed = config.base_seed;
  config.features = o.features;
  config.hidden = o.hidden;
  config.nonlinearity = nonlinearity_from_string(o.nonlinearity);
  config.full_core_masks = o.full_core_masks;
  config.jobs = o.jobs;
  const std::size_t total = config.trials * config.methods.size();
  std::size_t done = 0;
  const auto result = run_table1(config, [&](const TrialResult& r) {
    std::fprintf(stderr, "[%zu/%zu] %-6s trial %zu: clean %.4f core %.4f spurious %.4f RCS %.4f (%.1f s)\n", ++done,
                 total, std::string(to_string(r.method)).c_str(), r.trial, r.clean, r.core, r.spurious, r.rcs,
                 r.seconds);
  });
  const fs::path out(o.out);
  write_trials_csv(out / "trials.csv", result.runs);
  const auto rows = aggregate(read_trials_csv(out / "trials.csv"));
  write_table1_csv(out / "table1.csv", rows);
  write_table1_md(out / "table1.md", rows);
  for (const auto& r : result.runs)
    write_history_csv(out / "runs" / (std::string(to_string(r.method)) + "_trial" + std::to_string(r.trial)) /
                          "history.csv",
                      r.history);
  write_echo(o, "table1",
             {{"dataset", spec_json(config.data)},
              {"train", train_json(config.train)},
              {"eval", eval_json(config.eval)},
              {"trials", config.trials},
              {"base_seed", config.base_seed},
              {"model", {{"features", o.features}, {"hidden", o.hidden}, {"nonlinearity", o.nonlinearity}}},
              {"full_core_masks", config.full_core_masks}});
  std::printf("%s", read_text_file(out / "table1.md").c_str());
  std::fprintf(stderr, "total %.1f s\n", result.seconds);
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Core risk minimization lab: synthetic data, training, core/spurious evaluation and analysis"};
  app.require_subcommand(1);
  Options o;

  auto* gen = app.add_subcommand("gen-data", "Generate a synthetic dataset with core and spurious masks");
  add_out(gen, o);
  add_seed(gen, o);
  add_dataset_flags(gen, o);

  auto* tr = app.add_subcommand("train", "Train a classifier with erm, noise, salreg or corm");
  add_out(tr, o);
  add_seed(tr, o);
  tr->add_option("--data", o.data, "Dataset directory (or gen-data root; uses train/)")->required();
  add_training_flags(tr, o, true);
  tr->add_option("--eval-every", o.train.eval_every, toolkit("Epochs between history evaluations (0: never)"))
      ->capture_default_str();
  o.train.eval_protocol.dilate_iters = 2;
  tr->add_option("--history-dilate-iters", o.train.eval_protocol.dilate_iters,
                 toolkit("Dilation iterations for the history's core accuracy"))
      ->capture_default_str();

  auto* ev = app.add_subcommand("eval", "Core/spurious accuracy and RCS of a checkpoint");
  add_out(ev, o);
  add_seed(ev, o);
  ev->add_option("--model", o.model, "Checkpoint directory")->required();
  ev->add_option("--data", o.data, "Dataset directory (or gen-data root; uses test/)")->required();
  add_eval_flags(ev, o, 15, true);
  ev->add_option("--masks", o.masks, toolkit("Core masks: ground-truth or nam"))
      ->check(CLI::IsMember({"ground-truth", "nam"}))
      ->capture_default_str();
  ev->add_option("--annotator", o.annotator, toolkit("Checkpoint whose NAMs define core masks (default: --model)"));
  ev->add_option("--k", o.top_k, toolkit("Top-activation images per feature (0: 20% of the class)"))
      ->capture_default_str();
  ev->add_option("--top", o.top, paper("Features annotated per class"))->capture_default_str();

  auto* an = app.add_subcommand("analyze", "Core/spurious feature values on correct and misclassified samples");
  add_out(an, o);
  an->add_option("--model", o.model, "Checkpoint directory")->required();
  an->add_option("--data", o.data, "Dataset directory (or gen-data root; uses test/)")->required();
  an->add_option("--k", o.top_k, toolkit("Top-activation images per feature (0: 20% of the class)"))
      ->capture_default_str();
  an->add_option("--top", o.top, paper("Features annotated per class"))->capture_default_str();

  auto* rk = app.add_subcommand("rank-features", "Per-class neural feature importance ranking");
  add_out(rk, o);
  rk->add_option("--model", o.model, "Checkpoint directory")->required();
  rk->add_option("--data", o.data, "Dataset directory (or gen-data root; uses test/)")->required();
  rk->add_option("--top", o.top, paper("Features listed per class"))->capture_default_str();

  auto* vz = app.add_subcommand("visualize", "Heatmaps and feature-attack images as PPM files");
  add_out(vz, o);
  vz->add_option("--model", o.model, "Checkpoint directory")->required();
  vz->add_option("--data", o.data, "Dataset directory (or gen-data root; uses test/)")->required();
  vz->add_option("--class", o.viz_class, "Class (default 0)");
  vz->add_option("--feature", o.viz_feature, "Neural feature (default 0)");
  vz->add_option("--sample", o.viz_sample, "Sample index (default: top activation in the class)");
  vz->add_option("--attack-step", o.attack.step, toolkit("Feature-attack step size"))->capture_default_str();
  vz->add_option("--attack-iters", o.attack.iterations, toolkit("Feature-attack iterations"))->capture_default_str();
  vz->add_option("--attack-rho", o.attack.rho, toolkit("L2 radius; negative means 0.5 sqrt(element count)"))
      ->capture_default_str();

  auto* t1 = app.add_subcommand("table1", "Four-method comparison averaged over trials");
  add_out(t1, o);
  add_seed(t1, o);
  add_dataset_flags(t1, o);
  t1->get_option("--classes")->default_val(4);
  add_training_flags(t1, o, false);
  add_eval_flags(t1, o, 2, false, "--eval-sigma");
  t1->add_option("--trials", o.trials, paper("Trials per method"))->capture_default_str();
  t1->add_option("--jobs", o.jobs, toolkit("Parallel runs (0: one per hardware thread)"))->capture_default_str();
  t1->add_flag("--full-core-masks", o.full_core_masks, toolkit("Train with all-ones core masks"));

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 2;
  }

  try {
    if (*gen) cmd_gen_data(o);
    if (*tr) cmd_train(o);
    if (*ev) cmd_eval(o);
    if (*an) cmd_analyze(o);
    if (*rk) cmd_rank_features(o);
    if (*vz) cmd_visualize(o);
    if (*t1) cmd_table1(o);
  } catch (const UsageError& e) {
    std::fprintf(stderr, "usage error: %s\n", e.what());
    return 2;
  } catch (const Error& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  }
  return 0;
}
