// SPDX-License-Identifier: Apache-2.0
#pragma once

#include "corm/masks.hpp"
#include "corm/model.hpp"
#include "corm/rng.hpp"
#include "corm/synthdata.hpp"

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

namespace corm {

/// D(i, j): the samples chosen for one core feature of a class, each with
/// that feature's mask on it.
struct FeatureRegion {
  std::string feature;
  std::vector<std::size_t> samples;
  std::vector<SoftMask> masks;  // masks[n] belongs to samples[n]
};

struct ClassFeatures {
  std::size_t label = 0;
  std::vector<FeatureRegion> core;  // empty: the class has no core feature
};

/// C(i) for every class, with the per-sample masks that realise it.
using ClassFeatureMap = std::vector<ClassFeatures>;

/// One region per ground-truth core mask name, covering every sample of the
/// class that carries it.
ClassFeatureMap ground_truth_feature_map(const Dataset& dataset);

struct EvalProtocol {
  double sigma = 0.25;
  int dilate_k = 2;
  int dilate_iters = 15;
  int draws = 1;
  std::uint64_t seed = 0;

  void validate() const;
};

struct ClassAccuracy {
  std::size_t label = 0;
  std::size_t samples = 0;  // |DC(i)|
  double clean = 0, core = 0, spurious = 0;
};

struct MetricReport {
  std::vector<ClassAccuracy> classes;
  std::vector<std::size_t> excluded;  // classes without a core feature
  double core_accuracy = 0, spurious_accuracy = 0, mean_accuracy = 0, rcs = 0;
  double clean_accuracy = 0;     // whole dataset
  double clean_accuracy_dc = 0;  // class mean over DC(i)
  EvalProtocol protocol;
};

struct EvaluationInputs {
  Tensor core;      // x + sigma (z * (1 - c~))
  Tensor spurious;  // x + sigma (z * c~)
};

/// The two corrupted copies of x for one noise draw; c~ is the dilated
/// consolidated core mask.
EvaluationInputs evaluation_inputs(const Tensor& image, const SoftMask& dilated_core, double sigma, Rng& rng);

/// Core accuracy noises outside the dilated consolidated core mask, spurious
/// accuracy noises inside it. Per sample in DC(i) (classes in map order,
/// samples ascending) and per draw, one z of image shape is drawn and shared
/// by both passes. Class means are averaged with equal weight.
MetricReport core_spurious_accuracy(const ClassifierModel& model, const Dataset& dataset, const ClassFeatureMap& map,
                                    const EvalProtocol& protocol);

/// (acc_c - acc_s) / (2 min(a, 1 - a)) with a the mean of the two; 0 when a
/// is 0 or 1.
double rcs(double acc_c, double acc_s);

/// Fraction of argmax-correct predictions over the whole dataset.
double evaluate_clean(const ClassifierModel& model, const Dataset& dataset);
double accuracy(std::span<const std::size_t> predictions, std::span<const std::size_t> labels);

struct FeatureImportance {
  std::size_t label = 0;
  std::vector<double> values;       // IV per feature
  std::vector<std::size_t> ranks;   // 1-based rank of each feature
  std::vector<std::size_t> order;   // features by rank
};

/// IV = rbar * w_row, ranked by descending value with ties to the lower
/// feature index.
FeatureImportance importance_from(std::span<const double> rbar, std::span<const double> w_row, std::size_t label = 0);

/// rbar is the mean r(x) over samples predicted as `label`.
FeatureImportance feature_importance(const ClassifierModel& model, const ModelOutputs& outputs, std::size_t label);
FeatureImportance feature_importance(const ClassifierModel& model, const Dataset& dataset, std::size_t label);

/// Mean over `features` of the mean over `samples` of r_j(x). `r` is N x F.
double feature_value(const Tensor& r, std::span<const std::size_t> samples, std::span<const std::size_t> features);

/// (v_mc - v_cc) / max(v_mc, v_cc); empty when both are <= 0.
std::optional<double> relative_difference(double v_mc, double v_cc);

enum class Quadrant { Hurt, Helped, Other };
std::string_view to_string(Quadrant q);
/// Hurt: SFV difference > 0 and CFV difference < 0. Helped: the reverse.
Quadrant quadrant(double cfv_difference, double sfv_difference);

/// Neural feature indices per class.
struct FeatureRoles {
  std::vector<std::vector<std::size_t>> core;      // C(i)
  std::vector<std::vector<std::size_t>> spurious;  // S(i)
};

struct ClassErrorAnalysis {
  std::size_t label = 0;
  std::size_t cc_count = 0, mc_count = 0;
  std::optional<double> cfv_cc, cfv_mc, sfv_cc, sfv_mc;
  std::optional<double> cfv_difference, sfv_difference;
  std::optional<Quadrant> tag;  // empty when the class is missing
};

struct ErrorAnalysisReport {
  std::vector<ClassErrorAnalysis> classes;
  std::size_t hurt = 0, helped = 0, other = 0, missing = 0;
  std::size_t opposite_sign = 0;  // CFV and SFV differences of opposite sign
};

/// CC_i: samples of class i predicted i. MC_i: other samples predicted i.
/// Classes without a core and a spurious feature, or with an empty CC or MC,
/// are reported as missing.
ErrorAnalysisReport error_analysis(const ModelOutputs& outputs, std::span<const std::size_t> labels,
                                   std::size_t classes, const FeatureRoles& roles);
ErrorAnalysisReport error_analysis(const ClassifierModel& model, const Dataset& dataset, const FeatureRoles& roles);

struct FeatureAnnotation {
  std::size_t label = 0;
  std::size_t feature = 0;
  std::size_t rank = 0;
  double core_overlap = 0;      // mean share of NAM mass on ground-truth core pixels
  double spurious_overlap = 0;  // same for spurious pixels
  std::string role;             // "core", "spurious" or "neither"
  std::vector<std::size_t> samples;  // D(i, j)
};

/// Tags each class's top features (by importance) as core or spurious,
/// comparing mean NAM mass over D(i, j) on the ground-truth masks. Stands in
/// for human annotation.
std::vector<FeatureAnnotation> annotate_features(const ClassifierModel& model, const Dataset& dataset,
                                                 std::size_t k, std::size_t top = 5);
FeatureRoles roles_from(const std::vector<FeatureAnnotation>& annotations, std::size_t classes);

/// C(i) from annotated core features, with D(i, j) the top-K samples and
/// the masks being each sample's NAM of feature j.
ClassFeatureMap nam_feature_map(const ClassifierModel& model, const Dataset& dataset,
                                const std::vector<FeatureAnnotation>& annotations);

void write_metrics_csv(const std::filesystem::path& path, const MetricReport& report);
void write_metrics_json(const std::filesystem::path& path, const MetricReport& report);
void write_analysis_json(const std::filesystem::path& path, const ErrorAnalysisReport& report,
                         const std::vector<FeatureAnnotation>& annotations);

}  // namespace corm
