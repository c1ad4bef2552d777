// SPDX-License-Identifier: Apache-2.0
#include "corm/metrics.hpp"

#include "corm/corruption.hpp"
#include "corm/error.hpp"
#include "corm/io.hpp"
#include "corm/rng.hpp"

#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <map>
#include <numeric>
#include <sstream>

namespace corm {

namespace {

constexpr std::size_t kChunk = 128;

void check_accuracy(const char* op, double a) {
  if (!(a >= 0.0 && a <= 1.0)) throw Error(op, "accuracy " + format_number(a) + " outside [0, 1]");
}

SoftMask channel_nam(const Tensor& maps, std::size_t n, std::size_t feature, std::size_t height, std::size_t width) {
  const auto& d = maps.dims();
  const std::size_t plane = d[2] * d[3];
  const auto first = maps.data().begin() + static_cast<std::ptrdiff_t>((n * d[1] + feature) * plane);
  return nam(Tensor({d[2], d[3]}, std::vector<double>(first, first + static_cast<std::ptrdiff_t>(plane))), height,
             width);
}

double mask_share(const SoftMask& weights, const SoftMask& region) {
  const double total = weights.values().sum();
  return total > 0 ? (weights.values() * region.values()).sum() / total : 0.0;
}

nlohmann::ordered_json optional_json(const std::optional<double>& v) {
  return v ? nlohmann::ordered_json(*v) : nlohmann::ordered_json(nullptr);
}

}  // namespace

ClassFeatureMap ground_truth_feature_map(const Dataset& dataset) {
  ClassFeatureMap map(dataset.classes);
  for (std::size_t c = 0; c < dataset.classes; ++c) map[c].label = c;
  for (std::size_t i = 0; i < dataset.size(); ++i) {
    const auto& s = dataset.samples[i];
    for (const auto& m : s.core_masks) {
      auto& regions = map[s.label].core;
      auto it = std::find_if(regions.begin(), regions.end(), [&](const auto& r) { return r.feature == m.feature; });
      if (it == regions.end()) it = regions.insert(regions.end(), FeatureRegion{m.feature, {}, {}});
      it->samples.push_back(i);
      it->masks.push_back(m.mask);
    }
  }
  return map;
}

void EvalProtocol::validate() const {
  if (!(sigma >= 0.0)) throw Error("eval_protocol", "sigma must be >= 0");
  if (dilate_k < 0 || dilate_iters < 0) throw Error("eval_protocol", "dilation k and iterations must be >= 0");
  if (draws < 1) throw Error("eval_protocol", "draws must be >= 1");
}

EvaluationInputs evaluation_inputs(const Tensor& image, const SoftMask& dilated_core, double sigma, Rng& rng) {
  const Tensor z = draw_standard_normal(image.dims(), rng);
  return {apply_noise(image, complement(dilated_core), sigma, z), apply_noise(image, dilated_core, sigma, z)};
}

MetricReport core_spurious_accuracy(const ClassifierModel& model, const Dataset& dataset, const ClassFeatureMap& map,
                                    const EvalProtocol& protocol) {
  protocol.validate();
  const char* op = "core_spurious_accuracy";
  MetricReport report;
  report.protocol = protocol;
  report.clean_accuracy = evaluate_clean(model, dataset);
  Rng rng(protocol.seed);

  for (const auto& entry : map) {
    std::map<std::size_t, std::vector<SoftMask>> dc;
    for (const auto& region : entry.core) {
      if (region.samples.size() != region.masks.size())
        throw Error(op, "feature '" + region.feature + "' has mismatched samples and masks");
      for (std::size_t n = 0; n < region.samples.size(); ++n) {
        if (region.samples[n] >= dataset.size()) throw Error(op, "sample index out of range");
        dc[region.samples[n]].push_back(region.masks[n]);
      }
    }
    if (dc.empty()) {
      report.excluded.push_back(entry.label);
      continue;
    }

    std::vector<std::pair<std::size_t, std::vector<SoftMask>>> members(dc.begin(), dc.end());
    std::size_t clean_hits = 0, core_hits = 0, spurious_hits = 0;
    for (std::size_t start = 0; start < members.size(); start += kChunk) {
      const std::size_t count = std::min(kChunk, members.size() - start);
      std::vector<std::size_t> ids;
      for (std::size_t n = 0; n < count; ++n) ids.push_back(members[start + n].first);
      const Dims& d = dataset.samples[ids[0]].image.dims();
      const std::size_t stride = d[0] * d[1] * d[2];
      const std::size_t rows = count * static_cast<std::size_t>(protocol.draws);
      Tensor core_in = Tensor::uninitialized({rows, d[0], d[1], d[2]});
      Tensor spur_in = Tensor::uninitialized({rows, d[0], d[1], d[2]});
      std::size_t row = 0;
      for (std::size_t n = 0; n < count; ++n) {
        const Tensor& x = dataset.samples[ids[n]].image;
        const SoftMask dilated = dilate(consolidate(members[start + n].second), protocol.dilate_k, protocol.dilate_iters);
        for (int draw = 0; draw < protocol.draws; ++draw, ++row) {
          const auto in = evaluation_inputs(x, dilated, protocol.sigma, rng);
          const auto offset = static_cast<std::ptrdiff_t>(row * stride);
          std::copy(in.core.data().begin(), in.core.data().end(), core_in.data().begin() + offset);
          std::copy(in.spurious.data().begin(), in.spurious.data().end(), spur_in.data().begin() + offset);
        }
      }
      const auto clean_pred = predict(model, stack_images(dataset, ids));
      const auto core_pred = predict(model, core_in);
      const auto spur_pred = predict(model, spur_in);
      for (std::size_t n = 0; n < count; ++n) {
        const std::size_t y = dataset.samples[ids[n]].label;
        clean_hits += clean_pred[n] == y;
        for (std::size_t k = 0; k < static_cast<std::size_t>(protocol.draws); ++k) {
          core_hits += core_pred[n * protocol.draws + k] == y;
          spurious_hits += spur_pred[n * protocol.draws + k] == y;
        }
      }
    }
    const double total = static_cast<double>(members.size()) * protocol.draws;
    report.classes.push_back({entry.label, members.size(),
                              static_cast<double>(clean_hits) / static_cast<double>(members.size()),
                              static_cast<double>(core_hits) / total, static_cast<double>(spurious_hits) / total});
  }
  if (report.classes.empty()) throw Error(op, "DC(i) is empty for every class");

  const double classes = static_cast<double>(report.classes.size());
  for (const auto& c : report.classes) {
    report.core_accuracy += c.core;
    report.spurious_accuracy += c.spurious;
    report.clean_accuracy_dc += c.clean;
  }
  report.core_accuracy /= classes;
  report.spurious_accuracy /= classes;
  report.clean_accuracy_dc /= classes;
  report.mean_accuracy = (report.core_accuracy + report.spurious_accuracy) / 2.0;
  report.rcs = rcs(report.core_accuracy, report.spurious_accuracy);
  return report;
}

double rcs(double acc_c, double acc_s) {
  check_accuracy("rcs", acc_c);
  check_accuracy("rcs", acc_s);
  const double mean = (acc_c + acc_s) / 2.0;
  const double max_gap = 2.0 * std::min(mean, 1.0 - mean);
  return max_gap > 0 ? (acc_c - acc_s) / max_gap : 0.0;
}

double accuracy(std::span<const std::size_t> predictions, std::span<const std::size_t> labels) {
  if (predictions.size() != labels.size()) throw Error("accuracy", "predictions and labels differ in length");
  if (labels.empty()) throw Error("accuracy", "no samples");
  std::size_t hits = 0;
  for (std::size_t n = 0; n < labels.size(); ++n) hits += predictions[n] == labels[n];
  return static_cast<double>(hits) / static_cast<double>(labels.size());
}

double evaluate_clean(const ClassifierModel& model, const Dataset& dataset) {
  const auto outputs = evaluate_outputs(model, dataset);
  std::vector<std::size_t> labels;
  for (const auto& s : dataset.samples) labels.push_back(s.label);
  return accuracy(outputs.predictions, labels);
}

FeatureImportance importance_from(std::span<const double> rbar, std::span<const double> w_row, std::size_t label) {
  if (rbar.size() != w_row.size() || rbar.empty())
    throw Error("feature_importance", "rbar and weight row must have the same non-zero length");
  FeatureImportance fi;
  fi.label = label;
  for (std::size_t j = 0; j < rbar.size(); ++j) fi.values.push_back(rbar[j] * w_row[j]);
  fi.order.resize(rbar.size());
  std::iota(fi.order.begin(), fi.order.end(), 0);
  std::stable_sort(fi.order.begin(), fi.order.end(),
                   [&](std::size_t a, std::size_t b) { return fi.values[a] > fi.values[b]; });
  fi.ranks.resize(rbar.size());
  for (std::size_t r = 0; r < fi.order.size(); ++r) fi.ranks[fi.order[r]] = r + 1;
  return fi;
}

FeatureImportance feature_importance(const ClassifierModel& model, const ModelOutputs& outputs, std::size_t label) {
  if (label >= model.classes()) throw Error("feature_importance", "class out of range");
  const std::size_t f = model.features();
  std::vector<double> rbar(f, 0.0);
  std::size_t count = 0;
  for (std::size_t n = 0; n < outputs.predictions.size(); ++n) {
    if (outputs.predictions[n] != label) continue;
    ++count;
    for (std::size_t j = 0; j < f; ++j) rbar[j] += outputs.features[n * f + j];
  }
  if (count == 0) throw Error("feature_importance", "no samples predicted as class " + std::to_string(label));
  for (auto& v : rbar) v /= static_cast<double>(count);
  return importance_from(rbar, std::span<const double>(model.dense_weight.data().data() + label * f, f), label);
}

FeatureImportance feature_importance(const ClassifierModel& model, const Dataset& dataset, std::size_t label) {
  return feature_importance(model, evaluate_outputs(model, dataset), label);
}

double feature_value(const Tensor& r, std::span<const std::size_t> samples, std::span<const std::size_t> features) {
  if (samples.empty() || features.empty()) throw Error("feature_value", "samples and features must be non-empty");
  if (r.rank() != 2) throw Error("feature_value", "r must be N x F");
  const std::size_t f = r.dim(1);
  double total = 0;
  for (auto j : features) {
    if (j >= f) throw Error("feature_value", "feature out of range");
    double per_feature = 0;
    for (auto n : samples) {
      if (n >= r.dim(0)) throw Error("feature_value", "sample out of range");
      per_feature += r[n * f + j];
    }
    total += per_feature / static_cast<double>(samples.size());
  }
  return total / static_cast<double>(features.size());
}

std::optional<double> relative_difference(double v_mc, double v_cc) {
  const double top = std::max(v_mc, v_cc);
  if (!(top > 0)) return std::nullopt;
  return (v_mc - v_cc) / top;
}

std::string_view to_string(Quadrant q) {
  switch (q) {
    case Quadrant::Hurt: return "hurt";
    case Quadrant::Helped: return "helped";
    case Quadrant::Other: return "other";
  }
  return "other";
}

Quadrant quadrant(double cfv_difference, double sfv_difference) {
  if (sfv_difference > 0 && cfv_difference < 0) return Quadrant::Hurt;
  if (sfv_difference < 0 && cfv_difference > 0) return Quadrant::Helped;
  return Quadrant::Other;
}

ErrorAnalysisReport error_analysis(const ModelOutputs& outputs, std::span<const std::size_t> labels,
                                   std::size_t classes, const FeatureRoles& roles) {
  if (outputs.predictions.size() != labels.size()) throw Error("error_analysis", "one label per prediction required");
  ErrorAnalysisReport report;
  for (std::size_t i = 0; i < classes; ++i) {
    ClassErrorAnalysis a;
    a.label = i;
    std::vector<std::size_t> cc, mc;
    for (std::size_t n = 0; n < labels.size(); ++n) {
      if (outputs.predictions[n] != i) continue;
      (labels[n] == i ? cc : mc).push_back(n);
    }
    a.cc_count = cc.size();
    a.mc_count = mc.size();
    static const std::vector<std::size_t> none;
    const auto& core = i < roles.core.size() ? roles.core[i] : none;
    const auto& spurious = i < roles.spurious.size() ? roles.spurious[i] : none;
    if (!core.empty() && !cc.empty()) a.cfv_cc = feature_value(outputs.features, cc, core);
    if (!core.empty() && !mc.empty()) a.cfv_mc = feature_value(outputs.features, mc, core);
    if (!spurious.empty() && !cc.empty()) a.sfv_cc = feature_value(outputs.features, cc, spurious);
    if (!spurious.empty() && !mc.empty()) a.sfv_mc = feature_value(outputs.features, mc, spurious);
    if (a.cfv_cc && a.cfv_mc) a.cfv_difference = relative_difference(*a.cfv_mc, *a.cfv_cc);
    if (a.sfv_cc && a.sfv_mc) a.sfv_difference = relative_difference(*a.sfv_mc, *a.sfv_cc);
    if (a.cfv_difference && a.sfv_difference) {
      a.tag = quadrant(*a.cfv_difference, *a.sfv_difference);
      switch (*a.tag) {
        case Quadrant::Hurt: ++report.hurt; break;
        case Quadrant::Helped: ++report.helped; break;
        case Quadrant::Other: ++report.other; break;
      }
      if (*a.cfv_difference * *a.sfv_difference < 0) ++report.opposite_sign;
    } else {
      ++report.missing;
    }
    report.classes.push_back(std::move(a));
  }
  return report;
}

ErrorAnalysisReport error_analysis(const ClassifierModel& model, const Dataset& dataset, const FeatureRoles& roles) {
  std::vector<std::size_t> labels;
  for (const auto& s : dataset.samples) labels.push_back(s.label);
  return error_analysis(evaluate_outputs(model, dataset), labels, dataset.classes, roles);
}

std::vector<FeatureAnnotation> annotate_features(const ClassifierModel& model, const Dataset& dataset, std::size_t k,
                                                 std::size_t top) {
  const auto outputs = evaluate_outputs(model, dataset);
  const std::size_t f = model.features();
  std::vector<FeatureAnnotation> out;
  for (std::size_t i = 0; i < dataset.classes; ++i) {
    if (std::find(outputs.predictions.begin(), outputs.predictions.end(), i) == outputs.predictions.end()) continue;
    const auto importance = feature_importance(model, outputs, i);
    const auto members = dataset.indices_of_class(i);
    for (std::size_t r = 0; r < std::min(top, f); ++r) {
      FeatureAnnotation a;
      a.label = i;
      a.feature = importance.order[r];
      a.rank = r + 1;
      std::vector<double> values;
      for (auto n : members) values.push_back(outputs.features[n * f + a.feature]);
      a.samples = top_k_by_value(members, values, std::min(k, members.size()));
      const Tensor maps = forward_batch(model, stack_images(dataset, a.samples)).feature_maps;
      for (std::size_t n = 0; n < a.samples.size(); ++n) {
        const auto& s = dataset.samples[a.samples[n]];
        const SoftMask m = channel_nam(maps, n, a.feature, s.image.dim(1), s.image.dim(2));
        a.core_overlap += mask_share(m, s.core_union());
        a.spurious_overlap += mask_share(m, s.spurious_union());
      }
      a.core_overlap /= static_cast<double>(a.samples.size());
      a.spurious_overlap /= static_cast<double>(a.samples.size());
      a.role = a.core_overlap > a.spurious_overlap ? "core" : a.spurious_overlap > a.core_overlap ? "spurious" : "neither";
      out.push_back(std::move(a));
    }
  }
  return out;
}

FeatureRoles roles_from(const std::vector<FeatureAnnotation>& annotations, std::size_t classes) {
  FeatureRoles roles{std::vector<std::vector<std::size_t>>(classes), std::vector<std::vector<std::size_t>>(classes)};
  for (const auto& a : annotations) {
    if (a.label >= classes) throw Error("roles_from", "annotation class out of range");
    if (a.role == "core") roles.core[a.label].push_back(a.feature);
    if (a.role == "spurious") roles.spurious[a.label].push_back(a.feature);
  }
  return roles;
}

ClassFeatureMap nam_feature_map(const ClassifierModel& model, const Dataset& dataset,
                                const std::vector<FeatureAnnotation>& annotations) {
  ClassFeatureMap map(dataset.classes);
  for (std::size_t c = 0; c < dataset.classes; ++c) map[c].label = c;
  for (const auto& a : annotations) {
    if (a.role != "core") continue;
    if (a.label >= dataset.classes) throw Error("nam_feature_map", "annotation class out of range");
    FeatureRegion region{"neuron:" + std::to_string(a.feature), a.samples, {}};
    const Tensor maps = forward_batch(model, stack_images(dataset, a.samples)).feature_maps;
    for (std::size_t n = 0; n < a.samples.size(); ++n) {
      const auto& img = dataset.samples[a.samples[n]].image;
      region.masks.push_back(channel_nam(maps, n, a.feature, img.dim(1), img.dim(2)));
    }
    map[a.label].core.push_back(std::move(region));
  }
  return map;
}

void write_metrics_csv(const std::filesystem::path& path, const MetricReport& report) {
  std::ostringstream out;
  out << "label,samples,clean_acc,core_acc,spurious_acc,mean_acc,rcs\n";
  std::size_t total = 0;
  for (const auto& c : report.classes) {
    total += c.samples;
    out << c.label << ',' << c.samples << ',' << format_number(c.clean) << ',' << format_number(c.core) << ','
        << format_number(c.spurious) << ',' << format_number((c.core + c.spurious) / 2.0) << ','
        << format_number(rcs(c.core, c.spurious)) << '\n';
  }
  out << "AGGREGATE," << total << ',' << format_number(report.clean_accuracy_dc) << ','
      << format_number(report.core_accuracy) << ',' << format_number(report.spurious_accuracy) << ','
      << format_number(report.mean_accuracy) << ',' << format_number(report.rcs) << '\n';
  write_text_file(path, out.str());
}

void write_metrics_json(const std::filesystem::path& path, const MetricReport& report) {
  nlohmann::ordered_json j;
  j["schema"] = "corm-metrics";
  j["version"] = 1;
  const auto& p = report.protocol;
  j["protocol"] = {{"sigma", p.sigma}, {"dilate_k", p.dilate_k}, {"dilate_iters", p.dilate_iters},
                   {"draws", p.draws}, {"seed", p.seed}};
  j["aggregate"] = {{"clean_accuracy", report.clean_accuracy}, {"clean_accuracy_dc", report.clean_accuracy_dc},
                    {"core_accuracy", report.core_accuracy},   {"spurious_accuracy", report.spurious_accuracy},
                    {"mean_accuracy", report.mean_accuracy},   {"rcs", report.rcs}};
  j["classes"] = nlohmann::ordered_json::array();
  for (const auto& c : report.classes)
    j["classes"].push_back({{"label", c.label},
                            {"samples", c.samples},
                            {"clean_accuracy", c.clean},
                            {"core_accuracy", c.core},
                            {"spurious_accuracy", c.spurious}});
  j["excluded_classes"] = report.excluded;
  write_text_file(path, j.dump(2) + "\n");
}

void write_analysis_json(const std::filesystem::path& path, const ErrorAnalysisReport& report,
                         const std::vector<FeatureAnnotation>& annotations) {
  nlohmann::ordered_json j;
  j["schema"] = "corm-analysis";
  j["version"] = 1;
  j["counts"] = {{"hurt", report.hurt},   {"helped", report.helped},
                 {"other", report.other}, {"missing", report.missing},
                 {"opposite_sign", report.opposite_sign}};
  j["classes"] = nlohmann::ordered_json::array();
  for (const auto& c : report.classes)
    j["classes"].push_back({{"label", c.label},
                            {"cc_count", c.cc_count},
                            {"mc_count", c.mc_count},
                            {"cfv_cc", optional_json(c.cfv_cc)},
                            {"cfv_mc", optional_json(c.cfv_mc)},
                            {"sfv_cc", optional_json(c.sfv_cc)},
                            {"sfv_mc", optional_json(c.sfv_mc)},
                            {"relative_cfv_difference", optional_json(c.cfv_difference)},
                            {"relative_sfv_difference", optional_json(c.sfv_difference)},
                            {"quadrant", c.tag ? nlohmann::ordered_json(to_string(*c.tag)) : "missing"}});
  j["annotations"] = nlohmann::ordered_json::array();
  for (const auto& a : annotations)
    j["annotations"].push_back({{"label", a.label},
                                {"feature", a.feature},
                                {"rank", a.rank},
                                {"role", a.role},
                                {"core_overlap", a.core_overlap},
                                {"spurious_overlap", a.spurious_overlap},
                                {"samples", a.samples}});
  write_text_file(path, j.dump(2) + "\n");
}

}  // namespace corm
