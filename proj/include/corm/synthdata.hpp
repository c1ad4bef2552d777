// SPDX-License-Identifier: Apache-2.0
#pragma once

#include "corm/losses.hpp"
#include "corm/masks.hpp"
#include "corm/model.hpp"
#include "corm/tensor.hpp"

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace corm {

struct NamedMask {
  std::string feature;  // e.g. "glyph:disk" or "patch:red-stripes"
  SoftMask mask;
};

struct MaskedSample {
  Tensor image;  // 3 x H x W, values in [0, 1]
  std::size_t label = 0;
  std::vector<NamedMask> core_masks;
  std::vector<NamedMask> spurious_masks;

  /// Elementwise max over the core masks; all zeros if there are none.
  SoftMask core_union() const;
  SoftMask spurious_union() const;
};

/// Each image holds one class glyph (the core object) on a faint noise
/// background and one textured patch in a corner. The patch type matches
/// the label with probability q, otherwise it is uniform over the other
/// types.
struct DatasetSpec {
  std::size_t classes = 4;
  std::size_t train_count = 4000;
  std::size_t test_count = 1600;
  std::size_t image_size = 32;
  double q_train = 0.95;
  double q_test = -1.0;  // negative: 1 / classes
  std::size_t glyph_size = 12;
  std::size_t patch_size = 8;
  double background = 0.1;   // background pixels ~ U[0, background]
  double glyph_level = 1.0;   // peak glyph intensity
  double glyph_jitter = 0.3;  // glyph intensity ~ level * U[1 - jitter, 1]
  std::uint64_t seed = 0;

  double resolved_q_test() const { return q_test < 0 ? 1.0 / static_cast<double>(classes) : q_test; }
  void validate() const;
};

struct Dataset {
  std::size_t classes = 0;
  std::string split;                // "train", "test" or free-form
  std::optional<DatasetSpec> spec;  // absent for hand-built data
  std::vector<MaskedSample> samples;

  std::size_t size() const { return samples.size(); }
  /// Indices of samples with the given label, ascending.
  std::vector<std::size_t> indices_of_class(std::size_t label) const;
  void validate() const;
};

struct DatasetPair {
  Dataset train;
  Dataset test;
};

/// Glyph and patch type names, indexed by class / patch type.
std::span<const std::string_view> glyph_names();
std::span<const std::string_view> patch_names();

/// Index of the sample's patch type, parsed from its "patch:" mask name.
std::size_t patch_type_of(const MaskedSample& sample);

DatasetPair generate(const DatasetSpec& spec);

/// Writes `manifest.json` plus one CRMT file per image and mask.
void save_dataset(const std::filesystem::path& dir, const Dataset& dataset);
Dataset load_dataset(const std::filesystem::path& dir);

/// Samples `indices` stacked as N x 3 x H x W.
Tensor stack_images(const Dataset& dataset, std::span<const std::size_t> indices);

/// Mini-batch with the consolidated core masks attached; no masks at all if
/// any selected sample lacks a core mask.
Batch make_batch(const Dataset& dataset, std::span<const std::size_t> indices);

struct ModelOutputs {
  std::vector<std::size_t> predictions;
  Tensor features;  // N x F, r(x) per sample
};

/// Predictions and r(x) for the given samples, evaluated in chunks.
ModelOutputs evaluate_outputs(const ClassifierModel& model, const Dataset& dataset,
                              std::span<const std::size_t> indices);
ModelOutputs evaluate_outputs(const ClassifierModel& model, const Dataset& dataset);

Tensor feature_vectors(const ClassifierModel& model, const Dataset& dataset, std::span<const std::size_t> indices);

/// The k entries of `indices` with the largest `values`, ties going to the
/// smaller index. `values[n]` belongs to `indices[n]`.
std::vector<std::size_t> top_k_by_value(std::span<const std::size_t> indices, std::span<const double> values,
                                        std::size_t k);

/// The K samples of class `label` with the largest r(x)_feature.
std::vector<std::size_t> select_top_activations(const Dataset& dataset, const ClassifierModel& model,
                                                std::size_t label, std::size_t feature, std::size_t k);

}  // namespace corm
