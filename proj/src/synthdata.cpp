// SPDX-License-Identifier: Apache-2.0
#include "corm/synthdata.hpp"

#include "corm/error.hpp"
#include "corm/rng.hpp"

#include <json.hpp>

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numeric>
#include <set>

namespace corm {

namespace {

constexpr std::array<std::string_view, 8> kGlyphs = {"disk",     "plus",      "hollow-square", "cross",
                                                     "h-bars",   "v-bars",    "triangle",      "ring"};
constexpr std::array<std::string_view, 8> kPatches = {"red-solid",    "green-hstripes",   "blue-vstripes",
                                                      "yellow-checker", "cyan-solid",     "magenta-hstripes",
                                                      "orange-vstripes", "purple-checker"};
constexpr std::array<std::array<double, 3>, 8> kPalette = {{{1.0, 0.1, 0.1},
                                                            {0.1, 0.9, 0.1},
                                                            {0.15, 0.3, 1.0},
                                                            {1.0, 0.95, 0.1},
                                                            {0.1, 0.95, 0.95},
                                                            {0.95, 0.1, 0.95},
                                                            {1.0, 0.55, 0.0},
                                                            {0.55, 0.1, 0.85}}};

// u, v are pixel centres mapped to [-1, 1]; v grows downwards.
bool glyph_covers(std::size_t shape, double u, double v) {
  const double r2 = u * u + v * v;
  switch (shape) {
    case 0: return r2 <= 0.8;
    case 1: return std::abs(u) < 0.3 || std::abs(v) < 0.3;
    case 2: return std::max(std::abs(u), std::abs(v)) >= 0.6;
    case 3: return std::abs(std::abs(u) - std::abs(v)) < 0.35;
    case 4: return static_cast<int>(std::floor((v + 1.0) * 3.0)) % 2 == 0;
    case 5: return static_cast<int>(std::floor((u + 1.0) * 3.0)) % 2 == 0;
    case 6: return v >= 2.0 * std::abs(u) - 1.0;
    case 7: return r2 >= 0.35 && r2 <= 0.9;
  }
  return false;
}

double patch_pattern(std::size_t type, std::size_t row, std::size_t col) {
  const bool on_row = (row / 2) % 2 == 0, on_col = (col / 2) % 2 == 0;
  switch (type % 4) {
    case 1: return on_row ? 1.0 : 0.4;
    case 2: return on_col ? 1.0 : 0.4;
    case 3: return on_row == on_col ? 1.0 : 0.4;
  }
  return 1.0;
}

struct Box {
  std::size_t row, col, size;
  bool intersects(const Box& o) const {
    return row < o.row + o.size && o.row < row + size && col < o.col + o.size && o.col < col + size;
  }
};

MaskedSample make_sample(const DatasetSpec& spec, std::size_t label, double q, Rng& rng) {
  const std::size_t n = spec.image_size, plane = n * n;
  std::size_t type = label;
  if (spec.classes > 1 && !(rng.uniform() < q)) {
    type = static_cast<std::size_t>(rng.below(spec.classes - 1));
    if (type >= label) ++type;
  }
  const std::size_t corner = static_cast<std::size_t>(rng.below(4));
  const std::size_t far = n - spec.patch_size;
  const Box patch{corner / 2 ? far : 0, corner % 2 ? far : 0, spec.patch_size};
  Box glyph{0, 0, spec.glyph_size};
  do {
    glyph.row = static_cast<std::size_t>(rng.below(n - spec.glyph_size + 1));
    glyph.col = static_cast<std::size_t>(rng.below(n - spec.glyph_size + 1));
  } while (glyph.intersects(patch));
  const double intensity = spec.glyph_level * (1.0 - spec.glyph_jitter * rng.uniform());

  Tensor image({3, n, n});
  for (auto& v : image.data()) v = spec.background * rng.uniform();
  MaskArray core = MaskArray::Zero(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(n));
  MaskArray spurious = core;
  const double half = static_cast<double>(spec.glyph_size) / 2.0;
  for (std::size_t r = 0; r < spec.glyph_size; ++r)
    for (std::size_t c = 0; c < spec.glyph_size; ++c) {
      const double u = (static_cast<double>(c) + 0.5 - half) / half, v = (static_cast<double>(r) + 0.5 - half) / half;
      if (!glyph_covers(label, u, v)) continue;
      const std::size_t p = (glyph.row + r) * n + glyph.col + c;
      core.data()[p] = 1.0;
      for (std::size_t ch = 0; ch < 3; ++ch) image[ch * plane + p] = intensity;
    }
  for (std::size_t r = 0; r < spec.patch_size; ++r)
    for (std::size_t c = 0; c < spec.patch_size; ++c) {
      const std::size_t p = (patch.row + r) * n + patch.col + c;
      spurious.data()[p] = 1.0;
      const double level = patch_pattern(type, r, c);
      for (std::size_t ch = 0; ch < 3; ++ch) image[ch * plane + p] = kPalette[type][ch] * level;
    }

  MaskedSample s;
  s.image = std::move(image);
  s.label = label;
  s.core_masks.push_back({"glyph:" + std::string(kGlyphs[label]), SoftMask(std::move(core))});
  s.spurious_masks.push_back({"patch:" + std::string(kPatches[type]), SoftMask(std::move(spurious))});
  return s;
}

Dataset make_split(const DatasetSpec& spec, const std::string& split, std::size_t count, double q, Rng rng) {
  Dataset d;
  d.classes = spec.classes;
  d.split = split;
  d.spec = spec;
  d.samples.reserve(count);
  for (std::size_t i = 0; i < count; ++i) d.samples.push_back(make_sample(spec, i % spec.classes, q, rng));
  return d;
}

SoftMask union_of(const std::vector<NamedMask>& masks, const Tensor& image) {
  if (masks.empty()) return SoftMask(image.dim(1), image.dim(2), 0.0);
  std::vector<SoftMask> plain;
  for (const auto& m : masks) plain.push_back(m.mask);
  return consolidate(plain);
}

nlohmann::ordered_json spec_to_json(const DatasetSpec& s) {
  return {{"classes", s.classes},       {"train_count", s.train_count}, {"test_count", s.test_count},
          {"image_size", s.image_size}, {"q_train", s.q_train},         {"q_test", s.q_test},
          {"glyph_size", s.glyph_size}, {"patch_size", s.patch_size},   {"background", s.background},
          {"glyph_level", s.glyph_level}, {"glyph_jitter", s.glyph_jitter}, {"seed", s.seed}};
}

void require_known(const nlohmann::json& object, const std::set<std::string>& known, const std::string& op,
                   const std::string& where) {
  if (!object.is_object()) throw Error(op, where + " must be an object");
  for (const auto& [key, _] : object.items())
    if (!known.count(key)) throw Error(op, "unknown field '" + key + "' in " + where);
}

DatasetSpec spec_from_json(const nlohmann::json& j, const std::string& op) {
  require_known(j, {"classes", "train_count", "test_count", "image_size", "q_train", "q_test", "glyph_size",
                    "patch_size", "background", "glyph_level", "glyph_jitter", "seed"},
                op, "spec");
  DatasetSpec s;
  s.classes = j.at("classes").get<std::size_t>();
  s.train_count = j.at("train_count").get<std::size_t>();
  s.test_count = j.at("test_count").get<std::size_t>();
  s.image_size = j.at("image_size").get<std::size_t>();
  s.q_train = j.at("q_train").get<double>();
  s.q_test = j.at("q_test").get<double>();
  s.glyph_size = j.at("glyph_size").get<std::size_t>();
  s.patch_size = j.at("patch_size").get<std::size_t>();
  s.background = j.at("background").get<double>();
  s.glyph_level = j.at("glyph_level").get<double>();
  s.glyph_jitter = j.at("glyph_jitter").get<double>();
  s.seed = j.at("seed").get<std::uint64_t>();
  return s;
}

std::string sample_file(const char* kind, std::size_t index, std::size_t sub = 0, bool with_sub = false) {
  char buf[64];
  if (with_sub)
    std::snprintf(buf, sizeof buf, "%s/%06zu_%zu.crmt", kind, index, sub);
  else
    std::snprintf(buf, sizeof buf, "%s/%06zu.crmt", kind, index);
  return buf;
}

}  // namespace

SoftMask MaskedSample::core_union() const { return union_of(core_masks, image); }
SoftMask MaskedSample::spurious_union() const { return union_of(spurious_masks, image); }

void DatasetSpec::validate() const {
  const char* op = "dataset_spec";
  if (classes < 2 || classes > kGlyphs.size())
    throw Error(op, "classes must lie in [2, " + std::to_string(kGlyphs.size()) + "]");
  if (train_count == 0 || test_count == 0) throw Error(op, "train and test counts must be positive");
  if (!(q_train >= 0.0 && q_train <= 1.0)) throw Error(op, "q_train must lie in [0, 1]");
  if (q_test >= 0.0 && q_test > 1.0) throw Error(op, "q_test must lie in [0, 1] (or be negative for 1/C)");
  if (std::isnan(q_test)) throw Error(op, "q_test is NaN");
  if (glyph_size < 4 || patch_size < 2) throw Error(op, "glyph_size must be >= 4 and patch_size >= 2");
  if (glyph_size > image_size) throw Error(op, "glyph larger than image");
  if (glyph_size + patch_size > image_size)
    throw Error(op, "glyph and patch cannot both fit: glyph_size + patch_size must be <= image_size");
  if (!(background >= 0.0 && background <= 1.0)) throw Error(op, "background must lie in [0, 1]");
  if (!(glyph_level > 0.0 && glyph_level <= 1.0)) throw Error(op, "glyph_level must lie in (0, 1]");
  if (!(glyph_jitter >= 0.0 && glyph_jitter <= 1.0)) throw Error(op, "glyph_jitter must lie in [0, 1]");
}

std::vector<std::size_t> Dataset::indices_of_class(std::size_t label) const {
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < samples.size(); ++i)
    if (samples[i].label == label) out.push_back(i);
  return out;
}

void Dataset::validate() const {
  const char* op = "dataset";
  if (classes == 0) throw Error(op, "classes must be positive");
  for (std::size_t i = 0; i < samples.size(); ++i) {
    const auto& s = samples[i];
    const std::string where = "sample " + std::to_string(i);
    if (s.label >= classes)
      throw Error(op, where + ": label " + std::to_string(s.label) + " >= classes " + std::to_string(classes));
    if (s.image.rank() != 3) throw Error(op, where + ": image must be C x H x W");
    if (i > 0 && s.image.dims() != samples[0].image.dims()) throw Error(op, where + ": image dims differ");
    for (const auto* list : {&s.core_masks, &s.spurious_masks})
      for (const auto& m : *list)
        if (m.mask.height() != s.image.dim(1) || m.mask.width() != s.image.dim(2))
          throw Error(op, where + ": mask '" + m.feature + "' dims do not match image");
  }
}

std::span<const std::string_view> glyph_names() { return kGlyphs; }
std::span<const std::string_view> patch_names() { return kPatches; }

std::size_t patch_type_of(const MaskedSample& sample) {
  for (const auto& m : sample.spurious_masks) {
    if (m.feature.rfind("patch:", 0) != 0) continue;
    const auto name = std::string_view(m.feature).substr(6);
    for (std::size_t t = 0; t < kPatches.size(); ++t)
      if (kPatches[t] == name) return t;
  }
  throw Error("patch_type_of", "sample has no recognised patch mask");
}

DatasetPair generate(const DatasetSpec& spec) {
  spec.validate();
  const Rng root(spec.seed);
  return {make_split(spec, "train", spec.train_count, spec.q_train, root.split(1)),
          make_split(spec, "test", spec.test_count, spec.resolved_q_test(), root.split(2))};
}

void save_dataset(const std::filesystem::path& dir, const Dataset& dataset) {
  dataset.validate();
  std::filesystem::create_directories(dir / "images");
  std::filesystem::create_directories(dir / "masks");
  nlohmann::ordered_json manifest;
  manifest["format"] = "corm-dataset";
  manifest["version"] = 1;
  manifest["split"] = dataset.split;
  manifest["classes"] = dataset.classes;
  manifest["spec"] = dataset.spec ? spec_to_json(*dataset.spec) : nlohmann::ordered_json(nullptr);
  auto& records = manifest["samples"] = nlohmann::ordered_json::array();
  for (std::size_t i = 0; i < dataset.size(); ++i) {
    const auto& s = dataset.samples[i];
    const std::string image_file = sample_file("images", i);
    write_crmt(dir / image_file, s.image);
    nlohmann::ordered_json masks = nlohmann::ordered_json::array();
    std::size_t k = 0;
    for (const auto* list : {&s.core_masks, &s.spurious_masks})
      for (const auto& m : *list) {
        const std::string file = sample_file("masks", i, k++, true);
        write_crmt(dir / file, m.mask.to_tensor());
        masks.push_back({{"role", list == &s.core_masks ? "core" : "spurious"}, {"feature", m.feature}, {"file", file}});
      }
    records.push_back({{"image", image_file}, {"label", s.label}, {"masks", std::move(masks)}});
  }
  std::ofstream out(dir / "manifest.json", std::ios::trunc);
  if (!out) throw Error("save_dataset", "cannot write " + (dir / "manifest.json").string());
  out << manifest.dump(1) << '\n';
}

Dataset load_dataset(const std::filesystem::path& dir) {
  const std::string op = "load_dataset(" + dir.string() + ")";
  std::ifstream in(dir / "manifest.json");
  if (!in) throw Error(op, "missing manifest.json");
  try {
    const auto manifest = nlohmann::json::parse(in);
    require_known(manifest, {"format", "version", "split", "classes", "spec", "samples"}, op, "manifest");
    if (manifest.at("format") != "corm-dataset" || manifest.at("version") != 1)
      throw Error(op, "unsupported dataset format");
    Dataset d;
    d.split = manifest.at("split").get<std::string>();
    d.classes = manifest.at("classes").get<std::size_t>();
    if (!manifest.at("spec").is_null()) d.spec = spec_from_json(manifest.at("spec"), op);
    for (const auto& record : manifest.at("samples")) {
      require_known(record, {"image", "label", "masks"}, op, "sample record");
      MaskedSample s;
      s.image = read_crmt(dir / record.at("image").get<std::string>());
      s.label = record.at("label").get<std::size_t>();
      for (const auto& m : record.at("masks")) {
        require_known(m, {"role", "feature", "file"}, op, "mask record");
        const auto role = m.at("role").get<std::string>();
        if (role != "core" && role != "spurious") throw Error(op, "mask role must be core or spurious");
        NamedMask named{m.at("feature").get<std::string>(),
                        SoftMask::from_tensor(read_crmt(dir / m.at("file").get<std::string>()))};
        (role == "core" ? s.core_masks : s.spurious_masks).push_back(std::move(named));
      }
      d.samples.push_back(std::move(s));
    }
    try {
      d.validate();
    } catch (const Error& e) {
      throw Error(op, e.what());
    }
    return d;
  } catch (const nlohmann::json::exception& e) {
    throw Error(op, std::string("malformed manifest: ") + e.what());
  }
}

Tensor stack_images(const Dataset& dataset, std::span<const std::size_t> indices) {
  if (indices.empty()) throw Error("stack_images", "no samples selected");
  const Dims& d = dataset.samples.at(indices[0]).image.dims();
  const std::size_t stride = d[0] * d[1] * d[2];
  Tensor out = Tensor::uninitialized({indices.size(), d[0], d[1], d[2]});
  for (std::size_t n = 0; n < indices.size(); ++n) {
    const Tensor& img = dataset.samples.at(indices[n]).image;
    if (img.dims() != d) throw Error("stack_images", "image dims differ within the dataset");
    std::copy(img.data().begin(), img.data().end(), out.data().begin() + static_cast<std::ptrdiff_t>(n * stride));
  }
  return out;
}

Batch make_batch(const Dataset& dataset, std::span<const std::size_t> indices) {
  Batch b;
  b.images = stack_images(dataset, indices);
  bool masked = true;
  for (auto i : indices) {
    b.labels.push_back(dataset.samples[i].label);
    masked = masked && !dataset.samples[i].core_masks.empty();
  }
  if (masked)
    for (auto i : indices) b.core_masks.push_back(dataset.samples[i].core_union());
  return b;
}

ModelOutputs evaluate_outputs(const ClassifierModel& model, const Dataset& dataset,
                              std::span<const std::size_t> indices) {
  constexpr std::size_t kChunk = 256;
  const std::size_t f = model.features(), classes = model.classes();
  if (indices.empty()) throw Error("evaluate_outputs", "no samples selected");
  ModelOutputs out{std::vector<std::size_t>(indices.size()), Tensor({indices.size(), f})};
  for (std::size_t start = 0; start < indices.size(); start += kChunk) {
    const auto chunk = indices.subspan(start, std::min(kChunk, indices.size() - start));
    const auto result = forward_batch(model, stack_images(dataset, chunk));
    std::copy(result.features.data().begin(), result.features.data().end(),
              out.features.data().begin() + static_cast<std::ptrdiff_t>(start * f));
    for (std::size_t n = 0; n < chunk.size(); ++n)
      out.predictions[start + n] =
          argmax(std::span<const double>(result.logits.data().data() + n * classes, classes));
  }
  return out;
}

ModelOutputs evaluate_outputs(const ClassifierModel& model, const Dataset& dataset) {
  std::vector<std::size_t> all(dataset.size());
  std::iota(all.begin(), all.end(), 0);
  return evaluate_outputs(model, dataset, all);
}

Tensor feature_vectors(const ClassifierModel& model, const Dataset& dataset, std::span<const std::size_t> indices) {
  return evaluate_outputs(model, dataset, indices).features;
}

std::vector<std::size_t> top_k_by_value(std::span<const std::size_t> indices, std::span<const double> values,
                                        std::size_t k) {
  if (indices.size() != values.size()) throw Error("top_k", "indices and values differ in length");
  if (k == 0) throw Error("top_k", "K must be >= 1");
  if (k > indices.size())
    throw Error("top_k", "K = " + std::to_string(k) + " exceeds the " + std::to_string(indices.size()) +
                             " available samples");
  std::vector<std::size_t> order(indices.size());
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    if (values[a] != values[b]) return values[a] > values[b];
    return indices[a] < indices[b];
  });
  std::vector<std::size_t> out;
  for (std::size_t n = 0; n < k; ++n) out.push_back(indices[order[n]]);
  return out;
}

std::vector<std::size_t> select_top_activations(const Dataset& dataset, const ClassifierModel& model,
                                                std::size_t label, std::size_t feature, std::size_t k) {
  if (feature >= model.features()) throw Error("select_top_activations", "feature out of range");
  const auto members = dataset.indices_of_class(label);
  if (k == 0) throw Error("select_top_activations", "K must be >= 1");
  if (members.size() < k)
    throw Error("select_top_activations", "class " + std::to_string(label) + " has " +
                                              std::to_string(members.size()) + " samples, fewer than K = " +
                                              std::to_string(k));
  const Tensor r = feature_vectors(model, dataset, members);
  std::vector<double> values(members.size());
  for (std::size_t n = 0; n < members.size(); ++n) values[n] = r[n * model.features() + feature];
  return top_k_by_value(members, values, k);
}

}  // namespace corm
