// SPDX-License-Identifier: Apache-2.0
#include "corm/model.hpp"

#include "corm/error.hpp"
#include "corm/rng.hpp"

#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <set>

namespace corm {

std::string_view to_string(Nonlinearity n) { return n == Nonlinearity::Relu ? "relu" : "softplus"; }

Nonlinearity nonlinearity_from_string(std::string_view name) {
  if (name == "relu") return Nonlinearity::Relu;
  if (name == "softplus") return Nonlinearity::Softplus;
  throw Error("model", "unknown nonlinearity '" + std::string(name) + "'");
}

std::array<Tensor*, ClassifierModel::kParameterCount> ClassifierModel::parameters() {
  return {&conv1_weight, &conv1_bias, &conv2_weight, &conv2_bias, &dense_weight, &dense_bias};
}

std::array<const Tensor*, ClassifierModel::kParameterCount> ClassifierModel::parameters() const {
  return {&conv1_weight, &conv1_bias, &conv2_weight, &conv2_bias, &dense_weight, &dense_bias};
}

double glorot_bound(std::size_t fan_in, std::size_t fan_out) {
  return std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
}

namespace {

Tensor uniform_tensor(Dims dims, double bound, Rng& rng) {
  Tensor t(std::move(dims));
  for (auto& v : t.data()) v = (2.0 * rng.uniform() - 1.0) * bound;
  return t;
}

}  // namespace

ClassifierModel init_model(std::uint64_t seed, std::size_t in_channels, std::size_t features, std::size_t classes,
                           Nonlinearity nonlinearity, std::size_t hidden) {
  if (in_channels == 0 || features == 0 || classes == 0 || hidden == 0)
    throw Error("init_model", "dimensions must be positive");
  Rng rng(seed);
  ClassifierModel m;
  m.nonlinearity = nonlinearity;
  m.seed = seed;
  m.conv1_weight = uniform_tensor({hidden, in_channels, 3, 3}, glorot_bound(in_channels * 9, hidden * 9), rng);
  m.conv1_bias = Tensor({hidden});
  m.conv2_weight = uniform_tensor({features, hidden, 3, 3}, glorot_bound(hidden * 9, features * 9), rng);
  m.conv2_bias = Tensor({features});
  m.dense_weight = uniform_tensor({classes, features}, glorot_bound(features, classes), rng);
  m.dense_bias = Tensor({classes});
  return m;
}

ParameterVars bind_parameters(Graph& graph, const ClassifierModel& model) {
  ParameterVars vars;
  const auto params = model.parameters();
  for (std::size_t i = 0; i < params.size(); ++i) vars.all[i] = leaf(graph, *params[i]);
  return vars;
}

ForwardVars forward(const ParameterVars& params, Nonlinearity nonlinearity, Var images) {
  if (images.dims().size() != 4) throw Error("forward", "images must be N x C x H x W");
  if (images.dims()[1] != params.conv1_weight().dims()[1])
    throw Error("forward", "image channels " + std::to_string(images.dims()[1]) + " do not match model input " +
                               std::to_string(params.conv1_weight().dims()[1]));
  auto activate = [nonlinearity](Var v) { return nonlinearity == Nonlinearity::Relu ? ops::relu(v) : ops::softplus(v); };
  Var hidden = activate(ops::bias_add(ops::conv2d(images, params.conv1_weight()), params.conv1_bias()));
  Var maps = activate(ops::bias_add(ops::conv2d(hidden, params.conv2_weight()), params.conv2_bias()));
  Var features = ops::global_avg_pool(maps);
  Var logits = ops::dense(features, params.dense_weight(), params.dense_bias());
  return {logits, features, maps};
}

ForwardResult forward_batch(const ClassifierModel& model, const Tensor& images) {
  Graph graph;
  const auto params = bind_parameters(graph, model);
  const auto out = forward(params, model.nonlinearity, leaf(graph, images));
  return {out.logits.value(), out.features.value(), out.feature_maps.value()};
}

ForwardResult forward(const ClassifierModel& model, const Tensor& image) {
  if (image.rank() != 3) throw Error("forward", "image must be C x H x W, got " + dims_to_string(image.dims()));
  const auto& d = image.dims();
  auto batch = forward_batch(model, image.reshaped({1, d[0], d[1], d[2]}));
  const auto& maps = batch.feature_maps.dims();
  return {batch.logits.reshaped({model.classes()}), batch.features.reshaped({model.features()}),
          batch.feature_maps.reshaped({maps[1], maps[2], maps[3]})};
}

std::size_t argmax(std::span<const double> logits) {
  if (logits.empty()) throw Error("argmax", "empty logits");
  return static_cast<std::size_t>(std::max_element(logits.begin(), logits.end()) - logits.begin());
}

std::vector<std::size_t> predict(const ClassifierModel& model, const Tensor& images) {
  const Tensor logits = forward_batch(model, images).logits;
  const std::size_t classes = model.classes();
  std::vector<std::size_t> out(logits.dim(0));
  for (std::size_t n = 0; n < out.size(); ++n)
    out[n] = argmax(std::span<const double>(logits.data().data() + n * classes, classes));
  return out;
}

Tensor feature_attack(const ClassifierModel& model, const Tensor& x0, std::size_t feature, AttackSettings settings) {
  if (feature >= model.features())
    throw Error("feature_attack", "feature " + std::to_string(feature) + " out of range (F = " +
                                      std::to_string(model.features()) + ")");
  if (x0.rank() != 3) throw Error("feature_attack", "image must be C x H x W");
  if (settings.iterations < 0) throw Error("feature_attack", "iterations must be >= 0");
  const double rho = settings.rho < 0 ? 0.5 * std::sqrt(static_cast<double>(x0.size())) : settings.rho;
  const auto& d = x0.dims();
  Tensor x = x0;
  for (int it = 0; it < settings.iterations; ++it) {
    Graph graph;
    const auto params = bind_parameters(graph, model);
    Var input = leaf(graph, x.reshaped({1, d[0], d[1], d[2]}));
    Tensor pick({1, model.features()});
    pick[feature] = 1.0;
    Var value = ops::sum(forward(params, model.nonlinearity, input).features * leaf(graph, std::move(pick)));
    const Tensor& g = grad(value, input).value();
    Eigen::ArrayXd delta = x.array() + settings.step * g.array() - x0.array();
    const double norm = std::sqrt(delta.square().sum());
    if (norm > rho) delta *= norm > 0 ? rho / norm : 0.0;
    x.array() = x0.array() + delta;
  }
  return x;
}

std::array<double, 3> jet(double t) {
  t = std::clamp(t, 0.0, 1.0);
  auto channel = [t](double centre) { return std::clamp(1.5 - std::abs(4.0 * t - centre), 0.0, 1.0); };
  return {channel(3.0), channel(2.0), channel(1.0)};
}

Tensor heatmap(const Tensor& image, const SoftMask& nam_mask) {
  if (image.rank() != 3 || image.dim(2) != 3) throw Error("heatmap", "image must be H x W x 3");
  if (image.dim(0) != nam_mask.height() || image.dim(1) != nam_mask.width())
    throw Error("heatmap", "mask dims do not match image");
  Tensor hm(image.dims());
  const std::size_t pixels = image.dim(0) * image.dim(1);
  for (std::size_t p = 0; p < pixels; ++p) {
    const auto colour = jet(nam_mask.values().data()[p]);
    for (std::size_t c = 0; c < 3; ++c) hm[p * 3 + c] = colour[c] + image[p * 3 + c];
  }
  const double top = hm.array().maxCoeff();
  if (top > 0) hm.array() /= top;
  hm.array() = hm.array().max(0.0);
  return hm;
}

Tensor chw_to_hwc(const Tensor& image) {
  if (image.rank() != 3) throw Error("chw_to_hwc", "expected C x H x W");
  const std::size_t c = image.dim(0), h = image.dim(1), w = image.dim(2);
  Tensor out({h, w, c});
  for (std::size_t k = 0; k < c; ++k)
    for (std::size_t p = 0; p < h * w; ++p) out[p * c + k] = image[k * h * w + p];
  return out;
}

void write_ppm(const std::filesystem::path& path, const Tensor& hwc) {
  if (hwc.rank() != 3 || hwc.dim(2) != 3) throw Error("write_ppm", "image must be H x W x 3");
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error("write_ppm(" + path.string() + ")", "cannot open for writing");
  out << "P6\n" << hwc.dim(1) << ' ' << hwc.dim(0) << "\n255\n";
  for (double v : hwc.data()) out.put(static_cast<char>(std::lround(std::clamp(v, 0.0, 1.0) * 255.0)));
  if (!out) throw Error("write_ppm(" + path.string() + ")", "write failed");
}

void save_checkpoint(const std::filesystem::path& dir, const ClassifierModel& model) {
  std::filesystem::create_directories(dir);
  nlohmann::ordered_json manifest;
  manifest["format"] = "corm-checkpoint";
  manifest["version"] = 1;
  manifest["nonlinearity"] = to_string(model.nonlinearity);
  manifest["seed"] = model.seed;
  manifest["in_channels"] = model.in_channels();
  manifest["hidden"] = model.hidden();
  manifest["features"] = model.features();
  manifest["classes"] = model.classes();
  manifest["layers"] = nlohmann::ordered_json::array();
  const auto params = model.parameters();
  for (std::size_t i = 0; i < params.size(); ++i) {
    const std::string name(ClassifierModel::kParameterNames[i]);
    write_crmt(dir / (name + ".crmt"), *params[i]);
    manifest["layers"].push_back({{"name", name}, {"dims", params[i]->dims()}, {"file", name + ".crmt"}});
  }
  std::ofstream out(dir / "manifest.json", std::ios::trunc);
  if (!out) throw Error("save_checkpoint", "cannot write " + (dir / "manifest.json").string());
  out << manifest.dump(2) << '\n';
}

ClassifierModel load_checkpoint(const std::filesystem::path& dir) {
  const std::string op = "load_checkpoint(" + dir.string() + ")";
  std::ifstream in(dir / "manifest.json");
  if (!in) throw Error(op, "missing manifest.json");
  nlohmann::json manifest;
  try {
    manifest = nlohmann::json::parse(in);
    static const std::set<std::string> known{"format", "version", "nonlinearity", "seed", "in_channels",
                                             "hidden", "features", "classes", "layers"};
    for (const auto& [key, _] : manifest.items())
      if (!known.count(key)) throw Error(op, "unknown manifest field '" + key + "'");
    if (manifest.at("format") != "corm-checkpoint" || manifest.at("version") != 1)
      throw Error(op, "unsupported checkpoint format");
    ClassifierModel model;
    model.nonlinearity = nonlinearity_from_string(manifest.at("nonlinearity").get<std::string>());
    model.seed = manifest.at("seed").get<std::uint64_t>();
    const auto& layers = manifest.at("layers");
    if (layers.size() != ClassifierModel::kParameterCount) throw Error(op, "expected 6 layers");
    auto params = model.parameters();
    for (std::size_t i = 0; i < params.size(); ++i) {
      const auto& layer = layers[i];
      if (layer.at("name") != ClassifierModel::kParameterNames[i]) throw Error(op, "unexpected layer order");
      *params[i] = read_crmt(dir / layer.at("file").get<std::string>());
      if (params[i]->dims() != layer.at("dims").get<Dims>())
        throw Error(op, "layer " + layer.at("name").get<std::string>() + " dims disagree with manifest");
    }
    const Dims expected_shapes[] = {
        {model.hidden(), model.in_channels(), 3, 3}, {model.hidden()}, {model.features(), model.hidden(), 3, 3},
        {model.features()}, {model.classes(), model.features()}, {model.classes()}};
    for (std::size_t i = 0; i < params.size(); ++i)
      if (params[i]->dims() != expected_shapes[i]) throw Error(op, "inconsistent layer shapes");
    if (model.in_channels() != manifest.at("in_channels").get<std::size_t>() ||
        model.hidden() != manifest.at("hidden").get<std::size_t>() ||
        model.features() != manifest.at("features").get<std::size_t>() ||
        model.classes() != manifest.at("classes").get<std::size_t>())
      throw Error(op, "manifest dimensions disagree with tensors");
    return model;
  } catch (const nlohmann::json::exception& e) {
    throw Error(op, std::string("malformed manifest: ") + e.what());
  }
}

}  // namespace corm
