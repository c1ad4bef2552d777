// SPDX-License-Identifier: Apache-2.0
#include "corm/error.hpp"
#include "corm/model.hpp"

#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <random>

using namespace corm;

namespace {

Tensor random_image(Dims dims, std::mt19937_64& gen, double lo = 0.0, double hi = 1.0) {
  std::uniform_real_distribution<double> dist(lo, hi);
  Tensor t(std::move(dims));
  for (auto& v : t.data()) v = dist(gen);
  return t;
}

// 3x3 kernel that copies its input channel: only the centre tap is set.
Tensor centre_kernel(std::size_t out, std::size_t in, double weight) {
  Tensor k({out, in, 3, 3});
  for (std::size_t o = 0; o < out; ++o)
    for (std::size_t i = 0; i < in; ++i) k[((o * in + i) * 3 + 1) * 3 + 1] = weight;
  return k;
}

// One input channel carried straight through both convolutions into F
// features, each feature scaled by gains[j]. On positive inputs with relu,
// r_j(x) = gains[j] * mean(x).
ClassifierModel pass_through_model(const std::vector<double>& gains, Tensor dense_weight, Tensor dense_bias) {
  ClassifierModel m;
  m.nonlinearity = Nonlinearity::Relu;
  m.conv1_weight = centre_kernel(1, 1, 1.0);
  m.conv1_bias = Tensor({1});
  m.conv2_weight = Tensor({gains.size(), 1, 3, 3});
  for (std::size_t j = 0; j < gains.size(); ++j) m.conv2_weight[j * 9 + 4] = gains[j];
  m.conv2_bias = Tensor({gains.size()});
  m.dense_weight = std::move(dense_weight);
  m.dense_bias = std::move(dense_bias);
  return m;
}

std::filesystem::path scratch_dir(const std::string& name) {
  auto dir = std::filesystem::temp_directory_path() / ("corm_test_model_" + name);
  std::filesystem::remove_all(dir);
  return dir;
}

}  // namespace

TEST(Init, DeterministicInSeed) {
  auto a = init_model(7, 3, 16, 4, Nonlinearity::Relu);
  auto b = init_model(7, 3, 16, 4, Nonlinearity::Relu);
  auto c = init_model(8, 3, 16, 4, Nonlinearity::Relu);
  for (std::size_t i = 0; i < ClassifierModel::kParameterCount; ++i)
    EXPECT_TRUE(bitwise_equal(*a.parameters()[i], *b.parameters()[i])) << ClassifierModel::kParameterNames[i];
  EXPECT_FALSE(bitwise_equal(a.conv1_weight, c.conv1_weight));
  EXPECT_FALSE(bitwise_equal(a.dense_weight, c.dense_weight));
}

TEST(Init, ShapesBoundsAndZeroBiases) {
  auto m = init_model(1, 3, 16, 4, Nonlinearity::Softplus);
  EXPECT_EQ(m.conv1_weight.dims(), (Dims{8, 3, 3, 3}));
  EXPECT_EQ(m.conv2_weight.dims(), (Dims{16, 8, 3, 3}));
  EXPECT_EQ(m.dense_weight.dims(), (Dims{4, 16}));
  EXPECT_EQ(m.dense_bias.dims(), (Dims{4}));
  EXPECT_NEAR(glorot_bound(16, 4), 0.5477, 1e-4);
  const double dense_b = glorot_bound(16, 4);
  EXPECT_LE(m.dense_weight.array().abs().maxCoeff(), dense_b);
  const double conv1_b = glorot_bound(3 * 9, 8 * 9);
  EXPECT_LE(m.conv1_weight.array().abs().maxCoeff(), conv1_b);
  EXPECT_EQ(m.conv1_bias.array().abs().maxCoeff(), 0.0);
  EXPECT_EQ(m.conv2_bias.array().abs().maxCoeff(), 0.0);
  EXPECT_EQ(m.dense_bias.array().abs().maxCoeff(), 0.0);
  EXPECT_THROW(init_model(1, 0, 16, 4, Nonlinearity::Relu), Error);
}

TEST(Forward, ZeroWeightsGiveZeroLogits) {
  auto m = init_model(3, 3, 5, 4, Nonlinearity::Relu);
  for (auto* p : m.parameters()) p->array() = 0.0;
  std::mt19937_64 gen(1);
  auto out = forward(m, random_image({3, 6, 7}, gen, -2, 2));
  EXPECT_EQ(out.logits.dims(), (Dims{4}));
  for (double v : out.logits.data()) EXPECT_EQ(v, 0.0);
}

TEST(Forward, PassThroughToyGivesHandValues) {
  // F = 1: r = v for a constant image v, logits = w v + bias.
  const double v = 0.7;
  auto m = pass_through_model({1.0}, Tensor({3, 1}, {2.0, -1.0, 0.5}), Tensor({3}, {0.1, 0.2, 0.3}));
  auto out = forward(m, Tensor::filled({1, 5, 4}, v));
  EXPECT_NEAR(out.features[0], v, 1e-15);
  EXPECT_NEAR(out.logits[0], 2.0 * v + 0.1, 1e-15);
  EXPECT_NEAR(out.logits[1], -1.0 * v + 0.2, 1e-15);
  EXPECT_NEAR(out.logits[2], 0.5 * v + 0.3, 1e-15);
  EXPECT_EQ(out.feature_maps.dims(), (Dims{1, 5, 4}));
}

TEST(Forward, PermutingClassRowsPermutesLogits) {
  auto m = init_model(5, 3, 6, 4, Nonlinearity::Relu);
  std::mt19937_64 gen(2);
  for (auto& v : m.dense_bias.data()) v = std::uniform_real_distribution<double>(-1, 1)(gen);
  const std::vector<std::size_t> perm{2, 0, 3, 1};
  auto p = m;
  for (std::size_t c = 0; c < 4; ++c) {
    for (std::size_t f = 0; f < 6; ++f) p.dense_weight[c * 6 + f] = m.dense_weight[perm[c] * 6 + f];
    p.dense_bias[c] = m.dense_bias[perm[c]];
  }
  auto x = random_image({3, 8, 8}, gen);
  auto a = forward(m, x), b = forward(p, x);
  for (std::size_t c = 0; c < 4; ++c) EXPECT_EQ(b.logits[c], a.logits[perm[c]]);
}

TEST(Forward, BatchMatchesSingleAndShapes) {
  auto m = init_model(9, 3, 5, 3, Nonlinearity::Softplus);
  std::mt19937_64 gen(3);
  auto batch = random_image({2, 3, 6, 5}, gen);
  auto out = forward_batch(m, batch);
  EXPECT_EQ(out.logits.dims(), (Dims{2, 3}));
  EXPECT_EQ(out.features.dims(), (Dims{2, 5}));
  EXPECT_EQ(out.feature_maps.dims(), (Dims{2, 5, 6, 5}));
  Tensor second({3, 6, 5});
  std::copy_n(batch.data().begin() + 90, 90, second.data().begin());
  auto single = forward(m, second);
  for (std::size_t c = 0; c < 3; ++c) EXPECT_NEAR(single.logits[c], out.logits[3 + c], 1e-12);
  EXPECT_THROW(forward(m, Tensor({2, 6, 5})), Error);
  EXPECT_THROW(forward(m, Tensor({6, 5})), Error);
}

TEST(Forward, Deterministic) {
  auto m = init_model(4, 3, 5, 3, Nonlinearity::Relu);
  std::mt19937_64 gen(4);
  auto x = random_image({3, 7, 7}, gen);
  auto a = forward(m, x), b = forward(m, x);
  EXPECT_TRUE(bitwise_equal(a.logits, b.logits));
  EXPECT_TRUE(bitwise_equal(a.feature_maps, b.feature_maps));
}

TEST(Forward, LogitsLinearInDenseWeights) {
  auto m = init_model(6, 3, 5, 3, Nonlinearity::Relu);
  std::mt19937_64 gen(5);
  auto x = random_image({3, 6, 6}, gen);
  auto doubled = m;
  doubled.dense_weight.array() *= 2.0;
  auto a = forward(m, x), b = forward(doubled, x);
  for (std::size_t c = 0; c < 3; ++c) EXPECT_NEAR(b.logits[c], 2.0 * a.logits[c], 1e-12);
}

TEST(Forward, FullModelLossPassesGradientCheck) {
  auto m = init_model(11, 2, 3, 3, Nonlinearity::Softplus, 2);
  std::mt19937_64 gen(6);
  for (auto* p : m.parameters())
    for (auto& v : p->data()) v += std::uniform_real_distribution<double>(-0.3, 0.3)(gen);
  Graph g;
  auto params = bind_parameters(g, m);
  auto images = leaf(g, random_image({2, 2, 5, 4}, gen, -1, 1));
  auto out = forward(params, m.nonlinearity, images);
  auto loss = ops::softmax_cross_entropy(out.logits, {0, 2});
  for (std::size_t i = 0; i < ClassifierModel::kParameterCount; ++i)
    EXPECT_LT(finite_diff_check(g, loss.id(), params.all[i].id(), 1e-6), 1e-5) << ClassifierModel::kParameterNames[i];
}

TEST(Argmax, LowestIndexWinsTies) {
  std::vector<double> v{1.0, 3.0, 3.0, 2.0};
  EXPECT_EQ(argmax(v), 1u);
  EXPECT_THROW(argmax(std::span<const double>{}), Error);
}

TEST(FeatureAttack, ZeroIterationsOrZeroRadiusKeepImage) {
  auto m = init_model(2, 3, 4, 2, Nonlinearity::Relu);
  std::mt19937_64 gen(7);
  auto x0 = random_image({3, 6, 6}, gen);
  EXPECT_TRUE(bitwise_equal(feature_attack(m, x0, 1, {.step = 0.5, .iterations = 0, .rho = 10.0}), x0));
  EXPECT_TRUE(bitwise_equal(feature_attack(m, x0, 1, {.step = 0.5, .iterations = 5, .rho = 0.0}), x0));
  EXPECT_THROW(feature_attack(m, x0, 4, {}), Error);
}

TEST(FeatureAttack, MeanFeatureStepAddsStepOverPixelCount) {
  // r_0 = mean(x) on positive inputs, so one step adds step / (H W) everywhere.
  auto m = pass_through_model({1.0}, Tensor({2, 1}, {1.0, -1.0}), Tensor({2}));
  std::mt19937_64 gen(8);
  auto x0 = random_image({1, 4, 5}, gen, 0.2, 1.0);
  const double step = 0.8;
  auto x = feature_attack(m, x0, 0, {.step = step, .iterations = 1, .rho = 100.0});
  for (std::size_t i = 0; i < x0.size(); ++i) EXPECT_NEAR(x[i] - x0[i], step / 20.0, 1e-15);
}

TEST(FeatureAttack, NeverDecreasesFeatureOnLinearRegime) {
  auto m = pass_through_model({0.5, 2.0}, Tensor({2, 2}, {1.0, 0.0, 0.0, 1.0}), Tensor({2}));
  std::mt19937_64 gen(9);
  auto x0 = random_image({1, 5, 5}, gen, 0.1, 1.0);
  double previous = forward(m, x0).features[1];
  for (int iters = 1; iters <= 6; ++iters) {
    auto x = feature_attack(m, x0, 1, {.step = 0.3, .iterations = iters, .rho = 1e9});
    const double r = forward(m, x).features[1];
    EXPECT_GE(r, previous);
    previous = r;
  }
}

TEST(FeatureAttack, StaysInsideBall) {
  auto m = init_model(12, 3, 4, 2, Nonlinearity::Relu);
  std::mt19937_64 gen(10);
  auto x0 = random_image({3, 6, 6}, gen);
  auto x = feature_attack(m, x0, 2, {.step = 50.0, .iterations = 4, .rho = 0.25});
  EXPECT_LE(std::sqrt((x.array() - x0.array()).square().sum()), 0.25 + 1e-12);
}

TEST(Jet, HandValues) {
  auto zero = jet(0.0);
  EXPECT_EQ(zero[0], 0.0);
  EXPECT_EQ(zero[1], 0.0);
  EXPECT_EQ(zero[2], 0.5);
  auto mid = jet(0.5);
  EXPECT_EQ(mid[0], 0.5);
  EXPECT_EQ(mid[1], 1.0);
  EXPECT_EQ(mid[2], 0.5);
  auto one = jet(1.0);
  EXPECT_EQ(one[0], 0.5);
  EXPECT_EQ(one[1], 0.0);
  EXPECT_EQ(one[2], 0.0);
}

TEST(Heatmap, BlackImageZeroNamIsUniformBlue) {
  auto hm = heatmap(Tensor({3, 4, 3}), SoftMask(3, 4, 0.0));
  for (std::size_t p = 0; p < 12; ++p) {
    EXPECT_EQ(hm[p * 3 + 0], 0.0);
    EXPECT_EQ(hm[p * 3 + 1], 0.0);
    EXPECT_EQ(hm[p * 3 + 2], 1.0);
  }
}

TEST(Heatmap, OutputInUnitRange) {
  std::mt19937_64 gen(11);
  for (int trial = 0; trial < 20; ++trial) {
    auto image = random_image({5, 6, 3}, gen);
    MaskArray a(5, 6);
    for (Eigen::Index i = 0; i < a.size(); ++i) a(i) = std::uniform_real_distribution<double>(0, 1)(gen);
    auto hm = heatmap(image, SoftMask(a));
    EXPECT_GE(hm.array().minCoeff(), 0.0);
    EXPECT_LE(hm.array().maxCoeff(), 1.0);
    EXPECT_NEAR(hm.array().maxCoeff(), 1.0, 1e-15);
  }
  EXPECT_THROW(heatmap(Tensor({5, 6, 3}), SoftMask(6, 5, 0.0)), Error);
}

TEST(Ppm, WritesHeaderAndBytes) {
  auto dir = scratch_dir("ppm");
  std::filesystem::create_directories(dir);
  Tensor img({1, 2, 3}, {0.0, 0.5, 1.0, 1.0, 0.0, 0.25});
  write_ppm(dir / "a.ppm", img);
  std::ifstream in(dir / "a.ppm", std::ios::binary);
  std::string content((std::istreambuf_iterator<char>(in)), {});
  ASSERT_EQ(content.substr(0, 11), "P6\n2 1\n255\n");
  ASSERT_EQ(content.size(), 17u);
  EXPECT_EQ(static_cast<unsigned char>(content[11]), 0);
  EXPECT_EQ(static_cast<unsigned char>(content[13]), 255);
  std::filesystem::remove_all(dir);
}

TEST(Checkpoint, RoundTripIsBitwise) {
  auto m = init_model(21, 3, 5, 4, Nonlinearity::Softplus);
  auto dir = scratch_dir("roundtrip");
  save_checkpoint(dir, m);
  auto back = load_checkpoint(dir);
  EXPECT_EQ(back.nonlinearity, Nonlinearity::Softplus);
  EXPECT_EQ(back.seed, 21u);
  for (std::size_t i = 0; i < ClassifierModel::kParameterCount; ++i)
    EXPECT_TRUE(bitwise_equal(*m.parameters()[i], *back.parameters()[i]));
  std::filesystem::remove_all(dir);
}

TEST(Checkpoint, RejectsUnknownFieldsAndMissingFiles) {
  auto m = init_model(22, 3, 5, 4, Nonlinearity::Relu);
  auto dir = scratch_dir("bad");
  save_checkpoint(dir, m);
  {
    std::ifstream in(dir / "manifest.json");
    std::string text((std::istreambuf_iterator<char>(in)), {});
    text.insert(text.find('{') + 1, "\"surprise\": 1,");
    std::ofstream(dir / "manifest.json") << text;
  }
  EXPECT_THROW(load_checkpoint(dir), Error);
  std::filesystem::remove_all(dir);
  save_checkpoint(dir, m);
  std::filesystem::remove(dir / "dense.weight.crmt");
  EXPECT_THROW(load_checkpoint(dir), Error);
  std::filesystem::remove_all(dir);
  EXPECT_THROW(load_checkpoint(dir), Error);
}
