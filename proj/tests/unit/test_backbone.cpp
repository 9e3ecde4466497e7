#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "gtta/backbone.hpp"
#include "gtta/gradcheck.hpp"
#include "gtta/synthdata.hpp"
#include "test_util.hpp"

using namespace gtta;
using namespace gtta::model;
using gtta::testing::error_code_of;

namespace {

std::vector<float> random_image(std::mt19937_64& rng) {
  std::uniform_real_distribution<float> u(0.0f, 1.0f);
  std::vector<float> img(data::kPixels);
  for (float& v : img) v = u(rng);
  return img;
}

BackboneParams zero_params() {
  std::mt19937_64 rng(0);
  BackboneParams p = BackboneParams::init(rng);
  for (Tensor& t : p.all())
    for (double& v : t.values_mut()) v = 0.0;
  return p;
}

}  // namespace

TEST(Patchify, ConstantImageAndLocality) {
  std::vector<float> img(data::kPixels, 0.25f);
  const Tensor p = patchify(img);
  ASSERT_EQ(p.shape(), (Shape{64, 192}));
  for (double v : p.values()) EXPECT_EQ(v, 0.25);

  img[0] = 1.0f;  // channel 0, pixel (0, 0)
  const Tensor q = patchify(img);
  for (std::size_t n = 0; n < kRegions; ++n) {
    bool differs = false;
    for (std::size_t j = 0; j < kPatchDim; ++j) differs |= q.at(n * kPatchDim + j) != 0.25;
    EXPECT_EQ(differs, n == 0) << "patch " << n;
  }
  EXPECT_EQ(q.at(0), 1.0);
}

TEST(Patchify, ReassemblyAndShapeErrors) {
  std::mt19937_64 rng(1);
  const auto img = random_image(rng);
  const Tensor p = patchify(img);
  const auto back = unpatchify(p.values());
  for (std::size_t i = 0; i < img.size(); ++i) ASSERT_EQ(back[i], static_cast<double>(img[i]));
  // Independent check of one coordinate: patch (2, 5), channel 1, row 3, col 6.
  const std::size_t n = 2 * kGrid + 5;
  EXPECT_EQ(p.at(n * kPatchDim + 1 * 64 + 3 * 8 + 6), img[(1 * 64 + 2 * 8 + 3) * 64 + 5 * 8 + 6]);
  EXPECT_EQ(region_cell(n).row, 2u);
  EXPECT_EQ(region_cell(n).col, 5u);
  std::vector<float> small(100, 0.0f);
  EXPECT_EQ(error_code_of([&] { patchify(small); }), Errc::ShapeMismatch);
}

TEST(BackboneForward, ZeroParamsGiveZeroPooled) {
  std::mt19937_64 rng(2);
  const auto img = random_image(rng);
  const Features f = backbone_forward(zero_params(), patchify_batch({img}));
  for (double v : f.pooled.values()) EXPECT_EQ(v, 0.0);
}

TEST(BackboneForward, PooledIsMeanOfRegions) {
  std::mt19937_64 rng(3);
  const BackboneParams p = BackboneParams::init(rng);
  const auto a = random_image(rng), b = random_image(rng);
  const Features f = backbone_forward(p, patchify_batch({a, b}));
  ASSERT_EQ(f.regions.shape(), (Shape{2, kRegions, kFeatures}));
  for (std::size_t i = 0; i < 2; ++i)
    for (std::size_t j = 0; j < kFeatures; ++j) {
      double s = 0;
      for (std::size_t n = 0; n < kRegions; ++n) s += f.regions.at((i * kRegions + n) * kFeatures + j);
      EXPECT_NEAR(f.pooled.at(i * kFeatures + j), s / kRegions, 1e-12);
    }
}

TEST(BackboneForward, PermutingPatchesPermutesRegions) {
  std::mt19937_64 rng(4);
  const BackboneParams p = BackboneParams::init(rng);
  auto img = random_image(rng);
  const Tensor patches = patchify(img);
  // swap patches 3 and 40 in patch space, then rebuild the image
  std::vector<double> swapped(patches.values().begin(), patches.values().end());
  for (std::size_t j = 0; j < kPatchDim; ++j) std::swap(swapped[3 * kPatchDim + j], swapped[40 * kPatchDim + j]);
  const auto img2d = unpatchify(swapped);
  std::vector<float> img2(img2d.begin(), img2d.end());

  const Features f1 = backbone_forward(p, patchify_batch({img}));
  const Features f2 = backbone_forward(p, patchify_batch({img2}));
  auto row = [](const Features& f, std::size_t n, std::size_t j) { return f.regions.at(n * kFeatures + j); };
  for (std::size_t j = 0; j < kFeatures; ++j) {
    EXPECT_NEAR(row(f1, 3, j), row(f2, 40, j), 1e-12);
    EXPECT_NEAR(row(f1, 40, j), row(f2, 3, j), 1e-12);
    EXPECT_NEAR(row(f1, 7, j), row(f2, 7, j), 1e-12);
    EXPECT_NEAR(f1.pooled.at(j), f2.pooled.at(j), 1e-12);
  }
}

TEST(Classifier, AnalyticCasesAndScalarOracle) {
  BackboneParams p = zero_params();
  const Tensor zero = Tensor::zeros({1, kFeatures});
  const Tensor l0 = classifier_logits(p, zero);
  EXPECT_EQ(l0.at(0), 0.0);
  EXPECT_EQ(l0.at(1), 0.0);
  const Tensor sm = softmax(l0, 1);
  EXPECT_EQ(sm.at(0), 0.5);

  p.cls_b.values_mut()[0] = 2.0;
  const Tensor prob = softmax(classifier_logits(p, zero), 1);
  EXPECT_NEAR(prob.at(0), std::exp(2.0) / (std::exp(2.0) + 1.0), 1e-15);

  std::mt19937_64 rng(5);
  BackboneParams q = BackboneParams::init(rng);
  for (double& v : q.cls_b.values_mut()) v = 0.3;
  const Tensor x = gtta::testing::random_tensor(rng, {3, kFeatures}, -1, 1, false);
  const Tensor logits = classifier_logits(q, x);
  for (std::size_t i = 0; i < 3; ++i)
    for (std::size_t k = 0; k < kClasses; ++k) {
      double s = q.cls_b.at(k);
      for (std::size_t j = 0; j < kFeatures; ++j) s += x.at(i * kFeatures + j) * q.cls_w.at(j * kClasses + k);
      EXPECT_NEAR(logits.at(i * kClasses + k), s, 1e-12);
    }
}

TEST(BackboneForward, EndToEndGradCheck) {
  std::mt19937_64 rng(6);
  BackboneParams p = BackboneParams::init(rng);
  for (Tensor t : {p.embed_b, p.mix1_b, p.mix2_b, p.cls_b})
    for (double& v : t.values_mut()) v = std::uniform_real_distribution<double>(-0.2, 0.2)(rng);
  const auto a = random_image(rng), b = random_image(rng);
  const Tensor patches = patchify_batch({a, b});
  const std::vector<int> labels{1, 0};
  auto params = p.all();
  auto loss = [&] { return cross_entropy(classifier_logits(p, backbone_forward(p, patches).pooled), labels); };
  const GradCheckResult r = grad_check_sampled(loss, params, 60, 99);
  EXPECT_LT(r.max_rel_error, 1e-6) << "param " << r.worst_param << " index " << r.worst_index << " analytic "
                                   << r.analytic << " numeric " << r.numeric;
}

TEST(BackboneParams, NamedRoundTripAndClone) {
  std::mt19937_64 rng(7);
  const BackboneParams p = BackboneParams::init(rng);
  const TensorMap named = p.named();
  EXPECT_EQ(named.size(), 8u);
  for (const auto& [name, t] : named) EXPECT_EQ(name.rfind("backbone/", 0), 0u);
  const BackboneParams q = BackboneParams::from_named(checkpoint_from_json(checkpoint_to_json(named)));
  EXPECT_EQ(checkpoint_digest(q.named()), checkpoint_digest(named));
  BackboneParams c = p.clone();
  c.cls_w.values_mut()[0] += 1.0;
  EXPECT_NE(c.cls_w.at(0), p.cls_w.at(0));
  EXPECT_TRUE(c.cls_w.requires_grad());
}
