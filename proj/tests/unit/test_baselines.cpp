#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

#include "gtta/backbone.hpp"
#include "gtta/baselines.hpp"
#include "gtta/checkpoint.hpp"
#include "gtta/gradcheck.hpp"
#include "test_util.hpp"

using namespace gtta;
using namespace gtta::baselines;
using gtta::testing::error_code_of;
using gtta::testing::random_tensor;

namespace {

constexpr std::size_t F = 16;

double norm_diff(const Tensor& a, const Tensor& b) {
  double s = 0;
  for (std::size_t i = 0; i < a.size(); ++i) s += (a.at(i) - b.at(i)) * (a.at(i) - b.at(i));
  return std::sqrt(s);
}

}  // namespace

TEST(Tent, ConfidentBatchBarelyMoves) {
  // logits gap of 60: entropy and its gradient are ~e^-60
  std::vector<double> w(F * 2, 0.0);
  w[0] = 30.0;
  w[1] = -30.0;
  const Tensor wt = tensor({F, 2}, w, true), bt = tensor({2}, {0.0, 0.0}, true);
  ClassifierState s = ClassifierState::create(wt, bt);
  std::vector<double> f(4 * F, 0.0);
  for (std::size_t i = 0; i < 4; ++i) f[i * F] = 1.0;
  tent_step(s, tensor({4, F}, f));
  EXPECT_LT(norm_diff(s.w, wt) + norm_diff(s.b, bt), 1e-6);
}

TEST(Tent, NearUniformSampleMatchesScalarSimulation) {
  // logits [0, 0] exactly are a stationary point of the entropy, so the
  // step is checked at a small gap instead
  const Tensor w = Tensor::zeros({F, 2}, true);
  const Tensor b = tensor({2}, {0.1, 0.0}, true);
  std::vector<double> f(F, 0.0);
  f[0] = 1.0;
  const Tensor x = tensor({1, F}, f);
  ClassifierState s = ClassifierState::create(w, b);
  const double before = tent_step(s, x);

  // scalar simulation: dH/dl_k = -p_k (log p_k + H); first Adam step moves a
  // parameter by -lr g / (|g| + eps); w[0][k] and b[k] share the gradient
  auto entropy_of = [](double l0, double l1) {
    const double p0 = 1.0 / (1.0 + std::exp(l1 - l0)), p1 = 1.0 - p0;
    return -(p0 * std::log(p0) + p1 * std::log(p1));
  };
  const double l[2] = {0.1, 0.0};
  const double p0 = 1.0 / (1.0 + std::exp(l[1] - l[0]));
  const double p[2] = {p0, 1.0 - p0};
  const double h = entropy_of(l[0], l[1]);
  double next[2];
  for (int k = 0; k < 2; ++k) {
    const double g = -p[k] * (std::log(p[k]) + h);
    next[k] = l[k] + 2.0 * (-kDefaultLr * g / (std::abs(g) + 1e-8));
  }
  EXPECT_NEAR(before, h, 1e-15);
  const double after = tent_objective(s.w, s.b, x).item();
  EXPECT_NEAR(after, entropy_of(next[0], next[1]), 1e-12);
  EXPECT_LT(after, before);

  // at exactly [0, 0] nothing moves
  ClassifierState flat = ClassifierState::create(w, Tensor::zeros({2}, true));
  tent_step(flat, x);
  EXPECT_EQ(norm_diff(flat.w, w) + norm_diff(flat.b, Tensor::zeros({2})), 0.0);
}

TEST(Tent, GradCheck) {
  std::mt19937_64 rng(2);
  Tensor w = random_tensor(rng, {F, 2}, -0.5, 0.5, true);
  Tensor b = random_tensor(rng, {2}, -0.2, 0.2, true);
  const Tensor x = random_tensor(rng, {6, F}, -1, 1, false);
  std::vector<Tensor> ps{w, b};
  const auto r = grad_check(
      [&] { return tent_objective(w, b, x); }, ps);
  EXPECT_LT(r.max_rel_error, 1e-6);
  EXPECT_EQ(r.checked, F * 2 + 2);
}

TEST(Plclf, ThresholdAboveOneIsNoOp) {
  std::mt19937_64 rng(3);
  const Tensor w = random_tensor(rng, {F, 2}, -2, 2, true), b = random_tensor(rng, {2}, -1, 1, true);
  ClassifierState s = ClassifierState::create(w, b);
  EXPECT_EQ(plclf_step(s, random_tensor(rng, {8, F}, -1, 1, false), 1.01), 0u);
  EXPECT_EQ(checkpoint_digest({{"w", s.w}, {"b", s.b}}), checkpoint_digest({{"w", w}, {"b", b}}));
  EXPECT_EQ(s.opt.step, 0u);
}

TEST(Plclf, ConfidentBatchHasNearZeroLoss) {
  std::vector<double> w(F * 2, 0.0);
  w[0] = 20.0;
  w[1] = -20.0;
  const Tensor wt = tensor({F, 2}, w, true), bt = tensor({2}, {0.0, 0.0}, true);
  std::vector<double> f(4 * F, 0.0);
  for (std::size_t i = 0; i < 4; ++i) f[i * F] = i % 2 ? 1.0 : -1.0;
  const Tensor x = tensor({4, F}, f);
  const std::vector<int> y{1, 0, 1, 0};
  EXPECT_LT(cross_entropy(model::linear(x, wt, bt), y).item(), 1e-12);
  ClassifierState s = ClassifierState::create(wt, bt);
  EXPECT_EQ(plclf_step(s, x), 4u);
}

TEST(Plclf, UpdateUsesExactlyTheConfidentSubset) {
  std::mt19937_64 rng(4);
  const Tensor w = random_tensor(rng, {F, 2}, -1, 1, true), b = random_tensor(rng, {2}, -0.5, 0.5, true);
  const Tensor x = random_tensor(rng, {20, F}, -1, 1, false);
  const double threshold = 0.8;

  // masked oracle: recompute probabilities by hand, keep the subset, one Adam step
  std::vector<std::size_t> keep;
  std::vector<int> labels;
  std::vector<double> sub;
  for (std::size_t i = 0; i < 20; ++i) {
    double l[2];
    for (std::size_t k = 0; k < 2; ++k) {
      l[k] = b.at(k);
      for (std::size_t j = 0; j < F; ++j) l[k] += x.at(i * F + j) * w.at(j * 2 + k);
    }
    const double p1 = 1.0 / (1.0 + std::exp(l[0] - l[1]));
    if (std::max(p1, 1 - p1) >= threshold) {
      keep.push_back(i);
      labels.push_back(p1 > 1 - p1 ? 1 : 0);
      sub.insert(sub.end(), x.values().begin() + i * F, x.values().begin() + (i + 1) * F);
    }
  }
  ASSERT_GT(keep.size(), 0u);
  ASSERT_LT(keep.size(), 20u);
  Tensor ow = w.clone(), ob = b.clone();
  std::vector<Tensor> ps{ow, ob};
  AdamState st;
  {
    Tape t;
    backward(cross_entropy(model::linear(tensor({keep.size(), F}, sub), ow, ob), labels));
  }
  adam_step(ps, st, kDefaultLr);

  ClassifierState s = ClassifierState::create(w, b);
  EXPECT_EQ(plclf_step(s, x, threshold), keep.size());
  EXPECT_EQ(checkpoint_digest({{"w", s.w}, {"b", s.b}}), checkpoint_digest({{"w", ow}, {"b", ob}}));
}

TEST(T3a, FreshSupportEqualsCosineClassifier) {
  std::mt19937_64 rng(5);
  const Tensor w = random_tensor(rng, {F, 2}, -1, 1, true);
  const T3aSupport s = T3aSupport::from_classifier(w);
  for (int t = 0; t < 20; ++t) {
    const Tensor z = random_tensor(rng, {F}, -1, 1, false);
    double zz = 0, c[2] = {0, 0}, n[2] = {0, 0};
    for (std::size_t j = 0; j < F; ++j) {
      zz += z.at(j) * z.at(j);
      for (std::size_t k = 0; k < 2; ++k) {
        c[k] += z.at(j) * w.at(j * 2 + k);
        n[k] += w.at(j * 2 + k) * w.at(j * 2 + k);
      }
    }
    const double l0 = c[0] / std::sqrt(zz * n[0]), l1 = c[1] / std::sqrt(zz * n[1]);
    const auto p = t3a_scores(s, z.values());
    EXPECT_NEAR(p[1], 1.0 / (1.0 + std::exp(l0 - l1)), 1e-12);
  }
}

TEST(T3a, FilterMatchesSortOracleAndSingleEntryBoundary) {
  std::mt19937_64 rng(6);
  const Tensor w = random_tensor(rng, {F, 2}, -1, 1, true);
  T3aSupport s = T3aSupport::from_classifier(w, 5);
  std::uniform_real_distribution<double> u(0.5, 1.0);
  std::vector<std::vector<std::pair<double, std::size_t>>> inserted(2);  // (entropy, order)
  for (std::size_t c = 0; c < 2; ++c) inserted[c].push_back({0.0, 0});
  for (std::size_t t = 1; t <= 40; ++t) {
    const Tensor z = random_tensor(rng, {F}, -1, 1, false);
    // quantized probabilities force entropy ties
    const double a = std::round(u(rng) * 10) / 10;
    const std::vector<double> p = t % 3 ? std::vector<double>{a, 1 - a} : std::vector<double>{1 - a, a};
    const std::size_t cls = p[0] >= p[1] ? 0 : 1;
    double h = 0;
    for (double v : p)
      if (v > 0) h -= v * std::log(v);
    inserted[cls].push_back({h, t});
    t3a_predict(s, z.values(), p);

    for (std::size_t c = 0; c < 2; ++c) {
      auto want = inserted[c];
      std::sort(want.begin(), want.end());
      if (want.size() > 5) want.resize(5);
      inserted[c] = want;
      ASSERT_EQ(s.lists[c].size(), want.size());
      std::vector<double> got_h, want_h;
      for (const auto& e : s.lists[c]) got_h.push_back(e.entropy);
      for (const auto& e : want) want_h.push_back(e.first);
      std::sort(got_h.begin(), got_h.end());
      ASSERT_EQ(got_h, want_h);
    }
  }

  // M = 1: the prototype is the single lowest-entropy entry
  T3aSupport one = T3aSupport::from_classifier(w, 1);
  const Tensor z = random_tensor(rng, {F}, -1, 1, false);
  t3a_predict(one, z.values(), std::vector<double>{0.9, 0.1});
  ASSERT_EQ(one.lists[0].size(), 1u);
  EXPECT_EQ(one.lists[0][0].entropy, 0.0);
}

TEST(T3a, TrainingFreeAndDeterministic) {
  std::mt19937_64 rng(7);
  const Tensor w = random_tensor(rng, {F, 2}, -1, 1, true), b = random_tensor(rng, {2}, -0.5, 0.5, true);
  const auto before = checkpoint_digest({{"w", w}, {"b", b}});
  const Tensor x = random_tensor(rng, {30, F}, -1, 1, false);
  T3aSupport s1 = T3aSupport::from_classifier(w), s2 = T3aSupport::from_classifier(w);
  const Tensor p1 = t3a_predict_batch(s1, x, w, b);
  const Tensor p2 = t3a_predict_batch(s2, x, w, b);
  EXPECT_EQ(checkpoint_digest({{"p", p1}}), checkpoint_digest({{"p", p2}}));
  EXPECT_EQ(checkpoint_digest({{"w", w}, {"b", b}}), before);
  EXPECT_EQ(s1.size(), 32u);
  EXPECT_EQ(error_code_of([&] { T3aSupport::from_classifier(w, 0); }), Errc::DomainError);
}
