#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>
#include <sstream>

#include "gtta/gradcheck.hpp"
#include "gtta/grt.hpp"
#include "gtta/optim.hpp"
#include "gtta/synthdata.hpp"
#include "test_util.hpp"

using namespace gtta;
using namespace gtta::model;
using gtta::testing::error_code_of;
using gtta::testing::random_tensor;

namespace {

void fill(const Tensor& t, double v) {
  for (double& x : const_cast<Tensor&>(t).values_mut()) x = v;
}

GrtParams params(std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  return GrtParams::init(rng);
}

// Random orthonormal rows via Gram-Schmidt.
std::vector<double> orthonormal(std::mt19937_64& rng, std::size_t n) {
  std::normal_distribution<double> g(0.0, 1.0);
  std::vector<double> q(n * n);
  for (std::size_t i = 0; i < n; ++i) {
    std::vector<double> v(n);
    for (double& x : v) x = g(rng);
    for (int pass = 0; pass < 2; ++pass)
      for (std::size_t j = 0; j < i; ++j) {
        double d = 0;
        for (std::size_t k = 0; k < n; ++k) d += v[k] * q[j * n + k];
        for (std::size_t k = 0; k < n; ++k) v[k] -= d * q[j * n + k];
      }
    double norm = 0;
    for (double x : v) norm += x * x;
    norm = std::sqrt(norm);
    for (std::size_t k = 0; k < n; ++k) q[i * n + k] = v[k] / norm;
  }
  return q;
}

// Random probe made orthogonal to `out`, so sum(out * probe) is zero at the
// base point and central differences are not swamped by rounding of |f|.
Tensor balanced_probe(std::mt19937_64& rng, const Tensor& out) {
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  std::vector<double> r(out.size());
  for (double& v : r) v = u(rng);
  const auto o = out.values();
  double ro = 0, oo = 0;
  for (std::size_t i = 0; i < r.size(); ++i) {
    ro += r[i] * o[i];
    oo += o[i] * o[i];
  }
  for (std::size_t i = 0; i < r.size(); ++i) r[i] -= ro / oo * o[i];
  return tensor(out.shape(), std::move(r));
}

}  // namespace

TEST(ProjectNodes, PositionalSignalAndGradient) {
  GrtParams p = params(1);
  const Tensor zero = Tensor::zeros({1, kRegions, kFeatures});
  fill(p.pos_embed, 0.0);
  const Tensor zero_nodes = project_nodes(p, zero);
  for (double v : zero_nodes.values()) EXPECT_EQ(v, 0.0);
  p = params(1);
  const Tensor nodes = project_nodes(p, zero);
  for (std::size_t i = 0; i < nodes.size(); ++i) EXPECT_EQ(nodes.at(i), p.pos_embed.at(i));

  std::mt19937_64 rng(2);
  const Tensor regions = random_tensor(rng, {1, kRegions, kFeatures}, -1, 1, true);
  std::vector<Tensor> ps{p.proj_w, p.pos_embed, regions};
  const Tensor probe = balanced_probe(rng, project_nodes(p, regions));
  // f is affine in each coordinate, so a wide stencil is exact and keeps
  // rounding in the 4096-term sum small relative to the step.
  const auto r = grad_check_sampled([&] { return sum(mul(project_nodes(p, regions), probe)); }, ps, 300, 3, 0.1);
  EXPECT_LT(r.max_rel_error, 1e-8) << r.worst_param << ":" << r.worst_index << " " << r.analytic << " vs " << r.numeric;
  EXPECT_EQ(error_code_of([&] { project_nodes(p, Tensor::zeros({1, kRegions, 5})); }), Errc::ShapeMismatch);
}

TEST(EdgeMatrix, OrthonormalZeroOracleAndBilinearity) {
  GrtParams p = params(2);
  std::mt19937_64 rng(3);
  const Tensor q = tensor({1, kRegions, kNodeFeatures}, orthonormal(rng, kRegions));
  fill(p.edge_w, 0.0);
  for (std::size_t i = 0; i < kNodeFeatures; ++i) p.edge_w.values_mut()[i * kNodeFeatures + i] = 1.0;
  const Tensor eye = edge_matrix(p, q);
  for (std::size_t i = 0; i < kRegions; ++i)
    for (std::size_t j = 0; j < kRegions; ++j) EXPECT_NEAR(eye.at(i * kRegions + j), i == j ? 1.0 : 0.0, 1e-12);

  fill(p.edge_w, 0.0);
  const Tensor none = edge_matrix(p, q);
  for (double v : none.values()) EXPECT_EQ(v, 0.0);

  p = params(2);
  const Tensor h = random_tensor(rng, {2, kRegions, kNodeFeatures}, -1, 1, false);
  const Tensor a = edge_matrix(p, h);
  for (std::size_t b = 0; b < 2; ++b)
    for (std::size_t i = 0; i < kRegions; i += 7)
      for (std::size_t j = 0; j < kRegions; j += 5) {
        double s = 0;
        for (std::size_t x = 0; x < kNodeFeatures; ++x)
          for (std::size_t y = 0; y < kNodeFeatures; ++y)
            s += h.at((b * kRegions + i) * kNodeFeatures + x) * p.edge_w.at(x * kNodeFeatures + y) *
                 h.at((b * kRegions + j) * kNodeFeatures + y);
        EXPECT_NEAR(a.at((b * kRegions + i) * kRegions + j), s, 1e-10);
      }
  const Tensor a3 = edge_matrix(p, scale(h, 3.0));
  for (std::size_t i = 0; i < a.size(); ++i) EXPECT_NEAR(a3.at(i), 9.0 * a.at(i), 1e-9 * (1 + std::abs(a.at(i))));
}

TEST(GraphAttention, LimitsAndRowStochastic) {
  GrtParams p = params(4);
  std::mt19937_64 rng(5);
  const Tensor nodes = random_tensor(rng, {1, kRegions, kNodeFeatures}, -1, 1, false);
  fill(p.a_src, 0.0);
  fill(p.a_dst, 0.0);

  std::vector<double> dom(kRegions * kRegions, 2.0 - 1000.0);
  for (std::size_t i = 0; i < kRegions; ++i) dom[i * kRegions + i] = 2.0;
  const Attention att = attention_weights(p, nodes, tensor({1, kRegions, kRegions}, dom));
  const Tensor out = graph_attention(p, nodes, tensor({1, kRegions, kRegions}, dom));
  const Tensor expect = elu(att.transformed);
  for (std::size_t i = 0; i < out.size(); ++i) EXPECT_NEAR(out.at(i), expect.at(i), 1e-12);

  const Tensor zeroA = Tensor::zeros({1, kRegions, kRegions});
  const Tensor uni = graph_attention(p, nodes, zeroA);
  const Tensor mean_t = elu(mean(attention_weights(p, nodes, zeroA).transformed, 1));
  for (std::size_t i = 0; i < kRegions; ++i)
    for (std::size_t f = 0; f < kAttFeatures; ++f) EXPECT_NEAR(uni.at(i * kAttFeatures + f), mean_t.at(f), 1e-12);

  p = params(4);
  const Tensor adj = edge_matrix(p, nodes);
  const Tensor alpha = attention_weights(p, nodes, adj).alpha;
  for (std::size_t i = 0; i < kRegions; ++i) {
    double s = 0;
    for (std::size_t j = 0; j < kRegions; ++j) s += alpha.at(i * kRegions + j);
    EXPECT_NEAR(s, 1.0, 1e-12);
  }
}

TEST(GraphAttention, GradCheckThroughEdgesAndAttention) {
  GrtParams p = params(6);
  std::mt19937_64 rng(7);
  // small-magnitude nodes keep the attention logits away from saturation
  const Tensor nodes = random_tensor(rng, {1, kRegions, kNodeFeatures}, -0.3, 0.3, true);
  const Tensor probe = random_tensor(rng, {1, kRegions, kAttFeatures}, -1, 1, false);
  std::vector<Tensor> ps{p.edge_w, p.att_w, p.a_src, p.a_dst, nodes};
  const auto r = grad_check_sampled(
      [&] { return sum(mul(graph_attention(p, nodes, edge_matrix(p, nodes)), probe)); }, ps, 120, 8);
  EXPECT_LT(r.max_rel_error, 1e-6) << r.worst_param << ":" << r.worst_index;
}

TEST(TopKPool, IdentitySelectionTieRuleAndErrors) {
  GrtParams p = params(8);
  std::mt19937_64 rng(9);
  const Tensor h = random_tensor(rng, {2, kRegions, kAttFeatures}, -1, 1, false);
  const TopK all = topk_pool(p, h, kRegions);
  for (std::size_t b = 0; b < 2; ++b) {
    std::vector<std::size_t> want(kRegions);
    std::iota(want.begin(), want.end(), 0);
    EXPECT_EQ(all.kept[b], want);
    for (std::size_t n = 0; n < kRegions; ++n) {
      const double s = all.scores.at(b * kRegions + n);
      for (std::size_t f = 0; f < kAttFeatures; f += 9) {
        const std::size_t at = (b * kRegions + n) * kAttFeatures + f;
        EXPECT_NEAR(all.pooled.at(at), s * h.at(at), 1e-15);
      }
    }
  }

  fill(p.a_pool, 0.0);
  const TopK tie = topk_pool(p, h, kKeep);
  for (std::size_t b = 0; b < 2; ++b) {
    for (std::size_t i = 0; i < kKeep; ++i) EXPECT_EQ(tie.kept[b][i], i);
    for (std::size_t n = 0; n < kKeep; ++n)
      for (std::size_t f = 0; f < kAttFeatures; ++f) {
        EXPECT_EQ(tie.pooled.at((b * kKeep + n) * kAttFeatures + f), 0.5 * h.at((b * kRegions + n) * kAttFeatures + f));
      }
  }
  EXPECT_EQ(error_code_of([&] { topk_pool(p, h, 0); }), Errc::BadK);
  EXPECT_EQ(error_code_of([&] { topk_pool(p, h, kRegions + 1); }), Errc::BadK);
}

TEST(TopKPool, MatchesSortOracleAndKeptDominatesDropped) {
  std::mt19937_64 rng(10);
  std::uniform_int_distribution<int> level(0, 9);  // coarse values force ties
  for (int trial = 0; trial < 200; ++trial) {
    std::vector<double> s(kRegions);
    for (double& v : s) v = level(rng) / 10.0;
    const std::size_t k = 1 + static_cast<std::size_t>(trial % kRegions);
    // oracle: full sort of (score desc, index asc) pairs
    std::vector<std::pair<double, std::size_t>> pairs;
    for (std::size_t i = 0; i < s.size(); ++i) pairs.emplace_back(-s[i], i);
    std::sort(pairs.begin(), pairs.end());
    std::vector<std::size_t> want;
    for (std::size_t i = 0; i < k; ++i) want.push_back(pairs[i].second);
    std::sort(want.begin(), want.end());
    const auto got = top_k_indices(s, k);
    ASSERT_EQ(got, want);
    double min_kept = 2, max_dropped = -1;
    for (std::size_t i = 0; i < s.size(); ++i) {
      if (std::binary_search(got.begin(), got.end(), i)) {
        min_kept = std::min(min_kept, s[i]);
      } else {
        max_dropped = std::max(max_dropped, s[i]);
      }
    }
    EXPECT_GE(min_kept, max_dropped);
  }
}

TEST(GrtLogits, ZeroOracleAndGradCheck) {
  GrtParams p = params(11);
  const Tensor zero = Tensor::zeros({1, kKeep, kAttFeatures});
  const Tensor zl = grt_logits(p, zero);
  for (double v : zl.values()) EXPECT_EQ(v, 0.0);

  std::mt19937_64 rng(12);
  for (double& v : p.cls_b.values_mut()) v = 0.1;
  const Tensor pooled = random_tensor(rng, {2, kKeep, kAttFeatures}, -1, 1, true);
  const Tensor l = grt_logits(p, pooled);
  for (std::size_t b = 0; b < 2; ++b)
    for (std::size_t k = 0; k < kClasses; ++k) {
      double s = p.cls_b.at(k);
      for (std::size_t j = 0; j < kKeep * kAttFeatures; ++j)
        s += pooled.at(b * kKeep * kAttFeatures + j) * p.cls_w.at(j * kClasses + k);
      EXPECT_NEAR(l.at(b * kClasses + k), s, 1e-12);
    }
  std::vector<Tensor> ps{p.cls_w, p.cls_b, pooled};
  const std::vector<int> y{0, 1};
  const Tensor probe = balanced_probe(rng, grt_logits(p, pooled));
  // affine in each coordinate, see ProjectNodes
  const auto r = grad_check_sampled([&] { return sum(mul(grt_logits(p, pooled), probe)); }, ps, 300, 13, 0.1);
  EXPECT_LT(r.max_rel_error, 1e-8) << r.worst_param << ":" << r.worst_index << " " << r.analytic << " vs " << r.numeric;
  EXPECT_EQ(error_code_of([&] { grt_logits(p, Tensor::zeros({1, kKeep - 1, kAttFeatures})); }), Errc::ShapeMismatch);
}

TEST(GrtLoss, LambdaOneDetachmentAndErrors) {
  std::mt19937_64 rng(14);
  Tensor lb = random_tensor(rng, {5, kClasses}, -2, 2, true);
  const Tensor lg = random_tensor(rng, {5, kClasses}, -2, 2, true);
  const std::vector<int> y{0, 1, 1, 0, 1};
  const double full = grt_loss(lb, lg, y, 1.0).item();
  const double two = (cross_entropy(lb, y) + cross_entropy(lg, y)).item();
  EXPECT_NEAR(full, two, 1e-12);
  EXPECT_EQ(error_code_of([&] { grt_loss(lb, lg, y, 1.5); }), Errc::InvalidLambda);
  EXPECT_EQ(error_code_of([&] { grt_loss(lb, lg, y, -0.1); }), Errc::InvalidLambda);

  // backbone gradient with and without the mutual term
  std::vector<double> with, without;
  {
    Tape t;
    backward(grt_loss(lb, lg, y, 0.5));
    with.assign(lb.grad().begin(), lb.grad().end());
  }
  lb.zero_grad();
  {
    Tape t;
    backward(cross_entropy(lb, y) + 0.5 * cross_entropy(lg, y));
    without.assign(lb.grad().begin(), lb.grad().end());
  }
  for (std::size_t i = 0; i < with.size(); ++i) EXPECT_EQ(with[i], without[i]);

  // hard-label invariance under positive rescaling of the backbone logits
  const double a = grt_loss(lb.detach(), lg.detach(), y, 0.0).item() - cross_entropy(lb.detach(), y).item();
  const Tensor scaled = scale(lb.detach(), 7.5);
  const double b = grt_loss(scaled, lg.detach(), y, 0.0).item() - cross_entropy(scaled, y).item();
  EXPECT_NEAR(a, b, 1e-12);
}

TEST(GrtForward, FullStepIsDeterministic) {
  auto run = [] {
    std::mt19937_64 rng(15);
    BackboneParams bp = BackboneParams::init(rng);
    GrtParams gp = GrtParams::init(rng);
    data::DomainSpec spec = data::default_source_spec();
    spec.n_glaucoma = spec.n_normal = 2;
    const data::Dataset ds = data::generate_domain(spec);
    std::vector<std::span<const float>> imgs;
    std::vector<int> y;
    for (const auto& s : ds.samples) {
      imgs.emplace_back(s.image);
      y.push_back(s.label);
    }
    std::vector<Tensor> ps = bp.all();
    for (const Tensor& t : gp.all()) ps.push_back(t);
    AdamState st;
    {
      Tape tape;
      const Features f = backbone_forward(bp, patchify_batch(imgs));
      backward(grt_loss(classifier_logits(bp, f.pooled), grt_forward(gp, f.regions).logits, y));
    }
    adam_step(ps, st, 1e-3);
    TensorMap all = bp.named();
    all.merge(gp.named());
    return checkpoint_digest(all);
  };
  EXPECT_EQ(run(), run());
}

TEST(GrtForward, GradCheckFullLoss) {
  std::mt19937_64 rng(16);
  BackboneParams bp = BackboneParams::init(rng);
  GrtParams gp = GrtParams::init(rng);
  data::DomainSpec spec = data::default_source_spec();
  spec.n_glaucoma = spec.n_normal = 1;
  const data::Dataset ds = data::generate_domain(spec);
  const Tensor patches = patchify_batch({ds.samples[0].image, ds.samples[1].image});
  const std::vector<int> y{ds.samples[0].label, ds.samples[1].label};
  std::vector<Tensor> ps = bp.all();
  for (const Tensor& t : gp.all()) ps.push_back(t);
  auto loss = [&] {
    const Features f = backbone_forward(bp, patches);
    return grt_loss(classifier_logits(bp, f.pooled), grt_forward(gp, f.regions).logits, y);
  };
  // Some pos_embed gradients are ~1e-6 against a loss of ~1; a 1e-4 step
  // keeps rounding in f below the tolerance. Kinks are handled by the check.
  const auto r = grad_check_sampled(loss, ps, 25, 17, 1e-4);
  EXPECT_LT(r.max_rel_error, 1e-6) << r.worst_param << ":" << r.worst_index << " " << r.analytic << " vs "
                                   << r.numeric << " refined " << r.refined << " skipped " << r.skipped;
}

TEST(RegionAttribution, DegenerateNormalizedAndFormats) {
  std::mt19937_64 rng(18);
  BackboneParams bp = BackboneParams::init(rng);
  std::vector<float> img(data::kPixels);
  for (float& v : img) v = std::uniform_real_distribution<float>(0, 1)(rng);

  BackboneParams zero = bp.clone();
  fill(zero.cls_w, 0.0);
  for (double v : region_attribution(zero, img, 1)) EXPECT_DOUBLE_EQ(v, 1.0 / kRegions);

  const auto map = region_attribution(bp, img, 1);
  EXPECT_NEAR(std::accumulate(map.begin(), map.end(), 0.0), 1.0, 1e-9);
  for (double v : map) EXPECT_GE(v, 0.0);

  // oracle: |<w_c, r_n>| / N normalized, since d logit / d r_n = w_c / N
  const Features f = backbone_forward(bp, patchify_batch({img}));
  std::vector<double> want(kRegions);
  for (std::size_t n = 0; n < kRegions; ++n) {
    double s = 0;
    for (std::size_t j = 0; j < kFeatures; ++j) s += f.regions.at(n * kFeatures + j) * bp.cls_w.at(j * kClasses + 1);
    want[n] = std::abs(s);
  }
  const double total = std::accumulate(want.begin(), want.end(), 0.0);
  for (std::size_t n = 0; n < kRegions; ++n) EXPECT_NEAR(map[n], want[n] / total, 1e-12);

  const std::string csv = attribution_csv(map);
  EXPECT_EQ(std::count(csv.begin(), csv.end(), '\n'), 8);
  EXPECT_EQ(std::count(csv.begin(), csv.end(), ','), 8 * 7);
  std::istringstream pgm(attribution_pgm(map));
  std::string magic;
  int w, h, maxv, peak = 0;
  pgm >> magic >> w >> h >> maxv;
  EXPECT_EQ(magic, "P2");
  EXPECT_EQ(w, 8);
  EXPECT_EQ(h, 8);
  EXPECT_EQ(maxv, 255);
  for (int i = 0; i < 64; ++i) {
    int v;
    pgm >> v;
    EXPECT_GE(v, 0);
    EXPECT_LE(v, 255);
    peak = std::max(peak, v);
  }
  EXPECT_EQ(peak, 255);
}

TEST(GrtParams, NamedRoundTrip) {
  const GrtParams p = params(19);
  const TensorMap named = p.named();
  for (const auto& [name, t] : named) EXPECT_EQ(name.rfind("grt/", 0), 0u);
  const GrtParams q = GrtParams::from_named(checkpoint_from_json(checkpoint_to_json(named)));
  EXPECT_EQ(checkpoint_digest(q.named()), checkpoint_digest(named));
  EXPECT_EQ(q.k_keep(), kKeep);
  std::mt19937_64 rng(3);
  EXPECT_EQ(GrtParams::init(rng, 16).k_keep(), 16u);
  EXPECT_EQ(error_code_of([&] { GrtParams::init(rng, 0); }), Errc::BadK);
}
