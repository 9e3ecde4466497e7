#include <gtest/gtest.h>

#include <algorithm>
#include <cstring>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <set>

#include "gtta/synthdata.hpp"
#include "test_util.hpp"

using namespace gtta;
using namespace gtta::data;
using gtta::testing::error_code_of;

namespace {

DomainSpec neutral(std::size_t ng, std::size_t nn, std::uint64_t seed) {
  DomainSpec s;
  s.name = "neutral";
  s.n_glaucoma = ng;
  s.n_normal = nn;
  s.seed = seed;
  return s;
}

float pixel(const Sample& s, std::size_t c, std::size_t r, std::size_t col) {
  return s.image[(c * kImageSize + r) * kImageSize + col];
}

std::filesystem::path temp_dir(const std::string& tag) {
  auto p = std::filesystem::temp_directory_path() / ("gtta_synth_" + tag);
  std::filesystem::create_directories(p);
  return p;
}

}  // namespace

TEST(RenderSample, MarkerIsFairCoinAtZeroCorrelation) {
  DomainSpec spec = neutral(0, 0, 0);
  std::mt19937_64 rng(9);
  int bright = 0;
  const int n = 4000;
  for (int i = 0; i < n; ++i) bright += render_sample(rng, spec, 0).geometry->marker_bright ? 1 : 0;
  EXPECT_NEAR(static_cast<double>(bright) / n, 0.5, 0.03);
}

TEST(RenderSample, DiscBrighterThanBackground) {
  DomainSpec spec = neutral(0, 0, 0);
  std::mt19937_64 rng(4);
  for (int label : {0, 1}) {
    const Sample s = render_sample(rng, spec, label);
    const auto& g = *s.geometry;
    double disc = 0, back = 0;
    int nd = 0, nb = 0;
    for (std::size_t r = 0; r < kImageSize; ++r)
      for (std::size_t c = 0; c < kImageSize; ++c) {
        const double d = std::hypot(r - g.row, c - g.col);
        double v = 0;
        for (std::size_t ch = 0; ch < kChannels; ++ch) v += pixel(s, ch, r, c);
        if (d <= g.radius) {
          disc += v;
          ++nd;
        } else if (r > kMarkerSize + 1 || c > kMarkerSize + 1) {
          back += v;
          ++nb;
        }
      }
    EXPECT_GT(disc / nd, back / nb) << "label " << label;
  }
}

TEST(RenderSample, SameSeedIsByteIdentical) {
  DomainSpec spec = default_target_specs()[2];
  std::mt19937_64 a(42), b(42);
  const Sample x = render_sample(a, spec, 1);
  const Sample y = render_sample(b, spec, 1);
  EXPECT_EQ(0, std::memcmp(x.image.data(), y.image.data(), x.image.size() * sizeof(float)));
}

TEST(RenderSample, PixelsClippedAndGeometryInRange) {
  DomainSpec spec = default_target_specs()[3];
  spec.noise_sigma = 0.3;
  std::mt19937_64 rng(2);
  for (int i = 0; i < 50; ++i) {
    const Sample s = render_sample(rng, spec, i % 2);
    for (float v : s.image) ASSERT_TRUE(v >= 0.0f && v <= 1.0f);
    const auto& g = *s.geometry;
    EXPECT_GE(g.radius, 8.0);
    EXPECT_LE(g.radius, 12.0);
    EXPECT_LE(std::abs(g.row - 31.5), 6.0);
    EXPECT_LE(std::abs(g.col - 31.5), 6.0);
  }
}

TEST(Style, LabelIndependentAndMatchesFormula) {
  DomainSpec spec = default_target_specs()[0];
  spec.noise_sigma = 0.0;
  std::mt19937_64 rng(17);
  float cdr = 0;
  DiscGeometry geo;
  for (int label : {0, 1}) {
    const auto base = render_base(rng, spec, label, cdr, geo);
    auto styled = base;
    std::mt19937_64 noise_rng(1);
    apply_style(styled, spec, noise_rng);
    for (std::size_t c = 0; c < kChannels; ++c)
      for (std::size_t i = 0; i < kImageSize * kImageSize; ++i) {
        const double v = base[c * kImageSize * kImageSize + i];
        const double want = std::clamp(((v - 0.5) * spec.contrast_gain + 0.5 + spec.brightness_shift) *
                                           spec.channel_gains[c],
                                       0.0, 1.0);
        ASSERT_EQ(styled[c * kImageSize * kImageSize + i], want);
      }
  }
}

TEST(GenerateDomain, CountsLabelsAndErrors) {
  const Dataset ds = generate_domain(neutral(0, 100, 3));
  EXPECT_EQ(ds.class_counts[0], 100u);
  EXPECT_EQ(ds.class_counts[1], 0u);
  EXPECT_EQ(ds.size(), 100u);
  EXPECT_EQ(error_code_of([] { generate_domain(neutral(0, 0, 1)); }), Errc::EmptyDomain);
  DomainSpec bad = neutral(1, 1, 1);
  bad.contrast_gain = 2.0;
  EXPECT_EQ(error_code_of([&] { generate_domain(bad); }), Errc::DomainError);
}

TEST(GenerateDomain, LabelRuleIsExactAndCountsConsistent) {
  const Dataset ds = generate_domain(neutral(70, 30, 5));
  std::array<std::size_t, 2> counts{0, 0};
  for (const Sample& s : ds.samples) {
    EXPECT_EQ(s.label == 1, s.cdr >= kCdrThreshold);
    counts[static_cast<std::size_t>(s.label)]++;
  }
  EXPECT_EQ(counts, ds.class_counts);
  EXPECT_EQ(counts[1], 70u);
}

TEST(GenerateDomain, DeterministicDigest) {
  const DomainSpec spec = default_target_specs()[4];
  DomainSpec small = spec;
  small.n_glaucoma = small.n_normal = 20;
  EXPECT_EQ(dataset_digest(generate_domain(small)), dataset_digest(generate_domain(small)));
  DomainSpec other = small;
  other.seed += 1;
  EXPECT_NE(dataset_digest(generate_domain(small)), dataset_digest(generate_domain(other)));
}

TEST(DefaultBenchmark, CompositionAndStyleTable) {
  const DomainSpec src = default_source_spec();
  EXPECT_EQ(src.n_glaucoma, 1000u);
  EXPECT_EQ(src.n_normal, 1000u);
  EXPECT_DOUBLE_EQ(src.spurious_corr, 0.9);
  const auto targets = default_target_specs();
  ASSERT_EQ(targets.size(), 7u);
  const double corr[] = {0, 0, -0.5, 0, -0.9, 0.3, 0};
  std::size_t total = src.n_glaucoma + src.n_normal;
  std::set<std::string> names;
  for (std::size_t i = 0; i < targets.size(); ++i) {
    const DomainSpec& t = targets[i];
    EXPECT_DOUBLE_EQ(t.spurious_corr, corr[i]);
    EXPECT_EQ(t.n_glaucoma, 150u);
    EXPECT_EQ(t.n_normal, 150u);
    EXPECT_NO_THROW(t.validate());
    total += t.n_glaucoma + t.n_normal;
    names.insert(t.name);
    int diffs = (t.brightness_shift != src.brightness_shift) + (t.contrast_gain != src.contrast_gain) +
                (t.channel_gains != src.channel_gains) + (t.noise_sigma != src.noise_sigma);
    EXPECT_GE(diffs, 2) << t.name;
    for (std::size_t j = 0; j < i; ++j) {
      const DomainSpec& u = targets[j];
      const bool same = t.brightness_shift == u.brightness_shift && t.contrast_gain == u.contrast_gain &&
                        t.channel_gains == u.channel_gains && t.noise_sigma == u.noise_sigma;
      EXPECT_FALSE(same) << t.name << " vs " << u.name;
    }
  }
  EXPECT_EQ(names.size(), 7u);
  EXPECT_EQ(total, 4100u);
}

TEST(DefaultBenchmark, SourceMarkerCorrelationMatchesSpec) {
  const Dataset source = generate_domain(default_source_spec());
  ASSERT_EQ(source.size(), 2000u);
  // independent count: phi coefficient from the 2x2 table
  double n11 = 0, n10 = 0, n01 = 0, n00 = 0;
  for (const Sample& s : source.samples) {
    const bool m = s.geometry->marker_bright;
    (s.label ? (m ? n11 : n01) : (m ? n10 : n00)) += 1;
  }
  const double phi =
      (n11 * n00 - n10 * n01) / std::sqrt((n11 + n10) * (n01 + n00) * (n11 + n01) * (n10 + n00));
  EXPECT_NEAR(phi, 0.9, 0.05);
  EXPECT_NEAR(marker_label_correlation(source), phi, 1e-12);
}

TEST(DomainFile, RoundTripIsBitExact) {
  const auto dir = temp_dir("roundtrip");
  DomainSpec spec = default_target_specs()[1];
  spec.n_glaucoma = 6;
  spec.n_normal = 5;
  const Dataset ds = generate_domain(spec);
  save_domain(ds, dir / "cobalt.gtta");
  EXPECT_TRUE(std::filesystem::exists(manifest_path(dir / "cobalt.gtta")));
  const Dataset back = load_domain(dir / "cobalt.gtta");
  ASSERT_EQ(back.size(), ds.size());
  EXPECT_EQ(back.name, ds.name);
  EXPECT_EQ(back.class_counts, ds.class_counts);
  EXPECT_EQ(dataset_digest(back), dataset_digest(ds));
  for (std::size_t i = 0; i < ds.size(); ++i) {
    EXPECT_EQ(back.samples[i].label, ds.samples[i].label);
    EXPECT_EQ(back.samples[i].cdr, ds.samples[i].cdr);
    ASSERT_TRUE(back.samples[i].geometry.has_value());
    EXPECT_EQ(back.samples[i].geometry->radius, ds.samples[i].geometry->radius);
  }
  ASSERT_TRUE(back.spec.has_value());
  EXPECT_EQ(back.spec->seed, spec.seed);
}

TEST(DomainFile, CorruptInputsFailCleanly) {
  const auto dir = temp_dir("corrupt");
  const Dataset ds = generate_domain(neutral(2, 2, 8));
  const auto path = dir / "d.gtta";
  save_domain(ds, path);
  const auto full = std::filesystem::file_size(path);

  for (std::uintmax_t cut : {std::uintmax_t{0}, std::uintmax_t{3}, std::uintmax_t{10}, full / 2, full - 1}) {
    std::filesystem::copy_file(path, dir / "t.gtta", std::filesystem::copy_options::overwrite_existing);
    std::filesystem::resize_file(dir / "t.gtta", cut);
    const Errc e = error_code_of([&] { load_domain(dir / "t.gtta"); });
    EXPECT_TRUE(e == Errc::BadMagic || e == Errc::VersionMismatch) << "cut at " << cut;
  }

  {
    std::fstream f(dir / "d.gtta", std::ios::in | std::ios::out | std::ios::binary);
    f.seekp(4);
    const char v2[4] = {2, 0, 0, 0};
    f.write(v2, 4);
  }
  EXPECT_EQ(error_code_of([&] { load_domain(dir / "d.gtta"); }), Errc::VersionMismatch);
  {
    std::ofstream f(dir / "junk.gtta", std::ios::binary);
    f << "JUNKJUNKJUNKJUNKJUNK";
  }
  EXPECT_EQ(error_code_of([&] { load_domain(dir / "junk.gtta"); }), Errc::BadMagic);
  EXPECT_EQ(error_code_of([&] { load_domain(dir / "missing.gtta"); }), Errc::IoError);
  EXPECT_EQ(error_code_of([&] { save_domain(Dataset{}, dir / "empty.gtta"); }), Errc::EmptyDomain);
  EXPECT_FALSE(std::filesystem::exists(dir / "empty.gtta"));
}
