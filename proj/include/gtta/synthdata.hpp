#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <random>
#include <string>
#include <vector>

namespace gtta::data {

inline constexpr std::size_t kImageSize = 64;
inline constexpr std::size_t kChannels = 3;
inline constexpr std::size_t kPixels = kChannels * kImageSize * kImageSize;
inline constexpr double kCdrThreshold = 0.6;
inline constexpr std::size_t kMarkerSize = 6;

/// Style and composition of one synthetic acquisition site.
struct DomainSpec {
  std::string name;
  double brightness_shift = 0.0;  // [-0.3, 0.3]
  double contrast_gain = 1.0;     // [0.5, 1.5]
  std::array<double, 3> channel_gains{1.0, 1.0, 1.0};  // each in [0.6, 1.4]
  double noise_sigma = 0.0;
  double spurious_corr = 0.0;  // corner marker vs label, [-1, 1]
  std::size_t n_glaucoma = 0;
  std::size_t n_normal = 0;
  std::uint64_t seed = 0;

  void validate() const;  // DomainError on out-of-range fields
};

// Where the optic disc landed; used by attribution checks.
struct DiscGeometry {
  double row = 0.0;
  double col = 0.0;
  double radius = 0.0;
  bool marker_bright = false;
};

struct Sample {
  std::vector<float> image;  // [C x H x W], values in [0, 1]
  int label = 0;             // 1 = glaucoma
  std::string domain;
  float cdr = 0.0f;
  std::optional<DiscGeometry> geometry;
};

struct Dataset {
  std::string name;
  std::optional<DomainSpec> spec;
  std::vector<Sample> samples;
  std::array<std::size_t, 2> class_counts{0, 0};

  std::size_t size() const noexcept { return samples.size(); }
};

/// Label-independent part of rendering: contrast about 0.5, brightness shift,
/// per-channel gain, additive Gaussian noise, clip to [0, 1].
void apply_style(std::vector<double>& image, const DomainSpec& spec, std::mt19937_64& rng);

/// Style-free image for one label; fills `geometry`.
std::vector<double> render_base(std::mt19937_64& rng, const DomainSpec& spec, int label, float& cdr,
                                DiscGeometry& geometry);

Sample render_sample(std::mt19937_64& rng, const DomainSpec& spec, int label);

Dataset generate_domain(const DomainSpec& spec);

struct Benchmark {
  Dataset source;
  std::vector<Dataset> targets;
};

std::vector<DomainSpec> default_target_specs();
DomainSpec default_source_spec();
Benchmark default_benchmark();

// Binary domain file plus `<stem>.manifest.json` beside it.
void save_domain(const Dataset& ds, const std::filesystem::path& path);
Dataset load_domain(const std::filesystem::path& path);
std::filesystem::path manifest_path(const std::filesystem::path& domain_file);

std::uint64_t dataset_digest(const Dataset& ds);

// Pearson correlation between the marker state and the label.
double marker_label_correlation(const Dataset& ds);

}  // namespace gtta::data
