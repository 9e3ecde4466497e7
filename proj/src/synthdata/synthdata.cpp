#include "gtta/synthdata.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <fstream>
#include <sstream>

#include <nlohmann/json.hpp>

#include "gtta/digest.hpp"
#include "gtta/error.hpp"

namespace gtta::data {

namespace {

constexpr double kCenter = (kImageSize - 1) / 2.0;
constexpr double kFundusRadius = 30.0;
constexpr double kMaxJitter = 6.0;
constexpr std::array<double, 3> kFundusColor{0.55, 0.25, 0.12};
constexpr std::array<double, 3> kDiscColor{0.92, 0.72, 0.45};
constexpr std::array<double, 3> kCupColor{1.0, 0.95, 0.82};
constexpr double kMarkerHigh = 0.5;
constexpr double kMarkerLow = 0.2;
constexpr std::size_t kMarkerOffset = 1;

inline std::size_t px(std::size_t c, std::size_t r, std::size_t col) {
  return (c * kImageSize + r) * kImageSize + col;
}

void check_range(double v, double lo, double hi, const char* what) {
  if (!(v >= lo && v <= hi)) {
    fail(Errc::DomainError, std::string(what) + " = " + std::to_string(v) + " outside [" + std::to_string(lo) +
                                ", " + std::to_string(hi) + "]");
  }
}

}  // namespace

void DomainSpec::validate() const {
  check_range(brightness_shift, -0.3, 0.3, "brightness_shift");
  check_range(contrast_gain, 0.5, 1.5, "contrast_gain");
  for (double g : channel_gains) check_range(g, 0.6, 1.4, "channel_gain");
  check_range(noise_sigma, 0.0, 1.0, "noise_sigma");
  check_range(spurious_corr, -1.0, 1.0, "spurious_corr");
}

void apply_style(std::vector<double>& image, const DomainSpec& spec, std::mt19937_64& rng) {
  std::normal_distribution<double> noise(0.0, 1.0);
  for (std::size_t c = 0; c < kChannels; ++c) {
    for (std::size_t i = 0; i < kImageSize * kImageSize; ++i) {
      double& v = image[c * kImageSize * kImageSize + i];
      v = ((v - 0.5) * spec.contrast_gain + 0.5 + spec.brightness_shift) * spec.channel_gains[c];
      if (spec.noise_sigma > 0) v += spec.noise_sigma * noise(rng);
      v = std::clamp(v, 0.0, 1.0);
    }
  }
}

std::vector<double> render_base(std::mt19937_64& rng, const DomainSpec& spec, int label, float& cdr,
                                DiscGeometry& geometry) {
  std::uniform_real_distribution<double> jitter(-kMaxJitter, kMaxJitter);
  std::uniform_real_distribution<double> disc_radius(8.0, 12.0);
  std::uniform_real_distribution<double> cdr_normal(0.3, 0.55);
  std::uniform_real_distribution<double> cdr_glaucoma(0.65, 0.9);
  std::uniform_real_distribution<double> unit(0.0, 1.0);

  geometry.row = kCenter + jitter(rng);
  geometry.col = kCenter + jitter(rng);
  geometry.radius = disc_radius(rng);
  cdr = static_cast<float>(label == 1 ? cdr_glaucoma(rng) : cdr_normal(rng));
  const double cup_radius = static_cast<double>(cdr) * geometry.radius;
  const double p_bright = (1.0 + spec.spurious_corr * (2.0 * label - 1.0)) / 2.0;
  geometry.marker_bright = unit(rng) < p_bright;

  std::vector<double> img(kPixels, 0.0);
  for (std::size_t r = 0; r < kImageSize; ++r) {
    for (std::size_t col = 0; col < kImageSize; ++col) {
      const double dr = static_cast<double>(r) - kCenter;
      const double dc = static_cast<double>(col) - kCenter;
      const double rf = std::sqrt(dr * dr + dc * dc);
      if (rf > kFundusRadius) continue;
      const double shade = 1.0 - 0.35 * (rf / kFundusRadius) * (rf / kFundusRadius);
      std::array<double, 3> color{kFundusColor[0] * shade, kFundusColor[1] * shade, kFundusColor[2] * shade};
      const double ddr = static_cast<double>(r) - geometry.row;
      const double ddc = static_cast<double>(col) - geometry.col;
      const double rd = std::sqrt(ddr * ddr + ddc * ddc);
      if (rd <= cup_radius) {
        color = kCupColor;
      } else if (rd <= geometry.radius) {
        color = kDiscColor;
      }
      for (std::size_t c = 0; c < kChannels; ++c) img[px(c, r, col)] = color[c];
    }
  }
  const double marker = geometry.marker_bright ? kMarkerHigh : kMarkerLow;
  for (std::size_t c = 0; c < kChannels; ++c)
    for (std::size_t r = kMarkerOffset; r < kMarkerOffset + kMarkerSize; ++r)
      for (std::size_t col = kMarkerOffset; col < kMarkerOffset + kMarkerSize; ++col) img[px(c, r, col)] = marker;
  return img;
}

Sample render_sample(std::mt19937_64& rng, const DomainSpec& spec, int label) {
  Sample s;
  DiscGeometry geo;
  std::vector<double> img = render_base(rng, spec, label, s.cdr, geo);
  apply_style(img, spec, rng);
  s.image.assign(img.begin(), img.end());
  s.label = label;
  s.domain = spec.name;
  s.geometry = geo;
  return s;
}

Dataset generate_domain(const DomainSpec& spec) {
  spec.validate();
  const std::size_t total = spec.n_glaucoma + spec.n_normal;
  if (total == 0) fail(Errc::EmptyDomain, "domain '" + spec.name + "' has no samples");
  std::mt19937_64 rng(spec.seed);
  std::vector<int> labels(spec.n_glaucoma, 1);
  labels.insert(labels.end(), spec.n_normal, 0);
  std::shuffle(labels.begin(), labels.end(), rng);
  Dataset ds;
  ds.name = spec.name;
  ds.spec = spec;
  ds.samples.reserve(total);
  for (int y : labels) {
    ds.samples.push_back(render_sample(rng, spec, y));
    ds.class_counts[static_cast<std::size_t>(y)] += 1;
  }
  return ds;
}

DomainSpec default_source_spec() {
  DomainSpec s;
  s.name = "source";
  s.noise_sigma = 0.03;
  s.spurious_corr = 0.9;
  s.n_glaucoma = 1000;
  s.n_normal = 1000;
  s.seed = 1001;
  return s;
}

std::vector<DomainSpec> default_target_specs() {
  // name, brightness, contrast, gains, noise, spurious correlation
  struct Row {
    const char* name;
    double brightness, contrast;
    std::array<double, 3> gains;
    double noise, corr;
  };
  static constexpr Row rows[] = {
      {"amber", 0.08, 0.85, {1.15, 1.00, 0.75}, 0.03, 0.0},
      {"cobalt", 0.05, 1.15, {0.80, 0.95, 1.25}, 0.04, 0.0},
      {"dusk", -0.05, 0.80, {1.00, 0.85, 0.90}, 0.05, -0.5},
      {"flare", 0.12, 1.10, {1.05, 1.05, 1.05}, 0.02, 0.0},
      {"haze", 0.10, 0.70, {0.90, 1.00, 1.00}, 0.06, -0.9},
      {"moss", 0.04, 1.05, {0.80, 1.20, 0.85}, 0.03, 0.3},
      {"slate", 0.06, 0.90, {0.75, 0.80, 0.85}, 0.05, 0.0},
  };
  std::vector<DomainSpec> out;
  std::uint64_t seed = 2001;
  for (const Row& r : rows) {
    DomainSpec s;
    s.name = r.name;
    s.brightness_shift = r.brightness;
    s.contrast_gain = r.contrast;
    s.channel_gains = r.gains;
    s.noise_sigma = r.noise;
    s.spurious_corr = r.corr;
    s.n_glaucoma = 150;
    s.n_normal = 150;
    s.seed = seed++;
    out.push_back(s);
  }
  return out;
}

Benchmark default_benchmark() {
  Benchmark b;
  b.source = generate_domain(default_source_spec());
  for (const DomainSpec& s : default_target_specs()) b.targets.push_back(generate_domain(s));
  return b;
}

// --- file format --------------------------------------------------------------

namespace {

constexpr char kMagic[4] = {'G', 'T', 'T', 'A'};
constexpr std::uint32_t kFormatVersion = 1;
constexpr std::size_t kHeaderBytes = 4 + 4 + 4 + 2 + 2 + 2;

template <typename T>
void put_le(std::string& buf, T v) {
  for (std::size_t i = 0; i < sizeof(T); ++i) buf.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
}

template <typename T>
T get_le(const std::string& buf, std::size_t& at) {
  T v = 0;
  for (std::size_t i = 0; i < sizeof(T); ++i) v |= static_cast<T>(static_cast<unsigned char>(buf[at + i])) << (8 * i);
  at += sizeof(T);
  return v;
}

nlohmann::json spec_to_json(const DomainSpec& s) {
  return {{"name", s.name},
          {"brightness_shift", s.brightness_shift},
          {"contrast_gain", s.contrast_gain},
          {"channel_gains", s.channel_gains},
          {"noise_sigma", s.noise_sigma},
          {"spurious_corr", s.spurious_corr},
          {"n_glaucoma", s.n_glaucoma},
          {"n_normal", s.n_normal},
          {"seed", s.seed}};
}

DomainSpec spec_from_json(const nlohmann::json& j) {
  DomainSpec s;
  s.name = j.at("name").get<std::string>();
  s.brightness_shift = j.at("brightness_shift").get<double>();
  s.contrast_gain = j.at("contrast_gain").get<double>();
  s.channel_gains = j.at("channel_gains").get<std::array<double, 3>>();
  s.noise_sigma = j.at("noise_sigma").get<double>();
  s.spurious_corr = j.at("spurious_corr").get<double>();
  s.n_glaucoma = j.at("n_glaucoma").get<std::size_t>();
  s.n_normal = j.at("n_normal").get<std::size_t>();
  s.seed = j.at("seed").get<std::uint64_t>();
  return s;
}

}  // namespace

std::filesystem::path manifest_path(const std::filesystem::path& domain_file) {
  std::filesystem::path p = domain_file;
  p.replace_extension(".manifest.json");
  return p;
}

void save_domain(const Dataset& ds, const std::filesystem::path& path) {
  if (ds.samples.empty()) fail(Errc::EmptyDomain, "refusing to save empty dataset '" + ds.name + "'");
  std::string buf;
  buf.reserve(kHeaderBytes + ds.size() * (kPixels * 4 + 5));
  buf.append(kMagic, 4);
  put_le<std::uint32_t>(buf, kFormatVersion);
  put_le<std::uint32_t>(buf, static_cast<std::uint32_t>(ds.size()));
  put_le<std::uint16_t>(buf, kImageSize);
  put_le<std::uint16_t>(buf, kImageSize);
  put_le<std::uint16_t>(buf, kChannels);
  for (const Sample& s : ds.samples) {
    if (s.image.size() != kPixels) fail(Errc::ShapeMismatch, "sample image has wrong size");
    for (float v : s.image) put_le<std::uint32_t>(buf, std::bit_cast<std::uint32_t>(v));
  }
  for (const Sample& s : ds.samples) buf.push_back(static_cast<char>(s.label));
  for (const Sample& s : ds.samples) put_le<std::uint32_t>(buf, std::bit_cast<std::uint32_t>(s.cdr));

  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) fail(Errc::IoError, "cannot write " + path.string());
  os.write(buf.data(), static_cast<std::streamsize>(buf.size()));
  if (!os) fail(Errc::IoError, "short write to " + path.string());

  nlohmann::json manifest;
  manifest["name"] = ds.name;
  manifest["count"] = ds.size();
  manifest["class_counts"] = ds.class_counts;
  if (ds.spec) manifest["spec"] = spec_to_json(*ds.spec);
  nlohmann::json geo = nlohmann::json::array();
  for (const Sample& s : ds.samples) {
    if (s.geometry) {
      geo.push_back({s.geometry->row, s.geometry->col, s.geometry->radius, s.geometry->marker_bright});
    } else {
      geo.push_back(nullptr);
    }
  }
  manifest["geometry"] = std::move(geo);
  std::ofstream ms(manifest_path(path), std::ios::trunc);
  if (!ms) fail(Errc::IoError, "cannot write " + manifest_path(path).string());
  ms << manifest.dump(2) << '\n';
}

Dataset load_domain(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) fail(Errc::IoError, "cannot read " + path.string());
  std::ostringstream ss;
  ss << is.rdbuf();
  const std::string buf = ss.str();
  if (buf.size() < kHeaderBytes || !std::equal(kMagic, kMagic + 4, buf.begin())) {
    fail(Errc::BadMagic, path.string() + " is not a domain file");
  }
  std::size_t at = 4;
  const auto version = get_le<std::uint32_t>(buf, at);
  if (version != kFormatVersion) fail(Errc::VersionMismatch, "domain file version " + std::to_string(version));
  const auto count = get_le<std::uint32_t>(buf, at);
  const auto h = get_le<std::uint16_t>(buf, at);
  const auto w = get_le<std::uint16_t>(buf, at);
  const auto c = get_le<std::uint16_t>(buf, at);
  if (h != kImageSize || w != kImageSize || c != kChannels) {
    fail(Errc::BadMagic, "unsupported geometry in " + path.string());
  }
  const std::size_t expected = kHeaderBytes + static_cast<std::size_t>(count) * (kPixels * 4 + 1 + 4);
  if (buf.size() != expected) {
    fail(Errc::BadMagic, path.string() + " is truncated or padded (" + std::to_string(buf.size()) + " bytes, header implies " +
                             std::to_string(expected) + ")");
  }
  Dataset ds;
  ds.samples.resize(count);
  for (Sample& s : ds.samples) {
    s.image.resize(kPixels);
    for (float& v : s.image) v = std::bit_cast<float>(get_le<std::uint32_t>(buf, at));
  }
  for (Sample& s : ds.samples) {
    s.label = static_cast<unsigned char>(buf[at++]);
    if (s.label != 0 && s.label != 1) fail(Errc::BadMagic, "label byte out of range");
    ds.class_counts[static_cast<std::size_t>(s.label)] += 1;
  }
  for (Sample& s : ds.samples) s.cdr = std::bit_cast<float>(get_le<std::uint32_t>(buf, at));

  ds.name = path.stem().string();
  std::ifstream ms(manifest_path(path));
  if (ms) {
    try {
      const auto manifest = nlohmann::json::parse(ms);
      ds.name = manifest.at("name").get<std::string>();
      if (manifest.contains("spec")) ds.spec = spec_from_json(manifest["spec"]);
      const auto& geo = manifest.at("geometry");
      if (geo.size() == ds.size()) {
        for (std::size_t i = 0; i < ds.size(); ++i) {
          if (geo[i].is_null()) continue;
          ds.samples[i].geometry = DiscGeometry{geo[i][0].get<double>(), geo[i][1].get<double>(),
                                                geo[i][2].get<double>(), geo[i][3].get<bool>()};
        }
      }
    } catch (const nlohmann::json::exception& e) {
      fail(Errc::IoError, "bad manifest for " + path.string() + ": " + e.what());
    }
  }
  for (Sample& s : ds.samples) s.domain = ds.name;
  return ds;
}

std::uint64_t dataset_digest(const Dataset& ds) {
  Digest d;
  d.text(ds.name);
  for (const Sample& s : ds.samples) {
    d.values(std::span<const float>(s.image));
    d.u64(static_cast<std::uint64_t>(s.label));
    d.bytes(&s.cdr, sizeof s.cdr);
  }
  return d.value();
}

double marker_label_correlation(const Dataset& ds) {
  double n = 0, sm = 0, sy = 0, smm = 0, syy = 0, smy = 0;
  for (const Sample& s : ds.samples) {
    if (!s.geometry) continue;
    const double m = s.geometry->marker_bright ? 1.0 : 0.0;
    const double y = s.label;
    n += 1;
    sm += m;
    sy += y;
    smm += m * m;
    syy += y * y;
    smy += m * y;
  }
  const double cov = smy / n - (sm / n) * (sy / n);
  const double vm = smm / n - (sm / n) * (sm / n);
  const double vy = syy / n - (sy / n) * (sy / n);
  if (vm <= 0 || vy <= 0) return 0.0;
  return cov / std::sqrt(vm * vy);
}

}  // namespace gtta::data
