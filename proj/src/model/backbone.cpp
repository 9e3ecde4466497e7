#include "gtta/backbone.hpp"

#include <cmath>

#include "gtta/error.hpp"
#include "gtta/synthdata.hpp"

namespace gtta::model {

Tensor glorot(std::mt19937_64& rng, std::size_t fan_in, std::size_t fan_out) {
  const double a = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
  std::uniform_real_distribution<double> u(-a, a);
  std::vector<double> v(fan_in * fan_out);
  for (double& x : v) x = u(rng);
  return tensor({fan_in, fan_out}, std::move(v), true);
}

Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b) {
  const std::size_t in = w.dim(0);
  if (x.shape().back() != in) fail(Errc::ShapeMismatch, "linear: input width " + to_string(x.shape()));
  Shape out_shape = x.shape();
  out_shape.back() = w.dim(1);
  const Tensor flat = x.rank() == 2 ? x : reshape(x, {x.size() / in, in});
  Tensor y = add_broadcast(matmul(flat, w), b);
  return x.rank() == 2 ? y : reshape(y, std::move(out_shape));
}

namespace {

Tensor zeros_param(std::size_t n) { return Tensor::zeros({n}, true); }

// elu(u + mean over regions of u); u is [B x N x F]
Tensor mix_layer(const Tensor& x, const Tensor& w, const Tensor& b) {
  const Tensor u = linear(x, w, b);
  const Tensor ctx = expand(mean(u, 1), 1, u.dim(1));
  return elu(u + ctx);
}

Tensor fetch(const TensorMap& m, const std::string& name) {
  auto it = m.find(name);
  if (it == m.end()) fail(Errc::IoError, "checkpoint lacks " + name);
  Tensor t = it->second.clone();
  t.node()->requires_grad = true;
  return t;
}

void expect_shape(const Tensor& t, const Shape& s, const char* name) {
  if (t.shape() != s) fail(Errc::ShapeMismatch, std::string(name) + " has shape " + to_string(t.shape()));
}

}  // namespace

BackboneParams BackboneParams::init(std::mt19937_64& rng) {
  BackboneParams p;
  p.embed_w = glorot(rng, kPatchDim, kFeatures);
  p.embed_b = zeros_param(kFeatures);
  p.mix1_w = glorot(rng, kFeatures, kFeatures);
  p.mix1_b = zeros_param(kFeatures);
  p.mix2_w = glorot(rng, kFeatures, kFeatures);
  p.mix2_b = zeros_param(kFeatures);
  p.cls_w = glorot(rng, kFeatures, kClasses);
  p.cls_b = zeros_param(kClasses);
  return p;
}

BackboneParams BackboneParams::from_named(const TensorMap& m) {
  BackboneParams p;
  p.embed_w = fetch(m, "backbone/patch_embed.W");
  p.embed_b = fetch(m, "backbone/patch_embed.b");
  p.mix1_w = fetch(m, "backbone/mix1.W");
  p.mix1_b = fetch(m, "backbone/mix1.b");
  p.mix2_w = fetch(m, "backbone/mix2.W");
  p.mix2_b = fetch(m, "backbone/mix2.b");
  p.cls_w = fetch(m, "backbone/classifier.W");
  p.cls_b = fetch(m, "backbone/classifier.b");
  expect_shape(p.embed_w, {kPatchDim, kFeatures}, "patch_embed.W");
  expect_shape(p.mix1_w, {kFeatures, kFeatures}, "mix1.W");
  expect_shape(p.mix2_w, {kFeatures, kFeatures}, "mix2.W");
  expect_shape(p.cls_w, {kFeatures, kClasses}, "classifier.W");
  return p;
}

std::vector<Tensor> BackboneParams::feature_params() const {
  return {embed_w, embed_b, mix1_w, mix1_b, mix2_w, mix2_b};
}

std::vector<Tensor> BackboneParams::classifier_params() const { return {cls_w, cls_b}; }

std::vector<Tensor> BackboneParams::all() const {
  auto v = feature_params();
  v.push_back(cls_w);
  v.push_back(cls_b);
  return v;
}

TensorMap BackboneParams::named() const {
  return {{"backbone/patch_embed.W", embed_w}, {"backbone/patch_embed.b", embed_b},
          {"backbone/mix1.W", mix1_w},         {"backbone/mix1.b", mix1_b},
          {"backbone/mix2.W", mix2_w},         {"backbone/mix2.b", mix2_b},
          {"backbone/classifier.W", cls_w},    {"backbone/classifier.b", cls_b}};
}

BackboneParams BackboneParams::clone() const { return from_named(named()); }

Tensor patchify(std::span<const float> image) { return reshape(patchify_batch({image}), {kRegions, kPatchDim}); }

Tensor patchify_batch(const std::vector<std::span<const float>>& images) {
  constexpr std::size_t S = data::kImageSize;
  std::vector<double> out(images.size() * kRegions * kPatchDim);
  std::size_t at = 0;
  for (const auto& img : images) {
    if (img.size() != data::kPixels) fail(Errc::ShapeMismatch, "patchify: image must be 3x64x64");
    for (std::size_t gr = 0; gr < kGrid; ++gr)
      for (std::size_t gc = 0; gc < kGrid; ++gc)
        for (std::size_t c = 0; c < 3; ++c)
          for (std::size_t r = 0; r < kPatch; ++r) {
            const float* row = img.data() + (c * S + gr * kPatch + r) * S + gc * kPatch;
            for (std::size_t k = 0; k < kPatch; ++k) out[at++] = row[k];
          }
  }
  return tensor({images.size(), kRegions, kPatchDim}, std::move(out));
}

std::vector<double> unpatchify(std::span<const double> patches) {
  constexpr std::size_t S = data::kImageSize;
  if (patches.size() != kRegions * kPatchDim) fail(Errc::ShapeMismatch, "unpatchify: expected 64x192");
  std::vector<double> img(data::kPixels);
  std::size_t at = 0;
  for (std::size_t gr = 0; gr < kGrid; ++gr)
    for (std::size_t gc = 0; gc < kGrid; ++gc)
      for (std::size_t c = 0; c < 3; ++c)
        for (std::size_t r = 0; r < kPatch; ++r)
          for (std::size_t k = 0; k < kPatch; ++k) img[(c * S + gr * kPatch + r) * S + gc * kPatch + k] = patches[at++];
  return img;
}

Tensor standardize_channels(const Tensor& patches) {
  if (patches.rank() != 3 || patches.dim(1) != kRegions || patches.dim(2) != kPatchDim) {
    fail(Errc::ShapeMismatch, "standardize_channels: patches " + to_string(patches.shape()));
  }
  constexpr std::size_t kChan = kPatch * kPatch;
  constexpr double kCount = static_cast<double>(kRegions * kChan);
  const auto in = patches.values();
  std::vector<double> out(in.begin(), in.end());
  for (std::size_t b = 0; b < patches.dim(0); ++b) {
    double* img = out.data() + b * kRegions * kPatchDim;
    for (std::size_t c = 0; c < 3; ++c) {
      long double sum = 0.0L, sq = 0.0L;
      for (std::size_t n = 0; n < kRegions; ++n)
        for (std::size_t i = 0; i < kChan; ++i) sum += img[n * kPatchDim + c * kChan + i];
      const double mu = static_cast<double>(sum / kCount);
      for (std::size_t n = 0; n < kRegions; ++n)
        for (std::size_t i = 0; i < kChan; ++i) {
          const double d = img[n * kPatchDim + c * kChan + i] - mu;
          sq += d * d;
        }
      const double sd = std::sqrt(static_cast<double>(sq / kCount));
      const double inv = sd > kStdFloor ? 1.0 / sd : 0.0;
      for (std::size_t n = 0; n < kRegions; ++n)
        for (std::size_t i = 0; i < kChan; ++i) {
          double& v = img[n * kPatchDim + c * kChan + i];
          v = (v - mu) * inv;
        }
    }
  }
  return tensor(patches.shape(), std::move(out));
}

Features backbone_forward(const BackboneParams& p, const Tensor& patches) {
  if (patches.rank() != 3 || patches.dim(2) != kPatchDim) {
    fail(Errc::ShapeMismatch, "backbone_forward: patches " + to_string(patches.shape()));
  }
  const Tensor e = elu(linear(standardize_channels(patches), p.embed_w, p.embed_b));
  const Tensor m1 = mix_layer(e, p.mix1_w, p.mix1_b);
  Features f;
  f.regions = mix_layer(m1, p.mix2_w, p.mix2_b);
  f.pooled = mean(f.regions, 1);
  return f;
}

Tensor classifier_logits(const BackboneParams& p, const Tensor& pooled) { return linear(pooled, p.cls_w, p.cls_b); }

}  // namespace gtta::model
