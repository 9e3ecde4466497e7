#pragma once

#include <random>
#include <span>
#include <vector>

#include "gtta/checkpoint.hpp"
#include "gtta/tensor.hpp"

namespace gtta::model {

inline constexpr std::size_t kPatch = 8;
inline constexpr std::size_t kGrid = 8;          // patches per side
inline constexpr std::size_t kRegions = kGrid * kGrid;
inline constexpr std::size_t kPatchDim = 3 * kPatch * kPatch;
inline constexpr std::size_t kFeatures = 64;
inline constexpr std::size_t kClasses = 2;

// Glorot-uniform [fan_in x fan_out] leaf that requires grad.
Tensor glorot(std::mt19937_64& rng, std::size_t fan_in, std::size_t fan_out);

// x [..., in] * W [in x out] + b [out]
Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b);

struct BackboneParams {
  Tensor embed_w, embed_b;
  Tensor mix1_w, mix1_b;
  Tensor mix2_w, mix2_b;
  Tensor cls_w, cls_b;  // classifier g: [F x K], [K]

  static BackboneParams init(std::mt19937_64& rng);
  static BackboneParams from_named(const TensorMap& m);

  std::vector<Tensor> feature_params() const;
  std::vector<Tensor> classifier_params() const;
  std::vector<Tensor> all() const;
  TensorMap named() const;  // "backbone/..."
  BackboneParams clone() const;
};

/// Image [3 x 64 x 64] -> [64 x 192]; patches in row-major grid order, each
/// flattened channel-major then row-major.
Tensor patchify(std::span<const float> image);
/// Stacks images into [B x 64 x 192].
Tensor patchify_batch(const std::vector<std::span<const float>>& images);
/// Inverse of patchify; used to check layout.
std::vector<double> unpatchify(std::span<const double> patches);

struct GridCell {
  std::size_t row, col;
};
// Patch-grid coordinates of region n.
constexpr GridCell region_cell(std::size_t n) { return {n / kGrid, n % kGrid}; }

struct Features {
  Tensor regions;  // [B x N x F]
  Tensor pooled;   // [B x F]
};

/// Per image and channel: subtract the mean and divide by the standard
/// deviation over all 4096 pixels, undoing affine intensity shifts. Channels
/// flatter than kStdFloor map to zero. The result is a constant; gradients do
/// not flow back to the pixels.
inline constexpr double kStdFloor = 1e-6;
Tensor standardize_channels(const Tensor& patches);

/// Regions are computed from the standardized patches.
Features backbone_forward(const BackboneParams& p, const Tensor& patches);
Tensor classifier_logits(const BackboneParams& p, const Tensor& pooled);

}  // namespace gtta::model
