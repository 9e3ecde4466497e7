#pragma once

#include <random>
#include <span>
#include <string>
#include <vector>

#include "gtta/backbone.hpp"
#include "gtta/checkpoint.hpp"
#include "gtta/tensor.hpp"

namespace gtta::model {

inline constexpr std::size_t kNodeFeatures = 64;  // F
inline constexpr std::size_t kAttFeatures = 64;   // F'
inline constexpr std::size_t kKeep = (kRegions + 1) / 2;
inline constexpr double kDefaultLambda = 0.5;

struct GrtParams {
  Tensor proj_w;     // [F_b x F]
  Tensor pos_embed;  // [N x F]
  Tensor edge_w;     // [F x F]
  Tensor att_w;      // [F x F']
  Tensor a_src, a_dst, a_pool;  // [F']
  Tensor cls_w, cls_b;          // [(k_keep * F') x K], [K]

  static GrtParams init(std::mt19937_64& rng, std::size_t k_keep = kKeep);
  static GrtParams from_named(const TensorMap& m);

  std::vector<Tensor> all() const;
  TensorMap named() const;  // "grt/..."
  GrtParams clone() const;
  std::size_t k_keep() const { return cls_w.dim(0) / kAttFeatures; }
};

// regions [B x N x F_b] -> nodes [B x N x F]
Tensor project_nodes(const GrtParams& p, const Tensor& regions);
// nodes [B x N x F] -> A [B x N x N], A = nodes W nodes^T
Tensor edge_matrix(const GrtParams& p, const Tensor& nodes);
// Row-stochastic attention alpha [B x N x N] and transformed nodes t [B x N x F'].
struct Attention {
  Tensor alpha;
  Tensor transformed;
};
Attention attention_weights(const GrtParams& p, const Tensor& nodes, const Tensor& adjacency);
// -> h' [B x N x F'] = elu(alpha t)
Tensor graph_attention(const GrtParams& p, const Tensor& nodes, const Tensor& adjacency);

struct TopK {
  Tensor pooled;  // [B x k x F'], kept rows scaled by their score
  Tensor scores;  // [B x N], all node scores
  std::vector<std::vector<std::size_t>> kept;  // ascending per batch item
};

// Ranking used by topk_pool: k highest scores, ties to the lower index,
// returned in ascending index order.
std::vector<std::size_t> top_k_indices(std::span<const double> scores, std::size_t k);

TopK topk_pool(const GrtParams& p, const Tensor& h, std::size_t k = kKeep);
Tensor grt_logits(const GrtParams& p, const Tensor& pooled);

struct GrtOutput {
  Tensor nodes, adjacency, attended;
  TopK pool;
  Tensor logits;  // [B x K]
};

// k_keep taken from the classifier shape.
GrtOutput grt_forward(const GrtParams& p, const Tensor& regions);

/// CE(b, y) + lambda CE(grt, y) + (1 - lambda) CE(grt, onehot(argmax b)),
/// the last target detached.
Tensor grt_loss(const Tensor& backbone_logits, const Tensor& grt_logits, std::span<const int> labels,
                double lambda = kDefaultLambda);

/// |d logit_c / d region * region| summed over features, normalized to 1.
/// Row-major over the 8x8 patch grid.
std::vector<double> region_attribution(const BackboneParams& p, std::span<const float> image, int cls);

std::string attribution_csv(std::span<const double> map);
std::string attribution_pgm(std::span<const double> map);

}  // namespace gtta::model
