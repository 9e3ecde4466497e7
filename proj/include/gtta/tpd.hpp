#pragma once

#include <cstdint>
#include <random>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "gtta/checkpoint.hpp"
#include "gtta/optim.hpp"
#include "gtta/tensor.hpp"

namespace gtta::tpd {

inline constexpr std::size_t kDefaultCapacity = 256;
inline constexpr std::size_t kDefaultModules = 4;

struct TpdConfig {
  std::size_t n_neighbors = 8;
  double tau_proto = 0.1;
  double tau_epd = 1.0;
  double lambda1 = 1.0;
  double lambda2 = 1.0;
  double plm_lr = 1e-3;
  double clf_lr = 1e-4;
  std::size_t steps_per_batch = 1;
  std::size_t batch = 32;
  double label_smooth_eps = 1e-4;
  std::size_t capacity = kDefaultCapacity;
  std::size_t n_modules = kDefaultModules;
  bool predict_then_update = false;

  void validate() const;  // DomainError
};

struct BankEntry {
  std::vector<double> embedding;  // unit norm
  std::vector<double> logits;
  double entropy = 0.0;
  std::uint64_t arrival = 0;
};

class MemoryBank {
 public:
  MemoryBank(std::size_t classes, std::size_t dim, std::size_t capacity = kDefaultCapacity);

  /// One entry per class: the normalized classifier column, entropy 0,
  /// arrival 0. `w` is [F x K].
  static MemoryBank from_classifier(const Tensor& w, std::size_t capacity = kDefaultCapacity);

  /// Routes to argmax p (ties to the lower class) and evicts the highest
  /// entropy entry (ties to the oldest) when over capacity. Returns false and
  /// leaves the bank unchanged if z_raw has zero norm. Empty `logits` stores
  /// log p.
  bool update(std::span<const double> z_raw, std::span<const double> p, std::uint64_t arrival,
              std::span<const double> logits = {});

  std::size_t classes() const { return lists_.size(); }
  std::size_t dim() const { return dim_; }
  std::size_t capacity() const { return capacity_; }
  std::size_t size() const;
  const std::vector<BankEntry>& entries(std::size_t k) const { return lists_.at(k); }

  nlohmann::json to_json() const;
  static MemoryBank from_json(const nlohmann::json& j);

 private:
  std::size_t dim_;
  std::size_t capacity_;
  std::vector<std::vector<BankEntry>> lists_;
};

struct Neighbor {
  std::size_t cls;
  std::size_t index;  // position within entries(cls)
  double distance;
  std::uint64_t arrival;
};

/// Entries of every class with cosine distance <= the n-th smallest distance,
/// ascending by distance, then arrival, then class. EmptyBank if empty.
std::vector<Neighbor> retrieve_neighbors(const MemoryBank& bank, std::span<const double> z, std::size_t n);

/// Bank flattened class by class: embeddings [M x F], class of each row, and
/// the row offset where each class starts.
struct BankView {
  Tensor embeddings;
  std::vector<std::size_t> cls;
  std::vector<std::size_t> offset;
  std::size_t row(const Neighbor& nb) const { return offset[nb.cls] + nb.index; }
};
BankView bank_view(const MemoryBank& bank);

struct PlmParams {
  std::vector<Tensor> w;  // [F x F] each
  std::vector<Tensor> b;  // [F]

  /// Identity plus N(0, noise^2) per weight, zero bias.
  static PlmParams init(std::mt19937_64& rng, std::size_t modules, std::size_t dim, double noise = 0.01);
  static PlmParams from_named(const TensorMap& m);

  std::size_t modules() const { return w.size(); }
  std::vector<Tensor> all() const;
  TensorMap named() const;  // "tpd/plm.<i>.W", "tpd/plm.<i>.b"
  PlmParams clone() const;
};

Tensor plm_apply(const PlmParams& p, std::size_t module, const Tensor& z);

/// Normalized per-class mean of h_i over the bank, [K x F]. Differentiable in
/// the module's parameters.
Tensor compute_centroids(const PlmParams& p, std::size_t module, const BankView& view, std::size_t classes);

/// softmax_k(-(1 - <normalize(h), mu_k>) / tau) for each row of h [B x F].
Tensor proto_probs(const Tensor& h, const Tensor& centroids, double tau);

/// Vote share of each class among the rows of `neighbor_probs` [n x K],
/// voting by argmax (ties to the lower class). EmptyNeighborSet if n == 0.
std::vector<double> neighbor_pseudo_label(const Tensor& neighbor_probs);

/// sum_b w_b KL(p_b || y_b) with w = softmax_b(H(p_b) / tau), w held constant.
Tensor epd(const Tensor& p, const Tensor& y_hat, double tau);
/// The weights used by epd.
std::vector<double> epd_weights(const Tensor& p, double tau);

/// sum_b w_b KL(p_b || y_b) with caller-supplied constant weights.
Tensor epd_weighted(const Tensor& p, const Tensor& y_hat, std::span<const double> weights);

/// The stop-gradient parts of the test-time objective for one PLM module:
/// smoothed neighbor pseudo-labels [B x K] and the EPD weights of the
/// prototype and classifier terms.
struct ModuleTargets {
  Tensor pseudo;
  std::vector<double> w_proto, w_model;
};

/// `features` [B x F] are raw backbone features; `neighbors[b]` comes from
/// retrieve_neighbors on the normalized row b.
std::vector<ModuleTargets> ttt_targets(const TpdConfig& cfg, const Tensor& features, const Tensor& cls_w,
                                       const Tensor& cls_b, const PlmParams& plm, const MemoryBank& bank,
                                       const std::vector<std::vector<Neighbor>>& neighbors);

/// Test-time objective averaged over PLM modules, with the stop-gradient
/// parts held at `targets`.
Tensor ttt_loss(const TpdConfig& cfg, const Tensor& features, const Tensor& cls_w, const Tensor& cls_b,
                const PlmParams& plm, const MemoryBank& bank, const std::vector<ModuleTargets>& targets);

/// Same, with targets computed at the current parameters.
Tensor ttt_loss(const TpdConfig& cfg, const Tensor& features, const Tensor& cls_w, const Tensor& cls_b,
                const PlmParams& plm, const MemoryBank& bank, const std::vector<std::vector<Neighbor>>& neighbors);

struct TpdState {
  TpdConfig config;
  Tensor cls_w, cls_b;
  PlmParams plm;
  MemoryBank bank;
  AdamState clf_opt, plm_opt;
  std::uint64_t next_arrival = 1;
  std::vector<double> losses;  // one per optimization step

  /// Clones the classifier; the bank starts from its columns.
  static TpdState create(const TpdConfig& cfg, const Tensor& cls_w, const Tensor& cls_b, std::uint64_t seed);

  TensorMap named() const;  // "tpd/classifier.W", "tpd/classifier.b", plm
};

/// One online step on a batch of backbone features [B x F]. Returns
/// class probabilities [B x K] and grows the bank by the batch.
Tensor adapt_batch(TpdState& state, const Tensor& features);

/// softmax(g(f))[:, 1] under the current classifier, no mutation.
std::vector<double> tpd_predict_scores(const TpdState& state, const Tensor& features);

}  // namespace gtta::tpd
