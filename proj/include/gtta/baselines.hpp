#pragma once

#include <span>
#include <vector>

#include "gtta/optim.hpp"
#include "gtta/tensor.hpp"

namespace gtta::baselines {

inline constexpr double kDefaultLr = 1e-4;
inline constexpr double kDefaultThreshold = 0.9;
inline constexpr std::size_t kDefaultFilter = 64;

/// A private copy of the linear classifier g plus its optimizer.
struct ClassifierState {
  Tensor w, b;
  AdamState opt;
  double lr = kDefaultLr;

  static ClassifierState create(const Tensor& w, const Tensor& b, double lr = kDefaultLr);
};

/// softmax(g(f)) for features [B x F].
Tensor classifier_probs(const ClassifierState& s, const Tensor& features);

/// Mean prediction entropy of the batch; the objective tent_step descends.
Tensor tent_objective(const Tensor& w, const Tensor& b, const Tensor& features);

/// One Adam step on mean entropy. Returns the objective before the step.
double tent_step(ClassifierState& s, const Tensor& features);

/// Rows whose max class probability is at least `threshold`.
std::vector<std::size_t> confident_rows(const Tensor& probs, double threshold);

/// One Adam step of cross-entropy against argmax pseudo-labels on the
/// confident rows. Returns how many rows took part; 0 means no step.
std::size_t plclf_step(ClassifierState& s, const Tensor& features, double threshold = kDefaultThreshold);

struct SupportEntry {
  std::vector<double> embedding;  // unit norm
  double entropy = 0.0;
};

/// Per-class support sets, seeded with the normalized classifier columns
/// (entropy 0).
struct T3aSupport {
  std::vector<std::vector<SupportEntry>> lists;
  std::size_t filter = kDefaultFilter;

  static T3aSupport from_classifier(const Tensor& w, std::size_t filter = kDefaultFilter);
  std::size_t size() const;
};

/// Keeps the `filter` lowest-entropy entries per class; equal entropies keep
/// the earlier insertion.
void t3a_filter(T3aSupport& s);

/// softmax_k <z / |z|, c_k> with c_k the normalized mean of class-k support.
/// Read-only.
std::vector<double> t3a_scores(const T3aSupport& s, std::span<const double> z);

/// Inserts z under argmax of `source_probs` with their entropy, filters, then
/// scores z against the updated prototypes.
std::vector<double> t3a_predict(T3aSupport& s, std::span<const double> z, std::span<const double> source_probs);

/// t3a_predict over a batch, sample by sample in order. Returns [B x K].
Tensor t3a_predict_batch(T3aSupport& s, const Tensor& features, const Tensor& w, const Tensor& b);

}  // namespace gtta::baselines
