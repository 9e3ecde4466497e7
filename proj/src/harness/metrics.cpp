#include <algorithm>
#include <numeric>

#include "gtta/error.hpp"
#include "gtta/harness.hpp"

namespace gtta::harness {

double accuracy(std::span<const int> predicted, std::span<const int> truth) {
  if (predicted.size() != truth.size()) fail(Errc::ShapeMismatch, "accuracy: length mismatch");
  if (predicted.empty()) fail(Errc::EmptyEval, "accuracy of nothing");
  std::size_t hits = 0;
  for (std::size_t i = 0; i < truth.size(); ++i) hits += predicted[i] == truth[i];
  return 100.0 * static_cast<double>(hits) / static_cast<double>(truth.size());
}

double roc_auc(std::span<const double> scores, std::span<const int> labels) {
  if (scores.size() != labels.size()) fail(Errc::ShapeMismatch, "roc_auc: length mismatch");
  if (scores.empty()) fail(Errc::EmptyEval, "roc_auc of nothing");
  const std::size_t n = scores.size();
  std::size_t pos = 0;
  for (int y : labels) pos += y == 1;
  const std::size_t neg = n - pos;
  if (pos == 0 || neg == 0) fail(Errc::SingleClassEval, "roc_auc needs both classes");

  // Mann-Whitney via midranks: ties share the average rank.
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });
  double rank_sum = 0.0;
  for (std::size_t i = 0; i < n;) {
    std::size_t j = i;
    while (j < n && scores[order[j]] == scores[order[i]]) ++j;
    const double mid = 0.5 * static_cast<double>(i + 1 + j);
    for (std::size_t t = i; t < j; ++t)
      if (labels[order[t]] == 1) rank_sum += mid;
    i = j;
  }
  const double p = static_cast<double>(pos), q = static_cast<double>(neg);
  return 100.0 * (rank_sum - p * (p + 1.0) / 2.0) / (p * q);
}

EvalResult summarize(std::vector<DomainResult> domains) {
  EvalResult r;
  r.domains = std::move(domains);
  if (r.domains.empty()) return r;
  for (const auto& d : r.domains) {
    r.avg_acc += d.acc;
    r.avg_auc += d.auc;
  }
  r.avg_acc /= static_cast<double>(r.domains.size());
  r.avg_auc /= static_cast<double>(r.domains.size());
  return r;
}

}  // namespace gtta::harness
