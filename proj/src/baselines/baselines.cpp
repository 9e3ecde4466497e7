#include "gtta/baselines.hpp"

#include <algorithm>
#include <cmath>

#include "gtta/backbone.hpp"
#include "gtta/error.hpp"

namespace gtta::baselines {

namespace {

std::vector<double> normalized(std::span<const double> z) {
  double ss = 0.0;
  for (double v : z) ss += v * v;
  const double n = std::sqrt(ss);
  std::vector<double> out(z.begin(), z.end());
  if (n >= 1e-12)
    for (double& v : out) v /= n;
  return out;
}

std::size_t argmax_lower(std::span<const double> row) {
  return static_cast<std::size_t>(std::max_element(row.begin(), row.end()) - row.begin());
}

Tensor grad_leaf(const Tensor& t) {
  Tensor c = t.clone();
  c.node()->requires_grad = true;
  return c;
}

}  // namespace

ClassifierState ClassifierState::create(const Tensor& w, const Tensor& b, double lr) {
  if (!(lr >= 0)) fail(Errc::DomainError, "learning rate must be non-negative");
  return {grad_leaf(w), grad_leaf(b), {}, lr};
}

Tensor classifier_probs(const ClassifierState& s, const Tensor& features) {
  return softmax(model::linear(features.detach(), s.w.detach(), s.b.detach()), 1);
}

Tensor tent_objective(const Tensor& w, const Tensor& b, const Tensor& features) {
  return mean(entropy(softmax(model::linear(features.detach(), w, b), 1)));
}

double tent_step(ClassifierState& s, const Tensor& features) {
  if (features.rank() != 2 || features.dim(0) == 0) fail(Errc::ShapeMismatch, "tent_step on an empty batch");
  std::vector<Tensor> params{s.w, s.b};
  double value = 0.0;
  {
    Tape tape;
    const Tensor loss = tent_objective(s.w, s.b, features);
    value = loss.item();
    backward(loss);
  }
  adam_step(params, s.opt, s.lr);
  return value;
}

std::vector<std::size_t> confident_rows(const Tensor& probs, double threshold) {
  const std::size_t b = probs.dim(0), k = probs.dim(1);
  const auto v = probs.values();
  std::vector<std::size_t> rows;
  for (std::size_t i = 0; i < b; ++i) {
    const auto row = v.subspan(i * k, k);
    if (*std::max_element(row.begin(), row.end()) >= threshold) rows.push_back(i);
  }
  return rows;
}

std::size_t plclf_step(ClassifierState& s, const Tensor& features, double threshold) {
  if (features.rank() != 2) fail(Errc::ShapeMismatch, "plclf_step expects [B x F]");
  const Tensor probs = classifier_probs(s, features);
  const std::vector<std::size_t> rows = confident_rows(probs, threshold);
  if (rows.empty()) return 0;
  const std::size_t k = probs.dim(1);
  const auto pv = probs.values();
  std::vector<int> labels;
  for (std::size_t r : rows) labels.push_back(static_cast<int>(argmax_lower(pv.subspan(r * k, k))));
  const Tensor chosen = reshape(gather_rows(reshape(features.detach(), {1, features.dim(0), features.dim(1)}), {rows}),
                                {rows.size(), features.dim(1)});
  std::vector<Tensor> params{s.w, s.b};
  {
    Tape tape;
    backward(cross_entropy(model::linear(chosen, s.w, s.b), labels));
  }
  adam_step(params, s.opt, s.lr);
  return rows.size();
}

T3aSupport T3aSupport::from_classifier(const Tensor& w, std::size_t filter) {
  if (w.rank() != 2) fail(Errc::ShapeMismatch, "T3A support expects [F x K] weights");
  if (filter == 0) fail(Errc::DomainError, "T3A filter size must be positive");
  const std::size_t f = w.dim(0), k = w.dim(1);
  T3aSupport s;
  s.filter = filter;
  s.lists.resize(k);
  const auto wv = w.values();
  for (std::size_t c = 0; c < k; ++c) {
    std::vector<double> col(f);
    for (std::size_t j = 0; j < f; ++j) col[j] = wv[j * k + c];
    double ss = 0.0;
    for (double v : col) ss += v * v;
    if (ss < 1e-24) fail(Errc::ZeroWeightColumn, "classifier column " + std::to_string(c));
    s.lists[c].push_back({normalized(col), 0.0});
  }
  return s;
}

std::size_t T3aSupport::size() const {
  std::size_t n = 0;
  for (const auto& l : lists) n += l.size();
  return n;
}

void t3a_filter(T3aSupport& s) {
  for (auto& list : s.lists) {
    if (list.size() <= s.filter) continue;
    std::stable_sort(list.begin(), list.end(),
                     [](const SupportEntry& a, const SupportEntry& b) { return a.entropy < b.entropy; });
    list.resize(s.filter);
  }
}

std::vector<double> t3a_scores(const T3aSupport& s, std::span<const double> z) {
  const std::vector<double> zn = normalized(z);
  const std::size_t k = s.lists.size();
  std::vector<double> logits(k);
  for (std::size_t c = 0; c < k; ++c) {
    const auto& list = s.lists[c];
    if (list.empty()) fail(Errc::EmptyClass, "T3A support class " + std::to_string(c) + " is empty");
    std::vector<double> mean(zn.size(), 0.0);
    for (const SupportEntry& e : list)
      for (std::size_t j = 0; j < mean.size(); ++j) mean[j] += e.embedding[j];
    const std::vector<double> centroid = normalized(mean);
    double dot = 0.0;
    for (std::size_t j = 0; j < zn.size(); ++j) dot += zn[j] * centroid[j];
    logits[c] = dot;
  }
  const double m = *std::max_element(logits.begin(), logits.end());
  double total = 0.0;
  for (double& v : logits) total += v = std::exp(v - m);
  for (double& v : logits) v /= total;
  return logits;
}

std::vector<double> t3a_predict(T3aSupport& s, std::span<const double> z, std::span<const double> source_probs) {
  if (source_probs.size() != s.lists.size()) fail(Errc::ShapeMismatch, "t3a_predict class count");
  double h = 0.0;
  for (double v : source_probs)
    if (v > 0) h -= v * std::log(v);
  std::vector<double> zn = normalized(z);
  bool zero = true;
  for (double v : zn) zero &= v == 0.0;
  if (!zero) s.lists[argmax_lower(source_probs)].push_back({std::move(zn), h});
  t3a_filter(s);
  return t3a_scores(s, z);
}

Tensor t3a_predict_batch(T3aSupport& s, const Tensor& features, const Tensor& w, const Tensor& b) {
  const Tensor probs = softmax(model::linear(features.detach(), w.detach(), b.detach()), 1);
  const std::size_t n = features.dim(0), d = features.dim(1), k = probs.dim(1);
  const auto fv = features.values();
  const auto pv = probs.values();
  std::vector<double> out;
  out.reserve(n * k);
  for (std::size_t i = 0; i < n; ++i) {
    const auto p = t3a_predict(s, fv.subspan(i * d, d), pv.subspan(i * k, k));
    out.insert(out.end(), p.begin(), p.end());
  }
  return tensor({n, k}, std::move(out));
}

}  // namespace gtta::baselines
