#include "gtta/tpd.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include <spdlog/spdlog.h>

#include "gtta/backbone.hpp"
#include "gtta/error.hpp"

namespace gtta::tpd {

namespace {

std::size_t argmax_lower(std::span<const double> row) {
  return static_cast<std::size_t>(std::max_element(row.begin(), row.end()) - row.begin());
}

double row_entropy(std::span<const double> p) {
  double h = 0.0;
  for (double v : p)
    if (v > 0) h -= v * std::log(v);
  return h;
}

std::vector<double> unit(std::span<const double> z, double& norm) {
  double ss = 0.0;
  for (double v : z) ss += v * v;
  norm = std::sqrt(ss);
  std::vector<double> out(z.begin(), z.end());
  if (norm >= 1e-12)
    for (double& v : out) v /= norm;
  return out;
}

Tensor leaf(Shape shape, std::vector<double> values) {
  Tensor t = tensor(std::move(shape), std::move(values));
  t.node()->requires_grad = true;
  return t;
}

Tensor fetch(const TensorMap& m, const std::string& name) {
  const auto it = m.find(name);
  if (it == m.end()) fail(Errc::ShapeMismatch, "missing tensor " + name);
  Tensor t = it->second.clone();
  t.node()->requires_grad = true;
  return t;
}

// Row-averaging matrix [K x M]: 1/|S^k| where row m belongs to class k.
Tensor class_average(const BankView& view, std::size_t classes) {
  const std::size_t m = view.cls.size();
  std::vector<double> a(classes * m, 0.0);
  for (std::size_t k = 0; k < classes; ++k) {
    const std::size_t begin = view.offset[k];
    const std::size_t end = k + 1 < classes ? view.offset[k + 1] : m;
    if (begin == end) fail(Errc::EmptyClass, "class " + std::to_string(k) + " has no bank entries");
    for (std::size_t r = begin; r < end; ++r) a[k * m + r] = 1.0 / static_cast<double>(end - begin);
  }
  return tensor({classes, m}, std::move(a));
}

Tensor centroids_from(const Tensor& mapped_bank, const BankView& view, std::size_t classes) {
  return l2_normalize(matmul(class_average(view, classes), mapped_bank), 1);
}

}  // namespace

void TpdConfig::validate() const {
  if (n_neighbors < 1) fail(Errc::DomainError, "n_neighbors must be at least 1");
  if (!(tau_proto > 0) || !(tau_epd > 0)) fail(Errc::DomainError, "temperatures must be positive");
  if (!(lambda1 >= 0) || !(lambda2 >= 0)) fail(Errc::DomainError, "lambda1 and lambda2 must be non-negative");
  if (!(plm_lr >= 0) || !(clf_lr >= 0)) fail(Errc::DomainError, "learning rates must be non-negative");
  if (batch < 1 || capacity < 1 || n_modules < 1) fail(Errc::DomainError, "batch, capacity and modules must be positive");
  if (!(label_smooth_eps >= 0 && label_smooth_eps < 1)) fail(Errc::DomainError, "label_smooth_eps outside [0, 1)");
}

MemoryBank::MemoryBank(std::size_t classes, std::size_t dim, std::size_t capacity)
    : dim_(dim), capacity_(capacity), lists_(classes) {
  if (classes == 0 || dim == 0 || capacity == 0) fail(Errc::DomainError, "memory bank needs classes, dim and capacity");
}

MemoryBank MemoryBank::from_classifier(const Tensor& w, std::size_t capacity) {
  if (w.rank() != 2) fail(Errc::ShapeMismatch, "bank_init expects [F x K] weights");
  const std::size_t f = w.dim(0), k = w.dim(1);
  MemoryBank bank(k, f, capacity);
  const auto wv = w.values();
  for (std::size_t c = 0; c < k; ++c) {
    std::vector<double> col(f);
    for (std::size_t j = 0; j < f; ++j) col[j] = wv[j * k + c];
    double norm = 0.0;
    BankEntry e;
    e.embedding = unit(col, norm);
    if (norm < 1e-12) fail(Errc::ZeroWeightColumn, "classifier column " + std::to_string(c));
    // a confident one-hot: entropy exactly 0
    e.logits.assign(k, 0.0);
    e.logits[c] = 1e3;
    e.entropy = 0.0;
    e.arrival = 0;
    bank.lists_[c].push_back(std::move(e));
  }
  return bank;
}

bool MemoryBank::update(std::span<const double> z_raw, std::span<const double> p, std::uint64_t arrival,
                        std::span<const double> logits) {
  if (z_raw.size() != dim_) fail(Errc::ShapeMismatch, "bank_update embedding size");
  if (p.size() != classes() || (!logits.empty() && logits.size() != classes()))
    fail(Errc::ShapeMismatch, "bank_update class count");
  double total = 0.0;
  for (double v : p) {
    if (!(v >= 0.0)) fail(Errc::InvalidDistribution, "bank_update: negative probability");
    total += v;
  }
  if (std::abs(total - 1.0) > 1e-6) fail(Errc::InvalidDistribution, "bank_update: p does not sum to 1");

  double norm = 0.0;
  BankEntry e;
  e.embedding = unit(z_raw, norm);
  if (norm < 1e-12) {
    spdlog::warn("bank_update: zero-norm embedding at arrival {} skipped", arrival);
    return false;
  }
  if (logits.empty()) {
    for (double v : p) e.logits.push_back(v > 0 ? std::log(v) : -1e3);
  } else {
    e.logits.assign(logits.begin(), logits.end());
  }
  e.entropy = row_entropy(p);
  e.arrival = arrival;

  auto& list = lists_[argmax_lower(p)];
  if (!list.empty() && arrival <= list.back().arrival)
    fail(Errc::DomainError, "bank_update: arrival must increase within a class");
  list.push_back(std::move(e));
  if (list.size() > capacity_) {
    const auto worst = std::max_element(list.begin(), list.end(), [](const BankEntry& a, const BankEntry& b) {
      if (a.entropy != b.entropy) return a.entropy < b.entropy;
      return a.arrival > b.arrival;  // older wins the tie for eviction
    });
    list.erase(worst);
  }
  return true;
}

std::size_t MemoryBank::size() const {
  std::size_t n = 0;
  for (const auto& l : lists_) n += l.size();
  return n;
}

nlohmann::json MemoryBank::to_json() const {
  nlohmann::json j;
  j["classes"] = classes();
  j["dim"] = dim_;
  j["capacity"] = capacity_;
  auto& lists = j["entries"] = nlohmann::json::array();
  for (const auto& l : lists_) {
    auto arr = nlohmann::json::array();
    for (const BankEntry& e : l)
      arr.push_back({{"embedding", e.embedding}, {"logits", e.logits}, {"entropy", e.entropy}, {"arrival", e.arrival}});
    lists.push_back(std::move(arr));
  }
  return j;
}

MemoryBank MemoryBank::from_json(const nlohmann::json& j) {
  try {
    MemoryBank bank(j.at("classes").get<std::size_t>(), j.at("dim").get<std::size_t>(),
                    j.at("capacity").get<std::size_t>());
    const auto& lists = j.at("entries");
    if (lists.size() != bank.classes()) fail(Errc::ShapeMismatch, "bank dump class count");
    for (std::size_t k = 0; k < bank.classes(); ++k)
      for (const auto& item : lists[k]) {
        BankEntry e;
        e.embedding = item.at("embedding").get<std::vector<double>>();
        e.logits = item.at("logits").get<std::vector<double>>();
        e.entropy = item.at("entropy").get<double>();
        e.arrival = item.at("arrival").get<std::uint64_t>();
        if (e.embedding.size() != bank.dim_ || e.logits.size() != bank.classes())
          fail(Errc::ShapeMismatch, "bank dump entry size");
        bank.lists_[k].push_back(std::move(e));
      }
    return bank;
  } catch (const nlohmann::json::exception& ex) {
    fail(Errc::ConfigParseError, std::string("bank dump: ") + ex.what());
  }
}

std::vector<Neighbor> retrieve_neighbors(const MemoryBank& bank, std::span<const double> z, std::size_t n) {
  if (bank.size() == 0) fail(Errc::EmptyBank, "retrieve_neighbors on an empty bank");
  if (z.size() != bank.dim()) fail(Errc::ShapeMismatch, "retrieve_neighbors query size");
  if (n == 0) fail(Errc::DomainError, "retrieve_neighbors with n = 0");
  std::vector<Neighbor> all;
  all.reserve(bank.size());
  for (std::size_t k = 0; k < bank.classes(); ++k) {
    const auto& list = bank.entries(k);
    for (std::size_t i = 0; i < list.size(); ++i) {
      double dot = 0.0;
      for (std::size_t j = 0; j < z.size(); ++j) dot += z[j] * list[i].embedding[j];
      all.push_back({k, i, 1.0 - dot, list[i].arrival});
    }
  }
  std::sort(all.begin(), all.end(), [](const Neighbor& a, const Neighbor& b) {
    if (a.distance != b.distance) return a.distance < b.distance;
    if (a.arrival != b.arrival) return a.arrival < b.arrival;
    return a.cls < b.cls;
  });
  const double gamma = all[std::min(n, all.size()) - 1].distance;
  std::size_t keep = 0;
  while (keep < all.size() && all[keep].distance <= gamma) ++keep;
  all.resize(keep);
  for (const Neighbor& nb : all) note_branch(nb.cls * 1000003 + nb.index);
  return all;
}

BankView bank_view(const MemoryBank& bank) {
  BankView v;
  std::vector<double> rows;
  rows.reserve(bank.size() * bank.dim());
  for (std::size_t k = 0; k < bank.classes(); ++k) {
    v.offset.push_back(v.cls.size());
    for (const BankEntry& e : bank.entries(k)) {
      rows.insert(rows.end(), e.embedding.begin(), e.embedding.end());
      v.cls.push_back(k);
    }
  }
  v.embeddings = tensor({v.cls.size(), bank.dim()}, std::move(rows));
  return v;
}

PlmParams PlmParams::init(std::mt19937_64& rng, std::size_t modules, std::size_t dim, double noise) {
  if (modules == 0 || dim == 0) fail(Errc::DomainError, "PLM needs at least one module and dimension");
  if (!(noise >= 0)) fail(Errc::DomainError, "PLM init noise must be non-negative");
  std::normal_distribution<double> g(0.0, noise > 0 ? noise : 1.0);
  PlmParams p;
  for (std::size_t i = 0; i < modules; ++i) {
    std::vector<double> w(dim * dim);
    for (std::size_t r = 0; r < dim; ++r)
      for (std::size_t c = 0; c < dim; ++c) w[r * dim + c] = (r == c ? 1.0 : 0.0) + (noise > 0 ? g(rng) : 0.0);
    p.w.push_back(leaf({dim, dim}, std::move(w)));
    p.b.push_back(leaf({dim}, std::vector<double>(dim, 0.0)));
  }
  return p;
}

PlmParams PlmParams::from_named(const TensorMap& m) {
  PlmParams p;
  for (std::size_t i = 0; m.count("tpd/plm." + std::to_string(i) + ".W"); ++i) {
    p.w.push_back(fetch(m, "tpd/plm." + std::to_string(i) + ".W"));
    p.b.push_back(fetch(m, "tpd/plm." + std::to_string(i) + ".b"));
    if (p.w.back().rank() != 2 || p.w.back().dim(0) != p.w.back().dim(1) || p.w.front().shape() != p.w.back().shape())
      fail(Errc::ShapeMismatch, "PLM modules must share a square shape");
  }
  if (p.w.empty()) fail(Errc::ShapeMismatch, "no PLM modules in checkpoint");
  return p;
}

std::vector<Tensor> PlmParams::all() const {
  std::vector<Tensor> out;
  for (std::size_t i = 0; i < w.size(); ++i) {
    out.push_back(w[i]);
    out.push_back(b[i]);
  }
  return out;
}

TensorMap PlmParams::named() const {
  TensorMap m;
  for (std::size_t i = 0; i < w.size(); ++i) {
    m["tpd/plm." + std::to_string(i) + ".W"] = w[i];
    m["tpd/plm." + std::to_string(i) + ".b"] = b[i];
  }
  return m;
}

PlmParams PlmParams::clone() const { return from_named(named()); }

Tensor plm_apply(const PlmParams& p, std::size_t module, const Tensor& z) {
  if (module >= p.modules()) fail(Errc::IndexOutOfRange, "PLM module " + std::to_string(module));
  return model::linear(z, p.w[module], p.b[module]);
}

Tensor compute_centroids(const PlmParams& p, std::size_t module, const BankView& view, std::size_t classes) {
  return centroids_from(plm_apply(p, module, view.embeddings), view, classes);
}

Tensor proto_probs(const Tensor& h, const Tensor& centroids, double tau) {
  if (!(tau > 0)) fail(Errc::DomainError, "tau_proto must be positive");
  const Tensor sim = matmul(l2_normalize(h, 1), transpose(centroids));
  return softmax(scale(add_scalar(sim, -1.0), 1.0 / tau), 1);
}

std::vector<double> neighbor_pseudo_label(const Tensor& neighbor_probs) {
  if (neighbor_probs.rank() != 2) fail(Errc::ShapeMismatch, "neighbor_pseudo_label expects [n x K]");
  const std::size_t n = neighbor_probs.dim(0), k = neighbor_probs.dim(1);
  if (n == 0) fail(Errc::EmptyNeighborSet, "no neighbors to vote");
  std::vector<std::size_t> votes(k, 0);
  const auto v = neighbor_probs.values();
  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t c = argmax_lower(v.subspan(i * k, k));
    note_branch(c);
    ++votes[c];
  }
  std::vector<double> out(k);
  for (std::size_t c = 0; c < k; ++c) out[c] = static_cast<double>(votes[c]) / static_cast<double>(n);
  return out;
}

std::vector<double> epd_weights(const Tensor& p, double tau) {
  if (!(tau > 0)) fail(Errc::DomainError, "tau_epd must be positive");
  const Tensor h = entropy(p.detach());
  const Tensor w = softmax(scale(h, 1.0 / tau), 0);
  const auto wv = w.values();
  return {wv.begin(), wv.end()};
}

Tensor epd_weighted(const Tensor& p, const Tensor& y_hat, std::span<const double> weights) {
  if (p.rank() != 2 || weights.size() != p.dim(0)) fail(Errc::ShapeMismatch, "epd: one weight per row");
  return sum(mul(kl_divergence(p, y_hat), tensor({weights.size()}, {weights.begin(), weights.end()})));
}

Tensor epd(const Tensor& p, const Tensor& y_hat, double tau) { return epd_weighted(p, y_hat, epd_weights(p, tau)); }

namespace {

struct Shared {
  Tensor f, zn, pm;
  BankView view;
};

Shared shared_inputs(const Tensor& features, const Tensor& cls_w, const Tensor& cls_b, const MemoryBank& bank) {
  if (features.rank() != 2 || features.dim(0) == 0) fail(Errc::ShapeMismatch, "ttt_loss expects a non-empty [B x F]");
  Shared s;
  s.f = features.detach();
  s.zn = l2_normalize(s.f, 1);
  s.pm = softmax(model::linear(s.f, cls_w, cls_b), 1);
  s.view = bank_view(bank);
  return s;
}

}  // namespace

std::vector<ModuleTargets> ttt_targets(const TpdConfig& cfg, const Tensor& features, const Tensor& cls_w,
                                       const Tensor& cls_b, const PlmParams& plm, const MemoryBank& bank,
                                       const std::vector<std::vector<Neighbor>>& neighbors) {
  const Shared in = shared_inputs(features, cls_w.detach(), cls_b.detach(), bank);
  const std::size_t b = in.f.dim(0), k = bank.classes();
  if (neighbors.size() != b) fail(Errc::ShapeMismatch, "ttt_loss: one neighbor list per sample");
  const double eps = cfg.label_smooth_eps;
  const std::vector<double> w_model = epd_weights(in.pm, cfg.tau_epd);

  std::vector<ModuleTargets> out;
  for (std::size_t i = 0; i < plm.modules(); ++i) {
    const Tensor mapped = plm_apply(plm, i, in.view.embeddings).detach();
    const Tensor mu = centroids_from(mapped, in.view, k);
    const Tensor bank_probs = proto_probs(mapped, mu, cfg.tau_proto);
    const auto bp = bank_probs.values();

    std::vector<double> yhat(b * k);
    for (std::size_t s = 0; s < b; ++s) {
      const auto& nbs = neighbors[s];
      std::vector<double> rows;
      rows.reserve(nbs.size() * k);
      for (const Neighbor& nb : nbs) {
        const auto r = bp.subspan(in.view.row(nb) * k, k);
        rows.insert(rows.end(), r.begin(), r.end());
      }
      const auto votes = neighbor_pseudo_label(tensor({nbs.size(), k}, std::move(rows)));
      for (std::size_t c = 0; c < k; ++c) yhat[s * k + c] = (1.0 - eps) * votes[c] + eps / static_cast<double>(k);
    }
    const Tensor pp = proto_probs(plm_apply(plm, i, in.zn).detach(), mu, cfg.tau_proto);
    out.push_back({tensor({b, k}, std::move(yhat)), epd_weights(pp, cfg.tau_epd), w_model});
  }
  return out;
}

Tensor ttt_loss(const TpdConfig& cfg, const Tensor& features, const Tensor& cls_w, const Tensor& cls_b,
                const PlmParams& plm, const MemoryBank& bank, const std::vector<ModuleTargets>& targets) {
  const Shared in = shared_inputs(features, cls_w, cls_b, bank);
  if (targets.size() != plm.modules()) fail(Errc::ShapeMismatch, "ttt_loss: one target set per PLM module");
  Tensor total;
  for (std::size_t i = 0; i < plm.modules(); ++i) {
    const ModuleTargets& t = targets[i];
    const Tensor mu = centroids_from(plm_apply(plm, i, in.view.embeddings), in.view, bank.classes());
    const Tensor pp = proto_probs(plm_apply(plm, i, in.zn), mu, cfg.tau_proto);
    Tensor li = epd_weighted(pp, t.pseudo, t.w_proto) + cfg.lambda1 * epd_weighted(in.pm, t.pseudo, t.w_model) +
                cfg.lambda2 * mean(kl_divergence(in.pm, pp));
    total = total.defined() ? total + li : li;
  }
  return scale(total, 1.0 / static_cast<double>(plm.modules()));
}

Tensor ttt_loss(const TpdConfig& cfg, const Tensor& features, const Tensor& cls_w, const Tensor& cls_b,
                const PlmParams& plm, const MemoryBank& bank, const std::vector<std::vector<Neighbor>>& neighbors) {
  return ttt_loss(cfg, features, cls_w, cls_b, plm, bank, ttt_targets(cfg, features, cls_w, cls_b, plm, bank, neighbors));
}

TpdState TpdState::create(const TpdConfig& cfg, const Tensor& cls_w, const Tensor& cls_b, std::uint64_t seed) {
  cfg.validate();
  std::mt19937_64 rng(seed);
  TpdState s{cfg,
             cls_w.clone(),
             cls_b.clone(),
             PlmParams::init(rng, cfg.n_modules, cls_w.dim(0)),
             MemoryBank::from_classifier(cls_w, cfg.capacity),
             {},
             {},
             1,
             {}};
  s.cls_w.node()->requires_grad = true;
  s.cls_b.node()->requires_grad = true;
  return s;
}

TensorMap TpdState::named() const {
  TensorMap m = plm.named();
  m["tpd/classifier.W"] = cls_w;
  m["tpd/classifier.b"] = cls_b;
  return m;
}

Tensor adapt_batch(TpdState& state, const Tensor& features) {
  const TpdConfig& cfg = state.config;
  if (features.rank() != 2 || features.dim(1) != state.bank.dim())
    fail(Errc::ShapeMismatch, "adapt_batch features " + to_string(features.shape()));
  const std::size_t b = features.dim(0), k = state.bank.classes(), d = features.dim(1);
  if (b == 0) fail(Errc::ShapeMismatch, "adapt_batch on an empty batch");
  const Tensor f = features.detach();
  const auto fv = f.values();

  std::vector<std::vector<Neighbor>> neighbors;
  neighbors.reserve(b);
  for (std::size_t s = 0; s < b; ++s) {
    double norm = 0.0;
    const auto z = unit(fv.subspan(s * d, d), norm);
    neighbors.push_back(retrieve_neighbors(state.bank, z, cfg.n_neighbors));
  }

  auto predict = [&] { return softmax(model::linear(f, state.cls_w.detach(), state.cls_b.detach()), 1); };
  Tensor early;
  if (cfg.predict_then_update) early = predict();

  std::vector<Tensor> clf{state.cls_w, state.cls_b};
  std::vector<Tensor> plm = state.plm.all();
  for (std::size_t step = 0; step < cfg.steps_per_batch; ++step) {
    Tape tape;
    const Tensor loss = ttt_loss(cfg, f, state.cls_w, state.cls_b, state.plm, state.bank, neighbors);
    backward(loss);
    state.losses.push_back(loss.item());
    adam_step(clf, state.clf_opt, cfg.clf_lr);
    adam_step(plm, state.plm_opt, cfg.plm_lr);
  }

  const Tensor logits = model::linear(f, state.cls_w.detach(), state.cls_b.detach());
  const Tensor late = softmax(logits, 1);
  const auto lv = logits.values();
  const auto pv = late.values();
  for (std::size_t s = 0; s < b; ++s)
    if (state.bank.update(fv.subspan(s * d, d), pv.subspan(s * k, k), state.next_arrival, lv.subspan(s * k, k)))
      ++state.next_arrival;
  return cfg.predict_then_update ? early : late;
}

std::vector<double> tpd_predict_scores(const TpdState& state, const Tensor& features) {
  const Tensor p = softmax(model::linear(features.detach(), state.cls_w.detach(), state.cls_b.detach()), 1);
  const auto v = p.values();
  const std::size_t k = p.dim(1);
  std::vector<double> out(p.dim(0));
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = v[i * k + 1];
  return out;
}

}  // namespace gtta::tpd
