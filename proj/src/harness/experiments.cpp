#include <algorithm>
#include <atomic>
#include <cmath>
#include <exception>
#include <mutex>
#include <thread>

#include <spdlog/spdlog.h>

#include "gtta/error.hpp"
#include "gtta/harness.hpp"

namespace gtta::harness {

namespace {

Tensor slice_rows(const Tensor& x, std::size_t begin, std::size_t end) {
  const std::size_t d = x.dim(1);
  const auto v = x.values();
  return tensor({end - begin, d}, std::vector<double>(v.begin() + static_cast<std::ptrdiff_t>(begin * d),
                                                      v.begin() + static_cast<std::ptrdiff_t>(end * d)));
}

void append_class1(std::vector<double>& out, const Tensor& probs) {
  const std::size_t k = probs.dim(1);
  const auto v = probs.values();
  for (std::size_t i = 0; i < probs.dim(0); ++i) out.push_back(v[i * k + 1]);
}

nlohmann::json result_json(const EvalResult& r) {
  nlohmann::json j;
  j["domains"] = nlohmann::json::array();
  for (const auto& d : r.domains) j["domains"].push_back({{"domain", d.domain}, {"acc", d.acc}, {"auc", d.auc}});
  j["avg_acc"] = r.avg_acc;
  j["avg_auc"] = r.avg_auc;
  return j;
}

std::vector<std::string> domain_names(const std::vector<data::Dataset>& targets) {
  std::vector<std::string> names;
  for (const auto& t : targets) names.push_back(t.name);
  return names;
}

}  // namespace

std::string_view method_name(Method m) {
  switch (m) {
    case Method::None: return "none";
    case Method::Tent: return "tent";
    case Method::Plclf: return "plclf";
    case Method::T3a: return "t3a";
    case Method::Tpd: return "tpd";
  }
  return "none";
}

Method parse_method(std::string_view s) {
  for (Method m : kAllMethods)
    if (method_name(m) == s) return m;
  fail(Errc::UsageError, "unknown method '" + std::string(s) + "'");
}

std::vector<double> adapt_scores(const SourceModel& model, const Tensor& features, Method method,
                                 const AdaptConfig& cfg, std::uint64_t seed) {
  const Tensor& w = model.backbone.cls_w;
  const Tensor& b = model.backbone.cls_b;
  const std::size_t n = features.dim(0), step = cfg.tpd.batch;
  std::vector<double> scores;
  scores.reserve(n);
  switch (method) {
    case Method::None: {
      const Tensor p = softmax(model::classifier_logits(model.backbone, features.detach()), 1);
      append_class1(scores, p);
      break;
    }
    case Method::Tpd: {
      tpd::TpdState st = tpd::TpdState::create(cfg.tpd, w, b, seed);
      for (std::size_t s = 0; s < n; s += step) append_class1(scores, tpd::adapt_batch(st, slice_rows(features, s, std::min(n, s + step))));
      break;
    }
    case Method::Tent:
    case Method::Plclf: {
      baselines::ClassifierState st = baselines::ClassifierState::create(w, b, cfg.baseline_lr);
      for (std::size_t s = 0; s < n; s += step) {
        const Tensor batch = slice_rows(features, s, std::min(n, s + step));
        if (method == Method::Tent) {
          baselines::tent_step(st, batch);
        } else {
          baselines::plclf_step(st, batch, cfg.plclf_threshold);
        }
        append_class1(scores, baselines::classifier_probs(st, batch));
      }
      break;
    }
    case Method::T3a: {
      baselines::T3aSupport support = baselines::T3aSupport::from_classifier(w, cfg.t3a_filter);
      append_class1(scores, baselines::t3a_predict_batch(support, features, w, b));
      break;
    }
  }
  return scores;
}

DomainResult evaluate_domain(const SourceModel& model, const data::Dataset& target, Method method,
                             const AdaptConfig& cfg, std::uint64_t seed) {
  const Tensor features = extract_features(model.backbone, target);
  const std::vector<double> scores = adapt_scores(model, features, method, cfg, seed);
  std::vector<int> labels, predicted;
  for (std::size_t i = 0; i < target.size(); ++i) {
    labels.push_back(target.samples[i].label);
    // argmax of [1 - s, s] with ties to class 0
    predicted.push_back(scores[i] > 0.5 ? 1 : 0);
  }
  return {target.name, accuracy(predicted, labels), roc_auc(scores, labels)};
}

EvalResult evaluate(const SourceModel& model, const std::vector<data::Dataset>& targets, Method method,
                    const AdaptConfig& cfg, std::uint64_t seed, std::size_t jobs) {
  std::vector<DomainResult> out(targets.size());
  parallel_for(targets.size(), jobs,
               [&](std::size_t i) { out[i] = evaluate_domain(model, targets[i], method, cfg, seed); });
  return summarize(std::move(out));
}

void parallel_for(std::size_t n, std::size_t jobs, const std::function<void(std::size_t)>& fn) {
  jobs = std::max<std::size_t>(1, std::min(jobs, n));
  if (jobs == 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::exception_ptr first;
  std::mutex mu;
  std::vector<std::thread> pool;
  for (std::size_t t = 0; t < jobs; ++t)
    pool.emplace_back([&] {
      for (std::size_t i = next++; i < n; i = next++) {
        try {
          fn(i);
        } catch (...) {
          std::lock_guard<std::mutex> lock(mu);
          if (!first) first = std::current_exception();
        }
      }
    });
  for (auto& t : pool) t.join();
  if (first) std::rethrow_exception(first);
}

Report run_ablation(const ExperimentConfig& cfg, const data::Dataset& source,
                    const std::vector<data::Dataset>& targets) {
  // one (seed, pathway) training per task: pathway 0 vanilla, 1 GRT
  std::vector<SourceModel> models(cfg.seeds.size() * 2);
  parallel_for(models.size(), cfg.jobs, [&](std::size_t i) {
    TrainConfig tc = cfg.train;
    tc.seed = cfg.seeds[i / 2];
    tc.grt = i % 2 == 1;
    models[i] = train_source(tc, source);
    spdlog::info("trained seed {} {}", tc.seed, tc.grt ? "grt" : "vanilla");
  });
  std::vector<SourceModel> vanilla, grt;
  for (std::size_t i = 0; i < models.size(); ++i) (i % 2 ? grt : vanilla).push_back(std::move(models[i]));
  return ablate_models(cfg, vanilla, grt, targets);
}

Report ablate_models(const ExperimentConfig& cfg, const std::vector<SourceModel>& vanilla,
                     const std::vector<SourceModel>& grt, const std::vector<data::Dataset>& targets) {
  if (vanilla.size() != cfg.seeds.size() || grt.size() != cfg.seeds.size())
    fail(Errc::ShapeMismatch, "one vanilla and one GRT model per seed");
  Report r{"ablation", domain_names(targets), {}, nlohmann::json::array()};
  for (const char* cell : kAblationCells) r.rows.push_back({cell, std::vector<EvalResult>(cfg.seeds.size())});
  auto model_of = [&](std::size_t s, std::size_t cell) -> const SourceModel& { return cell >= 2 ? grt[s] : vanilla[s]; };
  parallel_for(cfg.seeds.size() * 4, cfg.jobs, [&](std::size_t i) {
    const std::size_t s = i / 4, cell = i % 4;
    const Method method = cell % 2 == 1 ? Method::Tpd : Method::None;
    r.rows[cell].per_seed[s] = evaluate(model_of(s, cell), targets, method, cfg.adapt, cfg.seeds[s]);
  });
  for (std::size_t s = 0; s < cfg.seeds.size(); ++s)
    for (std::size_t cell = 0; cell < 4; ++cell) {
      const SourceModel& m = model_of(s, cell);
      nlohmann::json run = result_json(r.rows[cell].per_seed[s]);
      run["seed"] = cfg.seeds[s];
      run["cell"] = kAblationCells[cell];
      run["train_loss"] = m.loss_trace;
      run["checkpoint_digest"] = checkpoint_digest(m.named());
      r.runs.push_back(std::move(run));
    }
  return r;
}

Report compare_models(const ExperimentConfig& cfg, const std::vector<SourceModel>& models,
                      const std::vector<data::Dataset>& targets) {
  if (models.size() != cfg.seeds.size()) fail(Errc::ShapeMismatch, "one model per seed");
  constexpr std::size_t kMethods = std::size(kAllMethods);
  Report r{"comparison", domain_names(targets), {}, nlohmann::json::array()};
  for (Method m : kAllMethods) r.rows.push_back({std::string(method_name(m)), std::vector<EvalResult>(cfg.seeds.size())});
  parallel_for(cfg.seeds.size() * kMethods, cfg.jobs, [&](std::size_t i) {
    const std::size_t s = i / kMethods, m = i % kMethods;
    r.rows[m].per_seed[s] = evaluate(models[s], targets, kAllMethods[m], cfg.adapt, cfg.seeds[s]);
  });
  for (std::size_t s = 0; s < cfg.seeds.size(); ++s)
    for (std::size_t m = 0; m < kMethods; ++m) {
      nlohmann::json run = result_json(r.rows[m].per_seed[s]);
      run["seed"] = cfg.seeds[s];
      run["method"] = method_name(kAllMethods[m]);
      run["checkpoint_digest"] = checkpoint_digest(models[s].named());
      r.runs.push_back(std::move(run));
    }
  return r;
}

Report run_comparison(const ExperimentConfig& cfg, const data::Dataset& source,
                      const std::vector<data::Dataset>& targets) {
  std::vector<SourceModel> models(cfg.seeds.size());
  parallel_for(models.size(), cfg.jobs, [&](std::size_t i) {
    TrainConfig tc = cfg.train;
    tc.seed = cfg.seeds[i];
    tc.grt = true;
    models[i] = train_source(tc, source);
  });
  return compare_models(cfg, models, targets);
}

std::vector<bool> disc_mask(const data::DiscGeometry& g) {
  std::vector<bool> mask(model::kRegions, false);
  for (std::size_t n = 0; n < model::kRegions; ++n) {
    const auto cell = model::region_cell(n);
    const double r0 = static_cast<double>(cell.row * model::kPatch);
    const double c0 = static_cast<double>(cell.col * model::kPatch);
    const double r1 = r0 + model::kPatch - 1, c1 = c0 + model::kPatch - 1;
    const double dr = g.row < r0 ? r0 - g.row : (g.row > r1 ? g.row - r1 : 0.0);
    const double dc = g.col < c0 ? c0 - g.col : (g.col > c1 ? g.col - c1 : 0.0);
    mask[n] = std::hypot(dr, dc) <= g.radius;
  }
  return mask;
}

double disc_attribution_mass(const model::BackboneParams& p, const data::Dataset& ds, std::size_t count) {
  double total = 0.0;
  std::size_t used = 0;
  for (const data::Sample& s : ds.samples) {
    if (used == count) break;
    if (!s.geometry) continue;
    const std::vector<double> map = model::region_attribution(p, s.image, s.label);
    const std::vector<bool> mask = disc_mask(*s.geometry);
    for (std::size_t n = 0; n < map.size(); ++n)
      if (mask[n]) total += map[n];
    ++used;
  }
  if (used == 0) fail(Errc::EmptyEval, "no samples with disc geometry");
  return total / static_cast<double>(used);
}

double disc_attribution_mass(const model::BackboneParams& p, const std::vector<data::Dataset>& domains,
                             std::size_t count) {
  data::Dataset mixed;
  mixed.name = "mixed";
  std::size_t longest = 0;
  for (const auto& d : domains) longest = std::max(longest, d.size());
  for (std::size_t i = 0; i < longest && mixed.size() < count; ++i)
    for (const auto& d : domains)
      if (i < d.size() && d.samples[i].geometry && mixed.size() < count) mixed.samples.push_back(d.samples[i]);
  return disc_attribution_mass(p, mixed, count);
}

}  // namespace gtta::harness
