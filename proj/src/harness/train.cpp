#include <algorithm>
#include <array>
#include <cmath>
#include <numeric>
#include <random>

#include <spdlog/spdlog.h>

#include "gtta/error.hpp"
#include "gtta/harness.hpp"
#include "gtta/optim.hpp"

#if defined(__GLIBC__)
#include <malloc.h>
#endif

namespace gtta::harness {

namespace {

// Independent streams per purpose so the GRT switch never shifts the draws
// of shared components.
std::uint64_t stream_seed(std::uint64_t seed, std::uint64_t purpose) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(purpose)};
  std::array<std::uint32_t, 2> words{};
  seq.generate(words.begin(), words.end());
  return (static_cast<std::uint64_t>(words[0]) << 32) | words[1];
}

enum Purpose : std::uint64_t { kBackboneInit = 1, kGrtInit = 2, kShuffle = 3 };

}  // namespace

void TrainConfig::validate() const {
  if (batch == 0 || decay_every == 0) fail(Errc::DomainError, "batch and decay_every must be positive");
  if (!(lr > 0)) fail(Errc::DomainError, "lr must be positive");
  if (!(decay > 0)) fail(Errc::DomainError, "decay must be positive");
  if (!(lambda >= 0.0 && lambda <= 1.0)) fail(Errc::InvalidLambda, "lambda = " + std::to_string(lambda));
  if (k_keep == 0 || k_keep > model::kRegions) fail(Errc::BadK, "k_keep = " + std::to_string(k_keep));
}

double lr_at_epoch(const TrainConfig& cfg, std::size_t epoch) {
  if (epoch == 0) fail(Errc::DomainError, "epochs are numbered from 1");
  return cfg.lr * std::pow(cfg.decay, static_cast<double>((epoch - 1) / cfg.decay_every));
}

TensorMap SourceModel::named() const {
  TensorMap m = backbone.named();
  if (grt) m.merge(grt->named());
  return m;
}

SourceModel SourceModel::from_named(const TensorMap& m) {
  SourceModel s{model::BackboneParams::from_named(m), std::nullopt, {}};
  if (m.count("grt/classifier.W")) s.grt = model::GrtParams::from_named(m);
  return s;
}

SourceModel init_model(const TrainConfig& cfg) {
  cfg.validate();
  std::mt19937_64 brng(stream_seed(cfg.seed, kBackboneInit));
  SourceModel m{model::BackboneParams::init(brng), std::nullopt, {}};
  if (cfg.grt) {
    std::mt19937_64 grng(stream_seed(cfg.seed, kGrtInit));
    m.grt = model::GrtParams::init(grng, cfg.k_keep);
  }
  return m;
}

SourceModel train_source(const TrainConfig& cfg, const data::Dataset& source) {
  if (source.class_counts[0] == 0 || source.class_counts[1] == 0)
    fail(Errc::SingleClassSource, "source domain " + source.name + " lacks a class");
  SourceModel m = init_model(cfg);
  std::vector<Tensor> params = m.backbone.all();
  if (m.grt)
    for (const Tensor& t : m.grt->all()) params.push_back(t);
  AdamState opt;
  std::mt19937_64 shuffle(stream_seed(cfg.seed, kShuffle));
  std::vector<std::size_t> order(source.size());
  std::iota(order.begin(), order.end(), 0);

  for (std::size_t epoch = 1; epoch <= cfg.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), shuffle);
    const double lr = lr_at_epoch(cfg, epoch);
    double total = 0.0;
    std::size_t batches = 0;
    for (std::size_t start = 0; start < order.size(); start += cfg.batch) {
      const std::size_t end = std::min(order.size(), start + cfg.batch);
      std::vector<std::span<const float>> images;
      std::vector<int> labels;
      for (std::size_t i = start; i < end; ++i) {
        images.emplace_back(source.samples[order[i]].image);
        labels.push_back(source.samples[order[i]].label);
      }
      {
        Tape tape;
        const model::Features f = model::backbone_forward(m.backbone, model::patchify_batch(images));
        const Tensor logits = model::classifier_logits(m.backbone, f.pooled);
        const Tensor loss = m.grt ? model::grt_loss(logits, model::grt_forward(*m.grt, f.regions).logits, labels,
                                                     cfg.lambda)
                                  : cross_entropy(logits, labels);
        total += loss.item();
        backward(loss);
      }
      adam_step(params, opt, lr);
      ++batches;
    }
    m.loss_trace.push_back(total / static_cast<double>(batches));
    spdlog::debug("seed {} {} epoch {} lr {:g} loss {:.4f}", cfg.seed, m.grt ? "grt" : "vanilla", epoch, lr,
                  m.loss_trace.back());
  }
  return m;
}

Tensor extract_features(const model::BackboneParams& p, const data::Dataset& ds, std::size_t batch) {
  std::vector<double> out;
  out.reserve(ds.size() * model::kFeatures);
  for (std::size_t start = 0; start < ds.size(); start += batch) {
    std::vector<std::span<const float>> images;
    for (std::size_t i = start; i < std::min(ds.size(), start + batch); ++i) images.emplace_back(ds.samples[i].image);
    const model::Features f = model::backbone_forward(p, model::patchify_batch(images));
    const auto v = f.pooled.values();
    out.insert(out.end(), v.begin(), v.end());
  }
  return tensor({ds.size(), model::kFeatures}, std::move(out));
}

void tune_allocator() {
#if defined(__GLIBC__)
  mallopt(M_MMAP_THRESHOLD, 1 << 30);
  mallopt(M_TRIM_THRESHOLD, 1 << 30);
#endif
}

}  // namespace gtta::harness
