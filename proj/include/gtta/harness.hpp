#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "gtta/backbone.hpp"
#include "gtta/baselines.hpp"
#include "gtta/grt.hpp"
#include "gtta/synthdata.hpp"
#include "gtta/tpd.hpp"

namespace gtta::harness {

struct TrainConfig {
  std::uint64_t seed = 0;
  std::size_t epochs = 15;
  std::size_t batch = 16;
  double lr = 1e-4;
  std::size_t decay_every = 5;
  double decay = 0.1;
  double lambda = model::kDefaultLambda;
  bool grt = true;
  std::size_t k_keep = model::kKeep;

  void validate() const;  // DomainError
};

/// Learning rate in effect during 1-based `epoch`.
double lr_at_epoch(const TrainConfig& cfg, std::size_t epoch);

struct SourceModel {
  model::BackboneParams backbone;
  std::optional<model::GrtParams> grt;
  std::vector<double> loss_trace;  // mean training loss per epoch

  TensorMap named() const;
  static SourceModel from_named(const TensorMap& m);
};

/// Initial parameters for a seed. The backbone draws are identical with and
/// without GRT, so both pathways start from the same backbone.
SourceModel init_model(const TrainConfig& cfg);

SourceModel train_source(const TrainConfig& cfg, const data::Dataset& source);

/// Pooled backbone features [n x F] in dataset order.
Tensor extract_features(const model::BackboneParams& p, const data::Dataset& ds, std::size_t batch = 64);

double accuracy(std::span<const int> predicted, std::span<const int> truth);
double roc_auc(std::span<const double> scores, std::span<const int> labels);

enum class Method { None, Tent, Plclf, T3a, Tpd };
std::string_view method_name(Method m);
Method parse_method(std::string_view s);  // UsageError
inline constexpr Method kAllMethods[] = {Method::None, Method::Tent, Method::Plclf, Method::T3a, Method::Tpd};

struct AdaptConfig {
  tpd::TpdConfig tpd;
  double baseline_lr = baselines::kDefaultLr;
  double plclf_threshold = baselines::kDefaultThreshold;
  std::size_t t3a_filter = baselines::kDefaultFilter;
};

struct DomainResult {
  std::string domain;
  double acc = 0.0;
  double auc = 0.0;
};

struct EvalResult {
  std::vector<DomainResult> domains;
  double avg_acc = 0.0;
  double avg_auc = 0.0;
};

EvalResult summarize(std::vector<DomainResult> domains);

/// Class-1 probabilities for the target stream in dataset order, adapting
/// online in batches of cfg.tpd.batch. The model is not modified.
std::vector<double> adapt_scores(const SourceModel& model, const Tensor& features, Method method,
                                 const AdaptConfig& cfg, std::uint64_t seed);

DomainResult evaluate_domain(const SourceModel& model, const data::Dataset& target, Method method,
                             const AdaptConfig& cfg, std::uint64_t seed);

EvalResult evaluate(const SourceModel& model, const std::vector<data::Dataset>& targets, Method method,
                    const AdaptConfig& cfg, std::uint64_t seed, std::size_t jobs = 1);

/// Runs fn(0..n-1) on up to `jobs` threads; rethrows the first failure.
void parallel_for(std::size_t n, std::size_t jobs, const std::function<void(std::size_t)>& fn);

struct ExperimentConfig {
  TrainConfig train;
  AdaptConfig adapt;
  std::vector<std::uint64_t> seeds{0, 1, 2, 3, 4};
  std::size_t jobs = 1;
};

/// One row of a report: a labelled EvalResult per seed.
struct ReportRow {
  std::string label;
  std::vector<EvalResult> per_seed;
};

struct Report {
  std::string kind;  // "ablation" or "comparison"
  std::vector<std::string> domains;
  std::vector<ReportRow> rows;
  nlohmann::json runs = nlohmann::json::array();  // per-run logs
};

inline constexpr const char* kAblationCells[] = {"vanilla", "tpd-only", "grt-only", "grt+tpd"};

/// The four GRT x TPD cells. Each seed trains one vanilla and one GRT model;
/// cells without TPD evaluate the frozen model.
Report run_ablation(const ExperimentConfig& cfg, const data::Dataset& source, const std::vector<data::Dataset>& targets);

/// Same, from already trained models (one of each per seed, in cfg.seeds
/// order).
Report ablate_models(const ExperimentConfig& cfg, const std::vector<SourceModel>& vanilla,
                     const std::vector<SourceModel>& grt, const std::vector<data::Dataset>& targets);

/// Every method from the same GRT-trained checkpoint per seed.
Report run_comparison(const ExperimentConfig& cfg, const data::Dataset& source,
                      const std::vector<data::Dataset>& targets);

/// Same, from already trained models (one per seed, in cfg.seeds order).
Report compare_models(const ExperimentConfig& cfg, const std::vector<SourceModel>& models,
                      const std::vector<data::Dataset>& targets);

struct CsvRow {
  std::string label, metric;
  std::vector<double> values;  // domains, then avg, then avg_std
};

std::string report_csv(const Report& r);
std::string report_markdown(const Report& r);
std::vector<CsvRow> parse_report_csv(const std::string& text);

/// Rebuilds a report from its per-run log (the runs/<kind>.json array).
/// Rows and seeds keep their first-appearance order. ConfigParseError if
/// malformed.
Report report_from_runs(const nlohmann::json& runs);

/// Writes <dir>/<kind>.md, <dir>/<kind>.csv and <dir>/runs/<kind>.json.
/// IoError on failure or an empty report; files are written whole or not at
/// all.
void write_report(const Report& r, const std::filesystem::path& dir);

/// Mean share of attribution mass falling on patches that overlap the disc,
/// over the first `count` samples that carry geometry.
double disc_attribution_mass(const model::BackboneParams& p, const data::Dataset& ds, std::size_t count);
/// Same over several domains, taking samples round-robin: the first of each
/// domain, then the second, and so on.
double disc_attribution_mass(const model::BackboneParams& p, const std::vector<data::Dataset>& domains,
                             std::size_t count);

/// Patch-grid cells overlapping the disc circle.
std::vector<bool> disc_mask(const data::DiscGeometry& g);

/// Raises the mmap and trim thresholds so the allocator keeps tensor-sized
/// blocks on the heap; a large constant-factor win for the tape engine.
void tune_allocator();

}  // namespace gtta::harness
