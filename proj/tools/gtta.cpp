#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>
#include <spdlog/sinks/stdout_color_sinks.h>
#include <spdlog/spdlog.h>

#include "gtta/checkpoint.hpp"
#include "gtta/config.hpp"
#include "gtta/error.hpp"
#include "gtta/grt.hpp"
#include "gtta/harness.hpp"
#include "gtta/synthdata.hpp"

namespace fs = std::filesystem;
using namespace gtta;

namespace {

constexpr int kExitUsage = 1;
constexpr int kExitRuntime = 2;
constexpr const char* kDomainExt = ".gtta";
constexpr const char* kIndexFile = "benchmark.json";
// gen-data spreads --seed over the published per-domain seeds
constexpr std::uint64_t kSeedStride = 10007;

struct Options {
  std::string config;
  std::uint64_t seed = 0;
  std::size_t jobs = 1;
  std::string method = "tpd";
  std::string out;
  std::string data;
  std::string model;
  std::string input;
  std::size_t epochs = 0;
  bool no_grt = false;
  std::size_t steps_per_batch = 0, capacity = 0, seeds = 0, count = 100, index = 0;
  double tau_proto = 0.0, tau_epd = 0.0;
  std::string domain;
};

void setup_logging() {
  auto logger = spdlog::stderr_color_mt("gtta");
  spdlog::set_default_logger(logger);
  spdlog::set_pattern("[%l] %v");
  const char* env = std::getenv("GTTA_LOG");
  const std::string level = env ? env : "info";
  if (level == "error") {
    spdlog::set_level(spdlog::level::err);
  } else if (level == "info") {
    spdlog::set_level(spdlog::level::info);
  } else if (level == "debug") {
    spdlog::set_level(spdlog::level::debug);
  } else {
    fail(Errc::UsageError, "GTTA_LOG must be error, info or debug, not '" + level + "'");
  }
}

// Config file first, then flags that were given.
config::RunConfig resolve(const Options& o, const CLI::App& cmd) {
  config::RunConfig rc = o.config.empty() ? config::RunConfig{} : config::load_config(o.config);
  auto& ex = rc.experiment;
  auto given = [&](const char* flag) {
    const CLI::Option* opt = cmd.get_option_no_throw(flag);
    return opt != nullptr && opt->count() > 0;
  };
  if (given("--jobs")) ex.jobs = o.jobs;
  if (given("--epochs")) ex.train.epochs = o.epochs;
  if (given("--no-grt")) ex.train.grt = false;
  if (given("--steps-per-batch")) ex.adapt.tpd.steps_per_batch = o.steps_per_batch;
  if (given("--capacity")) ex.adapt.tpd.capacity = o.capacity;
  if (given("--tau-proto")) ex.adapt.tpd.tau_proto = o.tau_proto;
  if (given("--tau-epd")) ex.adapt.tpd.tau_epd = o.tau_epd;
  if (given("--data")) rc.data_dir = o.data;
  if (given("--seed") || given("--seeds")) {
    // --seeds counts up from --seed; alone, --seed shifts the configured count
    const std::size_t count = given("--seeds") ? o.seeds : ex.seeds.size();
    if (count == 0) fail(Errc::UsageError, "--seeds must be at least 1");
    ex.seeds.clear();
    for (std::size_t i = 0; i < count; ++i) ex.seeds.push_back(o.seed + i);
  }
  ex.train.seed = ex.seeds.front();
  try {
    ex.train.validate();
    ex.adapt.tpd.validate();
  } catch (const Error& e) {
    fail(Errc::UsageError, e.what());
  }
  return rc;
}

std::vector<data::DomainSpec> benchmark_specs(std::uint64_t seed) {
  std::vector<data::DomainSpec> specs{data::default_source_spec()};
  for (const auto& t : data::default_target_specs()) specs.push_back(t);
  for (auto& s : specs) s.seed += seed * kSeedStride;
  return specs;
}

data::Benchmark load_benchmark(const std::optional<fs::path>& dir) {
  if (!dir) {
    spdlog::info("generating the built-in benchmark");
    return data::default_benchmark();
  }
  std::ifstream in(*dir / kIndexFile);
  if (!in) fail(Errc::IoError, "no " + std::string(kIndexFile) + " in " + dir->string() + "; run gen-data first");
  nlohmann::json index;
  try {
    index = nlohmann::json::parse(in);
    data::Benchmark b;
    b.source = data::load_domain(*dir / index.at("source").get<std::string>());
    for (const auto& t : index.at("targets")) b.targets.push_back(data::load_domain(*dir / t.get<std::string>()));
    return b;
  } catch (const nlohmann::json::exception& e) {
    fail(Errc::IoError, std::string(kIndexFile) + ": " + e.what());
  }
}

harness::SourceModel load_model(const std::string& path) {
  if (path.empty()) fail(Errc::UsageError, "--model is required");
  return harness::SourceModel::from_named(load_checkpoint(path));
}

void write_text(const fs::path& p, const std::string& text) {
  if (p.has_parent_path()) fs::create_directories(p.parent_path());
  const fs::path tmp = p.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) fail(Errc::IoError, "cannot write " + p.string());
    out << text;
    if (!out.flush()) fail(Errc::IoError, "short write to " + p.string());
  }
  fs::rename(tmp, p);
}

std::string eval_table(const harness::EvalResult& r) {
  std::ostringstream o;
  char line[128];
  o << "domain      acc     auc\n";
  for (const auto& d : r.domains) {
    std::snprintf(line, sizeof line, "%-10s %6.2f  %6.2f\n", d.domain.c_str(), d.acc, d.auc);
    o << line;
  }
  std::snprintf(line, sizeof line, "%-10s %6.2f  %6.2f\n", "avg", r.avg_acc, r.avg_auc);
  o << line;
  return o.str();
}

// --- subcommands ---------------------------------------------------------------

void cmd_gen_data(const Options& o) {
  if (o.out.empty()) fail(Errc::UsageError, "--out is required");
  const fs::path dir = o.out;
  fs::create_directories(dir);
  nlohmann::json index{{"seed", o.seed}, {"targets", nlohmann::json::array()}};
  const auto specs = benchmark_specs(o.seed);
  for (std::size_t i = 0; i < specs.size(); ++i) {
    const data::Dataset ds = data::generate_domain(specs[i]);
    const std::string file = specs[i].name + kDomainExt;
    data::save_domain(ds, dir / file);
    spdlog::info("wrote {} ({} samples, digest {:016x})", (dir / file).string(), ds.size(), data::dataset_digest(ds));
    if (i == 0) {
      index["source"] = file;
    } else {
      index["targets"].push_back(file);
    }
  }
  write_text(dir / kIndexFile, index.dump(2) + "\n");
}

void cmd_train(const Options& o, const CLI::App& cmd) {
  if (o.out.empty()) fail(Errc::UsageError, "--out is required");
  const config::RunConfig rc = resolve(o, cmd);
  const data::Benchmark b = load_benchmark(rc.data_dir);
  const harness::SourceModel m = harness::train_source(rc.experiment.train, b.source);
  save_checkpoint(o.out, m.named());
  std::ostringstream trace;
  for (std::size_t e = 0; e < m.loss_trace.size(); ++e) trace << (e ? " " : "") << m.loss_trace[e];
  spdlog::info("loss per epoch: {}", trace.str());
  std::cout << "checkpoint " << o.out << " digest " << std::hex << checkpoint_digest(m.named()) << std::dec << "\n";
}

void cmd_adapt(const Options& o, const CLI::App& cmd) {
  if (o.out.empty()) fail(Errc::UsageError, "--out is required");
  const config::RunConfig rc = resolve(o, cmd);
  const harness::Method method = harness::parse_method(o.method);
  const harness::SourceModel m = load_model(o.model);
  const data::Benchmark b = load_benchmark(rc.data_dir);
  const fs::path dir = o.out;
  for (const data::Dataset& t : b.targets) {
    const Tensor f = harness::extract_features(m.backbone, t);
    const std::vector<double> s = harness::adapt_scores(m, f, method, rc.experiment.adapt, rc.experiment.train.seed);
    std::ostringstream csv;
    csv << "index,label,score\n";
    char cell[64];
    for (std::size_t i = 0; i < s.size(); ++i) {
      std::snprintf(cell, sizeof cell, "%.17g", s[i]);
      csv << i << ',' << t.samples[i].label << ',' << cell << '\n';
    }
    write_text(dir / (t.name + ".scores.csv"), csv.str());
  }
  spdlog::info("wrote class-1 scores for {} domains to {}", b.targets.size(), dir.string());
}

void cmd_eval(const Options& o, const CLI::App& cmd) {
  const config::RunConfig rc = resolve(o, cmd);
  const harness::Method method = harness::parse_method(o.method);
  const harness::SourceModel m = load_model(o.model);
  const data::Benchmark b = load_benchmark(rc.data_dir);
  const harness::EvalResult r = harness::evaluate(m, b.targets, method, rc.experiment.adapt,
                                                  rc.experiment.train.seed, rc.experiment.jobs);
  std::cout << "method " << o.method << "\n" << eval_table(r);
  if (!o.out.empty()) {
    nlohmann::json j{{"method", o.method}, {"avg_acc", r.avg_acc}, {"avg_auc", r.avg_auc}};
    for (const auto& d : r.domains) j["domains"].push_back({{"domain", d.domain}, {"acc", d.acc}, {"auc", d.auc}});
    write_text(o.out, j.dump(2) + "\n");
  }
}

void cmd_ablate(const Options& o, const CLI::App& cmd, bool ablation) {
  const config::RunConfig rc = resolve(o, cmd);
  const data::Benchmark b = load_benchmark(rc.data_dir);
  const harness::Report r = ablation ? harness::run_ablation(rc.experiment, b.source, b.targets)
                                     : harness::run_comparison(rc.experiment, b.source, b.targets);
  const fs::path dir = o.out.empty() ? fs::path("results") : fs::path(o.out);
  harness::write_report(r, dir);
  std::cout << harness::report_markdown(r);
  spdlog::info("wrote {}/{}.md, {}.csv and runs/{}.json", dir.string(), r.kind, r.kind, r.kind);
}

void cmd_attribute(const Options& o, const CLI::App& cmd) {
  const config::RunConfig rc = resolve(o, cmd);
  const harness::SourceModel m = load_model(o.model);
  const data::Benchmark b = load_benchmark(rc.data_dir);
  const double mass = harness::disc_attribution_mass(m.backbone, b.targets, o.count);
  std::printf("disc attribution mass over %zu target images: %.4f\n", o.count, mass);
  if (o.out.empty()) return;
  const data::Dataset* ds = &b.targets.front();
  if (!o.domain.empty()) {
    ds = nullptr;
    for (const auto& t : b.targets)
      if (t.name == o.domain) ds = &t;
    if (!ds) fail(Errc::UsageError, "no target domain named '" + o.domain + "'");
  }
  if (o.index >= ds->size()) fail(Errc::UsageError, "--index past the end of " + ds->name);
  const data::Sample& s = ds->samples[o.index];
  const std::vector<double> map = model::region_attribution(m.backbone, s.image, s.label);
  const fs::path dir = o.out;
  const std::string stem = ds->name + "_" + std::to_string(o.index);
  write_text(dir / (stem + ".csv"), model::attribution_csv(map));
  write_text(dir / (stem + ".pgm"), model::attribution_pgm(map));
  spdlog::info("wrote {} heatmap for label {} to {}", stem, s.label, dir.string());
}

void cmd_report(const Options& o) {
  if (o.input.empty()) fail(Errc::UsageError, "--in is required");
  std::ifstream in(o.input);
  if (!in) fail(Errc::IoError, "cannot read " + o.input);
  nlohmann::json runs;
  try {
    runs = nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    fail(Errc::ConfigParseError, o.input + ": " + e.what());
  }
  const harness::Report r = harness::report_from_runs(runs);
  harness::write_report(r, o.out.empty() ? fs::path("results") : fs::path(o.out));
  std::cout << harness::report_markdown(r);
}

int run(int argc, char** argv) {
  CLI::App app{"Graph-guided test-time adaptation on a synthetic fundus benchmark"};
  app.require_subcommand(1);
  app.set_help_all_flag("--help-all", "Print help for every subcommand");
  Options o;

  auto common = [&](CLI::App* c) {
    c->add_option("--config", o.config, "TOML config file")->check(CLI::ExistingFile);
    c->add_option("--seed", o.seed, "Seed for every random draw");
    c->add_option("--jobs", o.jobs, "Parallel runs")->check(CLI::PositiveNumber);
    c->add_option("--data", o.data, "Directory written by gen-data (default: generate the built-in benchmark)");
  };
  auto tpd_flags = [&](CLI::App* c) {
    c->add_option("--steps-per-batch", o.steps_per_batch, "Adaptation steps per test batch");
    c->add_option("--capacity", o.capacity, "Memory bank entries per class")->check(CLI::PositiveNumber);
    c->add_option("--tau-proto", o.tau_proto, "Prototype temperature")->check(CLI::PositiveNumber);
    c->add_option("--tau-epd", o.tau_epd, "Entropy-weight temperature")->check(CLI::PositiveNumber);
  };
  auto method_flag = [&](CLI::App* c) {
    c->add_option("--method", o.method, "none, tent, plclf, t3a or tpd")
        ->check(CLI::IsMember({"none", "tent", "plclf", "t3a", "tpd"}));
  };

  CLI::App* gen = app.add_subcommand("gen-data", "Write the source and target domains to disk");
  gen->add_option("--seed", o.seed, "Shifts every domain's generator seed");
  gen->add_option("--out", o.out, "Output directory")->required();

  CLI::App* train = app.add_subcommand("train", "Train a source model");
  common(train);
  train->add_option("--epochs", o.epochs, "Training epochs");
  train->add_flag("--no-grt", o.no_grt, "Plain cross-entropy, no relation head");
  train->add_option("--out", o.out, "Checkpoint path")->required();

  CLI::App* adapt = app.add_subcommand("adapt", "Adapt on each target stream and write per-sample scores");
  common(adapt);
  method_flag(adapt);
  tpd_flags(adapt);
  adapt->add_option("--model", o.model, "Source checkpoint")->required();
  adapt->add_option("--out", o.out, "Output directory")->required();

  CLI::App* eval = app.add_subcommand("eval", "Target-domain ACC/AUC of one method");
  common(eval);
  method_flag(eval);
  tpd_flags(eval);
  eval->add_option("--model", o.model, "Source checkpoint")->required();
  eval->add_option("--out", o.out, "Optional JSON result file");

  CLI::App* ablate = app.add_subcommand("ablate", "GRT x TPD ablation over seeds");
  common(ablate);
  tpd_flags(ablate);
  ablate->add_option("--epochs", o.epochs, "Training epochs");
  ablate->add_option("--seeds", o.seeds, "Number of seeds, counting up from --seed");
  ablate->add_option("--out", o.out, "Report directory (default results)");

  CLI::App* compare = app.add_subcommand("compare", "Every adaptation method from the same GRT checkpoints");
  common(compare);
  tpd_flags(compare);
  compare->add_option("--epochs", o.epochs, "Training epochs");
  compare->add_option("--seeds", o.seeds, "Number of seeds, counting up from --seed");
  compare->add_option("--out", o.out, "Report directory (default results)");

  CLI::App* attribute = app.add_subcommand("attribute", "Region attribution of the backbone classifier");
  common(attribute);
  attribute->add_option("--model", o.model, "Source checkpoint")->required();
  attribute->add_option("--count", o.count, "Target images in the disc-mass average")->check(CLI::PositiveNumber);
  attribute->add_option("--domain", o.domain, "Target domain of the heatmap sample");
  attribute->add_option("--index", o.index, "Sample index within the domain");
  attribute->add_option("--out", o.out, "Directory for the heatmap CSV and PGM");

  CLI::App* report = app.add_subcommand("report", "Rebuild Markdown and CSV tables from a run log");
  report->add_option("--in", o.input, "runs/<kind>.json")->required();
  report->add_option("--out", o.out, "Report directory (default results)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kExitUsage;
  }

  try {
    setup_logging();
    harness::tune_allocator();
    if (*gen) cmd_gen_data(o);
    if (*train) cmd_train(o, *train);
    if (*adapt) cmd_adapt(o, *adapt);
    if (*eval) cmd_eval(o, *eval);
    if (*ablate) cmd_ablate(o, *ablate, true);
    if (*compare) cmd_ablate(o, *compare, false);
    if (*attribute) cmd_attribute(o, *attribute);
    if (*report) cmd_report(o);
  } catch (const Error& e) {
    std::cerr << "gtta: " << e.what() << "\n";
    const bool usage = e.code() == Errc::UsageError || e.code() == Errc::ConfigParseError;
    return usage ? kExitUsage : kExitRuntime;
  } catch (const std::exception& e) {
    std::cerr << "gtta: " << e.what() << "\n";
    return kExitRuntime;
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) { return run(argc, argv); }
