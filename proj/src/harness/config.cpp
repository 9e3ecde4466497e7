#include "gtta/config.hpp"

#include <fstream>
#include <functional>
#include <map>
#include <sstream>

#include <toml.hpp>

#include "gtta/error.hpp"

namespace gtta::config {

namespace {

using Setter = std::function<void(const toml::node&, RunConfig&)>;

[[noreturn]] void bad(const std::string& key, const std::string& why) {
  fail(Errc::ConfigParseError, "config key " + key + ": " + why);
}

double as_real(const toml::node& n, const std::string& key) {
  if (auto v = n.value_exact<double>()) return *v;
  if (auto v = n.value_exact<std::int64_t>()) return static_cast<double>(*v);
  bad(key, "expected a number");
}

std::size_t as_count(const toml::node& n, const std::string& key) {
  const auto v = n.value_exact<std::int64_t>();
  if (!v) bad(key, "expected an integer");
  if (*v < 0) bad(key, "must be non-negative");
  return static_cast<std::size_t>(*v);
}

bool as_bool(const toml::node& n, const std::string& key) {
  const auto v = n.value_exact<bool>();
  if (!v) bad(key, "expected true or false");
  return *v;
}

// section -> key -> setter
std::map<std::string, std::map<std::string, Setter>> schema() {
  auto train = [](RunConfig& c) -> harness::TrainConfig& { return c.experiment.train; };
  auto tpd = [](RunConfig& c) -> tpd::TpdConfig& { return c.experiment.adapt.tpd; };
  auto adapt = [](RunConfig& c) -> harness::AdaptConfig& { return c.experiment.adapt; };
  std::map<std::string, std::map<std::string, Setter>> s;
  const auto R = [](auto member) {
    return [member](const toml::node& n, RunConfig& c, const std::string& k) { member(c) = as_real(n, k); };
  };
  const auto N = [](auto member) {
    return [member](const toml::node& n, RunConfig& c, const std::string& k) { member(c) = as_count(n, k); };
  };
  const auto B = [](auto member) {
    return [member](const toml::node& n, RunConfig& c, const std::string& k) { member(c) = as_bool(n, k); };
  };
  auto add = [&s](const std::string& sec, const std::string& key, auto fn) {
    const std::string full = sec + "." + key;
    s[sec][key] = [fn, full](const toml::node& n, RunConfig& c) { fn(n, c, full); };
  };

  add("train", "epochs", N([=](RunConfig& c) -> auto& { return train(c).epochs; }));
  add("train", "batch", N([=](RunConfig& c) -> auto& { return train(c).batch; }));
  add("train", "lr", R([=](RunConfig& c) -> auto& { return train(c).lr; }));
  add("train", "decay_every", N([=](RunConfig& c) -> auto& { return train(c).decay_every; }));
  add("train", "decay", R([=](RunConfig& c) -> auto& { return train(c).decay; }));
  add("train", "lambda", R([=](RunConfig& c) -> auto& { return train(c).lambda; }));
  add("train", "grt", B([=](RunConfig& c) -> auto& { return train(c).grt; }));
  add("train", "k_keep", N([=](RunConfig& c) -> auto& { return train(c).k_keep; }));

  add("tpd", "n_neighbors", N([=](RunConfig& c) -> auto& { return tpd(c).n_neighbors; }));
  add("tpd", "tau_proto", R([=](RunConfig& c) -> auto& { return tpd(c).tau_proto; }));
  add("tpd", "tau_epd", R([=](RunConfig& c) -> auto& { return tpd(c).tau_epd; }));
  add("tpd", "lambda1", R([=](RunConfig& c) -> auto& { return tpd(c).lambda1; }));
  add("tpd", "lambda2", R([=](RunConfig& c) -> auto& { return tpd(c).lambda2; }));
  add("tpd", "plm_lr", R([=](RunConfig& c) -> auto& { return tpd(c).plm_lr; }));
  add("tpd", "clf_lr", R([=](RunConfig& c) -> auto& { return tpd(c).clf_lr; }));
  add("tpd", "steps_per_batch", N([=](RunConfig& c) -> auto& { return tpd(c).steps_per_batch; }));
  add("tpd", "batch", N([=](RunConfig& c) -> auto& { return tpd(c).batch; }));
  add("tpd", "label_smooth_eps", R([=](RunConfig& c) -> auto& { return tpd(c).label_smooth_eps; }));
  add("tpd", "capacity", N([=](RunConfig& c) -> auto& { return tpd(c).capacity; }));
  add("tpd", "n_modules", N([=](RunConfig& c) -> auto& { return tpd(c).n_modules; }));
  add("tpd", "predict_then_update", B([=](RunConfig& c) -> auto& { return tpd(c).predict_then_update; }));

  add("baselines", "lr", R([=](RunConfig& c) -> auto& { return adapt(c).baseline_lr; }));
  add("baselines", "plclf_threshold", R([=](RunConfig& c) -> auto& { return adapt(c).plclf_threshold; }));
  add("baselines", "t3a_filter", N([=](RunConfig& c) -> auto& { return adapt(c).t3a_filter; }));

  add("experiment", "jobs", N([](RunConfig& c) -> auto& { return c.experiment.jobs; }));
  add("experiment", "seeds", [](const toml::node& n, RunConfig& c, const std::string& k) {
    std::vector<std::uint64_t> seeds;
    if (const toml::array* a = n.as_array()) {
      for (const toml::node& e : *a) seeds.push_back(as_count(e, k));
    } else {
      // a bare integer means seeds 0..n-1
      const std::size_t count = as_count(n, k);
      for (std::size_t i = 0; i < count; ++i) seeds.push_back(i);
    }
    if (seeds.empty()) bad(k, "needs at least one seed");
    c.experiment.seeds = std::move(seeds);
  });
  add("data", "dir", [](const toml::node& n, RunConfig& c, const std::string& k) {
    const auto v = n.value_exact<std::string>();
    if (!v) bad(k, "expected a string");
    c.data_dir = *v;
  });
  return s;
}

void validate(const RunConfig& c) {
  try {
    c.experiment.train.validate();
    c.experiment.adapt.tpd.validate();
  } catch (const Error& e) {
    fail(Errc::ConfigParseError, std::string("config value out of range: ") + e.what());
  }
  if (c.experiment.train.epochs > 1000) fail(Errc::ConfigParseError, "train.epochs above 1000");
  if (c.experiment.adapt.t3a_filter == 0) fail(Errc::ConfigParseError, "baselines.t3a_filter must be positive");
  if (!(c.experiment.adapt.baseline_lr >= 0)) fail(Errc::ConfigParseError, "baselines.lr must be non-negative");
  if (!(c.experiment.adapt.plclf_threshold >= 0 && c.experiment.adapt.plclf_threshold <= 1))
    fail(Errc::ConfigParseError, "baselines.plclf_threshold outside [0, 1]");
}

}  // namespace

RunConfig parse_config(std::string_view toml_text) {
  toml::table root;
  try {
    root = toml::parse(toml_text);
  } catch (const toml::parse_error& e) {
    std::ostringstream msg;
    msg << e.description() << " at line " << e.source().begin.line;
    fail(Errc::ConfigParseError, msg.str());
  }
  const auto keys = schema();
  RunConfig c;
  for (const auto& [sec_name, sec_node] : root) {
    const std::string sec(sec_name.str());
    const auto known = keys.find(sec);
    if (known == keys.end()) fail(Errc::ConfigParseError, "unknown config section [" + sec + "]");
    const toml::table* tbl = sec_node.as_table();
    if (!tbl) fail(Errc::ConfigParseError, "[" + sec + "] must be a table");
    for (const auto& [key_name, node] : *tbl) {
      const std::string key(key_name.str());
      const auto setter = known->second.find(key);
      if (setter == known->second.end()) fail(Errc::ConfigParseError, "unknown config key " + sec + "." + key);
      setter->second(node, c);
    }
  }
  validate(c);
  return c;
}

RunConfig load_config(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail(Errc::IoError, "cannot read config " + path.string());
  std::ostringstream text;
  text << in.rdbuf();
  return parse_config(text.str());
}

std::string default_config_toml() {
  const RunConfig d;
  const auto& t = d.experiment.train;
  const auto& p = d.experiment.adapt.tpd;
  const auto& a = d.experiment.adapt;
  std::ostringstream o;
  o << "[train]\n"
    << "epochs = " << t.epochs << "\nbatch = " << t.batch << "\nlr = " << t.lr << "\ndecay_every = " << t.decay_every
    << "\ndecay = " << t.decay << "\nlambda = " << t.lambda << "\ngrt = " << (t.grt ? "true" : "false")
    << "\nk_keep = " << t.k_keep << "\n\n[tpd]\n"
    << "n_neighbors = " << p.n_neighbors << "\ntau_proto = " << p.tau_proto << "\ntau_epd = " << p.tau_epd
    << "\nlambda1 = " << p.lambda1 << "\nlambda2 = " << p.lambda2 << "\nplm_lr = " << p.plm_lr
    << "\nclf_lr = " << p.clf_lr << "\nsteps_per_batch = " << p.steps_per_batch << "\nbatch = " << p.batch
    << "\nlabel_smooth_eps = " << p.label_smooth_eps << "\ncapacity = " << p.capacity
    << "\nn_modules = " << p.n_modules << "\npredict_then_update = " << (p.predict_then_update ? "true" : "false")
    << "\n\n[baselines]\n"
    << "lr = " << a.baseline_lr << "\nplclf_threshold = " << a.plclf_threshold << "\nt3a_filter = " << a.t3a_filter
    << "\n\n[experiment]\nseeds = [";
  for (std::size_t i = 0; i < d.experiment.seeds.size(); ++i) o << (i ? ", " : "") << d.experiment.seeds[i];
  o << "]\njobs = " << d.experiment.jobs << "\n";
  return o.str();
}

}  // namespace gtta::config
