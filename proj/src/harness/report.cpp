#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>
#include <system_error>

#include "gtta/error.hpp"
#include "gtta/harness.hpp"

namespace gtta::harness {

namespace {

std::string fixed2(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.2f", v);
  // "-0.00" and "0.00" must not depend on the sign of a rounding residue
  if (std::string(buf) == "-0.00") return "0.00";
  return buf;
}

double mean_of(const std::vector<double>& v) {
  long double s = 0.0L;
  for (double x : v) s += x;
  return v.empty() ? 0.0 : static_cast<double>(s / static_cast<long double>(v.size()));
}

// Sample standard deviation; 0 for fewer than two values.
double std_of(const std::vector<double>& v) {
  if (v.size() < 2) return 0.0;
  const double m = mean_of(v);
  long double s = 0.0L;
  for (double x : v) s += (x - m) * (x - m);
  return std::sqrt(static_cast<double>(s / static_cast<long double>(v.size() - 1)));
}

struct Summary {
  std::vector<double> domain_mean;
  double avg = 0.0, avg_std = 0.0;
};

Summary summarize_row(const ReportRow& row, std::size_t domains, bool auc) {
  if (row.per_seed.empty()) fail(Errc::IoError, "report row '" + row.label + "' has no runs");
  Summary s;
  for (std::size_t d = 0; d < domains; ++d) {
    std::vector<double> v;
    for (const EvalResult& e : row.per_seed) {
      if (e.domains.size() != domains) fail(Errc::IoError, "report row '" + row.label + "' has a ragged domain list");
      v.push_back(auc ? e.domains[d].auc : e.domains[d].acc);
    }
    s.domain_mean.push_back(mean_of(v));
  }
  std::vector<double> avgs;
  for (const EvalResult& e : row.per_seed) avgs.push_back(auc ? e.avg_auc : e.avg_acc);
  s.avg = mean_of(avgs);
  s.avg_std = std_of(avgs);
  return s;
}

void require_nonempty(const Report& r) {
  if (r.rows.empty() || r.domains.empty()) fail(Errc::IoError, "refusing to write an empty " + r.kind + " report");
}

std::vector<std::string> split(const std::string& line, char sep) {
  std::vector<std::string> out;
  std::string cur;
  std::istringstream in(line);
  while (std::getline(in, cur, sep)) out.push_back(cur);
  if (!line.empty() && line.back() == sep) out.emplace_back();
  return out;
}

void write_file(const std::filesystem::path& p, const std::string& text) {
  std::ofstream out(p, std::ios::binary | std::ios::trunc);
  if (!out) fail(Errc::IoError, "cannot open " + p.string());
  out << text;
  out.flush();
  if (!out) fail(Errc::IoError, "short write to " + p.string());
}

}  // namespace

std::string report_csv(const Report& r) {
  require_nonempty(r);
  std::ostringstream out;
  out << "label,metric";
  for (const std::string& d : r.domains) out << ',' << d;
  out << ",avg,avg_std\n";
  for (const ReportRow& row : r.rows) {
    for (bool auc : {false, true}) {
      const Summary s = summarize_row(row, r.domains.size(), auc);
      out << row.label << ',' << (auc ? "auc" : "acc");
      for (double v : s.domain_mean) out << ',' << fixed2(v);
      out << ',' << fixed2(s.avg) << ',' << fixed2(s.avg_std) << '\n';
    }
  }
  return out.str();
}

std::string report_markdown(const Report& r) {
  require_nonempty(r);
  std::ostringstream out;
  const std::size_t seeds = r.rows.front().per_seed.size();
  out << "# " << r.kind << "\n\n";
  out << "Target-domain ACC / AUC (%), mean over " << seeds << (seeds == 1 ? " seed" : " seeds")
      << "; Avg is the unweighted mean over domains, +- its standard deviation across seeds.\n\n";
  out << "| " << (r.kind == "ablation" ? "cell" : "method");
  for (const std::string& d : r.domains) out << " | " << d;
  out << " | Avg |\n|---";
  for (std::size_t i = 0; i <= r.domains.size(); ++i) out << "|---";
  out << "|\n";
  for (const ReportRow& row : r.rows) {
    const Summary acc = summarize_row(row, r.domains.size(), false);
    const Summary auc = summarize_row(row, r.domains.size(), true);
    out << "| " << row.label;
    for (std::size_t d = 0; d < r.domains.size(); ++d)
      out << " | " << fixed2(acc.domain_mean[d]) << " / " << fixed2(auc.domain_mean[d]);
    out << " | " << fixed2(acc.avg) << " +- " << fixed2(acc.avg_std) << " / " << fixed2(auc.avg) << " +- "
        << fixed2(auc.avg_std) << " |\n";
  }
  return out.str();
}

std::vector<CsvRow> parse_report_csv(const std::string& text) {
  std::istringstream in(text);
  std::string line;
  if (!std::getline(in, line)) fail(Errc::ConfigParseError, "report CSV is empty");
  const std::vector<std::string> header = split(line, ',');
  if (header.size() < 5 || header[0] != "label" || header[1] != "metric" || header[header.size() - 2] != "avg" ||
      header.back() != "avg_std") {
    fail(Errc::ConfigParseError, "report CSV header is malformed");
  }
  std::vector<CsvRow> rows;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    const std::vector<std::string> cells = split(line, ',');
    if (cells.size() != header.size()) fail(Errc::ConfigParseError, "report CSV row has " + std::to_string(cells.size()) + " cells");
    CsvRow row{cells[0], cells[1], {}};
    for (std::size_t i = 2; i < cells.size(); ++i) {
      try {
        std::size_t used = 0;
        row.values.push_back(std::stod(cells[i], &used));
        if (used != cells[i].size()) throw std::invalid_argument(cells[i]);
      } catch (const std::exception&) {
        fail(Errc::ConfigParseError, "report CSV cell '" + cells[i] + "' is not a number");
      }
    }
    rows.push_back(std::move(row));
  }
  return rows;
}

Report report_from_runs(const nlohmann::json& runs) {
  if (!runs.is_array() || runs.empty()) fail(Errc::ConfigParseError, "run log must be a non-empty array");
  Report r;
  r.runs = runs;
  const bool ablation = runs.front().contains("cell");
  r.kind = ablation ? "ablation" : "comparison";
  const char* key = ablation ? "cell" : "method";
  std::vector<std::uint64_t> seeds;
  try {
    for (const auto& run : runs) {
      const std::string label = run.at(key).get<std::string>();
      const auto seed = run.at("seed").get<std::uint64_t>();
      std::vector<DomainResult> domains;
      for (const auto& d : run.at("domains"))
        domains.push_back({d.at("domain").get<std::string>(), d.at("acc").get<double>(), d.at("auc").get<double>()});
      std::vector<std::string> names;
      for (const auto& d : domains) names.push_back(d.domain);
      if (r.domains.empty()) r.domains = names;
      if (names != r.domains) fail(Errc::ConfigParseError, "runs disagree on the domain list");

      auto s_at = std::find(seeds.begin(), seeds.end(), seed);
      if (s_at == seeds.end()) {
        seeds.push_back(seed);
        for (ReportRow& row : r.rows) row.per_seed.emplace_back();
        s_at = seeds.end() - 1;
      }
      auto row = std::find_if(r.rows.begin(), r.rows.end(), [&](const ReportRow& x) { return x.label == label; });
      if (row == r.rows.end()) {
        r.rows.push_back({label, std::vector<EvalResult>(seeds.size())});
        row = r.rows.end() - 1;
      }
      row->per_seed[static_cast<std::size_t>(s_at - seeds.begin())] = summarize(std::move(domains));
    }
  } catch (const nlohmann::json::exception& e) {
    fail(Errc::ConfigParseError, std::string("run log: ") + e.what());
  }
  for (const ReportRow& row : r.rows)
    for (const EvalResult& e : row.per_seed)
      if (e.domains.empty()) fail(Errc::ConfigParseError, "run log lacks a run for row '" + row.label + "'");
  return r;
}

void write_report(const Report& r, const std::filesystem::path& dir) {
  require_nonempty(r);
  // Render everything before touching the disk so a bad report leaves no files.
  const std::vector<std::pair<std::filesystem::path, std::string>> files{
      {dir / (r.kind + ".md"), report_markdown(r)},
      {dir / (r.kind + ".csv"), report_csv(r)},
      {dir / "runs" / (r.kind + ".json"), r.runs.dump(2) + "\n"},
  };
  std::error_code ec;
  std::filesystem::create_directories(dir / "runs", ec);
  if (ec) fail(Errc::IoError, "cannot create " + (dir / "runs").string() + ": " + ec.message());

  std::vector<std::filesystem::path> temps;
  auto cleanup = [&] {
    for (const auto& t : temps) std::filesystem::remove(t, ec);
  };
  try {
    for (const auto& [path, text] : files) {
      temps.push_back(path.string() + ".tmp");
      write_file(temps.back(), text);
    }
    for (std::size_t i = 0; i < files.size(); ++i) {
      std::filesystem::rename(temps[i], files[i].first, ec);
      if (ec) fail(Errc::IoError, "cannot move " + temps[i].string() + " into place: " + ec.message());
    }
  } catch (...) {
    cleanup();
    throw;
  }
}

}  // namespace gtta::harness
