#pragma once

#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <tuple>
#include <vector>

#include "../core.hpp"
#include "sweep.hpp"

namespace xsub::harness {

struct CsvRow {
  std::uint64_t seed = 0;
  double alpha = 0.0, beta = 0.0;
  std::size_t k = 0;
  std::string mode, scenario;
  double accuracy = 0.0, attack_sr = 0.0;
  std::optional<double> detection_rate;
};

/// Parses a results CSV written by append_csv. The header must match exactly.
inline std::vector<CsvRow> read_results_csv(std::istream& in, const std::string& origin = "results") {
  std::string line;
  if (!std::getline(in, line) || line.empty()) fail(ErrorKind::format, origin + ": empty CSV");
  if (line != kCsvHeader) fail(ErrorKind::format, origin + ": unexpected header");
  std::vector<CsvRow> rows;
  std::size_t lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    std::vector<std::string> f;
    std::stringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, ','))
      f.push_back(cell);
    if (!line.empty() && line.back() == ',') f.emplace_back();
    if (f.size() != 12) fail(ErrorKind::format, origin + ":" + std::to_string(lineno) + ": expected 12 fields");
    try {
      CsvRow r;
      std::size_t used = 0;
      auto num = [&](const std::string& s) {
        const double v = std::stod(s, &used);
        if (used != s.size()) throw std::invalid_argument(s);
        return v;
      };
      r.seed = std::stoull(f[0]);
      r.alpha = num(f[1]);
      r.beta = num(f[2]);
      r.k = std::stoull(f[3]);
      r.mode = f[4];
      r.scenario = f[5];
      r.accuracy = num(f[6]);
      r.attack_sr = num(f[7]);
      if (!f[8].empty()) r.detection_rate = num(f[8]);
      rows.push_back(std::move(r));
    } catch (const std::logic_error&) {
      fail(ErrorKind::format, origin + ":" + std::to_string(lineno) + ": malformed field");
    }
  }
  if (rows.empty()) fail(ErrorKind::format, origin + ": CSV has no data rows");
  return rows;
}

struct SeriesPoint {
  double alpha = 0.0, beta = 0.0;
  std::size_t n = 0;
  double mean_sr = 0.0, std_sr = 0.0;
  std::optional<double> mean_detection, std_detection;
};

struct Series {
  std::string scenario, mode;
  std::size_t k = 0;
  std::vector<SeriesPoint> points;
};

namespace detail {

/// Population mean and standard deviation.
inline std::pair<double, double> mean_std(const std::vector<double>& v) {
  double m = 0.0;
  for (double x : v)
    m += x;
  m /= static_cast<double>(v.size());
  double s = 0.0;
  for (double x : v)
    s += (x - m) * (x - m);
  return {m, std::sqrt(s / static_cast<double>(v.size()))};
}

}  // namespace detail

/// Groups rows by (scenario, k, mode) and summarizes attack SR over seeds
/// for every (alpha, beta).
inline std::vector<Series> summarize(const std::vector<CsvRow>& rows) {
  using GroupKey = std::tuple<std::string, std::size_t, std::string>;
  std::map<GroupKey, std::map<std::pair<double, double>, std::vector<const CsvRow*>>> groups;
  for (const auto& r : rows)
    groups[{r.scenario, r.k, r.mode}][{r.alpha, r.beta}].push_back(&r);

  std::vector<Series> out;
  for (const auto& [key, cells] : groups) {
    Series s{std::get<0>(key), std::get<2>(key), std::get<1>(key), {}};
    for (const auto& [ab, members] : cells) {
      std::vector<double> sr, det;
      for (const auto* r : members) {
        sr.push_back(r->attack_sr);
        if (r->detection_rate) det.push_back(*r->detection_rate);
      }
      SeriesPoint p{ab.first, ab.second, members.size(), 0.0, 0.0, std::nullopt, std::nullopt};
      std::tie(p.mean_sr, p.std_sr) = detail::mean_std(sr);
      if (det.size() == members.size()) {
        auto [m, sd] = detail::mean_std(det);
        p.mean_detection = m;
        p.std_detection = sd;
      }
      s.points.push_back(p);
    }
    out.push_back(std::move(s));
  }
  return out;
}

inline std::string series_filename(const Series& s) {
  return "plot_" + s.scenario + "_k" + std::to_string(s.k) + "_" + s.mode + ".csv";
}

/// Writes one file per (scenario, K, mode) group into `out_dir` and returns
/// their paths.
inline std::vector<std::filesystem::path> emit_plot_data(const std::filesystem::path& csv,
                                                         const std::filesystem::path& out_dir) {
  std::ifstream in(csv);
  if (!in) fail(ErrorKind::file, "cannot open " + csv.string());
  const auto series = summarize(read_results_csv(in, csv.string()));
  std::filesystem::create_directories(out_dir);
  std::vector<std::filesystem::path> written;
  for (const auto& s : series) {
    const auto path = out_dir / series_filename(s);
    std::ofstream out(path);
    if (!out) fail(ErrorKind::file, "cannot write " + path.string());
    out << "alpha,beta,n,mean_attack_sr,std_attack_sr,mean_detection_rate,std_detection_rate\n";
    for (const auto& p : s.points) {
      out << format_number(p.alpha) << "," << format_number(p.beta) << "," << p.n << "," << format_rate(p.mean_sr)
          << "," << format_rate(p.std_sr) << "," << (p.mean_detection ? format_rate(*p.mean_detection) : "") << ","
          << (p.std_detection ? format_rate(*p.std_detection) : "") << "\n";
    }
    written.push_back(path);
  }
  return written;
}

}  // namespace xsub::harness
