#pragma once

// Metrics CSV (one row per estimated index plus a `mean` row per run) and the
// per-cell aggregate over seeds.

#include <cmath>
#include <cstdio>
#include <limits>
#include <map>
#include <ostream>
#include <sstream>
#include <string>
#include <tuple>
#include <vector>

#include "spex/eval.hpp"

namespace spex {

inline constexpr const char* kMetricsHeader =
    "run_id,seed,kernel,p,r,d,objective,nesting,extractor,index,ef_mse,ev_rae,lambda_hat,lambda_true,steps,wall_ms";

inline constexpr const char* kTable1Header =
    "kernel,p,r,d,objective,nesting,extractor,runs,ef_mse_mean,ef_mse_stderr,ev_rae_mean,ev_rae_stderr";

struct RunInfo {
  std::string run_id;
  std::uint64_t seed = 0;
  std::string kernel;
  int p = 1, r = 1, d = 1;
  std::string objective, nesting, extractor;
  std::uint64_t steps = 0;
  double wall_ms = 0.0;
};

inline std::string format_double(double v) {
  if (std::isnan(v)) return "";
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

inline void write_metrics_rows(std::ostream& out, const RunInfo& info, const MetricsRecord& m) {
  const auto prefix = [&] {
    std::ostringstream s;
    s << info.run_id << ',' << info.seed << ',' << info.kernel << ',' << info.p << ',' << info.r << ',' << info.d << ','
      << info.objective << ',' << info.nesting << ',' << info.extractor << ',';
    return s.str();
  }();
  const std::string tail = "," + std::to_string(info.steps) + "," + format_double(info.wall_ms) + "\n";
  for (Eigen::Index i = 0; i < m.ef_mse.size(); ++i)
    out << prefix << (i + 1) << ',' << format_double(m.ef_mse[i]) << ',' << format_double(m.ev_errors[i]) << ','
        << format_double(m.lambda_hat[i]) << ',' << format_double(m.lambda_true[i]) << tail;
  out << prefix << "mean," << format_double(m.mean_ef_mse) << ',' << format_double(m.mean_ev_rae) << ",," << tail;
}

struct MetricsRow {
  RunInfo info;
  std::string index;
  double ef_mse = 0.0, ev_rae = 0.0;
  double lambda_hat = std::numeric_limits<double>::quiet_NaN();
  double lambda_true = std::numeric_limits<double>::quiet_NaN();
};

namespace detail {

inline std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> out;
  std::string cell;
  std::istringstream ss(line);
  while (std::getline(ss, cell, ',')) out.push_back(cell);
  if (!line.empty() && line.back() == ',') out.emplace_back();
  return out;
}

inline double csv_double(const std::string& s) {
  if (s.empty()) return std::numeric_limits<double>::quiet_NaN();
  std::size_t used = 0;
  const double v = std::stod(s, &used);
  if (used != s.size()) throw FormatError("metrics csv: bad number '" + s + "'");
  return v;
}

}  // namespace detail

inline std::vector<MetricsRow> parse_metrics_csv(const std::string& text) {
  std::istringstream in(text);
  std::string line;
  if (!std::getline(in, line) || line != kMetricsHeader) throw FormatError("metrics csv: unexpected header");
  std::vector<MetricsRow> rows;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    const auto c = detail::split_csv_line(line);
    if (c.size() != 16) throw FormatError("metrics csv: expected 16 columns, got " + std::to_string(c.size()));
    try {
      MetricsRow r;
      r.info = {c[0], std::stoull(c[1]), c[2], std::stoi(c[3]), std::stoi(c[4]), std::stoi(c[5]), c[6], c[7], c[8],
                std::stoull(c[14]), detail::csv_double(c[15])};
      r.index = c[9];
      r.ef_mse = detail::csv_double(c[10]);
      r.ev_rae = detail::csv_double(c[11]);
      r.lambda_hat = detail::csv_double(c[12]);
      r.lambda_true = detail::csv_double(c[13]);
      rows.push_back(std::move(r));
    } catch (const std::logic_error&) {
      throw FormatError("metrics csv: malformed row '" + line + "'");
    }
  }
  return rows;
}

struct Table1Cell {
  std::string kernel;
  int p = 1, r = 1, d = 1;
  std::string objective, nesting, extractor;
  std::size_t runs = 0;
  MeanStderr ef_mse, ev_rae;
};

/// Mean and standard error over runs of each cell's per-run `mean` rows.
inline std::vector<Table1Cell> aggregate_table1(const std::vector<MetricsRow>& rows) {
  using Key = std::tuple<std::string, int, int, int, std::string, std::string, std::string>;
  std::map<Key, std::pair<std::vector<double>, std::vector<double>>> groups;
  for (const auto& row : rows) {
    if (row.index != "mean") continue;
    const auto& i = row.info;
    auto& g = groups[{i.kernel, i.p, i.r, i.d, i.objective, i.nesting, i.extractor}];
    g.first.push_back(row.ef_mse);
    g.second.push_back(row.ev_rae);
  }
  std::vector<Table1Cell> out;
  for (const auto& [k, v] : groups) {
    Table1Cell c;
    std::tie(c.kernel, c.p, c.r, c.d, c.objective, c.nesting, c.extractor) = k;
    c.runs = v.first.size();
    c.ef_mse = mean_stderr(v.first);
    c.ev_rae = mean_stderr(v.second);
    out.push_back(std::move(c));
  }
  return out;
}

inline void write_table1(std::ostream& out, const std::vector<Table1Cell>& cells) {
  out << kTable1Header << '\n';
  for (const auto& c : cells)
    out << c.kernel << ',' << c.p << ',' << c.r << ',' << c.d << ',' << c.objective << ',' << c.nesting << ','
        << c.extractor << ',' << c.runs << ',' << format_double(c.ef_mse.mean) << ',' << format_double(c.ef_mse.stderr_)
        << ',' << format_double(c.ev_rae.mean) << ',' << format_double(c.ev_rae.stderr_) << '\n';
}

}  // namespace spex
