#pragma once

// Timing of windowed versus global score computation across token counts.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <istream>
#include <numeric>
#include <ostream>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "lpat/error.hpp"
#include "lpat/local_attention.hpp"

namespace lpat {

struct BenchConfig {
  std::vector<std::size_t> sizes{256, 1024, 4096};
  std::size_t k = 3;
  std::size_t reps = 5;
  std::size_t head_dim = 8;
  double min_rep_seconds = 0.02;  ///< inner iterations are added until one rep takes this long
  std::uint64_t seed = 1;
};

struct BenchRow {
  std::size_t n = 0, k = 0;
  double lra_ns = 0, global_ns = 0;  ///< median over reps, per call
  std::uint64_t lra_scores_counted = 0;
  std::uint64_t lra_scores_expected = 0;  ///< Σ|scope(i)|
  double lra_cv = 0, global_cv = 0;       ///< stddev / mean over reps
};

struct BenchResult {
  std::vector<BenchRow> rows;
  double lra_slope = 0, global_slope = 0;
  double max_cv = 0;
};

/// Least-squares slope of log(y) against log(x).
inline double loglog_slope(const std::vector<double>& x, const std::vector<double>& y) {
  if (x.size() != y.size() || x.size() < 2) throw ContractError("loglog_slope needs at least two points");
  double mx = 0, my = 0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    if (!(x[i] > 0) || !(y[i] > 0)) throw ContractError("loglog_slope: values must be positive");
    mx += std::log(x[i]);
    my += std::log(y[i]);
  }
  mx /= static_cast<double>(x.size());
  my /= static_cast<double>(x.size());
  double sxy = 0, sxx = 0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double dx = std::log(x[i]) - mx;
    sxy += dx * (std::log(y[i]) - my);
    sxx += dx * dx;
  }
  if (sxx == 0) throw ContractError("loglog_slope: all x values are equal");
  return sxy / sxx;
}

namespace detail {

struct RepStats {
  double median_ns = 0, cv = 0;
};

template <typename Fn>
RepStats time_reps(Fn&& fn, std::size_t reps, double min_rep_seconds) {
  using clock = std::chrono::steady_clock;
  std::size_t inner = 1;
  for (;;) {
    const auto t0 = clock::now();
    for (std::size_t i = 0; i < inner; ++i) fn();
    const double s = std::chrono::duration<double>(clock::now() - t0).count();
    if (s >= min_rep_seconds || inner >= (std::size_t{1} << 24)) break;
    inner *= 2;
  }
  std::vector<double> per_call;
  for (std::size_t r = 0; r < reps; ++r) {
    const auto t0 = clock::now();
    for (std::size_t i = 0; i < inner; ++i) fn();
    per_call.push_back(std::chrono::duration<double, std::nano>(clock::now() - t0).count() / static_cast<double>(inner));
  }
  RepStats st;
  const double mean = std::accumulate(per_call.begin(), per_call.end(), 0.0) / static_cast<double>(reps);
  double var = 0;
  for (double v : per_call) var += (v - mean) * (v - mean);
  st.cv = reps > 1 ? std::sqrt(var / static_cast<double>(reps - 1)) / mean : 0.0;
  std::sort(per_call.begin(), per_call.end());
  st.median_ns = per_call[reps / 2];
  return st;
}

inline std::size_t grid_side(std::size_t n) {
  const auto side = static_cast<std::size_t>(std::llround(std::sqrt(static_cast<double>(n))));
  if (n == 0 || side * side != n) throw ConfigError("bench size " + std::to_string(n) + " is not a square token count");
  return side;
}

}  // namespace detail

/// Times local_scores against dense_scores on random single-precision
/// embeddings of width head_dim.
inline BenchResult run_bench(const BenchConfig& cfg) {
  if (cfg.sizes.size() < 2) throw ConfigError("bench needs at least two sizes");
  if (cfg.reps == 0) throw ConfigError("bench --reps must be >= 1");
  BenchResult result;
  std::mt19937_64 rng(cfg.seed);
  std::normal_distribution<float> dist(0.0f, 1.0f);
  for (std::size_t n : cfg.sizes) {
    const std::size_t side = detail::grid_side(n);
    const auto scope = ScopeMask::build(side, side, cfg.k);
    std::vector<float> q(n * cfg.head_dim), k(n * cfg.head_dim);
    for (auto& v : q) v = dist(rng);
    for (auto& v : k) v = dist(rng);
    std::vector<float> local(scope.total()), dense(n * n);

    BenchRow row;
    row.n = n;
    row.k = cfg.k;
    row.lra_scores_expected = scope.total();
    instrument::reset_local_scores();
    local_scores<float>(q, k, cfg.head_dim, scope, local);
    row.lra_scores_counted = instrument::local_scores();

    const auto lra = detail::time_reps([&] { local_scores<float>(q, k, cfg.head_dim, scope, local); }, cfg.reps,
                                       cfg.min_rep_seconds);
    const auto global = detail::time_reps([&] { dense_scores<float>(q, k, n, n, cfg.head_dim, dense); }, cfg.reps,
                                          cfg.min_rep_seconds);
    row.lra_ns = lra.median_ns;
    row.global_ns = global.median_ns;
    row.lra_cv = lra.cv;
    row.global_cv = global.cv;
    result.max_cv = std::max({result.max_cv, lra.cv, global.cv});
    result.rows.push_back(row);
  }
  std::vector<double> ns, lra_t, global_t;
  for (const auto& r : result.rows) {
    ns.push_back(static_cast<double>(r.n));
    lra_t.push_back(r.lra_ns);
    global_t.push_back(r.global_ns);
  }
  result.lra_slope = loglog_slope(ns, lra_t);
  result.global_slope = loglog_slope(ns, global_t);
  return result;
}

inline void write_bench_csv(std::ostream& os, const std::vector<BenchRow>& rows) {
  os << "n,k,lra_ns,global_ns,lra_scores_counted\n";
  os.precision(17);
  for (const auto& r : rows) os << r.n << ',' << r.k << ',' << r.lra_ns << ',' << r.global_ns << ',' << r.lra_scores_counted << '\n';
}

/// Parses the CSV written by write_bench_csv.
inline std::vector<BenchRow> read_bench_csv(std::istream& is) {
  std::string line;
  if (!std::getline(is, line) || line != "n,k,lra_ns,global_ns,lra_scores_counted") {
    throw FormatError("bench CSV: unexpected header");
  }
  std::vector<BenchRow> rows;
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    std::istringstream ls(line);
    std::string field;
    std::vector<std::string> f;
    while (std::getline(ls, field, ',')) f.push_back(field);
    if (f.size() != 5) throw FormatError("bench CSV: expected 5 fields in '" + line + "'");
    BenchRow r;
    try {
      r.n = std::stoull(f[0]);
      r.k = std::stoull(f[1]);
      r.lra_ns = std::stod(f[2]);
      r.global_ns = std::stod(f[3]);
      r.lra_scores_counted = std::stoull(f[4]);
    } catch (const std::exception&) {
      throw FormatError("bench CSV: malformed row '" + line + "'");
    }
    rows.push_back(r);
  }
  return rows;
}

}  // namespace lpat
