// lpat: command-line front end for the tracker kernels.
//
//   lpat gradcheck  [--seed N] [--eps E] [--tol T]
//   lpat oracle     [--trials N] [--max-grid G] [--seed N]
//   lpat bench      [--sizes a,b,c] [--k K] [--reps R] [--out FILE]
//   lpat train-toy  [--config FILE] [--steps N] --out DIR
//   lpat track      [--config FILE] --weights FILE [--seq-seed N] [--frames N] [--out FILE]
//   lpat export-seq [--config FILE] [--seq-seed N] [--frames N] --out DIR
//   lpat config     [--config FILE]
//
// Exit codes: 0 ok, 1 check failed, 2 runtime or configuration error.

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "lpat/archive.hpp"
#include "lpat/bench.hpp"
#include "lpat/checks.hpp"
#include "lpat/config.hpp"
#include "lpat/train.hpp"
#include "sequence_export.hpp"

namespace {

using namespace lpat;

constexpr int kOk = 0, kCheckFailed = 1, kError = 2;

RunConfig load(const std::string& path) {
  RunConfig cfg = path.empty() ? parse_config(nlohmann::json::object()) : load_config(path);
  runtime::set_threads(cfg.threads);
  return cfg;
}

std::string fmt(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.3e", v);
  return buf;
}

int cmd_gradcheck(std::uint64_t seed, double eps, double tol) {
  const auto results = run_gradient_suite(seed, eps);
  const GradCaseResult* worst = nullptr;
  for (const auto& r : results) {
    const auto& rep = r.report;
    std::printf("%-22s rel=%s  %s[%zu] ad=%.9e fd=%.9e (%zu entries)\n", r.name.c_str(), fmt(rep.max_rel_error).c_str(),
                rep.worst_name.c_str(), rep.worst_entry, rep.analytic, rep.numeric, rep.entries_checked);
    if (!worst || rep.max_rel_error > worst->report.max_rel_error) worst = &r;
  }
  const bool ok = worst->report.max_rel_error < tol;
  std::printf("worst: %s %s[%zu] rel=%s tol=%s -> %s\n", worst->name.c_str(), worst->report.worst_name.c_str(),
              worst->report.worst_entry, fmt(worst->report.max_rel_error).c_str(), fmt(tol).c_str(),
              ok ? "PASS" : "FAIL");
  return ok ? kOk : kCheckFailed;
}

int cmd_oracle(std::size_t trials, std::size_t max_grid, std::uint64_t seed) {
  const auto sweep = oracle_sweep(trials, max_grid, seed);
  bool ok = sweep.zeros_outside && sweep.max_row_error <= 1e-12;
  for (const auto& inst : sweep.instances) ok = ok && inst.max_diff < 1e-10;
  std::printf("trials=%zu max_diff=%s max_row_sum_error=%s exact_zeros_outside_scope=%s\n", trials,
              fmt(sweep.max_diff).c_str(), fmt(sweep.max_row_error).c_str(), sweep.zeros_outside ? "yes" : "no");
  if (!sweep.instances.empty()) {
    const auto& w = sweep.instances[sweep.worst];
    std::printf("worst: trial %zu grid=%zux%zu c=%zu h=%zu k=%zu seed=%llu diff=%s\n", sweep.worst, w.height, w.width,
                w.channels, w.heads, w.k, static_cast<unsigned long long>(w.seed), fmt(w.max_diff).c_str());
  }
  std::printf("%s\n", ok ? "PASS" : "FAIL");
  return ok ? kOk : kCheckFailed;
}

int cmd_bench(const std::vector<std::size_t>& sizes, std::size_t k, std::size_t reps, const std::string& out) {
  BenchConfig bc;
  bc.sizes = sizes;
  bc.k = k;
  bc.reps = reps;
  const auto result = run_bench(bc);
  write_bench_csv(std::cout, result.rows);
  if (!out.empty()) {
    std::ofstream os(out);
    if (!os) throw FormatError("cannot write " + out);
    write_bench_csv(os, result.rows);
  }
  bool counts_ok = true;
  for (const auto& r : result.rows) counts_ok = counts_ok && r.lra_scores_counted == r.lra_scores_expected;
  std::printf("lra_slope=%.3f global_slope=%.3f max_rep_cv=%.3f scores_counted=%s\n", result.lra_slope,
              result.global_slope, result.max_cv, counts_ok ? "exact" : "MISMATCH");
  if (result.max_cv > 0.2) {
    std::fprintf(stderr, "timing variance across reps exceeds 20%% (cv=%.3f); machine too noisy\n", result.max_cv);
    return kCheckFailed;
  }
  return counts_ok ? kOk : kCheckFailed;
}

template <typename T>
int train_as(const RunConfig& cfg, const std::string& out) {
  std::filesystem::create_directories(out);
  auto params = init_model<T>(cfg.model, cfg.train.init_seed);
  auto result = train_toy(cfg.model, cfg.train, std::move(params), [](const TrainRecord& r) {
    if (r.step % 25 == 0) std::fprintf(stderr, "step %zu total %.5f\n", r.step, r.total);
  });
  std::ofstream trace(std::filesystem::path(out) / "trace.csv");
  if (!trace) throw FormatError("cannot write trace.csv in " + out);
  write_trace_csv(trace, result.records);
  save_weights((std::filesystem::path(out) / "weights.lpat").string(), result.params);
  if (!result.records.empty()) {
    std::printf("steps=%zu first_total=%.6f last_total=%.6f\n", result.records.size(), result.records.front().total,
                result.records.back().total);
  } else {
    std::printf("steps=0 (initial weights written)\n");
  }
  return kOk;
}

int cmd_train(const std::string& config, int steps, const std::string& out) {
  auto cfg = load(config);
  if (steps >= 0) cfg.train.steps = static_cast<std::size_t>(steps);
  return cfg.precision == Precision::f64 ? train_as<double>(cfg, out) : train_as<float>(cfg, out);
}

SequenceConfig track_sequence_config(const RunConfig& cfg, int frames) {
  auto sc = cfg.track_sequence;
  if (frames > 0) sc.frames = static_cast<std::size_t>(frames);
  return sc;
}

template <typename T>
int track_as(const RunConfig& cfg, const std::string& weights, std::uint64_t seq_seed, int frames,
             const std::string& out) {
  auto params = load_weights<T>(weights);
  check_weights(params, cfg.model);
  const auto seq = gen_sequence<T>(track_sequence_config(cfg, frames), seq_seed);
  const auto result = track_sequence(params, cfg.model, seq);
  nlohmann::json doc;
  doc["seq_seed"] = seq_seed;
  doc["mean_iou"] = result.mean_iou;
  doc["frames"] = nlohmann::json::array();
  for (std::size_t f = 0; f < result.boxes.size(); ++f) {
    const auto& b = result.boxes[f];
    const auto& g = seq.gt[f];
    doc["frames"].push_back({{"frame", f},
                             {"iou", result.ious[f]},
                             {"box", {b.x1, b.y1, b.x2, b.y2}},
                             {"gt", {g.x1, g.y1, g.x2, g.y2}}});
  }
  if (out.empty()) {
    std::cout << doc.dump(2) << '\n';
  } else {
    std::ofstream os(out);
    if (!os) throw FormatError("cannot write " + out);
    os << doc.dump(2) << '\n';
    std::printf("mean_iou=%.4f frames=%zu\n", result.mean_iou, result.boxes.size());
  }
  return kOk;
}

int cmd_track(const std::string& config, const std::string& weights, std::uint64_t seq_seed, int frames,
              const std::string& out) {
  const auto cfg = load(config);
  return cfg.precision == Precision::f64 ? track_as<double>(cfg, weights, seq_seed, frames, out)
                                         : track_as<float>(cfg, weights, seq_seed, frames, out);
}

int cmd_export(const std::string& config, std::uint64_t seq_seed, int frames, const std::string& out) {
  const auto cfg = load(config);
  const auto seq = gen_sequence<float>(track_sequence_config(cfg, frames), seq_seed);
  tools::export_sequence(seq, out);
  std::printf("wrote %zu frames to %s\n", seq.frames.size(), out.c_str());
  return kOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Local-attention tracker kernels: checks, benchmarks and toy training"};
  app.require_subcommand(1);

  std::uint64_t seed = 1;
  double eps = 1e-6, tol = 1e-5;
  auto* gradcheck = app.add_subcommand("gradcheck", "finite-difference check of every layer type");
  gradcheck->add_option("--seed", seed, "case seed");
  gradcheck->add_option("--eps", eps, "central-difference step")->check(CLI::PositiveNumber);
  gradcheck->add_option("--tol", tol, "maximum relative error")->check(CLI::NonNegativeNumber);

  std::size_t trials = 200, max_grid = 6;
  auto* oracle = app.add_subcommand("oracle", "compare windowed attention against the masked dense oracle");
  oracle->add_option("--trials", trials, "random instances");
  oracle->add_option("--max-grid", max_grid, "largest grid side")->check(CLI::PositiveNumber);
  oracle->add_option("--seed", seed, "sweep seed");

  std::vector<std::size_t> sizes{256, 1024, 4096};
  std::size_t k = 3, reps = 5;
  std::string out;
  auto* bench = app.add_subcommand("bench", "time windowed vs global score computation");
  bench->add_option("--sizes", sizes, "square token counts")->delimiter(',');
  bench->add_option("--k", k, "window size (odd)");
  bench->add_option("--reps", reps, "timed repetitions per size")->check(CLI::PositiveNumber);
  bench->add_option("--out", out, "CSV output path");

  std::string config, weights;
  int steps = -1, frames = 0;
  std::uint64_t seq_seed = 100;
  auto* train = app.add_subcommand("train-toy", "train on synthetic sequences; writes trace.csv and weights.lpat");
  train->add_option("--config", config, "run configuration (JSON)")->check(CLI::ExistingFile);
  train->add_option("--steps", steps, "override harness.steps");
  train->add_option("--out", out, "output directory")->required();

  auto* track = app.add_subcommand("track", "track a synthetic sequence and report per-frame IoU");
  track->add_option("--config", config, "run configuration (JSON)")->check(CLI::ExistingFile);
  track->add_option("--weights", weights, "weight archive")->required()->check(CLI::ExistingFile);
  track->add_option("--seq-seed", seq_seed, "sequence seed");
  track->add_option("--frames", frames, "frame count (default from config)");
  track->add_option("--out", out, "JSON output path (stdout if omitted)");

  auto* export_seq = app.add_subcommand("export-seq", "write a synthetic sequence as PNG frames plus gt.json");
  export_seq->add_option("--config", config, "run configuration (JSON)")->check(CLI::ExistingFile);
  export_seq->add_option("--seq-seed", seq_seed, "sequence seed");
  export_seq->add_option("--frames", frames, "frame count (default from config)");
  export_seq->add_option("--out", out, "output directory")->required();

  auto* show = app.add_subcommand("config", "print the effective configuration");
  show->add_option("--config", config, "run configuration (JSON)")->check(CLI::ExistingFile);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kOk : kError;
  }

  try {
    if (*gradcheck) {
      load("");
      return cmd_gradcheck(seed, eps, tol);
    }
    if (*oracle) {
      load("");
      return cmd_oracle(trials, max_grid, seed);
    }
    if (*bench) {
      load("");
      return cmd_bench(sizes, k, reps, out);
    }
    if (*train) return cmd_train(config, steps, out);
    if (*track) return cmd_track(config, weights, seq_seed, frames, out);
    if (*export_seq) return cmd_export(config, seq_seed, frames, out);
    if (*show) {
      std::cout << to_json(load(config)).dump(2) << '\n';
      return kOk;
    }
  } catch (const InstabilityError& e) {
    std::fprintf(stderr, "lpat: non-finite value: %s\n", e.what());
    return kError;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "lpat: %s\n", e.what());
    return kError;
  }
  return kError;
}
