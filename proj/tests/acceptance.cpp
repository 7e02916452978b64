// Acceptance run: one PASS/FAIL line per criterion, non-zero exit if any fails.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <numeric>
#include <random>
#include <string>

#include "lpat/archive.hpp"
#include "lpat/bench.hpp"
#include "lpat/checks.hpp"
#include "lpat/config.hpp"
#include "lpat/train.hpp"

using namespace lpat;

namespace {

using clock_type = std::chrono::steady_clock;

double seconds_since(clock_type::time_point t0) {
  return std::chrono::duration<double>(clock_type::now() - t0).count();
}

int failures = 0;

void report(int id, const char* name, bool ok, const std::string& detail) {
  std::printf("criterion %d %-22s %s  %s\n", id, name, ok ? "PASS" : "FAIL", detail.c_str());
  std::fflush(stdout);
  if (!ok) ++failures;
}

std::string fmt(const char* f, double a, double b = 0, double c = 0, double d = 0) {
  char buf[256];
  std::snprintf(buf, sizeof buf, f, a, b, c, d);
  return buf;
}

// mh_lra with a window covering the whole grid against per-head attention
// with no mask at all.
double global_limit_diff(std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<std::size_t> side(1, 6), per_head(1, 4), pick_heads(1, 2);
  const std::size_t h = side(rng), w = side(rng), heads = pick_heads(rng), c = heads * per_head(rng);
  const std::size_t n = h * w, d = c / heads, k = 2 * std::max(h, w) - 1;
  ModelParams<double> params;
  ParamInit<double> init(params, seed);
  AttentionParams<double>::declare(init, "attn", c, heads);
  detail::jitter(params, rng, 0.1);
  ParamBinder<double> b(params, false);
  const auto p = AttentionParams<double>::bind(b, "attn", c, heads);
  auto q = Tensor<double>::constant(detail::random_array(rng, {n, c}));
  auto kk = Tensor<double>::constant(detail::random_array(rng, {n, c}));
  auto v = Tensor<double>::constant(detail::random_array(rng, {n, c}));
  const auto scope = ScopeMask::build(h, w, k);
  const auto fast = mh_lra(q, kk, v, p, scope);

  auto emb = lra_embed(q, kk, p, scope);
  std::vector<Tensor<double>> parts;
  for (std::size_t j = 0; j < heads; ++j) {
    auto qh = slice(emb.q, 1, j * d, (j + 1) * d);
    auto kh = slice(emb.k, 1, j * d, (j + 1) * d);
    parts.push_back(matmul(softmax_rows(matmul(qh, transpose(kh))), matmul(v, p.w_v[j])));
  }
  const auto slow = matmul(heads == 1 ? parts[0] : concat(parts, 1), p.w_o);
  double diff = 0;
  for (std::size_t i = 0; i < fast.size(); ++i) diff = std::max(diff, std::abs(fast.data()[i] - slow.data()[i]));
  return diff;
}

OracleSweep sweep;

void criterion_oracle() {
  const auto t0 = clock_type::now();
  sweep = oracle_sweep(200, 6, 1);
  const double s = seconds_since(t0);
  report(1, "oracle", sweep.max_diff < 1e-10 && s < 60.0,
         fmt("200 instances, max |diff| %.3g (< 1e-10), %.2f s (< 60 s)", sweep.max_diff, s));
}

void criterion_rows() {
  if (sweep.instances.empty()) throw ContractError("oracle sweep did not run");
  report(4, "row-normalization", sweep.max_row_error <= 1e-12 && sweep.zeros_outside,
         fmt("max |row sum - 1| %.3g (<= 1e-12), zeros outside scope: ", sweep.max_row_error) +
             (sweep.zeros_outside ? "exact" : "VIOLATED"));
}

void criterion_global_limit() {
  double worst = 0;
  for (std::uint64_t seed = 0; seed < 20; ++seed) worst = std::max(worst, global_limit_diff(seed));
  report(2, "global-limit", worst < 1e-10, fmt("20 seeds, max |diff| vs unmasked %.3g (< 1e-10)", worst));
}

void criterion_gradients() {
  const auto t0 = clock_type::now();
  const auto results = run_gradient_suite(1, 1e-6);
  const double s = seconds_since(t0);
  double worst = 0;
  std::string worst_name, failed;
  for (const auto& r : results) {
    if (r.report.max_rel_error > worst) {
      worst = r.report.max_rel_error;
      worst_name = r.name + " (" + r.report.worst_name + ")";
    }
    if (!(r.report.max_rel_error < 1e-5)) failed += " " + r.name;
  }
  report(3, "finite-difference", failed.empty() && s < 300.0,
         fmt("%.0f cases, worst rel %.3g (< 1e-5), %.1f s (< 300 s), worst ", static_cast<double>(results.size()), worst,
             s) +
             worst_name + (failed.empty() ? "" : "; failing:" + failed));
}

void criterion_complexity() {
  const auto t0 = clock_type::now();
  BenchConfig bc;
  const auto r = run_bench(bc);
  const double s = seconds_since(t0);
  bool counts = true;
  for (const auto& row : r.rows) counts = counts && row.lra_scores_counted == row.lra_scores_expected;
  report(5, "complexity", counts && r.lra_slope <= 1.3 && r.global_slope >= 1.7 && s < 180.0,
         fmt("slopes lra %.3f (<= 1.3) global %.3f (>= 1.7), %.1f s (< 180 s), counts ", r.lra_slope, r.global_slope, s) +
             (counts ? "== sum|scope|" : "MISMATCH"));
}

void criterion_identities() {
  const ModelConfig mc;
  auto params = init_model<double>(mc, 3);
  std::mt19937_64 rng(3);
  detail::jitter(params, rng, 0.5);
  for (auto& [name, value] : params)
    if (name.starts_with("dec.din.eg") || name == "dec.din.proj_out.b") std::fill(value.data.begin(), value.data.end(), 0.0);
  ParamBinder<double> b(params, false);
  const auto p = DinParams<double>::bind(b, "dec.din");
  auto x = Tensor<double>::constant(detail::random_array(rng, {mc.transformer.channels, 9, 9}));
  const bool din_ok = din(x, p).value() == x.value();

  bool iou_ok = true;
  std::uniform_real_distribution<double> u(0, 50);
  for (int t = 0; t < 1000; ++t) {
    const BoundingBox a{u(rng), u(rng), 0, 0};
    const BoundingBox box{a.x1, a.y1, a.x1 + 1 + u(rng), a.y1 + 1 + u(rng)};
    const BoundingBox other{u(rng), u(rng), 60 + u(rng), 60 + u(rng)};
    const BoundingBox far = box.translated(box.width() + 1, 0);
    iou_ok = iou_ok && iou(box, box) == 1.0 && iou(box, far) == 0.0 && iou(box, other) == iou(other, box);
  }
  report(6, "identities", din_ok && iou_ok,
         std::string("zero generators + zero exit bias, din(x) == x: ") + (din_ok ? "exact" : "NO") +
             ", IoU(b,b)=1 / disjoint=0 / symmetric: " + (iou_ok ? "exact" : "NO"));
}

void criterion_training() {
  const auto t0 = clock_type::now();
  const auto cfg = parse_config(nlohmann::json::object());
  const auto result = train_toy<float>(cfg.model, cfg.train);
  const auto& rec = result.records;
  const std::size_t w = std::min<std::size_t>(10, rec.size());
  double first = 0, last = 0;
  for (std::size_t i = 0; i < w; ++i) {
    first += rec[i].total / static_cast<double>(w);
    last += rec[rec.size() - w + i].total / static_cast<double>(w);
  }
  double iou_sum = 0;
  for (std::uint64_t seed = 100; seed < 105; ++seed)
    iou_sum += track_sequence(result.params, cfg.model, gen_sequence<float>(cfg.track_sequence, seed)).mean_iou;
  const double mean_iou = iou_sum / 5.0;
  const double s = seconds_since(t0);
  report(7, "toy-training", last <= 0.5 * first && mean_iou >= 0.5 && s < 600.0,
         fmt("%.0f steps, loss %.4f -> %.4f (10-step means, need <= 50%%), static mean IoU ", static_cast<double>(rec.size()),
             first, last) +
             fmt("%.3f (>= 0.5), %.1f s (< 600 s)", mean_iou, s));
}

void criterion_archive() {
  const auto mc = parse_config(nlohmann::json::object()).model;
  auto params = init_model<float>(mc, 5);
  std::mt19937_64 rng(5);
  for (auto& [name, value] : params)
    for (auto& v : value.data) v += static_cast<float>(std::normal_distribution<double>(0.0, 0.05)(rng));
  const auto path = (std::filesystem::temp_directory_path() / "lpat_acceptance.lpat").string();
  save_weights(path, params);
  const auto loaded = load_weights<float>(path);
  std::filesystem::remove(path);

  const auto seq = gen_sequence<float>(SequenceConfig{.frame_size = 128, .frames = 2}, 9);
  const auto& g = seq.gt[0];
  auto z = Tensor<float>::constant(crop_patch(seq.frames[0], g.cx(), g.cy(), mc.template_size).image);
  auto x = Tensor<float>::constant(crop_patch(seq.frames[1], g.cx(), g.cy(), mc.search_size).image);
  auto run = [&](const ModelParams<float>& p) {
    ParamBinder<float> b(p, false);
    const auto r = model_forward(ModelView<float>::bind(b, mc), mc, z, x);
    return std::vector<Array<float>>{r.decoded.value(), r.head.cls1.value(), r.head.cls2.value(), r.head.reg.value()};
  };
  const bool same_params = loaded == params;
  const bool same_out = run(params) == run(loaded);
  report(8, "weight-archive", same_params && same_out,
         std::string("reload ") + (same_params ? "identical" : "DIFFERS") + ", forward outputs " +
             (same_out ? "bit-identical" : "DIFFER"));
}

}  // namespace

int main() {
  const std::pair<const char*, void (*)()> steps[] = {
      {"oracle", criterion_oracle},          {"global", criterion_global_limit}, {"fd", criterion_gradients},
      {"rows", criterion_rows},              {"bench", criterion_complexity},       {"identities", criterion_identities}, {"train", criterion_training},
      {"archive", criterion_archive}};
  for (const auto& [name, fn] : steps) {
    try {
      fn();
    } catch (const std::exception& e) {
      std::printf("criterion step %s FAIL  exception: %s\n", name, e.what());
      ++failures;
    }
  }
  std::printf("%s (%d failing)\n", failures == 0 ? "ALL PASS" : "SOME FAIL", failures);
  return failures == 0 ? 0 : 1;
}
