#pragma once

// Self-checks shared by the command-line tool and the test suites: the
// finite-difference sweep over every layer type and the windowed-attention
// oracle sweep.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <functional>
#include <random>
#include <string>
#include <type_traits>
#include <vector>

#include "lpat/gradcheck.hpp"
#include "lpat/head.hpp"
#include "lpat/local_attention.hpp"
#include "lpat/model.hpp"
#include "lpat/ops.hpp"
#include "lpat/params.hpp"
#include "lpat/transformer.hpp"

namespace lpat {

/// Small model used wherever the whole pipeline is differentiated
/// numerically: 15/23 crops, 4 channels, 5×5 response grid.
inline ModelConfig mini_model_config() {
  ModelConfig c;
  c.backbone.layers = {ConvSpec{4, 3, 2, 0}, ConvSpec{4, 3, 1, 0}, ConvSpec{4, 3, 1, 0}, ConvSpec{4, 3, 1, 1},
                       ConvSpec{4, 3, 1, 1}};
  c.template_size = 15;
  c.search_size = 23;
  c.transformer.channels = 4;
  c.transformer.heads = 2;
  c.transformer.ffn_channels = 8;
  c.transformer.generator_channels = 2;
  return c;
}

struct GradCase {
  std::string name;
  std::function<GradCheckReport(std::uint64_t seed, double eps)> run;
};

struct GradCaseResult {
  std::string name;
  GradCheckReport report;
};


namespace detail {

template <typename X>
using value_of = typename std::remove_cvref_t<X>::value_type;

inline Array<double> random_array(std::mt19937_64& rng, Shape shape, double stddev = 1.0) {
  std::normal_distribution<double> dist(0.0, stddev);
  Array<double> a(std::move(shape));
  for (auto& v : a.data) v = dist(rng);
  return a;
}

/// Reduces any output to a scalar with fixed random weights, identical at
/// every precision.
class Probe {
 public:
  explicit Probe(std::uint64_t seed) : rng_(seed) {}

  template <typename V>
  Tensor<V> operator()(const Tensor<V>& out) {
    if (weights_.data.empty()) weights_ = random_array(rng_, out.shape());
    if (weights_.shape != out.shape()) throw ContractError("probe: output shape changed between evaluations");
    return weighted_sum(out, weights_.template cast<V>());
  }

 private:
  std::mt19937_64 rng_;
  Array<double> weights_;
};

/// Checks body(binder) reduced by a probe; inputs live in params alongside
/// the weights so they are differentiated too.
template <typename Body>
GradCheckReport run_named(const ModelParams<double>& params, std::uint64_t seed, double eps, Body body) {
  Probe probe(seed ^ 0x9e3779b97f4a7c15ULL);
  auto f = [&](auto& b) { return probe(body(b)); };
  return finite_difference_check_wide<long double>(f, params, eps);
}

struct Setup {
  std::mt19937_64 rng;
  ModelParams<double> params;
  ParamInit<double> init;

  explicit Setup(std::uint64_t seed) : rng(seed), init(params, seed + 1) {}

  void input(const std::string& name, Shape shape, double stddev = 1.0) {
    params.add(name, random_array(rng, std::move(shape), stddev));
  }
};

/// Perturbs every stored parameter so biases and norm affines are non-trivial.
inline void jitter(ModelParams<double>& params, std::mt19937_64& rng, double stddev) {
  std::normal_distribution<double> dist(0.0, stddev);
  for (auto& [name, value] : params)
    for (auto& v : value.data) v += dist(rng);
}

constexpr std::size_t kGridH = 3, kGridW = 4, kChannels = 4, kHeads = 2;
constexpr double kPixelStddev = 0.5;

inline TransformerDims small_dims() {
  TransformerDims d;
  d.channels = kChannels;
  d.heads = kHeads;
  d.ffn_channels = 8;
  d.generator_channels = 2;
  return d;
}

/// Label targets on a 5×5 grid with several positive cells.
inline Targets small_targets(const GridGeometry& grid) {
  const double x0 = grid.center_x(0), s = grid.stride;
  return assign_labels(BoundingBox{x0 + 0.7 * s, x0 + 0.4 * s, x0 + 3.3 * s, x0 + 2.6 * s}, grid, 1.6 * s);
}

}  // namespace detail

/// Every case checked by the gradient sweep, in a fixed order.
inline std::vector<GradCase> gradient_cases() {
  using detail::Setup;
  using detail::run_named;
  using detail::value_of;
  constexpr std::size_t H = detail::kGridH, W = detail::kGridW, C = detail::kChannels, N = H * W;
  constexpr std::size_t heads = detail::kHeads;
  std::vector<GradCase> cases;

  auto unary = [&](std::string name, Shape shape, auto fn) {
    cases.push_back({name, [shape, fn](std::uint64_t seed, double eps) {
                       Setup s(seed);
                       s.input("x", shape);
                       return run_named(s.params, seed, eps, [&](auto& b) { return fn(b("x")); });
                     }});
  };
  auto binary = [&](std::string name, Shape sa, Shape sb, auto fn) {
    cases.push_back({name, [sa, sb, fn](std::uint64_t seed, double eps) {
                       Setup s(seed);
                       s.input("a", sa);
                       s.input("b", sb);
                       return run_named(s.params, seed, eps, [&](auto& b) { return fn(b("a"), b("b")); });
                     }});
  };

  // Primitives.
  binary("add", {3, 4}, {3, 4}, [](const auto& a, const auto& b) { return add(a, b); });
  unary("scale", {3, 4}, [](const auto& x) { return scale(x, value_of<decltype(x)>(1.7)); });
  unary("relu", {3, 5}, [](const auto& x) { return relu(x); });
  unary("exp", {3, 4}, [](const auto& x) { return exp(x); });
  unary("sum", {3, 4}, [](const auto& x) { return sum(x); });
  unary("mean", {3, 4}, [](const auto& x) { return mean(x); });
  binary("matmul", {3, 4}, {4, 2}, [](const auto& a, const auto& b) { return matmul(a, b); });
  unary("transpose", {3, 4}, [](const auto& x) { return transpose(x); });
  binary("add_row_bias", {3, 4}, {4}, [](const auto& a, const auto& b) { return add_row_bias(a, b); });
  binary("add_channel_bias", {2, 3, 3}, {2}, [](const auto& a, const auto& b) { return add_channel_bias(a, b); });
  binary("conv2d", {2, 5, 5}, {3, 2, 3, 3}, [](const auto& a, const auto& b) { return conv2d(a, b, 1, 1); });
  binary("conv2d_strided", {2, 7, 7}, {2, 2, 3, 3}, [](const auto& a, const auto& b) { return conv2d(a, b, 2, 0); });
  binary("depthwise_xcorr", {2, 3, 3}, {2, 5, 6}, [](const auto& a, const auto& b) { return depthwise_xcorr(a, b); });
  unary("to_tokens", {2, 3, 4}, [](const auto& x) { return to_tokens(x); });
  unary("to_grid", {12, 2}, [](const auto& x) { return to_grid(x, 3, 4); });
  binary("concat", {2, 3}, {2, 4}, [](const auto& a, const auto& b) { return concat<value_of<decltype(a)>>({a, b}, 1); });
  unary("slice", {4, 5}, [](const auto& x) { return slice(x, 1, 1, 4); });
  unary("gather_rows", {5, 3}, [](const auto& x) { return gather_rows(x, {4, 0, 2, 0}); });
  unary("mask_fill_softmax", {3, 4}, [](const auto& x) {
    return softmax_rows(mask_fill(x, {1, 0, 1, 1, 0, 0, 1, 0, 1, 1, 1, 1}));
  });
  unary("softmax_rows", {3, 5}, [](const auto& x) { return softmax_rows(x); });
  cases.push_back({"layer_norm", [](std::uint64_t seed, double eps) {
                     Setup s(seed);
                     s.input("x", {4, 5});
                     s.input("gamma", {5});
                     s.input("beta", {5});
                     return run_named(s.params, seed, eps, [](auto& b) {
                       return layer_norm(b("x"), b("gamma"), b("beta"), value_of<decltype(b)>(1e-5));
                     });
                   }});
  unary("cross_entropy_rows", {4, 3}, [](const auto& x) { return cross_entropy_rows(x, {2, 0, 1, 1}); });
  unary("bce_with_logits", {2, 3}, [](const auto& x) {
    using V = value_of<decltype(x)>;
    return bce_with_logits<V>(x, {1, 0, V(0.5), 1, 0, 0});
  });
  cases.push_back({"iou_loss", [](std::uint64_t seed, double eps) {
                     Setup s(seed);
                     std::uniform_real_distribution<double> u(0.5, 3.0);
                     Array<double> pred(Shape{3, 4}), target(Shape{3, 4});
                     for (auto& v : pred.data) v = u(s.rng);
                     for (auto& v : target.data) v = u(s.rng);
                     s.params.add("pred", pred);
                     return run_named(s.params, seed, eps, [&](auto& b) {
                       return iou_loss(b("pred"), target.cast<value_of<decltype(b)>>());
                     });
                   }});
  cases.push_back({"local_attention", [](std::uint64_t seed, double eps) {
                     Setup s(seed);
                     s.input("q", {N, 2});
                     s.input("k", {N, 2});
                     s.input("v", {N, 3});
                     const auto scope = ScopeMask::build(H, W, 3);
                     return run_named(s.params, seed, eps,
                                      [&](auto& b) { return local_attention(b("q"), b("k"), b("v"), scope); });
                   }});

  // Attention layers.
  auto attention_case = [&](std::string name, bool global, auto body) {
    cases.push_back({name, [global, body](std::uint64_t seed, double eps) {
                       Setup s(seed);
                       if (global)
                         GlobalAttentionParams<double>::declare(s.init, "attn", C, heads);
                       else
                         AttentionParams<double>::declare(s.init, "attn", C, heads);
                       detail::jitter(s.params, s.rng, 0.1);
                       for (const char* n : {"q", "k", "v"}) s.input(n, {N, C});
                       const auto scope = ScopeMask::build(H, W, 3);
                       return run_named(s.params, seed, eps, [&](auto& b) { return body(b, scope); });
                     }});
  };
  attention_case("lra_head", false, [](auto& b, const ScopeMask& scope) {
    auto p = AttentionParams<value_of<decltype(b)>>::bind(b, "attn", C, heads);
    return lra_head(b("q"), b("k"), b("v"), p, 1, scope);
  });
  attention_case("mh_lra", false, [](auto& b, const ScopeMask& scope) {
    auto p = AttentionParams<value_of<decltype(b)>>::bind(b, "attn", C, heads);
    return mh_lra(b("q"), b("k"), b("v"), p, scope);
  });
  attention_case("mha_global", true, [](auto& b, const ScopeMask&) {
    auto p = GlobalAttentionParams<value_of<decltype(b)>>::bind(b, "attn", C, heads);
    return mha_global(b("q"), b("k"), b("v"), p);
  });

  // Detail correction.
  const LecDims lec_dims{C, 2};
  auto grid_case = [&](std::string name, auto declare, auto body, bool tokens) {
    cases.push_back({name, [declare, body, tokens](std::uint64_t seed, double eps) {
                       Setup s(seed);
                       declare(s.init);
                       detail::jitter(s.params, s.rng, 0.1);
                       if (tokens) {
                         s.input("q", {N, C});
                         s.input("k", {N, C});
                       } else {
                         s.input("x", {C, H, W});
                       }
                       return run_named(s.params, seed, eps, body);
                     }});
  };
  for (auto kind : {GeneratorKind::small_kernels, GeneratorKind::large_kernels}) {
    grid_case(
        kind == GeneratorKind::small_kernels ? "element_generator_1" : "element_generator_2",
        [kind, lec_dims](ParamInit<double>& init) { GeneratorParams<double>::declare(init, "eg", kind, lec_dims); },
        [kind](auto& b) {
          return element_generator(b("x"), GeneratorParams<value_of<decltype(b)>>::bind(b, "eg", kind));
        },
        false);
  }
  grid_case(
      "din", [lec_dims](ParamInit<double>& init) { DinParams<double>::declare(init, "din", lec_dims); },
      [](auto& b) { return din(b("x"), DinParams<value_of<decltype(b)>>::bind(b, "din")); }, false);
  grid_case(
      "lec", [lec_dims](ParamInit<double>& init) { LecParams<double>::declare(init, "lec", lec_dims); },
      [](auto& b) { return lec(b("q"), b("k"), LecParams<value_of<decltype(b)>>::bind(b, "lec"), H, W); }, true);

  // Transformer layers.
  cases.push_back({"ffn", [](std::uint64_t seed, double eps) {
                     Setup s(seed);
                     FfnParams<double>::declare(s.init, "ffn", C, 8);
                     detail::jitter(s.params, s.rng, 0.1);
                     s.input("x", {N, C});
                     return run_named(s.params, seed, eps, [](auto& b) {
                       return ffn(b("x"), FfnParams<value_of<decltype(b)>>::bind(b, "ffn"));
                     });
                   }});
  auto layer_case = [&](std::string name, auto declare, auto body) {
    cases.push_back({name, [declare, body](std::uint64_t seed, double eps) {
                       Setup s(seed);
                       const auto d = detail::small_dims();
                       declare(s.init, d);
                       detail::jitter(s.params, s.rng, 0.1);
                       for (const char* n : {"m3", "m4", "m5"}) s.input(n, {N, C});
                       return run_named(s.params, seed, eps, [&](auto& b) { return body(b, d); });
                     }});
  };
  layer_case(
      "encoder_layer_1",
      [](ParamInit<double>& init, const TransformerDims& d) { EncoderLayerParams<double>::declare(init, "enc1", d); },
      [](auto& b, const TransformerDims& d) {
        return encoder_layer_1(b("m3"), b("m4"), EncoderLayerParams<value_of<decltype(b)>>::bind(b, "enc1", d),
                               ScopeMask::build(H, W, d.window_enc1), d);
      });
  layer_case(
      "encoder_layer_2",
      [](ParamInit<double>& init, const TransformerDims& d) { EncoderLayerParams<double>::declare(init, "enc2", d); },
      [](auto& b, const TransformerDims& d) {
        return encoder_layer_2(b("m5"), b("m4"), EncoderLayerParams<value_of<decltype(b)>>::bind(b, "enc2", d),
                               ScopeMask::build(H, W, d.window_enc2), d);
      });
  layer_case(
      "decoder_layer",
      [](ParamInit<double>& init, const TransformerDims& d) { DecoderLayerParams<double>::declare(init, "dec", d); },
      [](auto& b, const TransformerDims& d) {
        return decoder_layer(b("m5"), b("m4"), DecoderLayerParams<value_of<decltype(b)>>::bind(b, "dec", d), H, W, d);
      });
  layer_case(
      "transformer", [](ParamInit<double>& init, const TransformerDims& d) { TransformerParams<double>::declare(init, d); },
      [](auto& b, const TransformerDims& d) {
        return transformer_forward(b("m3"), b("m4"), b("m5"), TransformerParams<value_of<decltype(b)>>::bind(b, d), H,
                                   W, d);
      });

  // Backbone, correlation and head.
  cases.push_back({"correlation_pyramid", [](std::uint64_t seed, double eps) {
                     Setup s(seed);
                     const auto cfg = mini_model_config();
                     BackboneParams<double>::declare(s.init, cfg.backbone);
                     detail::jitter(s.params, s.rng, 0.05);
                     s.input("z", {3, cfg.template_size, cfg.template_size}, detail::kPixelStddev);
                     s.input("x", {3, cfg.search_size, cfg.search_size}, detail::kPixelStddev);
                     return run_named(s.params, seed, eps, [&](auto& b) {
                       using V = value_of<decltype(b)>;
                       auto t = correlation_pyramid(b("z"), b("x"), BackboneParams<V>::bind(b), cfg.backbone);
                       return concat<V>({t.m[0], t.m[1], t.m[2]}, 1);
                     });
                   }});
  cases.push_back({"head", [](std::uint64_t seed, double eps) {
                     Setup s(seed);
                     HeadParams<double>::declare(s.init, C);
                     detail::jitter(s.params, s.rng, 0.05);
                     s.input("m", {N, C});
                     return run_named(s.params, seed, eps, [&](auto& b) {
                       using V = value_of<decltype(b)>;
                       auto out = head_forward(b("m"), HeadParams<V>::bind(b), H, W);
                       return concat<V>({to_tokens(out.cls1), to_tokens(out.cls2), to_tokens(out.reg)}, 1);
                     });
                   }});

  // Loss terms, each differentiated on its own with respect to raw head maps.
  for (const char* term : {"loss_cls1", "loss_cls2", "loss_reg"}) {
    cases.push_back({term, [term = std::string(term)](std::uint64_t seed, double eps) {
                       Setup s(seed);
                       const GridGeometry grid{5, 5, 4.0, 8.0};
                       const auto targets = detail::small_targets(grid);
                       s.input("cls1", {2, 5, 5});
                       s.input("cls2", {1, 5, 5});
                       s.input("reg_raw", {4, 5, 5}, 0.3);
                       return run_named(s.params, seed, eps, [&](auto& b) {
                         using V = value_of<decltype(b)>;
                         HeadOutput<V> out{b("cls1"), b("cls2"), exp(b("reg_raw"))};
                         auto terms = loss_total(out, targets, LossWeights{});
                         return term == "loss_cls1" ? terms.cls1 : term == "loss_cls2" ? terms.cls2 : terms.reg;
                       });
                     }});
  }

  cases.push_back({"pipeline", [](std::uint64_t seed, double eps) {
                     const auto cfg = mini_model_config();
                     auto params = init_model<double>(cfg, seed);
                     std::mt19937_64 rng(seed + 2);
                     detail::jitter(params, rng, 0.05);
                     const auto z = detail::random_array(rng, {3, cfg.template_size, cfg.template_size}, detail::kPixelStddev);
                     const auto x = detail::random_array(rng, {3, cfg.search_size, cfg.search_size}, detail::kPixelStddev);
                     const auto targets = detail::small_targets(cfg.grid());
                     auto f = [&](auto& b) {
                       using V = value_of<decltype(b)>;
                       auto view = ModelView<V>::bind(b, cfg);
                       auto fwd = model_forward(view, cfg, Tensor<V>::constant(z.cast<V>()),
                                                Tensor<V>::constant(x.cast<V>()));
                       return loss_total(fwd.head, targets, cfg.loss).total;
                     };
                     return finite_difference_check_wide<long double>(f, params, eps);
                   }});
  return cases;
}


/// Runs every case and returns the results in case order.
inline std::vector<GradCaseResult> run_gradient_suite(std::uint64_t seed, double eps) {
  std::vector<GradCaseResult> out;
  const auto cases = gradient_cases();
  for (std::size_t i = 0; i < cases.size(); ++i) {
    const std::uint64_t case_seed = seed * 1000003ULL + i;
    out.push_back({cases[i].name, cases[i].run(case_seed, eps)});
  }
  return out;
}

struct OracleInstance {
  std::size_t height = 0, width = 0, channels = 0, heads = 0, k = 0;
  std::uint64_t seed = 0;
  double max_diff = 0.0;        ///< mh_lra vs oracle assembly
  double max_row_error = 0.0;   ///< |row sum − 1| over materialized rows
  bool zeros_outside = true;    ///< oracle weights exactly zero outside the scope
  bool sparse_matches = true;   ///< sparse weights equal oracle weights in scope
};

struct OracleSweep {
  std::vector<OracleInstance> instances;
  double max_diff = 0.0;
  double max_row_error = 0.0;
  std::size_t worst = 0;
  bool zeros_outside = true;
  double seconds = 0.0;
};

/// One random multi-head instance: mh_lra against an assembly that replaces
/// every head's windowed attention by masked_oracle.
inline OracleInstance oracle_instance(std::size_t height, std::size_t width, std::size_t channels, std::size_t heads,
                                      std::size_t k, std::uint64_t seed) {
  using T = double;
  OracleInstance r{height, width, channels, heads, k, seed};
  ModelParams<T> params;
  ParamInit<T> init(params, seed);
  AttentionParams<T>::declare(init, "attn", channels, heads);
  std::mt19937_64 rng(seed ^ 0x5bd1e995ULL);
  detail::jitter(params, rng, 0.1);
  const std::size_t n = height * width;
  auto q = Tensor<T>::constant(detail::random_array(rng, {n, channels}));
  auto kk = Tensor<T>::constant(detail::random_array(rng, {n, channels}));
  auto v = Tensor<T>::constant(detail::random_array(rng, {n, channels}));
  const auto scope = ScopeMask::build(height, width, k);

  ParamBinder<T> binder(params, false);
  const auto p = AttentionParams<T>::bind(binder, "attn", channels, heads);
  std::vector<SparseRows<T>> sparse;
  const auto fast = mh_lra(q, kk, v, p, scope, &sparse);

  auto emb = lra_embed(q, kk, p, scope);
  const std::size_t d = p.head_dim();
  std::vector<Tensor<T>> parts;
  for (std::size_t j = 0; j < heads; ++j) {
    Array<T> w;
    auto qh = slice(emb.q, 1, j * d, (j + 1) * d);
    auto kh = slice(emb.k, 1, j * d, (j + 1) * d);
    parts.push_back(masked_oracle(qh, kh, matmul(v, p.w_v[j]), scope, &w));
    for (std::size_t i = 0; i < n; ++i) {
      double total = 0.0;
      for (std::size_t c = 0; c < n; ++c) {
        const double wv = w.data[i * n + c];
        total += wv;
        if (!scope.contains(i, c) && wv != 0.0) r.zeros_outside = false;
      }
      r.max_row_error = std::max(r.max_row_error, std::abs(total - 1.0));
      const auto& sr = sparse[j];
      double sparse_total = 0.0;
      for (std::size_t e = sr.offsets[i]; e < sr.offsets[i + 1]; ++e) {
        sparse_total += sr.values[e];
        if (std::abs(sr.values[e] - w.data[i * n + sr.cols[e]]) > 1e-12) r.sparse_matches = false;
      }
      r.max_row_error = std::max(r.max_row_error, std::abs(sparse_total - 1.0));
    }
  }
  const auto slow = matmul(heads == 1 ? parts[0] : concat(parts, 1), p.w_o);
  for (std::size_t i = 0; i < fast.size(); ++i)
    r.max_diff = std::max(r.max_diff, std::abs(fast.data()[i] - slow.data()[i]));
  return r;
}

/// Random grids up to max_grid × max_grid, channels ≤ 8, heads ∈ {1, 2},
/// k ∈ {1, 3, 5}.
inline OracleSweep oracle_sweep(std::size_t trials, std::size_t max_grid, std::uint64_t seed) {
  if (max_grid == 0) throw ConfigError("oracle: --max-grid must be >= 1");
  const auto start = std::chrono::steady_clock::now();
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<std::size_t> grid(1, max_grid);
  std::uniform_int_distribution<int> pick(0, 2);
  OracleSweep sweep;
  for (std::size_t t = 0; t < trials; ++t) {
    const std::size_t h = grid(rng), w = grid(rng);
    const std::size_t heads = 1 + static_cast<std::size_t>(pick(rng) % 2);
    std::uniform_int_distribution<std::size_t> per_head(1, 8 / heads);
    const std::size_t channels = heads * per_head(rng);
    const std::size_t k = 1 + 2 * static_cast<std::size_t>(pick(rng));
    auto inst = oracle_instance(h, w, channels, heads, k, rng());
    if (inst.max_diff > sweep.max_diff || t == 0) {
      sweep.max_diff = inst.max_diff;
      sweep.worst = t;
    }
    sweep.max_row_error = std::max(sweep.max_row_error, inst.max_row_error);
    sweep.zeros_outside = sweep.zeros_outside && inst.zeros_outside && inst.sparse_matches;
    sweep.instances.push_back(inst);
  }
  sweep.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return sweep;
}

}  // namespace lpat
