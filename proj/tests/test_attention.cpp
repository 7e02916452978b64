#include <gtest/gtest.h>

#include <cmath>
#include <array>
#include <numeric>
#include <random>

#include "lpat/checks.hpp"
#include "lpat/local_attention.hpp"
#include "reference.hpp"

using namespace lpat;

namespace {

Tensor<double> C(Shape s, std::vector<double> v) { return Tensor<double>::constant(Array<double>(std::move(s), std::move(v))); }

}  // namespace

TEST(ScopeMask, MatchesBruteForceWindow) {
  for (std::size_t h : {1u, 3u, 5u})
    for (std::size_t w : {1u, 4u, 6u})
      for (std::size_t k : {1u, 3u, 5u, 7u}) {
        const auto m = ScopeMask::build(h, w, k);
        std::size_t total = 0;
        for (std::size_t i = 0; i < h * w; ++i) {
          const auto expect = ref::window(i, h, w, k);
          const auto got = m.scope(i);
          ASSERT_EQ(got.size(), expect.size()) << h << "x" << w << " k=" << k << " i=" << i;
          for (std::size_t t = 0; t < got.size(); ++t) EXPECT_EQ(got[t], expect[t]);
          for (std::size_t j = 0; j < h * w; ++j)
            EXPECT_EQ(m.contains(i, j), std::find(expect.begin(), expect.end(), j) != expect.end());
          total += expect.size();
        }
        EXPECT_EQ(m.total(), total);
      }
}

TEST(ScopeMask, EvenOrZeroWindowIsConfigError) {
  EXPECT_THROW(ScopeMask::build(4, 4, 2), ConfigError);
  EXPECT_THROW(ScopeMask::build(4, 4, 0), ConfigError);
}

TEST(LocalAttention, MatchesPlainLoopReference) {
  std::mt19937_64 rng(21);
  const std::size_t h = 4, w = 5, n = h * w, d = 3, dv = 2;
  const auto q = ref::random(rng, n * d), k = ref::random(rng, n * d), v = ref::random(rng, n * dv);
  for (std::size_t win : {1u, 3u, 5u}) {
    const auto scope = ScopeMask::build(h, w, win);
    auto y = local_attention(C({n, d}, q), C({n, d}, k), C({n, dv}, v), scope);
    const auto expect = ref::attention(q, k, v, n, d, dv, 1.0, [&](std::size_t i) { return ref::window(i, h, w, win); });
    EXPECT_LT(ref::max_abs_diff(y.value().data, expect), 1e-12);
  }
}

TEST(LocalAttention, WindowOneCopiesValue) {
  std::mt19937_64 rng(22);
  const auto v = ref::random(rng, 12 * 3);
  auto y = local_attention(C({12, 2}, ref::random(rng, 24)), C({12, 2}, ref::random(rng, 24)), C({12, 3}, v),
                           ScopeMask::build(3, 4, 1));
  EXPECT_EQ(y.value().data, v);
}

TEST(LocalAttention, GlobalWindowEqualsUnmaskedAttention) {
  std::mt19937_64 rng(23);
  for (std::size_t seed = 0; seed < 20; ++seed) {
    const std::size_t h = 2 + seed % 4, w = 1 + seed % 5, n = h * w, d = 4;
    const std::size_t win = 2 * std::max(h, w) - 1;
    const auto q = ref::random(rng, n * d), k = ref::random(rng, n * d), v = ref::random(rng, n * d);
    auto y = local_attention(C({n, d}, q), C({n, d}, k), C({n, d}, v), ScopeMask::build(h, w, win));
    const auto all = [&](std::size_t) {
      std::vector<std::size_t> a(n);
      std::iota(a.begin(), a.end(), 0);
      return a;
    };
    EXPECT_LT(ref::max_abs_diff(y.value().data, ref::attention(q, k, v, n, d, d, 1.0, all)), 1e-10);
  }
}

TEST(LocalAttention, WeightsAreSparseRowsSummingToOne) {
  std::mt19937_64 rng(24);
  const auto scope = ScopeMask::build(5, 5, 3);
  SparseRows<double> wts;
  local_attention(C({25, 4}, ref::random(rng, 100, 3.0)), C({25, 4}, ref::random(rng, 100, 3.0)),
                  C({25, 2}, ref::random(rng, 50)), scope, &wts);
  ASSERT_EQ(wts.values.size(), scope.total());
  for (std::size_t i = 0; i < 25; ++i) {
    double s = 0;
    for (std::size_t t = wts.offsets[i]; t < wts.offsets[i + 1]; ++t) s += wts.values[t];
    EXPECT_NEAR(s, 1.0, 1e-12);
  }
}

TEST(LocalAttention, ScoreCountEqualsScopeTotal) {
  std::mt19937_64 rng(25);
  for (std::size_t side : {4u, 7u, 10u})
    for (std::size_t k : {1u, 3u, 5u}) {
      const auto scope = ScopeMask::build(side, side, k);
      const std::size_t n = side * side;
      instrument::reset_local_scores();
      local_attention(C({n, 2}, ref::random(rng, 2 * n)), C({n, 2}, ref::random(rng, 2 * n)),
                      C({n, 2}, ref::random(rng, 2 * n)), scope);
      EXPECT_EQ(instrument::local_scores(), scope.total());
    }
}

TEST(LocalAttention, ThreadCountDoesNotChangeResult) {
  std::mt19937_64 rng(26);
  const auto scope = ScopeMask::build(9, 9, 5);
  auto q = C({81, 4}, ref::random(rng, 324)), k = C({81, 4}, ref::random(rng, 324)), v = C({81, 3}, ref::random(rng, 243));
  runtime::set_threads(1);
  const auto one = local_attention(q, k, v, scope).value();
  runtime::set_threads(3);
  const auto three = local_attention(q, k, v, scope).value();
  runtime::set_threads(1);
  EXPECT_EQ(one, three);
}

TEST(LocalAttention, MismatchedScopeIsContractError) {
  EXPECT_THROW(local_attention(C({6, 2}, std::vector<double>(12)), C({6, 2}, std::vector<double>(12)),
                               C({6, 2}, std::vector<double>(12)), ScopeMask::build(2, 2, 3)),
               ContractError);
}

TEST(MhLra, MatchesPerHeadMaskedOracleOnRandomInstances) {
  std::mt19937_64 rng(27);
  std::uniform_int_distribution<std::size_t> side(1, 6), per_head(1, 4), heads(1, 2), win(0, 2);
  for (int t = 0; t < 60; ++t) {
    const std::size_t h = heads(rng), c = h * per_head(rng);
    const auto r = oracle_instance(side(rng), side(rng), c, h, 2 * win(rng) + 1, rng());
    EXPECT_LT(r.max_diff, 1e-10);
    EXPECT_LT(r.max_row_error, 1e-12);
    EXPECT_TRUE(r.zeros_outside);
    EXPECT_TRUE(r.sparse_matches);
  }
}

// Whole block recomputed with plain loops: 3x3 embeddings, per-head windowed
// attention on channel slices, concat, output projection.
TEST(MhLra, MatchesPlainLoopAssembly) {
  std::mt19937_64 rng(28);
  for (const auto [h, w, c, heads, k] : {std::array<std::size_t, 5>{3, 4, 4, 2, 3}, {5, 2, 6, 2, 5}, {4, 4, 3, 1, 1}}) {
    const std::size_t n = h * w, d = c / heads;
    ModelParams<double> params;
    ParamInit<double> init(params, rng());
    AttentionParams<double>::declare(init, "a", c, heads);
    for (auto& [name, value] : params)
      for (auto& v : value.data) v = std::normal_distribution<double>(0.0, 0.5)(rng);
    ParamBinder<double> b(params, false);
    const auto p = AttentionParams<double>::bind(b, "a", c, heads);
    const auto qv = ref::random(rng, n * c), kv = ref::random(rng, n * c), vv = ref::random(rng, n * c);
    auto y = mh_lra(C({n, c}, qv), C({n, c}, kv), C({n, c}, vv), p, ScopeMask::build(h, w, k));

    auto embed = [&](const ref::Mat& tokens, const char* wname, const char* bname) {
      ref::Mat grid(c * n);
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t ch = 0; ch < c; ++ch) grid[ch * n + i] = tokens[i * c + ch];
      std::size_t oh = 0, ow = 0;
      auto out = ref::conv2d(grid, c, h, w, params.at(wname).data, c, 3, 3, 1, 1, oh, ow);
      ref::Mat t(n * c);
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t ch = 0; ch < c; ++ch) t[i * c + ch] = out[ch * n + i] + (bname ? params.at(bname)[ch] : 0.0);
      return t;
    };
    const auto eq = embed(qv, "a.phi_q.w", "a.phi_q.b"), ek = embed(kv, "a.phi_k.w", nullptr);
    ref::Mat cat(n * c);
    for (std::size_t j = 0; j < heads; ++j) {
      ref::Mat qh(n * d), kh(n * d);
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t l = 0; l < d; ++l) {
          qh[i * d + l] = eq[i * c + j * d + l];
          kh[i * d + l] = ek[i * c + j * d + l];
        }
      const auto vh = ref::matmul(vv, params.at("a.w_v." + std::to_string(j)).data, n, c, d);
      const auto o = ref::attention(qh, kh, vh, n, d, d, 1.0, [&](std::size_t i) { return ref::window(i, h, w, k); });
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t l = 0; l < d; ++l) cat[i * c + j * d + l] = o[i * d + l];
    }
    EXPECT_LT(ref::max_abs_diff(y.value().data, ref::matmul(cat, params.at("a.w_o").data, n, c, c)), 1e-10);
  }
}

TEST(MhaGlobal, MatchesReferencePerHead) {
  std::mt19937_64 rng(29);
  const std::size_t n = 5, m = 7, c = 4, heads = 2, d = 2;
  ModelParams<double> params;
  ParamInit<double> init(params, 6);
  GlobalAttentionParams<double>::declare(init, "g", c, heads);
  for (auto& [name, value] : params)
    for (auto& v : value.data) v = std::normal_distribution<double>()(rng);
  ParamBinder<double> b(params, false);
  const auto p = GlobalAttentionParams<double>::bind(b, "g", c, heads);
  const auto qv = ref::random(rng, n * c), kv = ref::random(rng, m * c), vv = ref::random(rng, m * c);
  auto y = mha_global(C({n, c}, qv), C({m, c}, kv), C({m, c}, vv), p);

  auto project = [&](const ref::Mat& x, std::size_t rows, const char* w, const char* bias) {
    auto out = ref::matmul(x, params.at(w).data, rows, c, c);
    if (bias)
      for (std::size_t i = 0; i < rows; ++i)
        for (std::size_t j = 0; j < c; ++j) out[i * c + j] += params.at(bias)[j];
    return out;
  };
  const auto qp = project(qv, n, "g.w_q.w", "g.w_q.b"), kp = project(kv, m, "g.w_k", nullptr),
             vp = project(vv, m, "g.w_v.w", "g.w_v.b");
  ref::Mat cat(n * c);
  for (std::size_t j = 0; j < heads; ++j) {
    auto col = [&](const ref::Mat& x, std::size_t rows) {
      ref::Mat o(rows * d);
      for (std::size_t i = 0; i < rows; ++i)
        for (std::size_t l = 0; l < d; ++l) o[i * d + l] = x[i * c + j * d + l];
      return o;
    };
    const auto qh = col(qp, n), kh = col(kp, m), vh = col(vp, m);
    for (std::size_t i = 0; i < n; ++i) {
      std::vector<double> s(m);
      for (std::size_t t = 0; t < m; ++t) {
        double a = 0;
        for (std::size_t l = 0; l < d; ++l) a += qh[i * d + l] * kh[t * d + l];
        s[t] = a / std::sqrt(static_cast<double>(d));
      }
      const double peak = *std::max_element(s.begin(), s.end());
      double tot = 0;
      for (auto& e : s) tot += (e = std::exp(e - peak));
      for (std::size_t l = 0; l < d; ++l) {
        double acc = 0;
        for (std::size_t t = 0; t < m; ++t) acc += s[t] / tot * vh[t * d + l];
        cat[i * c + j * d + l] = acc;
      }
    }
  }
  auto expect = project(cat, n, "g.w_o.w", "g.w_o.b");
  EXPECT_LT(ref::max_abs_diff(y.value().data, expect), 1e-12);
}
