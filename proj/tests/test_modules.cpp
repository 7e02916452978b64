#include <gtest/gtest.h>

#include <random>

#include "lpat/checks.hpp"
#include "lpat/model.hpp"
#include "reference.hpp"

using namespace lpat;

namespace {

Tensor<double> C(Shape s, std::vector<double> v) { return Tensor<double>::constant(Array<double>(std::move(s), std::move(v))); }

void randomize(ModelParams<double>& params, std::mt19937_64& rng, double sd) {
  for (auto& [name, value] : params)
    for (auto& v : value.data) v = std::normal_distribution<double>(0.0, sd)(rng);
}

}  // namespace

TEST(Din, ZeroGeneratorsAndExitBiasGiveIdentity) {
  std::mt19937_64 rng(31);
  ModelParams<double> params;
  ParamInit<double> init(params, 3);
  DinParams<double>::declare(init, "din", LecDims{8, 4});
  randomize(params, rng, 1.0);
  for (auto& [name, value] : params)
    if (name.starts_with("din.eg") || name == "din.proj_out.b") std::fill(value.data.begin(), value.data.end(), 0.0);
  ParamBinder<double> b(params, false);
  const auto x = ref::random(rng, 8 * 5 * 4);
  auto y = din(C({8, 5, 4}, x), DinParams<double>::bind(b, "din"));
  EXPECT_EQ(y.value().data, x);
}

TEST(Din, ZeroExitProjectionGivesIdentity) {
  std::mt19937_64 rng(32);
  ModelParams<double> params;
  ParamInit<double> init(params, 3);
  DinParams<double>::declare(init, "din", LecDims{6, 2});
  randomize(params, rng, 1.0);
  for (const char* n : {"din.proj_out.w", "din.proj_out.b"}) std::fill(params.at(n).data.begin(), params.at(n).data.end(), 0.0);
  ParamBinder<double> b(params, false);
  const auto x = ref::random(rng, 6 * 3 * 3);
  EXPECT_EQ(din(C({6, 3, 3}, x), DinParams<double>::bind(b, "din")).value().data, x);
}

TEST(Din, GeneratorChannelMismatchIsConfigError) {
  ModelParams<double> params;
  ParamInit<double> init(params, 3);
  DinParams<double>::declare(init, "din", LecDims{8, 4});
  params.at("din.proj_out.w") = Array<double>(Shape{8, 6, 1, 1});
  ParamBinder<double> b(params, false);
  EXPECT_THROW(DinParams<double>::bind(b, "din"), ConfigError);
  EXPECT_THROW(LecDims({4, 3}).validate(), ConfigError);
  EXPECT_THROW(LecDims({4, 4}).validate(), ConfigError);
}

TEST(Generators, PathsMatchReferenceConvolutions) {
  std::mt19937_64 rng(33);
  ModelParams<double> params;
  ParamInit<double> init(params, 3);
  GeneratorParams<double>::declare(init, "g", GeneratorKind::small_kernels, LecDims{4, 2});
  randomize(params, rng, 1.0);
  ParamBinder<double> b(params, false);
  const auto g = GeneratorParams<double>::bind(b, "g", GeneratorKind::small_kernels);
  const auto x = ref::random(rng, 4 * 5 * 5);
  auto y = element_generator(C({4, 5, 5}, x), g);
  ASSERT_EQ(y.shape(), (Shape{2, 5, 5}));
  std::size_t oh = 0, ow = 0;
  auto a = ref::conv2d(x, 4, 5, 5, params.at("g.path1x1.w").data, 1, 1, 1, 1, 0, oh, ow);
  auto c = ref::conv2d(x, 4, 5, 5, params.at("g.path3x3.w").data, 1, 3, 3, 1, 1, oh, ow);
  for (std::size_t i = 0; i < 25; ++i) {
    EXPECT_NEAR(y.value()[i], std::max(0.0, a[i] + params.at("g.path1x1.b")[0]), 1e-12);
    EXPECT_NEAR(y.value()[25 + i], std::max(0.0, c[i] + params.at("g.path3x3.b")[0]), 1e-12);
  }
}

TEST(Lec, ShapeMismatchIsContractError) {
  ModelParams<double> params;
  ParamInit<double> init(params, 3);
  LecParams<double>::declare(init, "lec", LecDims{4, 2});
  ParamBinder<double> b(params, false);
  const auto p = LecParams<double>::bind(b, "lec");
  EXPECT_THROW(lec(C({6, 4}, std::vector<double>(24)), C({4, 4}, std::vector<double>(16)), p, 2, 3), ContractError);
  EXPECT_EQ(lec(C({6, 4}, std::vector<double>(24, 1.0)), C({6, 4}, std::vector<double>(24)), p, 2, 3).shape(),
            (Shape{6, 4}));
}

TEST(Backbone, ToyExtentsAndResponseGrid) {
  const auto cfg = BackboneConfig::toy();
  EXPECT_EQ(cfg.extents(32)[4], 6u);
  EXPECT_EQ(cfg.extents(64)[4], 14u);
  ModelConfig mc;
  const auto grid = mc.grid();
  EXPECT_EQ(grid.rows, 9u);
  EXPECT_EQ(grid.cols, 9u);
  EXPECT_EQ(grid.stride, 4.0);
  EXPECT_THROW(BackboneConfig::toy().extents(30), ConfigError);
}

TEST(Backbone, PaperScaleGeometry) {
  const auto mc = ModelConfig::paper_scale();
  EXPECT_NO_THROW(mc.validate());
  EXPECT_EQ(mc.backbone.extents(127)[4], 13u);
  EXPECT_EQ(mc.backbone.extents(287)[4], 33u);
  EXPECT_EQ(mc.grid().rows, 21u);
}

TEST(Correlation, PyramidMatchesReferenceXcorr) {
  std::mt19937_64 rng(34);
  const auto mc = mini_model_config();
  auto params = init_model<double>(mc, 5);
  ParamBinder<double> b(params, false);
  const auto bp = BackboneParams<double>::bind(b);
  auto z = C({3, mc.template_size, mc.template_size}, ref::random(rng, 3 * mc.template_size * mc.template_size));
  auto x = C({3, mc.search_size, mc.search_size}, ref::random(rng, 3 * mc.search_size * mc.search_size));
  const auto tokens = correlation_pyramid(z, x, bp, mc.backbone);
  const auto fz = backbone_forward(z, bp, mc.backbone);
  const auto fx = backbone_forward(x, bp, mc.backbone);
  for (std::size_t l = 0; l < 3; ++l) {
    const auto& zt = fz.level[l].value();
    const auto& xt = fx.level[l].value();
    const auto expect = ref::xcorr(zt.data, zt.dim(0), zt.dim(1), zt.dim(2), xt.data, xt.dim(1), xt.dim(2));
    const auto grid = to_grid(tokens.m[l], tokens.height, tokens.width);
    EXPECT_LT(ref::max_abs_diff(grid.value().data, expect), 1e-12);
  }
  EXPECT_EQ(tokens.height, mc.grid().rows);
}

TEST(Transformer, PreservesTokenShapeAndIsDeterministic) {
  std::mt19937_64 rng(35);
  TransformerDims d;
  d.channels = 4;
  d.heads = 2;
  d.ffn_channels = 8;
  d.generator_channels = 2;
  ModelParams<double> params;
  ParamInit<double> init(params, 9);
  TransformerParams<double>::declare(init, d);
  ParamBinder<double> b(params, false);
  const auto p = TransformerParams<double>::bind(b, d);
  const std::size_t n = 12;
  auto m3 = C({n, 4}, ref::random(rng, n * 4)), m4 = C({n, 4}, ref::random(rng, n * 4)),
       m5 = C({n, 4}, ref::random(rng, n * 4));
  const auto a = transformer_forward(m3, m4, m5, p, 3, 4, d);
  const auto again = transformer_forward(m3, m4, m5, p, 3, 4, d);
  EXPECT_EQ(a.shape(), (Shape{n, 4}));
  EXPECT_EQ(a.value(), again.value());
  auto literal = d;
  literal.paper_literal_residual = true;
  EXPECT_NE(transformer_forward(m3, m4, m5, p, 3, 4, literal).value(), a.value());
  EXPECT_THROW(transformer_forward(m3, m4, C({n - 1, 4}, ref::random(rng, (n - 1) * 4)), p, 3, 4, d), ContractError);
}

TEST(Transformer, EncoderOutputRowsAreNormalized) {
  std::mt19937_64 rng(36);
  TransformerDims d;
  d.channels = 4;
  d.heads = 1;
  d.ffn_channels = 8;
  d.generator_channels = 2;
  ModelParams<double> params;
  ParamInit<double> init(params, 9);
  TransformerParams<double>::declare(init, d);
  ParamBinder<double> b(params, false);
  const auto p = TransformerParams<double>::bind(b, d);
  auto m3 = C({9, 4}, ref::random(rng, 36)), m4 = C({9, 4}, ref::random(rng, 36));
  const auto y = encoder_layer_1(m3, m4, p.enc1, ScopeMask::build(3, 3, 3), d).value();
  for (std::size_t i = 0; i < 9; ++i) {
    double mu = 0;
    for (std::size_t j = 0; j < 4; ++j) mu += y.at(i, j) / 4;
    EXPECT_NEAR(mu, 0.0, 1e-12);
  }
}

TEST(Iou, Identities) {
  const BoundingBox a{1, 2, 5, 7}, b{3, 1, 9, 4}, far{20, 20, 30, 30};
  EXPECT_EQ(iou(a, a), 1.0);
  EXPECT_EQ(iou(a, far), 0.0);
  EXPECT_EQ(iou(a, b), iou(b, a));
  EXPECT_EQ(iou(BoundingBox{0, 0, 0, 0}, BoundingBox{0, 0, 0, 0}), 0.0);
  EXPECT_DOUBLE_EQ(iou(a, b), ref::iou(1, 2, 5, 7, 3, 1, 9, 4));
  const BoundingBox touch{5, 2, 8, 7};
  EXPECT_EQ(iou(a, touch), 0.0);
}

TEST(Iou, RandomBoxesAgreeWithReferenceAndStayInUnitInterval) {
  std::mt19937_64 rng(37);
  std::uniform_real_distribution<double> u(0, 20);
  for (int t = 0; t < 500; ++t) {
    double x1 = u(rng), y1 = u(rng), x2 = x1 + u(rng), y2 = y1 + u(rng);
    double p1 = u(rng), q1 = u(rng), p2 = p1 + u(rng), q2 = q1 + u(rng);
    const double v = iou(BoundingBox{x1, y1, x2, y2}, BoundingBox{p1, q1, p2, q2});
    EXPECT_GE(v, 0.0);
    EXPECT_LE(v, 1.0);
    EXPECT_NEAR(v, ref::iou(x1, y1, x2, y2, p1, q1, p2, q2), 1e-15);
  }
}

TEST(Labels, CellsInsideBoxArePositiveWithDistances) {
  const GridGeometry grid{5, 5, 4.0, 8.0};
  const auto t = assign_labels(BoundingBox{10, 10, 22, 18}, grid, 3.0);
  std::vector<std::size_t> expect;
  for (std::size_t i = 0; i < 25; ++i) {
    const double x = 8 + 4.0 * (i % 5), y = 8 + 4.0 * (i / 5);
    if (x >= 10 && x <= 22 && y >= 10 && y <= 18) expect.push_back(i);
  }
  EXPECT_EQ(t.positives, expect);
  ASSERT_EQ(t.reg.size(), 4 * expect.size());
  EXPECT_EQ(t.reg[0], grid.center_x(expect[0]) - 10);
  EXPECT_FALSE(t.no_positives);
  const auto none = assign_labels(BoundingBox{100, 100, 110, 110}, grid, 3.0);
  EXPECT_TRUE(none.no_positives);
}

TEST(Decode, TiesPickLowestIndex) {
  const GridGeometry grid{2, 2, 4.0, 2.0};
  Array<double> reg(Shape{4, 2, 2}, 1.0);
  const auto d = decode_box(reg, {0.5, 0.9, 0.9, 0.1}, grid);
  EXPECT_EQ(d.cell, 1u);
  EXPECT_EQ(d.box, (BoundingBox{2.0, -2.0, 10.0, 6.0}));
}

TEST(Decode, InvariantUnderMonotoneScoreTransforms) {
  std::mt19937_64 rng(38);
  const GridGeometry grid{4, 4, 4.0, 2.0};
  Array<double> reg(Shape{4, 4, 4}, ref::random(rng, 64));
  for (auto& v : reg.data) v = std::abs(v);
  std::vector<double> s(16);
  for (auto& v : s) v = std::uniform_real_distribution<double>(0.01, 1.0)(rng);
  const auto base = decode_box(reg, s, grid);
  for (double p : {0.5, 2.0, 3.0}) {
    std::vector<double> t(16);
    for (std::size_t i = 0; i < 16; ++i) t[i] = 7.0 * std::pow(s[i], p);
    EXPECT_EQ(decode_box(reg, t, grid).box, base.box);
  }
}

TEST(Loss, NoPositivesZeroesRegression) {
  const auto mc = mini_model_config();
  auto params = init_model<double>(mc, 2);
  ParamBinder<double> b(params, false);
  const auto view = ModelView<double>::bind(b, mc);
  std::mt19937_64 rng(39);
  auto z = C({3, mc.template_size, mc.template_size}, ref::random(rng, 3 * mc.template_size * mc.template_size, 0.5));
  auto x = C({3, mc.search_size, mc.search_size}, ref::random(rng, 3 * mc.search_size * mc.search_size, 0.5));
  const auto r = model_forward(view, mc, z, x);
  const auto t = assign_labels(BoundingBox{500, 500, 510, 510}, r.grid, mc.radius());
  const auto terms = loss_total(r.head, t, mc.loss);
  EXPECT_TRUE(terms.no_positives);
  EXPECT_EQ(terms.reg.item(), 0.0);
  EXPECT_NEAR(terms.total.item(), terms.cls1.item() + terms.cls2.item(), 1e-12);
}
