#include <gtest/gtest.h>

#include <cstdlib>
#include <filesystem>
#include <random>
#include <sstream>

#include "lpat/archive.hpp"
#include "lpat/bench.hpp"
#include "lpat/checks.hpp"
#include "lpat/config.hpp"
#include "lpat/train.hpp"

using namespace lpat;

namespace {

std::string temp_path(const std::string& name) {
  return (std::filesystem::temp_directory_path() / ("lpat_test_" + name)).string();
}

std::string archive_bytes(const WeightArchive& ar) {
  std::ostringstream os;
  ar.write(os);
  return os.str();
}

std::string config_error(const char* text) {
  try {
    parse_config(nlohmann::json::parse(text));
  } catch (const ConfigError& e) {
    return e.what();
  }
  return "";
}

}  // namespace

TEST(Archive, ReadWriteIsByteIdentical) {
  const auto params = init_model<float>(ModelConfig{}, 3);
  const auto bytes = archive_bytes(WeightArchive::from_params(params));
  std::istringstream is(bytes);
  EXPECT_EQ(archive_bytes(WeightArchive::read(is)), bytes);
}

TEST(Archive, RoundTripPreservesValuesInBothPrecisions) {
  const auto path = temp_path("roundtrip.lpat");
  const auto f = init_model<float>(ModelConfig{}, 4);
  save_weights(path, f);
  EXPECT_EQ(load_weights<float>(path), f);
  const auto d = init_model<double>(mini_model_config(), 4);
  save_weights(path, d);
  EXPECT_EQ(load_weights<double>(path), d);
  std::filesystem::remove(path);
}

TEST(Archive, ForwardAfterReloadIsBitIdentical) {
  const auto mc = mini_model_config();
  auto params = init_model<double>(mc, 8);
  std::mt19937_64 rng(8);
  detail::jitter(params, rng, 0.05);
  const auto path = temp_path("forward.lpat");
  save_weights(path, params);
  const auto loaded = load_weights<double>(path);
  std::filesystem::remove(path);
  auto z = Tensor<double>::constant(detail::random_array(rng, {3, mc.template_size, mc.template_size}, 0.5));
  auto x = Tensor<double>::constant(detail::random_array(rng, {3, mc.search_size, mc.search_size}, 0.5));
  auto run = [&](const ModelParams<double>& p) {
    ParamBinder<double> b(p, false);
    const auto view = ModelView<double>::bind(b, mc);
    const auto r = model_forward(view, mc, z, x);
    return std::vector<Array<double>>{r.head.cls1.value(), r.head.cls2.value(), r.head.reg.value()};
  };
  EXPECT_EQ(run(params), run(loaded));
}

TEST(Archive, CorruptInputIsFormatError) {
  const auto bytes = archive_bytes(WeightArchive::from_params(init_model<float>(ModelConfig{}, 1)));
  auto bad = bytes;
  bad[0] = 'X';
  std::istringstream a(bad), b(bytes.substr(0, bytes.size() - 3)), c(bytes + "z");
  EXPECT_THROW(WeightArchive::read(a), FormatError);
  EXPECT_THROW(WeightArchive::read(b), FormatError);
  EXPECT_THROW(WeightArchive::read(c), FormatError);
  EXPECT_THROW(load_weights<float>(temp_path("does_not_exist.lpat")), FormatError);
}

TEST(Archive, CheckWeightsRejectsWrongShapes) {
  const auto mc = mini_model_config();
  auto params = init_model<float>(mc, 1);
  EXPECT_NO_THROW(check_weights(params, mc));
  EXPECT_THROW(check_weights(params, ModelConfig{}), ConfigError);
}

TEST(Config, EmptyDocumentGivesDefaults) {
  const auto cfg = parse_config(nlohmann::json::object());
  EXPECT_EQ(cfg.precision, Precision::f32);
  EXPECT_EQ(cfg.train.steps, 300u);
  EXPECT_EQ(cfg.model.transformer.window_enc1, 3u);
  EXPECT_EQ(cfg.track_sequence.motion, Motion::static_object);
}

TEST(Config, UnknownKeysReportTheirPath) {
  EXPECT_NE(config_error(R"({"bogus": 1})").find("'bogus'"), std::string::npos);
  EXPECT_NE(config_error(R"({"attention": {"kk": 3}})").find("'attention.kk'"), std::string::npos);
  EXPECT_NE(config_error(R"({"harness": {"train_sequence": {"colour": 1}}})").find("'harness.train_sequence.colour'"),
            std::string::npos);
}

TEST(Config, InvalidValuesAreConfigErrors) {
  EXPECT_FALSE(config_error(R"({"attention": {"k": 4}})").empty());
  EXPECT_FALSE(config_error(R"({"attention": {"heads": 3}})").empty());
  EXPECT_FALSE(config_error(R"({"tensor": {"precision": "f16"}})").empty());
  EXPECT_FALSE(config_error(R"({"input": {"template_size": 30}})").empty());
  EXPECT_FALSE(config_error(R"({"harness": {"steps": -1}})").empty());
  EXPECT_FALSE(config_error(R"({"attention": "wide"})").empty());
}

TEST(Config, WindowPairAndFlags) {
  const auto cfg = parse_config(nlohmann::json::parse(R"({"attention": {"k": [1, 5]}, "flags": {"paper_literal_residual": true}})"));
  EXPECT_EQ(cfg.model.transformer.window_enc1, 1u);
  EXPECT_EQ(cfg.model.transformer.window_enc2, 5u);
  EXPECT_TRUE(cfg.model.transformer.paper_literal_residual);
}

TEST(Config, SerializedConfigParsesBack) {
  const auto cfg = parse_config(nlohmann::json::parse(R"({"tensor": {"precision": "f64"}, "harness": {"steps": 12}})"));
  const auto again = parse_config(to_json(cfg));
  EXPECT_EQ(to_json(again), to_json(cfg));
  EXPECT_EQ(again.train.steps, 12u);
}

TEST(Config, ThreadsEnvironmentOverride) {
  ::setenv("LPAT_THREADS", "3", 1);
  EXPECT_EQ(parse_config(nlohmann::json::object()).threads, 3u);
  ::setenv("LPAT_THREADS", "zero", 1);
  EXPECT_THROW(parse_config(nlohmann::json::object()), ConfigError);
  ::unsetenv("LPAT_THREADS");
}

TEST(Config, MissingFileIsConfigError) { EXPECT_THROW(load_config(temp_path("nope.json")), ConfigError); }

TEST(Synthetic, SameSeedSameSequence) {
  SequenceConfig sc;
  sc.frame_size = 64;
  sc.frames = 5;
  const auto a = gen_sequence<float>(sc, 11), b = gen_sequence<float>(sc, 11), c = gen_sequence<float>(sc, 12);
  EXPECT_EQ(a.frames, b.frames);
  EXPECT_EQ(a.gt, b.gt);
  EXPECT_NE(a.frames, c.frames);
}

TEST(Synthetic, BoxesStayInsideFrame) {
  for (auto motion : {Motion::static_object, Motion::linear, Motion::random_walk}) {
    SequenceConfig sc;
    sc.motion = motion;
    sc.frames = 30;
    sc.velocity_x = 1.5;
    sc.walk_sigma = 6.0;
    sc.scale_rate = 0.01;
    sc.rotation_rate = 0.1;
    for (std::uint64_t seed = 0; seed < 5; ++seed) {
      const auto s = gen_sequence<float>(sc, seed);
      for (const auto& g : s.gt) {
        EXPECT_GE(g.x1, 0.0);
        EXPECT_GE(g.y1, 0.0);
        EXPECT_LE(g.x2, 128.0);
        EXPECT_LE(g.y2, 128.0);
        EXPECT_GT(g.area(), 0.0);
      }
      if (motion == Motion::static_object) {
        EXPECT_EQ(s.gt.front().cx(), s.gt.back().cx());
        EXPECT_EQ(s.gt.front().cy(), s.gt.back().cy());
      }
    }
  }
}

TEST(Synthetic, OversizedObjectIsConfigError) {
  SequenceConfig sc;
  sc.frame_size = 16;
  EXPECT_THROW(gen_sequence<float>(sc, 1), ConfigError);
}

TEST(Synthetic, CropMirrorsOutsideFrame) {
  Array<float> frame(Shape{1, 4, 4});
  for (std::size_t i = 0; i < 16; ++i) frame[i] = static_cast<float>(i);
  const auto inside = crop_patch(frame, 2.0, 2.0, 4);
  EXPECT_FALSE(inside.padded);
  EXPECT_EQ(inside.image, frame);
  const auto edge = crop_patch(frame, 0.0, 2.0, 4);
  EXPECT_TRUE(edge.padded);
  EXPECT_EQ(edge.origin_x, -2);
  EXPECT_EQ(edge.image.at(0, 0, 0), frame.at(0, 0, 1));
  EXPECT_EQ(edge.image.at(0, 0, 1), frame.at(0, 0, 0));
  EXPECT_EQ(edge.image.at(0, 0, 2), frame.at(0, 0, 0));
}

TEST(Train, SgdMomentumUpdateRule) {
  ModelParams<double> p;
  p.add("w", Array<double>(Shape{2}, {1.0, -1.0}));
  SgdMomentum<double> opt(0.1, 0.5);
  std::map<std::string, Array<double>> g{{"w", Array<double>(Shape{2}, {2.0, 4.0})}};
  opt.step(p, g);
  EXPECT_DOUBLE_EQ(p.at("w")[0], 1.0 - 0.1 * 2.0);
  opt.step(p, g);
  EXPECT_DOUBLE_EQ(p.at("w")[0], 0.8 - 0.1 * (0.5 * 2.0 + 2.0));
  EXPECT_DOUBLE_EQ(p.at("w")[1], -1.0 - 0.1 * 4.0 - 0.1 * 6.0);
}

TEST(Train, ZeroStepsReturnsInitialWeights) {
  TrainConfig tc;
  tc.steps = 0;
  const ModelConfig mc;
  const auto r = train_toy<float>(mc, tc);
  EXPECT_TRUE(r.records.empty());
  EXPECT_EQ(r.params, init_model<float>(mc, tc.init_seed));
}

TEST(Train, ShortRunIsDeterministic) {
  TrainConfig tc;
  tc.steps = 2;
  tc.batch = 1;
  const auto mc = mini_model_config();
  const auto a = train_toy<double>(mc, tc), b = train_toy<double>(mc, tc);
  ASSERT_EQ(a.records.size(), 2u);
  EXPECT_EQ(a.records[1].total, b.records[1].total);
  EXPECT_EQ(a.params, b.params);
  std::ostringstream os;
  write_trace_csv(os, a.records);
  EXPECT_EQ(os.str().substr(0, 24), "step,total,cls1,cls2,reg");
}

TEST(Bench, SlopeOfPowerLaw) {
  EXPECT_NEAR(loglog_slope({2, 4, 8, 16}, {3 * 4.0, 3 * 16.0, 3 * 64.0, 3 * 256.0}), 2.0, 1e-12);
  EXPECT_THROW(loglog_slope({1}, {1}), ContractError);
}

TEST(Bench, CsvRoundTripAndCounts) {
  BenchConfig bc;
  bc.sizes = {16, 64};
  bc.reps = 2;
  bc.min_rep_seconds = 0.001;
  const auto r = run_bench(bc);
  for (const auto& row : r.rows) EXPECT_EQ(row.lra_scores_counted, row.lra_scores_expected);
  std::stringstream ss;
  write_bench_csv(ss, r.rows);
  const auto back = read_bench_csv(ss);
  ASSERT_EQ(back.size(), 2u);
  EXPECT_EQ(back[1].n, 64u);
  EXPECT_EQ(back[1].lra_scores_counted, r.rows[1].lra_scores_counted);
  bc.sizes = {16, 50};
  EXPECT_THROW(run_bench(bc), ConfigError);
  std::istringstream bad("n,k\n");
  EXPECT_THROW(read_bench_csv(bad), FormatError);
}
