#include <gtest/gtest.h>

#include "lpat/checks.hpp"

using namespace lpat;

class GradientCase : public ::testing::TestWithParam<std::size_t> {};

// Every case but the full pipeline, over 20 seeds each.
TEST_P(GradientCase, AnalyticMatchesCentralDifferences) {
  const auto cases = gradient_cases();
  const auto& c = cases.at(GetParam());
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    const auto r = c.run(seed * 7919 + GetParam(), 1e-6);
    EXPECT_LT(r.max_rel_error, 1e-5) << c.name << " seed " << seed << " worst " << r.worst_name << "[" << r.worst_entry
                                     << "] ad " << r.analytic << " fd " << r.numeric;
  }
}

INSTANTIATE_TEST_SUITE_P(Suite, GradientCase, ::testing::Range<std::size_t>(0, gradient_cases().size() - 1),
                         [](const auto& info) { return gradient_cases().at(info.param).name; });

TEST(GradientSuite, EndsWithPipelineAndCoversEveryLayer) {
  const auto cases = gradient_cases();
  EXPECT_EQ(cases.back().name, "pipeline");
  for (const char* need : {"local_attention", "lra_head", "mh_lra", "din", "lec", "encoder_layer_1", "encoder_layer_2",
                           "decoder_layer", "loss_cls1", "loss_cls2", "loss_reg"}) {
    EXPECT_TRUE(std::any_of(cases.begin(), cases.end(), [&](const GradCase& c) { return c.name == need; })) << need;
  }
}
