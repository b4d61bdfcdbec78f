#include <gtest/gtest.h>

#include <cmath>
#include <stdexcept>

#include "xutt/tuner.hpp"

namespace xutt {
namespace {

double quadratic(const ParamSet& p) { return (p.at("alpha") - 0.3) * (p.at("alpha") - 0.3); }

TEST(RandomSearch, SingleTrialReturnsItsSample) {
  const SearchSpace s{{{"alpha", 0.0, 1.0}}, 1, 7};
  const auto out = random_search(s, quadratic);
  ASSERT_EQ(out.trials.size(), 1u);
  EXPECT_EQ(out.best_params, out.trials[0].params);
  EXPECT_EQ(out.best_value, quadratic(out.trials[0].params));
}

TEST(RandomSearch, FlatObjective) {
  const auto out = random_search(fusion_space(20, 1), [](const ParamSet&) { return 0.125; });
  EXPECT_EQ(out.best_value, 0.125);
  EXPECT_EQ(out.best_index, 0u);
}

TEST(RandomSearch, RecoversQuadraticOptimum) {
  const auto out = random_search({{{"alpha", 0.0, 1.0}}, 200, 0}, quadratic);
  EXPECT_NEAR(out.best_params.at("alpha"), 0.3, 0.05);
}

TEST(RandomSearch, SameSeedSameTrials) {
  const auto a = random_search(fusion_space(30, 5), [](const ParamSet& p) { return p.at("alpha") + p.at("beta"); });
  const auto b = random_search(fusion_space(30, 5), [](const ParamSet& p) { return p.at("alpha") + p.at("beta"); }, 4);
  ASSERT_EQ(a.trials.size(), b.trials.size());
  for (std::size_t i = 0; i < a.trials.size(); ++i) {
    EXPECT_EQ(a.trials[i].params, b.trials[i].params);
    EXPECT_EQ(a.trials[i].value, b.trials[i].value);
  }
  EXPECT_EQ(a.best_params, b.best_params);
  EXPECT_NE(sample_trials(fusion_space(5, 5)), sample_trials(fusion_space(5, 6)));
}

TEST(RandomSearch, DrawsStayInsideIntervals) {
  for (const auto& p : sample_trials(fusion_space(500, 2))) {
    EXPECT_GE(p.at("alpha"), 0.0);
    EXPECT_LE(p.at("alpha"), 1.0);
    EXPECT_GE(p.at("beta"), -0.1);
    EXPECT_LE(p.at("beta"), 0.8);
    EXPECT_GE(p.at("cutoff"), -12.0);
    EXPECT_LE(p.at("cutoff"), -4.0);
  }
}

TEST(RandomSearch, BestSoFarIsNonIncreasing) {
  const auto out = random_search(fusion_space(100, 3), [](const ParamSet& p) {
    if (p.at("alpha") > 0.8) throw std::runtime_error("boom");
    return std::sin(10 * p.at("alpha")) + p.at("beta");
  });
  const auto curve = best_so_far(out.trials);
  for (std::size_t i = 1; i < curve.size(); ++i) {
    if (curve[i - 1]) {
      ASSERT_TRUE(curve[i]);
      EXPECT_LE(*curve[i], *curve[i - 1]);
    }
  }
  EXPECT_EQ(*curve.back(), out.best_value);
}

TEST(RandomSearch, FailedTrialsAreLoggedAndSkipped) {
  const auto out = random_search({{{"alpha", 0.0, 1.0}}, 50, 4}, [](const ParamSet& p) {
    if (p.at("alpha") < 0.5) throw SearchError("no surviving beam");
    return p.at("alpha") < 0.7 ? NAN : p.at("alpha");
  });
  std::size_t failed = 0;
  for (const auto& t : out.trials) {
    if (!t.value) {
      ++failed;
      EXPECT_FALSE(t.error.empty());
    }
  }
  EXPECT_GT(failed, 0u);
  EXPECT_GE(out.best_params.at("alpha"), 0.7);
}

TEST(RandomSearch, AllTrialsFailing) {
  EXPECT_THROW(random_search(fusion_space(5), [](const ParamSet&) -> double { throw InputError("bad"); }),
               SearchError);
}

TEST(RandomSearch, InvalidSpace) {
  EXPECT_THROW(random_search({{{"x", 1.0, 0.0}}, 5, 0}, quadratic), InputError);
  EXPECT_THROW(random_search({{{"alpha", 0.0, 1.0}}, 0, 0}, quadratic), InputError);
}

TEST(SearchSpaces, DefaultRanges) {
  const auto f = fusion_space();
  EXPECT_EQ(f.trials, 64u);
  ASSERT_EQ(f.ranges.size(), 3u);
  EXPECT_EQ(f.ranges[2].lo, -12.0);
  EXPECT_EQ(f.ranges[2].hi, -4.0);
  EXPECT_NO_THROW(rescore_space().validate());
}

}  // namespace
}  // namespace xutt
