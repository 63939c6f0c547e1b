#include <gtest/gtest.h>

#include <cmath>

#include "simple/metrics.hpp"
#include "simple/sim_env.hpp"

using namespace simple;

TEST(ScoreStats, BasicSet) {
    ScoreStats st = score_stats({1, 2, 3, 4, 10});
    EXPECT_DOUBLE_EQ(st.mean, 4.0);
    EXPECT_DOUBLE_EQ(st.median, 3.0);
    EXPECT_DOUBLE_EQ(st.max, 10.0);
    EXPECT_NEAR(st.stddev, std::sqrt(12.5), 1e-12);
}

TEST(ScoreStats, SingleRunStdZero) {
    ScoreStats st = score_stats({7.5});
    EXPECT_DOUBLE_EQ(st.stddev, 0.0);
    EXPECT_DOUBLE_EQ(st.median, 7.5);
}

TEST(ScoreStats, SampleConvention) {
    EXPECT_NEAR(score_stats({0, 2}).stddev, std::sqrt(2.0), 1e-12);
    EXPECT_DOUBLE_EQ(score_stats({0, 2}).median, 1.0);  // midpoint interpolation
}

TEST(ScoreStats, EmptyRejected) { EXPECT_THROW(score_stats({}), std::invalid_argument); }

TEST(NormalizedFraction, PongExampleWithAdjustment) {
    // Denominator -0.1 < 0 triggers the +1 adjustment: 34.2 / 0.9 = 38.0.
    auto f = normalized_fraction(12.8, -20.5, -20.4);
    ASSERT_TRUE(f.has_value());
    EXPECT_NEAR(*f, 38.0, 1e-9);
}

TEST(NormalizedFraction, MatchingBaselineIsOne) {
    auto f = normalized_fraction(5.0, 5.0, 1.0);
    EXPECT_DOUBLE_EQ(*f, 1.0);
}

TEST(NormalizedFraction, RandomScoreIsZero) {
    auto f = normalized_fraction(1.0, 5.0, 1.0);
    EXPECT_DOUBLE_EQ(*f, 0.0);
}

TEST(NormalizedFraction, ZeroAdjustedDenominatorUndefined) {
    // baseline - random = -1, adjusted to exactly 0.
    EXPECT_FALSE(normalized_fraction(3.0, 1.0, 2.0).has_value());
}

TEST(NormalizedFraction, ShiftInvariantWhenDenominatorPositive) {
    Rng rng(3);
    for (int i = 0; i < 100; ++i) {
        const double r = rng.uniform(-10, 10);
        const double b = r + rng.uniform(0.5, 10);  // positive denominator
        const double s = rng.uniform(-10, 10);
        const double c = rng.uniform(-100, 100);
        auto f1 = normalized_fraction(s, b, r);
        auto f2 = normalized_fraction(s + c, b + c, r + c);
        ASSERT_TRUE(f1 && f2);
        EXPECT_NEAR(*f1, *f2, 1e-9 * std::max(1.0, std::abs(*f1)));
    }
}

TEST(StepsToMatch, PongCurveInterpolation) {
    BaselineCurve curve{{{100000, -20.5}, {500000, -8.6}, {1000000, 14.7}}};
    auto s = steps_to_match(curve, 12.8);
    ASSERT_TRUE(s.has_value());
    EXPECT_NEAR(*s, 959227.4678111588, 1.0);
}

TEST(StepsToMatch, TargetBelowFirstPointClampsLeft) {
    BaselineCurve curve{{{100000, -20.5}, {500000, -8.6}}};
    EXPECT_DOUBLE_EQ(*steps_to_match(curve, -30.0), 100000.0);
}

TEST(StepsToMatch, TargetAboveFinalScoreIsBeyondHorizon) {
    BaselineCurve curve{{{100000, -20.5}, {500000, -8.6}}};
    EXPECT_FALSE(steps_to_match(curve, 0.0).has_value());
}

TEST(StepsToMatch, MonotoneInTarget) {
    Rng rng(17);
    for (int trial = 0; trial < 50; ++trial) {
        BaselineCurve curve;
        double x = 0, y = rng.uniform(-5, 5);
        for (int i = 0; i < 8; ++i) {
            x += rng.uniform(1, 100);
            y += rng.uniform(-3, 3);
            curve.points.push_back({x, y});
        }
        double t1 = rng.uniform(-6, 6);
        double t2 = t1 + rng.uniform(0, 3);
        auto s1 = steps_to_match(curve, t1);
        auto s2 = steps_to_match(curve, t2);
        if (s2.has_value()) {
            ASSERT_TRUE(s1.has_value());
            EXPECT_LE(*s1, *s2);
        }
    }
}

TEST(BestIterationCdf, MonotoneCurvePeaksLast) {
    std::vector<double> curve;
    for (int i = 1; i <= 15; ++i) curve.push_back(i);
    auto cdf = best_iteration_cdf({curve});
    ASSERT_EQ(cdf.size(), 1u);
    EXPECT_EQ(cdf[0].iteration, 15);
    EXPECT_DOUBLE_EQ(cdf[0].fraction, 1.0);
}

TEST(BestIterationCdf, ConstantCurveFirstAttainment) {
    auto cdf = best_iteration_cdf({std::vector<double>(15, 3.0)});
    ASSERT_EQ(cdf.size(), 1u);
    EXPECT_EQ(cdf[0].iteration, 1);
}

TEST(BestIterationCdf, TwoRunsTwoSteps) {
    std::vector<double> a = {0, 1, 5, 2, 1};  // peak at iteration 3
    std::vector<double> b = {0, 1, 2, 3, 4, 5, 9};  // peak at iteration 7
    auto cdf = best_iteration_cdf({a, b});
    ASSERT_EQ(cdf.size(), 2u);
    EXPECT_EQ(cdf[0].iteration, 3);
    EXPECT_DOUBLE_EQ(cdf[0].fraction, 0.5);
    EXPECT_EQ(cdf[1].iteration, 7);
    EXPECT_DOUBLE_EQ(cdf[1].fraction, 1.0);
}

TEST(BestIterationCdf, IsValidCdf) {
    Rng rng(7);
    std::vector<std::vector<double>> runs;
    for (int r = 0; r < 9; ++r) {
        std::vector<double> c;
        for (int i = 0; i < 15; ++i) c.push_back(rng.uniform(0, 10));
        runs.push_back(c);
    }
    auto cdf = best_iteration_cdf(runs);
    double prev = 0;
    for (const auto& p : cdf) {
        EXPECT_GT(p.fraction, prev);
        prev = p.fraction;
    }
    EXPECT_DOUBLE_EQ(cdf.back().fraction, 1.0);
}

namespace {

std::vector<SequenceStart> make_starts(int n, int horizon, uint64_t seed) {
    std::vector<SequenceStart> starts;
    Rng rng(seed);
    Env env = make_env({.name = "mini_pong", .seed = seed});
    for (int i = 0; i < n; ++i) {
        // March the shared env forward a little between snapshots.
        for (int k = 0; k < 5 && !env.done(); ++k) env.step(static_cast<int>(rng.below(3)));
        if (env.done()) env.reset();
        std::vector<int> actions;
        for (int k = 0; k < horizon; ++k) actions.push_back(static_cast<int>(rng.below(3)));
        starts.push_back(SequenceStart{env, std::move(actions)});
    }
    return starts;
}

}  // namespace

TEST(RewardSequenceAccuracy, TrueEnvironmentScoresPerfectly) {
    const int horizon = 6;
    auto starts = make_starts(12, horizon, 3);
    // Simulator backed by the true environment itself.
    auto starts_copy = starts;
    size_t cursor = 0;
    SequenceSimulator sim = [&](const ObservationStack&, const std::vector<int>& actions) {
        Env env = starts_copy[cursor++].env;
        int total = 0;
        for (int a : actions)
            if (!env.done()) total += env.step(a).reward;
        return total;
    };
    EXPECT_DOUBLE_EQ(reward_sequence_accuracy(sim, starts, horizon), 1.0);
}

TEST(RewardSequenceAccuracy, ConstantZeroSimulatorMissesRewardedSequences) {
    const int horizon = 40;
    // Long do-nothing sequences on mini_pong concede at least one point.
    std::vector<SequenceStart> starts;
    starts.push_back(SequenceStart{make_env({.name = "mini_pong", .seed = 5}), std::vector<int>(horizon, 0)});
    SequenceSimulator zero = [](const ObservationStack&, const std::vector<int>&) { return 0; };
    EXPECT_DOUBLE_EQ(reward_sequence_accuracy(zero, starts, horizon), 0.0);
}

TEST(RewardSequenceAccuracy, ZeroHorizonRejected) {
    SequenceSimulator zero = [](const ObservationStack&, const std::vector<int>&) { return 0; };
    EXPECT_THROW(reward_sequence_accuracy(zero, {}, 0), std::invalid_argument);
}
