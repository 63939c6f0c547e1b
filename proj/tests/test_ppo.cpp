#include <gtest/gtest.h>

#include <cmath>

#include "simple/ppo.hpp"

using namespace simple;

namespace {

ObservationStack constant_stack(int h, int w, uint8_t v) {
    Frame f(h, w);
    std::fill(f.rgb.begin(), f.rgb.end(), v);
    return {f, f, f, f};
}

}  // namespace

TEST(PolicyForward, DeterministicShapesAndFiniteValue) {
    PolicyNet net(24, 16, 3, 7);
    std::vector<ObservationStack> stacks = {constant_stack(24, 16, 40), constant_stack(24, 16, 200)};
    auto [logits, values] = net.forward_batch(stacks);
    auto [logits2, values2] = net.forward_batch(stacks);
    EXPECT_EQ(logits.shape, (std::vector<int>{2, 3}));
    EXPECT_EQ(values.shape, (std::vector<int>{2}));
    EXPECT_EQ(logits.v, logits2.v);
    EXPECT_EQ(values.v, values2.v);
    for (float v : values.v) EXPECT_TRUE(std::isfinite(v));
}

TEST(Gae, TwoStepExample) {
    auto adv = gae<double>({1.0, 0.0}, {0.0, 0.0}, 0.0, 0.95, 1.0);
    EXPECT_DOUBLE_EQ(adv[0], 1.0);
    EXPECT_DOUBLE_EQ(adv[1], 0.0);
}

TEST(Gae, AllZeroes) {
    auto adv = gae<double>({0, 0, 0}, {0, 0, 0}, 0.0, 0.95, 0.95);
    for (double a : adv) EXPECT_DOUBLE_EQ(a, 0.0);
}

TEST(Gae, LambdaOneMatchesBruteForceOracle) {
    // Independent oracle: discounted return (with bootstrap tail) minus value.
    Rng rng(5);
    for (int trial = 0; trial < 200; ++trial) {
        const int n = 10;
        std::vector<double> rewards, values;
        for (int i = 0; i < n; ++i) {
            rewards.push_back(rng.uniform(-2, 2));
            values.push_back(rng.uniform(-2, 2));
        }
        const double bootstrap = rng.uniform(-2, 2);
        const double gamma = rng.uniform(0.8, 1.0);
        auto adv = gae<double>(rewards, values, bootstrap, gamma, 1.0);
        for (int t = 0; t < n; ++t) {
            double g = 0, d = 1;
            for (int k = t; k < n; ++k) {
                g += d * rewards[static_cast<size_t>(k)];
                d *= gamma;
            }
            g += d * bootstrap;
            EXPECT_LT(std::abs(adv[static_cast<size_t>(t)] - (g - values[static_cast<size_t>(t)])), 1e-10);
        }
    }
}

TEST(EvalPolicy, TemperatureHalfClosedForm) {
    auto p = eval_policy({2.0, 0.0}, 0.5);
    const double e4 = std::exp(4.0);
    EXPECT_NEAR(p[0], e4 / (e4 + 1.0), 1e-9);
    EXPECT_NEAR(p[1], 1.0 / (e4 + 1.0), 1e-9);
    EXPECT_NEAR(p[0], 0.9820, 5e-5);
}

TEST(EvalPolicy, TemperatureOneIsPlainSoftmax) {
    auto p = eval_policy({1.0, 2.0, 3.0}, 1.0);
    const double z = std::exp(1.0) + std::exp(2.0) + std::exp(3.0);
    EXPECT_NEAR(p[0], std::exp(1.0) / z, 1e-12);
    EXPECT_NEAR(p[2], std::exp(3.0) / z, 1e-12);
}

TEST(EvalPolicy, TemperatureZeroArgmaxWithLowestIndexTieBreak) {
    auto p = eval_policy({3.0, 3.0}, 0.0);
    EXPECT_DOUBLE_EQ(p[0], 1.0);
    EXPECT_DOUBLE_EQ(p[1], 0.0);
}

TEST(EvalPolicy, ConvergesToArgmaxAsTemperatureVanishes) {
    auto p = eval_policy({1.0, 0.2, -3.0}, 1e-6);
    EXPECT_NEAR(p[0], 1.0, 1e-6);
    EXPECT_NEAR(p[1], 0.0, 1e-6);
    EXPECT_NEAR(p[2], 0.0, 1e-6);
}

TEST(AdvantageNormalization, PreservesOrdering) {
    // Affine invariance: per-batch normalization never reorders samples.
    Rng rng(11);
    for (int trial = 0; trial < 50; ++trial) {
        std::vector<float> adv;
        for (int i = 0; i < 32; ++i) adv.push_back(static_cast<float>(rng.uniform(-5, 5)));
        double mean = 0;
        for (float a : adv) mean += a;
        mean /= adv.size();
        double var = 0;
        for (float a : adv) var += (a - mean) * (a - mean);
        var /= adv.size();
        const double inv = 1.0 / (std::sqrt(var) + 1e-8);
        for (size_t i = 0; i + 1 < adv.size(); ++i)
            for (size_t j = i + 1; j < adv.size(); ++j) {
                const double ni = (adv[i] - mean) * inv, nj = (adv[j] - mean) * inv;
                EXPECT_EQ(adv[i] < adv[j], ni < nj);
            }
    }
}

namespace {

PPOBatch constant_input_batch(PolicyNet& net, int n, const std::vector<float>& advantages,
                              const std::vector<float>& old_logp_shift, Rng& rng) {
    PPOBatch b;
    std::vector<ObservationStack> stacks(static_cast<size_t>(n), constant_stack(net.frame_h(), net.frame_w(), 60));
    auto [logits, values] = net.forward_batch(stacks);
    for (int i = 0; i < n; ++i) {
        std::vector<double> row(static_cast<size_t>(net.n_actions()));
        for (int a = 0; a < net.n_actions(); ++a) row[static_cast<size_t>(a)] = logits[i * net.n_actions() + a];
        auto probs = eval_policy(row, 1.0);
        const int act = static_cast<int>(rng.below(net.n_actions()));
        b.stacks.push_back(stacks[static_cast<size_t>(i)]);
        b.actions.push_back(act);
        b.old_log_probs.push_back(static_cast<float>(std::log(probs[static_cast<size_t>(act)])) +
                                  old_logp_shift[static_cast<size_t>(i)]);
        b.advantages.push_back(advantages[static_cast<size_t>(i)]);
        b.returns.push_back(values[i]);
    }
    return b;
}

}  // namespace

TEST(PpoUpdate, ZeroAdvantagesLeavePolicyHeadUntouched) {
    PolicyNet net(8, 8, 2, 3);
    Adam<float> opt(1e-3);
    opt.init(net.params());
    Rng rng(4);
    PPOBatch b = constant_input_batch(net, 16, std::vector<float>(16, 0.0f), std::vector<float>(16, 0.0f), rng);
    PPOConfig cfg;
    cfg.entropy_coef = 0.0f;  // isolate: only the value loss may move parameters
    cfg.epochs_per_batch = 1;
    cfg.minibatch_size = 16;
    auto policy_w = net.params().at("head/policy/w").v;
    auto value_w = net.params().at("head/value/w").v;
    ppo_update(net, opt, b, cfg, rng);
    EXPECT_EQ(net.params().at("head/policy/w").v, policy_w);
    EXPECT_EQ(net.params().at("head/value/w").v, value_w);  // returns == values, so value loss is 0 too
}

TEST(PpoUpdate, IdentityRatioGivesMeanAdvantageSurrogate) {
    PolicyNet net(8, 8, 2, 3);
    Adam<float> opt(1e-3);
    opt.init(net.params());
    Rng rng(4);
    std::vector<float> adv = {1.0f, -1.0f, 2.0f, -2.0f};
    PPOBatch b = constant_input_batch(net, 4, adv, std::vector<float>(4, 0.0f), rng);
    PPOConfig cfg;
    cfg.epochs_per_batch = 1;
    cfg.minibatch_size = 4;
    PPOStats stats = ppo_update(net, opt, b, cfg, rng);
    // ratio == 1 for every sample, so the surrogate is the mean normalized
    // advantage, which normalization makes 0.
    EXPECT_NEAR(stats.policy_loss, 0.0, 2e-6);
    EXPECT_NEAR(stats.clip_fraction, 0.0, 1e-12);
    EXPECT_NEAR(stats.approx_kl, 0.0, 2e-6);
}

TEST(PpoUpdate, UnfavorablyClippedSamplesContributeNoGradient) {
    PolicyNet net(8, 8, 2, 3);
    Adam<float> opt(1e-3);
    opt.init(net.params());
    Rng rng(4);
    // Two samples, advantages +a and -a. Shift old log-probs so the ratios
    // land outside the clip range on the unfavorable side for both:
    // positive advantage with ratio >> 1+eps, negative with ratio << 1-eps.
    std::vector<float> adv = {3.0f, -3.0f};
    std::vector<float> shift = {-1.0f, 1.0f};  // ratio = exp(new-old) = e^{+1}, e^{-1}
    PPOBatch b = constant_input_batch(net, 2, adv, shift, rng);
    PPOConfig cfg;
    cfg.entropy_coef = 0.0f;
    cfg.value_coef = 0.0f;
    cfg.epochs_per_batch = 1;
    cfg.minibatch_size = 2;
    std::vector<std::vector<float>> before;
    for (size_t i = 0; i < net.params().count(); ++i) before.push_back(net.params().tensor(i).v);
    PPOStats stats = ppo_update(net, opt, b, cfg, rng);
    EXPECT_NEAR(stats.clip_fraction, 1.0, 1e-12);
    for (size_t i = 0; i < net.params().count(); ++i)
        EXPECT_EQ(net.params().tensor(i).v, before[i]) << net.params().name(i);
}

TEST(PpoUpdate, SolvesTwoArmedBandit) {
    // Arm 0 pays +1, arm 1 pays 0; single-step episodes on a constant screen.
    PolicyNet net(8, 8, 2, 12);
    Adam<float> opt(2.5e-4);
    opt.init(net.params());
    PPOConfig cfg;
    cfg.gamma = 0.95f;
    cfg.epochs_per_batch = 3;
    cfg.minibatch_size = 32;
    Rng rng(9);
    ObservationStack obs = constant_stack(8, 8, 60);
    for (int update = 0; update < 200; ++update) {
        std::vector<ObservationStack> stacks(32, obs);
        auto [logits, values] = net.forward_batch(stacks);
        PPOBatch b;
        for (int i = 0; i < 32; ++i) {
            std::vector<double> row = {logits[i * 2], logits[i * 2 + 1]};
            auto probs = eval_policy(row, 1.0);
            const double u = rng.uniform();
            const int act = u < probs[0] ? 0 : 1;
            const float reward = act == 0 ? 1.0f : 0.0f;
            b.stacks.push_back(obs);
            b.actions.push_back(act);
            b.old_log_probs.push_back(static_cast<float>(std::log(probs[static_cast<size_t>(act)])));
            b.advantages.push_back(reward - values[i]);
            b.returns.push_back(reward);
        }
        ppo_update(net, opt, b, cfg, rng);
    }
    auto [logits, values] = net.forward_batch({obs});
    auto probs = eval_policy({logits[0], logits[1]}, 1.0);
    EXPECT_GT(probs[0], 0.95);
}
