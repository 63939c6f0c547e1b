#pragma once

#include <numeric>
#include <vector>

#include "simple/adam.hpp"
#include "simple/layers.hpp"
#include "simple/sim_env.hpp"

namespace simple {

struct PPOConfig {
    float gamma = 0.95f;
    float gae_lambda = 0.95f;
    float clip_epsilon = 0.2f;
    float entropy_coef = 0.01f;
    float value_coef = 0.5f;
    int epochs_per_batch = 3;
    int minibatch_size = 200;
    float learning_rate = 2.5e-4f;

    void validate() const {
        if (gamma <= 0 || gamma > 1 || gae_lambda < 0 || gae_lambda > 1)
            throw std::invalid_argument("gamma and gae_lambda must be in (0,1]");
        if (clip_epsilon <= 0) throw std::invalid_argument("clip_epsilon must be positive");
        if (epochs_per_batch < 1 || minibatch_size < 1) throw std::invalid_argument("bad PPO batch settings");
    }
};

/// Shared convolutional torso with a policy-logit head and a scalar value
/// head.
class PolicyNet {
public:
    using T = float;

    PolicyNet(int frame_h, int frame_w, int n_actions, uint64_t seed) : H_(frame_h), W_(frame_w), A_(n_actions) {
        Rng rng(seed);
        add_conv(rng, "torso/conv1", 4, 12, 16);
        add_conv(rng, "torso/conv2", 4, 16, 32);
        const int flat = (H_ / 4) * (W_ / 4) * 32;
        add_dense(rng, "torso/fc", flat, 128);
        add_dense(rng, "head/policy", 128, A_);
        add_dense(rng, "head/value", 128, 1);
    }

    int n_actions() const { return A_; }
    int frame_h() const { return H_; }
    int frame_w() const { return W_; }
    ParamStore<T>& params() { return params_; }
    const ParamStore<T>& params() const { return params_; }

    struct Heads {
        Var<T> logits;  // [N, A]
        Var<T> value;   // [N, 1]
    };

    Heads forward_graph(Tape<T>& t, Var<T> x) const {
        Var<T> h = relu(t, conv2d(t, x, p(t, "torso/conv1/w"), p(t, "torso/conv1/b"), 2, 2));
        h = relu(t, conv2d(t, h, p(t, "torso/conv2/w"), p(t, "torso/conv2/b"), 2, 2));
        const auto& hs = t.val(h).shape;
        h = reshape(t, h, {hs[0], hs[1] * hs[2] * hs[3]});
        h = relu(t, add_bias(t, matmul(t, h, p(t, "torso/fc/w")), p(t, "torso/fc/b")));
        Heads out;
        out.logits = add_bias(t, matmul(t, h, p(t, "head/policy/w")), p(t, "head/policy/b"));
        out.value = add_bias(t, matmul(t, h, p(t, "head/value/w")), p(t, "head/value/b"));
        return out;
    }

    Tensor<T> stacks_to_input(const std::vector<ObservationStack>& stacks) const {
        const int N = static_cast<int>(stacks.size());
        Tensor<T> x({N, H_, W_, 12});
        for (int n = 0; n < N; ++n)
            for (int f = 0; f < 4; ++f) {
                const Frame& fr = stacks[static_cast<size_t>(n)][static_cast<size_t>(f)];
                for (int64_t p = 0; p < int64_t(H_) * W_; ++p)
                    for (int c = 0; c < 3; ++c)
                        x[((int64_t(n) * H_ * W_ + p) * 12) + f * 3 + c] =
                            T(fr.rgb[static_cast<size_t>(p * 3 + c)]) / T(255);
            }
        return x;
    }

    /// Deterministic forward: (logits, value) per stack.
    std::pair<Tensor<T>, Tensor<T>> forward_batch(const std::vector<ObservationStack>& stacks) const {
        Tape<T> t;
        auto heads = forward_graph(t, t.leaf(stacks_to_input(stacks)));
        return {t.val(heads.logits), t.val(heads.value).reshaped({static_cast<int>(stacks.size())})};
    }

    std::vector<Tensor<T>> collect_grads(const Tape<T>& t) const {
        std::vector<Tensor<T>> grads(params_.count());
        if (cache_.tape_uid != t.uid()) return grads;
        for (size_t i = 0; i < params_.count(); ++i) {
            auto it = cache_.vars.find(params_.name(i));
            if (it != cache_.vars.end()) grads[i] = t.grad(it->second);
        }
        return grads;
    }

private:
    Var<T> p(Tape<T>& t, const std::string& name) const {
        if (cache_.tape_uid != t.uid()) {
            cache_.tape_uid = t.uid();
            cache_.vars.clear();
        }
        auto it = cache_.vars.find(name);
        if (it != cache_.vars.end()) return it->second;
        Var<T> v = t.leaf(params_.at(name), true);
        cache_.vars.emplace(name, v);
        return v;
    }

    void add_conv(Rng& rng, const std::string& name, int k, int ci, int co) {
        params_.add(name + "/w", uniform_init<T>({k, k, ci, co}, int64_t(k) * k * ci, rng));
        params_.add(name + "/b", Tensor<T>({co}));
    }

    void add_dense(Rng& rng, const std::string& name, int ci, int co) {
        params_.add(name + "/w", uniform_init<T>({ci, co}, ci, rng));
        params_.add(name + "/b", Tensor<T>({co}));
    }

    struct Cache {
        uint64_t tape_uid = 0;
        std::unordered_map<std::string, Var<T>> vars;
    };

    int H_, W_, A_;
    ParamStore<T> params_;
    mutable Cache cache_;
};

// ---------------------------------------------------------------------------
// Policy evaluation distribution (softmax of logits / T)
// ---------------------------------------------------------------------------

/// T = 0 is defined as the argmax one-hot (ties break to the lowest index).
inline std::vector<double> eval_policy(const std::vector<double>& logits, double temperature) {
    if (temperature < 0) throw std::invalid_argument("temperature must be >= 0");
    std::vector<double> p(logits.size(), 0.0);
    if (temperature == 0.0) {
        size_t best = 0;
        for (size_t i = 1; i < logits.size(); ++i)
            if (logits[i] > logits[best]) best = i;
        p[best] = 1.0;
        return p;
    }
    double m = logits[0] / temperature;
    for (size_t i = 0; i < logits.size(); ++i) m = std::max(m, logits[i] / temperature);
    double z = 0;
    for (size_t i = 0; i < logits.size(); ++i) {
        p[i] = std::exp(logits[i] / temperature - m);
        z += p[i];
    }
    for (auto& v : p) v /= z;
    return p;
}

/// Batch actor sampling from softmax(logits / T); records log-probs (of the
/// sampling distribution) and value estimates.
inline BatchActor make_policy_actor(const PolicyNet& net, double temperature = 1.0) {
    return [&net, temperature](const std::vector<ObservationStack>& stacks,
                               std::vector<Rng*>& rngs) -> ActorOut {
        auto [logits, values] = net.forward_batch(stacks);
        const int N = static_cast<int>(stacks.size());
        const int A = net.n_actions();
        ActorOut out;
        for (int n = 0; n < N; ++n) {
            std::vector<double> row(static_cast<size_t>(A));
            for (int a = 0; a < A; ++a) row[static_cast<size_t>(a)] = logits[n * A + a];
            std::vector<double> probs = eval_policy(row, temperature);
            const double u = rngs[static_cast<size_t>(n)]->uniform();
            double acc = 0;
            int pick = A - 1;
            for (int a = 0; a < A; ++a) {
                acc += probs[static_cast<size_t>(a)];
                if (u < acc) {
                    pick = a;
                    break;
                }
            }
            out.actions.push_back(pick);
            out.log_probs.push_back(static_cast<float>(std::log(std::max(probs[static_cast<size_t>(pick)], 1e-12))));
            out.values.push_back(values[n]);
        }
        return out;
    };
}

inline BatchCritic make_policy_critic(const PolicyNet& net) {
    return [&net](const std::vector<ObservationStack>& stacks) -> std::vector<float> {
        auto [logits, values] = net.forward_batch(stacks);
        return std::vector<float>(values.v.begin(), values.v.end());
    };
}

// ---------------------------------------------------------------------------
// Generalized advantage estimation
// ---------------------------------------------------------------------------

/// GAE over one trajectory segment. With lambda = 1 this reduces to
/// discounted returns minus values. Precision follows the value type
/// (training runs float, oracle comparisons run double).
template <typename T>
std::vector<T> gae(const std::vector<T>& rewards, const std::vector<T>& values, T bootstrap_value,
                   T gamma, T lambda) {
    if (rewards.size() != values.size()) throw std::invalid_argument("gae: misaligned arrays");
    if (lambda < T(0) || lambda > T(1)) throw std::invalid_argument("gae: lambda must be in [0,1]");
    const int n = static_cast<int>(rewards.size());
    std::vector<T> adv(static_cast<size_t>(n), T(0));
    T next_adv = T(0);
    T next_value = bootstrap_value;
    for (int t = n - 1; t >= 0; --t) {
        const T delta = rewards[static_cast<size_t>(t)] + gamma * next_value - values[static_cast<size_t>(t)];
        next_adv = delta + gamma * lambda * next_adv;
        adv[static_cast<size_t>(t)] = next_adv;
        next_value = values[static_cast<size_t>(t)];
    }
    return adv;
}

// ---------------------------------------------------------------------------
// PPO update
// ---------------------------------------------------------------------------

struct PPOBatch {
    std::vector<ObservationStack> stacks;
    std::vector<int> actions;
    std::vector<float> old_log_probs;
    std::vector<float> advantages;  // raw; normalized inside ppo_update
    std::vector<float> returns;

    size_t size() const { return stacks.size(); }
};

/// Converts a rollout to PPO training data. Done flags cut the advantage
/// recursion; bootstrapped last-step rewards make the tail value 0.
inline PPOBatch to_ppo_batch(const RolloutBatch& rb, float gae_lambda) {
    PPOBatch b;
    b.stacks = rb.stacks;
    b.actions = rb.actions;
    b.old_log_probs = rb.log_probs;
    b.advantages.resize(static_cast<size_t>(rb.size()));
    b.returns.resize(static_cast<size_t>(rb.size()));
    for (int a = 0; a < rb.n_agents; ++a) {
        int seg_start = 0;
        for (int s = 0; s < rb.steps; ++s) {
            const bool end = rb.dones[static_cast<size_t>(rb.at(a, s))] || s == rb.steps - 1;
            if (!end) continue;
            std::vector<float> rw, vl;
            for (int k = seg_start; k <= s; ++k) {
                rw.push_back(rb.rewards[static_cast<size_t>(rb.at(a, k))]);
                vl.push_back(rb.values[static_cast<size_t>(rb.at(a, k))]);
            }
            std::vector<float> adv = gae<float>(rw, vl, 0.0f, rb.gamma, gae_lambda);
            for (int k = seg_start; k <= s; ++k) {
                const int64_t i = rb.at(a, k);
                b.advantages[static_cast<size_t>(i)] = adv[static_cast<size_t>(k - seg_start)];
                b.returns[static_cast<size_t>(i)] =
                    adv[static_cast<size_t>(k - seg_start)] + rb.values[static_cast<size_t>(i)];
            }
            seg_start = s + 1;
        }
    }
    return b;
}

struct PPOStats {
    double policy_loss = 0, value_loss = 0, entropy = 0;
    double clip_fraction = 0, approx_kl = 0;
    int updates = 0;
};

/// Clipped-surrogate PPO step over shuffled minibatches. Advantages are
/// normalized across the whole batch first (mean 0, std 1, eps-guarded).
inline PPOStats ppo_update(PolicyNet& net, Adam<float>& opt, const PPOBatch& batch, const PPOConfig& cfg,
                           Rng& rng) {
    cfg.validate();
    if (batch.size() == 0) throw std::invalid_argument("ppo_update: empty batch");
    const int n = static_cast<int>(batch.size());

    std::vector<float> adv = batch.advantages;
    double mean = 0;
    for (float a : adv) mean += a;
    mean /= n;
    double var = 0;
    for (float a : adv) var += (a - mean) * (a - mean);
    var /= n;
    const double inv_std = 1.0 / (std::sqrt(var) + 1e-8);
    for (auto& a : adv) a = static_cast<float>((a - mean) * inv_std);

    PPOStats stats;
    std::vector<int> order(static_cast<size_t>(n));
    std::iota(order.begin(), order.end(), 0);
    for (int epoch = 0; epoch < cfg.epochs_per_batch; ++epoch) {
        for (int i = n - 1; i > 0; --i) std::swap(order[static_cast<size_t>(i)], order[static_cast<size_t>(rng.below(i + 1))]);
        for (int start = 0; start < n; start += cfg.minibatch_size) {
            const int count = std::min(cfg.minibatch_size, n - start);
            std::vector<ObservationStack> mb_stacks;
            Tensor<int> mb_actions({count});
            Tensor<float> mb_old({count});
            Tensor<float> mb_adv({count});
            Tensor<float> mb_ret({count, 1});
            for (int k = 0; k < count; ++k) {
                const int idx = order[static_cast<size_t>(start + k)];
                mb_stacks.push_back(batch.stacks[static_cast<size_t>(idx)]);
                mb_actions[k] = batch.actions[static_cast<size_t>(idx)];
                mb_old[k] = batch.old_log_probs[static_cast<size_t>(idx)];
                mb_adv[k] = adv[static_cast<size_t>(idx)];
                mb_ret[k] = batch.returns[static_cast<size_t>(idx)];
            }

            Tape<float> t;
            auto heads = net.forward_graph(t, t.leaf(net.stacks_to_input(mb_stacks)));
            Var<float> logp_all = log_softmax_lastdim(t, heads.logits);
            Var<float> logp = gather_lastdim(t, logp_all, mb_actions);
            Var<float> ratio = exp_op(t, sub(t, logp, t.leaf(mb_old)));
            Var<float> adv_v = t.leaf(mb_adv);
            Var<float> surr1 = mul(t, ratio, adv_v);
            Var<float> surr2 = mul(t, clamp_const(t, ratio, 1.0f - cfg.clip_epsilon, 1.0f + cfg.clip_epsilon), adv_v);
            Var<float> policy_loss = scale(t, mean_all(t, min_pair(t, surr1, surr2)), -1.0f);
            Var<float> vdiff = sub(t, heads.value, t.leaf(mb_ret));
            Var<float> value_loss = mean_all(t, mul(t, vdiff, vdiff));
            // Entropy of the current policy, averaged over the minibatch.
            Var<float> ent =
                scale(t, mean_all(t, sum_lastdim(t, mul(t, exp_op(t, logp_all), logp_all))), -1.0f);
            Var<float> total = add(t, policy_loss, scale(t, value_loss, cfg.value_coef));
            total = sub(t, total, scale(t, ent, cfg.entropy_coef));
            t.backward(total);
            opt.apply(net.params(), net.collect_grads(t));

            const Tensor<float>& rv = t.val(ratio);
            double clip_frac = 0, kl = 0;
            for (int k = 0; k < count; ++k) {
                if (std::abs(rv[k] - 1.0f) > cfg.clip_epsilon) clip_frac += 1;
                kl += mb_old[k] - t.val(logp)[k];
            }
            stats.policy_loss += t.val(policy_loss)[0];
            stats.value_loss += t.val(value_loss)[0];
            stats.entropy += t.val(ent)[0];
            stats.clip_fraction += clip_frac / count;
            stats.approx_kl += kl / count;
            ++stats.updates;
        }
    }
    const double u = std::max(stats.updates, 1);
    stats.policy_loss /= u;
    stats.value_loss /= u;
    stats.entropy /= u;
    stats.clip_fraction /= u;
    stats.approx_kl /= u;
    return stats;
}

}  // namespace simple
