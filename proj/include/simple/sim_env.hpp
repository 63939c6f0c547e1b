#pragma once

#include <functional>
#include <vector>

#include "simple/model_train.hpp"
#include "simple/world_model.hpp"

namespace simple {

// ---------------------------------------------------------------------------
// The learned model exposed as an environment (env'): bounded rollouts
// re-grounded in real data, no terminal signals of its own.
// ---------------------------------------------------------------------------

struct SimState {
    ObservationStack memory;
    int steps_since_restart = 0;
    int rollout_limit = 50;  // N
};

/// Positions eligible as rollout starts: a full 4-frame real history exists
/// (the first 3 steps of each episode are excluded) and a real action was
/// taken from the state.
inline int64_t count_eligible_starts(const ReplayBuffer& buf) {
    int64_t n = 0;
    for (const auto& e : buf.episodes()) n += std::max(0, e.steps() - 3);
    return n;
}

inline SimState random_start(const ReplayBuffer& buf, Rng& rng, int rollout_limit = 50) {
    const int64_t total = count_eligible_starts(buf);
    if (total <= 0) throw std::invalid_argument("replay buffer has no position with a full 4-frame history");
    int64_t flat = rng.below(total);
    for (size_t e = 0; e < buf.episodes().size(); ++e) {
        const int64_t n = std::max(0, buf.episodes()[e].steps() - 3);
        if (flat < n) {
            SimState s;
            s.memory = buf.stack_at(static_cast<int>(e), static_cast<int>(flat) + 3);
            s.rollout_limit = rollout_limit;
            return s;
        }
        flat -= n;
    }
    throw std::logic_error("random_start: unreachable");
}

/// Ablation mode: always the first full stack of episode 0.
inline SimState no_random_start_mode(const ReplayBuffer& buf, int rollout_limit = 1000) {
    if (buf.episodes().empty() || buf.episodes()[0].steps() < 3)
        throw std::invalid_argument("buffer lacks an episode start with a full stack");
    SimState s;
    s.memory = buf.stack_at(0, 3);
    s.rollout_limit = rollout_limit;
    return s;
}

struct SimStepOut {
    ObservationStack stack;
    int reward = 0;
    bool rollout_done = false;
};

/// One synchronous model step for a batch of states. Latent bits are
/// resampled per agent from the bit predictor at every step. Per-row GEMM
/// determinism makes this bit-identical to stepping agents one at a time.
inline std::vector<SimStepOut> sim_step_batch(const WorldModel& m, std::vector<SimState>& states,
                                              const std::vector<int>& actions, std::vector<Rng*>& rngs) {
    const int N = static_cast<int>(states.size());
    if (static_cast<int>(actions.size()) != N || static_cast<int>(rngs.size()) != N)
        throw std::invalid_argument("sim_step_batch: misaligned inputs");
    for (const auto& s : states)
        if (s.steps_since_restart >= s.rollout_limit)
            throw std::logic_error("simulated rollout exceeded its limit; restart from real data");

    Tape<float> t;
    std::vector<const ObservationStack*> sp;
    Tensor<int> act({N});
    for (int i = 0; i < N; ++i) {
        sp.push_back(&states[static_cast<size_t>(i)].memory);
        act[i] = actions[static_cast<size_t>(i)];
    }
    Var<float> x = t.leaf(m.stacks_to_input(sp));
    Var<float> bits{};
    if (m.config().stochastic()) {
        Rng no_drop(0);
        Var<float> pooled = m.encode_pooled(t, x, act, no_drop);
        auto sampled = m.sample_bits(t, pooled, rngs);
        std::vector<const LatentBits*> bp;
        for (const auto& s : sampled) bp.push_back(&s);
        bits = t.leaf(m.bits_to_tensor(bp));
    }
    Rng no_drop(0);
    auto out = m.decode_graph(t, x, act, bits, false, no_drop, WorldModel::DecodeMode::features_only);
    std::vector<Frame> frames = m.decode_frames_fused(t.val(out.features));
    const Tensor<float>& rl = t.val(out.reward_logits);

    std::vector<SimStepOut> res(static_cast<size_t>(N));
    for (int i = 0; i < N; ++i) {
        SimState& s = states[static_cast<size_t>(i)];
        for (int j = 0; j + 1 < 4; ++j) s.memory[static_cast<size_t>(j)] = s.memory[static_cast<size_t>(j) + 1];
        s.memory[3] = std::move(frames[static_cast<size_t>(i)]);
        ++s.steps_since_restart;
        res[static_cast<size_t>(i)].stack = s.memory;
        res[static_cast<size_t>(i)].reward = WorldModel::decode_reward(rl, i);
        res[static_cast<size_t>(i)].rollout_done = s.steps_since_restart >= s.rollout_limit;
    }
    return res;
}

inline SimStepOut sim_step(const WorldModel& m, SimState& state, int action, Rng& rng) {
    std::vector<SimState> states = {state};
    std::vector<int> actions = {action};
    std::vector<Rng*> rngs = {&rng};
    auto out = sim_step_batch(m, states, actions, rngs);
    state = states[0];
    return out[0];
}

// ---------------------------------------------------------------------------
// Rollout collection
// ---------------------------------------------------------------------------

/// Per-step actor decision for a batch of observations.
struct ActorOut {
    std::vector<int> actions;
    std::vector<float> log_probs;
    std::vector<float> values;
};

using BatchActor = std::function<ActorOut(const std::vector<ObservationStack>&, std::vector<Rng*>&)>;
using BatchCritic = std::function<std::vector<float>(const std::vector<ObservationStack>&)>;

/// Flat [agent][step] arrays; the last step of each agent carries the
/// value-bootstrapped reward and a done flag.
struct RolloutBatch {
    int n_agents = 0, steps = 0;
    std::vector<ObservationStack> stacks;
    std::vector<int> actions;
    std::vector<float> rewards;       // bootstrapped on the last step
    std::vector<int> raw_rewards;     // model rewards in {-1,0,1}
    std::vector<float> values;
    std::vector<float> log_probs;
    std::vector<uint8_t> dones;
    std::vector<float> bootstrap_values;  // V(s_{N+1}) per agent
    float gamma = 0.95f;

    int64_t size() const { return int64_t(n_agents) * steps; }
    int64_t at(int agent, int step) const { return int64_t(agent) * steps + step; }
};

/// N policy steps in env' for each of n_agents, starting from random real
/// states (or the episode-initial state in the no-random-starts ablation).
/// The final reward of each agent is augmented with gamma * V(s_{N+1}).
inline RolloutBatch rollout_with_streams(const WorldModel& m, const BatchActor& actor,
                                         const BatchCritic& critic, const ReplayBuffer& buf,
                                         int n_agents, int N, float gamma, std::vector<Rng>& agent_rngs,
                                         bool random_starts = true) {
    if (n_agents < 1 || N < 1) throw std::invalid_argument("rollout needs n_agents >= 1 and N >= 1");
    if (static_cast<int>(agent_rngs.size()) != n_agents)
        throw std::invalid_argument("rollout needs one rng stream per agent");
    RolloutBatch rb;
    rb.n_agents = n_agents;
    rb.steps = N;
    rb.gamma = gamma;
    rb.stacks.resize(static_cast<size_t>(rb.size()));
    rb.actions.resize(static_cast<size_t>(rb.size()));
    rb.rewards.resize(static_cast<size_t>(rb.size()));
    rb.raw_rewards.resize(static_cast<size_t>(rb.size()));
    rb.values.resize(static_cast<size_t>(rb.size()));
    rb.log_probs.resize(static_cast<size_t>(rb.size()));
    rb.dones.assign(static_cast<size_t>(rb.size()), 0);
    rb.bootstrap_values.resize(static_cast<size_t>(n_agents));

    std::vector<SimState> states;
    std::vector<Rng*> rngs;
    for (int a = 0; a < n_agents; ++a) {
        states.push_back(random_starts ? random_start(buf, agent_rngs[static_cast<size_t>(a)], N)
                                       : no_random_start_mode(buf, N));
        rngs.push_back(&agent_rngs[static_cast<size_t>(a)]);
    }

    std::vector<ObservationStack> obs;
    for (const auto& s : states) obs.push_back(s.memory);
    for (int step = 0; step < N; ++step) {
        ActorOut act = actor(obs, rngs);
        auto outs = sim_step_batch(m, states, act.actions, rngs);
        for (int a = 0; a < n_agents; ++a) {
            const int64_t i = rb.at(a, step);
            rb.stacks[static_cast<size_t>(i)] = obs[static_cast<size_t>(a)];
            rb.actions[static_cast<size_t>(i)] = act.actions[static_cast<size_t>(a)];
            rb.raw_rewards[static_cast<size_t>(i)] = outs[static_cast<size_t>(a)].reward;
            rb.rewards[static_cast<size_t>(i)] = static_cast<float>(outs[static_cast<size_t>(a)].reward);
            rb.values[static_cast<size_t>(i)] = act.values[static_cast<size_t>(a)];
            rb.log_probs[static_cast<size_t>(i)] = act.log_probs[static_cast<size_t>(a)];
            obs[static_cast<size_t>(a)] = outs[static_cast<size_t>(a)].stack;
        }
    }
    std::vector<float> tail_values = critic(obs);  // V(s_{N+1}) on the post-rollout stacks
    for (int a = 0; a < n_agents; ++a) {
        const int64_t last = rb.at(a, N - 1);
        rb.bootstrap_values[static_cast<size_t>(a)] = tail_values[static_cast<size_t>(a)];
        rb.rewards[static_cast<size_t>(last)] += gamma * tail_values[static_cast<size_t>(a)];
        rb.dones[static_cast<size_t>(last)] = 1;
    }
    return rb;
}

inline RolloutBatch rollout(const WorldModel& m, const BatchActor& actor, const BatchCritic& critic,
                            const ReplayBuffer& buf, int n_agents, int N, float gamma, Rng& rng,
                            bool random_starts = true) {
    std::vector<Rng> streams;
    for (int a = 0; a < n_agents; ++a) streams.push_back(rng.split(static_cast<uint64_t>(a)));
    return rollout_with_streams(m, actor, critic, buf, n_agents, N, gamma, streams, random_starts);
}

}  // namespace simple
