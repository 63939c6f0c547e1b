#pragma once

#include <memory>
#include <utility>

#include "simple/world_model.hpp"

namespace simple {

// ---------------------------------------------------------------------------
// Batch assembly
// ---------------------------------------------------------------------------

inline std::pair<int, int> locate_transition(const ReplayBuffer& buf, int64_t flat) {
    for (size_t e = 0; e < buf.episodes().size(); ++e) {
        const int64_t steps = buf.episodes()[e].steps();
        if (flat < steps) return {static_cast<int>(e), static_cast<int>(flat)};
        flat -= steps;
    }
    throw std::out_of_range("transition index beyond buffer");
}

inline TrainBatch sample_batch(const ReplayBuffer& buf, int batch_size, Rng& rng) {
    const int64_t total = buf.transition_count();
    if (total == 0) throw std::invalid_argument("cannot sample from an empty replay buffer");
    TrainBatch b;
    const int n = static_cast<int>(std::min<int64_t>(batch_size, total));
    for (int i = 0; i < n; ++i) {
        auto [e, t] = locate_transition(buf, rng.below(total));
        const Episode& ep = buf.episodes()[static_cast<size_t>(e)];
        b.stacks.push_back(buf.stack_at(e, t));
        b.actions.push_back(ep.actions[static_cast<size_t>(t)]);
        b.target_frames.push_back(ep.frames[static_cast<size_t>(t) + 1]);
        b.target_rewards.push_back(ep.rewards[static_cast<size_t>(t)]);
        std::array<TrainBatch::Predecessor, 4> pred;
        for (int j = 0; j < 4; ++j) {
            const int prev = t - 4 + j;  // predicts frame t-3+j from the stack ending at prev
            if (prev >= 0) {
                pred[static_cast<size_t>(j)].exists = true;
                pred[static_cast<size_t>(j)].stack = buf.stack_at(e, prev);
                pred[static_cast<size_t>(j)].action = ep.actions[static_cast<size_t>(prev)];
            }
        }
        b.predecessors.push_back(pred);
    }
    return b;
}

// ---------------------------------------------------------------------------
// Loss graph
// ---------------------------------------------------------------------------

struct LossGraph {
    std::unique_ptr<Tape<float>> tape;
    Var<float> total;
    LossParts parts;
};

/// Builds the full training graph: posterior bits (stochastic variant),
/// decode, clipped pixel loss, reward cross-entropy, and the bit-predictor
/// cross-entropy against the same forward pass's pre-dropout posterior bits.
inline LossGraph model_loss_graph(const WorldModel& m, const TrainBatch& batch, Rng& rng, bool training) {
    if (batch.size() == 0) throw std::invalid_argument("empty batch");
    const auto& cfg = m.config();
    const int N = static_cast<int>(batch.size());

    auto g = LossGraph{std::make_unique<Tape<float>>(), {}, {}};
    Tape<float>& t = *g.tape;

    std::vector<const ObservationStack*> sp;
    std::vector<const Frame*> fp;
    Tensor<int> actions({N});
    Tensor<int> reward_classes({N});
    for (int i = 0; i < N; ++i) {
        sp.push_back(&batch.stacks[static_cast<size_t>(i)]);
        fp.push_back(&batch.target_frames[static_cast<size_t>(i)]);
        actions[i] = batch.actions[static_cast<size_t>(i)];
        const int r = batch.target_rewards[static_cast<size_t>(i)];
        if (r < -1 || r > 1) throw std::invalid_argument("target reward outside {-1,0,1}");
        reward_classes[i] = r + 1;
    }

    Var<float> x = t.leaf(m.stacks_to_input(sp));
    WorldModel::PosteriorOut post;
    Var<float> inject{};
    if (cfg.stochastic()) {
        post = m.posterior_graph(t, t.leaf(m.posterior_input(sp, fp)), actions, rng, training);
        inject = post.bits_dropped;
    }
    auto out = m.decode_graph(t, x, actions, inject, training, rng);

    Var<float> pixel;
    if (cfg.pixel_head == ModelConfig::PixelHead::softmax256) {
        Tensor<int> targets({N, m.frame_h(), m.frame_w(), 3});
        int64_t idx = 0;
        for (int i = 0; i < N; ++i)
            for (uint8_t v : batch.target_frames[static_cast<size_t>(i)].rgb) targets[idx++] = v;
        pixel = clipped_ce_loss(t, out.frame_logits, targets, cfg.loss_clip_ce, 256);
    } else {
        Tensor<float> targets({N, m.frame_h(), m.frame_w(), 3});
        int64_t idx = 0;
        for (int i = 0; i < N; ++i)
            for (uint8_t v : batch.target_frames[static_cast<size_t>(i)].rgb) targets[idx++] = float(v);
        pixel = clipped_l2_loss(t, out.frame_logits, t.leaf(std::move(targets)), cfg.loss_clip_l2);
    }
    Var<float> reward = mean_all(t, softmax_ce(t, out.reward_logits, reward_classes));
    Var<float> total = add(t, pixel, reward);

    g.parts.pixel = t.val(pixel)[0];
    g.parts.reward = t.val(reward)[0];
    if (cfg.stochastic()) {
        Tensor<int> chunk_targets = m.pack_chunks(t.val(post.bits));
        Var<float> chunk_logits = m.predictor_graph(t, out.pooled_state, chunk_targets);
        Var<float> latent = mean_all(t, softmax_ce(t, chunk_logits, chunk_targets));
        total = add(t, total, latent);
        g.parts.latent = t.val(latent)[0];
    }
    g.total = total;
    g.parts.total = t.val(total)[0];
    return g;
}

/// Value-level loss: total plus named parts.
inline LossParts model_loss(const WorldModel& m, const TrainBatch& batch, Rng& rng, bool training = true) {
    return model_loss_graph(m, batch, rng, training).parts;
}

// ---------------------------------------------------------------------------
// Scheduled sampling
// ---------------------------------------------------------------------------

/// Replaces each input frame of each stack, independently with probability
/// `prob`, by the model's own one-step prediction for that position (made
/// from real history). Targets are untouched.
inline TrainBatch scheduled_sampling_apply(const WorldModel& m, TrainBatch batch, double prob, Rng& rng) {
    if (prob < 0.0 || prob > 1.0) throw std::invalid_argument("mixing probability must be in [0,1]");
    if (prob == 0.0) return batch;
    std::vector<std::pair<int, int>> jobs;  // (sample, position)
    for (size_t i = 0; i < batch.size(); ++i)
        for (int j = 0; j < 4; ++j)
            if (batch.predecessors[i][static_cast<size_t>(j)].exists && rng.uniform() < prob)
                jobs.push_back({static_cast<int>(i), j});
    if (jobs.empty()) return batch;

    std::vector<const ObservationStack*> sp;
    Tensor<int> actions({static_cast<int>(jobs.size())});
    for (size_t k = 0; k < jobs.size(); ++k) {
        const auto& pre = batch.predecessors[static_cast<size_t>(jobs[k].first)][static_cast<size_t>(jobs[k].second)];
        sp.push_back(&pre.stack);
        actions[static_cast<int>(k)] = pre.action;
    }

    Tape<float> t;
    Var<float> x = t.leaf(m.stacks_to_input(sp));
    Var<float> bits{};
    if (m.config().stochastic()) {
        // Inference-path bits: scheduled sampling mimics how the model will
        // be driven inside the simulated environment.
        Var<float> pooled = m.encode_pooled(t, x, actions, rng);
        std::vector<Rng> row_rngs;
        row_rngs.reserve(jobs.size());
        for (size_t k = 0; k < jobs.size(); ++k) row_rngs.push_back(rng.split(k));
        std::vector<Rng*> rp;
        for (auto& r : row_rngs) rp.push_back(&r);
        auto sampled = m.sample_bits(t, pooled, rp);
        std::vector<const LatentBits*> bp;
        for (const auto& s : sampled) bp.push_back(&s);
        bits = t.leaf(m.bits_to_tensor(bp));
    }
    Rng no_drop(0);
    auto out = m.decode_graph(t, x, actions, bits, false, no_drop, WorldModel::DecodeMode::features_only);
    auto frames = m.decode_frames_fused(t.val(out.features));
    for (size_t k = 0; k < jobs.size(); ++k)
        batch.stacks[static_cast<size_t>(jobs[k].first)][static_cast<size_t>(jobs[k].second)] = frames[k];
    return batch;
}

// ---------------------------------------------------------------------------
// Training loop
// ---------------------------------------------------------------------------

struct TrainStepRecord {
    int64_t step = 0;  // global model step
    LossParts parts;
};

/// n_steps optimizer updates over uniformly sampled batches with scheduled
/// sampling wired to the first iteration's step budget via global_step.
inline std::vector<TrainStepRecord> train_world_model(WorldModel& m, Adam<float>& opt,
                                                      const ReplayBuffer& buffer, int64_t n_steps,
                                                      int64_t first_iter_steps, int64_t& global_step,
                                                      Rng& rng) {
    if (buffer.transition_count() == 0) throw std::invalid_argument("replay buffer is empty");
    std::vector<TrainStepRecord> trace;
    trace.reserve(static_cast<size_t>(n_steps));
    for (int64_t s = 0; s < n_steps; ++s) {
        TrainBatch batch = sample_batch(buffer, m.config().batch_size, rng);
        const double prob = mixing_probability(global_step, first_iter_steps);
        batch = scheduled_sampling_apply(m, std::move(batch), prob, rng);
        LossGraph g = model_loss_graph(m, batch, rng, true);
        g.tape->backward(g.total);
        opt.apply(m.params(), m.collect_grads(*g.tape));
        ++global_step;
        trace.push_back({global_step, g.parts});
    }
    return trace;
}

// ---------------------------------------------------------------------------
// Evaluation helpers
// ---------------------------------------------------------------------------

struct PixelEval {
    double accuracy = 0;  // per-pixel-channel argmax accuracy
    double ce = 0;        // mean unclipped per-pixel-channel cross-entropy
    double reward_accuracy = 0;
};

enum class BitSource { posterior, predictor };

/// One-step evaluation on explicit (episode, t) samples. For the stochastic
/// variant, bits come from the posterior (noise and dropout off) or from
/// seeded predictor sampling.
inline PixelEval eval_one_step(const WorldModel& m, const ReplayBuffer& buf,
                               const std::vector<std::pair<int, int>>& samples, Rng& rng,
                               BitSource source = BitSource::posterior) {
    if (samples.empty()) throw std::invalid_argument("no evaluation samples");
    PixelEval ev;
    int64_t pixels = 0, correct = 0, reward_hits = 0;
    double ce_sum = 0;
    const int chunk = 16;
    for (size_t base = 0; base < samples.size(); base += chunk) {
        const int N = static_cast<int>(std::min<size_t>(chunk, samples.size() - base));
        std::vector<ObservationStack> stacks(static_cast<size_t>(N));
        std::vector<const ObservationStack*> sp;
        std::vector<const Frame*> fp;
        Tensor<int> actions({N});
        std::vector<int> rewards(static_cast<size_t>(N));
        for (int i = 0; i < N; ++i) {
            auto [e, tt] = samples[base + static_cast<size_t>(i)];
            stacks[static_cast<size_t>(i)] = buf.stack_at(e, tt);
            sp.push_back(&stacks[static_cast<size_t>(i)]);
            fp.push_back(&buf.episodes()[static_cast<size_t>(e)].frames[static_cast<size_t>(tt) + 1]);
            actions[i] = buf.episodes()[static_cast<size_t>(e)].actions[static_cast<size_t>(tt)];
            rewards[static_cast<size_t>(i)] = buf.episodes()[static_cast<size_t>(e)].rewards[static_cast<size_t>(tt)];
        }
        Tape<float> t;
        Var<float> x = t.leaf(m.stacks_to_input(sp));
        Var<float> bits{};
        if (m.config().stochastic()) {
            if (source == BitSource::posterior) {
                auto post = m.posterior_graph(t, t.leaf(m.posterior_input(sp, fp)), actions, rng, false);
                bits = post.bits;
            } else {
                Var<float> pooled = m.encode_pooled(t, x, actions, rng);
                std::vector<Rng> row_rngs;
                for (int i = 0; i < N; ++i) row_rngs.push_back(rng.split(static_cast<uint64_t>(i)));
                std::vector<Rng*> rp;
                for (auto& r : row_rngs) rp.push_back(&r);
                auto sampled = m.sample_bits(t, pooled, rp);
                std::vector<const LatentBits*> bp;
                for (const auto& s : sampled) bp.push_back(&s);
                bits = t.leaf(m.bits_to_tensor(bp));
            }
        }
        Rng no_drop(0);
        auto out = m.decode_graph(t, x, actions, bits, false, no_drop);
        if (m.config().pixel_head != ModelConfig::PixelHead::softmax256)
            throw std::logic_error("eval_one_step expects the softmax pixel head");
        const Tensor<float>& logits = t.val(out.frame_logits);
        const int64_t per = int64_t(m.frame_h()) * m.frame_w() * 3;
        for (int i = 0; i < N; ++i) {
            const Frame& target = *fp[static_cast<size_t>(i)];
            for (int64_t pc = 0; pc < per; ++pc) {
                const float* row = logits.data() + (i * per + pc) * 256;
                int best = 0;
                float mx = row[0];
                for (int v = 1; v < 256; ++v) {
                    if (row[v] > mx) {
                        mx = row[v];
                        best = v;
                    }
                }
                double z = 0;
                for (int v = 0; v < 256; ++v) z += std::exp(static_cast<double>(row[v]) - mx);
                const int tv = target.rgb[static_cast<size_t>(pc)];
                ce_sum += static_cast<double>(mx) + std::log(z) - static_cast<double>(row[tv]);
                correct += best == tv;
                ++pixels;
            }
            reward_hits += WorldModel::decode_reward(t.val(out.reward_logits), i) ==
                           rewards[static_cast<size_t>(i)];
        }
    }
    ev.accuracy = static_cast<double>(correct) / static_cast<double>(pixels);
    ev.ce = ce_sum / static_cast<double>(pixels);
    ev.reward_accuracy = static_cast<double>(reward_hits) / static_cast<double>(samples.size());
    return ev;
}

/// Uniformly sampled held-out evaluation positions.
inline std::vector<std::pair<int, int>> sample_eval_positions(const ReplayBuffer& buf, int n, Rng& rng) {
    std::vector<std::pair<int, int>> out;
    const int64_t total = buf.transition_count();
    for (int i = 0; i < n; ++i) out.push_back(locate_transition(buf, rng.below(total)));
    return out;
}

/// Accuracy of `horizon`-step self-rollouts against real frames: the model
/// consumes its own decoded frames while replaying the recorded actions.
inline double eval_rollout_accuracy(const WorldModel& m, const ReplayBuffer& buf, int n_starts,
                                    int horizon, Rng& rng) {
    if (horizon <= 0) throw std::invalid_argument("horizon must be positive");
    std::vector<std::pair<int, int>> starts;
    for (size_t e = 0; e < buf.episodes().size() && static_cast<int>(starts.size()) < n_starts * 4; ++e) {
        const int steps = buf.episodes()[e].steps();
        for (int t0 = 3; t0 + horizon <= steps; t0 += 7)
            starts.push_back({static_cast<int>(e), t0});
    }
    if (starts.empty()) throw std::invalid_argument("no eligible rollout starts at this horizon");
    // Deterministic subsample.
    while (static_cast<int>(starts.size()) > n_starts)
        starts.erase(starts.begin() + static_cast<long>(rng.below(static_cast<int64_t>(starts.size()))));

    int64_t pixels = 0, correct = 0;
    for (auto [e, t0] : starts) {
        const Episode& ep = buf.episodes()[static_cast<size_t>(e)];
        ObservationStack stack = buf.stack_at(e, t0);
        for (int h = 0; h < horizon; ++h) {
            const int action = ep.actions[static_cast<size_t>(t0 + h)];
            Tape<float> t;
            std::vector<const ObservationStack*> sp = {&stack};
            Var<float> x = t.leaf(m.stacks_to_input(sp));
            Var<float> bits{};
            if (m.config().stochastic()) {
                Tensor<int> act({1});
                act[0] = action;
                Var<float> pooled = m.encode_pooled(t, x, act, rng);
                Rng row = rng.split(static_cast<uint64_t>(h));
                std::vector<Rng*> rp = {&row};
                auto sampled = m.sample_bits(t, pooled, rp);
                std::vector<const LatentBits*> bp = {&sampled[0]};
                bits = t.leaf(m.bits_to_tensor(bp));
            }
            Tensor<int> act({1});
            act[0] = action;
            Rng no_drop(0);
            auto out = m.decode_graph(t, x, act, bits, false, no_drop);
            Frame pred = m.decode_frames(t.val(out.frame_logits))[0];
            const Frame& truth = ep.frames[static_cast<size_t>(t0 + h) + 1];
            for (size_t i = 0; i < pred.rgb.size(); ++i) {
                correct += pred.rgb[i] == truth.rgb[i];
                ++pixels;
            }
            for (int i = 0; i + 1 < 4; ++i) stack[static_cast<size_t>(i)] = stack[static_cast<size_t>(i) + 1];
            stack[3] = std::move(pred);
        }
    }
    return static_cast<double>(correct) / static_cast<double>(pixels);
}

}  // namespace simple
