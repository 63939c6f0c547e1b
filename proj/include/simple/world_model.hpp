#pragma once

#include <cstdint>
#include <memory>
#include <unordered_map>
#include <span>
#include <string>
#include <vector>

#include "simple/adam.hpp"
#include "simple/env.hpp"
#include "simple/layers.hpp"
#include "simple/losses.hpp"
#include "simple/params.hpp"
#include "simple/tape.hpp"

namespace simple {

// ---------------------------------------------------------------------------
// Configuration
// ---------------------------------------------------------------------------

struct ModelConfig {
    enum class Variant { deterministic, stochastic_discrete };
    enum class PixelHead { softmax256, real_valued };

    Variant variant = Variant::stochastic_discrete;
    int downscale_levels = 3;   // reference config uses 6 at full image sizes
    int base_channels = 16;     // reference ladder starts at 96
    int max_channels = 64;      // reference ladder caps at 768
    PixelHead pixel_head = PixelHead::softmax256;
    int latent_bits = 32;       // reference 128
    int bit_chunk = 8;
    float dropout = 0.15f;       // conv/deconv layers
    float dense_dropout = 0.2f;  // dense layers (reward head)
    float loss_clip_l2 = 10.0f;
    float loss_clip_ce = 0.03f;
    int reward_classes = 3;
    float bit_noise = 1.0f;    // uniform +-amplitude on pre-bits while training
    float bit_dropout = 0.1f;  // zeroing dropout on bits after discretization
    float learning_rate = 1e-4f;
    int batch_size = 16;

    bool stochastic() const { return variant == Variant::stochastic_discrete; }
    int chunk_count() const { return latent_bits / bit_chunk; }
    int chunk_values() const { return 1 << bit_chunk; }

    void validate() const {
        if (downscale_levels < 1) throw std::invalid_argument("downscale_levels must be >= 1");
        if (base_channels < 1 || max_channels < base_channels)
            throw std::invalid_argument("bad channel ladder");
        if (reward_classes != 3) throw std::invalid_argument("reward_classes must be 3");
        if (loss_clip_l2 <= 0 || loss_clip_ce <= 0) throw std::invalid_argument("loss clips must be positive");
        if (stochastic()) {
            if (bit_chunk < 1 || bit_chunk > 16) throw std::invalid_argument("bit_chunk must be in [1,16]");
            if (latent_bits < 1 || latent_bits % bit_chunk != 0)
                throw std::invalid_argument("latent_bits must be a positive multiple of bit_chunk");
        }
        if (dropout < 0 || dropout >= 1 || dense_dropout < 0 || dense_dropout >= 1 ||
            bit_dropout < 0 || bit_dropout >= 1)
            throw std::invalid_argument("dropout rates must be in [0,1)");
    }

    /// Output channels after downscale level i (1-based); level 0 is the
    /// input embedding at base_channels.
    int channels_at(int level) const {
        int64_t c = int64_t(base_channels) << level;
        return static_cast<int>(std::min<int64_t>(c, max_channels));
    }
};

/// Discrete stochastic code for one predicted frame.
struct LatentBits {
    std::vector<float> bits;  // each exactly 0 or 1
};

struct TrainBatch {
    std::vector<ObservationStack> stacks;
    std::vector<int> actions;
    std::vector<Frame> target_frames;
    std::vector<int> target_rewards;  // in {-1,0,1}

    // Predecessor states per stack position, for scheduled sampling: the
    // model's own one-step prediction for position j is made from these.
    struct Predecessor {
        bool exists = false;
        ObservationStack stack;
        int action = 0;
    };
    std::vector<std::array<Predecessor, 4>> predecessors;

    size_t size() const { return stacks.size(); }
};

struct LossParts {
    double total = 0, pixel = 0, reward = 0, latent = 0;
};

// ---------------------------------------------------------------------------
// Model
// ---------------------------------------------------------------------------

/// Action-conditioned next-frame and reward model: skip-connected
/// convolutional encoder/decoder with per-pixel softmax output, plus (in the
/// stochastic variant) a posterior inference network over discrete latent
/// bits and an autoregressive LSTM bit predictor used at inference time.
class WorldModel {
public:
    using T = float;

    WorldModel(ModelConfig cfg, int frame_h, int frame_w, int n_actions, uint64_t seed)
        : cfg_(cfg), H_(frame_h), W_(frame_w), A_(n_actions) {
        cfg_.validate();
        if (H_ % (1 << cfg_.downscale_levels) != 0 || W_ % (1 << cfg_.downscale_levels) != 0)
            throw std::invalid_argument(
                "input " + std::to_string(H_) + "x" + std::to_string(W_) +
                " is not divisible by 2^" + std::to_string(cfg_.downscale_levels));
        build(seed);
    }

    const ModelConfig& config() const { return cfg_; }

    /// Gradients for every store parameter used on this tape, aligned with
    /// the store order (empty tensors for unused parameters). Call after
    /// tape.backward().
    std::vector<Tensor<T>> collect_grads(const Tape<T>& t) const {
        std::vector<Tensor<T>> grads(params_.count());
        if (tape_cache_.tape_uid != t.uid()) return grads;
        for (size_t i = 0; i < params_.count(); ++i) {
            auto it = tape_cache_.vars.find(params_.name(i));
            if (it != tape_cache_.vars.end()) grads[i] = t.grad(it->second);
        }
        return grads;
    }
    int frame_h() const { return H_; }
    int frame_w() const { return W_; }
    int n_actions() const { return A_; }
    ParamStore<T>& params() { return params_; }
    const ParamStore<T>& params() const { return params_; }

    // -- value-level API ----------------------------------------------------

    /// Logits for the next frame and reward. Stochastic variant requires
    /// bits; deterministic rejects them.
    std::pair<Tensor<T>, Tensor<T>> predict_next(const ObservationStack& stack, int action,
                                                 const LatentBits* bits) const {
        check_bits_arg(bits);
        Tape<T> t;
        const ObservationStack* sp[1] = {&stack};
        Var<T> x = t.leaf(stacks_to_input(sp));
        Var<T> bv{};
        if (cfg_.stochastic()) {
            const LatentBits* bp[1] = {bits};
            bv = t.leaf(bits_to_tensor(bp));
        }
        Rng no_drop(0);
        auto out = decode_graph(t, x, Tensor<int>({1}, {action}), bv, false, no_drop);
        Tensor<T> fl = t.val(out.frame_logits);
        if (cfg_.pixel_head == ModelConfig::PixelHead::softmax256)
            fl = fl.reshaped({1, H_, W_, 3, 256});
        return {fl, t.val(out.reward_logits)};
    }

    /// Posterior bits from (stack, action, next frame). Uniform noise on the
    /// pre-bit activations and bit dropout apply only while training.
    std::pair<std::vector<float>, LatentBits> infer_posterior_bits(const ObservationStack& stack,
                                                                   int action, const Frame& next,
                                                                   Rng& rng, bool training) const {
        require_stochastic("infer_posterior_bits");
        Tape<T> t;
        const ObservationStack* sp[1] = {&stack};
        const Frame* fp[1] = {&next};
        auto post = posterior_graph(t, t.leaf(posterior_input(sp, fp)),
                                    Tensor<int>({1}, {action}), rng, training);
        std::vector<float> pre(t.val(post.pre_bits).v.begin(), t.val(post.pre_bits).v.end());
        LatentBits lb;
        lb.bits.assign(t.val(post.bits).v.begin(), t.val(post.bits).v.end());
        return {pre, lb};
    }

    /// Autoregressive bit prediction conditioned on (stack, action); chunks
    /// are sampled from the predictor's softmax, so this is the inference-time
    /// stochasticity source.
    LatentBits predict_bits(const ObservationStack& stack, int action, Rng& rng) const {
        require_stochastic("predict_bits");
        const ObservationStack* sp[1] = {&stack};
        Rng* rp[1] = {&rng};
        auto bits = predict_bits_batch(sp, Tensor<int>({1}, {action}), rp);
        return bits[0];
    }

    // -- batched forward pieces (shared by training, rollout, and eval) -----

    struct DecodeOut {
        Var<T> frame_logits;   // [N,H,W,3*256] flat (or [N,H,W,3] real head); invalid in features_only mode
        Var<T> reward_logits;  // [N,3]
        Var<T> pooled_state;   // [N,Ck] action-conditioned bottleneck pool (pre-bits)
        Var<T> features;       // [N,H,W,C0] pre-head decoder activations
    };

    enum class DecodeMode { full, features_only };

    struct PosteriorOut {
        Var<T> pre_bits;  // [N,latent_bits] before discretization (post noise)
        Var<T> bits;      // [N,latent_bits] in {0,1}, pre-dropout
        Var<T> bits_dropped;  // bits after zeroing dropout (injection input)
    };

    Tensor<T> stacks_to_input(std::span<const ObservationStack* const> stacks) const {
        const int N = static_cast<int>(stacks.size());
        Tensor<T> x({N, H_, W_, 12});
        for (int n = 0; n < N; ++n)
            for (int f = 0; f < 4; ++f) {
                const Frame& fr = (*stacks[static_cast<size_t>(n)])[static_cast<size_t>(f)];
                for (int64_t p = 0; p < int64_t(H_) * W_; ++p)
                    for (int c = 0; c < 3; ++c)
                        x[((int64_t(n) * H_ * W_ + p) * 12) + f * 3 + c] =
                            T(fr.rgb[static_cast<size_t>(p * 3 + c)]) / T(255);
            }
        return x;
    }

    Tensor<T> posterior_input(std::span<const ObservationStack* const> stacks,
                              std::span<const Frame* const> next_frames) const {
        const int N = static_cast<int>(stacks.size());
        Tensor<T> x({N, H_, W_, 15});
        for (int n = 0; n < N; ++n) {
            const Frame& nf = *next_frames[static_cast<size_t>(n)];
            for (int64_t p = 0; p < int64_t(H_) * W_; ++p) {
                for (int f = 0; f < 4; ++f) {
                    const Frame& fr = (*stacks[static_cast<size_t>(n)])[static_cast<size_t>(f)];
                    for (int c = 0; c < 3; ++c)
                        x[((int64_t(n) * H_ * W_ + p) * 15) + f * 3 + c] =
                            T(fr.rgb[static_cast<size_t>(p * 3 + c)]) / T(255);
                }
                for (int c = 0; c < 3; ++c)
                    x[((int64_t(n) * H_ * W_ + p) * 15) + 12 + c] =
                        T(nf.rgb[static_cast<size_t>(p * 3 + c)]) / T(255);
            }
        }
        return x;
    }

    Tensor<T> bits_to_tensor(std::span<const LatentBits* const> bits) const {
        const int N = static_cast<int>(bits.size());
        Tensor<T> b({N, cfg_.latent_bits});
        for (int n = 0; n < N; ++n) {
            if (static_cast<int>(bits[static_cast<size_t>(n)]->bits.size()) != cfg_.latent_bits)
                throw std::invalid_argument("latent bit vector has wrong length");
            for (int k = 0; k < cfg_.latent_bits; ++k)
                b[n * cfg_.latent_bits + k] = bits[static_cast<size_t>(n)]->bits[static_cast<size_t>(k)];
        }
        return b;
    }

    /// Encoder + action conditioning + (optional) bit injection + middle
    /// convolutions + decoder + heads, on the caller's tape.
    DecodeOut decode_graph(Tape<T>& t, Var<T> x, const Tensor<int>& actions, Var<T> bits,
                           bool training, Rng& rng, DecodeMode mode = DecodeMode::full) const {
        const int k = cfg_.downscale_levels;
        if (cfg_.stochastic() != bits.valid())
            throw std::invalid_argument(cfg_.stochastic() ? "stochastic variant requires latent bits"
                                                          : "deterministic variant takes no latent bits");
        // Encoder.
        std::vector<Var<T>> enc;  // enc[0..k]
        Var<T> h = relu(t, conv(t, x, "enc/in", 1, 1));
        enc.push_back(h);
        for (int i = 1; i <= k; ++i) {
            h = dropout(t, h, cfg_.dropout, training, rng);
            h = conv(t, h, "enc/down" + std::to_string(i), 4, 2);
            h = ln(t, h, "enc/down" + std::to_string(i));
            h = relu(t, h);
            enc.push_back(h);
        }
        // Bottleneck conditioning: action first, then latent bits.
        h = mul_rows_bcast(t, h, embed_rows(t, "act/embed0", actions));
        Var<T> pooled = global_avg_pool(t, h);
        if (cfg_.stochastic())
            h = mul_rows_bcast(t, h, add_bias(t, matmul(t, bits, p(t, "bits/embed/w")), p(t, "bits/embed/b")));
        // Middle convolutions.
        for (int i = 1; i <= 2; ++i) {
            h = dropout(t, h, cfg_.dropout, training, rng);
            h = conv(t, h, "mid/conv" + std::to_string(i), 3, 1);
            h = ln(t, h, "mid/conv" + std::to_string(i));
            h = relu(t, h);
        }
        Var<T> bottleneck = h;
        // Decoder with residual skips into the matching encoder activations.
        for (int j = 1; j <= k; ++j) {
            Var<T> skip = enc[static_cast<size_t>(k - j)];
            const auto& ss = t.val(skip).shape;
            h = dropout(t, h, cfg_.dropout, training, rng);
            h = deconv(t, h, "dec/up" + std::to_string(j), 4, 2, ss[1], ss[2]);
            h = ln(t, h, "dec/up" + std::to_string(j));
            h = relu(t, add(t, h, skip));
            h = mul_rows_bcast(t, h, embed_rows(t, "act/embed" + std::to_string(j), actions));
        }
        DecodeOut out;
        out.features = h;
        // Softmax head stays in the flat [N,H,W,3*256] layout; consumers score
        // it 256-way per pixel-channel without a reshape copy. Inference paths
        // that only need decoded frames skip it (see decode_frames_fused).
        if (mode == DecodeMode::full) out.frame_logits = conv(t, h, "head/frame", 1, 1);
        Var<T> rp = global_avg_pool(t, bottleneck);
        rp = dropout(t, rp, cfg_.dense_dropout, training, rng);
        Var<T> rh = relu(t, add_bias(t, matmul(t, rp, p(t, "head/reward/hidden/w")), p(t, "head/reward/hidden/b")));
        out.reward_logits = add_bias(t, matmul(t, rh, p(t, "head/reward/out/w")), p(t, "head/reward/out/b"));
        out.pooled_state = pooled;
        return out;
    }

    PosteriorOut posterior_graph(Tape<T>& t, Var<T> y, const Tensor<int>& actions, Rng& rng,
                                 bool training) const {
        require_stochastic("posterior_graph");
        Var<T> h = dropout(t, y, cfg_.dropout, training, rng);
        h = relu(t, ln(t, conv(t, h, "inf/conv1", 8, 4), "inf/conv1"));
        h = dropout(t, h, cfg_.dropout, training, rng);
        h = relu(t, ln(t, conv(t, h, "inf/conv2", 8, 4), "inf/conv2"));
        Var<T> pool = global_avg_pool(t, h);
        Var<T> withact = concat_lastdim(t, pool, t.leaf(one_hot(actions)));
        Var<T> pre = add_bias(t, matmul(t, withact, p(t, "inf/fc/w")), p(t, "inf/fc/b"));
        if (training && cfg_.bit_noise > 0) {
            Tensor<T> noise(t.val(pre).shape);
            for (auto& v : noise.v) v = T(rng.uniform(-cfg_.bit_noise, cfg_.bit_noise));
            pre = add(t, pre, t.leaf(std::move(noise)));
        }
        PosteriorOut out;
        out.pre_bits = pre;
        out.bits = discretize_st(t, pre);
        if (training && cfg_.bit_dropout > 0) {
            // Zeroing dropout without rescale keeps bit values in {0,1}.
            Tensor<T> mask(t.val(out.bits).shape);
            for (auto& v : mask.v) v = rng.uniform() < cfg_.bit_dropout ? T(0) : T(1);
            out.bits_dropped = mul(t, out.bits, t.leaf(std::move(mask)));
        } else {
            out.bits_dropped = out.bits;
        }
        return out;
    }

    /// Teacher-forced bit-predictor chunk logits, [N, chunks, 2^chunk].
    /// Inputs are the target chunks shifted right by one (start token first).
    Var<T> predictor_graph(Tape<T>& t, Var<T> pooled_state, const Tensor<int>& chunk_targets) const {
        require_stochastic("predictor_graph");
        const int N = t.val(pooled_state).dim(0);
        const int S = cfg_.chunk_count();
        Var<T> h = tanh_op(t, add_bias(t, matmul(t, pooled_state, p(t, "pred/h0/w")), p(t, "pred/h0/b")));
        Var<T> c = tanh_op(t, add_bias(t, matmul(t, pooled_state, p(t, "pred/c0/w")), p(t, "pred/c0/b")));
        std::vector<Var<T>> step_logits;
        for (int s = 0; s < S; ++s) {
            Var<T> in;
            if (s == 0) {
                in = matmul(t, t.leaf(Tensor<T>::full({N, 1}, T(1))), p(t, "pred/start"));
            } else {
                Tensor<int> prev({N});
                for (int n = 0; n < N; ++n) prev[n] = chunk_targets[n * S + s - 1];
                in = embedding(t, p(t, "pred/chunk_embed"), prev);
            }
            auto hc = lstm_cell(t, in, h, c, p(t, "pred/lstm/wx"), p(t, "pred/lstm/wh"), p(t, "pred/lstm/b"));
            h = hc.first;
            c = hc.second;
            Var<T> lg = add_bias(t, matmul(t, h, p(t, "pred/out/w")), p(t, "pred/out/b"));
            step_logits.push_back(reshape(t, lg, {N, 1, cfg_.chunk_values()}));
        }
        Var<T> all = step_logits[0];
        for (int s = 1; s < S; ++s) {
            // concat along the step axis via lastdim concat on transposed layout
            all = concat_steps(t, all, step_logits[static_cast<size_t>(s)]);
        }
        return all;  // [N, S, K]
    }

    /// Sampled bits per batch row; rngs supplies one stream per row.
    std::vector<LatentBits> predict_bits_batch(std::span<const ObservationStack* const> stacks,
                                               const Tensor<int>& actions, std::span<Rng* const> rngs) const {
        require_stochastic("predict_bits");
        Tape<T> t;
        Var<T> x = t.leaf(stacks_to_input(stacks));
        Rng no_drop(0);
        Var<T> pooled = encode_pooled(t, x, actions, no_drop);
        return sample_bits(t, pooled, rngs);
    }

    /// Bit sampling from an existing pooled-state var (lets simulation share
    /// one encoder pass between bit prediction and decoding).
    std::vector<LatentBits> sample_bits(Tape<T>& t, Var<T> pooled_state, std::span<Rng* const> rngs) const {
        const int N = t.val(pooled_state).dim(0);
        const int S = cfg_.chunk_count();
        const int K = cfg_.chunk_values();
        if (static_cast<int>(rngs.size()) != N) throw std::invalid_argument("need one rng per row");
        Var<T> h = tanh_op(t, add_bias(t, matmul(t, pooled_state, p(t, "pred/h0/w")), p(t, "pred/h0/b")));
        Var<T> c = tanh_op(t, add_bias(t, matmul(t, pooled_state, p(t, "pred/c0/w")), p(t, "pred/c0/b")));
        std::vector<int> chunks(static_cast<size_t>(N) * S, 0);
        for (int s = 0; s < S; ++s) {
            Var<T> in;
            if (s == 0) {
                in = matmul(t, t.leaf(Tensor<T>::full({N, 1}, T(1))), p(t, "pred/start"));
            } else {
                Tensor<int> prev({N});
                for (int n = 0; n < N; ++n) prev[n] = chunks[static_cast<size_t>(n) * S + s - 1];
                in = embedding(t, p(t, "pred/chunk_embed"), prev);
            }
            auto hc = lstm_cell(t, in, h, c, p(t, "pred/lstm/wx"), p(t, "pred/lstm/wh"), p(t, "pred/lstm/b"));
            h = hc.first;
            c = hc.second;
            Var<T> probs = softmax_lastdim(t, add_bias(t, matmul(t, h, p(t, "pred/out/w")), p(t, "pred/out/b")));
            const Tensor<T>& pv = t.val(probs);
            for (int n = 0; n < N; ++n) {
                const double u = rngs[static_cast<size_t>(n)]->uniform();
                double acc = 0;
                int pick = K - 1;
                for (int kk = 0; kk < K; ++kk) {
                    acc += static_cast<double>(pv[n * K + kk]);
                    if (u < acc) {
                        pick = kk;
                        break;
                    }
                }
                chunks[static_cast<size_t>(n) * S + s] = pick;
            }
        }
        std::vector<LatentBits> out(static_cast<size_t>(N));
        for (int n = 0; n < N; ++n) {
            out[static_cast<size_t>(n)].bits.resize(static_cast<size_t>(cfg_.latent_bits));
            for (int s = 0; s < S; ++s)
                for (int j = 0; j < cfg_.bit_chunk; ++j)
                    out[static_cast<size_t>(n)].bits[static_cast<size_t>(s * cfg_.bit_chunk + j)] =
                        static_cast<float>((chunks[static_cast<size_t>(n) * S + s] >> j) & 1);
        }
        return out;
    }

    /// Encoder pass up to the action-conditioned pooled bottleneck (no bits,
    /// no decode). Used by bit prediction.
    Var<T> encode_pooled(Tape<T>& t, Var<T> x, const Tensor<int>& actions, Rng& rng) const {
        const int k = cfg_.downscale_levels;
        Var<T> h = relu(t, conv(t, x, "enc/in", 1, 1));
        for (int i = 1; i <= k; ++i) {
            h = dropout(t, h, cfg_.dropout, false, rng);
            h = conv(t, h, "enc/down" + std::to_string(i), 4, 2);
            h = ln(t, h, "enc/down" + std::to_string(i));
            h = relu(t, h);
        }
        h = mul_rows_bcast(t, h, embed_rows(t, "act/embed0", actions));
        return global_avg_pool(t, h);
    }

    /// Pack bit values (row-major [N, latent_bits], entries 0/1) into chunk
    /// integers [N, chunks].
    Tensor<int> pack_chunks(const Tensor<T>& bits) const {
        const int N = bits.dim(0);
        const int S = cfg_.chunk_count();
        Tensor<int> out({N, S});
        for (int n = 0; n < N; ++n)
            for (int s = 0; s < S; ++s) {
                int v = 0;
                for (int j = 0; j < cfg_.bit_chunk; ++j)
                    if (bits[n * cfg_.latent_bits + s * cfg_.bit_chunk + j] > T(0.5)) v |= 1 << j;
                out[n * S + s] = v;
            }
        return out;
    }

    // -- frame decoding -----------------------------------------------------

    /// Greedy decode straight from pre-head decoder features: computes each
    /// pixel's head logits in a scratch row and takes argmaxes without ever
    /// materializing the [N,H,W,768] tensor. Bit-identical to decoding
    /// decode_graph's frame_logits (same fixed accumulation order).
    std::vector<Frame> decode_frames_fused(const Tensor<T>& features) const {
        const int N = features.dim(0);
        const int C0 = features.cols();
        const Tensor<T>& w = params_.at("head/frame/w");  // [1,1,C0,out]
        const Tensor<T>& b = params_.at("head/frame/b");
        const int out_ch = w.dim(3);
        const int64_t pixels = int64_t(H_) * W_;
        std::vector<Frame> out(static_cast<size_t>(N));
#pragma omp parallel
        {
            std::vector<T> logits(static_cast<size_t>(out_ch));
#pragma omp for schedule(static)
            for (int64_t n = 0; n < N; ++n) {
                Frame f(H_, W_);
                for (int64_t p = 0; p < pixels; ++p) {
                    const T* feat = features.data() + (n * pixels + p) * C0;
                    for (int v = 0; v < out_ch; ++v) logits[static_cast<size_t>(v)] = b[v];
                    for (int c = 0; c < C0; ++c) {
                        const T fc = feat[c];
                        const T* wr = w.data() + int64_t(c) * out_ch;
                        for (int v = 0; v < out_ch; ++v) logits[static_cast<size_t>(v)] += fc * wr[v];
                    }
                    if (cfg_.pixel_head == ModelConfig::PixelHead::softmax256) {
                        for (int ch = 0; ch < 3; ++ch) {
                            const T* row = logits.data() + ch * 256;
                            int best = 0;
                            for (int v = 1; v < 256; ++v)
                                if (row[v] > row[best]) best = v;
                            f.rgb[static_cast<size_t>(p * 3 + ch)] = static_cast<uint8_t>(best);
                        }
                    } else {
                        for (int ch = 0; ch < 3; ++ch) {
                            const double v = std::lround(static_cast<double>(logits[static_cast<size_t>(ch)]));
                            f.rgb[static_cast<size_t>(p * 3 + ch)] = static_cast<uint8_t>(std::clamp(v, 0.0, 255.0));
                        }
                    }
                }
                out[static_cast<size_t>(n)] = std::move(f);
            }
        }
        return out;
    }

    /// Greedy frame decode: per-pixel argmax for the softmax head, clamp and
    /// round for the real head.
    std::vector<Frame> decode_frames(const Tensor<T>& frame_logits) const {
        const int N = frame_logits.dim(0);
        std::vector<Frame> out(static_cast<size_t>(N));
#pragma omp parallel for schedule(static) if (N > 1)
        for (int n = 0; n < N; ++n) {
            Frame f(H_, W_);
            if (cfg_.pixel_head == ModelConfig::PixelHead::softmax256) {
                const int64_t per = int64_t(H_) * W_ * 3;
                for (int64_t i = 0; i < per; ++i) {
                    const T* row = frame_logits.data() + (n * per + i) * 256;
                    int best = 0;
                    for (int v = 1; v < 256; ++v)
                        if (row[v] > row[best]) best = v;
                    f.rgb[static_cast<size_t>(i)] = static_cast<uint8_t>(best);
                }
            } else {
                const int64_t per = int64_t(H_) * W_ * 3;
                for (int64_t i = 0; i < per; ++i) {
                    const double v = std::lround(static_cast<double>(frame_logits[n * per + i]));
                    f.rgb[static_cast<size_t>(i)] = static_cast<uint8_t>(std::clamp(v, 0.0, 255.0));
                }
            }
            out[static_cast<size_t>(n)] = std::move(f);
        }
        return out;
    }

    static int decode_reward(const Tensor<T>& reward_logits, int row) {
        int best = 0;
        for (int k = 1; k < 3; ++k)
            if (reward_logits[row * 3 + k] > reward_logits[row * 3 + best]) best = k;
        return best - 1;
    }

    Tensor<int> one_hot_targets_frame(const Frame& f) const {
        Tensor<int> t({H_, W_, 3});
        for (int64_t i = 0; i < t.numel(); ++i) t[i] = f.rgb[static_cast<size_t>(i)];
        return t;
    }

    Tensor<T> one_hot(const Tensor<int>& actions) const {
        const int N = static_cast<int>(actions.numel());
        Tensor<T> oh({N, A_});
        for (int n = 0; n < N; ++n) {
            if (actions[n] < 0 || actions[n] >= A_) throw std::invalid_argument("action out of range");
            oh[n * A_ + actions[n]] = T(1);
        }
        return oh;
    }

private:
    void check_bits_arg(const LatentBits* bits) const {
        if (cfg_.stochastic() && !bits)
            throw std::invalid_argument("stochastic_discrete model requires latent bits");
        if (!cfg_.stochastic() && bits)
            throw std::invalid_argument("deterministic model takes no latent bits");
    }

    void require_stochastic(const char* op) const {
        if (!cfg_.stochastic())
            throw std::logic_error(std::string(op) + " is only defined for the stochastic_discrete variant");
    }

    // Named-parameter access on a tape (leafed once per tape).
    Var<T> p(Tape<T>& t, const std::string& name) const {
        auto& cache = tape_cache_;
        if (cache.tape_uid != t.uid()) {
            cache.tape_uid = t.uid();
            cache.vars.clear();
        }
        auto it = cache.vars.find(name);
        if (it != cache.vars.end()) return it->second;
        Var<T> v = t.leaf(params_.at(name), true);
        cache.vars.emplace(name, v);
        return v;
    }

    // Kernel sizes are baked into the weight shapes; helpers only pass strides.
    Var<T> conv(Tape<T>& t, Var<T> x, const std::string& name, int /*kernel*/, int stride) const {
        return conv2d(t, x, p(t, name + "/w"), p(t, name + "/b"), stride, stride);
    }

    Var<T> deconv(Tape<T>& t, Var<T> x, const std::string& name, int /*kernel*/, int stride, int oh,
                  int ow) const {
        return conv2d_transpose(t, x, p(t, name + "/w"), p(t, name + "/b"), stride, stride, oh, ow);
    }

    Var<T> ln(Tape<T>& t, Var<T> x, const std::string& name) const {
        return layer_norm(t, x, p(t, name + "/ln/g"), p(t, name + "/ln/b"));
    }

    Var<T> embed_rows(Tape<T>& t, const std::string& name, const Tensor<int>& actions) const {
        return embedding(t, p(t, name), actions);
    }

    Var<T> concat_steps(Tape<T>& t, Var<T> a, Var<T> b) const {
        // [N,Sa,K] ++ [N,Sb,K] along the middle axis. Rows are (n,s) blocks;
        // implemented by reshaping to [N, Sa*K] / [N, Sb*K] and re-splitting.
        const auto& sa = t.val(a).shape;
        const auto& sb = t.val(b).shape;
        Var<T> fa = reshape(t, a, {sa[0], sa[1] * sa[2]});
        Var<T> fb = reshape(t, b, {sb[0], sb[1] * sb[2]});
        return reshape(t, concat_lastdim(t, fa, fb), {sa[0], sa[1] + sb[1], sa[2]});
    }

    void add_conv(Rng& rng, const std::string& name, int kh, int kw, int ci, int co, bool with_ln) {
        params_.add(name + "/w", uniform_init<T>({kh, kw, ci, co}, int64_t(kh) * kw * ci, rng));
        params_.add(name + "/b", Tensor<T>({co}));
        if (with_ln) {
            params_.add(name + "/ln/g", Tensor<T>::full({co}, T(1)));
            params_.add(name + "/ln/b", Tensor<T>({co}));
        }
    }

    void add_deconv(Rng& rng, const std::string& name, int kh, int kw, int ci, int co) {
        // Transpose weight layout [KH,KW,Co,Ci].
        params_.add(name + "/w", uniform_init<T>({kh, kw, co, ci}, int64_t(kh) * kw * ci, rng));
        params_.add(name + "/b", Tensor<T>({co}));
        params_.add(name + "/ln/g", Tensor<T>::full({co}, T(1)));
        params_.add(name + "/ln/b", Tensor<T>({co}));
    }

    void add_dense(Rng& rng, const std::string& name, int ci, int co, T bias_init = T(0)) {
        params_.add(name + "/w", uniform_init<T>({ci, co}, ci, rng));
        params_.add(name + "/b", Tensor<T>::full({co}, bias_init));
    }

    /// Multiplicative conditioning tables start near 1 so the initial model
    /// is action-agnostic instead of zeroed out.
    void add_cond_embedding(Rng& rng, const std::string& name, int vocab, int dim) {
        Tensor<T> e({vocab, dim});
        for (auto& v : e.v) v = T(1) + T(rng.uniform(-0.1, 0.1));
        params_.add(name, std::move(e));
    }

    void build(uint64_t seed) {
        Rng rng(seed);
        const int k = cfg_.downscale_levels;
        add_conv(rng, "enc/in", 1, 1, 12, cfg_.base_channels, false);
        for (int i = 1; i <= k; ++i)
            add_conv(rng, "enc/down" + std::to_string(i), 4, 4, cfg_.channels_at(i - 1), cfg_.channels_at(i), true);
        const int ck = cfg_.channels_at(k);
        add_cond_embedding(rng, "act/embed0", A_, ck);
        if (cfg_.stochastic()) {
            add_dense(rng, "bits/embed", cfg_.latent_bits, ck, T(1));
        }
        add_conv(rng, "mid/conv1", 3, 3, ck, ck, true);
        add_conv(rng, "mid/conv2", 3, 3, ck, ck, true);
        for (int j = 1; j <= k; ++j) {
            const int co = cfg_.channels_at(k - j);
            add_deconv(rng, "dec/up" + std::to_string(j), 4, 4, cfg_.channels_at(k - j + 1), co);
            add_cond_embedding(rng, "act/embed" + std::to_string(j), A_, co);
        }
        const int head_out = cfg_.pixel_head == ModelConfig::PixelHead::softmax256 ? 3 * 256 : 3;
        add_conv(rng, "head/frame", 1, 1, cfg_.base_channels, head_out, false);
        if (cfg_.pixel_head == ModelConfig::PixelHead::real_valued) {
            // Mid-gray starting estimate on the raw 0..255 scale.
            for (auto& v : params_.at("head/frame/b").v) v = T(128);
        }
        add_dense(rng, "head/reward/hidden", ck, 128);
        add_dense(rng, "head/reward/out", 128, cfg_.reward_classes);
        if (cfg_.stochastic()) {
            const int c1 = std::max(8, cfg_.latent_bits);
            const int c2 = std::max(16, 4 * cfg_.latent_bits);
            add_conv(rng, "inf/conv1", 8, 8, 15, c1, true);
            add_conv(rng, "inf/conv2", 8, 8, c1, c2, true);
            add_dense(rng, "inf/fc", c2 + A_, cfg_.latent_bits);
            const int hsz = cfg_.latent_bits;
            add_dense(rng, "pred/h0", ck, hsz);
            add_dense(rng, "pred/c0", ck, hsz);
            params_.add("pred/start", uniform_init<T>({1, hsz}, hsz, rng));
            params_.add("pred/chunk_embed", uniform_init<T>({cfg_.chunk_values(), hsz}, hsz, rng));
            params_.add("pred/lstm/wx", uniform_init<T>({hsz, 4 * hsz}, hsz, rng));
            params_.add("pred/lstm/wh", uniform_init<T>({hsz, 4 * hsz}, hsz, rng));
            params_.add("pred/lstm/b", Tensor<T>({4 * hsz}));
            add_dense(rng, "pred/out", hsz, cfg_.chunk_values());
        }
    }

    struct TapeCache {
        uint64_t tape_uid = 0;
        std::unordered_map<std::string, Var<T>> vars;
    };

    ModelConfig cfg_;
    int H_, W_, A_;
    ParamStore<T> params_;
    mutable TapeCache tape_cache_;
};

/// Scheduled-sampling mixing probability: linear ramp from 0 at step 0 to 1
/// at floor(first_iter_steps/2), constant 1 afterwards.
inline double mixing_probability(int64_t step, int64_t first_iter_steps) {
    if (step < 0) throw std::invalid_argument("mixing_probability: step must be >= 0");
    const int64_t mid = first_iter_steps / 2;
    if (mid <= 0) return 1.0;
    return std::min(1.0, static_cast<double>(step) / static_cast<double>(mid));
}

}  // namespace simple
