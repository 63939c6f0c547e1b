#pragma once

#include <array>
#include <cstdint>
#include <deque>
#include <fstream>
#include <functional>
#include <stdexcept>
#include <string>
#include <vector>

#include "simple/params.hpp"
#include "simple/rng.hpp"

namespace simple {

// ---------------------------------------------------------------------------
// Frames and observations
// ---------------------------------------------------------------------------

/// One rendered RGB image, row-major, values in [0,255].
struct Frame {
    int h = 0, w = 0;
    std::vector<uint8_t> rgb;

    Frame() = default;
    Frame(int h_, int w_) : h(h_), w(w_), rgb(static_cast<size_t>(h_) * w_ * 3, 0) {}

    uint8_t& at(int y, int x, int c) { return rgb[(static_cast<size_t>(y) * w + x) * 3 + c]; }
    uint8_t at(int y, int x, int c) const { return rgb[(static_cast<size_t>(y) * w + x) * 3 + c]; }

    void fill(uint8_t r, uint8_t g, uint8_t b) {
        for (size_t i = 0; i < rgb.size(); i += 3) {
            rgb[i] = r;
            rgb[i + 1] = g;
            rgb[i + 2] = b;
        }
    }

    void rect(int y0, int x0, int hh, int ww, uint8_t r, uint8_t g, uint8_t b) {
        for (int y = std::max(0, y0); y < std::min(h, y0 + hh); ++y)
            for (int x = std::max(0, x0); x < std::min(w, x0 + ww); ++x) {
                at(y, x, 0) = r;
                at(y, x, 1) = g;
                at(y, x, 2) = b;
            }
    }

    bool operator==(const Frame& o) const { return h == o.h && w == o.w && rgb == o.rgb; }
};

/// Reward over a frame-skip window: sum the raw rewards, then clip.
inline int clip_reward(int raw_sum) { return raw_sum > 0 ? 1 : raw_sum < 0 ? -1 : 0; }

/// 2x2 block mean, rounded to nearest integer.
inline Frame downscale2(const Frame& f) {
    Frame out(f.h / 2, f.w / 2);
    for (int y = 0; y < out.h; ++y)
        for (int x = 0; x < out.w; ++x)
            for (int c = 0; c < 3; ++c) {
                const int s = f.at(2 * y, 2 * x, c) + f.at(2 * y, 2 * x + 1, c) +
                              f.at(2 * y + 1, 2 * x, c) + f.at(2 * y + 1, 2 * x + 1, c);
                out.at(y, x, c) = static_cast<uint8_t>((s + 2) / 4);
            }
    return out;
}

/// Four consecutive downscaled frames, oldest first.
using ObservationStack = std::array<Frame, 4>;

// ---------------------------------------------------------------------------
// Environment spec and game cores
// ---------------------------------------------------------------------------

struct EnvSpec {
    std::string name = "mini_pong";  // mini_pong | mini_cross
    int height = 48, width = 32;     // raw pixels, pre-downscale
    int episode_cap = 1200;          // max raw steps per episode
    bool stochastic = true;          // mini_cross only: hidden-stream car dispatch
    uint64_t seed = 0;

    void validate() const {
        if (name != "mini_pong" && name != "mini_cross")
            throw std::invalid_argument("unknown environment '" + name + "'");
        if (height % 2 || width % 2) throw std::invalid_argument("env height/width must be even");
        if (height < 24 || width < 16) throw std::invalid_argument("env too small to render sprites");
        if (episode_cap <= 0) throw std::invalid_argument("episode_cap must be positive");
    }
};

namespace detail {

// Both games use 3 actions: 0 = noop, 1 = up, 2 = down.
constexpr int kActions = 3;

struct PongCore {
    int H, W, cap;
    int ball_y = 0, ball_x = 0, vy = 0, vx = 0;
    int agent_y = 0, opp_y = 0;
    int freeze = 0;        // raw frames of pre-serve freeze remaining
    int serve_vx = 1;      // next serve direction (+1 toward agent side)
    int points = 0;
    int raw_steps = 0;
    bool finished = false;

    static constexpr int kBall = 4, kPaddleH = 8, kPaddleW = 4;
    static constexpr int kWall = 2, kPointsToWin = 5, kFreezeFrames = 8;

    void reset(int h, int w, int episode_cap, Rng&) {
        H = h;
        W = w;
        cap = episode_cap;
        agent_y = opp_y = H / 2 - kPaddleH / 2;
        points = 0;
        raw_steps = 0;
        finished = false;
        serve_vx = 1;  // first serve goes toward the agent
        serve();
    }

    void serve() {
        ball_y = H / 2 - kBall / 2;
        ball_x = W / 2 - kBall / 2;
        vy = 1;
        vx = serve_vx;
        freeze = kFreezeFrames;
    }

    int step(int action) {  // one raw frame; returns raw reward
        ++raw_steps;
        // Agent paddle always responds, even during the serve freeze.
        if (action == 1) agent_y -= 2;
        if (action == 2) agent_y += 2;
        agent_y = std::clamp(agent_y, kWall, H - kWall - kPaddleH);

        int reward = 0;
        if (freeze > 0) {
            --freeze;
        } else {
            // Opponent tracks the ball with speed 1.
            const int target = ball_y + kBall / 2 - kPaddleH / 2;
            if (opp_y < target) ++opp_y;
            else if (opp_y > target) --opp_y;
            opp_y = std::clamp(opp_y, kWall, H - kWall - kPaddleH);

            ball_y += vy;
            ball_x += vx;
            if (ball_y <= kWall) {
                ball_y = kWall;
                vy = std::abs(vy);
            }
            if (ball_y >= H - kWall - kBall) {
                ball_y = H - kWall - kBall;
                vy = -std::abs(vy);
            }
            // Paddle bounces; vertical speed comes from the hit offset.
            const int opp_face = 1 + kPaddleW;  // first column right of the opponent
            if (vx < 0 && ball_x <= opp_face && ball_x + kBall > 1 && overlaps(opp_y)) {
                ball_x = opp_face;
                vx = 1;
                vy = spin(opp_y);
            }
            const int agent_face = W - 1 - kPaddleW;  // left face of the agent paddle
            if (vx > 0 && ball_x + kBall >= agent_face && ball_x < W - 1 && overlaps(agent_y)) {
                ball_x = agent_face - kBall;
                vx = -1;
                vy = spin(agent_y);
            }
            if (ball_x + kBall <= 0) {  // past the opponent
                reward = 1;
                score();
            } else if (ball_x >= W) {  // past the agent
                reward = -1;
                score();
            }
        }
        if (raw_steps >= cap) finished = true;
        return reward;
    }

    bool overlaps(int paddle_y) const {
        return ball_y + kBall > paddle_y && ball_y < paddle_y + kPaddleH;
    }

    int spin(int paddle_y) const {
        const int rel = (ball_y + kBall / 2) - (paddle_y + kPaddleH / 2);
        return std::clamp((rel >= 0 ? rel + 1 : rel - 1) / 2, -2, 2);
    }

    void score() {
        ++points;
        // Serve toward whoever just conceded; the miss is visible in the
        // preceding frames, so the direction stays pixel-predictable.
        serve_vx = (ball_x >= W) ? 1 : -1;
        if (points >= kPointsToWin) finished = true;
        else serve();
    }

    void render(Frame& f) const {
        f.fill(0, 0, 0);
        f.rect(0, 0, kWall, W, 120, 120, 120);
        f.rect(H - kWall, 0, kWall, W, 120, 120, 120);
        f.rect(opp_y, 1, kPaddleH, kPaddleW, 220, 80, 80);
        f.rect(agent_y, W - 1 - kPaddleW, kPaddleH, kPaddleW, 80, 220, 80);
        if (ball_x + kBall > 0 && ball_x < W) f.rect(ball_y, ball_x, kBall, kBall, 236, 236, 236);
    }
};

struct CrossCore {
    int H, W, cap;
    int chick_y = 0;
    int raw_steps = 0;
    bool finished = false;
    bool stochastic = true;
    Rng dispatch;  // hidden stream, invisible in any 4-frame window

    struct Car {
        int lane;
        int x;  // leftmost column
    };
    std::vector<Car> cars;

    static constexpr int kLanes = 4, kLaneH = 8, kLaneTop = 6;
    static constexpr int kCarW = 6, kCarH = 6, kCarSpeed = 2;
    static constexpr int kChick = 4;

    int chick_x() const { return W / 2 - kChick / 2; }
    int start_y() const { return H - kChick - 2; }
    static int lane_dir(int lane) { return lane % 2 == 0 ? 1 : -1; }
    int lane_y(int lane) const { return kLaneTop + lane * kLaneH + 1; }

    void reset(int h, int w, int episode_cap, bool stoch, Rng stream) {
        H = h;
        W = w;
        cap = episode_cap;
        stochastic = stoch;
        dispatch = stream;
        chick_y = start_y();
        cars.clear();
        raw_steps = 0;
        finished = false;
    }

    int step(int action) {
        ++raw_steps;
        if (action == 1) --chick_y;
        if (action == 2) ++chick_y;
        chick_y = std::clamp(chick_y, 0, start_y());

        for (auto& c : cars) c.x += kCarSpeed * lane_dir(c.lane);
        std::erase_if(cars, [&](const Car& c) { return c.x + kCarW < -kCarW || c.x > W + kCarW; });

        for (int lane = 0; lane < kLanes; ++lane) {
            const bool entry_clear = [&] {
                for (const auto& c : cars)
                    if (c.lane == lane &&
                        (lane_dir(lane) > 0 ? c.x < kCarW + 10 : c.x + kCarW > W - kCarW - 10))
                        return false;
                return true;
            }();
            const bool spawn = stochastic
                                   ? (entry_clear && dispatch.uniform() < 0.05)
                                   : (entry_clear && (raw_steps + lane * 7) % 28 == 0);
            if (spawn) cars.push_back({lane, lane_dir(lane) > 0 ? -kCarW : W});
        }

        int reward = 0;
        for (const auto& c : cars) {
            const int cy = lane_y(c.lane);
            const bool hit = chick_x() < c.x + kCarW && chick_x() + kChick > c.x &&
                             chick_y < cy + kCarH && chick_y + kChick > cy;
            if (hit) {
                chick_y = start_y();
                break;
            }
        }
        if (chick_y <= 1) {
            reward = 1;
            chick_y = start_y();
        }
        if (raw_steps >= cap) finished = true;
        return reward;
    }

    void render(Frame& f) const {
        f.fill(24, 24, 28);
        f.rect(0, 0, 2, W, 80, 200, 80);                     // goal band
        f.rect(H - 2, 0, 2, W, 70, 70, 110);                 // start band
        for (int lane = 0; lane < kLanes; ++lane)            // road lanes
            f.rect(kLaneTop + lane * kLaneH, 0, kLaneH, W, 45, 45, 45);
        for (const auto& c : cars) f.rect(lane_y(c.lane), c.x, kCarH, kCarW, 210, 60, 50);
        f.rect(chick_y, chick_x(), kChick, kChick, 235, 220, 70);
    }
};

}  // namespace detail

// ---------------------------------------------------------------------------
// Agent-facing environment: sticky actions -> frame skip 4 -> downscale 2 ->
// reward clip {-1,0,1} -> 4-frame stacking.
// ---------------------------------------------------------------------------

struct StepResult {
    ObservationStack stack;
    int reward = 0;  // clipped
    bool done = false;
};

class Env {
public:
    static constexpr int kFrameSkip = 4;
    static constexpr int kDownscale = 2;

    explicit Env(EnvSpec spec) : spec_(std::move(spec)) {
        spec_.validate();
        rng_ = Rng(spec_.seed);
        sticky_rng_ = rng_.split(0xA11CE);
        reset();
    }

    int action_count() const { return detail::kActions; }
    int obs_height() const { return spec_.height / kDownscale; }
    int obs_width() const { return spec_.width / kDownscale; }
    const EnvSpec& spec() const { return spec_; }

    ObservationStack reset() {
        if (spec_.name == "mini_pong") {
            pong_.reset(spec_.height, spec_.width, spec_.episode_cap, rng_);
        } else {
            cross_.reset(spec_.height, spec_.width, spec_.episode_cap, spec_.stochastic,
                         rng_.split(episodes_started_));
        }
        ++episodes_started_;
        done_ = false;
        have_prev_action_ = false;
        Frame first = render_downscaled();
        for (auto& f : stack_) f = first;
        return stack_;
    }

    StepResult step(int action) {
        if (done_) throw std::logic_error("step() on a terminated environment; call reset()");
        if (action < 0 || action >= detail::kActions) throw std::invalid_argument("action out of range");

        int executed = action;
        if (have_prev_action_ && sticky_p_ > 0.0 && sticky_rng_.uniform() < sticky_p_) {
            executed = prev_action_;
            ++sticky_repeats_;
        }
        if (have_prev_action_) ++sticky_opportunities_;
        prev_action_ = executed;
        have_prev_action_ = true;

        int raw_sum = 0;
        for (int k = 0; k < kFrameSkip && !done_; ++k) {
            raw_sum += core_step(executed);
            done_ = core_done();
        }
        const int reward = clip_reward(raw_sum);

        for (int i = 0; i + 1 < 4; ++i) stack_[static_cast<size_t>(i)] = stack_[static_cast<size_t>(i) + 1];
        stack_[3] = render_downscaled();
        return {stack_, reward, done_};
    }

    bool done() const { return done_; }
    const ObservationStack& stack() const { return stack_; }

    void set_sticky(double p) {
        if (p < 0.0 || p > 1.0) throw std::invalid_argument("sticky probability must be in [0,1]");
        sticky_p_ = p;
    }
    double sticky_p() const { return sticky_p_; }
    int64_t sticky_repeats() const { return sticky_repeats_; }
    int64_t sticky_opportunities() const { return sticky_opportunities_; }

private:
    int core_step(int a) { return spec_.name == "mini_pong" ? pong_.step(a) : cross_.step(a); }
    bool core_done() const { return spec_.name == "mini_pong" ? pong_.finished : cross_.finished; }

    Frame render_downscaled() const {
        Frame raw(spec_.height, spec_.width);
        if (spec_.name == "mini_pong") pong_.render(raw);
        else cross_.render(raw);
        return downscale2(raw);
    }

    EnvSpec spec_;
    Rng rng_, sticky_rng_;
    detail::PongCore pong_{};
    detail::CrossCore cross_{};
    ObservationStack stack_{};
    bool done_ = false;
    uint64_t episodes_started_ = 0;
    double sticky_p_ = 0.0;
    bool have_prev_action_ = false;
    int prev_action_ = 0;
    int64_t sticky_repeats_ = 0, sticky_opportunities_ = 0;
};

inline Env make_env(const EnvSpec& spec) { return Env(spec); }

/// Sticky-action wrapper: with probability p the previous executed action is
/// repeated instead of the requested one; the first step always executes the
/// request.
inline Env apply_sticky(Env env, double p) {
    env.set_sticky(p);
    return env;
}

// ---------------------------------------------------------------------------
// Replay buffer (the real-data set D)
// ---------------------------------------------------------------------------

/// (stack, action, reward, next frame, done) record view over buffer storage.
struct Transition {
    ObservationStack stack;
    int action = 0;
    int reward = 0;
    Frame next_frame;
    bool done = false;
};

struct Episode {
    std::vector<Frame> frames;  // downscaled; frames[t+1] is the obs after step t
    std::vector<uint8_t> actions;
    std::vector<int8_t> rewards;
    bool terminated = false;

    int steps() const { return static_cast<int>(actions.size()); }
};

class ReplayBuffer {
public:
    ReplayBuffer() = default;
    explicit ReplayBuffer(EnvSpec spec) : spec_(std::move(spec)) {}

    const EnvSpec& spec() const { return spec_; }
    const std::vector<Episode>& episodes() const { return episodes_; }
    int64_t total_interactions() const { return total_interactions_; }

    void begin_episode(const Frame& first_obs) {
        Episode e;
        e.frames.push_back(first_obs);
        episodes_.push_back(std::move(e));
    }

    void push_step(int action, int reward, const Frame& next_obs, bool terminated) {
        if (episodes_.empty()) throw std::logic_error("push_step before begin_episode");
        Episode& e = episodes_.back();
        e.actions.push_back(static_cast<uint8_t>(action));
        e.rewards.push_back(static_cast<int8_t>(reward));
        e.frames.push_back(next_obs);
        e.terminated = terminated;
        ++total_interactions_;
    }

    /// Stack of 4 frames ending at frame index t (replicate-padded at episode
    /// start, so t=0 gives four copies of the first frame).
    ObservationStack stack_at(int episode, int t) const {
        const Episode& e = episodes_[static_cast<size_t>(episode)];
        ObservationStack s;
        for (int i = 0; i < 4; ++i) s[static_cast<size_t>(i)] = e.frames[static_cast<size_t>(std::max(0, t - 3 + i))];
        return s;
    }

    Transition transition(int episode, int t) const {
        const Episode& e = episodes_[static_cast<size_t>(episode)];
        if (t < 0 || t >= e.steps()) throw std::out_of_range("transition index");
        Transition tr;
        tr.stack = stack_at(episode, t);
        tr.action = e.actions[static_cast<size_t>(t)];
        tr.reward = e.rewards[static_cast<size_t>(t)];
        tr.next_frame = e.frames[static_cast<size_t>(t) + 1];
        tr.done = e.terminated && t == e.steps() - 1;
        return tr;
    }

    /// Total transitions (equals total_interactions by construction).
    int64_t transition_count() const {
        int64_t n = 0;
        for (const auto& e : episodes_) n += e.steps();
        return n;
    }

    // -- disk format: header + per-episode records, frames as raw bytes --

    void save(const std::string& path) const {
        std::vector<uint8_t> out;
        detail::put<uint32_t>(out, 0x53505242);  // "SPRB"
        detail::put<uint32_t>(out, 1);
        detail::put<uint32_t>(out, static_cast<uint32_t>(spec_.name.size()));
        out.insert(out.end(), spec_.name.begin(), spec_.name.end());
        detail::put<int32_t>(out, spec_.height);
        detail::put<int32_t>(out, spec_.width);
        detail::put<int32_t>(out, spec_.episode_cap);
        detail::put<uint8_t>(out, spec_.stochastic ? 1 : 0);
        detail::put<uint64_t>(out, spec_.seed);
        detail::put<int32_t>(out, Env::kFrameSkip);
        detail::put<int32_t>(out, Env::kDownscale);
        detail::put<uint64_t>(out, episodes_.size());
        detail::put<int64_t>(out, total_interactions_);
        for (const auto& e : episodes_) {
            detail::put<uint32_t>(out, static_cast<uint32_t>(e.steps()));
            detail::put<uint8_t>(out, e.terminated ? 1 : 0);
            for (const auto& f : e.frames) out.insert(out.end(), f.rgb.begin(), f.rgb.end());
            out.insert(out.end(), e.actions.begin(), e.actions.end());
            for (int8_t r : e.rewards) detail::put<int8_t>(out, r);
        }
        detail::put<uint64_t>(out, detail::fnv1a(out.data(), out.size()));
        std::ofstream os(path, std::ios::binary | std::ios::trunc);
        if (!os) throw std::runtime_error("cannot open '" + path + "' for writing");
        os.write(reinterpret_cast<const char*>(out.data()), static_cast<std::streamsize>(out.size()));
        if (!os) throw std::runtime_error("write failed for '" + path + "'");
    }

    static ReplayBuffer load(const std::string& path) {
        std::ifstream is(path, std::ios::binary);
        if (!is) throw std::runtime_error("cannot open '" + path + "'");
        std::vector<uint8_t> in((std::istreambuf_iterator<char>(is)), std::istreambuf_iterator<char>());
        if (in.size() < 16) throw std::runtime_error("replay buffer file truncated");
        const size_t body = in.size() - 8;
        uint64_t want;
        std::memcpy(&want, in.data() + body, 8);
        if (detail::fnv1a(in.data(), body) != want)
            throw std::runtime_error("replay buffer checksum mismatch (corrupt file)");
        size_t off = 0;
        if (detail::take<uint32_t>(in, off) != 0x53505242) throw std::runtime_error("bad replay buffer magic");
        if (detail::take<uint32_t>(in, off) != 1) throw std::runtime_error("unsupported replay buffer version");
        ReplayBuffer b;
        const uint32_t nlen = detail::take<uint32_t>(in, off);
        b.spec_.name.assign(in.begin() + static_cast<long>(off), in.begin() + static_cast<long>(off + nlen));
        off += nlen;
        b.spec_.height = detail::take<int32_t>(in, off);
        b.spec_.width = detail::take<int32_t>(in, off);
        b.spec_.episode_cap = detail::take<int32_t>(in, off);
        b.spec_.stochastic = detail::take<uint8_t>(in, off) != 0;
        b.spec_.seed = detail::take<uint64_t>(in, off);
        detail::take<int32_t>(in, off);  // frame skip
        detail::take<int32_t>(in, off);  // downscale
        const uint64_t n_eps = detail::take<uint64_t>(in, off);
        const int64_t total = detail::take<int64_t>(in, off);
        const int fh = b.spec_.height / Env::kDownscale;
        const int fw = b.spec_.width / Env::kDownscale;
        const size_t frame_bytes = static_cast<size_t>(fh) * fw * 3;
        for (uint64_t i = 0; i < n_eps; ++i) {
            Episode e;
            const uint32_t steps = detail::take<uint32_t>(in, off);
            e.terminated = detail::take<uint8_t>(in, off) != 0;
            for (uint32_t t = 0; t <= steps; ++t) {
                Frame f(fh, fw);
                if (off + frame_bytes > body) throw std::runtime_error("replay buffer file truncated");
                std::copy(in.begin() + static_cast<long>(off), in.begin() + static_cast<long>(off + frame_bytes),
                          f.rgb.begin());
                off += frame_bytes;
                e.frames.push_back(std::move(f));
            }
            e.actions.assign(in.begin() + static_cast<long>(off), in.begin() + static_cast<long>(off + steps));
            off += steps;
            for (uint32_t t = 0; t < steps; ++t) e.rewards.push_back(detail::take<int8_t>(in, off));
            b.episodes_.push_back(std::move(e));
        }
        b.total_interactions_ = total;
        if (b.transition_count() != total)
            throw std::runtime_error("replay buffer interaction count does not match episodes");
        return b;
    }

private:
    EnvSpec spec_;
    std::vector<Episode> episodes_;
    int64_t total_interactions_ = 0;
};

// ---------------------------------------------------------------------------
// Collection
// ---------------------------------------------------------------------------

using Policy = std::function<int(const ObservationStack&)>;

inline Policy random_policy(Rng rng) {
    auto shared = std::make_shared<Rng>(rng);
    return [shared](const ObservationStack&) { return static_cast<int>(shared->below(detail::kActions)); };
}

/// Runs exactly n agent steps, auto-resetting on episode end, and appends the
/// episodes to the buffer. Always starts a fresh episode.
inline void collect(Env& env, const Policy& policy, int64_t n_interactions, ReplayBuffer& buffer) {
    if (n_interactions <= 0) throw std::invalid_argument("collect: n_interactions must be positive");
    ObservationStack obs = env.reset();
    buffer.begin_episode(obs[3]);
    for (int64_t i = 0; i < n_interactions; ++i) {
        const int action = policy(obs);
        StepResult r = env.step(action);
        buffer.push_step(action, r.reward, r.stack[3], r.done);
        obs = r.stack;
        if (r.done && i + 1 < n_interactions) {
            obs = env.reset();
            buffer.begin_episode(obs[3]);
        }
    }
}

}  // namespace simple
