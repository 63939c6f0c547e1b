#pragma once

#include <chrono>
#include <filesystem>
#include <memory>
#include <sstream>
#include <string>

#include "simple/config.hpp"
#include "simple/metrics.hpp"
#include "simple/model_train.hpp"
#include "simple/ppo.hpp"
#include "simple/report.hpp"
#include "simple/sim_env.hpp"

namespace simple {

// ---------------------------------------------------------------------------
// Run directory layout and locking
// ---------------------------------------------------------------------------

struct RunPaths {
    std::filesystem::path dir;

    explicit RunPaths(std::string d) : dir(std::move(d)) {}
    std::string config_txt() const { return (dir / "config.txt").string(); }
    std::string report_json() const { return (dir / "report.json").string(); }
    std::string scores_csv() const { return (dir / "scores.csv").string(); }
    std::string model_losses_csv() const { return (dir / "model_losses.csv").string(); }
    std::string ppo_stats_csv() const { return (dir / "ppo_stats.csv").string(); }
    std::string buffer_bin() const { return (dir / "buffer.bin").string(); }
    std::string lock_file() const { return (dir / ".lock").string(); }
    std::string checkpoint_dir() const { return (dir / "checkpoints").string(); }
    std::string checkpoint_bin(int iteration) const {
        char name[32];
        std::snprintf(name, sizeof(name), "iter_%03d.bin", iteration);
        return (dir / "checkpoints" / name).string();
    }

    void prepare() const {
        std::filesystem::create_directories(dir);
        std::filesystem::create_directories(checkpoint_dir());
    }
};

/// Exclusive advisory lock on a run directory; training commands hold one so
/// concurrent writers fail fast instead of corrupting the run.
class RunLock {
public:
    explicit RunLock(const RunPaths& paths) : path_(paths.lock_file()) {
        if (std::filesystem::exists(path_))
            throw std::runtime_error("run directory is locked by another process: " + path_);
        std::ofstream os(path_);
        os << "locked\n";
    }
    ~RunLock() { std::filesystem::remove(path_); }
    RunLock(const RunLock&) = delete;
    RunLock& operator=(const RunLock&) = delete;

private:
    std::string path_;
};

namespace detail {

class StageTimer {
public:
    StageTimer() : t0_(std::chrono::steady_clock::now()) {}
    double seconds() const {
        return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0_).count();
    }

private:
    std::chrono::steady_clock::time_point t0_;
};

[[noreturn]] inline void stage_fail(int iteration, const char* stage, const std::exception& e) {
    throw std::runtime_error("iteration " + std::to_string(iteration) + ", stage " + stage + ": " +
                             e.what());
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Policy evaluation on the real environment
// ---------------------------------------------------------------------------

/// Mean episode scores (sum of clipped rewards) of the policy at the given
/// sampling temperature. Evaluation interactions are tallied separately from
/// the training budget.
inline std::vector<double> evaluate_policy(const PolicyNet& net, const EnvSpec& spec, double sticky_p,
                                           int episodes, double temperature, Rng& rng,
                                           int64_t* eval_steps = nullptr) {
    std::vector<double> scores;
    for (int ep = 0; ep < episodes; ++ep) {
        EnvSpec s = spec;
        s.seed = rng.next_u64();
        Env env = make_env(s);
        if (sticky_p > 0) env.set_sticky(sticky_p);
        double total = 0;
        ObservationStack obs = env.stack();
        while (!env.done()) {
            auto [logits, values] = net.forward_batch({obs});
            std::vector<double> row(static_cast<size_t>(net.n_actions()));
            for (int a = 0; a < net.n_actions(); ++a) row[static_cast<size_t>(a)] = logits[a];
            auto probs = eval_policy(row, temperature);
            const double u = rng.uniform();
            double acc = 0;
            int pick = net.n_actions() - 1;
            for (int a = 0; a < net.n_actions(); ++a) {
                acc += probs[static_cast<size_t>(a)];
                if (u < acc) {
                    pick = a;
                    break;
                }
            }
            StepResult r = env.step(pick);
            total += r.reward;
            obs = r.stack;
            if (eval_steps) ++*eval_steps;
        }
        scores.push_back(total);
    }
    return scores;
}

inline std::vector<double> evaluate_random(const EnvSpec& spec, double sticky_p, int episodes, Rng& rng,
                                           int64_t* eval_steps = nullptr) {
    std::vector<double> scores;
    for (int ep = 0; ep < episodes; ++ep) {
        EnvSpec s = spec;
        s.seed = rng.next_u64();
        Env env = make_env(s);
        if (sticky_p > 0) env.set_sticky(sticky_p);
        double total = 0;
        while (!env.done()) {
            total += env.step(static_cast<int>(rng.below(3))).reward;
            if (eval_steps) ++*eval_steps;
        }
        scores.push_back(total);
    }
    return scores;
}

// ---------------------------------------------------------------------------
// Real-environment collection with the current policy
// ---------------------------------------------------------------------------

struct RealCollection {
    PPOBatch ppo_batch;  // GAE-processed, ready for an update
    int64_t steps = 0;
};

/// Collects exactly n steps into the buffer with the sampling policy, and
/// simultaneously assembles the PPO batch for the direct real-data update.
inline RealCollection collect_real(Env& env, const PolicyNet& net, const PPOConfig& cfg, float gamma,
                                   int64_t n, ReplayBuffer& buffer, Rng& rng, bool build_ppo_batch) {
    RealCollection out;
    ObservationStack obs = env.reset();
    buffer.begin_episode(obs[3]);

    std::vector<ObservationStack> seg_stacks;
    std::vector<int> seg_actions;
    std::vector<float> seg_rewards, seg_values, seg_logp;

    auto flush_segment = [&](float bootstrap) {
        if (seg_stacks.empty()) return;
        std::vector<float> adv = gae<float>(seg_rewards, seg_values, bootstrap, gamma, cfg.gae_lambda);
        for (size_t i = 0; i < seg_stacks.size(); ++i) {
            out.ppo_batch.stacks.push_back(seg_stacks[i]);
            out.ppo_batch.actions.push_back(seg_actions[i]);
            out.ppo_batch.old_log_probs.push_back(seg_logp[i]);
            out.ppo_batch.advantages.push_back(adv[i]);
            out.ppo_batch.returns.push_back(adv[i] + seg_values[i]);
        }
        seg_stacks.clear();
        seg_actions.clear();
        seg_rewards.clear();
        seg_values.clear();
        seg_logp.clear();
    };

    for (int64_t i = 0; i < n; ++i) {
        auto [logits, values] = net.forward_batch({obs});
        std::vector<double> row(static_cast<size_t>(net.n_actions()));
        for (int a = 0; a < net.n_actions(); ++a) row[static_cast<size_t>(a)] = logits[a];
        auto probs = eval_policy(row, 1.0);
        const double u = rng.uniform();
        double acc = 0;
        int pick = net.n_actions() - 1;
        for (int a = 0; a < net.n_actions(); ++a) {
            acc += probs[static_cast<size_t>(a)];
            if (u < acc) {
                pick = a;
                break;
            }
        }
        StepResult r = env.step(pick);
        buffer.push_step(pick, r.reward, r.stack[3], r.done);
        ++out.steps;
        if (build_ppo_batch) {
            seg_stacks.push_back(obs);
            seg_actions.push_back(pick);
            seg_rewards.push_back(static_cast<float>(r.reward));
            seg_values.push_back(values[0]);
            seg_logp.push_back(static_cast<float>(std::log(std::max(probs[static_cast<size_t>(pick)], 1e-12))));
        }
        obs = r.stack;
        if (r.done) {
            flush_segment(0.0f);
            if (i + 1 < n) {
                obs = env.reset();
                buffer.begin_episode(obs[3]);
            }
        }
    }
    if (build_ppo_batch && !seg_stacks.empty()) {
        auto [logits, values] = net.forward_batch({obs});
        flush_segment(values[0]);  // truncated mid-episode: bootstrap the tail
    }
    return out;
}

/// Uniform-random collection (initial data, dry runs).
inline int64_t collect_random(Env& env, int64_t n, ReplayBuffer& buffer, Rng& rng) {
    collect(env, random_policy(rng.split(0)), n, buffer);
    return n;
}

// ---------------------------------------------------------------------------
// Checkpointing
// ---------------------------------------------------------------------------

struct LoopState {
    int completed_iterations = 0;  // 0 = only the initial collection done
    int64_t global_model_step = 0;
    RunReport report;
    Rng model_rng, sim_rng, ppo_rng, eval_rng, collect_rng;
};

inline void save_checkpoint(const std::string& path, const RunConfig& rc, const LoopState& st,
                            const WorldModel& model, const Adam<float>& model_opt, const PolicyNet& policy,
                            const Adam<float>& policy_opt) {
    ArrayFile f;
    f.add_blob("meta/config", to_flat(rc).serialize());
    f.add_scalar_i64("meta/iteration", st.completed_iterations);
    f.add_scalar_i64("meta/global_model_step", st.global_model_step);
    f.add_scalar_i64("meta/seed", static_cast<int64_t>(st.report.seed));
    f.add_blob("meta/report", st.report.to_json().dump());
    f.add_blob("rng/model", st.model_rng.state());
    f.add_blob("rng/sim", st.sim_rng.state());
    f.add_blob("rng/ppo", st.ppo_rng.state());
    f.add_blob("rng/eval", st.eval_rng.state());
    f.add_blob("rng/collect", st.collect_rng.state());
    model.params().to_arrays(f, "wm/");
    model_opt.to_arrays(f, model.params(), "wm_adam/");
    policy.params().to_arrays(f, "pi/");
    policy_opt.to_arrays(f, policy.params(), "pi_adam/");
    f.save(path);
}

inline void load_checkpoint(const std::string& path, LoopState& st, WorldModel& model,
                            Adam<float>& model_opt, PolicyNet& policy, Adam<float>& policy_opt) {
    ArrayFile f = ArrayFile::load(path);
    st.completed_iterations = static_cast<int>(f.scalar_i64("meta/iteration"));
    st.global_model_step = f.scalar_i64("meta/global_model_step");
    st.report = RunReport::from_json(nlohmann::json::parse(f.blob("meta/report")));
    st.model_rng.restore(f.blob("rng/model"));
    st.sim_rng.restore(f.blob("rng/sim"));
    st.ppo_rng.restore(f.blob("rng/ppo"));
    st.eval_rng.restore(f.blob("rng/eval"));
    st.collect_rng.restore(f.blob("rng/collect"));
    model.params().from_arrays(f, "wm/");
    model_opt.from_arrays(f, model.params(), "wm_adam/");
    policy.params().from_arrays(f, "pi/");
    policy_opt.from_arrays(f, policy.params(), "pi_adam/");
}

inline int latest_checkpoint_iteration(const RunPaths& paths) {
    int best = -1;
    if (!std::filesystem::exists(paths.checkpoint_dir())) return best;
    for (const auto& e : std::filesystem::directory_iterator(paths.checkpoint_dir())) {
        const std::string name = e.path().filename().string();
        int it;
        if (std::sscanf(name.c_str(), "iter_%d.bin", &it) == 1) best = std::max(best, it);
    }
    return best;
}

// ---------------------------------------------------------------------------
// run_simple: Algorithm-1 end to end
// ---------------------------------------------------------------------------

/// max_new_iterations bounds how many loop iterations this session runs
/// (-1 = all remaining); a later call with resume=true continues the
/// schedule from the last checkpoint.
inline RunReport run_simple(const RunConfig& rc, uint64_t seed, const std::string& run_dir,
                            bool resume = false, int max_new_iterations = -1) {
    rc.loop.validate();
    RunPaths paths(run_dir);
    paths.prepare();
    RunLock lock(paths);

    const int frame_h = rc.env.height / Env::kDownscale;
    const int frame_w = rc.env.width / Env::kDownscale;

    Rng master(seed);
    LoopState st;
    st.model_rng = master.split(1);
    st.sim_rng = master.split(2);
    st.ppo_rng = master.split(3);
    st.eval_rng = master.split(4);
    st.collect_rng = master.split(5);

    WorldModel model(rc.model, frame_h, frame_w, detail::kActions, master.split(6).next_u64());
    Adam<float> model_opt(rc.model.learning_rate);
    model_opt.init(model.params());
    PolicyNet policy(frame_h, frame_w, detail::kActions, master.split(7).next_u64());
    Adam<float> policy_opt(rc.ppo.learning_rate);
    policy_opt.init(policy.params());

    ReplayBuffer buffer(rc.env);
    const int64_t first_iter_steps = plan(rc.loop, 1).model_steps;

    auto env_for_iteration = [&](int iteration) {
        EnvSpec s = rc.env;
        s.seed = seed * 7919 + static_cast<uint64_t>(iteration);
        Env env = make_env(s);
        if (rc.sticky_p > 0) env.set_sticky(rc.sticky_p);
        return env;
    };

    int start_iteration = 0;
    if (resume) {
        const int last = latest_checkpoint_iteration(paths);
        if (last >= 0) {
            load_checkpoint(paths.checkpoint_bin(last), st, model, model_opt, policy, policy_opt);
            buffer = ReplayBuffer::load(paths.buffer_bin());
            start_iteration = st.completed_iterations;
        } else {
            resume = false;
        }
    }

    CsvLog scores(paths.scores_csv(), "iteration,real_steps,sim_steps,eval_mean,eval_std");
    CsvLog model_losses(paths.model_losses_csv(), "step,total,pixel,reward,latent");
    CsvLog ppo_stats(paths.ppo_stats_csv(), "update,policy_loss,value_loss,entropy,clip_fraction,approx_kl");
    int64_t ppo_update_counter = 0;
    for (const auto& rec : st.report.iterations)
        ppo_update_counter += rec.ppo_epochs;  // keeps csv update ids monotone on resume

    if (!resume) {
        st.report = RunReport{};
        st.report.tag = rc.tag;
        st.report.seed = seed;
        st.report.config = to_flat(rc);
        std::ofstream cfg(paths.config_txt(), std::ios::trunc);
        cfg << st.report.config.serialize();

        if (!rc.loop.dry_run) {
            auto rnd_scores = evaluate_random(rc.env, rc.sticky_p, rc.loop.eval_episodes, st.eval_rng,
                                              &st.report.eval_real_steps);
            ScoreStats rs = score_stats(rnd_scores);
            st.report.random_eval_mean = rs.mean;
            st.report.random_eval_std = rs.stddev;
        }
        // Initial collection with the untrained (random) policy.
        Env env0 = env_for_iteration(0);
        st.report.real_interactions += collect_random(env0, rc.loop.scaled(rc.loop.initial_collection),
                                                      buffer, st.collect_rng);
        buffer.save(paths.buffer_bin());
        save_checkpoint(paths.checkpoint_bin(0), rc, st, model, model_opt, policy, policy_opt);
    }

    int last_iteration = rc.loop.iterations;
    if (max_new_iterations >= 0)
        last_iteration = std::min(last_iteration, start_iteration + max_new_iterations);
    for (int iter = start_iteration + 1; iter <= last_iteration; ++iter) {
        const IterationPlan p = plan(rc.loop, iter);
        IterationRecord rec;
        rec.iteration = iter;
        rec.model_steps = rc.loop.dry_run ? 0 : p.model_steps;
        rec.ppo_epochs = rc.loop.dry_run ? 0 : p.ppo_epochs;

        if (!rc.loop.dry_run) {
            detail::StageTimer t;
            try {
                auto trace = train_world_model(model, model_opt, buffer, p.model_steps, first_iter_steps,
                                               st.global_model_step, st.model_rng);
                for (const auto& r : trace) {
                    std::ostringstream os;
                    os << r.step << "," << r.parts.total << "," << r.parts.pixel << "," << r.parts.reward
                       << "," << r.parts.latent;
                    model_losses.row(os.str());
                }
            } catch (const std::exception& e) {
                detail::stage_fail(iter, "train_world_model", e);
            }
            rec.wall_model_s = t.seconds();
        }

        if (!rc.loop.dry_run) {
            detail::StageTimer t;
            try {
                BatchActor actor = make_policy_actor(policy, 1.0);
                BatchCritic critic = make_policy_critic(policy);
                PPOConfig cfg = rc.ppo;
                cfg.gamma = rc.loop.gamma;
                for (int64_t epoch = 0; epoch < p.ppo_epochs; ++epoch) {
                    RolloutBatch rb = rollout(model, actor, critic, buffer, rc.loop.n_agents,
                                              rc.loop.rollout_N, rc.loop.gamma, st.sim_rng,
                                              rc.loop.random_starts);
                    rec.sim_steps += rb.size();
                    PPOBatch batch = to_ppo_batch(rb, cfg.gae_lambda);
                    PPOStats stats = ppo_update(policy, policy_opt, batch, cfg, st.ppo_rng);
                    std::ostringstream os;
                    os << ++ppo_update_counter << "," << stats.policy_loss << "," << stats.value_loss << ","
                       << stats.entropy << "," << stats.clip_fraction << "," << stats.approx_kl;
                    ppo_stats.row(os.str());
                }
            } catch (const std::exception& e) {
                detail::stage_fail(iter, "train_rl", e);
            }
            rec.wall_rl_s = t.seconds();
            st.report.sim_interactions += rec.sim_steps;
        }

        {
            detail::StageTimer t;
            try {
                Env env = env_for_iteration(iter);
                const int64_t n = rc.loop.scaled(rc.loop.interactions_per_iter);
                if (rc.loop.dry_run) {
                    st.report.real_interactions += collect_random(env, n, buffer, st.collect_rng);
                } else {
                    PPOConfig cfg = rc.ppo;
                    cfg.gamma = rc.loop.gamma;
                    RealCollection rcoll = collect_real(env, policy, cfg, rc.loop.gamma, n, buffer,
                                                        st.collect_rng, rc.loop.mix_real_into_ppo);
                    st.report.real_interactions += rcoll.steps;
                    // The real data also trains the policy directly; the sim
                    // stream dwarfs it, but the mixing is part of the loop.
                    if (rc.loop.mix_real_into_ppo && rcoll.ppo_batch.size() > 0)
                        ppo_update(policy, policy_opt, rcoll.ppo_batch, cfg, st.ppo_rng);
                }
            } catch (const std::exception& e) {
                detail::stage_fail(iter, "collect", e);
            }
            rec.wall_collect_s = t.seconds();
        }

        if (!rc.loop.dry_run) {
            detail::StageTimer t;
            try {
                auto ev = evaluate_policy(policy, rc.env, rc.sticky_p, rc.loop.eval_episodes,
                                          rc.loop.eval_temperature, st.eval_rng, &st.report.eval_real_steps);
                ScoreStats es = score_stats(ev);
                rec.eval_mean = es.mean;
                rec.eval_std = es.stddev;
                if (iter == rc.loop.iterations) st.report.final_scores = ev;
            } catch (const std::exception& e) {
                detail::stage_fail(iter, "evaluate", e);
            }
            rec.wall_eval_s = t.seconds();
        }

        rec.real_steps_cum = st.report.real_interactions;
        st.report.iterations.push_back(rec);
        {
            std::ostringstream os;
            os << iter << "," << rec.real_steps_cum << "," << st.report.sim_interactions << ","
               << rec.eval_mean << "," << rec.eval_std;
            scores.row(os.str());
        }
        st.completed_iterations = iter;
        try {
            buffer.save(paths.buffer_bin());
            save_checkpoint(paths.checkpoint_bin(iter), rc, st, model, model_opt, policy, policy_opt);
        } catch (const std::exception& e) {
            detail::stage_fail(iter, "checkpoint", e);
        }
        st.report.final_eval_mean = rec.eval_mean;
        st.report.final_eval_std = rec.eval_std;
        st.report.save(paths.report_json());
    }
    if (rc.loop.dry_run || st.report.iterations.empty()) st.report.save(paths.report_json());
    return st.report;
}

// ---------------------------------------------------------------------------
// Real-environment PPO (the model-free baseline and fine-tuning)
// ---------------------------------------------------------------------------

struct RealPpoOptions {
    int n_envs = 8;
    int horizon = 64;
    int eval_every_cycles = 1;
};

/// PPO on the real environment. Trains for total_steps real interactions,
/// logging an evaluation point after every few update cycles; the resulting
/// scores.csv is the learning curve compare() consumes.
inline RunReport train_ppo_real(PolicyNet& policy, Adam<float>& policy_opt, const RunConfig& rc,
                                uint64_t seed, int64_t total_steps, const std::string& run_dir,
                                const std::string& tag, const RealPpoOptions& opt = {}) {
    RunPaths paths(run_dir);
    paths.prepare();
    RunLock lock(paths);

    Rng master(seed);
    Rng collect_rng = master.split(11);
    Rng ppo_rng = master.split(12);
    Rng eval_rng = master.split(13);

    RunReport report;
    report.tag = tag;
    report.seed = seed;
    report.config = to_flat(rc);
    {
        std::ofstream cfg(paths.config_txt(), std::ios::trunc);
        cfg << report.config.serialize();
    }
    CsvLog scores(paths.scores_csv(), "iteration,real_steps,sim_steps,eval_mean,eval_std");
    CsvLog ppo_stats(paths.ppo_stats_csv(), "update,policy_loss,value_loss,entropy,clip_fraction,approx_kl");

    auto rnd = evaluate_random(rc.env, rc.sticky_p, rc.loop.eval_episodes, eval_rng, &report.eval_real_steps);
    ScoreStats rs = score_stats(rnd);
    report.random_eval_mean = rs.mean;
    report.random_eval_std = rs.stddev;

    // Evaluation of the untrained policy anchors the curve at ~0 steps.
    auto ev0 = evaluate_policy(policy, rc.env, rc.sticky_p, rc.loop.eval_episodes, rc.loop.eval_temperature,
                               eval_rng, &report.eval_real_steps);
    ScoreStats es0 = score_stats(ev0);
    {
        std::ostringstream os;
        os << 0 << "," << 0 << "," << 0 << "," << es0.mean << "," << es0.stddev;
        scores.row(os.str());
    }
    report.final_eval_mean = es0.mean;
    report.final_eval_std = es0.stddev;
    report.final_scores = ev0;

    std::vector<Env> envs;
    std::vector<ObservationStack> obs;
    for (int e = 0; e < opt.n_envs; ++e) {
        EnvSpec s = rc.env;
        s.seed = seed * 515245 + static_cast<uint64_t>(e);
        envs.push_back(make_env(s));
        if (rc.sticky_p > 0) envs.back().set_sticky(rc.sticky_p);
        obs.push_back(envs.back().stack());
    }

    int64_t done_steps = 0, update_id = 0;
    int cycle = 0, record_iter = 0;
    while (done_steps < total_steps && total_steps > 0) {
        const int horizon =
            static_cast<int>(std::min<int64_t>(opt.horizon, (total_steps - done_steps + opt.n_envs - 1) / opt.n_envs));
        // Per-env segment accumulators for GAE at episode/truncation ends.
        PPOBatch batch;
        std::vector<std::vector<ObservationStack>> seg_stacks(static_cast<size_t>(opt.n_envs));
        std::vector<std::vector<int>> seg_actions(static_cast<size_t>(opt.n_envs));
        std::vector<std::vector<float>> seg_rewards(static_cast<size_t>(opt.n_envs));
        std::vector<std::vector<float>> seg_values(static_cast<size_t>(opt.n_envs));
        std::vector<std::vector<float>> seg_logp(static_cast<size_t>(opt.n_envs));
        auto flush = [&](int e, float bootstrap) {
            auto& ss = seg_stacks[static_cast<size_t>(e)];
            if (ss.empty()) return;
            std::vector<float> adv = gae<float>(seg_rewards[static_cast<size_t>(e)],
                                                seg_values[static_cast<size_t>(e)], bootstrap,
                                                rc.ppo.gamma, rc.ppo.gae_lambda);
            for (size_t i = 0; i < ss.size(); ++i) {
                batch.stacks.push_back(ss[i]);
                batch.actions.push_back(seg_actions[static_cast<size_t>(e)][i]);
                batch.old_log_probs.push_back(seg_logp[static_cast<size_t>(e)][i]);
                batch.advantages.push_back(adv[i]);
                batch.returns.push_back(adv[i] + seg_values[static_cast<size_t>(e)][i]);
            }
            ss.clear();
            seg_actions[static_cast<size_t>(e)].clear();
            seg_rewards[static_cast<size_t>(e)].clear();
            seg_values[static_cast<size_t>(e)].clear();
            seg_logp[static_cast<size_t>(e)].clear();
        };

        for (int h = 0; h < horizon; ++h) {
            auto [logits, values] = policy.forward_batch(obs);
            for (int e = 0; e < opt.n_envs; ++e) {
                std::vector<double> row(static_cast<size_t>(policy.n_actions()));
                for (int a = 0; a < policy.n_actions(); ++a)
                    row[static_cast<size_t>(a)] = logits[e * policy.n_actions() + a];
                auto probs = eval_policy(row, 1.0);
                const double u = collect_rng.uniform();
                double acc = 0;
                int pick = policy.n_actions() - 1;
                for (int a = 0; a < policy.n_actions(); ++a) {
                    acc += probs[static_cast<size_t>(a)];
                    if (u < acc) {
                        pick = a;
                        break;
                    }
                }
                StepResult r = envs[static_cast<size_t>(e)].step(pick);
                seg_stacks[static_cast<size_t>(e)].push_back(obs[static_cast<size_t>(e)]);
                seg_actions[static_cast<size_t>(e)].push_back(pick);
                seg_rewards[static_cast<size_t>(e)].push_back(static_cast<float>(r.reward));
                seg_values[static_cast<size_t>(e)].push_back(values[e]);
                seg_logp[static_cast<size_t>(e)].push_back(
                    static_cast<float>(std::log(std::max(probs[static_cast<size_t>(pick)], 1e-12))));
                ++done_steps;
                obs[static_cast<size_t>(e)] = r.stack;
                if (r.done) {
                    flush(e, 0.0f);
                    obs[static_cast<size_t>(e)] = envs[static_cast<size_t>(e)].reset();
                }
            }
        }
        {
            auto [logits, values] = policy.forward_batch(obs);
            for (int e = 0; e < opt.n_envs; ++e) flush(e, values[e]);
        }
        if (batch.size() > 0) {
            PPOStats stats = ppo_update(policy, policy_opt, batch, rc.ppo, ppo_rng);
            std::ostringstream os;
            os << ++update_id << "," << stats.policy_loss << "," << stats.value_loss << "," << stats.entropy
               << "," << stats.clip_fraction << "," << stats.approx_kl;
            ppo_stats.row(os.str());
        }
        ++cycle;
        if (cycle % opt.eval_every_cycles == 0 || done_steps >= total_steps) {
            auto ev = evaluate_policy(policy, rc.env, rc.sticky_p, rc.loop.eval_episodes,
                                      rc.loop.eval_temperature, eval_rng, &report.eval_real_steps);
            ScoreStats es = score_stats(ev);
            IterationRecord rec;
            rec.iteration = ++record_iter;
            rec.real_steps_cum = done_steps;
            rec.eval_mean = es.mean;
            rec.eval_std = es.stddev;
            report.iterations.push_back(rec);
            std::ostringstream os;
            os << record_iter << "," << done_steps << "," << 0 << "," << es.mean << "," << es.stddev;
            scores.row(os.str());
            report.final_eval_mean = es.mean;
            report.final_eval_std = es.stddev;
            report.final_scores = ev;
        }
    }
    report.real_interactions = done_steps;
    report.save(paths.report_json());
    return report;
}

inline RunReport train_ppo_baseline(const RunConfig& rc, uint64_t seed, int64_t total_steps,
                                    const std::string& run_dir) {
    Rng master(seed);
    PolicyNet policy(rc.env.height / Env::kDownscale, rc.env.width / Env::kDownscale, detail::kActions,
                     master.split(7).next_u64());
    Adam<float> opt(rc.ppo.learning_rate);
    opt.init(policy.params());
    RunConfig tagged = rc;
    tagged.tag = "ppo-baseline";
    return train_ppo_real(policy, opt, tagged, seed, total_steps, run_dir, "ppo-baseline");
}

/// Continues PPO on the real environment from a SimPLe-trained policy
/// checkpoint. n_steps = 0 produces an evaluation-only report.
inline RunReport finetune_real(const std::string& checkpoint_path, const RunConfig& rc, uint64_t seed,
                               int64_t n_steps, const std::string& run_dir) {
    ArrayFile f = ArrayFile::load(checkpoint_path);
    RunConfig ck_rc = rc;
    {  // the checkpoint's env geometry wins; it defines the policy shapes
        FlatConfig stored = FlatConfig::parse(f.blob("meta/config"));
        RunConfig from_ck;
        apply_flat(from_ck, stored);
        ck_rc.env = from_ck.env;
    }
    PolicyNet policy(ck_rc.env.height / Env::kDownscale, ck_rc.env.width / Env::kDownscale,
                     detail::kActions, 0);
    Adam<float> opt(ck_rc.ppo.learning_rate);
    opt.init(policy.params());
    try {
        policy.params().from_arrays(f, "pi/");
    } catch (const std::exception& e) {
        throw std::runtime_error(std::string("incompatible checkpoint: ") + e.what());
    }
    RunConfig tagged = ck_rc;
    tagged.tag = "simple+ppo";
    return train_ppo_real(policy, opt, tagged, seed, n_steps, run_dir, "simple+ppo");
}

}  // namespace simple
