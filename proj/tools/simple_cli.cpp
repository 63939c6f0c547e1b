// Command-line surface: training, evaluation, comparison, and plotting.
//
// Exit codes: 0 success, 2 usage error, 3 runtime failure.

#include <cstdlib>
#include <filesystem>
#include <iostream>

#include <CLI11.hpp>

#include "simple/compare.hpp"
#include "simple/loop.hpp"
#include "simple/model_train.hpp"

namespace fs = std::filesystem;
using namespace simple;

namespace {

struct CommonOpts {
    std::string env_name;
    std::string preset_name;
    std::string config_file;
    std::string out_dir;
    std::vector<std::string> sets;
    std::vector<uint64_t> seeds{1};
};

void add_common(CLI::App* cmd, CommonOpts& o, bool with_seeds = true) {
    cmd->add_option("--env", o.env_name, "environment name (mini_pong | mini_cross)");
    cmd->add_option("--preset", o.preset_name, "named preset configuration")
        ->check(CLI::IsMember(preset_names()));
    cmd->add_option("--config", o.config_file, "flat key=value config file");
    cmd->add_option("--out", o.out_dir, "output run directory");
    cmd->add_option("--set", o.sets, "config override, key=value (repeatable)");
    if (with_seeds) cmd->add_option("--seed", o.seeds, "run seed (repeatable for multi-seed runs)");
}

RunConfig resolve(const CommonOpts& o) {
    FlatConfig file;
    if (!o.config_file.empty()) {
        std::ifstream is(o.config_file);
        if (!is) throw std::runtime_error("cannot open config file '" + o.config_file + "'");
        std::stringstream ss;
        ss << is.rdbuf();
        file = FlatConfig::parse(ss.str());
    }
    FlatConfig overrides;
    for (const auto& kv : o.sets) {
        const auto eq = kv.find('=');
        if (eq == std::string::npos) throw std::runtime_error("--set expects key=value, got '" + kv + "'");
        overrides.set(kv.substr(0, eq), kv.substr(eq + 1));
    }
    if (!o.env_name.empty()) overrides.set("env.name", o.env_name);
    RunConfig rc = resolve_config(o.preset_name, file, overrides);
    rc.seeds = o.seeds;
    return rc;
}

std::string default_out_root() {
    if (const char* root = std::getenv("SIMPLE_RUN_ROOT")) return root;
    return "runs";
}

std::string out_dir_for(const CommonOpts& o, const std::string& kind, const RunConfig& rc) {
    if (!o.out_dir.empty()) return o.out_dir;
    std::string name = kind + "-" + rc.env.name;
    if (!o.preset_name.empty()) name += "-" + o.preset_name;
    return (fs::path(default_out_root()) / name).string();
}

std::string seed_dir(const std::string& base, uint64_t seed) {
    return (fs::path(base) / ("seed_" + std::to_string(seed))).string();
}

int run_train_simple(const CommonOpts& o, bool resume, int max_new, bool dry_run) {
    RunConfig rc = resolve(o);
    if (dry_run) rc.loop.dry_run = true;
    const std::string base = out_dir_for(o, "simple", rc);
    for (uint64_t seed : rc.seeds) {
        const std::string dir = seed_dir(base, seed);
        if (fs::exists(fs::path(dir) / "report.json") && !resume)
            throw std::runtime_error("run directory '" + dir + "' already holds a report; use --resume or a fresh --out");
        RunReport rep = run_simple(rc, seed, dir, resume, max_new);
        std::cout << "run " << dir << ": real=" << rep.real_interactions << " sim=" << rep.sim_interactions
                  << " final_eval=" << rep.final_eval_mean << " (+-" << rep.final_eval_std << ")\n";
    }
    std::cout << "reports under " << base << "\n";
    return 0;
}

int run_baseline(const CommonOpts& o, int64_t steps) {
    RunConfig rc = resolve(o);
    const std::string base = out_dir_for(o, "ppo-baseline", rc);
    const int64_t budget = steps > 0 ? steps : planned_real_interactions(rc.loop);
    for (uint64_t seed : rc.seeds) {
        RunReport rep = train_ppo_baseline(rc, seed, budget, seed_dir(base, seed));
        std::cout << "baseline seed " << seed << ": steps=" << rep.real_interactions
                  << " final_eval=" << rep.final_eval_mean << "\n";
    }
    std::cout << "reports under " << base << "\n";
    return 0;
}

int run_train_world_model(const CommonOpts& o, int64_t interactions, int64_t steps) {
    RunConfig rc = resolve(o);
    const std::string dir = out_dir_for(o, "world-model", rc);
    const uint64_t seed = rc.seeds.at(0);
    RunPaths paths(dir);
    paths.prepare();
    RunLock lock(paths);

    Rng master(seed);
    Rng collect_rng = master.split(5);
    Rng model_rng = master.split(1);
    EnvSpec spec = rc.env;
    spec.seed = seed * 7919;
    Env env = make_env(spec);
    ReplayBuffer buffer(rc.env);
    collect(env, random_policy(collect_rng.split(0)), interactions, buffer);
    buffer.save(paths.buffer_bin());

    const int fh = rc.env.height / Env::kDownscale, fw = rc.env.width / Env::kDownscale;
    WorldModel model(rc.model, fh, fw, 3, master.split(6).next_u64());
    Adam<float> opt(rc.model.learning_rate);
    opt.init(model.params());
    const int64_t n_steps = steps > 0 ? steps : plan(rc.loop, 1).model_steps;
    int64_t gstep = 0;
    CsvLog losses(paths.model_losses_csv(), "step,total,pixel,reward,latent");
    auto trace = train_world_model(model, opt, buffer, n_steps, n_steps, gstep, model_rng);
    for (const auto& r : trace) {
        std::ostringstream os;
        os << r.step << "," << r.parts.total << "," << r.parts.pixel << "," << r.parts.reward << ","
           << r.parts.latent;
        losses.row(os.str());
    }

    Rng eval_rng = master.split(4);
    auto samples = sample_eval_positions(buffer, 256, eval_rng);
    PixelEval ev = eval_one_step(model, buffer, samples, eval_rng);
    const double roll_acc = eval_rollout_accuracy(model, buffer, 24, 10, eval_rng);

    ArrayFile ck;
    ck.add_blob("meta/config", to_flat(rc).serialize());
    ck.add_scalar_i64("meta/global_model_step", gstep);
    model.params().to_arrays(ck, "wm/");
    opt.to_arrays(ck, model.params(), "wm_adam/");
    ck.save((fs::path(dir) / "model.bin").string());

    nlohmann::json j;
    j["interactions"] = interactions;
    j["steps"] = n_steps;
    j["one_step_pixel_accuracy"] = ev.accuracy;
    j["one_step_pixel_ce"] = ev.ce;
    j["one_step_reward_accuracy"] = ev.reward_accuracy;
    j["rollout10_pixel_accuracy"] = roll_acc;
    std::ofstream os((fs::path(dir) / "model_eval.json").string());
    os << j.dump(2) << "\n";
    std::cout << "one-step accuracy " << ev.accuracy << ", CE " << ev.ce << ", 10-step rollout accuracy "
              << roll_acc << "\n";
    std::cout << "model written to " << dir << "\n";
    return 0;
}

int run_finetune(const CommonOpts& o, const std::string& checkpoint, int64_t steps) {
    RunConfig rc = resolve(o);
    const std::string base = out_dir_for(o, "finetune", rc);
    for (uint64_t seed : rc.seeds) {
        RunReport rep = finetune_real(checkpoint, rc, seed, steps, seed_dir(base, seed));
        std::cout << "finetune seed " << seed << ": steps=" << rep.real_interactions
                  << " final_eval=" << rep.final_eval_mean << " tag=" << rep.tag << "\n";
    }
    return 0;
}

int run_evaluate(const std::string& checkpoint, int episodes, double temperature, uint64_t seed) {
    ArrayFile f = ArrayFile::load(checkpoint);
    RunConfig rc;
    apply_flat(rc, FlatConfig::parse(f.blob("meta/config")));
    PolicyNet policy(rc.env.height / Env::kDownscale, rc.env.width / Env::kDownscale, 3, 0);
    policy.params().from_arrays(f, "pi/");
    Rng rng(seed);
    auto scores = evaluate_policy(policy, rc.env, rc.sticky_p, episodes, temperature, rng);
    ScoreStats st = score_stats(scores);
    std::cout << "episodes " << episodes << " temperature " << temperature << " mean " << st.mean
              << " std " << st.stddev << " median " << st.median << " max " << st.max << "\n";
    return 0;
}

int run_compare(const std::vector<std::string>& simple_dirs, const std::string& baseline_dir,
                const std::string& out_dir) {
    std::vector<std::string> runs;
    for (const auto& d : simple_dirs)
        for (const auto& r : expand_run_dirs(d)) runs.push_back(r);
    const auto baselines = expand_run_dirs(baseline_dir);
    CompareResult res = compare_runs(runs, baselines.front());
    fs::create_directories(out_dir);
    write_compare_csv(res, (fs::path(out_dir) / "compare.csv").string());
    emit_compare_bar_plot(res, (fs::path(out_dir) / "steps_to_match.svg").string());
    std::cout << "simple median " << res.simple_scores.median << " vs baseline@budget "
              << res.baseline_at_budget << " (random " << res.random_score << ")\n";
    if (res.match_steps) std::cout << "steps to match: " << *res.match_steps << "\n";
    else std::cout << "steps to match: beyond-horizon\n";
    std::cout << "tables in " << out_dir << "\n";
    return 0;
}

int run_plot(const std::vector<std::string>& run_dirs, const std::string& baseline_dir,
             const std::string& out_dir) {
    std::vector<std::string> runs;
    for (const auto& d : run_dirs)
        for (const auto& r : expand_run_dirs(d)) runs.push_back(r);
    if (runs.empty()) throw std::runtime_error("plot: no run directories");
    fs::create_directories(out_dir);
    emit_score_plot(runs, (fs::path(out_dir) / "score_curves.svg").string());
    emit_cdf_plot(runs, (fs::path(out_dir) / "best_iteration_cdf.svg").string());
    for (const auto& r : runs) {
        if (fs::exists(fs::path(r) / "model_losses.csv")) {
            emit_loss_plot(r, (fs::path(out_dir) / "model_losses.svg").string());
            break;
        }
    }
    if (!baseline_dir.empty()) {
        CompareResult res = compare_runs(runs, expand_run_dirs(baseline_dir).front());
        emit_compare_bar_plot(res, (fs::path(out_dir) / "steps_to_match.svg").string());
    }
    std::cout << "plots in " << out_dir << "\n";
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"model-based RL on learned pixel world models"};
    app.require_subcommand(1);

    CommonOpts ts_opts;
    bool ts_resume = false, ts_dry = false;
    int ts_max_new = -1;
    auto* ts = app.add_subcommand("train-simple", "full training loop: collect, model, policy, repeat");
    add_common(ts, ts_opts);
    ts->add_flag("--resume", ts_resume, "continue from the latest checkpoint in the run directory");
    ts->add_flag("--dry-run", ts_dry, "accounting only: no training, no evaluation");
    ts->add_option("--max-new-iterations", ts_max_new, "loop iterations to run this session");

    CommonOpts bl_opts;
    int64_t bl_steps = 0;
    auto* bl = app.add_subcommand("train-ppo-baseline", "model-free PPO on the real environment");
    add_common(bl, bl_opts);
    bl->add_option("--steps", bl_steps, "real interaction budget (default: the loop schedule's budget)");

    CommonOpts wm_opts;
    int64_t wm_interactions = 1500, wm_steps = 0;
    auto* wm = app.add_subcommand("train-world-model", "collect random data and train a world model");
    add_common(wm, wm_opts);
    wm->add_option("--interactions", wm_interactions, "random interactions to collect");
    wm->add_option("--steps", wm_steps, "training steps (default: first-iteration schedule)");

    CommonOpts ft_opts;
    std::string ft_checkpoint;
    int64_t ft_steps = 0;
    auto* ft = app.add_subcommand("finetune", "continue PPO on the real environment from a checkpoint");
    add_common(ft, ft_opts);
    ft->add_option("--checkpoint", ft_checkpoint, "loop checkpoint file")->required();
    ft->add_option("--steps", ft_steps, "real interactions of fine-tuning (0 = evaluate only)");

    std::string ev_checkpoint;
    int ev_episodes = 8;
    double ev_temperature = 0.5;
    uint64_t ev_seed = 1;
    auto* ev = app.add_subcommand("evaluate", "evaluate a checkpointed policy");
    ev->add_option("--checkpoint", ev_checkpoint, "loop checkpoint file")->required();
    ev->add_option("--episodes", ev_episodes, "evaluation episodes");
    ev->add_option("--temperature", ev_temperature, "softmax sampling temperature (0 = greedy)");
    ev->add_option("--seed", ev_seed, "evaluation seed");

    std::vector<std::string> cp_simple;
    std::string cp_baseline, cp_out = "compare-out";
    auto* cp = app.add_subcommand("compare", "steps-to-match and fraction tables vs a baseline");
    cp->add_option("--simple", cp_simple, "SimPLe run directory (repeatable)")->required();
    cp->add_option("--baseline", cp_baseline, "baseline run directory")->required();
    cp->add_option("--out", cp_out, "output directory");

    std::vector<std::string> pl_runs;
    std::string pl_baseline, pl_out = "plots";
    auto* pl = app.add_subcommand("plot", "render score curves, CDFs and bar charts");
    pl->add_option("--run", pl_runs, "run directory (repeatable)")->required();
    pl->add_option("--baseline", pl_baseline, "baseline run directory for the bar chart");
    pl->add_option("--out", pl_out, "output directory");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? 0 : 2;
    }

    try {
        if (ts->parsed()) return run_train_simple(ts_opts, ts_resume, ts_max_new, ts_dry);
        if (bl->parsed()) return run_baseline(bl_opts, bl_steps);
        if (wm->parsed()) return run_train_world_model(wm_opts, wm_interactions, wm_steps);
        if (ft->parsed()) return run_finetune(ft_opts, ft_checkpoint, ft_steps);
        if (ev->parsed()) return run_evaluate(ev_checkpoint, ev_episodes, ev_temperature, ev_seed);
        if (cp->parsed()) return run_compare(cp_simple, cp_baseline, cp_out);
        if (pl->parsed()) return run_plot(pl_runs, pl_baseline, pl_out);
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 3;
    }
    return 0;
}
