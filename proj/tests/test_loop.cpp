#include <gtest/gtest.h>

#include <filesystem>

#include "simple/loop.hpp"

using namespace simple;

namespace {

RunConfig tiny_run_config() {
    RunConfig rc;
    rc.env = {.name = "mini_pong", .episode_cap = 240, .seed = 0};
    rc.model.variant = ModelConfig::Variant::deterministic;
    rc.model.downscale_levels = 2;
    rc.model.base_channels = 4;
    rc.model.max_channels = 8;
    rc.model.dropout = 0.0f;
    rc.model.dense_dropout = 0.0f;
    rc.model.batch_size = 4;
    rc.loop.iterations = 2;
    rc.loop.initial_collection = 40;
    rc.loop.interactions_per_iter = 40;
    rc.loop.model_steps_first = 6;
    rc.loop.model_steps_rest = 3;
    rc.loop.ppo_epoch_unit = 1;
    rc.loop.n_agents = 2;
    rc.loop.rollout_N = 4;
    rc.loop.eval_episodes = 2;
    rc.ppo.minibatch_size = 8;
    rc.ppo.epochs_per_batch = 1;
    return rc;
}

std::string fresh_dir(const std::string& name) {
    auto dir = std::filesystem::temp_directory_path() / name;
    std::filesystem::remove_all(dir);
    return dir.string();
}

}  // namespace

TEST(Plan, PaperScaleSchedule) {
    LoopConfig cfg;  // paper-scale defaults
    EXPECT_EQ(plan(cfg, 1).model_steps, 45000);
    for (int i = 2; i <= 15; ++i) EXPECT_EQ(plan(cfg, i).model_steps, 15000);
    const std::vector<int> want_z = {1, 1, 1, 1, 1, 1, 1, 2, 1, 1, 1, 2, 1, 1, 3};
    for (int i = 1; i <= 15; ++i) {
        EXPECT_EQ(plan(cfg, i).z, want_z[static_cast<size_t>(i - 1)]) << "iteration " << i;
        EXPECT_EQ(plan(cfg, i).ppo_epochs, want_z[static_cast<size_t>(i - 1)] * 1000);
        EXPECT_EQ(plan(cfg, i).sim_interactions, int64_t(want_z[static_cast<size_t>(i - 1)]) * 800000);
    }
    EXPECT_THROW(plan(cfg, 0), std::out_of_range);
    EXPECT_THROW(plan(cfg, 16), std::out_of_range);
}

TEST(Plan, LongTrainingMultiplier) {
    LoopConfig cfg;
    cfg.long_training_multiplier = 5;
    EXPECT_EQ(plan(cfg, 1).model_steps, 225000);
    EXPECT_EQ(plan(cfg, 2).model_steps, 75000);
}

TEST(Plan, DeskScaleDividesCountsNotStructure) {
    LoopConfig cfg;
    cfg.scale = 32;
    EXPECT_EQ(cfg.scaled(6400), 200);
    EXPECT_EQ(planned_real_interactions(cfg), 200 + 15 * 200);
    EXPECT_EQ(plan(cfg, 1).model_steps, 45000 / 32);
    EXPECT_EQ(plan(cfg, 15).z, 3);  // structure intact
}

TEST(Plan, PaperScaleRealInteractionAccounting) {
    LoopConfig cfg;
    EXPECT_EQ(planned_real_interactions(cfg), 102400);
}

TEST(Config, LayeredResolutionAndUnknownKeys) {
    FlatConfig file = FlatConfig::parse("loop.rollout_N = 25\n# comment\nppo.gamma = 0.9\n");
    FlatConfig flags;
    flags.set("loop.rollout_N", "100");
    RunConfig rc = resolve_config("desk", file, flags);
    EXPECT_EQ(rc.loop.scale, 32);          // from preset
    EXPECT_EQ(rc.loop.rollout_N, 100);     // flag beats file
    EXPECT_FLOAT_EQ(rc.ppo.gamma, 0.9f);   // file beats preset
    FlatConfig bad;
    bad.set("loop.not_a_key", "1");
    EXPECT_THROW(resolve_config("", FlatConfig{}, bad), std::invalid_argument);
    EXPECT_THROW(preset("nope"), std::invalid_argument);
}

TEST(Config, AblationPresets) {
    RunConfig n25 = resolve_config("sd-n25", {}, {});
    EXPECT_EQ(n25.loop.rollout_N, 25);
    RunConfig nrs = resolve_config("no-random-starts", {}, {});
    EXPECT_FALSE(nrs.loop.random_starts);
    EXPECT_EQ(nrs.loop.rollout_N, 1000);
    RunConfig g90 = resolve_config("sd-gamma90", {}, {});
    EXPECT_FLOAT_EQ(g90.loop.gamma, 0.90f);
}

TEST(Config, RoundTrip) {
    RunConfig rc = resolve_config("desk", {}, {});
    FlatConfig echoed = to_flat(rc);
    RunConfig rc2;
    apply_flat(rc2, FlatConfig::parse(echoed.serialize()));
    EXPECT_EQ(to_flat(rc2).serialize(), echoed.serialize());
}

TEST(RunSimple, AccountingExactAndReportWritten) {
    RunConfig rc = tiny_run_config();
    const std::string dir = fresh_dir("simple_loop_test");
    RunReport rep = run_simple(rc, 1, dir);
    EXPECT_EQ(rep.real_interactions, 40 + 2 * 40);
    EXPECT_EQ(rep.iterations.size(), 2u);
    // Sim accounting: iteration 1: z=1 -> 1 epoch * 2 agents * 4 steps; iteration 2 (last): z=3.
    EXPECT_EQ(rep.sim_interactions, (1 + 3) * 2 * 4);
    EXPECT_TRUE(std::filesystem::exists(dir + "/report.json"));
    EXPECT_TRUE(std::filesystem::exists(dir + "/scores.csv"));
    EXPECT_TRUE(std::filesystem::exists(dir + "/buffer.bin"));
    RunReport loaded = RunReport::load(dir + "/report.json");
    EXPECT_EQ(loaded.real_interactions, rep.real_interactions);
    EXPECT_EQ(loaded.tag, "simple");
    std::filesystem::remove_all(dir);
}

TEST(RunSimple, DryRunAccountingOnly) {
    RunConfig rc = tiny_run_config();
    rc.loop.dry_run = true;
    rc.loop.iterations = 15;
    const std::string dir = fresh_dir("simple_dry_test");
    RunReport rep = run_simple(rc, 3, dir);
    EXPECT_EQ(rep.real_interactions, 40 + 15 * 40);
    EXPECT_EQ(rep.sim_interactions, 0);
    std::filesystem::remove_all(dir);
}

TEST(RunSimple, SeededCountersAreReproducible) {
    RunConfig rc = tiny_run_config();
    const std::string d1 = fresh_dir("simple_rep_a");
    const std::string d2 = fresh_dir("simple_rep_b");
    RunReport a = run_simple(rc, 7, d1);
    RunReport b = run_simple(rc, 7, d2);
    EXPECT_EQ(a.real_interactions, b.real_interactions);
    EXPECT_EQ(a.sim_interactions, b.sim_interactions);
    ASSERT_EQ(a.iterations.size(), b.iterations.size());
    for (size_t i = 0; i < a.iterations.size(); ++i) {
        EXPECT_EQ(a.iterations[i].real_steps_cum, b.iterations[i].real_steps_cum);
        EXPECT_EQ(a.iterations[i].eval_mean, b.iterations[i].eval_mean);
    }
    std::filesystem::remove_all(d1);
    std::filesystem::remove_all(d2);
}

TEST(RunSimple, ResumeCompletesScheduleWithIdenticalCounters) {
    RunConfig rc3 = tiny_run_config();
    rc3.loop.iterations = 3;
    const std::string full_dir = fresh_dir("simple_full");
    RunReport full = run_simple(rc3, 5, full_dir);

    const std::string part_dir = fresh_dir("simple_part");
    run_simple(rc3, 5, part_dir, /*resume=*/false, /*max_new_iterations=*/1);
    RunReport resumed = run_simple(rc3, 5, part_dir, /*resume=*/true);

    EXPECT_EQ(resumed.real_interactions, full.real_interactions);
    EXPECT_EQ(resumed.sim_interactions, full.sim_interactions);
    ASSERT_EQ(resumed.iterations.size(), full.iterations.size());
    for (size_t i = 0; i < full.iterations.size(); ++i) {
        EXPECT_EQ(resumed.iterations[i].real_steps_cum, full.iterations[i].real_steps_cum);
        EXPECT_EQ(resumed.iterations[i].eval_mean, full.iterations[i].eval_mean) << "iteration " << i;
    }
    std::filesystem::remove_all(full_dir);
    std::filesystem::remove_all(part_dir);
}

TEST(Checkpoint, SaveLoadSaveIsByteIdentical) {
    RunConfig rc = tiny_run_config();
    rc.loop.iterations = 1;
    const std::string dir = fresh_dir("simple_ckpt");
    run_simple(rc, 9, dir);
    RunPaths paths(dir);
    const std::string p1 = paths.checkpoint_bin(1);

    // Load everything back and re-save; bytes must match.
    Rng master(9);
    const int fh = rc.env.height / Env::kDownscale, fw = rc.env.width / Env::kDownscale;
    WorldModel model(rc.model, fh, fw, 3, 1);
    Adam<float> mopt(rc.model.learning_rate);
    mopt.init(model.params());
    PolicyNet policy(fh, fw, 3, 2);
    Adam<float> popt(rc.ppo.learning_rate);
    popt.init(policy.params());
    LoopState st;
    load_checkpoint(p1, st, model, mopt, policy, popt);
    const std::string p2 = (std::filesystem::temp_directory_path() / "ckpt_resaved.bin").string();
    save_checkpoint(p2, rc, st, model, mopt, policy, popt);

    std::ifstream f1(p1, std::ios::binary), f2(p2, std::ios::binary);
    std::vector<char> b1((std::istreambuf_iterator<char>(f1)), std::istreambuf_iterator<char>());
    std::vector<char> b2((std::istreambuf_iterator<char>(f2)), std::istreambuf_iterator<char>());
    EXPECT_EQ(b1, b2);
    std::filesystem::remove_all(dir);
    std::filesystem::remove(p2);
}

TEST(Baseline, TrainsForExactBudget) {
    RunConfig rc = tiny_run_config();
    const std::string dir = fresh_dir("simple_baseline");
    RunReport rep = train_ppo_baseline(rc, 2, 256, dir);
    EXPECT_EQ(rep.real_interactions, 256);
    EXPECT_EQ(rep.tag, "ppo-baseline");
    EXPECT_FALSE(rep.iterations.empty());
    std::filesystem::remove_all(dir);
}

TEST(Finetune, ZeroStepsIsEvaluationOnly) {
    RunConfig rc = tiny_run_config();
    rc.loop.iterations = 1;
    const std::string dir = fresh_dir("simple_ft_src");
    run_simple(rc, 4, dir);
    const std::string ft_dir = fresh_dir("simple_ft_out");
    RunPaths paths(dir);
    RunReport rep = finetune_real(paths.checkpoint_bin(1), rc, 4, 0, ft_dir);
    EXPECT_EQ(rep.tag, "simple+ppo");
    EXPECT_EQ(rep.real_interactions, 0);
    EXPECT_FALSE(rep.final_scores.empty());
    std::filesystem::remove_all(dir);
    std::filesystem::remove_all(ft_dir);
}

TEST(Finetune, IncompatibleCheckpointRejected) {
    RunConfig rc = tiny_run_config();
    const std::string dir = fresh_dir("simple_ft_bad");
    std::filesystem::create_directories(dir);
    ArrayFile junk;
    junk.add_blob("meta/config", to_flat(rc).serialize());
    junk.add_blob("something", "else");
    const std::string path = dir + "/bad.bin";
    junk.save(path);
    EXPECT_THROW(finetune_real(path, rc, 1, 0, dir + "/out"), std::runtime_error);
    std::filesystem::remove_all(dir);
}

TEST(RunLockGuard, SecondWriterFailsFast) {
    const std::string dir = fresh_dir("simple_lock");
    RunPaths paths(dir);
    paths.prepare();
    RunLock lock(paths);
    EXPECT_THROW(RunLock second(paths), std::runtime_error);
    std::filesystem::remove_all(dir);
}
