#pragma once

#include <map>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "simple/env.hpp"
#include "simple/ppo.hpp"
#include "simple/world_model.hpp"

namespace simple {

// ---------------------------------------------------------------------------
// Flat dotted-key config text, e.g. "model.latent_bits = 32". Comments start
// with '#'. Chosen for diff-friendliness; keys are validated against the
// known set (unknown keys are rejected, never silently ignored).
// ---------------------------------------------------------------------------

class FlatConfig {
public:
    void set(const std::string& key, const std::string& value) { kv_[key] = value; }
    bool has(const std::string& key) const { return kv_.count(key) != 0; }
    const std::map<std::string, std::string>& items() const { return kv_; }

    const std::string& raw(const std::string& key) const {
        auto it = kv_.find(key);
        if (it == kv_.end()) throw std::invalid_argument("missing config key '" + key + "'");
        return it->second;
    }

    void merge_from(const FlatConfig& other) {
        for (const auto& [k, v] : other.kv_) kv_[k] = v;
    }

    static FlatConfig parse(const std::string& text) {
        FlatConfig c;
        std::istringstream is(text);
        std::string line;
        int lineno = 0;
        while (std::getline(is, line)) {
            ++lineno;
            const auto hash = line.find('#');
            if (hash != std::string::npos) line = line.substr(0, hash);
            const auto trim = [](std::string s) {
                const auto a = s.find_first_not_of(" \t\r");
                if (a == std::string::npos) return std::string();
                const auto b = s.find_last_not_of(" \t\r");
                return s.substr(a, b - a + 1);
            };
            line = trim(line);
            if (line.empty()) continue;
            const auto eq = line.find('=');
            if (eq == std::string::npos)
                throw std::invalid_argument("config line " + std::to_string(lineno) + ": expected key = value");
            const std::string key = trim(line.substr(0, eq));
            const std::string value = trim(line.substr(eq + 1));
            if (key.empty()) throw std::invalid_argument("config line " + std::to_string(lineno) + ": empty key");
            c.kv_[key] = value;
        }
        return c;
    }

    std::string serialize() const {
        std::string out;
        for (const auto& [k, v] : kv_) out += k + " = " + v + "\n";
        return out;
    }

private:
    std::map<std::string, std::string> kv_;
};

// ---------------------------------------------------------------------------
// The loop schedule configuration (Algorithm-1 shape and counts)
// ---------------------------------------------------------------------------

struct LoopConfig {
    int iterations = 15;
    int64_t interactions_per_iter = 6400;
    int64_t initial_collection = 6400;
    int64_t model_steps_first = 45000;
    int64_t model_steps_rest = 15000;
    int64_t ppo_epoch_unit = 1000;
    std::map<int, int> z_schedule;  // empty -> default (2 at 8 and 12, 3 at last)
    int n_agents = 16;
    int rollout_N = 50;
    float gamma = 0.95f;
    int long_training_multiplier = 1;
    int scale = 1;  // global divisor for desk runs; divides step counts, not structure
    bool random_starts = true;
    bool mix_real_into_ppo = true;
    bool dry_run = false;
    int eval_episodes = 8;
    float eval_temperature = 0.5f;

    void validate() const {
        if (iterations < 1) throw std::invalid_argument("loop.iterations must be >= 1");
        if (scale < 1) throw std::invalid_argument("loop.scale must be >= 1");
        if (n_agents < 1 || rollout_N < 1) throw std::invalid_argument("bad rollout shape");
        if (long_training_multiplier < 1) throw std::invalid_argument("bad long-training multiplier");
        if (interactions_per_iter < 1 || initial_collection < 1 || model_steps_first < 1 ||
            model_steps_rest < 1 || ppo_epoch_unit < 1)
            throw std::invalid_argument("loop counts must be positive");
    }

    /// Desk scaling: divides step counts (never below 1), not structure.
    int64_t scaled(int64_t x) const { return std::max<int64_t>(1, x / scale); }

    int z_at(int iteration) const {
        if (!z_schedule.empty()) {
            auto it = z_schedule.find(iteration);
            return it == z_schedule.end() ? 1 : it->second;
        }
        if (iteration == iterations) return 3;
        if (iteration == 8 || iteration == 12) return 2;
        return 1;
    }
};

struct IterationPlan {
    int iteration = 0;
    int64_t model_steps = 0;
    int z = 1;
    int64_t ppo_epochs = 0;
    int64_t sim_interactions = 0;  // ppo_epochs * n_agents * rollout_N
};

inline IterationPlan plan(const LoopConfig& cfg, int iteration) {
    cfg.validate();
    if (iteration < 1 || iteration > cfg.iterations)
        throw std::out_of_range("plan: iteration " + std::to_string(iteration) + " outside 1.." +
                                std::to_string(cfg.iterations));
    IterationPlan p;
    p.iteration = iteration;
    p.model_steps = cfg.scaled(iteration == 1 ? cfg.model_steps_first : cfg.model_steps_rest) *
                    cfg.long_training_multiplier;
    p.z = cfg.z_at(iteration);
    p.ppo_epochs = int64_t(p.z) * cfg.scaled(cfg.ppo_epoch_unit);
    p.sim_interactions = p.ppo_epochs * cfg.n_agents * cfg.rollout_N;
    return p;
}

/// Total real interactions the schedule will consume (initial + per-iteration
/// collections), exact at any scale.
inline int64_t planned_real_interactions(const LoopConfig& cfg) {
    cfg.validate();
    return cfg.scaled(cfg.initial_collection) + int64_t(cfg.iterations) * cfg.scaled(cfg.interactions_per_iter);
}

// ---------------------------------------------------------------------------
// RunConfig: the command-scoped union, with preset and file layering
// ---------------------------------------------------------------------------

struct RunConfig {
    EnvSpec env;
    double sticky_p = 0.0;
    ModelConfig model;
    PPOConfig ppo;
    LoopConfig loop;
    std::vector<uint64_t> seeds = {1};
    std::string out_dir;
    std::string preset;
    std::string tag = "simple";
};

namespace detail {

inline bool parse_bool(const std::string& v, const std::string& key) {
    if (v == "true" || v == "1") return true;
    if (v == "false" || v == "0") return false;
    throw std::invalid_argument("config key '" + key + "': expected bool, got '" + v + "'");
}

template <typename T>
T parse_num(const std::string& v, const std::string& key) {
    std::istringstream is(v);
    T out;
    is >> out;
    if (is.fail() || !is.eof())
        throw std::invalid_argument("config key '" + key + "': cannot parse '" + v + "'");
    return out;
}

inline std::map<int, int> parse_z_schedule(const std::string& v, const std::string& key) {
    // "8:2,12:2,15:3"
    std::map<int, int> out;
    if (v.empty() || v == "default") return out;
    std::istringstream is(v);
    std::string part;
    while (std::getline(is, part, ',')) {
        const auto colon = part.find(':');
        if (colon == std::string::npos)
            throw std::invalid_argument("config key '" + key + "': expected iter:z pairs");
        out[parse_num<int>(part.substr(0, colon), key)] = parse_num<int>(part.substr(colon + 1), key);
    }
    return out;
}

}  // namespace detail

/// Applies flat keys onto a RunConfig; unknown keys are rejected.
inline void apply_flat(RunConfig& rc, const FlatConfig& f) {
    for (const auto& [key, value] : f.items()) {
        if (key == "env.name") rc.env.name = value;
        else if (key == "env.height") rc.env.height = detail::parse_num<int>(value, key);
        else if (key == "env.width") rc.env.width = detail::parse_num<int>(value, key);
        else if (key == "env.episode_cap") rc.env.episode_cap = detail::parse_num<int>(value, key);
        else if (key == "env.stochastic") rc.env.stochastic = detail::parse_bool(value, key);
        else if (key == "env.sticky_p") rc.sticky_p = detail::parse_num<double>(value, key);
        else if (key == "model.variant") {
            if (value == "deterministic") rc.model.variant = ModelConfig::Variant::deterministic;
            else if (value == "stochastic_discrete") rc.model.variant = ModelConfig::Variant::stochastic_discrete;
            else throw std::invalid_argument("model.variant must be deterministic or stochastic_discrete");
        } else if (key == "model.downscale_levels") rc.model.downscale_levels = detail::parse_num<int>(value, key);
        else if (key == "model.base_channels") rc.model.base_channels = detail::parse_num<int>(value, key);
        else if (key == "model.max_channels") rc.model.max_channels = detail::parse_num<int>(value, key);
        else if (key == "model.pixel_head") {
            if (value == "softmax256") rc.model.pixel_head = ModelConfig::PixelHead::softmax256;
            else if (value == "real_valued") rc.model.pixel_head = ModelConfig::PixelHead::real_valued;
            else throw std::invalid_argument("model.pixel_head must be softmax256 or real_valued");
        } else if (key == "model.latent_bits") rc.model.latent_bits = detail::parse_num<int>(value, key);
        else if (key == "model.bit_chunk") rc.model.bit_chunk = detail::parse_num<int>(value, key);
        else if (key == "model.dropout") rc.model.dropout = detail::parse_num<float>(value, key);
        else if (key == "model.dense_dropout") rc.model.dense_dropout = detail::parse_num<float>(value, key);
        else if (key == "model.loss_clip_l2") rc.model.loss_clip_l2 = detail::parse_num<float>(value, key);
        else if (key == "model.loss_clip_ce") rc.model.loss_clip_ce = detail::parse_num<float>(value, key);
        else if (key == "model.bit_noise") rc.model.bit_noise = detail::parse_num<float>(value, key);
        else if (key == "model.bit_dropout") rc.model.bit_dropout = detail::parse_num<float>(value, key);
        else if (key == "model.learning_rate") rc.model.learning_rate = detail::parse_num<float>(value, key);
        else if (key == "model.batch_size") rc.model.batch_size = detail::parse_num<int>(value, key);
        else if (key == "ppo.gamma") rc.ppo.gamma = detail::parse_num<float>(value, key);
        else if (key == "ppo.gae_lambda") rc.ppo.gae_lambda = detail::parse_num<float>(value, key);
        else if (key == "ppo.clip_epsilon") rc.ppo.clip_epsilon = detail::parse_num<float>(value, key);
        else if (key == "ppo.entropy_coef") rc.ppo.entropy_coef = detail::parse_num<float>(value, key);
        else if (key == "ppo.value_coef") rc.ppo.value_coef = detail::parse_num<float>(value, key);
        else if (key == "ppo.epochs_per_batch") rc.ppo.epochs_per_batch = detail::parse_num<int>(value, key);
        else if (key == "ppo.minibatch_size") rc.ppo.minibatch_size = detail::parse_num<int>(value, key);
        else if (key == "ppo.learning_rate") rc.ppo.learning_rate = detail::parse_num<float>(value, key);
        else if (key == "loop.iterations") rc.loop.iterations = detail::parse_num<int>(value, key);
        else if (key == "loop.interactions_per_iter") rc.loop.interactions_per_iter = detail::parse_num<int64_t>(value, key);
        else if (key == "loop.initial_collection") rc.loop.initial_collection = detail::parse_num<int64_t>(value, key);
        else if (key == "loop.model_steps_first") rc.loop.model_steps_first = detail::parse_num<int64_t>(value, key);
        else if (key == "loop.model_steps_rest") rc.loop.model_steps_rest = detail::parse_num<int64_t>(value, key);
        else if (key == "loop.ppo_epoch_unit") rc.loop.ppo_epoch_unit = detail::parse_num<int64_t>(value, key);
        else if (key == "loop.z_schedule") rc.loop.z_schedule = detail::parse_z_schedule(value, key);
        else if (key == "loop.n_agents") rc.loop.n_agents = detail::parse_num<int>(value, key);
        else if (key == "loop.rollout_N") rc.loop.rollout_N = detail::parse_num<int>(value, key);
        else if (key == "loop.gamma") rc.loop.gamma = detail::parse_num<float>(value, key);
        else if (key == "loop.long_training_multiplier") rc.loop.long_training_multiplier = detail::parse_num<int>(value, key);
        else if (key == "loop.scale") rc.loop.scale = detail::parse_num<int>(value, key);
        else if (key == "loop.random_starts") rc.loop.random_starts = detail::parse_bool(value, key);
        else if (key == "loop.mix_real_into_ppo") rc.loop.mix_real_into_ppo = detail::parse_bool(value, key);
        else if (key == "loop.dry_run") rc.loop.dry_run = detail::parse_bool(value, key);
        else if (key == "loop.eval_episodes") rc.loop.eval_episodes = detail::parse_num<int>(value, key);
        else if (key == "loop.eval_temperature") rc.loop.eval_temperature = detail::parse_num<float>(value, key);
        else if (key == "run.tag") rc.tag = value;
        else throw std::invalid_argument("unknown config key '" + key + "'");
    }
}

/// Echoes the resolved config back out as flat text.
inline FlatConfig to_flat(const RunConfig& rc) {
    FlatConfig f;
    f.set("env.name", rc.env.name);
    f.set("env.height", std::to_string(rc.env.height));
    f.set("env.width", std::to_string(rc.env.width));
    f.set("env.episode_cap", std::to_string(rc.env.episode_cap));
    f.set("env.stochastic", rc.env.stochastic ? "true" : "false");
    f.set("env.sticky_p", std::to_string(rc.sticky_p));
    f.set("model.variant", rc.model.variant == ModelConfig::Variant::deterministic ? "deterministic"
                                                                                   : "stochastic_discrete");
    f.set("model.downscale_levels", std::to_string(rc.model.downscale_levels));
    f.set("model.base_channels", std::to_string(rc.model.base_channels));
    f.set("model.max_channels", std::to_string(rc.model.max_channels));
    f.set("model.pixel_head",
          rc.model.pixel_head == ModelConfig::PixelHead::softmax256 ? "softmax256" : "real_valued");
    f.set("model.latent_bits", std::to_string(rc.model.latent_bits));
    f.set("model.bit_chunk", std::to_string(rc.model.bit_chunk));
    f.set("model.dropout", std::to_string(rc.model.dropout));
    f.set("model.dense_dropout", std::to_string(rc.model.dense_dropout));
    f.set("model.loss_clip_l2", std::to_string(rc.model.loss_clip_l2));
    f.set("model.loss_clip_ce", std::to_string(rc.model.loss_clip_ce));
    f.set("model.bit_noise", std::to_string(rc.model.bit_noise));
    f.set("model.bit_dropout", std::to_string(rc.model.bit_dropout));
    f.set("model.learning_rate", std::to_string(rc.model.learning_rate));
    f.set("model.batch_size", std::to_string(rc.model.batch_size));
    f.set("ppo.gamma", std::to_string(rc.ppo.gamma));
    f.set("ppo.gae_lambda", std::to_string(rc.ppo.gae_lambda));
    f.set("ppo.clip_epsilon", std::to_string(rc.ppo.clip_epsilon));
    f.set("ppo.entropy_coef", std::to_string(rc.ppo.entropy_coef));
    f.set("ppo.value_coef", std::to_string(rc.ppo.value_coef));
    f.set("ppo.epochs_per_batch", std::to_string(rc.ppo.epochs_per_batch));
    f.set("ppo.minibatch_size", std::to_string(rc.ppo.minibatch_size));
    f.set("ppo.learning_rate", std::to_string(rc.ppo.learning_rate));
    f.set("loop.iterations", std::to_string(rc.loop.iterations));
    f.set("loop.interactions_per_iter", std::to_string(rc.loop.interactions_per_iter));
    f.set("loop.initial_collection", std::to_string(rc.loop.initial_collection));
    f.set("loop.model_steps_first", std::to_string(rc.loop.model_steps_first));
    f.set("loop.model_steps_rest", std::to_string(rc.loop.model_steps_rest));
    f.set("loop.ppo_epoch_unit", std::to_string(rc.loop.ppo_epoch_unit));
    std::string zs;
    for (const auto& [k, v] : rc.loop.z_schedule) zs += (zs.empty() ? "" : ",") + std::to_string(k) + ":" + std::to_string(v);
    f.set("loop.z_schedule", zs.empty() ? "default" : zs);
    f.set("loop.n_agents", std::to_string(rc.loop.n_agents));
    f.set("loop.rollout_N", std::to_string(rc.loop.rollout_N));
    f.set("loop.gamma", std::to_string(rc.loop.gamma));
    f.set("loop.long_training_multiplier", std::to_string(rc.loop.long_training_multiplier));
    f.set("loop.scale", std::to_string(rc.loop.scale));
    f.set("loop.random_starts", rc.loop.random_starts ? "true" : "false");
    f.set("loop.mix_real_into_ppo", rc.loop.mix_real_into_ppo ? "true" : "false");
    f.set("loop.dry_run", rc.loop.dry_run ? "true" : "false");
    f.set("loop.eval_episodes", std::to_string(rc.loop.eval_episodes));
    f.set("loop.eval_temperature", std::to_string(rc.loop.eval_temperature));
    f.set("run.tag", rc.tag);
    return f;
}

// ---------------------------------------------------------------------------
// Presets: the desk scale preset plus the ablation configurations
// ---------------------------------------------------------------------------

inline std::vector<std::string> preset_names() {
    return {"desk",      "paper",    "det",      "sd-long", "sd-gamma90", "sd-gamma95",
            "sd-gamma99", "sd-n25",   "sd-n100",  "no-random-starts", "headline"};
}

inline FlatConfig preset(const std::string& name) {
    FlatConfig f;
    auto desk_base = [&] {
        f.set("loop.scale", "32");
        f.set("model.variant", "stochastic_discrete");
        f.set("model.downscale_levels", "3");
        f.set("model.base_channels", "16");
        f.set("model.max_channels", "64");
        f.set("model.latent_bits", "32");
        f.set("model.dropout", "0.05");
        f.set("loop.gamma", "0.95");
        f.set("ppo.gamma", "0.95");
    };
    if (name == "desk") {
        desk_base();
    } else if (name == "paper") {
        // Reference-scale counts and architecture; useful for accounting
        // dry-runs, far too slow to train on a desk machine.
        f.set("loop.scale", "1");
        f.set("model.downscale_levels", "6");
        f.set("model.base_channels", "96");
        f.set("model.max_channels", "768");
        f.set("model.latent_bits", "128");
        f.set("model.dropout", "0.15");
        f.set("env.height", "192");
        f.set("env.width", "128");
    } else if (name == "det") {
        desk_base();
        f.set("model.variant", "deterministic");
    } else if (name == "sd-long") {
        desk_base();
        f.set("loop.long_training_multiplier", "5");
    } else if (name == "sd-gamma90") {
        desk_base();
        f.set("loop.gamma", "0.90");
        f.set("ppo.gamma", "0.90");
    } else if (name == "sd-gamma95") {
        desk_base();
    } else if (name == "sd-gamma99") {
        desk_base();
        f.set("loop.gamma", "0.99");
        f.set("ppo.gamma", "0.99");
    } else if (name == "sd-n25") {
        desk_base();
        f.set("loop.rollout_N", "25");
    } else if (name == "sd-n100") {
        desk_base();
        f.set("loop.rollout_N", "100");
    } else if (name == "no-random-starts") {
        desk_base();
        f.set("loop.random_starts", "false");
        f.set("loop.rollout_N", "1000");
    } else if (name == "headline") {
        // Same real-interaction budget as desk, leaner internal step counts;
        // used for the multi-seed head-to-head comparison experiment.
        desk_base();
        f.set("model.variant", "deterministic");
        f.set("loop.model_steps_first", "19200");   // /32 -> 600
        f.set("loop.model_steps_rest", "3840");     // /32 -> 120
        f.set("loop.ppo_epoch_unit", "224");        // /32 -> 7 per z-unit
    } else {
        throw std::invalid_argument("unknown preset '" + name + "'");
    }
    return f;
}

/// Layered resolution: defaults < preset < file < explicit overrides.
inline RunConfig resolve_config(const std::string& preset_name, const FlatConfig& file_cfg,
                                const FlatConfig& overrides) {
    RunConfig rc;
    rc.preset = preset_name;
    if (!preset_name.empty()) apply_flat(rc, preset(preset_name));
    apply_flat(rc, file_cfg);
    apply_flat(rc, overrides);
    rc.env.validate();
    rc.model.validate();
    rc.ppo.validate();
    rc.loop.validate();
    return rc;
}

}  // namespace simple
