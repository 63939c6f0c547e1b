#pragma once

#include <fstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "simple/config.hpp"

namespace simple {

struct IterationRecord {
    int iteration = 0;
    int64_t model_steps = 0;
    int64_t ppo_epochs = 0;
    int64_t sim_steps = 0;
    int64_t real_steps_cum = 0;
    double eval_mean = 0, eval_std = 0;
    double wall_model_s = 0, wall_rl_s = 0, wall_collect_s = 0, wall_eval_s = 0;
};

struct RunReport {
    std::string tag = "simple";
    uint64_t seed = 0;
    FlatConfig config;
    double random_eval_mean = 0, random_eval_std = 0;
    std::vector<IterationRecord> iterations;
    int64_t real_interactions = 0;
    int64_t sim_interactions = 0;
    int64_t eval_real_steps = 0;
    std::vector<double> final_scores;
    double final_eval_mean = 0, final_eval_std = 0;

    nlohmann::json to_json() const {
        nlohmann::json j;
        j["tag"] = tag;
        j["seed"] = seed;
        nlohmann::json cfg = nlohmann::json::object();
        for (const auto& [k, v] : config.items()) cfg[k] = v;
        j["config"] = cfg;
        j["random_eval"] = {{"mean", random_eval_mean}, {"std", random_eval_std}};
        j["iterations"] = nlohmann::json::array();
        for (const auto& it : iterations) {
            j["iterations"].push_back({{"iteration", it.iteration},
                                       {"model_steps", it.model_steps},
                                       {"ppo_epochs", it.ppo_epochs},
                                       {"sim_steps", it.sim_steps},
                                       {"real_steps_cum", it.real_steps_cum},
                                       {"eval_mean", it.eval_mean},
                                       {"eval_std", it.eval_std},
                                       {"wall_model_s", it.wall_model_s},
                                       {"wall_rl_s", it.wall_rl_s},
                                       {"wall_collect_s", it.wall_collect_s},
                                       {"wall_eval_s", it.wall_eval_s}});
        }
        j["counters"] = {{"real_interactions", real_interactions},
                         {"sim_interactions", sim_interactions},
                         {"eval_real_steps", eval_real_steps}};
        j["final"] = {{"scores", final_scores}, {"eval_mean", final_eval_mean}, {"eval_std", final_eval_std}};
        return j;
    }

    static RunReport from_json(const nlohmann::json& j) {
        RunReport r;
        r.tag = j.at("tag").get<std::string>();
        r.seed = j.at("seed").get<uint64_t>();
        for (const auto& [k, v] : j.at("config").items()) r.config.set(k, v.get<std::string>());
        r.random_eval_mean = j.at("random_eval").at("mean").get<double>();
        r.random_eval_std = j.at("random_eval").at("std").get<double>();
        for (const auto& it : j.at("iterations")) {
            IterationRecord rec;
            rec.iteration = it.at("iteration").get<int>();
            rec.model_steps = it.at("model_steps").get<int64_t>();
            rec.ppo_epochs = it.at("ppo_epochs").get<int64_t>();
            rec.sim_steps = it.at("sim_steps").get<int64_t>();
            rec.real_steps_cum = it.at("real_steps_cum").get<int64_t>();
            rec.eval_mean = it.at("eval_mean").get<double>();
            rec.eval_std = it.at("eval_std").get<double>();
            rec.wall_model_s = it.at("wall_model_s").get<double>();
            rec.wall_rl_s = it.at("wall_rl_s").get<double>();
            rec.wall_collect_s = it.at("wall_collect_s").get<double>();
            rec.wall_eval_s = it.at("wall_eval_s").get<double>();
            r.iterations.push_back(rec);
        }
        r.real_interactions = j.at("counters").at("real_interactions").get<int64_t>();
        r.sim_interactions = j.at("counters").at("sim_interactions").get<int64_t>();
        r.eval_real_steps = j.at("counters").at("eval_real_steps").get<int64_t>();
        r.final_scores = j.at("final").at("scores").get<std::vector<double>>();
        r.final_eval_mean = j.at("final").at("eval_mean").get<double>();
        r.final_eval_std = j.at("final").at("eval_std").get<double>();
        return r;
    }

    void save(const std::string& path) const {
        std::ofstream os(path, std::ios::trunc);
        if (!os) throw std::runtime_error("cannot open '" + path + "' for writing");
        os << to_json().dump(2) << "\n";
    }

    static RunReport load(const std::string& path) {
        std::ifstream is(path);
        if (!is) throw std::runtime_error("cannot open '" + path + "'");
        nlohmann::json j;
        is >> j;
        return from_json(j);
    }
};

// Append-only CSV log with a fixed header.
class CsvLog {
public:
    CsvLog(std::string path, const std::string& header) : path_(std::move(path)) {
        std::ifstream probe(path_);
        const bool fresh = !probe.good() || probe.peek() == std::ifstream::traits_type::eof();
        probe.close();
        if (fresh) {
            std::ofstream os(path_, std::ios::trunc);
            if (!os) throw std::runtime_error("cannot open '" + path_ + "' for writing");
            os << header << "\n";
        }
    }

    void row(const std::string& line) {
        std::ofstream os(path_, std::ios::app);
        if (!os) throw std::runtime_error("cannot open '" + path_ + "' for append");
        os << line << "\n";
    }

private:
    std::string path_;
};

}  // namespace simple
