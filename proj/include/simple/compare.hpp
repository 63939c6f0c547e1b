#pragma once

#include <filesystem>
#include <fstream>
#include <sstream>

#include "simple/metrics.hpp"
#include "simple/report.hpp"
#include "simple/svg_plot.hpp"

namespace simple {

// ---------------------------------------------------------------------------
// Run-directory readers
// ---------------------------------------------------------------------------

/// A run dir either holds report.json directly or seed_*/ subruns.
inline std::vector<std::string> expand_run_dirs(const std::string& dir) {
    namespace fs = std::filesystem;
    if (fs::exists(fs::path(dir) / "report.json")) return {dir};
    std::vector<std::string> out;
    if (fs::exists(dir))
        for (const auto& e : fs::directory_iterator(dir))
            if (e.is_directory() && fs::exists(e.path() / "report.json")) out.push_back(e.path().string());
    std::sort(out.begin(), out.end());
    if (out.empty()) throw std::runtime_error("no report.json under '" + dir + "'");
    return out;
}

struct ScoreRow {
    int iteration;
    int64_t real_steps, sim_steps;
    double eval_mean, eval_std;
};

inline std::vector<ScoreRow> read_scores_csv(const std::string& run_dir) {
    const std::string path = (std::filesystem::path(run_dir) / "scores.csv").string();
    std::ifstream is(path);
    if (!is) throw std::runtime_error("missing scores file '" + path + "'");
    std::vector<ScoreRow> rows;
    std::string line;
    std::getline(is, line);  // header
    while (std::getline(is, line)) {
        if (line.empty()) continue;
        ScoreRow r{};
        char comma;
        std::istringstream ls(line);
        ls >> r.iteration >> comma >> r.real_steps >> comma >> r.sim_steps >> comma >> r.eval_mean >>
            comma >> r.eval_std;
        if (ls.fail()) throw std::runtime_error("malformed row in '" + path + "': " + line);
        rows.push_back(r);
    }
    return rows;
}

inline BaselineCurve baseline_curve_from_run(const std::string& run_dir) {
    BaselineCurve curve;
    for (const auto& r : read_scores_csv(run_dir))
        curve.points.push_back({static_cast<double>(r.real_steps), r.eval_mean});
    curve.validate();
    return curve;
}

// ---------------------------------------------------------------------------
// compare: SimPLe runs vs a baseline learning curve
// ---------------------------------------------------------------------------

struct CompareResult {
    std::string env_name;
    int n_simple_runs = 0;
    int64_t real_budget = 0;
    ScoreStats simple_scores;       // over per-run final eval means
    double baseline_at_budget = 0;  // interpolated baseline score at the budget
    double baseline_final = 0;
    double random_score = 0;
    std::optional<double> fraction;        // normalized fraction vs baseline@budget
    std::optional<double> match_steps;     // steps-to-match the SimPLe median
    BaselineCurve baseline;
};

inline double interpolate_at(const BaselineCurve& curve, double steps) {
    curve.validate();
    if (steps <= curve.points.front().first) return curve.points.front().second;
    for (size_t i = 1; i < curve.points.size(); ++i) {
        const auto [s0, y0] = curve.points[i - 1];
        const auto [s1, y1] = curve.points[i];
        if (steps <= s1) return y0 + (y1 - y0) * (steps - s0) / (s1 - s0);
    }
    return curve.points.back().second;
}

inline CompareResult compare_runs(const std::vector<std::string>& simple_dirs,
                                  const std::string& baseline_dir) {
    if (simple_dirs.empty()) throw std::invalid_argument("compare: no SimPLe runs given");
    CompareResult res;
    std::vector<double> finals, randoms;
    int64_t budget = 0;
    for (const auto& d : simple_dirs) {
        RunReport rep = RunReport::load((std::filesystem::path(d) / "report.json").string());
        finals.push_back(rep.final_eval_mean);
        randoms.push_back(rep.random_eval_mean);
        budget = std::max(budget, rep.real_interactions);
        res.env_name = rep.config.has("env.name") ? rep.config.raw("env.name") : "?";
    }
    res.n_simple_runs = static_cast<int>(finals.size());
    res.real_budget = budget;
    res.simple_scores = score_stats(finals);
    res.random_score = score_stats(randoms).mean;
    res.baseline = baseline_curve_from_run(baseline_dir);
    res.baseline_at_budget = interpolate_at(res.baseline, static_cast<double>(budget));
    res.baseline_final = res.baseline.points.back().second;
    res.fraction = normalized_fraction(res.simple_scores.median, res.baseline_at_budget, res.random_score);
    res.match_steps = steps_to_match(res.baseline, res.simple_scores.median);
    return res;
}

/// One row per (env, metric), matching the documented compare output format.
inline void write_compare_csv(const CompareResult& r, const std::string& path) {
    std::ofstream os(path, std::ios::trunc);
    if (!os) throw std::runtime_error("cannot open '" + path + "' for writing");
    os << "env,metric,value\n";
    auto row = [&](const std::string& metric, const std::string& value) {
        os << r.env_name << "," << metric << "," << value << "\n";
    };
    auto num = [](double v) {
        std::ostringstream s;
        s << v;
        return s.str();
    };
    row("simple_runs", num(r.n_simple_runs));
    row("real_budget", num(static_cast<double>(r.real_budget)));
    row("simple_median_score", num(r.simple_scores.median));
    row("simple_mean_score", num(r.simple_scores.mean));
    row("simple_std", num(r.simple_scores.stddev));
    row("simple_max_score", num(r.simple_scores.max));
    row("baseline_score_at_budget", num(r.baseline_at_budget));
    row("baseline_final_score", num(r.baseline_final));
    row("random_score", num(r.random_score));
    row("normalized_fraction", r.fraction ? num(*r.fraction) : "undefined");
    row("steps_to_match", r.match_steps ? num(*r.match_steps) : "beyond-horizon");
}

// ---------------------------------------------------------------------------
// Plot emission (deterministic filenames, regenerated identically)
// ---------------------------------------------------------------------------

/// Score-vs-iteration curve; with several runs adds a mean+-std band.
inline void emit_score_plot(const std::vector<std::string>& run_dirs, const std::string& out_svg) {
    if (run_dirs.empty()) throw std::invalid_argument("emit_score_plot: no runs");
    std::vector<std::vector<ScoreRow>> all;
    for (const auto& d : run_dirs) all.push_back(read_scores_csv(d));
    double ymin = 1e300, ymax = -1e300;
    size_t max_len = 0;
    for (const auto& rows : all) {
        max_len = std::max(max_len, rows.size());
        for (const auto& r : rows) {
            ymin = std::min(ymin, r.eval_mean - r.eval_std);
            ymax = std::max(ymax, r.eval_mean + r.eval_std);
        }
    }
    SvgPlot plot("score by iteration", "iteration", "mean episode score");
    plot.set_range(0, static_cast<double>(max_len), ymin, ymax);
    const std::vector<std::string> colors = {"#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd",
                                             "#8c564b", "#e377c2"};
    if (all.size() > 1) {
        std::vector<std::pair<double, double>> mean_curve, lo, hi;
        for (size_t i = 0; i < max_len; ++i) {
            std::vector<double> vals;
            for (const auto& rows : all)
                if (i < rows.size()) vals.push_back(rows[i].eval_mean);
            ScoreStats st = score_stats(vals);
            const double x = static_cast<double>(i + 1);
            mean_curve.push_back({x, st.mean});
            lo.push_back({x, st.mean - st.stddev});
            hi.push_back({x, st.mean + st.stddev});
        }
        plot.band(lo, hi, "#1f77b4");
        plot.polyline(mean_curve, "#1f77b4", 2.0);
    }
    for (size_t k = 0; k < all.size(); ++k) {
        std::vector<std::pair<double, double>> pts;
        for (size_t i = 0; i < all[k].size(); ++i) pts.push_back({static_cast<double>(i + 1), all[k][i].eval_mean});
        plot.polyline(pts, colors[k % colors.size()], all.size() > 1 ? 0.8 : 2.0,
                      all.size() > 1 ? 0.55 : 1.0);
    }
    plot.save(out_svg);
}

/// CDF of the first iteration attaining each run's maximum score.
inline void emit_cdf_plot(const std::vector<std::string>& run_dirs, const std::string& out_svg) {
    std::vector<std::vector<double>> curves;
    size_t max_iter = 1;
    for (const auto& d : run_dirs) {
        std::vector<double> c;
        for (const auto& r : read_scores_csv(d)) c.push_back(r.eval_mean);
        if (c.empty()) throw std::runtime_error("empty score curve in '" + d + "'");
        max_iter = std::max(max_iter, c.size());
        curves.push_back(std::move(c));
    }
    auto cdf = best_iteration_cdf(curves);
    SvgPlot plot("CDF of first best-score iteration", "iteration", "fraction of runs");
    plot.set_range(0, static_cast<double>(max_iter), 0, 1.0);
    std::vector<std::pair<double, double>> pts;
    double prev = 0;
    for (const auto& p : cdf) {
        pts.push_back({static_cast<double>(p.iteration), prev});
        pts.push_back({static_cast<double>(p.iteration), p.fraction});
        prev = p.fraction;
    }
    pts.push_back({static_cast<double>(max_iter), prev});
    plot.polyline(pts, "#2ca02c", 2.0);
    plot.save(out_svg);
}

/// Steps-to-match bar with the real-budget threshold line.
inline void emit_compare_bar_plot(const CompareResult& r, const std::string& out_svg) {
    const double budget = static_cast<double>(r.real_budget);
    const double bar = r.match_steps ? *r.match_steps : r.baseline.points.back().first;
    SvgPlot plot("baseline steps to match the learned policy", "", "real interactions");
    plot.set_range(0, 2, 0, std::max(bar, budget) * 1.2);
    plot.bar(1.0, 0.6, bar, r.match_steps ? "#1f77b4" : "#bbbbbb");
    plot.hline(budget, "#d62728");
    plot.label(0.05, budget, "training budget");
    if (!r.match_steps) plot.label(0.7, bar, "beyond horizon");
    plot.save(out_svg);
}

/// World-model loss parts over training steps.
inline void emit_loss_plot(const std::string& run_dir, const std::string& out_svg) {
    const std::string path = (std::filesystem::path(run_dir) / "model_losses.csv").string();
    std::ifstream is(path);
    if (!is) throw std::runtime_error("missing loss file '" + path + "'");
    std::string line;
    std::getline(is, line);
    std::vector<std::pair<double, double>> total, pixel;
    double ymax = 0;
    while (std::getline(is, line)) {
        if (line.empty()) continue;
        std::istringstream ls(line);
        double step, t, px, rw, lt;
        char c;
        ls >> step >> c >> t >> c >> px >> c >> rw >> c >> lt;
        if (ls.fail()) continue;
        total.push_back({step, t});
        pixel.push_back({step, px});
        ymax = std::max(ymax, t);
    }
    if (total.empty()) throw std::runtime_error("no loss rows in '" + path + "'");
    SvgPlot plot("world-model training loss", "step", "loss");
    plot.set_range(total.front().first, total.back().first, 0, ymax * 1.05);
    plot.polyline(total, "#1f77b4", 1.2);
    plot.polyline(pixel, "#ff7f0e", 1.2);
    plot.save(out_svg);
}

}  // namespace simple
