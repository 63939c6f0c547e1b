#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <optional>
#include <stdexcept>
#include <vector>

#include "simple/env.hpp"

namespace simple {

// ---------------------------------------------------------------------------
// Score statistics
// ---------------------------------------------------------------------------

struct ScoreStats {
    double mean = 0, stddev = 0, median = 0, max = 0;
};

/// Sample standard deviation (n-1); a single run reports 0 by convention.
/// Median uses midpoint interpolation.
inline ScoreStats score_stats(std::vector<double> scores) {
    if (scores.empty()) throw std::invalid_argument("score_stats: empty score set");
    ScoreStats st;
    const size_t n = scores.size();
    for (double s : scores) st.mean += s;
    st.mean /= static_cast<double>(n);
    if (n > 1) {
        double ss = 0;
        for (double s : scores) ss += (s - st.mean) * (s - st.mean);
        st.stddev = std::sqrt(ss / static_cast<double>(n - 1));
    }
    std::sort(scores.begin(), scores.end());
    st.median = n % 2 ? scores[n / 2] : 0.5 * (scores[n / 2 - 1] + scores[n / 2]);
    st.max = scores.back();
    return st;
}

// ---------------------------------------------------------------------------
// Normalized fraction of a baseline score
// ---------------------------------------------------------------------------

/// (score - random) / (baseline - random); when the denominator is smaller
/// than 0 both numerator and denominator are increased by 1. An adjusted
/// denominator of exactly 0 is undefined (not infinity).
inline std::optional<double> normalized_fraction(double score, double baseline, double random_score) {
    double num = score - random_score;
    double den = baseline - random_score;
    if (den < 0) {
        num += 1.0;
        den += 1.0;
    }
    if (den == 0.0) return std::nullopt;
    return num / den;
}

// ---------------------------------------------------------------------------
// Steps-to-match
// ---------------------------------------------------------------------------

/// Ordered (real_steps, mean_score) learning-curve points.
struct BaselineCurve {
    std::vector<std::pair<double, double>> points;

    void validate() const {
        if (points.empty()) throw std::invalid_argument("baseline curve is empty");
        for (size_t i = 1; i < points.size(); ++i)
            if (points[i].first <= points[i - 1].first)
                throw std::invalid_argument("baseline curve steps must be strictly increasing");
    }
};

/// Smallest step count at which the linearly interpolated curve reaches the
/// target score; targets below the first point clamp left, targets never
/// reached are beyond the horizon (nullopt).
inline std::optional<double> steps_to_match(const BaselineCurve& curve, double target) {
    curve.validate();
    if (target <= curve.points[0].second) return curve.points[0].first;
    for (size_t i = 1; i < curve.points.size(); ++i) {
        const auto [s0, y0] = curve.points[i - 1];
        const auto [s1, y1] = curve.points[i];
        if (y1 >= target && y0 < target)
            return s0 + (s1 - s0) * (target - y0) / (y1 - y0);
    }
    return std::nullopt;
}

// ---------------------------------------------------------------------------
// CDF of the first iteration attaining each run's maximum score
// ---------------------------------------------------------------------------

struct CdfPoint {
    int iteration = 0;
    double fraction = 0;
};

inline std::vector<CdfPoint> best_iteration_cdf(const std::vector<std::vector<double>>& runs) {
    if (runs.empty()) throw std::invalid_argument("best_iteration_cdf: no runs");
    std::vector<int> best;
    for (const auto& curve : runs) {
        if (curve.empty()) throw std::invalid_argument("best_iteration_cdf: empty curve");
        size_t arg = 0;
        for (size_t i = 1; i < curve.size(); ++i)
            if (curve[i] > curve[arg]) arg = i;  // strict: first attainment wins
        best.push_back(static_cast<int>(arg) + 1);
    }
    std::sort(best.begin(), best.end());
    std::vector<CdfPoint> cdf;
    for (size_t i = 0; i < best.size(); ++i) {
        const double frac = static_cast<double>(i + 1) / static_cast<double>(best.size());
        if (!cdf.empty() && cdf.back().iteration == best[i]) cdf.back().fraction = frac;
        else cdf.push_back({best[i], frac});
    }
    return cdf;
}

// ---------------------------------------------------------------------------
// Correct-reward-predictions-per-sequence metric
// ---------------------------------------------------------------------------

/// Simulator side: total predicted reward from a start stack over a given
/// action prefix.
using SequenceSimulator = std::function<int(const ObservationStack&, const std::vector<int>&)>;

struct SequenceStart {
    Env env;  // snapshot positioned at the start state
    std::vector<int> actions;
};

/// Fraction of action sequences whose simulated total reward equals the true
/// environment's total reward. If an episode ends early, both sides are
/// scored over the executed prefix.
inline double reward_sequence_accuracy(const SequenceSimulator& simulate, std::vector<SequenceStart> starts,
                                       int horizon) {
    if (horizon <= 0) throw std::invalid_argument("reward_sequence_accuracy: horizon must be positive");
    if (starts.empty()) throw std::invalid_argument("reward_sequence_accuracy: no start states");
    int hits = 0;
    for (auto& st : starts) {
        if (static_cast<int>(st.actions.size()) != horizon)
            throw std::invalid_argument("reward_sequence_accuracy: sequence length must equal horizon");
        const ObservationStack start_stack = st.env.stack();
        int true_total = 0;
        std::vector<int> executed;
        for (int k = 0; k < horizon && !st.env.done(); ++k) {
            StepResult r = st.env.step(st.actions[static_cast<size_t>(k)]);
            true_total += r.reward;
            executed.push_back(st.actions[static_cast<size_t>(k)]);
        }
        const int sim_total = simulate(start_stack, executed);
        hits += sim_total == true_total;
    }
    return static_cast<double>(hits) / static_cast<double>(starts.size());
}

}  // namespace simple
