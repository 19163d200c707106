#include "cq/bitsearch.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <stdexcept>

#include "cq/fileio.hpp"

namespace cq {
namespace {

void check_thresholds(const ThresholdSet& th) {
    if (th.p.empty())
        throw std::invalid_argument("threshold set is empty");
    for (size_t i = 1; i < th.p.size(); ++i)
        if (th.p[i] < th.p[i - 1])
            throw std::invalid_argument("thresholds must be non-decreasing");
}

struct StepScale {
    double step = 0.0;
    double min_score = 0.0;
    double max_score = 0.0;
};

StepScale resolve_step(const std::vector<SearchUnit>& units, const SearchConfig& cfg) {
    StepScale s;
    s.min_score = units.front().score;
    s.max_score = units.front().score;
    for (const auto& u : units) {
        s.min_score = std::min(s.min_score, u.score);
        s.max_score = std::max(s.max_score, u.score);
    }
    if (cfg.step > 0.0) {
        s.step = cfg.step;
    } else {
        double range = s.max_score - s.min_score;
        if (range <= 0.0) range = s.max_score > 0.0 ? s.max_score : 1.0;
        s.step = range / cfg.step_divisor;
    }
    return s;
}

void check_config(const std::vector<SearchUnit>& units, const SearchConfig& cfg) {
    if (units.empty())
        throw std::invalid_argument("search: no quantizable units");
    for (const auto& u : units) {
        if (u.weight_count <= 0)
            throw std::invalid_argument("search: unit with no weights");
        if (u.score < 0.0 || !std::isfinite(u.score))
            throw std::invalid_argument("search: unit scores must be finite and non-negative");
    }
    if (!(cfg.budget > 0.0))
        throw std::invalid_argument("search: budget must be positive");
    if (cfg.max_bits < 1)
        throw std::invalid_argument("search: max_bits must be at least 1");
    if (!(cfg.decay > 0.0 && cfg.decay <= 1.0))
        throw std::invalid_argument("search: decay must lie in (0, 1]");
    if (cfg.step < 0.0)
        throw std::invalid_argument("search: step must be non-negative");
    if (cfg.step == 0.0 && cfg.step_divisor <= 0)
        throw std::invalid_argument("search: step_divisor must be positive");
}

BitArrangement make_arrangement(const std::vector<SearchUnit>& units,
                                const std::vector<int>& bits,
                                const SearchConfig& cfg, const ThresholdSet& th,
                                double avg) {
    BitArrangement arr;
    arr.max_bits = cfg.max_bits;
    arr.act_bits = cfg.act_bits;
    arr.average_bits = avg;
    arr.thresholds = th.p;
    arr.units.reserve(units.size());
    for (size_t i = 0; i < units.size(); ++i)
        arr.units.push_back({units[i].layer, units[i].unit, bits[i]});
    return arr;
}

}  // namespace

std::vector<int> assign_bits(const std::vector<double>& scores, const ThresholdSet& th) {
    check_thresholds(th);
    std::vector<int> bits(scores.size());
    for (size_t i = 0; i < scores.size(); ++i) {
        // Number of thresholds at or below the score. p is sorted, so this
        // is the index one past the last p[k] <= score.
        bits[i] = static_cast<int>(
            std::upper_bound(th.p.begin(), th.p.end(), scores[i]) - th.p.begin());
    }
    return bits;
}

double average_bitwidth(const std::vector<int>& bits, const std::vector<SearchUnit>& units) {
    if (bits.size() != units.size())
        throw std::invalid_argument("average_bitwidth: bits/units length mismatch");
    if (units.empty())
        throw std::invalid_argument("average_bitwidth: no units");
    double num = 0.0;
    int64_t den = 0;
    for (size_t i = 0; i < units.size(); ++i) {
        num += static_cast<double>(bits[i]) * static_cast<double>(units[i].weight_count);
        den += units[i].weight_count;
    }
    if (den <= 0)
        throw std::invalid_argument("average_bitwidth: zero total weight count");
    return num / static_cast<double>(den);
}

double average_bitwidth(const BitArrangement& arr, const Network& net) {
    std::map<std::pair<int, int>, int64_t> counts;
    for (const auto& u : net.quant_units()) counts[{u.layer, u.unit}] = u.weight_count;
    double num = 0.0;
    int64_t den = 0;
    for (const auto& ub : arr.units) {
        auto it = counts.find({ub.layer, ub.unit});
        if (it == counts.end())
            throw std::invalid_argument("average_bitwidth: arrangement names unknown unit");
        num += static_cast<double>(ub.bits) * static_cast<double>(it->second);
        den += it->second;
        counts.erase(it);
    }
    if (!counts.empty())
        throw std::invalid_argument("average_bitwidth: arrangement misses units");
    if (den <= 0)
        throw std::invalid_argument("average_bitwidth: zero total weight count");
    return num / static_cast<double>(den);
}

SearchResult search(const std::vector<SearchUnit>& units, const SearchConfig& cfg,
                    const EvalFn& eval, double baseline_accuracy) {
    check_config(units, cfg);
    if (cfg.target_accuracy >= baseline_accuracy)
        throw std::invalid_argument(
            "search: first accuracy floor must be below the unquantized accuracy");

    StepScale sc = resolve_step(units, cfg);
    const int N = cfg.max_bits;

    std::vector<double> scores(units.size());
    for (size_t i = 0; i < units.size(); ++i) scores[i] = units[i].score;

    SearchResult res;
    res.thresholds.p.assign(N, 0.0);
    auto& p = res.thresholds.p;

    auto bits_now = [&] { return assign_bits(scores, res.thresholds); };
    auto finish = [&](const std::vector<int>& bits, double avg, bool met) {
        res.avg_bits = avg;
        res.budget_met = met;
        res.arrangement = make_arrangement(units, bits, cfg, res.thresholds, avg);
    };

    int step_no = 0;
    double target = cfg.target_accuracy;

    {
        std::vector<int> bits = bits_now();
        double avg = average_bitwidth(bits, units);
        if (avg < cfg.budget) {
            finish(bits, avg, true);
            return res;
        }
    }

    for (int k = 1; k <= N; ++k) {
        res.targets.push_back(target);
        double start = p[k - 1];
        int moves = 0;
        for (;;) {
            double cand = start + static_cast<double>(moves + 1) * sc.step;
            if (cand > sc.max_score) break;  // cap: hold position, next threshold
            ++moves;
            // Thresholds above k have not run yet; they ride along so the
            // set stays ordered and they start the next phase from here.
            for (int j = k - 1; j < N; ++j) p[j] = cand;

            std::vector<int> bits = bits_now();
            double avg = average_bitwidth(bits, units);
            if (avg < cfg.budget) {
                res.trace.push_back({++step_no, k, cand, false, 0.0, avg, "budget"});
                finish(bits, avg, true);
                return res;
            }
            double acc = eval(make_arrangement(units, bits, cfg, res.thresholds, avg));
            res.trace.push_back({++step_no, k, cand, true, acc, avg, ""});
            if (acc < target) {
                --moves;
                double back = start + static_cast<double>(moves) * sc.step;
                for (int j = k - 1; j < N; ++j) p[j] = back;
                std::vector<int> bb = bits_now();
                res.trace.push_back(
                    {++step_no, k, back, false, 0.0, average_bitwidth(bb, units), "backoff"});
                break;
            }
        }
        target *= cfg.decay;
    }

    std::vector<int> bits = bits_now();
    double avg = average_bitwidth(bits, units);
    finish(bits, avg, avg < cfg.budget);
    return res;
}

void fallback_tighten(SearchResult& state, const std::vector<SearchUnit>& units,
                      const SearchConfig& cfg) {
    check_config(units, cfg);
    StepScale sc = resolve_step(units, cfg);
    const int N = cfg.max_bits;
    auto& p = state.thresholds.p;
    if (static_cast<int>(p.size()) != N)
        throw std::invalid_argument("fallback: threshold count does not match config");

    std::vector<double> scores(units.size());
    for (size_t i = 0; i < units.size(); ++i) scores[i] = units[i].score;

    int step_no = state.trace.empty() ? 0 : state.trace.back().step;
    state.fallback_used = true;

    {
        std::vector<int> bits = assign_bits(scores, state.thresholds);
        double avg = average_bitwidth(bits, units);
        if (avg < cfg.budget) {
            state.avg_bits = avg;
            state.budget_met = true;
            state.arrangement = make_arrangement(units, bits, cfg, state.thresholds, avg);
            return;
        }
    }

    // Highest threshold first; each may overshoot the top score by one step
    // so that a full sweep can drive every unit to zero bits.
    for (int k = N; k >= 1; --k) {
        double start = p[k - 1];
        int moves = 0;
        while (p[k - 1] <= sc.max_score) {
            double cand = start + static_cast<double>(moves + 1) * sc.step;
            ++moves;
            bool clamped = false;
            if (k < N && cand > p[k]) {
                cand = p[k];  // keep the set ordered
                clamped = true;
            }
            p[k - 1] = cand;
            std::vector<int> bits = assign_bits(scores, state.thresholds);
            double avg = average_bitwidth(bits, units);
            state.trace.push_back(
                {++step_no, k, cand, false, 0.0, avg, clamped ? "fallback clamp" : "fallback"});
            if (avg < cfg.budget) {
                state.avg_bits = avg;
                state.budget_met = true;
                state.arrangement = make_arrangement(units, bits, cfg, state.thresholds, avg);
                return;
            }
        }
    }
    // All thresholds above every score means every unit is at zero bits,
    // which is under any positive budget.
    throw std::logic_error("fallback: failed to reach the budget");
}

SearchResult run_search(const std::vector<SearchUnit>& units, const SearchConfig& cfg,
                        const EvalFn& eval, double baseline_accuracy) {
    SearchResult res = search(units, cfg, eval, baseline_accuracy);
    if (!res.budget_met) fallback_tighten(res, units, cfg);
    if (!(res.avg_bits < cfg.budget))
        throw std::logic_error("search: final arrangement is not under budget");
    return res;
}

void save_trace(const std::vector<TraceRow>& trace, const std::string& path) {
    std::string out = "step,threshold,position,accuracy,avg_bits,note\n";
    for (const auto& r : trace) {
        out += std::to_string(r.step) + "," + std::to_string(r.threshold) + ",";
        out += fmt_double(r.position) + ",";
        if (r.has_accuracy) out += fmt_double(r.accuracy);
        out += "," + fmt_double(r.avg_bits) + "," + r.note + "\n";
    }
    atomic_write(path, out);
}

}  // namespace cq
