#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "cq/quantizer.hpp"

namespace cq {

// One quantizable unit as the search sees it: its score and how many
// weights it owns (the weight count weights the average bit-width).
struct SearchUnit {
    int layer = -1;
    int unit = -1;
    double score = 0.0;
    int64_t weight_count = 0;
};

struct SearchConfig {
    double budget = 2.0;           // desired average bit-width
    int max_bits = 4;              // number of thresholds / highest bit count
    int act_bits = 4;              // stamped into produced arrangements
    double step = 0.0;             // threshold step; 0 resolves to range/step_divisor
    int step_divisor = 200;
    double target_accuracy = 0.5;  // first accuracy floor
    double decay = 0.8;            // per-phase multiplier on the floor
};

// Ascending threshold positions p[0] <= ... <= p[max_bits-1]. A unit's
// bit count is the number of thresholds at or below its score.
struct ThresholdSet {
    std::vector<double> p;
};

std::vector<int> assign_bits(const std::vector<double>& scores, const ThresholdSet& th);

double average_bitwidth(const std::vector<int>& bits, const std::vector<SearchUnit>& units);
double average_bitwidth(const BitArrangement& arr, const Network& net);

struct TraceRow {
    int step = 0;             // global step counter across both phases
    int threshold = 0;        // 1-based index of the threshold that moved
    double position = 0.0;
    bool has_accuracy = false;
    double accuracy = 0.0;
    double avg_bits = 0.0;
    std::string note;         // "", "budget", "backoff", "fallback", "fallback clamp"
};

struct SearchResult {
    ThresholdSet thresholds;
    BitArrangement arrangement;
    std::vector<double> targets;   // accuracy floor used in each phase
    std::vector<TraceRow> trace;
    double avg_bits = 0.0;
    bool budget_met = false;
    bool fallback_used = false;
};

using EvalFn = std::function<double(const BitArrangement&)>;

// Accuracy-guided phase: raises thresholds lowest-first, backing each one
// off one step when accuracy drops below its floor, and stops as soon as
// the average bit-width falls under budget.
SearchResult search(const std::vector<SearchUnit>& units, const SearchConfig& cfg,
                    const EvalFn& eval, double baseline_accuracy);

// Budget-only phase for when the accuracy-guided phase ends over budget:
// raises thresholds highest-first, ignoring accuracy, until the budget
// holds. Continues the trace and step counter of `state`.
void fallback_tighten(SearchResult& state, const std::vector<SearchUnit>& units,
                      const SearchConfig& cfg);

// search + fallback_tighten, with the final under-budget check enforced.
SearchResult run_search(const std::vector<SearchUnit>& units, const SearchConfig& cfg,
                        const EvalFn& eval, double baseline_accuracy);

void save_trace(const std::vector<TraceRow>& trace, const std::string& path);

}  // namespace cq
