#pragma once

#include <string>
#include <vector>

#include "cq/config.hpp"

namespace cq {

// Fixed artifact layout under the run's output directory. Stages
// communicate only through these files, which is what makes single-stage
// runs and resume possible.
struct Artifacts {
    explicit Artifacts(const std::string& dir);
    std::string dir;
    std::string float_model, train_log, train_metrics;
    std::string scores;
    std::string arrangement, search_trace, search_metrics;
    std::string quantized_model, quantize_metrics;
    std::string refined_model, refine_log, refine_metrics;
    std::string report_dir, summary, score_histogram, bit_distribution, accuracy_csv;
};

void stage_train(const RunConfig& cfg);
void stage_score(const RunConfig& cfg);
void stage_search(const RunConfig& cfg);
void stage_quantize(const RunConfig& cfg);
void stage_refine(const RunConfig& cfg);
void stage_report(const RunConfig& cfg);

// All stages in order. With resume, a stage whose outputs all exist is
// skipped. Progress and timing go to stdout; artifacts stay free of
// timing so reruns with one seed are byte-identical.
void run_pipeline(const RunConfig& cfg, bool resume);

const std::vector<std::string>& stage_names();
void run_stage(const RunConfig& cfg, const std::string& name);

}  // namespace cq
