#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

#include "cq/bitsearch.hpp"
#include "cq/dataset.hpp"
#include "cq/importance.hpp"
#include "cq/network.hpp"
#include "cq/refine.hpp"
#include "cq/train.hpp"

namespace cq {

struct ConfigError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Model section: either a named preset ("mlp-blobs" / "cnn-glyphs") or an
// explicit input shape plus layer list.
struct ModelConfig {
    std::string preset;
    std::vector<int> input;
    std::vector<LayerSpec> layers;
};

struct ScoreSettings {
    double epsilon = 1e-50;
    int samples_per_class = 64;
    std::string readout = "true-logit";
};

struct SearchSettings {
    double budget = 2.0;
    int max_bits = 4;
    double step = 0.0;  // 0 = span of scores / step_divisor
    int step_divisor = 200;
    double target_accuracy = 0.5;
    double decay = 0.8;
    int eval_samples = 1000;  // validation samples the search evaluates on
};

struct QuantizeSettings {
    int act_bits = 4;
    bool calibrate_on_float = false;  // default calibrates on the quantized net
};

struct RunConfig {
    uint64_t seed = 0;
    bool seed_set = false;
    std::string dataset_path;
    std::string dataset_format = "csv";  // "csv" or "idx"
    std::string idx_labels_path;
    std::string output_dir = "out";
    ModelConfig model;
    SplitFractions splits;
    TrainConfig train;
    ScoreSettings score;
    SearchSettings search;
    QuantizeSettings quantize;
    KDConfig refine;
};

// Parses a JSON run config. Every key is checked against the schema;
// unknown keys are an error naming the offending path. "seed" is required.
RunConfig load_config(const std::string& path);
RunConfig parse_config(const std::string& json_text, const std::string& origin);

// Resolves the model section to concrete layer protos plus input shape.
struct ModelPlan {
    std::vector<int> input;
    std::vector<LayerSpec> layers;
};
ModelPlan resolve_model(const ModelConfig& mc);

}  // namespace cq
