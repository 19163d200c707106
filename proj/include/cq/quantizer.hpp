#pragma once

#include <map>
#include <string>
#include <vector>

#include "cq/network.hpp"

namespace cq {

struct QuantRange {
    double a = 0.0;  // lower bound
    double b = 0.0;  // upper bound
};

// symmetric range over a weight array: b = max |w|, a = -b
QuantRange weight_range(const std::vector<double>& weights);

double clip(double x, const QuantRange& r);

// Uniform fake quantization with N = 2^bits levels: clip to [a, b],
// snap to the nearest grid point, rescale. Rounding is half-away-from-zero.
// bits must be >= 1; 0-bit pruning is handled by apply_arrangement.
double quantize_value(double x, const QuantRange& r, int bits);

// Clipped straight-through estimator for the quantized-weight path: the
// upstream gradient passes where the shadow weight is strictly inside the
// clip range, and is zero outside.
double ste_grad(double upstream, double x, const QuantRange& r);

struct UnitBits {
    int layer = 0;
    int unit = 0;
    int bits = 0;
};

// Per-unit bit-widths for all quantizable units, plus the activation
// bit-width shared by the whole run. First and output layers never appear.
struct BitArrangement {
    int max_bits = 4;
    int act_bits = 4;
    double average_bits = 0.0;        // weight-count-weighted mean, for the file header
    std::vector<double> thresholds;   // ascending score thresholds; empty until searched
    std::vector<UnitBits> units;
};

struct QuantizedView {
    Network net;                       // weights snapped to grid, 0-bit units zeroed
    std::map<int, QuantRange> ranges;  // layer -> weight range the snap used
};

// Fake-quantize a network under an arrangement. Layer weight ranges are
// recomputed from the given (float shadow) weights. A 0-bit unit has its
// weights and bias zeroed so it cannot participate. The arrangement must
// cover every quantizable unit exactly once.
// Quantizes net's weights per the arrangement. Per-layer ranges come from
// the current weights unless fixed_ranges pins them (keyed by layer index).
QuantizedView apply_arrangement(const Network& net, const BitArrangement& arr,
                                const std::map<int, QuantRange>* fixed_ranges = nullptr);

// Run inference over a calibration set and record the max activation of
// every relu layer. An all-zero layer yields upper bound 0, which marks the
// layer's activations as identically zero under quantization.
ActQuant calibrate_activations(const Network& net, const std::vector<std::vector<double>>& calib,
                               int act_bits);

void save_arrangement(const BitArrangement& arr, const std::string& path);
BitArrangement load_arrangement(const std::string& path);

}  // namespace cq
