#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "cq/rng.hpp"

namespace cq {

struct Dataset {
    int num_classes = 0;
    int feature_len = 0;
    std::vector<std::vector<double>> features;
    std::vector<int> labels;
};

// CSV rows are "label,f1,...,fn" with no header. Labels must lie in
// [0, num_classes). If any feature falls outside [0, 1] the whole set is
// min-max scaled per column; data already in range is left untouched.
Dataset ingest_csv(const std::string& path, int num_classes);
void write_csv(const Dataset& ds, const std::string& path);

// IDX image/label pair (the MNIST container format): big-endian headers,
// one byte per pixel, pixel/255 as the feature value.
Dataset ingest_idx(const std::string& images_path, const std::string& labels_path,
                   int num_classes);

struct SplitFractions {
    double train = 0.6;
    double val = 0.2;
    double calib = 0.05;
    double test = 0.15;
};

struct Splits {
    std::vector<int> train, val, calib, test;
};

// Disjoint index sets from one seeded shuffle; rows left over by the
// floor-rounded fractions land in the training split.
Splits make_splits(int64_t n, const SplitFractions& f, RngStream& rng);

Dataset subset(const Dataset& ds, const std::vector<int>& idx);

// Gaussian point clouds around per-class centres, clipped to [0, 1].
Dataset synth_blobs(int per_class, int num_classes, int dim, RngStream& rng);

// 16x16 grayscale glyphs: ten fixed digit templates with random shift,
// per-sample stroke intensity, pixel dropout, and background noise.
Dataset synth_glyphs(int per_class, RngStream& rng);

}  // namespace cq
