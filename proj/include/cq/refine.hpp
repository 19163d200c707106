#pragma once

#include <string>
#include <vector>

#include "cq/network.hpp"
#include "cq/quantizer.hpp"
#include "cq/rng.hpp"
#include "cq/train.hpp"

namespace cq {

// Distillation loss against the frozen full-precision teacher:
//   alpha * CE(student, label) + (1 - alpha) * divergence term.
// The divergence defaults to KL(student || teacher), which is minimized
// exactly when the student matches the teacher. kl_as_printed negates the
// term instead; the report records which orientation ran.
struct KDConfig {
    double alpha = 0.3;
    int epochs = 30;
    double lr = 0.01;
    double momentum = 0.9;
    double weight_decay = 1e-4;
    int batch_size = 32;
    bool kl_as_printed = false;
    bool freeze_weight_ranges = false;
};

struct KDLoss {
    double total = 0.0;
    double ce = 0.0;
    double divergence = 0.0;  // signed value of the non-CE term
    std::vector<double> dlogits;  // gradient w.r.t. student logits
};

KDLoss kd_loss(const std::vector<double>& student_logits,
               const std::vector<double>& teacher_logits, int label,
               double alpha, bool kl_as_printed = false);

struct RefineEpoch {
    int epoch = 0;
    double loss = 0.0;
    double ce = 0.0;
    double divergence = 0.0;
    double val_accuracy = 0.0;  // accuracy of the quantized view
};

struct RefineResult {
    Network shadow;          // trained full-precision shadow weights
    QuantizedView deployed;  // quantized view of the final shadow
    std::vector<RefineEpoch> log;
    double final_val_accuracy = 0.0;
};

// Quantization-aware distillation. The student's forward pass always runs
// on the quantized view of the shadow weights (re-quantized every step,
// with per-layer ranges refreshed from the shadow unless frozen);
// gradients pass straight through the quantizer inside the clip range.
// Activation ranges are taken as given and stay fixed throughout.
// Zero-bit units stay zero and receive no updates. The teacher is const
// and never touched.
RefineResult refine(const Network& student_shadow, const Network& teacher,
                    const BitArrangement& arr, const ActQuant& act,
                    const std::vector<std::vector<double>>& train_x,
                    const std::vector<int>& train_y,
                    const std::vector<std::vector<double>>& val_x,
                    const std::vector<int>& val_y,
                    const KDConfig& cfg, RngStream& rng);

void save_refine_log(const std::vector<RefineEpoch>& log, const std::string& path);

}  // namespace cq
