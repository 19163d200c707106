#pragma once

#include <map>
#include <string>
#include <vector>

#include "cq/network.hpp"
#include "cq/rng.hpp"

namespace cq {

// SGD with momentum; weight decay is folded into the gradient before the
// momentum update. The learning rate drops by 10x at 50% and 75% of the
// epoch budget.
struct TrainConfig {
    int epochs = 30;
    double lr = 0.05;
    double momentum = 0.9;
    double weight_decay = 1e-4;
    int batch_size = 32;
};

struct EpochLog {
    int epoch = 0;
    double loss = 0.0;
    double val_accuracy = 0.0;
};

double lr_for_epoch(double base_lr, int epoch, int total_epochs);

// Velocity buffers shaped like a network's parameters.
struct Momentum {
    std::map<int, std::vector<double>> w, b;
    explicit Momentum(const Network& net);
};

std::vector<EpochLog> train_float(Network& net,
                                  const std::vector<std::vector<double>>& train_x,
                                  const std::vector<int>& train_y,
                                  const std::vector<std::vector<double>>& val_x,
                                  const std::vector<int>& val_y,
                                  const TrainConfig& cfg, RngStream& rng);

void save_epoch_log(const std::vector<EpochLog>& log, const std::string& path);

}  // namespace cq
