#include "cq/train.hpp"

#include <stdexcept>

#include "cq/fileio.hpp"
#include "cq/parallel.hpp"

namespace cq {

double lr_for_epoch(double base_lr, int epoch, int total_epochs) {
    double lr = base_lr;
    if (epoch * 4 >= total_epochs * 3)
        lr /= 100.0;
    else if (epoch * 2 >= total_epochs)
        lr /= 10.0;
    return lr;
}

Momentum::Momentum(const Network& net) {
    for (int li : net.param_layers()) {
        w[li].assign(net.weights.at(li).size(), 0.0);
        b[li].assign(net.biases.at(li).size(), 0.0);
    }
}

std::vector<EpochLog> train_float(Network& net,
                                  const std::vector<std::vector<double>>& train_x,
                                  const std::vector<int>& train_y,
                                  const std::vector<std::vector<double>>& val_x,
                                  const std::vector<int>& val_y,
                                  const TrainConfig& cfg, RngStream& rng) {
    if (train_x.size() != train_y.size() || train_x.empty())
        throw std::invalid_argument("train_float: bad training set");
    if (cfg.batch_size <= 0 || cfg.epochs < 0)
        throw std::invalid_argument("train_float: bad config");

    Momentum vel(net);
    std::vector<EpochLog> log;
    std::vector<int> order(train_x.size());
    for (size_t i = 0; i < order.size(); ++i) order[i] = static_cast<int>(i);

    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
        double lr = lr_for_epoch(cfg.lr, epoch, cfg.epochs);
        rng.shuffle(order);
        double loss_sum = 0.0;
        int64_t seen = 0;

        for (size_t at = 0; at < order.size(); at += cfg.batch_size) {
            size_t bs = std::min<size_t>(cfg.batch_size, order.size() - at);
            std::vector<Gradients> grads(bs);
            std::vector<double> losses(bs);
            parallel_for(static_cast<int64_t>(bs), [&](int64_t i) {
                int idx = order[at + i];
                Trace tr = forward(net, train_x[idx]);
                auto [loss, dlogits] = cross_entropy(logits_of(net, tr), train_y[idx]);
                losses[i] = loss;
                grads[i] = backward(net, tr, dlogits);
            });
            for (double l : losses) loss_sum += l;
            seen += static_cast<int64_t>(bs);

            double inv = 1.0 / static_cast<double>(bs);
            for (int li : net.param_layers()) {
                auto& w = net.weights.at(li);
                auto& b = net.biases.at(li);
                auto& vw = vel.w.at(li);
                auto& vb = vel.b.at(li);
                for (size_t j = 0; j < w.size(); ++j) {
                    double g = 0.0;
                    for (const auto& gr : grads) g += gr.dweights.at(li)[j];
                    g = g * inv + cfg.weight_decay * w[j];
                    vw[j] = cfg.momentum * vw[j] + g;
                    w[j] -= lr * vw[j];
                }
                for (size_t j = 0; j < b.size(); ++j) {
                    double g = 0.0;
                    for (const auto& gr : grads) g += gr.dbiases.at(li)[j];
                    g *= inv;
                    vb[j] = cfg.momentum * vb[j] + g;
                    b[j] -= lr * vb[j];
                }
            }
        }

        EpochLog e;
        e.epoch = epoch;
        e.loss = loss_sum / static_cast<double>(seen);
        e.val_accuracy = val_x.empty() ? 0.0 : evaluate_accuracy(net, val_x, val_y);
        log.push_back(e);
    }
    return log;
}

void save_epoch_log(const std::vector<EpochLog>& log, const std::string& path) {
    std::string out = "epoch,loss,val_accuracy\n";
    for (const auto& e : log)
        out += std::to_string(e.epoch) + "," + fmt_double(e.loss) + "," +
               fmt_double(e.val_accuracy) + "\n";
    atomic_write(path, out);
}

}  // namespace cq
