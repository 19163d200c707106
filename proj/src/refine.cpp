#include "cq/refine.hpp"

#include <cmath>
#include <set>
#include <stdexcept>

#include "cq/fileio.hpp"
#include "cq/parallel.hpp"

namespace cq {

KDLoss kd_loss(const std::vector<double>& student_logits,
               const std::vector<double>& teacher_logits, int label,
               double alpha, bool kl_as_printed) {
    if (student_logits.size() != teacher_logits.size() || student_logits.empty())
        throw std::invalid_argument("kd_loss: logit size mismatch");
    int n = static_cast<int>(student_logits.size());
    if (label < 0 || label >= n)
        throw std::invalid_argument("kd_loss: label out of range");
    if (!(alpha >= 0.0 && alpha <= 1.0))
        throw std::invalid_argument("kd_loss: alpha must lie in [0, 1]");

    std::vector<double> s = softmax(student_logits);
    std::vector<double> f = softmax(teacher_logits);
    auto safe_log = [](double p) { return std::log(std::max(p, 1e-12)); };

    KDLoss out;
    out.ce = -safe_log(s[label]);

    // log-ratio per class and its probability-weighted sum
    std::vector<double> lr(n);
    double kl = 0.0;
    for (int i = 0; i < n; ++i) {
        lr[i] = safe_log(s[i]) - safe_log(f[i]);
        kl += s[i] * lr[i];
    }
    double sign = kl_as_printed ? -1.0 : 1.0;
    out.divergence = sign * kl;
    out.total = alpha * out.ce + (1.0 - alpha) * out.divergence;

    out.dlogits.resize(n);
    for (int i = 0; i < n; ++i) {
        double dce = s[i] - (i == label ? 1.0 : 0.0);
        double dkl = s[i] * (lr[i] - kl);
        out.dlogits[i] = alpha * dce + (1.0 - alpha) * sign * dkl;
    }
    return out;
}

RefineResult refine(const Network& student_shadow, const Network& teacher,
                    const BitArrangement& arr, const ActQuant& act,
                    const std::vector<std::vector<double>>& train_x,
                    const std::vector<int>& train_y,
                    const std::vector<std::vector<double>>& val_x,
                    const std::vector<int>& val_y,
                    const KDConfig& cfg, RngStream& rng) {
    if (train_x.size() != train_y.size() || train_x.empty())
        throw std::invalid_argument("refine: bad training set");
    if (teacher.num_classes != student_shadow.num_classes ||
        teacher.input_size() != student_shadow.input_size())
        throw std::invalid_argument("refine: teacher and student shapes disagree");
    if (cfg.batch_size <= 0 || cfg.epochs < 0)
        throw std::invalid_argument("refine: bad config");

    RefineResult res;
    res.shadow = student_shadow;
    Network& shadow = res.shadow;

    // Validates the arrangement against the network up front and, when
    // ranges are frozen, pins them to the shadow's starting weights.
    std::map<int, QuantRange> frozen = apply_arrangement(shadow, arr).ranges;
    const std::map<int, QuantRange>* fixed = cfg.freeze_weight_ranges ? &frozen : nullptr;

    // (layer, unit) pairs that are pruned outright: no forward signal, no
    // updates, weight decay included.
    std::set<std::pair<int, int>> zero_units;
    for (const auto& ub : arr.units)
        if (ub.bits == 0) zero_units.insert({ub.layer, ub.unit});

    // The teacher never changes, so its logits per training sample are
    // computed once.
    std::vector<std::vector<double>> teacher_logits(train_x.size());
    parallel_for(static_cast<int64_t>(train_x.size()), [&](int64_t i) {
        Trace t = forward(teacher, train_x[i]);
        teacher_logits[i] = logits_of(teacher, t);
    });

    std::set<int> qlayers;
    for (int li : shadow.quantizable_layers()) qlayers.insert(li);

    Momentum vel(shadow);
    std::vector<int> order(train_x.size());
    for (size_t i = 0; i < order.size(); ++i) order[i] = static_cast<int>(i);

    ForwardOptions fwd_opt;
    fwd_opt.act_quant = &act;

    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
        double lr = lr_for_epoch(cfg.lr, epoch, cfg.epochs);
        rng.shuffle(order);
        double loss_sum = 0.0, ce_sum = 0.0, div_sum = 0.0;
        int64_t seen = 0;

        for (size_t at = 0; at < order.size(); at += cfg.batch_size) {
            size_t bs = std::min<size_t>(cfg.batch_size, order.size() - at);
            QuantizedView qv = apply_arrangement(shadow, arr, fixed);

            std::vector<Gradients> grads(bs);
            std::vector<KDLoss> losses(bs);
            parallel_for(static_cast<int64_t>(bs), [&](int64_t i) {
                int idx = order[at + i];
                Trace tr = forward(qv.net, train_x[idx], fwd_opt);
                losses[i] = kd_loss(logits_of(qv.net, tr), teacher_logits[idx],
                                    train_y[idx], cfg.alpha, cfg.kl_as_printed);
                grads[i] = backward(qv.net, tr, losses[i].dlogits, fwd_opt);
            });
            for (const auto& l : losses) {
                loss_sum += l.total;
                ce_sum += l.ce;
                div_sum += l.divergence;
            }
            seen += static_cast<int64_t>(bs);

            double inv = 1.0 / static_cast<double>(bs);
            for (int li : shadow.param_layers()) {
                auto& w = shadow.weights.at(li);
                auto& b = shadow.biases.at(li);
                auto& vw = vel.w.at(li);
                auto& vb = vel.b.at(li);
                bool quantized = qlayers.count(li) != 0;

                if (!quantized) {
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
                    continue;
                }

                const QuantRange& r = qv.ranges.at(li);
                for (int u = 0; u < shadow.units_in_layer(li); ++u) {
                    if (zero_units.count({li, u})) continue;
                    int64_t begin = 0, count = 0;
                    shadow.unit_weight_span(li, u, &begin, &count);
                    for (int64_t j = begin; j < begin + count; ++j) {
                        double g = 0.0;
                        for (const auto& gr : grads) g += gr.dweights.at(li)[j];
                        // straight-through: the gradient of the quantized
                        // weight drives the shadow weight inside the range
                        g = ste_grad(g * inv, w[j], r) + cfg.weight_decay * w[j];
                        vw[j] = cfg.momentum * vw[j] + g;
                        w[j] -= lr * vw[j];
                    }
                    if (!b.empty()) {
                        double g = 0.0;
                        for (const auto& gr : grads) g += gr.dbiases.at(li)[u];
                        g *= inv;
                        vb[u] = cfg.momentum * vb[u] + g;
                        b[u] -= lr * vb[u];
                    }
                }
            }
        }

        RefineEpoch e;
        e.epoch = epoch;
        e.loss = loss_sum / static_cast<double>(seen);
        e.ce = ce_sum / static_cast<double>(seen);
        e.divergence = div_sum / static_cast<double>(seen);
        if (!val_x.empty()) {
            QuantizedView qv = apply_arrangement(shadow, arr, fixed);
            e.val_accuracy = evaluate_accuracy(qv.net, val_x, val_y, &act);
        }
        res.log.push_back(e);
    }

    res.deployed = apply_arrangement(shadow, arr, fixed);
    res.final_val_accuracy =
        val_x.empty() ? 0.0 : evaluate_accuracy(res.deployed.net, val_x, val_y, &act);
    return res;
}

void save_refine_log(const std::vector<RefineEpoch>& log, const std::string& path) {
    std::string out = "epoch,loss,ce,divergence,val_accuracy\n";
    for (const auto& e : log)
        out += std::to_string(e.epoch) + "," + fmt_double(e.loss) + "," + fmt_double(e.ce) + "," +
               fmt_double(e.divergence) + "," + fmt_double(e.val_accuracy) + "\n";
    atomic_write(path, out);
}

}  // namespace cq
