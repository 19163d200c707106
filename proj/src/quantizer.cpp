#include "cq/quantizer.hpp"

#include <algorithm>
#include <cmath>
#include <set>
#include <sstream>
#include <stdexcept>

#include "cq/fileio.hpp"
#include "cq/parallel.hpp"

namespace cq {

QuantRange weight_range(const std::vector<double>& weights) {
    double b = 0.0;
    for (double w : weights) b = std::max(b, std::fabs(w));
    return {-b, b};
}

double clip(double x, const QuantRange& r) {
    if (x >= r.b) return r.b;
    if (x <= r.a) return r.a;
    return x;
}

double quantize_value(double x, const QuantRange& r, int bits) {
    if (bits < 1) throw std::invalid_argument("quantize_value needs bits >= 1");
    if (!(r.a < r.b)) return r.a;  // degenerate range, e.g. an all-zero layer
    const double steps = std::exp2(bits) - 1.0;  // N = 2^bits levels
    const double xc = clip(x, r);
    const double xr = std::round(steps * (xc - r.a) / (r.b - r.a)) / steps;
    if (xr <= 0.0) return r.a;
    if (xr >= 1.0) return r.b;
    return (r.b - r.a) * xr + r.a;
}

double ste_grad(double upstream, double x, const QuantRange& r) {
    return (x > r.a && x < r.b) ? upstream : 0.0;
}

QuantizedView apply_arrangement(const Network& net, const BitArrangement& arr,
                                const std::map<int, QuantRange>* fixed_ranges) {
    auto expected = net.quant_units();
    std::map<std::pair<int, int>, int> got;
    for (const auto& ub : arr.units) {
        auto key = std::make_pair(ub.layer, ub.unit);
        if (got.count(key))
            throw std::invalid_argument("arrangement names unit (" + std::to_string(ub.layer) + ", " +
                                        std::to_string(ub.unit) + ") twice");
        if (ub.bits < 0 || ub.bits > arr.max_bits)
            throw std::invalid_argument("unit bit-width outside {0..max_bits}");
        got[key] = ub.bits;
    }
    if (got.size() != expected.size())
        throw std::invalid_argument("arrangement does not cover the quantizable units exactly");
    for (const auto& u : expected)
        if (!got.count({u.layer, u.unit}))
            throw std::invalid_argument("arrangement is missing unit (" + std::to_string(u.layer) +
                                        ", " + std::to_string(u.unit) + ")");

    QuantizedView view;
    view.net = net;
    for (int li : net.quantizable_layers()) {
        QuantRange r = fixed_ranges ? fixed_ranges->at(li) : weight_range(net.weights[li]);
        view.ranges[li] = r;
        auto& w = view.net.weights[li];
        auto& b = view.net.biases[li];
        for (int u = 0; u < net.units_in_layer(li); ++u) {
            int64_t begin = 0, count = 0;
            net.unit_weight_span(li, u, &begin, &count);
            int bits = got.at({li, u});
            if (bits == 0) {
                // pruned: the unit is zeroed outright, bias included
                for (int64_t i = 0; i < count; ++i) w[begin + i] = 0.0;
                if (!b.empty()) b[u] = 0.0;
            } else {
                for (int64_t i = 0; i < count; ++i) w[begin + i] = quantize_value(w[begin + i], r, bits);
            }
        }
    }
    return view;
}

ActQuant calibrate_activations(const Network& net, const std::vector<std::vector<double>>& calib,
                               int act_bits) {
    if (calib.empty()) throw std::invalid_argument("calibration set is empty");
    if (act_bits < 1) throw std::invalid_argument("activation bits must be >= 1");
    auto relus = net.relu_layers();
    std::vector<std::vector<double>> per_sample(calib.size(), std::vector<double>(relus.size(), 0.0));
    parallel_for(static_cast<int64_t>(calib.size()), [&](int64_t i) {
        Trace t = forward(net, calib[i]);
        for (size_t k = 0; k < relus.size(); ++k) {
            double mx = 0.0;
            for (double v : t.outputs[relus[k]]) mx = std::max(mx, v);
            per_sample[i][k] = mx;
        }
    });
    ActQuant aq;
    aq.bits = act_bits;
    for (size_t k = 0; k < relus.size(); ++k) {
        double mx = 0.0;
        for (const auto& row : per_sample) mx = std::max(mx, row[k]);
        aq.upper[relus[k]] = mx;
    }
    return aq;
}

void save_arrangement(const BitArrangement& arr, const std::string& path) {
    std::ostringstream out;
    out << "classquant arrangement v1\n";
    out << "max_bits " << arr.max_bits << "\n";
    out << "act_bits " << arr.act_bits << "\n";
    out << "average_bits " << fmt_double(arr.average_bits) << "\n";
    out << "thresholds " << arr.thresholds.size();
    for (double p : arr.thresholds) out << " " << fmt_double(p);
    out << "\n";
    out << "units " << arr.units.size() << "\n";
    for (const auto& u : arr.units) out << u.layer << " " << u.unit << " " << u.bits << "\n";
    atomic_write(path, out.str());
}

BitArrangement load_arrangement(const std::string& path) {
    std::istringstream in(read_file(path));
    std::string line;
    if (!std::getline(in, line) || line != "classquant arrangement v1")
        throw std::runtime_error(path + ": not an arrangement file");
    BitArrangement arr;
    std::string key;
    size_t nth = 0, nu = 0;
    in >> key >> arr.max_bits;
    if (key != "max_bits") throw std::runtime_error(path + ": expected max_bits");
    in >> key >> arr.act_bits;
    if (key != "act_bits") throw std::runtime_error(path + ": expected act_bits");
    in >> key >> arr.average_bits;
    if (key != "average_bits") throw std::runtime_error(path + ": expected average_bits");
    in >> key >> nth;
    if (key != "thresholds") throw std::runtime_error(path + ": expected thresholds");
    arr.thresholds.resize(nth);
    for (auto& p : arr.thresholds) in >> p;
    in >> key >> nu;
    if (key != "units") throw std::runtime_error(path + ": expected units");
    arr.units.resize(nu);
    for (auto& u : arr.units) in >> u.layer >> u.unit >> u.bits;
    if (!in) throw std::runtime_error(path + ": truncated arrangement file");
    return arr;
}

}  // namespace cq
