#include "cq/network.hpp"

#include <cmath>
#include <cstring>
#include <stdexcept>

#include "cq/parallel.hpp"
#include "cq/quantizer.hpp"

namespace cq {

int64_t LayerSpec::weight_count() const {
    switch (kind) {
        case LayerKind::Dense: return static_cast<int64_t>(in_features) * out_features;
        case LayerKind::Conv2d: return static_cast<int64_t>(out_channels) * in_channels * kernel * kernel;
        default: return 0;
    }
}

int64_t LayerSpec::bias_count() const {
    if (!has_bias) return 0;
    switch (kind) {
        case LayerKind::Dense: return out_features;
        case LayerKind::Conv2d: return out_channels;
        default: return 0;
    }
}

LayerSpec dense(int out_features, bool has_bias) {
    LayerSpec s;
    s.kind = LayerKind::Dense;
    s.out_features = out_features;
    s.has_bias = has_bias;
    return s;
}

LayerSpec conv2d(int out_channels, int kernel, int stride, int padding, bool has_bias) {
    LayerSpec s;
    s.kind = LayerKind::Conv2d;
    s.out_channels = out_channels;
    s.kernel = kernel;
    s.stride = stride;
    s.padding = padding;
    s.has_bias = has_bias;
    return s;
}

LayerSpec relu() {
    LayerSpec s;
    s.kind = LayerKind::Relu;
    return s;
}

LayerSpec flatten() {
    LayerSpec s;
    s.kind = LayerKind::Flatten;
    return s;
}

static int64_t shape_size(const std::vector<int>& shape) {
    int64_t n = 1;
    for (int d : shape) n *= d;
    return n;
}

int64_t Network::input_size() const { return shape_size(input_shape); }

int64_t Network::param_count() const {
    int64_t n = 0;
    for (const auto& l : layers) n += l.weight_count() + l.bias_count();
    return n;
}

std::vector<int> Network::param_layers() const {
    std::vector<int> out;
    for (int i = 0; i < static_cast<int>(layers.size()); ++i)
        if (layers[i].parameterized()) out.push_back(i);
    return out;
}

int Network::first_param_layer() const { return param_layers().front(); }
int Network::last_param_layer() const { return param_layers().back(); }

std::vector<int> Network::quantizable_layers() const {
    auto all = param_layers();
    std::vector<int> out;
    for (int li : all)
        if (li != all.front() && li != all.back()) out.push_back(li);
    return out;
}

int Network::site_for(int param_layer) const {
    if (param_layer + 1 < static_cast<int>(layers.size()) && layers[param_layer + 1].kind == LayerKind::Relu)
        return param_layer + 1;
    return param_layer;
}

std::vector<int> Network::relu_layers() const {
    std::vector<int> out;
    for (int i = 0; i < static_cast<int>(layers.size()); ++i)
        if (layers[i].kind == LayerKind::Relu) out.push_back(i);
    return out;
}

std::vector<int> Network::score_sites() const {
    auto params = param_layers();
    std::vector<int> out;
    for (int li : params)
        if (li != params.back()) out.push_back(site_for(li));
    return out;
}

int Network::units_in_layer(int param_layer) const {
    const auto& l = layers.at(param_layer);
    return l.kind == LayerKind::Conv2d ? l.out_channels : l.out_features;
}

int Network::neurons_per_unit(int param_layer) const {
    const auto& l = layers.at(param_layer);
    return l.kind == LayerKind::Conv2d ? l.out_h * l.out_w : 1;
}

void Network::unit_weight_span(int param_layer, int unit, int64_t* begin, int64_t* count) const {
    const auto& l = layers.at(param_layer);
    int64_t per = l.kind == LayerKind::Conv2d ? static_cast<int64_t>(l.in_channels) * l.kernel * l.kernel
                                              : l.in_features;
    *begin = per * unit;
    *count = per;
}

std::vector<Network::QuantUnit> Network::quant_units() const {
    std::vector<QuantUnit> out;
    for (int li : quantizable_layers()) {
        int64_t begin = 0, count = 0;
        for (int u = 0; u < units_in_layer(li); ++u) {
            unit_weight_span(li, u, &begin, &count);
            out.push_back({li, u, count});
        }
    }
    return out;
}

Network build_network(std::vector<int> input_shape, std::vector<LayerSpec> protos) {
    if (input_shape.size() != 1 && input_shape.size() != 3)
        throw std::invalid_argument("input shape must be {features} or {channels, h, w}");
    for (int d : input_shape)
        if (d <= 0) throw std::invalid_argument("input shape dims must be positive");

    Network net;
    net.input_shape = input_shape;
    std::vector<int> cur = input_shape;

    for (auto spec : protos) {
        switch (spec.kind) {
            case LayerKind::Dense: {
                if (cur.size() != 1)
                    throw std::invalid_argument("dense layer requires flat input; insert flatten");
                if (spec.out_features <= 0) throw std::invalid_argument("dense out_features must be positive");
                spec.in_features = cur[0];
                cur = {spec.out_features};
                break;
            }
            case LayerKind::Conv2d: {
                if (cur.size() != 3) throw std::invalid_argument("conv layer requires {c, h, w} input");
                if (spec.out_channels <= 0 || spec.kernel <= 0 || spec.stride <= 0 || spec.padding < 0)
                    throw std::invalid_argument("bad conv parameters");
                spec.in_channels = cur[0];
                spec.in_h = cur[1];
                spec.in_w = cur[2];
                int oh = (spec.in_h + 2 * spec.padding - spec.kernel) / spec.stride + 1;
                int ow = (spec.in_w + 2 * spec.padding - spec.kernel) / spec.stride + 1;
                if (oh <= 0 || ow <= 0) throw std::invalid_argument("conv output would be empty");
                spec.out_h = oh;
                spec.out_w = ow;
                cur = {spec.out_channels, oh, ow};
                break;
            }
            case LayerKind::Relu:
                break;
            case LayerKind::Flatten: {
                if (cur.size() != 3) throw std::invalid_argument("flatten requires {c, h, w} input");
                cur = {static_cast<int>(shape_size(cur))};
                break;
            }
        }
        spec.out_shape = cur;
        net.layers.push_back(std::move(spec));
    }

    auto params = net.param_layers();
    if (params.empty()) throw std::invalid_argument("network has no parameterized layers");
    const auto& head = net.layers[params.back()];
    if (head.kind != LayerKind::Dense)
        throw std::invalid_argument("output layer must be dense");
    if (params.back() != static_cast<int>(net.layers.size()) - 1)
        throw std::invalid_argument("the output dense layer must be the final layer");
    net.num_classes = head.out_features;

    net.weights.resize(net.layers.size());
    net.biases.resize(net.layers.size());
    for (size_t i = 0; i < net.layers.size(); ++i) {
        net.weights[i].assign(net.layers[i].weight_count(), 0.0);
        net.biases[i].assign(net.layers[i].bias_count(), 0.0);
    }
    return net;
}

void init_weights(Network& net, RngStream& rng) {
    for (size_t i = 0; i < net.layers.size(); ++i) {
        const auto& l = net.layers[i];
        if (!l.parameterized()) continue;
        int fan_in = l.kind == LayerKind::Dense ? l.in_features : l.in_channels * l.kernel * l.kernel;
        double limit = std::sqrt(6.0 / fan_in);
        for (auto& w : net.weights[i]) w = rng.uniform(-limit, limit);
        for (auto& b : net.biases[i]) b = 0.0;
    }
}

// --- kernels -------------------------------------------------------------

static void dense_forward(const LayerSpec& l, const double* x, const double* w, const double* b,
                          double* y) {
    for (int o = 0; o < l.out_features; ++o) {
        const double* wr = w + static_cast<int64_t>(o) * l.in_features;
        double acc = b ? b[o] : 0.0;
        for (int i = 0; i < l.in_features; ++i) acc += wr[i] * x[i];
        y[o] = acc;
    }
}

static void conv_forward(const LayerSpec& l, const double* x, const double* w, const double* b,
                         double* y) {
    const int IC = l.in_channels, K = l.kernel, S = l.stride, P = l.padding;
    const int IH = l.in_h, IW = l.in_w, OH = l.out_h, OW = l.out_w;
    for (int oc = 0; oc < l.out_channels; ++oc) {
        const double* wc = w + static_cast<int64_t>(oc) * IC * K * K;
        double* yc = y + static_cast<int64_t>(oc) * OH * OW;
        for (int oh = 0; oh < OH; ++oh) {
            const int ih0 = oh * S - P;
            for (int ow = 0; ow < OW; ++ow) {
                const int iw0 = ow * S - P;
                double acc = b ? b[oc] : 0.0;
                for (int ic = 0; ic < IC; ++ic) {
                    const double* xc = x + static_cast<int64_t>(ic) * IH * IW;
                    const double* wk = wc + static_cast<int64_t>(ic) * K * K;
                    for (int ky = 0; ky < K; ++ky) {
                        const int ih = ih0 + ky;
                        if (ih < 0 || ih >= IH) continue;
                        const double* xrow = xc + static_cast<int64_t>(ih) * IW;
                        const double* wrow = wk + static_cast<int64_t>(ky) * K;
                        for (int kx = 0; kx < K; ++kx) {
                            const int iw = iw0 + kx;
                            if (iw < 0 || iw >= IW) continue;
                            acc += xrow[iw] * wrow[kx];
                        }
                    }
                }
                yc[static_cast<int64_t>(oh) * OW + ow] = acc;
            }
        }
    }
}

static void validate_freeze(const Network& net, const FreezeMask& mask) {
    for (const auto& [li, idxs] : mask.entries) {
        if (li < 0 || li >= static_cast<int>(net.layers.size()))
            throw std::invalid_argument("freeze mask names a layer outside the network");
        int64_t n = shape_size(net.layers[li].out_shape);
        for (int64_t ix : idxs)
            if (ix < 0 || ix >= n)
                throw std::invalid_argument("freeze mask index out of range");
    }
}

Trace forward(const Network& net, const std::vector<double>& input, const ForwardOptions& opt) {
    if (static_cast<int64_t>(input.size()) != net.input_size())
        throw std::invalid_argument("input length does not match the network input shape");
    if (opt.freeze) validate_freeze(net, *opt.freeze);
    net.forward_calls.bump();

    Trace t;
    t.input = input;
    t.outputs.resize(net.layers.size());
    const std::vector<double>* x = &t.input;
    for (size_t li = 0; li < net.layers.size(); ++li) {
        const auto& l = net.layers[li];
        auto& y = t.outputs[li];
        switch (l.kind) {
            case LayerKind::Dense:
                y.resize(l.out_features);
                dense_forward(l, x->data(), net.weights[li].data(),
                              l.has_bias ? net.biases[li].data() : nullptr, y.data());
                break;
            case LayerKind::Conv2d:
                y.assign(static_cast<size_t>(l.out_channels) * l.out_h * l.out_w, 0.0);
                conv_forward(l, x->data(), net.weights[li].data(),
                             l.has_bias ? net.biases[li].data() : nullptr, y.data());
                break;
            case LayerKind::Relu:
                y.resize(x->size());
                for (size_t i = 0; i < x->size(); ++i) y[i] = (*x)[i] > 0.0 ? (*x)[i] : 0.0;
                break;
            case LayerKind::Flatten:
                y = *x;
                break;
        }
        if (opt.freeze) {
            auto it = opt.freeze->entries.find(static_cast<int>(li));
            if (it != opt.freeze->entries.end())
                for (int64_t ix : it->second) y[ix] = 0.0;
        }
        if (l.kind == LayerKind::Relu && opt.act_quant && opt.act_quant->bits >= 1) {
            auto it = opt.act_quant->upper.find(static_cast<int>(li));
            if (it != opt.act_quant->upper.end()) {
                auto& pq = t.prequant[static_cast<int>(li)];
                pq = y;
                double b = it->second;
                if (b <= 0.0) {
                    std::fill(y.begin(), y.end(), 0.0);
                } else {
                    QuantRange r{0.0, b};
                    for (auto& v : y) v = quantize_value(v, r, opt.act_quant->bits);
                }
            }
        }
        x = &y;
    }
    t.valid = true;
    return t;
}

const std::vector<double>& logits_of(const Network& net, const Trace& trace) {
    (void)net;
    return trace.outputs.back();
}

Gradients backward(const Network& net, const Trace& trace, const std::vector<double>& dlogits,
                   const ForwardOptions& opt) {
    if (!trace.valid) throw std::invalid_argument("backward requires a recorded forward trace");
    if (static_cast<int>(dlogits.size()) != net.num_classes)
        throw std::invalid_argument("dlogits length does not match class count");
    net.backward_calls.bump();

    Gradients g;
    g.dweights.resize(net.layers.size());
    g.dbiases.resize(net.layers.size());
    g.doutputs.resize(net.layers.size());
    for (size_t i = 0; i < net.layers.size(); ++i) {
        g.dweights[i].assign(net.weights[i].size(), 0.0);
        g.dbiases[i].assign(net.biases[i].size(), 0.0);
    }

    std::vector<double> cur = dlogits;
    for (int li = static_cast<int>(net.layers.size()) - 1; li >= 0; --li) {
        const auto& l = net.layers[li];
        g.doutputs[li] = cur;
        const std::vector<double>& x = li == 0 ? trace.input : trace.outputs[li - 1];

        if (l.kind == LayerKind::Relu && opt.act_quant && opt.act_quant->bits >= 1) {
            auto it = opt.act_quant->upper.find(li);
            if (it != opt.act_quant->upper.end()) {
                // straight-through on the activation grid: pass below the clip bound
                auto pit = trace.prequant.find(li);
                if (pit == trace.prequant.end())
                    throw std::invalid_argument("trace was not recorded with activation quantization");
                double b = it->second;
                const auto& pq = pit->second;
                for (size_t i = 0; i < cur.size(); ++i)
                    if (b <= 0.0 || pq[i] >= b) cur[i] = 0.0;
            }
        }
        if (opt.freeze) {
            auto it = opt.freeze->entries.find(li);
            if (it != opt.freeze->entries.end())
                for (int64_t ix : it->second) cur[ix] = 0.0;
        }

        switch (l.kind) {
            case LayerKind::Relu: {
                std::vector<double> dx(cur.size());
                for (size_t i = 0; i < cur.size(); ++i) dx[i] = x[i] > 0.0 ? cur[i] : 0.0;
                cur = std::move(dx);
                break;
            }
            case LayerKind::Flatten:
                break;
            case LayerKind::Dense: {
                std::vector<double> dx(l.in_features, 0.0);
                double* dw = g.dweights[li].data();
                for (int o = 0; o < l.out_features; ++o) {
                    const double go = cur[o];
                    if (l.has_bias) g.dbiases[li][o] += go;
                    const double* wr = net.weights[li].data() + static_cast<int64_t>(o) * l.in_features;
                    double* dwr = dw + static_cast<int64_t>(o) * l.in_features;
                    for (int i = 0; i < l.in_features; ++i) {
                        dx[i] += wr[i] * go;
                        dwr[i] += x[i] * go;
                    }
                }
                cur = std::move(dx);
                break;
            }
            case LayerKind::Conv2d: {
                const int IC = l.in_channels, K = l.kernel, S = l.stride, P = l.padding;
                const int IH = l.in_h, IW = l.in_w, OH = l.out_h, OW = l.out_w;
                std::vector<double> dx(static_cast<size_t>(IC) * IH * IW, 0.0);
                for (int oc = 0; oc < l.out_channels; ++oc) {
                    const double* wc = net.weights[li].data() + static_cast<int64_t>(oc) * IC * K * K;
                    double* dwc = g.dweights[li].data() + static_cast<int64_t>(oc) * IC * K * K;
                    const double* gc = cur.data() + static_cast<int64_t>(oc) * OH * OW;
                    for (int oh = 0; oh < OH; ++oh) {
                        const int ih0 = oh * S - P;
                        for (int ow = 0; ow < OW; ++ow) {
                            const double go = gc[static_cast<int64_t>(oh) * OW + ow];
                            if (go == 0.0) continue;
                            const int iw0 = ow * S - P;
                            if (l.has_bias) g.dbiases[li][oc] += go;
                            for (int ic = 0; ic < IC; ++ic) {
                                const double* xc = x.data() + static_cast<int64_t>(ic) * IH * IW;
                                double* dxc = dx.data() + static_cast<int64_t>(ic) * IH * IW;
                                const double* wk = wc + static_cast<int64_t>(ic) * K * K;
                                double* dwk = dwc + static_cast<int64_t>(ic) * K * K;
                                for (int ky = 0; ky < K; ++ky) {
                                    const int ih = ih0 + ky;
                                    if (ih < 0 || ih >= IH) continue;
                                    for (int kx = 0; kx < K; ++kx) {
                                        const int iw = iw0 + kx;
                                        if (iw < 0 || iw >= IW) continue;
                                        dwk[ky * K + kx] += xc[ih * IW + iw] * go;
                                        dxc[ih * IW + iw] += wk[ky * K + kx] * go;
                                    }
                                }
                            }
                        }
                    }
                }
                cur = std::move(dx);
                break;
            }
        }
    }
    return g;
}

// A zero bias gradient for frozen output rows follows from the zeroed
// upstream entries; no special casing needed above.

double evaluate_accuracy(const Network& net, const std::vector<std::vector<double>>& xs,
                         const std::vector<int>& labels, const ActQuant* act_quant) {
    if (xs.empty()) throw std::invalid_argument("evaluate_accuracy needs a nonempty sample set");
    if (xs.size() != labels.size())
        throw std::invalid_argument("sample and label counts differ");
    std::vector<char> hit(xs.size(), 0);
    ForwardOptions opt;
    opt.act_quant = act_quant;
    parallel_for(static_cast<int64_t>(xs.size()), [&](int64_t i) {
        Trace t = forward(net, xs[i], opt);
        hit[i] = argmax(logits_of(net, t)) == labels[i] ? 1 : 0;
    });
    int64_t correct = 0;
    for (char h : hit) correct += h;
    return static_cast<double>(correct) / static_cast<double>(xs.size());
}

std::vector<double> softmax(const std::vector<double>& logits) {
    double mx = logits[0];
    for (double v : logits) mx = std::max(mx, v);
    std::vector<double> p(logits.size());
    double sum = 0.0;
    for (size_t i = 0; i < logits.size(); ++i) {
        p[i] = std::exp(logits[i] - mx);
        sum += p[i];
    }
    for (auto& v : p) v /= sum;
    return p;
}

Objective readout_true_logit(const std::vector<double>& logits, int label) {
    if (label < 0 || label >= static_cast<int>(logits.size()))
        throw std::invalid_argument("label out of range");
    Objective r;
    r.value = logits[label];
    r.dlogits.assign(logits.size(), 0.0);
    r.dlogits[label] = 1.0;
    return r;
}

Objective readout_logit_l1(const std::vector<double>& logits) {
    Objective r;
    r.dlogits.resize(logits.size());
    for (size_t i = 0; i < logits.size(); ++i) {
        r.value += std::fabs(logits[i]);
        r.dlogits[i] = logits[i] > 0.0 ? 1.0 : (logits[i] < 0.0 ? -1.0 : 0.0);
    }
    return r;
}

Objective cross_entropy(const std::vector<double>& logits, int label) {
    if (label < 0 || label >= static_cast<int>(logits.size()))
        throw std::invalid_argument("label out of range");
    auto p = softmax(logits);
    Objective r;
    r.value = -std::log(std::max(p[label], 1e-12));
    r.dlogits = p;
    r.dlogits[label] -= 1.0;
    return r;
}

int argmax(const std::vector<double>& v) {
    int best = 0;
    for (int i = 1; i < static_cast<int>(v.size()); ++i)
        if (v[i] > v[best]) best = i;
    return best;
}

}  // namespace cq
