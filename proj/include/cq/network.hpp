#pragma once

#include <atomic>
#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "cq/rng.hpp"

namespace cq {

enum class LayerKind { Dense, Conv2d, Relu, Flatten };

struct LayerSpec {
    LayerKind kind = LayerKind::Dense;
    // dense
    int in_features = 0;
    int out_features = 0;
    // conv2d
    int in_channels = 0;
    int out_channels = 0;
    int kernel = 0;
    int stride = 1;
    int padding = 0;
    int in_h = 0, in_w = 0;
    int out_h = 0, out_w = 0;
    bool has_bias = true;

    std::vector<int> out_shape;  // resolved at build time

    bool parameterized() const { return kind == LayerKind::Dense || kind == LayerKind::Conv2d; }
    int64_t weight_count() const;
    int64_t bias_count() const;
};

LayerSpec dense(int out_features, bool has_bias = true);
LayerSpec conv2d(int out_channels, int kernel, int stride = 1, int padding = 0, bool has_bias = true);
LayerSpec relu();
LayerSpec flatten();

// Copyable atomic counter for forward/backward instrumentation.
struct CallCounter {
    std::atomic<int64_t> value{0};
    CallCounter() = default;
    CallCounter(const CallCounter& o) : value(o.value.load()) {}
    CallCounter& operator=(const CallCounter& o) {
        value.store(o.value.load());
        return *this;
    }
    void bump() const { const_cast<std::atomic<int64_t>&>(value).fetch_add(1, std::memory_order_relaxed); }
    int64_t get() const { return value.load(); }
};

// A feed-forward chain of dense/conv/relu/flatten layers producing logits.
// The softmax cross-entropy head is applied by the loss functions, not
// stored as a layer; the last parameterized layer must be dense and its
// width is the class count.
struct Network {
    std::vector<int> input_shape;  // {features} or {channels, h, w}
    int num_classes = 0;
    std::vector<LayerSpec> layers;
    std::vector<std::vector<double>> weights;  // empty for relu/flatten
    std::vector<std::vector<double>> biases;

    mutable CallCounter forward_calls;
    mutable CallCounter backward_calls;

    int64_t input_size() const;
    int64_t param_count() const;

    std::vector<int> param_layers() const;       // indices of dense/conv layers, in order
    int first_param_layer() const;
    int last_param_layer() const;
    std::vector<int> quantizable_layers() const;  // param layers strictly between first and output

    // Activation site of a hidden parameterized layer: the relu directly
    // after it (flatten may not intervene), else the layer itself.
    int site_for(int param_layer) const;
    std::vector<int> relu_layers() const;
    // Sites of every hidden parameterized layer (the output layer has no
    // site). For a purely linear stack these are the dense layers
    // themselves, so importance scoring works without any relus.
    std::vector<int> score_sites() const;

    // One bit-width decision per unit: a conv output channel or a dense
    // output neuron of a quantizable layer.
    struct QuantUnit {
        int layer = 0;
        int unit = 0;
        int64_t weight_count = 0;
    };
    std::vector<QuantUnit> quant_units() const;

    int units_in_layer(int param_layer) const;      // filters or neurons
    int neurons_per_unit(int param_layer) const;    // spatial positions for conv, 1 for dense
    // flat activation range of a unit within its site layer output
    void unit_weight_span(int param_layer, int unit, int64_t* begin, int64_t* count) const;
};

Network build_network(std::vector<int> input_shape, std::vector<LayerSpec> protos);
void init_weights(Network& net, RngStream& rng);

// Activations forced to zero at a site, per the ablation semantics.
struct FreezeMask {
    std::map<int, std::vector<int64_t>> entries;  // site layer -> flat activation indices
    bool empty() const { return entries.empty(); }
};

// Uniform fake quantization of relu outputs at a shared bit-width, with
// per-layer calibrated upper bounds (lower bound 0).
struct ActQuant {
    int bits = 0;
    std::map<int, double> upper;  // relu layer -> max activation seen in calibration
};

struct Trace {
    bool valid = false;
    std::vector<double> input;
    std::vector<std::vector<double>> outputs;     // per layer
    std::map<int, std::vector<double>> prequant;  // relu layer -> value before fake quant
};

struct ForwardOptions {
    const FreezeMask* freeze = nullptr;
    const ActQuant* act_quant = nullptr;
};

Trace forward(const Network& net, const std::vector<double>& input, const ForwardOptions& opt = {});
const std::vector<double>& logits_of(const Network& net, const Trace& trace);

struct Gradients {
    std::vector<std::vector<double>> dweights;
    std::vector<std::vector<double>> dbiases;
    std::vector<std::vector<double>> doutputs;  // gradient of the scalar w.r.t. each layer output
};

// Gradients of a scalar with gradient `dlogits` at the logits, w.r.t. every
// weight and every layer output. Pass the same options the forward ran with.
Gradients backward(const Network& net, const Trace& trace, const std::vector<double>& dlogits,
                   const ForwardOptions& opt = {});

// Fraction of samples whose argmax logit (lowest index on ties) equals the label.
double evaluate_accuracy(const Network& net, const std::vector<std::vector<double>>& xs,
                         const std::vector<int>& labels, const ActQuant* act_quant = nullptr);

// scalar readouts and loss heads -----------------------------------------

std::vector<double> softmax(const std::vector<double>& logits);

// value + gradient at the logits for the scalar being differentiated
struct Objective {
    double value = 0.0;
    std::vector<double> dlogits;
};

Objective readout_true_logit(const std::vector<double>& logits, int label);
Objective readout_logit_l1(const std::vector<double>& logits);
Objective cross_entropy(const std::vector<double>& logits, int label);

int argmax(const std::vector<double>& v);

}  // namespace cq
