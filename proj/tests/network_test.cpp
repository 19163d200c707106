#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>

#include "cq/network.hpp"
#include "cq/quantizer.hpp"
#include "cq/rng.hpp"

using namespace cq;

TEST_CASE("dense forward computes Wx + b") {
    Network net = build_network({2}, {dense(2)});
    net.weights[0] = {1.0, 2.0,   // row for output 0
                      -3.0, 0.5}; // row for output 1
    net.biases[0] = {0.25, -1.0};
    Trace t = forward(net, {2.0, -1.0});
    CHECK(t.outputs[0][0] == doctest::Approx(1.0 * 2.0 + 2.0 * -1.0 + 0.25));
    CHECK(t.outputs[0][1] == doctest::Approx(-3.0 * 2.0 + 0.5 * -1.0 - 1.0));
}

TEST_CASE("conv forward matches a hand-computed window") {
    // 1 input channel 3x3, one 2x2 kernel, stride 1, no padding, then the
    // mandatory dense head on the flattened 2x2 result
    Network net = build_network({1, 3, 3}, {conv2d(1, 2), flatten(), dense(1)});
    net.weights[0] = {1.0, 0.0, 0.0, -1.0};  // k[0][0]=1, k[1][1]=-1
    net.biases[0] = {0.5};
    std::vector<double> img = {1, 2, 3,
                               4, 5, 6,
                               7, 8, 9};
    Trace t = forward(net, img);
    // cross-correlation: y(0,0) = 1*1 + (-1)*5 + 0.5
    CHECK(t.outputs[0][0] == doctest::Approx(1.0 - 5.0 + 0.5));
    CHECK(t.outputs[0][1] == doctest::Approx(2.0 - 6.0 + 0.5));
    CHECK(t.outputs[0][2] == doctest::Approx(4.0 - 8.0 + 0.5));
    CHECK(t.outputs[0][3] == doctest::Approx(5.0 - 9.0 + 0.5));
}

TEST_CASE("conv padding contributes zeros") {
    Network net = build_network({1, 2, 2}, {conv2d(1, 3, 1, 1), flatten(), dense(1)});
    net.weights[0].assign(9, 1.0);  // sum over the 3x3 window
    std::vector<double> img = {1, 2, 3, 4};
    Trace t = forward(net, img);
    // top-left output window covers only the four real pixels
    CHECK(t.outputs[0][0] == doctest::Approx(10.0));
}

TEST_CASE("conv output shape uses floor division") {
    Network net = build_network({1, 16, 16}, {conv2d(3, 3, 2, 1), flatten(), dense(2)});
    CHECK(net.layers[0].out_h == 8);
    CHECK(net.layers[0].out_w == 8);
}

TEST_CASE("network construction rejects inconsistent stacks") {
    CHECK_THROWS_AS(build_network({4, 4}, {dense(2)}), std::invalid_argument);
    CHECK_THROWS_AS(build_network({1, 4, 4}, {dense(2)}), std::invalid_argument);
    CHECK_THROWS_AS(build_network({4}, {conv2d(2, 3)}), std::invalid_argument);
    CHECK_THROWS_AS(build_network({4}, {dense(4), relu()}), std::invalid_argument);
    CHECK_THROWS_AS(build_network({4}, {relu()}), std::invalid_argument);
    CHECK_THROWS_AS(build_network({1, 2, 2}, {conv2d(1, 5), flatten(), dense(1)}),
                    std::invalid_argument);
}

TEST_CASE("layer roles: first and last parameterized layers are not quantizable") {
    Network net = build_network({8}, {dense(6), relu(), dense(5), relu(), dense(3)});
    CHECK(net.num_classes == 3);
    CHECK(net.param_layers() == std::vector<int>{0, 2, 4});
    CHECK(net.quantizable_layers() == std::vector<int>{2});
    CHECK(net.site_for(2) == 3);
    CHECK(net.score_sites() == std::vector<int>{1, 3});

    auto units = net.quant_units();
    CHECK(units.size() == 5);
    CHECK(units[0].layer == 2);
    CHECK(units[0].weight_count == 6);
}

TEST_CASE("a purely linear stack scores at the dense layers themselves") {
    Network net = build_network({4}, {dense(3), dense(2)});
    CHECK(net.score_sites() == std::vector<int>{0});
}

TEST_CASE("conv units map to output channels with spatial neuron blocks") {
    Network net =
        build_network({2, 6, 6}, {conv2d(4, 3, 1, 1), relu(), conv2d(3, 3, 2, 1), relu(),
                                  flatten(), dense(2)});
    CHECK(net.quantizable_layers() == std::vector<int>{2});
    CHECK(net.units_in_layer(2) == 3);
    CHECK(net.neurons_per_unit(2) == 9);  // 3x3 spatial output
    int64_t begin = 0, count = 0;
    net.unit_weight_span(2, 1, &begin, &count);
    CHECK(count == 4 * 3 * 3);
    CHECK(begin == count);
}

namespace {

double loss_of(const Network& net, const std::vector<double>& x, int label,
               const ForwardOptions& opt = {}) {
    Trace t = forward(net, x, opt);
    return cross_entropy(logits_of(net, t), label).value;
}

// central-difference gradient for one parameter slot
double fd_weight(Network& net, int li, size_t j, const std::vector<double>& x, int label,
                 double h = 1e-6) {
    double saved = net.weights[li][j];
    net.weights[li][j] = saved + h;
    double up = loss_of(net, x, label);
    net.weights[li][j] = saved - h;
    double down = loss_of(net, x, label);
    net.weights[li][j] = saved;
    return (up - down) / (2.0 * h);
}

}  // namespace

TEST_CASE("analytic gradients match central differences on a small CNN") {
    Network net = build_network(
        {1, 5, 5}, {conv2d(2, 3, 1, 1), relu(), conv2d(2, 3, 2, 0), relu(), flatten(), dense(3)});
    RngStream rng(11, "gradcheck");
    init_weights(net, rng);
    std::vector<double> x(net.input_size());
    for (auto& v : x) v = rng.uniform(-1.0, 1.0);
    int label = 1;

    Trace t = forward(net, x);
    auto obj = cross_entropy(logits_of(net, t), label);
    Gradients g = backward(net, t, obj.dlogits);

    for (int li : net.param_layers()) {
        for (size_t j = 0; j < net.weights[li].size(); j += 3) {
            double fd = fd_weight(net, li, j, x, label);
            double rel = std::fabs(g.dweights[li][j] - fd) / (std::fabs(fd) + 1e-8);
            CHECK(rel < 1e-3);
        }
    }
}

TEST_CASE("relu gradient is zero at exactly zero input") {
    Network net = build_network({1}, {dense(1, false), relu(), dense(1)});
    net.weights[0] = {0.0};  // makes the relu input exactly 0 for x=1
    net.weights[2] = {2.0};
    net.biases[2] = {0.0};
    Trace t = forward(net, {1.0});
    Gradients g = backward(net, t, {1.0});
    // with a pass-through gate this would be x * w2 = 2; the subgradient
    // at 0 is chosen as 0
    CHECK(g.dweights[0][0] == 0.0);
}

TEST_CASE("freezing an activation zeroes it in forward and blocks its gradient") {
    Network net = build_network({3}, {dense(4), relu(), dense(2)});
    RngStream rng(12, "freeze");
    init_weights(net, rng);
    std::vector<double> x = {0.3, -0.8, 0.5};

    FreezeMask mask;
    mask.entries[1] = {2};
    ForwardOptions opt;
    opt.freeze = &mask;

    Trace t = forward(net, x, opt);
    CHECK(t.outputs[1][2] == 0.0);

    Gradients g = backward(net, t, {1.0, -1.0}, opt);
    // weights feeding the frozen neuron get no gradient
    for (int i = 0; i < 3; ++i) CHECK(g.dweights[0][2 * 3 + i] == 0.0);

    FreezeMask bad;
    bad.entries[1] = {99};
    ForwardOptions bad_opt;
    bad_opt.freeze = &bad;
    CHECK_THROWS_AS(forward(net, x, bad_opt), std::invalid_argument);
}

TEST_CASE("activation quantization snaps relu outputs onto the grid") {
    Network net = build_network({2}, {dense(2, false), relu(), dense(2)});
    net.weights[0] = {1.0, 0.0, 0.0, 1.0};  // identity
    net.weights[2] = {1.0, 0.0, 0.0, 1.0};

    ActQuant act;
    act.bits = 2;
    act.upper[1] = 3.0;
    ForwardOptions opt;
    opt.act_quant = &act;

    Trace t = forward(net, {1.4, 9.9}, opt);
    CHECK(t.outputs[1][0] == doctest::Approx(1.0));  // 1.4 -> nearest of {0,1,2,3}
    CHECK(t.outputs[1][1] == doctest::Approx(3.0));  // clipped to the bound
    REQUIRE(t.prequant.count(1) == 1);
    CHECK(t.prequant.at(1)[0] == doctest::Approx(1.4));

    // gradient passes below the bound, is cut at and above it
    Gradients g = backward(net, t, {1.0, 1.0}, opt);
    CHECK(g.doutputs[0][0] != 0.0);
    CHECK(g.dweights[0][3] == 0.0);  // the saturated neuron's input weight

    // a zero upper bound silences the site entirely
    ActQuant dead;
    dead.bits = 2;
    dead.upper[1] = 0.0;
    ForwardOptions dopt;
    dopt.act_quant = &dead;
    Trace td = forward(net, {1.4, 9.9}, dopt);
    CHECK(td.outputs[1][0] == 0.0);
    CHECK(td.outputs[1][1] == 0.0);

    // backward without the matching trace data is refused
    Trace plain = forward(net, {1.4, 9.9});
    CHECK_THROWS_AS(backward(net, plain, {1.0, 1.0}, opt), std::invalid_argument);
}

TEST_CASE("accuracy evaluation counts argmax hits with lowest-index ties") {
    CHECK(argmax({0.1, 0.9, 0.9}) == 1);
    CHECK(argmax({2.0, 1.0}) == 0);

    Network net = build_network({2}, {dense(2, false)});
    net.weights[0] = {1.0, 0.0, 0.0, 1.0};
    std::vector<std::vector<double>> xs = {{1.0, 0.0}, {0.0, 1.0}, {1.0, 0.0}};
    CHECK(evaluate_accuracy(net, xs, {0, 1, 1}) == doctest::Approx(2.0 / 3.0));
    CHECK_THROWS_AS(evaluate_accuracy(net, {}, {}), std::invalid_argument);
}

TEST_CASE("forward and backward calls are counted") {
    Network net = build_network({2}, {dense(2)});
    RngStream rng(13, "counters");
    init_weights(net, rng);
    int64_t f0 = net.forward_calls.get();
    int64_t b0 = net.backward_calls.get();
    Trace t = forward(net, {0.1, 0.2});
    forward(net, {0.3, 0.4});
    backward(net, t, {1.0, 0.0});
    CHECK(net.forward_calls.get() == f0 + 2);
    CHECK(net.backward_calls.get() == b0 + 1);
}

TEST_CASE("readouts expose value and logit gradient") {
    auto tl = readout_true_logit({0.5, -2.0, 3.0}, 1);
    CHECK(tl.value == -2.0);
    CHECK(tl.dlogits == std::vector<double>{0.0, 1.0, 0.0});
    CHECK_THROWS_AS(readout_true_logit({0.5}, 3), std::invalid_argument);

    auto l1 = readout_logit_l1({0.5, -2.0, 0.0});
    CHECK(l1.value == doctest::Approx(2.5));
    CHECK(l1.dlogits == std::vector<double>{1.0, -1.0, 0.0});

    auto ce = cross_entropy({1.0, 1.0}, 0);
    CHECK(ce.value == doctest::Approx(std::log(2.0)));
    CHECK(ce.dlogits[0] == doctest::Approx(-0.5));
    CHECK(ce.dlogits[1] == doctest::Approx(0.5));
}
