#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>
#include <filesystem>

#include "cq/fileio.hpp"
#include "cq/importance.hpp"
#include "cq/network.hpp"
#include "cq/rng.hpp"

using namespace cq;

TEST_CASE("class activity counts strictly above the threshold") {
    // one column per neuron; the first neuron's score sits below epsilon
    // in one sample and exactly at it in another
    std::vector<std::vector<double>> per_sample = {
        {1e-60, 0.2},
        {1e-50, 0.0},
        {0.3, 0.4},
        {2.0, 1e-51},
    };
    auto beta = class_scores(per_sample, 1e-50);
    CHECK(beta[0] == doctest::Approx(0.5));   // 0.3 and 2.0 only; 1e-50 is not > 1e-50
    CHECK(beta[1] == doctest::Approx(0.5));
    CHECK_THROWS_AS(class_scores({}, 1e-50), std::invalid_argument);
    CHECK_THROWS_AS(class_scores({{1.0}, {1.0, 2.0}}, 1e-50), std::invalid_argument);
}

TEST_CASE("aggregation sums class columns and stays within [0, classes]") {
    std::vector<std::vector<double>> beta = {
        {0.25, 1.0, 0.0},
        {0.75, 1.0, 0.0},
        {0.5, 0.25, 0.0},
    };
    auto gamma = aggregate_scores(beta);
    CHECK(gamma == std::vector<double>{1.5, 2.25, 0.0});
    for (double g : gamma) {
        CHECK(g >= 0.0);
        CHECK(g <= 3.0);
    }
    CHECK_THROWS_AS(aggregate_scores({}), std::invalid_argument);
    CHECK_THROWS_AS(aggregate_scores({{1.0}, {1.0, 2.0}}), std::invalid_argument);
}

TEST_CASE("unit scores take the max over each neuron block") {
    std::vector<double> gamma = {0.1, 0.9, 0.5,   // unit 0
                                 0.2, 0.2, 0.0};  // unit 1
    auto phi = filter_scores(gamma, 2, 3);
    CHECK(phi == std::vector<double>{0.9, 0.2});
    CHECK_THROWS_AS(filter_scores(gamma, 2, 2), std::invalid_argument);
    CHECK_THROWS_AS(filter_scores(gamma, 0, 3), std::invalid_argument);
}

TEST_CASE("pipeline of beta/gamma/phi agrees with a brute-force recount") {
    RngStream rng(21, "imp-brute");
    for (int trial = 0; trial < 50; ++trial) {
        int classes = 2 + static_cast<int>(rng.index(4));
        int units = 1 + static_cast<int>(rng.index(5));
        int npu = 1 + static_cast<int>(rng.index(4));
        int n = units * npu;
        int samples = 1 + static_cast<int>(rng.index(6));
        double eps = rng.uniform(0.0, 0.5);

        // raw scores [class][sample][neuron]
        std::vector<std::vector<std::vector<double>>> raw(classes);
        for (auto& cls : raw) {
            cls.resize(samples);
            for (auto& row : cls) {
                row.resize(n);
                for (auto& v : row) v = rng.uniform(0.0, 1.0);
            }
        }

        std::vector<std::vector<double>> beta;
        for (int m = 0; m < classes; ++m) beta.push_back(class_scores(raw[m], eps));
        auto gamma = aggregate_scores(beta);
        auto phi = filter_scores(gamma, units, npu);

        // independent recount, straight from the definitions
        for (int j = 0; j < n; ++j) {
            double g = 0.0;
            for (int m = 0; m < classes; ++m) {
                int hits = 0;
                for (int s = 0; s < samples; ++s)
                    if (raw[m][s][j] > eps) ++hits;
                double b = static_cast<double>(hits) / samples;
                CHECK(beta[m][j] == b);
                g += b;
            }
            CHECK(gamma[j] == g);
        }
        for (int u = 0; u < units; ++u) {
            double best = 0.0;
            for (int j = u * npu; j < (u + 1) * npu; ++j) best = std::max(best, gamma[j]);
            CHECK(phi[u] == best);
        }
    }
}

TEST_CASE("first-order scores equal exact ablation on a linear network") {
    Network net = build_network({5}, {dense(4), dense(3), dense(2)});
    RngStream rng(22, "imp-linear");
    init_weights(net, rng);
    for (auto& b : net.biases[0]) b = rng.uniform(-0.2, 0.2);
    for (auto& b : net.biases[1]) b = rng.uniform(-0.2, 0.2);
    // keep the logits far from zero so the L1 readout stays on one linear
    // piece; the absolute values then behave linearly under ablation too
    for (auto& b : net.biases[2]) b = 100.0;

    std::vector<double> x(5);
    for (auto& v : x) v = rng.uniform(-1.0, 1.0);

    for (Readout ro : {Readout::TrueClassLogit, Readout::LogitL1}) {
        SampleScores ss = taylor_scores(net, x, ro, 1);
        for (int site : net.score_sites()) {
            const auto& s = ss.site_scores.at(site);
            for (size_t j = 0; j < s.size(); ++j) {
                double exact = ablation_score_exact(net, x, site, j, ro, 1);
                CHECK(std::fabs(s[j] - exact) <= 1e-9 * std::max(1.0, std::fabs(exact)));
            }
        }
    }
}

TEST_CASE("ablation runs two forwards and no backward; first-order runs one of each") {
    Network net = build_network({4}, {dense(3), relu(), dense(2)});
    RngStream rng(23, "imp-calls");
    init_weights(net, rng);
    std::vector<double> x = {0.1, -0.2, 0.5, 0.9};

    int64_t f0 = net.forward_calls.get(), b0 = net.backward_calls.get();
    ablation_score_exact(net, x, 1, 0, Readout::TrueClassLogit, 0);
    CHECK(net.forward_calls.get() == f0 + 2);
    CHECK(net.backward_calls.get() == b0);

    f0 = net.forward_calls.get();
    taylor_scores(net, x, Readout::TrueClassLogit, 0);
    CHECK(net.forward_calls.get() == f0 + 1);
    CHECK(net.backward_calls.get() == b0 + 1);
}

namespace {

Network scoring_net(uint64_t seed) {
    Network net = build_network({6}, {dense(8), relu(), dense(6), relu(), dense(4)});
    RngStream rng(seed, "imp-net");
    init_weights(net, rng);
    return net;
}

void make_pool(int per_class, int classes, int dim, uint64_t seed,
               std::vector<std::vector<double>>& xs, std::vector<int>& ys) {
    RngStream rng(seed, "imp-pool");
    for (int m = 0; m < classes; ++m)
        for (int i = 0; i < per_class; ++i) {
            std::vector<double> x(dim);
            for (auto& v : x) v = rng.uniform(-1.0, 1.0);
            xs.push_back(std::move(x));
            ys.push_back(m);
        }
}

}  // namespace

TEST_CASE("network scoring fills every quantizable unit deterministically") {
    Network net = scoring_net(31);
    std::vector<std::vector<double>> xs;
    std::vector<int> ys;
    make_pool(6, 4, 6, 32, xs, ys);

    ScoreConfig cfg;
    cfg.samples_per_class = 4;

    RngStream r1(33, "score");
    ImportanceTable t1 = score_network(net, xs, ys, cfg, r1);
    RngStream r2(33, "score");
    ImportanceTable t2 = score_network(net, xs, ys, cfg, r2);

    REQUIRE(t1.layers.size() == 1);
    const auto& ls = t1.layers[0];
    CHECK(ls.layer == 2);
    CHECK(ls.site == 3);
    CHECK(ls.units == 6);
    CHECK(ls.neurons_per_unit == 1);
    CHECK(static_cast<int>(ls.beta.size()) == 4);
    for (const auto& col : ls.beta)
        for (double b : col) {
            CHECK(b >= 0.0);
            CHECK(b <= 1.0);
        }
    for (double g : ls.gamma) {
        CHECK(g >= 0.0);
        CHECK(g <= 4.0);
    }
    CHECK(t1.unit_phi() == t2.unit_phi());
    CHECK(t1.layers[0].beta == t2.layers[0].beta);

    // phi per unit equals the max of its gamma block (dense: identical)
    CHECK(ls.phi == ls.gamma);
}

TEST_CASE("scoring requires every class to appear in the pool") {
    Network net = scoring_net(41);
    std::vector<std::vector<double>> xs;
    std::vector<int> ys;
    make_pool(5, 3, 6, 42, xs, ys);  // classes 0..2 only, net has 4

    ScoreConfig cfg;
    cfg.samples_per_class = 3;
    RngStream rng(43, "score");
    CHECK_THROWS_AS(score_network(net, xs, ys, cfg, rng), std::invalid_argument);
}

TEST_CASE("score files round-trip per-unit records with metadata") {
    Network net = scoring_net(51);
    std::vector<std::vector<double>> xs;
    std::vector<int> ys;
    make_pool(5, 4, 6, 52, xs, ys);

    ScoreConfig cfg;
    cfg.samples_per_class = 5;
    RngStream rng(53, "score");
    ImportanceTable table = score_network(net, xs, ys, cfg, rng);
    table.model_hash = 0xdeadbeef12345678ull;

    std::string path = (std::filesystem::temp_directory_path() / "cq_scores_test.txt").string();
    save_scores(table, path);
    ScoreFile sf = load_scores(path);

    CHECK(sf.epsilon == table.epsilon);
    CHECK(sf.samples_per_class == 5);
    CHECK(sf.num_classes == 4);
    CHECK(sf.readout == "true-logit");
    CHECK(sf.model_hash == table.model_hash);
    REQUIRE(sf.units.size() == 6);
    auto phi = table.unit_phi();
    for (size_t i = 0; i < sf.units.size(); ++i) {
        CHECK(sf.units[i].layer == 2);
        CHECK(sf.units[i].unit == static_cast<int>(i));
        CHECK(sf.units[i].phi == phi[i]);
        REQUIRE(sf.units[i].beta.size() == 4);
        // dense layer: the unit's sole neuron carries its class vector
        double sum = 0.0;
        for (int m = 0; m < 4; ++m) {
            CHECK(sf.units[i].beta[m] == table.layers[0].beta[m][i]);
            sum += sf.units[i].beta[m];
        }
        CHECK(sum == doctest::Approx(phi[i]));
    }
    std::filesystem::remove(path);
}

TEST_CASE("score file loading rejects malformed content") {
    namespace fs = std::filesystem;
    std::string path = (fs::temp_directory_path() / "cq_scores_bad.txt").string();
    atomic_write(path, "wrong header\n");
    CHECK_THROWS_AS(load_scores(path), std::runtime_error);
    atomic_write(path,
                 "classquant scores v1\nepsilon 1e-50\nsamples_per_class 4\nclasses 2\n"
                 "readout true-logit\nmodel_hash 00000000000000ff\nunits 1\n"
                 "2 0 0.5 0.25\n");  // short class vector
    CHECK_THROWS_AS(load_scores(path), std::runtime_error);
    fs::remove(path);
}

TEST_CASE("readout names map both ways") {
    CHECK(readout_from_name("true-logit") == Readout::TrueClassLogit);
    CHECK(readout_from_name("logit-l1") == Readout::LogitL1);
    CHECK(readout_name(Readout::LogitL1) == "logit-l1");
    CHECK_THROWS_AS(readout_from_name("nope"), std::invalid_argument);
}
