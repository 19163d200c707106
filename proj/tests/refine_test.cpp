#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>
#include <filesystem>
#include <fstream>

#include "cq/refine.hpp"

using namespace cq;

TEST_CASE("distillation loss matches hand-computed values") {
    // student logits (0, 0) -> probs (.5, .5); teacher (ln 9, 0) -> (.9, .1)
    std::vector<double> student = {0.0, 0.0};
    std::vector<double> teacher = {std::log(9.0), 0.0};
    double ce = -std::log(0.5);
    double kl = 0.5 * std::log(0.5 / 0.9) + 0.5 * std::log(0.5 / 0.1);

    KDLoss fwd = kd_loss(student, teacher, 0, 0.3);
    CHECK(fwd.ce == doctest::Approx(ce).epsilon(1e-12));
    CHECK(fwd.divergence == doctest::Approx(kl).epsilon(1e-12));
    CHECK(fwd.total == doctest::Approx(0.3 * ce + 0.7 * kl).epsilon(1e-12));
    CHECK(kl == doctest::Approx(0.5108256237659907).epsilon(1e-12));

    // the as-printed orientation flips the sign of the divergence term
    KDLoss neg = kd_loss(student, teacher, 0, 0.3, true);
    CHECK(neg.ce == doctest::Approx(ce).epsilon(1e-12));
    CHECK(neg.divergence == doctest::Approx(-kl).epsilon(1e-12));
    CHECK(neg.total == doctest::Approx(0.3 * ce - 0.7 * kl).epsilon(1e-12));
}

TEST_CASE("matching the teacher zeroes the divergence") {
    std::vector<double> logits = {1.2, -0.7, 0.3};
    KDLoss l = kd_loss(logits, logits, 2, 0.4);
    CHECK(l.divergence == 0.0);
    CHECK(l.total == doctest::Approx(0.4 * l.ce));
    // what remains is the scaled cross-entropy gradient
    auto probs = softmax(logits);
    for (int i = 0; i < 3; ++i)
        CHECK(l.dlogits[i] ==
              doctest::Approx(0.4 * (probs[i] - (i == 2 ? 1.0 : 0.0))).epsilon(1e-12));
}

TEST_CASE("the mixing weight interpolates between pure losses") {
    std::vector<double> student = {0.4, -1.0, 0.2};
    std::vector<double> teacher = {-0.3, 0.8, 0.1};
    KDLoss only_ce = kd_loss(student, teacher, 1, 1.0);
    CHECK(only_ce.total == doctest::Approx(only_ce.ce));
    KDLoss only_div = kd_loss(student, teacher, 1, 0.0);
    CHECK(only_div.total == doctest::Approx(only_div.divergence));
}

TEST_CASE("loss gradients agree with finite differences") {
    RngStream rng(61, "kd-fd");
    for (bool as_printed : {false, true}) {
        for (int trial = 0; trial < 20; ++trial) {
            int n = 2 + static_cast<int>(rng.index(4));
            std::vector<double> student(n), teacher(n);
            for (auto& v : student) v = rng.uniform(-2.0, 2.0);
            for (auto& v : teacher) v = rng.uniform(-2.0, 2.0);
            int label = static_cast<int>(rng.index(n));
            double alpha = rng.uniform(0.0, 1.0);

            KDLoss l = kd_loss(student, teacher, label, alpha, as_printed);
            const double h = 1e-6;
            for (int i = 0; i < n; ++i) {
                auto plus = student, minus = student;
                plus[i] += h;
                minus[i] -= h;
                double fd = (kd_loss(plus, teacher, label, alpha, as_printed).total -
                             kd_loss(minus, teacher, label, alpha, as_printed).total) /
                            (2 * h);
                CHECK(std::fabs(l.dlogits[i] - fd) <= 1e-5 * std::max(1.0, std::fabs(fd)));
            }
        }
    }
}

TEST_CASE("loss inputs are validated") {
    std::vector<double> two = {0.0, 0.0};
    std::vector<double> three = {0.0, 0.0, 0.0};
    CHECK_THROWS_AS(kd_loss(two, three, 0, 0.5), std::invalid_argument);
    CHECK_THROWS_AS(kd_loss({}, {}, 0, 0.5), std::invalid_argument);
    CHECK_THROWS_AS(kd_loss(two, two, 2, 0.5), std::invalid_argument);
    CHECK_THROWS_AS(kd_loss(two, two, -1, 0.5), std::invalid_argument);
    CHECK_THROWS_AS(kd_loss(two, two, 0, 1.5), std::invalid_argument);
    CHECK_THROWS_AS(kd_loss(two, two, 0, -0.1), std::invalid_argument);
}

namespace {

struct RefineRig {
    Network teacher;
    Network shadow;
    BitArrangement arr;
    ActQuant act;
    std::vector<std::vector<double>> train_x, val_x;
    std::vector<int> train_y, val_y;
};

RefineRig make_rig(uint64_t seed, std::vector<int> bits = {4, 3, 2, 1, 0}) {
    RefineRig rig;
    rig.teacher = build_network({4}, {dense(6), relu(), dense(5), relu(), dense(3)});
    RngStream ir(seed, "refine-init");
    init_weights(rig.teacher, ir);
    rig.shadow = rig.teacher;
    // nudge the shadow so student and teacher logits differ
    for (auto& w : rig.shadow.weights)
        for (auto& v : w) v += ir.uniform(-0.05, 0.05);

    rig.arr.max_bits = 4;
    rig.arr.act_bits = 4;
    for (int u = 0; u < 5; ++u) rig.arr.units.push_back({2, u, bits[u]});

    RngStream dr(seed, "refine-data");
    for (int i = 0; i < 36; ++i) {
        std::vector<double> x(4);
        for (auto& v : x) v = dr.uniform(0.0, 1.0);
        if (i < 24) {
            rig.train_x.push_back(x);
            rig.train_y.push_back(static_cast<int>(dr.index(3)));
        } else {
            rig.val_x.push_back(x);
            rig.val_y.push_back(static_cast<int>(dr.index(3)));
        }
    }
    rig.act = calibrate_activations(rig.teacher, rig.train_x, 4);
    return rig;
}

KDConfig quick_cfg(int epochs) {
    KDConfig cfg;
    cfg.epochs = epochs;
    cfg.batch_size = 8;
    cfg.lr = 0.05;
    return cfg;
}

}  // namespace

TEST_CASE("zero epochs leave the shadow untouched and just quantize") {
    RefineRig rig = make_rig(101);
    RngStream rng(102, "refine");
    RefineResult res = refine(rig.shadow, rig.teacher, rig.arr, rig.act, rig.train_x,
                              rig.train_y, rig.val_x, rig.val_y, quick_cfg(0), rng);
    CHECK(res.log.empty());
    CHECK(res.shadow.weights == rig.shadow.weights);
    CHECK(res.shadow.biases == rig.shadow.biases);

    QuantizedView direct = apply_arrangement(rig.shadow, rig.arr);
    CHECK(res.deployed.net.weights == direct.net.weights);
    CHECK(res.final_val_accuracy >= 0.0);
}

TEST_CASE("pruned units stay silent and unmoved through training") {
    RefineRig rig = make_rig(111);
    Network before = rig.shadow;
    RngStream rng(112, "refine");
    RefineResult res = refine(rig.shadow, rig.teacher, rig.arr, rig.act, rig.train_x,
                              rig.train_y, rig.val_x, rig.val_y, quick_cfg(3), rng);
    CHECK(res.log.size() == 3);

    // unit 4 of layer 2 is at zero bits: deployed weights exactly zero
    int64_t begin = 0, count = 0;
    rig.shadow.unit_weight_span(2, 4, &begin, &count);
    REQUIRE(count == 6);
    for (int64_t j = begin; j < begin + count; ++j) {
        CHECK(res.deployed.net.weights.at(2)[j] == 0.0);
        // and the shadow copy never received any update, decay included
        CHECK(res.shadow.weights.at(2)[j] == before.weights.at(2)[j]);
    }
    CHECK(res.deployed.net.biases.at(2)[4] == 0.0);
    CHECK(res.shadow.biases.at(2)[4] == before.biases.at(2)[4]);

    // its live neighbor did train
    rig.shadow.unit_weight_span(2, 0, &begin, &count);
    bool moved = false;
    for (int64_t j = begin; j < begin + count; ++j)
        if (res.shadow.weights.at(2)[j] != before.weights.at(2)[j]) moved = true;
    CHECK(moved);
}

TEST_CASE("the teacher is never modified") {
    RefineRig rig = make_rig(121);
    Network teacher_copy = rig.teacher;
    RngStream rng(122, "refine");
    refine(rig.shadow, rig.teacher, rig.arr, rig.act, rig.train_x, rig.train_y, rig.val_x,
           rig.val_y, quick_cfg(2), rng);
    CHECK(rig.teacher.weights == teacher_copy.weights);
    CHECK(rig.teacher.biases == teacher_copy.biases);
}

TEST_CASE("deployed weights sit on the quantization grid of the final shadow") {
    RefineRig rig = make_rig(131, {2, 2, 2, 2, 2});
    RngStream rng(132, "refine");
    RefineResult res = refine(rig.shadow, rig.teacher, rig.arr, rig.act, rig.train_x,
                              rig.train_y, rig.val_x, rig.val_y, quick_cfg(2), rng);
    const QuantRange& r = res.deployed.ranges.at(2);
    for (double w : res.deployed.net.weights.at(2)) {
        CHECK(quantize_value(w, r, 2) == w);  // idempotent: already on grid
        CHECK(w >= r.a);
        CHECK(w <= r.b);
    }
    // by default the range tracks the trained shadow weights
    double m = 0.0;
    for (double w : res.shadow.weights.at(2)) m = std::max(m, std::fabs(w));
    CHECK(r.b == doctest::Approx(m));
}

TEST_CASE("frozen ranges hold the initial clip window") {
    RefineRig rig = make_rig(141, {2, 2, 2, 2, 2});
    QuantRange initial = apply_arrangement(rig.shadow, rig.arr).ranges.at(2);

    KDConfig cfg = quick_cfg(3);
    cfg.freeze_weight_ranges = true;
    cfg.lr = 0.2;  // move far enough that a recomputed range would differ
    RngStream rng(142, "refine");
    RefineResult res = refine(rig.shadow, rig.teacher, rig.arr, rig.act, rig.train_x,
                              rig.train_y, rig.val_x, rig.val_y, cfg, rng);
    CHECK(res.deployed.ranges.at(2).a == initial.a);
    CHECK(res.deployed.ranges.at(2).b == initial.b);
    for (double w : res.deployed.net.weights.at(2)) {
        CHECK(w >= initial.a);
        CHECK(w <= initial.b);
    }
}

TEST_CASE("refinement is deterministic under a fixed stream") {
    RefineRig rig = make_rig(151);
    RngStream r1(152, "refine");
    RefineResult a = refine(rig.shadow, rig.teacher, rig.arr, rig.act, rig.train_x,
                            rig.train_y, rig.val_x, rig.val_y, quick_cfg(2), r1);
    RngStream r2(152, "refine");
    RefineResult b = refine(rig.shadow, rig.teacher, rig.arr, rig.act, rig.train_x,
                            rig.train_y, rig.val_x, rig.val_y, quick_cfg(2), r2);
    CHECK(a.shadow.weights == b.shadow.weights);
    REQUIRE(a.log.size() == b.log.size());
    for (size_t i = 0; i < a.log.size(); ++i) {
        CHECK(a.log[i].loss == b.log[i].loss);
        CHECK(a.log[i].val_accuracy == b.log[i].val_accuracy);
    }
    CHECK(a.final_val_accuracy == b.final_val_accuracy);
}

TEST_CASE("bad refine inputs are rejected") {
    RefineRig rig = make_rig(161);
    RngStream rng(162, "refine");
    KDConfig cfg = quick_cfg(1);

    CHECK_THROWS_AS(refine(rig.shadow, rig.teacher, rig.arr, rig.act, {}, {}, rig.val_x,
                           rig.val_y, cfg, rng),
                    std::invalid_argument);

    Network other = build_network({3}, {dense(4), relu(), dense(3)});
    CHECK_THROWS_AS(refine(rig.shadow, other, rig.arr, rig.act, rig.train_x, rig.train_y,
                           rig.val_x, rig.val_y, cfg, rng),
                    std::invalid_argument);

    KDConfig bad = cfg;
    bad.batch_size = 0;
    CHECK_THROWS_AS(refine(rig.shadow, rig.teacher, rig.arr, rig.act, rig.train_x,
                           rig.train_y, rig.val_x, rig.val_y, bad, rng),
                    std::invalid_argument);
}

TEST_CASE("refine logs are written one epoch per row") {
    std::vector<RefineEpoch> log = {{0, 0.5, 0.25, 0.125, 0.75}, {1, 0.25, 0.125, 0.0625, 1.0}};
    std::string path = (std::filesystem::temp_directory_path() / "cq_refine_log.csv").string();
    save_refine_log(log, path);
    std::ifstream in(path);
    std::string line;
    std::getline(in, line);
    CHECK(line == "epoch,loss,ce,divergence,val_accuracy");
    std::getline(in, line);
    CHECK(line == "0,0.5,0.25,0.125,0.75");
    std::getline(in, line);
    CHECK(line == "1,0.25,0.125,0.0625,1");
    std::filesystem::remove(path);
}
