#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <filesystem>
#include <fstream>

#include "cq/fileio.hpp"
#include "cq/model_io.hpp"
#include "cq/rng.hpp"

using namespace cq;

namespace {

namespace fs = std::filesystem;

std::string tmp_path(const std::string& name) {
    return (fs::temp_directory_path() / name).string();
}

Network sample_net(uint64_t seed) {
    Network net = build_network(
        {1, 6, 6},
        {conv2d(3, 3, 2, 1), relu(), flatten(), dense(5, false), relu(), dense(4)});
    RngStream rng(seed, "io-init");
    init_weights(net, rng);
    // exercise awkward values that a sloppy format would mangle
    net.weights[0][0] = 0.1;
    net.weights[0][1] = -0.0;
    net.weights[0][2] = 1e-300;
    return net;
}

std::string slurp(const std::string& path) { return read_file(path); }

}  // namespace

TEST_CASE("models round-trip bit for bit, activation table included") {
    Network net = sample_net(81);
    std::string path = tmp_path("cq_model_io.bin");

    save_model(net, path);
    SavedModel plain = load_model(path);
    CHECK_FALSE(plain.has_act);
    CHECK(plain.net.input_shape == net.input_shape);
    CHECK(plain.net.num_classes == net.num_classes);
    CHECK(plain.net.weights == net.weights);
    CHECK(plain.net.biases == net.biases);
    REQUIRE(plain.net.layers.size() == net.layers.size());
    // a loaded model must be runnable as-is
    std::vector<double> x(net.input_size(), 0.3);
    CHECK(logits_of(plain.net, forward(plain.net, x)) ==
          logits_of(net, forward(net, x)));

    ActQuant act;
    act.bits = 4;
    act.upper = {{1, 2.75}, {4, 0.5}};
    save_model(net, path, &act);
    SavedModel with_act = load_model(path);
    CHECK(with_act.has_act);
    CHECK(with_act.act.bits == 4);
    CHECK(with_act.act.upper == act.upper);
    CHECK(with_act.net.weights == net.weights);

    fs::remove(path);
}

TEST_CASE("saving the same model twice produces identical bytes") {
    Network net = sample_net(82);
    std::string p1 = tmp_path("cq_model_a.bin");
    std::string p2 = tmp_path("cq_model_b.bin");
    save_model(net, p1);
    save_model(net, p2);
    CHECK(slurp(p1) == slurp(p2));
    CHECK(model_file_hash(p1) == model_file_hash(p2));

    // any weight change moves the hash
    uint64_t before = model_file_hash(p1);
    net.weights[3][2] += 1e-9;
    save_model(net, p1);
    CHECK(model_file_hash(p1) != before);

    fs::remove(p1);
    fs::remove(p2);
}

TEST_CASE("corrupt model files are rejected with the path in the message") {
    Network net = sample_net(83);
    std::string path = tmp_path("cq_model_bad.bin");
    save_model(net, path);
    std::string good = slurp(path);

    auto expect_throw = [&](const std::string& bytes) {
        atomic_write(path, bytes);
        try {
            load_model(path);
            CHECK(false);
        } catch (const std::runtime_error& e) {
            CHECK(std::string(e.what()).find(path) != std::string::npos);
        }
    };

    // wrong magic
    std::string bad = good;
    bad[0] = 'X';
    expect_throw(bad);

    // unsupported version
    bad = good;
    bad[8] = 9;
    expect_throw(bad);

    // truncations at several depths: header, layer table, weight data
    expect_throw(good.substr(0, 4));
    expect_throw(good.substr(0, 16));
    expect_throw(good.substr(0, good.size() / 2));
    expect_throw(good.substr(0, good.size() - 1));

    // trailing garbage
    expect_throw(good + "zz");

    fs::remove(path);
    CHECK_THROWS_AS(load_model(path), std::runtime_error);  // missing file
}

TEST_CASE("file hashing is sensitive to every byte") {
    std::string path = tmp_path("cq_hash_probe.bin");
    atomic_write(path, std::string("abcd"));
    uint64_t h1 = model_file_hash(path);
    atomic_write(path, std::string("abce"));
    CHECK(model_file_hash(path) != h1);
    atomic_write(path, std::string("abcd"));
    CHECK(model_file_hash(path) == h1);
    fs::remove(path);
}
