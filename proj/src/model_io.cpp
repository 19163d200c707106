#include "cq/model_io.hpp"

#include <bit>
#include <cstring>
#include <stdexcept>

#include "cq/fileio.hpp"
#include "cq/rng.hpp"

namespace cq {
namespace {

constexpr char kMagic[8] = {'C', 'Q', 'N', 'E', 'T', 'M', 'D', 'L'};
constexpr uint32_t kVersion = 1;

void put_u32(std::string& out, uint32_t v) {
    out.push_back(static_cast<char>(v & 0xff));
    out.push_back(static_cast<char>((v >> 8) & 0xff));
    out.push_back(static_cast<char>((v >> 16) & 0xff));
    out.push_back(static_cast<char>((v >> 24) & 0xff));
}

void put_u64(std::string& out, uint64_t v) {
    put_u32(out, static_cast<uint32_t>(v & 0xffffffffu));
    put_u32(out, static_cast<uint32_t>(v >> 32));
}

void put_f64(std::string& out, double v) {
    put_u64(out, std::bit_cast<uint64_t>(v));
}

struct Cursor {
    const std::string& buf;
    size_t pos = 0;
    const std::string& path;

    void need(size_t n) const {
        if (pos + n > buf.size())
            throw std::runtime_error(path + ": truncated model file");
    }
    uint32_t u32() {
        need(4);
        uint32_t v = 0;
        for (int i = 0; i < 4; ++i)
            v |= static_cast<uint32_t>(static_cast<unsigned char>(buf[pos + i])) << (8 * i);
        pos += 4;
        return v;
    }
    uint64_t u64() {
        uint64_t lo = u32();
        uint64_t hi = u32();
        return lo | (hi << 32);
    }
    double f64() { return std::bit_cast<double>(u64()); }
    int i32() {
        uint32_t v = u32();
        if (v > 0x7fffffffu)
            throw std::runtime_error(path + ": field out of range");
        return static_cast<int>(v);
    }
};

}  // namespace

void save_model(const Network& net, const std::string& path, const ActQuant* act) {
    std::string out;
    out.append(kMagic, sizeof(kMagic));
    put_u32(out, kVersion);

    put_u32(out, static_cast<uint32_t>(net.input_shape.size()));
    for (int d : net.input_shape) put_u32(out, static_cast<uint32_t>(d));

    put_u32(out, static_cast<uint32_t>(net.layers.size()));
    for (const LayerSpec& l : net.layers) {
        put_u32(out, static_cast<uint32_t>(l.kind));
        switch (l.kind) {
            case LayerKind::Dense:
                put_u32(out, static_cast<uint32_t>(l.out_features));
                put_u32(out, l.has_bias ? 1 : 0);
                break;
            case LayerKind::Conv2d:
                put_u32(out, static_cast<uint32_t>(l.out_channels));
                put_u32(out, static_cast<uint32_t>(l.kernel));
                put_u32(out, static_cast<uint32_t>(l.stride));
                put_u32(out, static_cast<uint32_t>(l.padding));
                put_u32(out, l.has_bias ? 1 : 0);
                break;
            case LayerKind::Relu:
            case LayerKind::Flatten:
                break;
        }
    }

    for (size_t li = 0; li < net.layers.size(); ++li) {
        if (!net.layers[li].parameterized()) continue;
        const auto& w = net.weights.at(static_cast<int>(li));
        const auto& b = net.biases.at(static_cast<int>(li));
        put_u64(out, w.size());
        for (double v : w) put_f64(out, v);
        put_u64(out, b.size());
        for (double v : b) put_f64(out, v);
    }

    if (act != nullptr) {
        put_u32(out, 1);
        put_u32(out, static_cast<uint32_t>(act->bits));
        put_u32(out, static_cast<uint32_t>(act->upper.size()));
        for (const auto& [layer, hi] : act->upper) {
            put_u32(out, static_cast<uint32_t>(layer));
            put_f64(out, hi);
        }
    } else {
        put_u32(out, 0);
    }

    atomic_write(path, out);
}

SavedModel load_model(const std::string& path) {
    std::string buf = read_file(path);
    if (buf.size() < sizeof(kMagic) || std::memcmp(buf.data(), kMagic, sizeof(kMagic)) != 0)
        throw std::runtime_error(path + ": not a model file");
    Cursor c{buf, sizeof(kMagic), path};
    uint32_t version = c.u32();
    if (version != kVersion)
        throw std::runtime_error(path + ": unsupported model version " + std::to_string(version));

    std::vector<int> input_shape(c.i32());
    if (input_shape.empty() || input_shape.size() > 3)
        throw std::runtime_error(path + ": bad input shape rank");
    for (int& d : input_shape) d = c.i32();

    int layer_count = c.i32();
    std::vector<LayerSpec> protos;
    protos.reserve(layer_count);
    for (int i = 0; i < layer_count; ++i) {
        uint32_t kind = c.u32();
        switch (static_cast<LayerKind>(kind)) {
            case LayerKind::Dense: {
                int out_features = c.i32();
                bool has_bias = c.u32() != 0;
                protos.push_back(dense(out_features, has_bias));
                break;
            }
            case LayerKind::Conv2d: {
                int oc = c.i32();
                int k = c.i32();
                int s = c.i32();
                int p = c.i32();
                bool has_bias = c.u32() != 0;
                protos.push_back(conv2d(oc, k, s, p, has_bias));
                break;
            }
            case LayerKind::Relu:
                protos.push_back(relu());
                break;
            case LayerKind::Flatten:
                protos.push_back(flatten());
                break;
            default:
                throw std::runtime_error(path + ": unknown layer kind " + std::to_string(kind));
        }
    }

    SavedModel m;
    m.net = build_network(input_shape, protos);

    for (size_t li = 0; li < m.net.layers.size(); ++li) {
        if (!m.net.layers[li].parameterized()) continue;
        auto& w = m.net.weights.at(static_cast<int>(li));
        auto& b = m.net.biases.at(static_cast<int>(li));
        uint64_t wn = c.u64();
        if (wn != w.size())
            throw std::runtime_error(path + ": weight count mismatch at layer " + std::to_string(li));
        for (auto& v : w) v = c.f64();
        uint64_t bn = c.u64();
        if (bn != b.size())
            throw std::runtime_error(path + ": bias count mismatch at layer " + std::to_string(li));
        for (auto& v : b) v = c.f64();
    }

    uint32_t has_act = c.u32();
    if (has_act == 1) {
        m.has_act = true;
        m.act.bits = c.i32();
        int n = c.i32();
        for (int i = 0; i < n; ++i) {
            int layer = c.i32();
            double hi = c.f64();
            m.act.upper[layer] = hi;
        }
    } else if (has_act != 0) {
        throw std::runtime_error(path + ": corrupt activation section");
    }
    if (c.pos != buf.size())
        throw std::runtime_error(path + ": trailing bytes after model data");
    return m;
}

uint64_t model_file_hash(const std::string& path) {
    std::string buf = read_file(path);
    return fnv1a64(buf.data(), buf.size());
}

}  // namespace cq
