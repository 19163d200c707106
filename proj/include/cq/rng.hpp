#pragma once

#include <cstdint>
#include <random>
#include <string_view>

namespace cq {

inline uint64_t fnv1a64(const void* data, size_t len) {
    const auto* p = static_cast<const unsigned char*>(data);
    uint64_t h = 0xcbf29ce484222325ull;
    for (size_t i = 0; i < len; ++i) {
        h ^= p[i];
        h *= 0x100000001b3ull;
    }
    return h;
}

inline uint64_t fnv1a64(std::string_view s) { return fnv1a64(s.data(), s.size()); }

// All randomness in a run flows from one seed. Independent stages draw from
// named streams so that, e.g., changing the refine schedule cannot perturb
// the search stream.
class RngStream {
public:
    RngStream(uint64_t seed, std::string_view name)
        : engine_(mix(seed, fnv1a64(name))) {}

    std::mt19937_64& engine() { return engine_; }

    double uniform(double lo, double hi) {
        std::uniform_real_distribution<double> d(lo, hi);
        return d(engine_);
    }
    double normal(double mean, double stddev) {
        std::normal_distribution<double> d(mean, stddev);
        return d(engine_);
    }
    // uniform integer in [0, n)
    uint64_t index(uint64_t n) {
        std::uniform_int_distribution<uint64_t> d(0, n - 1);
        return d(engine_);
    }

    template <typename T>
    void shuffle(std::vector<T>& v) {
        std::shuffle(v.begin(), v.end(), engine_);
    }

private:
    static uint64_t mix(uint64_t seed, uint64_t stream) {
        // splitmix64 over the combined words
        uint64_t z = seed + 0x9e3779b97f4a7c15ull * (stream | 1);
        z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
        z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
        return z ^ (z >> 31);
    }

    std::mt19937_64 engine_;
};

}  // namespace cq
