#pragma once

#include <cstdint>
#include <functional>
#include <thread>
#include <vector>

namespace cq {

// Chunked parallel loop over [0, n). The callable receives one index at a
// time; results must land in per-index slots so the outcome is independent
// of the thread count.
inline void parallel_for(int64_t n, const std::function<void(int64_t)>& fn) {
    unsigned hw = std::thread::hardware_concurrency();
    if (hw <= 1 || n < 64) {
        for (int64_t i = 0; i < n; ++i) fn(i);
        return;
    }
    unsigned nthreads = hw;
    if (static_cast<int64_t>(nthreads) > n) nthreads = static_cast<unsigned>(n);
    std::vector<std::thread> workers;
    workers.reserve(nthreads);
    int64_t chunk = (n + nthreads - 1) / nthreads;
    for (unsigned t = 0; t < nthreads; ++t) {
        int64_t lo = t * chunk;
        int64_t hi = std::min(n, lo + chunk);
        if (lo >= hi) break;
        workers.emplace_back([lo, hi, &fn] {
            for (int64_t i = lo; i < hi; ++i) fn(i);
        });
    }
    for (auto& w : workers) w.join();
}

}  // namespace cq
