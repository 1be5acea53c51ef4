#pragma once

#include <cstdint>
#include <cstdlib>
#include <thread>
#include <vector>

namespace s4rec {

// Worker cap from S4REC_THREADS. Default 1: fully serial, maximally
// reproducible. Parallelism is only applied to row-independent loops, so
// results are identical at any thread count.
inline int max_threads() {
    static const int cached = [] {
        const char* env = std::getenv("S4REC_THREADS");
        if (env == nullptr) return 1;
        const int v = std::atoi(env);
        if (v < 1) return 1;
        const int hw = static_cast<int>(std::thread::hardware_concurrency());
        return hw > 0 && v > hw ? hw : v;
    }();
    return cached;
}

// Splits [0, n) into contiguous chunks, one per worker. fn(begin, end) must
// write only to rows it owns.
template <typename F>
inline void parallel_for(int64_t n, F&& fn) {
    const int threads = max_threads();
    if (n <= 0) return;
    if (threads <= 1 || n < 2 * threads) {
        fn(int64_t{0}, n);
        return;
    }
    std::vector<std::thread> pool;
    pool.reserve(static_cast<size_t>(threads));
    const int64_t chunk = (n + threads - 1) / threads;
    for (int t = 0; t < threads; ++t) {
        const int64_t begin = t * chunk;
        const int64_t end = begin + chunk < n ? begin + chunk : n;
        if (begin >= end) break;
        pool.emplace_back([&fn, begin, end] { fn(begin, end); });
    }
    for (auto& th : pool) th.join();
}

}  // namespace s4rec
