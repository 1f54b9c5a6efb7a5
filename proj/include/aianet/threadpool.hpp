#pragma once

#include <algorithm>
#include <cstdlib>
#include <functional>
#include <string>
#include <thread>
#include <vector>

namespace aianet {

// Worker count: AIANET_THREADS caps it, hardware_concurrency is the default.
inline unsigned worker_count(unsigned requested = 0) {
    unsigned n = requested ? requested : std::max(1u, std::thread::hardware_concurrency());
    if (const char* env = std::getenv("AIANET_THREADS")) {
        const long cap = std::strtol(env, nullptr, 10);
        if (cap >= 1) n = std::min<unsigned>(n, static_cast<unsigned>(cap));
    }
    return std::max(1u, n);
}

// Static contiguous chunking: worker w handles [begin_w, end_w). Chunk layout
// depends only on (n, workers), so any per-worker accumulation reduced in
// worker order is reproducible for a fixed worker count. workers == 1 runs
// inline on the calling thread (sequential mode).
inline void parallel_chunks(std::size_t n, unsigned workers,
                            const std::function<void(unsigned, std::size_t, std::size_t)>& fn) {
    workers = std::max(1u, workers);
    if (workers == 1 || n <= 1) {
        fn(0, 0, n);
        return;
    }
    const std::size_t per = (n + workers - 1) / workers;
    std::vector<std::thread> threads;
    unsigned used = 0;
    for (unsigned w = 0; w < workers; ++w) {
        const std::size_t lo = std::min(n, w * per);
        const std::size_t hi = std::min(n, lo + per);
        if (lo >= hi) break;
        ++used;
        threads.emplace_back([=, &fn] { fn(w, lo, hi); });
    }
    for (auto& t : threads) t.join();
    (void)used;
}

}  // namespace aianet
