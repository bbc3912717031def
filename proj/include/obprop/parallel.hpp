#pragma once

// Deterministic parallel-for: the index space is split into fixed chunks
// that do not depend on scheduling, each worker writes only to its own
// indices, and callers merge results in index order. Outputs are therefore
// bit-identical for any worker count.

#include <algorithm>
#include <atomic>
#include <cstddef>
#include <exception>
#include <functional>
#include <mutex>
#include <thread>
#include <vector>

namespace obprop {

inline void parallel_for(std::size_t n, int n_threads,
                         const std::function<void(std::size_t)>& fn) {
    if (n == 0) return;
    const int workers = std::max(1, n_threads);
    if (workers == 1 || n == 1) {
        for (std::size_t i = 0; i < n; ++i) fn(i);
        return;
    }
    std::vector<std::thread> pool;
    std::exception_ptr first_error = nullptr;
    std::atomic<bool> failed{false};
    std::mutex err_mu;
    const std::size_t T = std::min<std::size_t>(workers, n);
    for (std::size_t t = 0; t < T; ++t) {
        pool.emplace_back([&, t]() {
            try {
                for (std::size_t i = t; i < n; i += T) fn(i);
            } catch (...) {
                std::lock_guard<std::mutex> lk(err_mu);
                if (!failed.exchange(true)) first_error = std::current_exception();
            }
        });
    }
    for (auto& th : pool) th.join();
    if (first_error) std::rethrow_exception(first_error);
}

}  // namespace obprop
