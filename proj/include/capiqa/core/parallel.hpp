#pragma once

#include <algorithm>
#include <atomic>
#include <cstddef>
#include <cstdlib>
#include <exception>
#include <mutex>
#include <string>
#include <thread>
#include <vector>

namespace capiqa {

namespace detail {
inline std::atomic<std::size_t>& thread_override() {
    static std::atomic<std::size_t> value{0};
    return value;
}
}  // namespace detail

/// Worker thread cap: set_thread_count() if called, else CAPIQA_THREADS, else
/// hardware parallelism.
inline std::size_t thread_count() {
    if (auto v = detail::thread_override().load(); v > 0) return v;
    static const std::size_t from_env = [] {
        if (const char* env = std::getenv("CAPIQA_THREADS")) {
            try {
                const long n = std::stol(env);
                if (n > 0) return static_cast<std::size_t>(n);
            } catch (...) {
            }
        }
        return std::max<std::size_t>(1, std::thread::hardware_concurrency());
    }();
    return from_env;
}

/// 0 restores the environment default.
inline void set_thread_count(std::size_t n) { detail::thread_override().store(n); }

/// Runs fn(i) for i in [0, n). Work items must be independent; the result of
/// each item may not depend on which thread executes it.
template <class Fn>
void parallel_for(std::size_t n, Fn&& fn) {
    const std::size_t workers = std::min(thread_count(), n);
    if (workers <= 1) {
        for (std::size_t i = 0; i < n; ++i) fn(i);
        return;
    }
    std::atomic<std::size_t> next{0};
    std::exception_ptr first_error;
    std::mutex error_mutex;
    auto run = [&] {
        for (;;) {
            const std::size_t i = next.fetch_add(1);
            if (i >= n) return;
            try {
                fn(i);
            } catch (...) {
                std::lock_guard lock(error_mutex);
                if (!first_error) first_error = std::current_exception();
                next.store(n);
                return;
            }
        }
    };
    std::vector<std::thread> pool;
    pool.reserve(workers - 1);
    for (std::size_t t = 1; t < workers; ++t) pool.emplace_back(run);
    run();
    for (auto& th : pool) th.join();
    if (first_error) std::rethrow_exception(first_error);
}

/// Splits [0, total) into fixed-size chunks. Chunk boundaries depend only on
/// `chunk`, never on the thread count.
template <class Fn>
void parallel_chunks(std::size_t total, std::size_t chunk, Fn&& fn) {
    if (chunk == 0) chunk = total;
    const std::size_t n = (total + chunk - 1) / chunk;
    parallel_for(n, [&](std::size_t c) {
        const std::size_t begin = c * chunk;
        fn(begin, std::min(total, begin + chunk));
    });
}

}  // namespace capiqa
