#pragma once

#include <atomic>
#include <exception>
#include <functional>
#include <thread>
#include <vector>

namespace gradelab {

// Runs fn(i) for i in [0, count) on at most `limit` threads. Results land by
// index so output order never depends on scheduling. fn must either return
// normally or throw; the first exception is rethrown after all workers join.
template <typename Result>
std::vector<Result> parallel_map(std::size_t count, int limit,
                                 const std::function<Result(std::size_t)>& fn) {
    std::vector<Result> results(count);
    if (count == 0) return results;
    const std::size_t workers =
        std::min<std::size_t>(count, static_cast<std::size_t>(limit < 1 ? 1 : limit));
    if (workers == 1) {
        for (std::size_t i = 0; i < count; ++i) results[i] = fn(i);
        return results;
    }

    std::atomic<std::size_t> next{0};
    std::exception_ptr first_error;
    std::mutex error_mutex;
    std::vector<std::thread> pool;
    pool.reserve(workers);
    for (std::size_t w = 0; w < workers; ++w) {
        pool.emplace_back([&] {
            for (;;) {
                const std::size_t i = next.fetch_add(1);
                if (i >= count) return;
                try {
                    results[i] = fn(i);
                } catch (...) {
                    std::lock_guard lock(error_mutex);
                    if (!first_error) first_error = std::current_exception();
                }
            }
        });
    }
    for (auto& t : pool) t.join();
    if (first_error) std::rethrow_exception(first_error);
    return results;
}

}  // namespace gradelab
