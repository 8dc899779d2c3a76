#pragma once

#include <atomic>
#include <cstdlib>
#include <exception>
#include <functional>
#include <mutex>
#include <thread>
#include <vector>

namespace uniclam {

/// Worker cap for internal parallelism. Reads UNICLAM_THREADS once; can be
/// overridden programmatically (tests use this to prove schedule
/// independence).
inline int& thread_cap_ref() {
    static int cap = [] {
        if (const char* env = std::getenv("UNICLAM_THREADS")) {
            int v = std::atoi(env);
            if (v >= 1) return v;
        }
        unsigned hw = std::thread::hardware_concurrency();
        return hw == 0 ? 1 : static_cast<int>(hw);
    }();
    return cap;
}

inline void set_thread_cap(int cap) { thread_cap_ref() = cap < 1 ? 1 : cap; }
inline int thread_cap() { return thread_cap_ref(); }

/// Run fn(i) for i in [0, n). Work items must be independent; any ordering
/// sensitivity belongs in the caller's (serial) reduction. The first
/// exception wins and is rethrown on the calling thread.
inline void parallel_for(int n, const std::function<void(int)>& fn) {
    int workers = std::min(thread_cap(), n);
    if (workers <= 1) {
        for (int i = 0; i < n; ++i) fn(i);
        return;
    }
    std::atomic<int> next{0};
    std::exception_ptr first_error = nullptr;
    std::mutex error_mutex;
    auto body = [&] {
        for (;;) {
            int i = next.fetch_add(1);
            if (i >= n) return;
            try {
                fn(i);
            } catch (...) {
                std::lock_guard<std::mutex> lock(error_mutex);
                if (!first_error) first_error = std::current_exception();
                return;
            }
        }
    };
    std::vector<std::thread> pool;
    for (int w = 1; w < workers; ++w) pool.emplace_back(body);
    body();
    for (auto& t : pool) t.join();
    if (first_error) std::rethrow_exception(first_error);
}

}  // namespace uniclam
