#include "xseg/parallel.hpp"

#include <algorithm>
#include <atomic>
#include <cstdlib>
#include <string>
#include <thread>
#include <vector>

namespace xseg {

namespace {

std::size_t read_env_threads() {
    const char* raw = std::getenv("XSEG_THREADS");
    if (raw == nullptr) return 1;
    try {
        const long v = std::stol(raw);
        return v < 1 ? 1 : static_cast<std::size_t>(v);
    } catch (...) {
        return 1;
    }
}

std::atomic<std::size_t>& thread_setting() {
    static std::atomic<std::size_t> value{read_env_threads()};
    return value;
}

}  // namespace

std::size_t worker_threads() { return thread_setting().load(); }

void set_worker_threads(std::size_t n) { thread_setting().store(std::max<std::size_t>(n, 1)); }

void parallel_for(std::size_t count, const std::function<void(std::size_t)>& fn) {
    const std::size_t workers = std::min(worker_threads(), count);
    if (workers <= 1) {
        for (std::size_t i = 0; i < count; ++i) fn(i);
        return;
    }
    std::atomic<std::size_t> next{0};
    std::vector<std::thread> pool;
    pool.reserve(workers);
    for (std::size_t t = 0; t < workers; ++t) {
        pool.emplace_back([&] {
            for (std::size_t i = next++; i < count; i = next++) fn(i);
        });
    }
    for (auto& th : pool) th.join();
}

}  // namespace xseg
