#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <mutex>
#include <random>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

namespace boosts {

// Error taxonomy mirrored by the CLI exit codes:
// validation -> 2, numerical -> 3, io -> 4.
struct ValidationError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct NumericalError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct IoError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

/// Seedable generator with fixed bit-to-double mappings so that runs are
/// reproducible and ports can replay the exact stream. The engine is
/// std::mt19937_64 (output sequence pinned by the standard); uniform doubles
/// take the top 53 bits, normals come from Box-Muller on those uniforms.
class Rng {
public:
    explicit Rng(std::uint64_t seed) : engine_(seed) {}

    std::uint64_t next_u64() { return engine_(); }

    /// Uniform in [0, 1): (bits >> 11) * 2^-53.
    double uniform() {
        return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
    }

    /// Uniform in [lo, hi).
    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    /// Uniform in (0, 1]; safe as a log() argument.
    double uniform_open() {
        return static_cast<double>((next_u64() >> 11) + 1) * 0x1.0p-53;
    }

    /// Standard normal via Box-Muller. Draws two uniforms per call; no spare
    /// is cached so the consumed stream length is easy to reason about.
    double normal() {
        const double u1 = uniform_open();
        const double u2 = uniform();
        return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586476925286766559 * u2);
    }

    /// Unbiased integer in [0, bound) by rejection.
    std::uint64_t below(std::uint64_t bound) {
        if (bound == 0) throw ValidationError("Rng::below: bound must be positive");
        const std::uint64_t limit = UINT64_MAX - UINT64_MAX % bound;
        std::uint64_t x;
        do {
            x = next_u64();
        } while (x >= limit);
        return x % bound;
    }

    /// Fisher-Yates, high index down.
    template <typename T>
    void shuffle(std::vector<T>& v) {
        for (std::size_t i = v.size(); i > 1; --i) {
            std::swap(v[i - 1], v[below(i)]);
        }
    }

private:
    std::mt19937_64 engine_;
};

/// Runs fn(0..n_tasks-1), splitting tasks across up to `workers` threads.
/// Each task must be independent and write only to its own slot; callers do
/// any cross-task reduction afterwards in fixed task order, which keeps
/// single- and multi-worker results numerically identical.
inline void parallel_for(std::size_t n_tasks, unsigned workers,
                         const std::function<void(std::size_t)>& fn) {
    if (workers <= 1 || n_tasks <= 1) {
        for (std::size_t i = 0; i < n_tasks; ++i) fn(i);
        return;
    }
    const unsigned n_threads = static_cast<unsigned>(
        std::min<std::size_t>(workers, n_tasks));
    std::vector<std::thread> pool;
    pool.reserve(n_threads);
    std::exception_ptr first_error;
    std::mutex error_mutex;
    for (unsigned t = 0; t < n_threads; ++t) {
        pool.emplace_back([&, t] {
            try {
                for (std::size_t i = t; i < n_tasks; i += n_threads) fn(i);
            } catch (...) {
                std::lock_guard<std::mutex> lock(error_mutex);
                if (!first_error) first_error = std::current_exception();
            }
        });
    }
    for (auto& th : pool) th.join();
    if (first_error) std::rethrow_exception(first_error);
}

inline bool nearly_equal(double a, double b, double rel, double abs_floor = 0.0) {
    return std::abs(a - b) <= std::max(abs_floor, rel * std::max(std::abs(a), std::abs(b)));
}

}  // namespace boosts
