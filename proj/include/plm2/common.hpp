#pragma once

#include <cstddef>
#include <cstdint>
#include <stdexcept>
#include <string>

#if defined(_OPENMP)
#include <omp.h>
#endif

namespace plm2 {

// ---------------------------------------------------------------------------
// Error types. Config/shape problems are programmer-visible and carry the
// offending detail in the message; numeric problems abort the step.
// ---------------------------------------------------------------------------

struct ShapeError : std::runtime_error {
    explicit ShapeError(const std::string& msg) : std::runtime_error(msg) {}
};

struct ValueError : std::runtime_error {
    explicit ValueError(const std::string& msg) : std::runtime_error(msg) {}
};

struct NumericError : std::runtime_error {
    explicit NumericError(const std::string& msg) : std::runtime_error(msg) {}
};

struct IoError : std::runtime_error {
    explicit IoError(const std::string& msg) : std::runtime_error(msg) {}
};

struct FormatError : std::runtime_error {
    explicit FormatError(const std::string& msg) : std::runtime_error(msg) {}
};

struct CapacityError : std::runtime_error {
    explicit CapacityError(const std::string& msg) : std::runtime_error(msg) {}
};

struct ConfigError : std::runtime_error {
    explicit ConfigError(const std::string& msg) : std::runtime_error(msg) {}
};

// ---------------------------------------------------------------------------
// Thread control. Kernels parallelize over disjoint output rows with static
// schedules, so a fixed thread count fixes every reduction order.
// ---------------------------------------------------------------------------

inline int& thread_count_ref() {
    static int n = 0;  // 0 = library default
    return n;
}

inline void set_threads(int n) {
    thread_count_ref() = n;
#if defined(_OPENMP)
    if (n > 0) omp_set_num_threads(n);
#endif
}

inline int threads() {
#if defined(_OPENMP)
    return omp_get_max_threads();
#else
    return 1;
#endif
}

// FNV-1a, used for window hashing (train/eval contamination checks).
inline uint64_t fnv1a64(const void* data, size_t len, uint64_t seed = 0xcbf29ce484222325ull) {
    const auto* p = static_cast<const unsigned char*>(data);
    uint64_t h = seed;
    for (size_t i = 0; i < len; ++i) {
        h ^= p[i];
        h *= 0x100000001b3ull;
    }
    return h;
}

}  // namespace plm2
