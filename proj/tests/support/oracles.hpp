#pragma once

// Test-only oracles. These stay independent of the library paths they check:
// finite differences for gradients, and a float64 re-implementation of the
// masked cross entropy.

#include <cmath>
#include <cstdint>
#include <functional>
#include <span>
#include <vector>

#include "plm2/rng.hpp"
#include "plm2/tensor.hpp"

namespace oracles {

// Central finite differences of a scalar function w.r.t. one tensor's
// elements. Mutates and restores x in place.
inline std::vector<float> finite_diff_grad(plm2::Tensor& x,
                                           const std::function<double()>& loss_fn,
                                           float eps = 1e-3f) {
    std::vector<float> g(x.numel());
    float* d = x.mutable_data();
    for (size_t i = 0; i < x.numel(); ++i) {
        const float keep = d[i];
        d[i] = keep + eps;
        const double up = loss_fn();
        d[i] = keep - eps;
        const double dn = loss_fn();
        d[i] = keep;
        g[i] = static_cast<float>((up - dn) / (2.0 * static_cast<double>(eps)));
    }
    return g;
}

// Scale-relative max error between two gradient vectors: the largest
// absolute difference divided by the largest gradient magnitude.
inline double grad_rel_err(std::span<const float> a, std::span<const float> b) {
    double max_diff = 0.0, max_mag = 0.0;
    for (size_t i = 0; i < a.size(); ++i) {
        max_diff = std::max(max_diff, std::abs(static_cast<double>(a[i]) - b[i]));
        max_mag = std::max({max_mag, std::abs(static_cast<double>(a[i])), std::abs(static_cast<double>(b[i]))});
    }
    return max_diff / (max_mag + 1e-12);
}

// Per-scalar relative error with an absolute floor for near-zero pairs.
inline bool scalar_grad_close(double a, double b, double rel, double abs_floor) {
    const double diff = std::abs(a - b);
    return diff <= std::max(rel * std::max(std::abs(a), std::abs(b)), abs_floor);
}

// float64 masked mean NLL, written directly from the definition.
inline double cross_entropy_f64(std::span<const float> logits, int n, int vocab,
                                std::span<const int32_t> targets, std::span<const uint8_t> mask) {
    double total = 0.0;
    int count = 0;
    for (int i = 0; i < n; ++i) {
        if (!mask[static_cast<size_t>(i)]) continue;
        const float* row = logits.data() + static_cast<size_t>(i) * vocab;
        double mx = row[0];
        for (int j = 1; j < vocab; ++j) mx = std::max(mx, static_cast<double>(row[j]));
        double denom = 0.0;
        for (int j = 0; j < vocab; ++j) denom += std::exp(static_cast<double>(row[j]) - mx);
        total += std::log(denom) + mx - static_cast<double>(row[targets[static_cast<size_t>(i)]]);
        ++count;
    }
    return total / count;
}

inline plm2::Tensor random_tensor(std::vector<int> shape, plm2::Rng& rng, float scl = 1.0f,
                                  bool requires_grad = true) {
    auto t = plm2::Tensor::zeros(std::move(shape), requires_grad);
    for (size_t i = 0; i < t.numel(); ++i)
        t.mutable_data()[i] = static_cast<float>(rng.next_normal()) * scl;
    return t;
}

}  // namespace oracles
