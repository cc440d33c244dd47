#pragma once

#include <cmath>
#include <cstdint>
#include <span>

namespace plm2 {

// xoshiro256** seeded via splitmix64. Self-contained so streams behave
// identically on every platform and serialize as four words (std
// distributions are not bit-stable across standard libraries).
class Rng {
public:
    Rng() : Rng(0x9e3779b97f4a7c15ull) {}

    explicit Rng(uint64_t seed) {
        uint64_t x = seed;
        for (auto& w : s_) w = splitmix64(x);
    }

    // Derives an independent stream, e.g. Rng(seed).fork(2) for K sampling.
    Rng fork(uint64_t stream_id) const {
        uint64_t x = s_[0] ^ (0xbf58476d1ce4e5b9ull * (stream_id + 1));
        Rng r;
        for (auto& w : r.s_) w = splitmix64(x);
        return r;
    }

    uint64_t next_u64() {
        const uint64_t result = rotl(s_[1] * 5, 7) * 9;
        const uint64_t t = s_[1] << 17;
        s_[2] ^= s_[0];
        s_[3] ^= s_[1];
        s_[1] ^= s_[2];
        s_[0] ^= s_[3];
        s_[2] ^= t;
        s_[3] = rotl(s_[3], 45);
        return result;
    }

    // Uniform in [0, 1) with 53 random bits.
    double next_double() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

    // Uniform integer in [0, n), n >= 1. Rejection-free modulo bias is not a
    // concern at these ranges but we debias anyway for exactness.
    uint64_t next_below(uint64_t n) {
        const uint64_t threshold = (0 - n) % n;
        for (;;) {
            uint64_t r = next_u64();
            if (r >= threshold) return r % n;
        }
    }

    // Box-Muller; one fresh pair per call keeps the stream position
    // independent of how many values a caller consumed previously.
    double next_normal() {
        double u1 = next_double();
        double u2 = next_double();
        while (u1 <= 0.0) u1 = next_double();
        return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586 * u2);
    }

    void fill_normal(std::span<float> out, float mean, float stddev) {
        for (auto& v : out) v = static_cast<float>(mean + stddev * next_normal());
    }

    void state(uint64_t out[4]) const {
        for (int i = 0; i < 4; ++i) out[i] = s_[i];
    }

    void set_state(const uint64_t in[4]) {
        for (int i = 0; i < 4; ++i) s_[i] = in[i];
    }

private:
    static uint64_t splitmix64(uint64_t& x) {
        x += 0x9e3779b97f4a7c15ull;
        uint64_t z = x;
        z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
        z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
        return z ^ (z >> 31);
    }

    static uint64_t rotl(uint64_t v, int k) { return (v << k) | (v >> (64 - k)); }

    uint64_t s_[4];
};

}  // namespace plm2
