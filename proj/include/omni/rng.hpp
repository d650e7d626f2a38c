#pragma once

#include <cmath>
#include <cstdint>

namespace omni {

// Deterministic splitmix64 generator. Every stochastic operation in this
// project takes an explicit seed or a Rng handle; there is no hidden
// global state.
class Rng {
public:
    explicit Rng(uint64_t seed) : state_(seed) {}

    uint64_t next_u64() {
        uint64_t z = (state_ += 0x9E3779B97F4A7C15ULL);
        z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
        z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
        return z ^ (z >> 31);
    }

    // Uniform in [0, 1), 53-bit resolution.
    double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

    // Uniform in (0, 1]; safe as a log argument.
    double uniform_open() { return 1.0 - uniform(); }

    // Standard normal via Box-Muller.
    double normal() {
        double u1 = uniform_open();
        double u2 = uniform();
        return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586476925286766559 * u2);
    }

    // Unbiased draw from [0, n).
    uint64_t below(uint64_t n) {
        if (n == 0) return 0;
        uint64_t limit = UINT64_MAX - (UINT64_MAX % n);
        uint64_t x;
        do {
            x = next_u64();
        } while (x >= limit);
        return x % n;
    }

    // Derive an independent stream without advancing this generator.
    // Used to hand per-sample generators to parallel pipeline shards.
    Rng fork(uint64_t stream) const {
        uint64_t z = state_ ^ (0x6A09E667F3BCC909ULL + stream * 0x9E3779B97F4A7C15ULL);
        z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
        z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
        return Rng(z ^ (z >> 31));
    }

    uint64_t state() const { return state_; }

private:
    uint64_t state_;
};

} // namespace omni
