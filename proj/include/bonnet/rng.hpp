#pragma once

#include <cmath>
#include <cstdint>
#include <random>

namespace bonnet {

// Deterministic random source used everywhere a seed appears.
//
// The generator is std::mt19937_64 (fully specified by the standard), but the
// distributions are spelled out here instead of using <random>'s distribution
// classes, whose output sequences are implementation-defined. With these,
// identical seeds give identical streams on any conforming toolchain.
class Rng {
public:
    explicit Rng(uint64_t seed) : gen_(seed) {}

    uint64_t next_u64() { return gen_(); }

    // Uniform in [0, 1) with 53 random bits.
    double uniform() { return double(gen_() >> 11) * 0x1.0p-53; }

    // Uniform in [lo, hi).
    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    // Uniform integer in [0, n), n > 0. Rejection sampling, no modulo bias.
    uint64_t below(uint64_t n) {
        const uint64_t limit = UINT64_MAX - UINT64_MAX % n;
        uint64_t x;
        do {
            x = gen_();
        } while (x >= limit);
        return x % n;
    }

    int64_t range(int64_t lo, int64_t hi_inclusive) {
        return lo + int64_t(below(uint64_t(hi_inclusive - lo + 1)));
    }

    // Standard normal via Box-Muller; one value per call, spare cached.
    double normal() {
        if (has_spare_) {
            has_spare_ = false;
            return spare_;
        }
        double u1, u2;
        do {
            u1 = uniform();
        } while (u1 <= 0.0);
        u2 = uniform();
        const double r = std::sqrt(-2.0 * std::log(u1));
        const double a = 6.283185307179586476925286766559 * u2;
        spare_ = r * std::sin(a);
        has_spare_ = true;
        return r * std::cos(a);
    }

    double normal(double mean, double stddev) { return mean + stddev * normal(); }

private:
    std::mt19937_64 gen_;
    double spare_ = 0.0;
    bool has_spare_ = false;
};

// Stateless mix for deriving per-item seeds from a base seed (splitmix64 step).
inline uint64_t mix_seed(uint64_t base, uint64_t index) {
    uint64_t z = base + (index + 1) * 0x9e3779b97f4a7c15ull;
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
    return z ^ (z >> 31);
}

} // namespace bonnet
