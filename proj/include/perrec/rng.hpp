#pragma once

#include <cmath>
#include <cstdint>
#include <initializer_list>
#include <string_view>

#include "perrec/common.hpp"

namespace perrec {

// SplitMix64 stream. Self-contained so that runs are reproducible independent
// of the standard library's distribution implementations. Every consumer of
// randomness derives its own stream from the master seed via `stream()`, so
// adding a new consumer never perturbs existing ones.
class Rng {
public:
    explicit Rng(uint64_t seed) : state_(seed) {}

    uint64_t next_u64() {
        uint64_t z = (state_ += 0x9e3779b97f4a7c15ull);
        z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
        z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
        return z ^ (z >> 31);
    }

    // Uniform in [0, 1) with 53-bit resolution.
    double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

    // Uniform integer in [0, n). Rejection-free modulo bias is negligible for
    // the pool sizes used here, but we reject anyway to keep draws exact.
    int64_t uniform_int(int64_t n) {
        if (n <= 0) throw ContractError("Rng::uniform_int: n must be positive");
        const uint64_t un = static_cast<uint64_t>(n);
        const uint64_t limit = UINT64_MAX - UINT64_MAX % un;
        uint64_t r;
        do {
            r = next_u64();
        } while (r >= limit);
        return static_cast<int64_t>(r % un);
    }

    // Standard normal via Box-Muller (cached spare).
    double normal() {
        if (has_spare_) {
            has_spare_ = false;
            return spare_;
        }
        double u1 = 0.0;
        do {
            u1 = uniform();
        } while (u1 <= 0.0);
        const double u2 = uniform();
        const double r = std::sqrt(-2.0 * std::log(u1));
        const double theta = 2.0 * 3.14159265358979323846 * u2;
        spare_ = r * std::sin(theta);
        has_spare_ = true;
        return r * std::cos(theta);
    }

    // Derives an independent child stream; does not advance this stream.
    Rng fork(uint64_t tag) const { return Rng(mix(state_, tag)); }

    // Named stream rooted at a master seed, e.g.
    //   Rng::stream(seed, "negatives", {epoch, batch}).
    static Rng stream(uint64_t master, std::string_view label,
                      std::initializer_list<uint64_t> path = {}) {
        uint64_t s = mix(master, fnv1a(label));
        for (uint64_t p : path) s = mix(s, p + 0x632be59bd9b4e019ull);
        return Rng(s);
    }

private:
    static uint64_t mix(uint64_t a, uint64_t b) {
        uint64_t z = a ^ (b + 0x9e3779b97f4a7c15ull + (a << 6) + (a >> 2));
        z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
        return z ^ (z >> 27);
    }

    uint64_t state_;
    double spare_ = 0.0;
    bool has_spare_ = false;
};

}  // namespace perrec
