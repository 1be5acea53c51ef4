#pragma once

#include <cmath>
#include <cstdint>
#include <string_view>
#include <vector>

namespace s4rec {

inline uint64_t splitmix64(uint64_t x) {
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
}

// Derives a child seed from (base, name, a, b). Every random decision in the
// framework draws from a stream created this way, so toggling one component
// never perturbs another component's randomness, and resume-from-checkpoint
// replays exactly (streams are re-derived, never serialized).
inline uint64_t derive_seed(uint64_t base, std::string_view name,
                            uint64_t a = 0, uint64_t b = 0) {
    uint64_t h = 0xcbf29ce484222325ULL ^ base;
    for (char c : name) {
        h ^= static_cast<unsigned char>(c);
        h *= 0x100000001b3ULL;
    }
    h = splitmix64(h);
    h = splitmix64(h ^ (a * 0x9e3779b97f4a7c15ULL));
    h = splitmix64(h ^ (b * 0xd1b54a32d192ed03ULL));
    return h;
}

// xoshiro-free deterministic generator: splitmix64 state walk. Distribution
// code is hand-rolled (no std::*_distribution) so output is identical across
// standard libraries.
class Rng {
public:
    explicit Rng(uint64_t seed) : state_(seed) {}

    uint64_t bits() {
        state_ += 0x9e3779b97f4a7c15ULL;
        uint64_t z = state_;
        z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
        z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
        return z ^ (z >> 31);
    }

    // uniform in [0, 1)
    double uniform() { return static_cast<double>(bits() >> 11) * 0x1.0p-53; }

    // uniform integer in [0, n), n >= 1; rejection sampling for exact uniformity
    uint64_t uniform_int(uint64_t n) {
        if (n <= 1) return 0;
        const uint64_t limit = UINT64_MAX - UINT64_MAX % n;
        uint64_t r;
        do {
            r = bits();
        } while (r >= limit);
        return r % n;
    }

    // standard normal via Box-Muller, one value cached
    double gaussian() {
        if (has_cached_) {
            has_cached_ = false;
            return cached_;
        }
        double u1 = uniform();
        double u2 = uniform();
        while (u1 <= 1e-300) u1 = uniform();
        const double r = std::sqrt(-2.0 * std::log(u1));
        const double t = 6.283185307179586476925286766559 * u2;
        cached_ = r * std::sin(t);
        has_cached_ = true;
        return r * std::cos(t);
    }

    // Fisher-Yates over [0, n)
    std::vector<int64_t> permutation(int64_t n) {
        std::vector<int64_t> p(static_cast<size_t>(n));
        for (int64_t i = 0; i < n; ++i) p[static_cast<size_t>(i)] = i;
        for (int64_t i = n - 1; i > 0; --i) {
            const auto j = static_cast<int64_t>(uniform_int(static_cast<uint64_t>(i + 1)));
            std::swap(p[static_cast<size_t>(i)], p[static_cast<size_t>(j)]);
        }
        return p;
    }

private:
    uint64_t state_;
    double cached_ = 0.0;
    bool has_cached_ = false;
};

}  // namespace s4rec
