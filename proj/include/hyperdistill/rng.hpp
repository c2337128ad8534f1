#pragma once

#include <bit>
#include <cmath>
#include <cstdint>
#include <random>
#include <string_view>
#include <vector>

namespace hyperdistill {

// ---------------------------------------------------------------------------
// Seeded random streams.
//
// All randomness in the project flows from one root seed through named
// substreams (e.g. "morph-gen", "collect", "shuffle"). Every draw is built
// directly on mt19937_64 output; none of the distribution adapters from
// <random> are used because their output is implementation-defined and the
// project promises bitwise reproducibility.
// ---------------------------------------------------------------------------

inline std::uint64_t splitmix64(std::uint64_t x) {
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
}

inline std::uint64_t fnv1a64(std::string_view s) {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (unsigned char c : s) {
        h ^= c;
        h *= 0x100000001b3ULL;
    }
    return h;
}

class Rng {
public:
    explicit Rng(std::uint64_t seed)
        : seed_(seed), engine_(splitmix64(seed)) {}

    // Derives an independent stream; streams with different names never share state.
    Rng substream(std::string_view name) const {
        return Rng(splitmix64(seed_ ^ fnv1a64(name)));
    }

    Rng substream(std::string_view name, std::uint64_t index) const {
        return Rng(splitmix64(splitmix64(seed_ ^ fnv1a64(name)) + index));
    }

    std::uint64_t seed() const { return seed_; }

    std::uint64_t next_u64() { return engine_(); }

    // Uniform in [0, 1) with 53 random bits.
    double uniform() {
        return static_cast<double>(engine_() >> 11) * 0x1.0p-53;
    }

    double uniform(double lo, double hi) {
        return lo + (hi - lo) * uniform();
    }

    // Unbiased integer in [0, n) via bitmask rejection.
    std::uint64_t below(std::uint64_t n) {
        if (n <= 1) {
            return 0;
        }
        std::uint64_t mask = ~0ULL >> std::countl_zero(n - 1);
        std::uint64_t r = engine_() & mask;
        while (r >= n) {
            r = engine_() & mask;
        }
        return r;
    }

    int uniform_int(int lo, int hi) {  // inclusive bounds
        return lo + static_cast<int>(below(static_cast<std::uint64_t>(hi - lo + 1)));
    }

    // Standard normal via Box-Muller with a cached spare.
    double normal() {
        if (has_spare_) {
            has_spare_ = false;
            return spare_;
        }
        double u = 1.0 - uniform();  // (0, 1], keeps log finite
        double v = uniform();
        double r = std::sqrt(-2.0 * std::log(u));
        double theta = 6.283185307179586476925286766559 * v;
        spare_ = r * std::sin(theta);
        has_spare_ = true;
        return r * std::cos(theta);
    }

    double normal(double mu, double sigma) { return mu + sigma * normal(); }

    template <typename T>
    void shuffle(std::vector<T>& v) {
        for (std::size_t i = v.size(); i > 1; --i) {
            std::size_t j = static_cast<std::size_t>(below(i));
            std::swap(v[i - 1], v[j]);
        }
    }

private:
    std::uint64_t seed_;
    std::mt19937_64 engine_;
    bool has_spare_ = false;
    double spare_ = 0.0;
};

}  // namespace hyperdistill
