#pragma once

#include <cstdint>
#include <string_view>
#include <vector>

namespace sonoseg {

/// Counter-based SplitMix64 generator. Every random draw in this project
/// (weight init, speckle, shuffles, phantom jitter) goes through this one
/// generator so that any implementation of the recipe below reproduces the
/// exact same streams.
///
/// State update and output (all arithmetic mod 2^64):
///   state += 0x9E3779B97F4A7C15
///   z = state
///   z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9
///   z = (z ^ (z >> 27)) * 0x94D049BB133111EB
///   output = z ^ (z >> 31)
///
/// Derived values:
///   uniform double in [0,1): (output >> 11) * 2^-53
///   uniform float  in [0,1): computed as float(uniform double)
///   integer in [0,n):        output % n
///   substream derivation:    mix64(seed ^ mix64(tag))  (mix64 = the z-mixing
///                            above applied to a plain value, no increment)
///   string tags:             hashed with 64-bit FNV-1a first
class SplitMix64 {
public:
    explicit SplitMix64(std::uint64_t seed) : state_(seed) {}

    std::uint64_t next() {
        state_ += 0x9E3779B97F4A7C15ULL;
        return mix64(state_);
    }

    double next_double() { return static_cast<double>(next() >> 11) * 0x1.0p-53; }

    float next_float() { return static_cast<float>(next_double()); }

    /// Uniform integer in [0, n). Plain modulo, documented as part of the
    /// stream recipe; the bias is irrelevant at the n used here.
    std::uint64_t next_below(std::uint64_t n) { return next() % n; }

    /// Uniform double in [lo, hi).
    double next_in(double lo, double hi) { return lo + (hi - lo) * next_double(); }

    /// Uniform integer in [lo, hi] inclusive.
    int next_int(int lo, int hi) {
        return lo + static_cast<int>(next_below(static_cast<std::uint64_t>(hi - lo + 1)));
    }

    static std::uint64_t mix64(std::uint64_t z) {
        z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
        z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
        return z ^ (z >> 31);
    }

private:
    std::uint64_t state_;
};

inline std::uint64_t fnv1a64(std::string_view s) {
    std::uint64_t h = 0xCBF29CE484222325ULL;
    for (unsigned char c : s) {
        h ^= c;
        h *= 0x100000001B3ULL;
    }
    return h;
}

/// Stateless substream derivation: independent seed for a tagged purpose.
inline std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t tag) {
    return SplitMix64::mix64(seed ^ SplitMix64::mix64(tag));
}

inline std::uint64_t derive_seed(std::uint64_t seed, std::string_view tag) {
    return derive_seed(seed, fnv1a64(tag));
}

/// Fisher-Yates shuffle driven by SplitMix64: for i = n-1 .. 1 swap a[i]
/// with a[next() % (i+1)].
template <typename T>
void shuffle(std::vector<T>& v, SplitMix64& rng) {
    if (v.size() < 2) return;
    for (std::size_t i = v.size() - 1; i > 0; --i) {
        std::size_t j = static_cast<std::size_t>(rng.next_below(i + 1));
        std::swap(v[i], v[j]);
    }
}

} // namespace sonoseg
