#pragma once

#include <cmath>
#include <cstdint>
#include <numbers>
#include <random>
#include <string_view>

namespace droplora {

namespace detail {

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

} // namespace detail

/// Deterministically derives an independent child seed from a base seed and a
/// textual tag. Used for per-adapter, per-sweep-cell and per-purpose streams.
inline std::uint64_t derive_seed(std::uint64_t base, std::string_view tag) {
    return detail::splitmix64(base ^ detail::fnv1a64(tag));
}

/// Seeded generator with the sampling transforms spelled out, so streams are
/// reproducible independent of the standard library's distribution internals.
class Rng {
public:
    explicit Rng(std::uint64_t seed) : engine_(seed) {}

    std::uint64_t next_u64() { return engine_(); }

    /// Uniform on [0, 1) with 53 bits of precision.
    double uniform01() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }

    /// Standard normal via Box-Muller; consumes exactly two uniforms per draw.
    double normal() {
        const double u1 = uniform01();
        const double u2 = uniform01();
        const double radius = std::sqrt(-2.0 * std::log(1.0 - u1));
        return radius * std::cos(2.0 * std::numbers::pi * u2);
    }

    double normal(double mean, double stddev) { return mean + stddev * normal(); }

    bool bernoulli(double p) { return uniform01() < p; }

    /// Child generator seeded from this stream's seed material and a tag.
    Rng split(std::string_view tag) const {
        return Rng(derive_seed(seed_material(), tag));
    }

    bool operator==(const Rng& other) const { return engine_ == other.engine_; }
    bool operator!=(const Rng& other) const { return !(*this == other); }

private:
    std::uint64_t seed_material() const {
        // Hash the full engine state so split() children differ after draws.
        auto copy = engine_;
        std::uint64_t acc = 0x6a09e667f3bcc909ULL;
        for (int i = 0; i < 4; ++i) acc = detail::splitmix64(acc ^ copy());
        return acc;
    }

    std::mt19937_64 engine_;
};

} // namespace droplora
