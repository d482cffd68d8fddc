#pragma once

#include <cmath>
#include <cstdint>
#include <numbers>
#include <string_view>
#include <vector>

#include "lvr/common.hpp"

namespace lvr {

// All randomness in a run flows from one master seed through named
// substreams so that e.g. changing the mask stream never perturbs the
// data stream. Substream seeds are derived with splitmix64 over the
// master seed, a purpose tag, and optional indices (epoch, step, image).

inline std::uint64_t splitmix64(std::uint64_t x) {
    x += 0x9e3779b97f4a7c15ull;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ull;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebull;
    return x ^ (x >> 31);
}

inline std::uint64_t seed_mix(std::uint64_t seed, std::string_view tag) {
    std::uint64_t h = splitmix64(seed);
    for (char c : tag) h = splitmix64(h ^ static_cast<std::uint64_t>(static_cast<unsigned char>(c)));
    return h;
}

inline std::uint64_t seed_mix(std::uint64_t seed, std::string_view tag, std::uint64_t a) {
    return splitmix64(seed_mix(seed, tag) ^ a);
}

inline std::uint64_t seed_mix(std::uint64_t seed, std::string_view tag, std::uint64_t a, std::uint64_t b) {
    return splitmix64(splitmix64(seed_mix(seed, tag) ^ a) ^ b);
}

inline std::uint64_t seed_mix(std::uint64_t seed, std::string_view tag, std::uint64_t a, std::uint64_t b,
                              std::uint64_t c) {
    return splitmix64(splitmix64(splitmix64(seed_mix(seed, tag) ^ a) ^ b) ^ c);
}

// Deterministic generator with self-contained distributions. The standard
// library distributions are implementation-defined, so uniform/normal
// draws are spelled out here to keep streams stable across toolchains.
class Rng {
  public:
    explicit Rng(std::uint64_t seed) : state_(seed ? seed : 0x853c49e6748fea9bull) {}

    std::uint64_t next_u64() {
        std::uint64_t z = state_;
        state_ = splitmix64dance(state_);
        return splitmix64(z);
    }

    // Uniform integer in [0, bound), bias-free via rejection.
    std::uint64_t next_below(std::uint64_t bound) {
        if (bound == 0) throw std::invalid_argument("Rng::next_below: bound must be positive");
        std::uint64_t threshold = (0ull - bound) % bound;
        for (;;) {
            std::uint64_t r = next_u64();
            if (r >= threshold) return r % bound;
        }
    }

    // Uniform in [0, 1) with 53 bits of precision.
    double next_double() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

    double next_range(double lo, double hi) { return lo + (hi - lo) * next_double(); }

    // Box-Muller; one value per call, no cached state.
    double next_normal() {
        double u1 = next_double();
        while (u1 <= 0.0) u1 = next_double();
        double u2 = next_double();
        return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
    }

    // Normal(0, std) redrawn until within 2 std, the usual ViT init.
    double next_trunc_normal(double stddev) {
        for (;;) {
            double v = next_normal();
            if (std::abs(v) <= 2.0) return v * stddev;
        }
    }

    template <typename T>
    void shuffle(std::vector<T>& v) {
        for (std::size_t i = v.size(); i > 1; --i) {
            std::size_t j = static_cast<std::size_t>(next_below(i));
            std::swap(v[i - 1], v[j]);
        }
    }

  private:
    static std::uint64_t splitmix64dance(std::uint64_t x) { return x + 0x9e3779b97f4a7c15ull; }

    std::uint64_t state_;
};

}  // namespace lvr
