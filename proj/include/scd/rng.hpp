#pragma once

#include <cmath>
#include <cstdint>
#include <random>

#include "scd/common.hpp"

namespace scd {

// splitmix64 finalizer, used to mix seeds with stream tags so that every
// consumer of randomness owns an independent, reproducible stream.
inline std::uint64_t mix64(std::uint64_t z) {
    z += 0x9e3779b97f4a7c15ULL;
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d4ecda6f572cf5ULL;
    return z ^ (z >> 31);
}

inline std::uint64_t mix64(std::uint64_t a, std::uint64_t b) { return mix64(mix64(a) ^ b); }

inline std::uint64_t mix64(std::uint64_t a, std::uint64_t b, std::uint64_t c) {
    return mix64(mix64(a, b) ^ c);
}

inline std::uint64_t mix64(std::uint64_t a, std::uint64_t b, std::uint64_t c, std::uint64_t d) {
    return mix64(mix64(a, b, c) ^ d);
}

// Stream tags; all randomness in the project is keyed as
// mix64(seed, tag, ...indices) so that runs are reproducible and resumable
// without serializing generator state.
namespace stream {
constexpr std::uint64_t init = 0x11;        // weight initialization
constexpr std::uint64_t data = 0x22;        // batch sampling
constexpr std::uint64_t noise = 0x33;       // (t, eps) draws in training
constexpr std::uint64_t corrupt = 0x44;     // context corruption zeta
constexpr std::uint64_t frame_init = 0x55;  // rollout per-frame gaussian init
constexpr std::uint64_t cfg = 0x66;         // guidance negative-branch zeta
constexpr std::uint64_t dataset = 0x77;     // synthetic world generation
constexpr std::uint64_t val = 0x88;         // validation draws
}  // namespace stream

// Deterministic gaussian/uniform source. mt19937_64 is bit-exact across
// implementations; the Box-Muller transform is written out explicitly so the
// produced values do not depend on the standard library's distributions.
class Rng {
public:
    explicit Rng(std::uint64_t seed) : gen_(seed) {}

    // uniform in [0, 1)
    double uniform() {
        return static_cast<double>(gen_() >> 11) * 0x1.0p-53;
    }

    // uniform integer in [0, n)
    std::uint64_t uniform_int(std::uint64_t n) {
        // modulo bias is negligible for n << 2^64 (largest n here is a dataset size)
        return gen_() % n;
    }

    double normal() {
        if (have_spare_) {
            have_spare_ = false;
            return spare_;
        }
        double u1 = uniform();
        double u2 = uniform();
        while (u1 <= 1e-300) u1 = uniform();
        const double r = std::sqrt(-2.0 * std::log(u1));
        const double theta = 2.0 * 3.14159265358979323846 * u2;
        spare_ = r * std::sin(theta);
        have_spare_ = true;
        return r * std::cos(theta);
    }

private:
    std::mt19937_64 gen_;
    double spare_ = 0.0;
    bool have_spare_ = false;
};

}  // namespace scd
