#pragma once

#include <cmath>
#include <cstdint>
#include <numbers>

namespace porl {

// Counter-based splitmix64 stream. Every draw is a pure function of
// (seed, counter), so traces are reproducible across platforms and the
// generator can be split into independent streams by index.
inline std::uint64_t mix64(std::uint64_t z) {
    z += 0x9E3779B97F4A7C15ull;
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
    return z ^ (z >> 31);
}

class Rng {
public:
    explicit Rng(std::uint64_t seed = 0) : seed_(seed) {}

    // Derives the seed of an independent substream: the stream index is
    // mixed and folded into the master seed, then mixed again.
    static std::uint64_t derive(std::uint64_t master, std::uint64_t stream) {
        return mix64(master + mix64(stream + 1));
    }

    Rng stream(std::uint64_t index) const { return Rng(derive(seed_, index)); }

    std::uint64_t next_u64() { return mix64(seed_ + (++counter_) * 0x9E3779B97F4A7C15ull); }

    // [0, 1) with 53 random bits
    double uniform01() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform01(); }

    bool bernoulli(double p) { return uniform01() < p; }

    // Box-Muller; consumes exactly two uniform draws per call
    double normal() {
        double u1 = 1.0 - uniform01();  // (0, 1]
        double u2 = uniform01();
        return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
    }

    double normal(double mean, double stddev) { return mean + stddev * normal(); }

    // Unbiased-enough integer in [0, n) via 128-bit multiply-shift
    std::uint64_t below(std::uint64_t n) {
        return static_cast<std::uint64_t>(
            (static_cast<unsigned __int128>(next_u64()) * n) >> 64);
    }

    std::uint64_t seed() const { return seed_; }

private:
    std::uint64_t seed_;
    std::uint64_t counter_ = 0;
};

// Stream indices used by the harness when splitting a run's master seed.
namespace streams {
inline constexpr std::uint64_t kEnv = 1;
inline constexpr std::uint64_t kMask = 2;
inline constexpr std::uint64_t kPolicy = 3;
inline constexpr std::uint64_t kInit = 4;
inline constexpr std::uint64_t kDropout = 5;
inline constexpr std::uint64_t kBootstrap = 6;
inline constexpr std::uint64_t kShuffle = 7;
inline constexpr std::uint64_t kEval = 8;
inline constexpr std::uint64_t kTrialBase = 1000;
}  // namespace streams

}  // namespace porl
