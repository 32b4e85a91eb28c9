#pragma once

#include <cmath>
#include <cstdint>
#include <random>

namespace msd {

// Deterministic random stream. Wraps std::mt19937_64 (whose raw output is
// fully specified by the standard) and maps to floats with fixed arithmetic,
// so sequences are reproducible across standard libraries. Independent
// streams are derived by hashing (seed, stream, index) with splitmix64.
class Rng {
public:
    explicit Rng(std::uint64_t seed) : gen_(seed) {}

    static std::uint64_t mix(std::uint64_t x) {
        x += 0x9e3779b97f4a7c15ull;
        x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ull;
        x = (x ^ (x >> 27)) * 0x94d049bb133111ebull;
        return x ^ (x >> 31);
    }

    // Independent stream for (seed, purpose tag, index). Streams derived from
    // distinct tuples are decorrelated regardless of draw order elsewhere.
    static Rng stream(std::uint64_t seed, std::uint64_t tag, std::uint64_t index = 0) {
        return Rng(mix(mix(seed ^ 0x5851f42d4c957f2dull) ^ mix(tag)) ^ mix(index * 0x2545f4914f6cdd1dull + 1));
    }

    std::uint64_t next_u64() { return gen_(); }

    // Uniform in [0, 1) with 53-bit resolution.
    double uniform() { return static_cast<double>(gen_() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    // Inclusive integer range via rejection-free modulo of a wide draw.
    int uniform_int(int lo, int hi) {
        const std::uint64_t span = static_cast<std::uint64_t>(hi - lo) + 1;
        return lo + static_cast<int>(gen_() % span);
    }

    bool bernoulli(double p) { return uniform() < p; }

    // Box-Muller, cosine form. One draw consumes two uniforms; no cached spare,
    // so the stream position is a pure function of the call count.
    double normal() {
        double u1 = uniform();
        while (u1 <= 0.0) u1 = uniform();
        const double u2 = uniform();
        return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586477 * u2);
    }

    double normal(double mean, double stddev) { return mean + stddev * normal(); }

    // Normal truncated to [-2, 2] standard deviations, for parameter init.
    double trunc_normal(double stddev) {
        double v = normal();
        while (v < -2.0 || v > 2.0) v = normal();
        return v * stddev;
    }

private:
    std::mt19937_64 gen_;
};

// Stream tags used across the project; kept in one place so that resuming a
// run can re-derive identical streams from (seed, step) alone.
namespace rng_tag {
inline constexpr std::uint64_t kDataset = 1;
inline constexpr std::uint64_t kParamInit = 2;
inline constexpr std::uint64_t kEpochOrder = 3;
inline constexpr std::uint64_t kViews = 4;
inline constexpr std::uint64_t kFrozenTeacher = 5;
inline constexpr std::uint64_t kProbe = 6;
}  // namespace rng_tag

}  // namespace msd
