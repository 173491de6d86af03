#pragma once

#include <cstdint>
#include <random>
#include <string>
#include <vector>

namespace ildlab {

// Deterministic RNG with named substreams.
//
// Every consumer derives its own stream as hash(root_seed, purpose), so adding
// or removing one consumer (say, the mixup draw in a CR run) never perturbs
// the draws seen by the others. That is what makes a CR run with weight 0 and
// a plain ILD run bit-identical. Distributions are implemented here rather
// than taken from <random> because libstdc++ and libc++ disagree on their
// algorithms and golden files must not depend on the standard library build.
class Rng {
public:
    explicit Rng(std::uint64_t seed) : engine_(seed) {}

    // Derived stream for a named purpose. Stable across platforms.
    static Rng stream(std::uint64_t root_seed, const std::string& purpose);
    static std::uint64_t derive(std::uint64_t root_seed, const std::string& purpose);

    std::uint64_t next_u64() { return engine_(); }

    // Uniform on [0, 1).
    double uniform();
    // Uniform integer on [0, n).
    std::uint64_t uniform_int(std::uint64_t n);
    // Standard normal via Box-Muller (no cached spare: one draw, two uniforms).
    double normal();
    double normal(double mean, double stddev) { return mean + stddev * normal(); }
    // Gamma(shape, 1) via Marsaglia-Tsang, shape > 0.
    double gamma(double shape);
    // Beta(a, b) as X/(X+Y) with gamma draws.
    double beta(double a, double b);

    // Truncated normal on [-2s, 2s] by rejection.
    double truncated_normal(double stddev);

    // Fisher-Yates over indices 0..n-1.
    std::vector<std::size_t> permutation(std::size_t n);

private:
    std::mt19937_64 engine_;
};

} // namespace ildlab
