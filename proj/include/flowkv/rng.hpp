#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <span>
#include <vector>

namespace flowkv {

/// splitmix64 finalizer; used to derive independent seed streams from a
/// run seed plus a handful of tags (workflow id, invocation index, ...).
inline std::uint64_t mix64(std::uint64_t x) {
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
}

inline std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t a, std::uint64_t b = 0,
                                 std::uint64_t c = 0) {
    return mix64(mix64(mix64(seed ^ a) + b) + c);
}

/// Deterministic RNG wrapper. mt19937_64 output is fixed by the standard,
/// and all distribution math is done here rather than with std::*_distribution,
/// so identical seeds give identical streams on any conforming toolchain.
class Rng {
public:
    explicit Rng(std::uint64_t seed) : eng_(seed) {}

    std::uint64_t next_u64() { return eng_(); }

    /// Uniform in [0, 1).
    double uniform() { return static_cast<double>(eng_() >> 11) * 0x1.0p-53; }

    /// Uniform integer in [0, n).
    std::uint64_t uniform_int(std::uint64_t n) {
        return static_cast<std::uint64_t>(uniform() * static_cast<double>(n)) % n;
    }

    double uniform_range(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    /// Index sampled from an unnormalized weight vector by CDF scan.
    std::size_t pick_weighted(std::span<const double> weights) {
        double total = 0.0;
        for (double w : weights) total += w;
        double u = uniform() * total;
        double acc = 0.0;
        for (std::size_t i = 0; i < weights.size(); ++i) {
            acc += weights[i];
            if (u < acc) return i;
        }
        return weights.size() - 1;
    }

    /// Random point on the probability simplex (iid exponentials, normalized).
    std::vector<double> random_distribution(std::size_t n) {
        std::vector<double> d(n);
        double total = 0.0;
        for (auto& x : d) {
            x = -std::log(1.0 - uniform());
            total += x;
        }
        for (auto& x : d) x /= total;
        return d;
    }

private:
    std::mt19937_64 eng_;
};

}  // namespace flowkv
