// Deterministic random number generation.
//
// All randomness in the library flows through this header so that results are
// byte-identical across platforms and across thread schedules.  Standard
// <random> distributions are implementation-defined, so the uniform/normal
// transforms are spelled out here; the engine itself (mt19937_64) has a
// standard-mandated sequence.
//
// Independent streams are derived from a master seed plus integer tags via a
// SplitMix64-style mixer, so trial i of experiment e always sees the same
// draws no matter which worker thread runs it or in which order.
#pragma once

#include "otfsradar/common.hpp"
#include <random>

namespace otfsradar {

inline uint64_t splitmix64(uint64_t x) {
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
}

// Combine a master seed with up to three stream tags (experiment, trial, purpose).
inline uint64_t derive_seed(uint64_t master, uint64_t a, uint64_t b = 0, uint64_t c = 0) {
    uint64_t s = splitmix64(master ^ 0x6a09e667f3bcc908ULL);
    s = splitmix64(s ^ a);
    s = splitmix64(s ^ (b + 0x3c6ef372fe94f82bULL));
    s = splitmix64(s ^ (c + 0xa54ff53a5f1d36f1ULL));
    return s;
}

class Rng {
public:
    explicit Rng(uint64_t seed) : eng_(seed) {}

    // Uniform in [0, 1) with 53 bits of mantissa.
    double uniform() {
        return static_cast<double>(eng_() >> 11) * 0x1.0p-53;
    }

    // Uniform integer in [0, n).
    uint64_t uniform_int(uint64_t n) {
        // Rejection-free modulo is biased for huge n; n here is always small
        // (grid sizes, codebook sizes), where the bias is ~n/2^64.
        return eng_() % n;
    }

    // Standard normal via Box-Muller (pairs cached).
    double normal() {
        if (have_spare_) {
            have_spare_ = false;
            return spare_;
        }
        double u1 = uniform();
        double u2 = uniform();
        while (u1 <= 0.0) u1 = uniform();
        double r = std::sqrt(-2.0 * std::log(u1));
        double th = 2.0 * kPi * u2;
        spare_ = r * std::sin(th);
        have_spare_ = true;
        return r * std::cos(th);
    }

    // Circularly-symmetric complex normal with E|z|^2 = sigma2.
    cplx cnormal(double sigma2 = 1.0) {
        double s = std::sqrt(sigma2 / 2.0);
        double re = s * normal();
        double im = s * normal();
        return {re, im};
    }

    // Uniform phase on the unit circle.
    cplx unit_phase() { return expj(2.0 * kPi * uniform()); }

    // Fisher-Yates shuffle.
    template <typename T>
    void shuffle(std::vector<T>& v) {
        for (size_t i = v.size(); i > 1; --i) {
            size_t j = static_cast<size_t>(uniform_int(i));
            std::swap(v[i - 1], v[j]);
        }
    }

private:
    std::mt19937_64 eng_;
    double spare_ = 0.0;
    bool have_spare_ = false;
};

} // namespace otfsradar
