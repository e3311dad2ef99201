// OTFS modulation core: the Doppler-delay grid, the (inverse) symplectic
// finite Fourier transform pair and random payload generation.
//
// Grid conventions used across the library:
//   - a Doppler-delay frame is a length N*M vector indexed dd = k*M + l,
//     with k in [0,N) the Doppler index and l in [0,M) the delay index;
//   - a time-frequency frame is a length N*M vector indexed tf = n*M + m,
//     with n in [0,N) the symbol-time index and m in [0,M) the subcarrier;
//   - the transforms use the unnormalized forward map
//         X[n,m] = sum_{k,l} x[k,l] e^{j2pi(nk/N - ml/M)}
//     and the 1/(NM)-normalized inverse
//         y[k,l] = (1/NM) sum_{n,m} Y[n,m] e^{j2pi(ml/M - nk/N)}.
#pragma once

#include "otfsradar/common.hpp"
#include "otfsradar/rng.hpp"
#include <vector>

namespace otfsradar {

struct OtfsConfig {
    int N = 8;            // Doppler bins (symbol times per frame)
    int M = 8;            // delay bins (subcarriers)
    double delta_f = 1e6; // subcarrier spacing [Hz]
    double T = 1e-6;      // symbol duration [s]; T * delta_f must equal 1

    OtfsConfig() = default;
    OtfsConfig(int N_, int M_, double delta_f_)
        : N(N_), M(M_), delta_f(delta_f_), T(1.0 / delta_f_) { validate(); }
    OtfsConfig(int N_, int M_, double delta_f_, double T_)
        : N(N_), M(M_), delta_f(delta_f_), T(T_) { validate(); }

    void validate() const {
        if (N < 1 || M < 1)
            throw ConfigError("OtfsConfig: N and M must be positive");
        if (delta_f <= 0.0 || T <= 0.0)
            throw ConfigError("OtfsConfig: delta_f and T must be positive");
        if (std::abs(T * delta_f - 1.0) > 1e-12)
            throw ConfigError("OtfsConfig: T * delta_f must equal 1 (critically sampled grid)");
    }

    int grid_size() const { return N * M; }
    double doppler_step() const { return 1.0 / (N * T); }   // grid spacing in nu [Hz]
    double delay_step() const { return T / M; }             // grid spacing in tau [s]
    double bandwidth() const { return M * delta_f; }        // occupied bandwidth [Hz]
    double frame_duration() const { return N * T; }         // [s]

    int dd_index(int k, int l) const { return k * M + l; }
    int tf_index(int n, int m) const { return n * M + m; }
};

// Doppler-delay -> time-frequency, unnormalized (see header comment).
// Evaluated separably: an M-point DFT along delay followed by an N-point
// inverse-sign DFT along Doppler; works for any N, M (no power-of-two
// requirement) in O(NM(N+M)).
inline VectorXcd isfft(const OtfsConfig& cfg, const VectorXcd& dd) {
    const int N = cfg.N, M = cfg.M;
    if (dd.size() != N * M)
        throw ConfigError("isfft: input size must be N*M");
    // Stage 1: t[k,m] = sum_l x[k,l] e^{-j2pi ml/M}
    MatrixXcd t(N, M);
    std::vector<cplx> wM(M);
    for (int l = 0; l < M; ++l) wM[l] = expj(-2.0 * kPi * l / M);
    for (int k = 0; k < N; ++k) {
        for (int m = 0; m < M; ++m) {
            cplx acc = 0.0;
            for (int l = 0; l < M; ++l)
                acc += dd[k * M + l] * expj(-2.0 * kPi * double(m) * l / M);
            t(k, m) = acc;
        }
    }
    // Stage 2: X[n,m] = sum_k t[k,m] e^{+j2pi nk/N}
    VectorXcd tf(N * M);
    for (int n = 0; n < N; ++n) {
        for (int m = 0; m < M; ++m) {
            cplx acc = 0.0;
            for (int k = 0; k < N; ++k)
                acc += t(k, m) * expj(2.0 * kPi * double(n) * k / N);
            tf[n * M + m] = acc;
        }
    }
    return tf;
}

// Time-frequency -> Doppler-delay, normalized by 1/(NM); exact inverse of isfft.
inline VectorXcd sfft(const OtfsConfig& cfg, const VectorXcd& tf) {
    const int N = cfg.N, M = cfg.M;
    if (tf.size() != N * M)
        throw ConfigError("sfft: input size must be N*M");
    // Stage 1: t[k,m] = sum_n Y[n,m] e^{-j2pi nk/N}
    MatrixXcd t(N, M);
    for (int k = 0; k < N; ++k) {
        for (int m = 0; m < M; ++m) {
            cplx acc = 0.0;
            for (int n = 0; n < N; ++n)
                acc += tf[n * M + m] * expj(-2.0 * kPi * double(n) * k / N);
            t(k, m) = acc;
        }
    }
    // Stage 2: y[k,l] = (1/NM) sum_m t[k,m] e^{+j2pi ml/M}
    VectorXcd dd(N * M);
    const double scale = 1.0 / (N * M);
    for (int k = 0; k < N; ++k) {
        for (int l = 0; l < M; ++l) {
            cplx acc = 0.0;
            for (int m = 0; m < M; ++m)
                acc += t(k, m) * expj(2.0 * kPi * double(m) * l / M);
            dd[k * M + l] = scale * acc;
        }
    }
    return dd;
}

// One frame of i.i.d. QPSK payload per stream, in the Doppler-delay domain.
// Every symbol has modulus sqrt(power/num_streams) exactly, so the per-symbol
// average power constraint E|x[k,l]|^2 = power/num_streams holds by
// construction.  Draws are a pure function of (cfg, num_streams, power, seed).
inline MatrixXcd generate_symbols(const OtfsConfig& cfg, int num_streams,
                                  double power, uint64_t seed) {
    if (num_streams < 1)
        throw ConfigError("generate_symbols: num_streams must be positive");
    if (power <= 0.0)
        throw ConfigError("generate_symbols: power must be positive");
    const double amp = std::sqrt(power / num_streams);
    Rng rng(seed);
    MatrixXcd x(cfg.grid_size(), num_streams);
    for (int s = 0; s < num_streams; ++s) {
        for (int i = 0; i < cfg.grid_size(); ++i) {
            // QPSK: phase pi/4 + q*pi/2, q uniform in {0,1,2,3}
            int q = static_cast<int>(rng.uniform_int(4));
            x(i, s) = amp * expj(kPi / 4.0 + q * kPi / 2.0);
        }
    }
    return x;
}

} // namespace otfsradar
