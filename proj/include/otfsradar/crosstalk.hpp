// Doppler-delay crosstalk of a delayed/Doppler-shifted OTFS frame.
//
// A point scatterer at delay tau and Doppler nu couples transmitted
// Doppler-delay bin (k',l') into received bin (k,l) through
//
//   Psi[(k,l),(k',l')](nu,tau) = (1/NM) sum_{n,n',m,m'}
//       C((n-n')T - tau, (m-m')df - nu)
//       e^{j2pi n'T nu} e^{-j2pi m df tau}
//       e^{j2pi(n'k'/N - m'l'/M)} e^{-j2pi(nk/N - ml/M)}
//
// with C the pulse cross ambiguity.  Rows/columns use the dd = k*M + l
// layout of otfs.hpp.  Rather than evaluating the quadruple sum per entry,
// the matrix is factored as Psi = W_r * K * W_c where W_c / W_r are the
// separable Fourier kernels of the transform pair and K is the
// time-frequency coupling kernel, which for a duration-T pulse is banded:
// only n - n' in {floor(tau/T), floor(tau/T)+1} give overlapping pulses.
// This yields O(NM(N+M)) per matrix-vector product.
//
// psi_approx implements the factored approximation obtained by sampling the
// ambiguity integral at the M delay taps of one symbol: with
// l_tau = ceil(tau * M * df),
//
//   PsiBar[(k,l),(k',l')] = (1/NM) * SN(k'-k, nu) * e^{j2pi nu l'/(M df)}
//                           * isi(k',l') * SM(l-l', tau)
//   SN(d, nu)  = sum_{n'=0}^{N-1} e^{j2pi (d + nu N T) n'/N}
//   SM(d, tau) = sum_{m'=0}^{M-1} e^{j2pi (d - tau M df) m'/M}
//   isi        = e^{-j2pi(nu T + k'/N)} when l' >= M - l_tau (inter-symbol
//                leakage from the previous pulse), else 1.
//
// At (nu, tau) = (0, 0) both Psi and PsiBar reduce to the identity.  The
// tau/nu partial derivatives of PsiBar (needed by the Fisher information
// forms) treat l_tau as locally constant, which is valid away from the
// measure-zero set where tau crosses a delay-tap boundary.
//
// PsiBar's single ICI/ISI case split encodes leakage into the immediately
// preceding symbol only, so it requires tau < T (delay spread within one
// symbol); psi_exact carries no such restriction.  The approximation error
// concentrates on the ISI columns, whose small exact norms make the relative
// gap O(1) there; over ICI columns it decays as the grid grows (measured in
// the tests).
#pragma once

#include "otfsradar/otfs.hpp"
#include "otfsradar/pulse.hpp"
#include <memory>
#include <map>
#include <utility>
#include <vector>

namespace otfsradar {

namespace detail {

// Separable Fourier maps between the Doppler-delay and time-frequency
// layouts: sign_dop/sign_del are the exponent signs on the Doppler and delay
// axes.
inline VectorXcd axis_transform(const OtfsConfig& cfg, const VectorXcd& in,
                                int sign_dop, int sign_del) {
    const int N = cfg.N, M = cfg.M;
    MatrixXcd t(N, M);
    for (int a = 0; a < N; ++a)
        for (int b = 0; b < M; ++b) {
            cplx acc = 0.0;
            for (int l = 0; l < M; ++l)
                acc += in[a * M + l] * expj(sign_del * 2.0 * kPi * double(b) * l / M);
            t(a, b) = acc;
        }
    VectorXcd out(N * M);
    for (int a = 0; a < N; ++a)
        for (int b = 0; b < M; ++b) {
            cplx acc = 0.0;
            for (int k = 0; k < N; ++k)
                acc += t(k, b) * expj(sign_dop * 2.0 * kPi * double(a) * k / N);
            out[a * M + b] = acc;
        }
    return out;
}

} // namespace detail

inline void check_crosstalk_domain(const OtfsConfig& cfg, double nu, double tau) {
    if (tau < 0.0 || tau >= cfg.N * cfg.T)
        throw ConfigError("crosstalk: tau must lie in [0, N*T)");
    if (std::abs(nu) >= cfg.M * cfg.delta_f)
        throw ConfigError("crosstalk: |nu| must be below M*delta_f");
}

// One (nu, tau) point of the exact crosstalk map, applicable matrix-free.
class PsiOperator {
public:
    PsiOperator(const OtfsConfig& cfg, Pulse pulse, double nu, double tau)
        : cfg_(cfg), nu_(nu), tau_(tau) {
        check_crosstalk_domain(cfg, nu, tau);
        const int M = cfg.M;
        const int d0 = static_cast<int>(std::floor(tau / cfg.T));
        for (int d : {d0, d0 + 1}) {
            if (d < -(cfg.N - 1) || d > cfg.N - 1) continue;
            std::vector<cplx> band(2 * M - 1);
            bool nonzero = false;
            for (int dm = -(M - 1); dm <= M - 1; ++dm) {
                cplx c = cross_ambiguity(pulse, cfg.T, d * cfg.T - tau,
                                         dm * cfg.delta_f - nu);
                band[dm + M - 1] = c;
                nonzero = nonzero || (std::abs(c) > 0.0);
            }
            if (nonzero) {
                deltas_.push_back(d);
                bands_.push_back(std::move(band));
            }
        }
    }

    double nu() const { return nu_; }
    double tau() const { return tau_; }
    const OtfsConfig& config() const { return cfg_; }

    // u = W_c x: Doppler-delay frame lifted to the time-frequency kernel's
    // input side.  Reusable across (nu, tau) points for a fixed frame.
    VectorXcd lift(const VectorXcd& x_dd) const {
        return detail::axis_transform(cfg_, x_dd, +1, -1);
    }

    // Psi x given u = lift(x).
    VectorXcd apply_lifted(const VectorXcd& u_tf) const {
        const int N = cfg_.N, M = cfg_.M;
        VectorXcd v = VectorXcd::Zero(N * M);
        for (size_t bi = 0; bi < deltas_.size(); ++bi) {
            const int d = deltas_[bi];
            const auto& band = bands_[bi];
            for (int n = 0; n < N; ++n) {
                const int np = n - d;
                if (np < 0 || np >= N) continue;
                const cplx dop_phase = expj(2.0 * kPi * np * cfg_.T * nu_);
                for (int m = 0; m < M; ++m) {
                    cplx acc = 0.0;
                    for (int mp = 0; mp < M; ++mp)
                        acc += band[m - mp + M - 1] * u_tf[np * M + mp];
                    v[n * M + m] += dop_phase * acc;
                }
            }
        }
        for (int n = 0; n < N; ++n)
            for (int m = 0; m < M; ++m)
                v[n * M + m] *= expj(-2.0 * kPi * m * cfg_.delta_f * tau_);
        return detail::axis_transform(cfg_, v, -1, +1) / double(N * M);
    }

    VectorXcd apply(const VectorXcd& x_dd) const { return apply_lifted(lift(x_dd)); }

    // Materialized NM x NM matrix (columns are applications to unit vectors).
    MatrixXcd dense() const {
        const int S = cfg_.grid_size();
        MatrixXcd out(S, S);
        VectorXcd e = VectorXcd::Zero(S);
        for (int j = 0; j < S; ++j) {
            e[j] = 1.0;
            out.col(j) = apply(e);
            e[j] = 0.0;
        }
        return out;
    }

private:
    OtfsConfig cfg_;
    double nu_, tau_;
    std::vector<int> deltas_;
    std::vector<std::vector<cplx>> bands_; // ambiguity values per (n-n') band, indexed dm+M-1
};

inline MatrixXcd psi_exact(const OtfsConfig& cfg, Pulse pulse, double nu, double tau) {
    return PsiOperator(cfg, pulse, nu, tau).dense();
}

struct CrosstalkApprox {
    MatrixXcd psi;       // PsiBar
    MatrixXcd dpsi_dtau; // elementwise d/dtau
    MatrixXcd dpsi_dnu;  // elementwise d/dnu
};

// PsiBar and its closed-form tau/nu derivatives (see file header).
inline CrosstalkApprox psi_approx_with_derivatives(const OtfsConfig& cfg,
                                                   double nu, double tau) {
    check_crosstalk_domain(cfg, nu, tau);
    if (tau >= cfg.T)
        throw ConfigError("psi_approx: delay spread must stay within one symbol "
                          "(tau < T)");
    const int N = cfg.N, M = cfg.M;
    const double T = cfg.T, df = cfg.delta_f;
    const int l_tau = static_cast<int>(std::ceil(tau * M * df - 1e-12));

    // Doppler-axis geometric sums over n' and their n'-weighted versions.
    std::vector<cplx> SN(2 * N - 1), SN1(2 * N - 1);
    for (int d = -(N - 1); d <= N - 1; ++d) {
        const double a = (d + nu * N * T) / N;
        cplx s0 = 0.0, s1 = 0.0;
        for (int np = 0; np < N; ++np) {
            cplx w = expj(2.0 * kPi * a * np);
            s0 += w;
            s1 += double(np) * w;
        }
        SN[d + N - 1] = s0;
        SN1[d + N - 1] = s1;
    }
    // Delay-axis sums over m'.
    std::vector<cplx> SM(2 * M - 1), SM1(2 * M - 1);
    for (int d = -(M - 1); d <= M - 1; ++d) {
        const double a = (d - tau * M * df) / M;
        cplx s0 = 0.0, s1 = 0.0;
        for (int mp = 0; mp < M; ++mp) {
            cplx w = expj(2.0 * kPi * a * mp);
            s0 += w;
            s1 += double(mp) * w;
        }
        SM[d + M - 1] = s0;
        SM1[d + M - 1] = s1;
    }

    const int S = N * M;
    CrosstalkApprox out{MatrixXcd(S, S), MatrixXcd(S, S), MatrixXcd(S, S)};
    const double inv = 1.0 / S;
    for (int kp = 0; kp < N; ++kp) {
        for (int lp = 0; lp < M; ++lp) {
            const bool isi = (lp >= M - l_tau);
            // nu-dependent column phase, incl. the previous-symbol ISI factor
            const double g = isi ? (lp / (M * df) - T) : (lp / (M * df));
            cplx col_phase = expj(2.0 * kPi * nu * lp / (M * df));
            if (isi) col_phase *= expj(-2.0 * kPi * (nu * T + double(kp) / N));
            const int col = kp * M + lp;
            for (int k = 0; k < N; ++k) {
                const cplx sn = SN[kp - k + N - 1];
                const cplx dsn = kJ * 2.0 * kPi * T * SN1[kp - k + N - 1];
                for (int l = 0; l < M; ++l) {
                    const cplx sm = SM[l - lp + M - 1];
                    const cplx dsm = -kJ * 2.0 * kPi * df * SM1[l - lp + M - 1];
                    const cplx base = inv * col_phase;
                    const int row = k * M + l;
                    out.psi(row, col) = base * sn * sm;
                    out.dpsi_dtau(row, col) = base * sn * dsm;
                    out.dpsi_dnu(row, col) =
                        base * (dsn * sm + kJ * 2.0 * kPi * g * sn * sm);
                }
            }
        }
    }
    return out;
}

inline MatrixXcd psi_approx(const OtfsConfig& cfg, double nu, double tau) {
    return psi_approx_with_derivatives(cfg, nu, tau).psi;
}

// Memoized PsiOperator lookup with (nu, tau) quantized to the detector's fine
// search lattice, so repeated hypotheses across blocks/trials share work.
// Not thread-safe by design: each worker owns its cache.
class PsiCache {
public:
    PsiCache(const OtfsConfig& cfg, Pulse pulse, double nu_quantum, double tau_quantum)
        : cfg_(cfg), pulse_(pulse), qnu_(nu_quantum), qtau_(tau_quantum) {
        if (qnu_ <= 0.0 || qtau_ <= 0.0)
            throw ConfigError("PsiCache: quantization steps must be positive");
    }

    double quantize_nu(double nu) const { return std::llround(nu / qnu_) * qnu_; }
    double quantize_tau(double tau) const { return std::llround(tau / qtau_) * qtau_; }

    const PsiOperator& get(double nu, double tau) {
        const std::pair<int64_t, int64_t> key{std::llround(nu / qnu_),
                                              std::llround(tau / qtau_)};
        auto it = map_.find(key);
        if (it == map_.end()) {
            auto op = std::make_unique<PsiOperator>(cfg_, pulse_, key.first * qnu_,
                                                    key.second * qtau_);
            it = map_.emplace(key, std::move(op)).first;
        }
        return *it->second;
    }

    size_t size() const { return map_.size(); }
    void clear() { map_.clear(); }

private:
    OtfsConfig cfg_;
    Pulse pulse_;
    double qnu_, qtau_;
    std::map<std::pair<int64_t, int64_t>, std::unique_ptr<PsiOperator>> map_;
};

} // namespace otfsradar
