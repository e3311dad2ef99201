#pragma once

// Accuracy bounds for single-target parameter estimation.
//
// A target illuminated by one transmit beam and observed through per-block
// reduction matrices is described by five real parameters: gain amplitude and
// phase, angle of arrival, delay, and Doppler shift.  This header provides
//
//   * the mean received signal under the factored crosstalk approximation
//     (psi_approx_with_derivatives) together with its closed-form sensitivity
//     to each of the five parameters,
//   * the 5x5 information matrix those sensitivities induce in additive white
//     Gaussian noise, with two independent paths for the expectation over the
//     transmitted symbols: a closed form using the i.i.d. symbol second
//     moments, and a Monte Carlo average over explicit symbol draws,
//   * parameter variance lower bounds (diagonal of the inverse information
//     matrix) with a condition-number guard, and
//   * a comparison table of those bounds across receive-combining strategies,
//     including a fully digital single-block reference.
//
// Index order everywhere is (amplitude, phase, angle, delay, Doppler).
// Assembly sums run in a fixed order (blocks outermost), so results are
// reproducible bit-for-bit; all inputs are immutable.

#include <array>
#include <cmath>
#include <cstdint>
#include <sstream>
#include <string>
#include <vector>

#include "otfsradar/beams.hpp"
#include "otfsradar/channel.hpp"

namespace otfsradar {

enum FisherIndex : int {
    kFisherAmp = 0,
    kFisherPhase = 1,
    kFisherAoa = 2,
    kFisherDelay = 3,
    kFisherDoppler = 4,
};

inline constexpr std::array<const char*, 5> kFisherParamNames = {
    "amp", "phase", "aoa", "delay", "doppler"};

using FisherMatrix = Eigen::Matrix<double, 5, 5>;
using FisherVector = Eigen::Matrix<double, 5, 1>;

// Real parametrization of a single propagation path: h = amp * e^{j phase}.
struct ParamVector {
    double amp = 0.0;        // |h|, nonnegative
    double phase_rad = 0.0;  // angle of h
    double tau_s = 0.0;      // round-trip delay
    double nu_hz = 0.0;      // Doppler shift
    double phi_rad = 0.0;    // angle of arrival

    cplx gain() const { return std::polar(amp, phase_rad); }

    void validate() const {
        if (!(amp >= 0.0) || !std::isfinite(amp))
            throw ConfigError("ParamVector: amplitude must be finite and nonnegative");
        if (std::abs(phi_rad) > kPi / 2.0 + 1e-12)
            throw ConfigError("ParamVector: angle of arrival must lie in [-pi/2, pi/2]");
    }
};

// Antisymmetric index-offset matrix with entries m - m'; multiplying the
// steering outer product elementwise by it produces the angle sensitivity of
// a(phi) a(phi)^H for a uniform linear array.
inline Eigen::MatrixXd difference_matrix(int num_antennas) {
    if (num_antennas < 1)
        throw ConfigError("difference_matrix: need at least one antenna");
    Eigen::MatrixXd b(num_antennas, num_antennas);
    for (int m = 0; m < num_antennas; ++m)
        for (int mp = 0; mp < num_antennas; ++mp)
            b(m, mp) = static_cast<double>(m - mp);
    return b;
}

// Chain response of a unit scatterer at phi: U_b^H a(phi) * (a(phi)^H f).
inline VectorXcd chain_coupling(const MatrixXcd& reduction_b,
                                const VectorXcd& beam, double phi) {
    if (beam.size() != reduction_b.rows())
        throw ConfigError("chain_coupling: beam length must match the antenna count");
    const VectorXcd a = steering_vector(phi, static_cast<int>(reduction_b.rows()));
    return (reduction_b.adjoint() * a) * a.dot(beam);
}

// Angle sensitivity of the chain response without the j*pi*cos(phi) prefactor:
// U_b^H [(a a^H) elementwise* difference_matrix] f, evaluated via the
// equivalent form D a (a^H f) - a (a^H D f) with D = diag(0..N_a-1).
inline VectorXcd chain_coupling_angle_derivative(const MatrixXcd& reduction_b,
                                                 const VectorXcd& beam,
                                                 double phi) {
    if (beam.size() != reduction_b.rows())
        throw ConfigError("chain_coupling: beam length must match the antenna count");
    const int na = static_cast<int>(reduction_b.rows());
    const VectorXcd a = steering_vector(phi, na);
    VectorXcd da(na);
    for (int n = 0; n < na; ++n) da[n] = static_cast<double>(n) * a[n];
    const VectorXcd g = da * a.dot(beam) - a * da.dot(beam);
    return reduction_b.adjoint() * g;
}

namespace detail {

inline void check_signal_shapes(const CrosstalkApprox& xtalk,
                                const MatrixXcd& reduction_b,
                                const VectorXcd& beam,
                                const VectorXcd& dd_symbols) {
    if (dd_symbols.size() != xtalk.psi.cols())
        throw ConfigError("signal_mean: symbol vector must cover the full grid");
    if (beam.size() != reduction_b.rows())
        throw ConfigError("signal_mean: beam length must match the antenna count");
}

}  // namespace detail

// Mean received block under the factored crosstalk approximation: one row per
// Doppler-delay bin, one column per receive chain.
inline MatrixXcd signal_mean(const ParamVector& theta,
                             const CrosstalkApprox& xtalk,
                             const MatrixXcd& reduction_b,
                             const VectorXcd& beam,
                             const VectorXcd& dd_symbols) {
    theta.validate();
    detail::check_signal_shapes(xtalk, reduction_b, beam, dd_symbols);
    const cplx rot = std::polar(theta.amp, theta.phase_rad);
    const VectorXcd c = chain_coupling(reduction_b, beam, theta.phi_rad);
    return rot * (xtalk.psi * dd_symbols) * c.transpose();
}

inline MatrixXcd signal_mean(const ParamVector& theta, const OtfsConfig& cfg,
                             const MatrixXcd& reduction_b,
                             const VectorXcd& beam,
                             const VectorXcd& dd_symbols) {
    return signal_mean(theta, psi_approx_with_derivatives(cfg, theta.nu_hz, theta.tau_s),
                       reduction_b, beam, dd_symbols);
}

// The five sensitivity directions of signal_mean in fixed index order.
struct SignalDerivatives {
    std::array<MatrixXcd, 5> wrt;
};

inline SignalDerivatives signal_derivatives(const ParamVector& theta,
                                            const CrosstalkApprox& xtalk,
                                            const MatrixXcd& reduction_b,
                                            const VectorXcd& beam,
                                            const VectorXcd& dd_symbols) {
    theta.validate();
    detail::check_signal_shapes(xtalk, reduction_b, beam, dd_symbols);
    const cplx unit_rot = std::polar(1.0, theta.phase_rad);
    const cplx rot = theta.amp * unit_rot;
    const VectorXcd c = chain_coupling(reduction_b, beam, theta.phi_rad);
    const VectorXcd cb =
        chain_coupling_angle_derivative(reduction_b, beam, theta.phi_rad);
    const VectorXcd zx = xtalk.psi * dd_symbols;

    SignalDerivatives out;
    out.wrt[kFisherAmp] = unit_rot * zx * c.transpose();
    out.wrt[kFisherPhase] = (kJ * rot) * zx * c.transpose();
    out.wrt[kFisherAoa] =
        (kJ * kPi * std::cos(theta.phi_rad) * rot) * zx * cb.transpose();
    out.wrt[kFisherDelay] = rot * (xtalk.dpsi_dtau * dd_symbols) * c.transpose();
    out.wrt[kFisherDoppler] = rot * (xtalk.dpsi_dnu * dd_symbols) * c.transpose();
    return out;
}

inline SignalDerivatives signal_derivatives(const ParamVector& theta,
                                            const OtfsConfig& cfg,
                                            const MatrixXcd& reduction_b,
                                            const VectorXcd& beam,
                                            const VectorXcd& dd_symbols) {
    return signal_derivatives(theta,
                              psi_approx_with_derivatives(cfg, theta.nu_hz, theta.tau_s),
                              reduction_b, beam, dd_symbols);
}

namespace detail {

inline void check_fisher_inputs(const ParamVector& theta,
                                const std::vector<MatrixXcd>& reduction,
                                const VectorXcd& beam,
                                double avg_symbol_power_w,
                                double noise_power_w) {
    theta.validate();
    if (!(theta.amp > 0.0))
        throw ConfigError(
            "fisher_matrix: amplitude must be positive (zero gain leaves the "
            "phase unidentifiable)");
    if (!(noise_power_w > 0.0))
        throw ConfigError("fisher_matrix: noise power must be positive");
    if (!(avg_symbol_power_w > 0.0))
        throw ConfigError("fisher_matrix: symbol power must be positive");
    if (reduction.empty())
        throw ConfigError("fisher_matrix: need at least one block");
    for (const auto& u : reduction)
        if (u.rows() != beam.size())
            throw ConfigError(
                "fisher_matrix: reduction rows must match the antenna count");
}

// Scalar prefactor of each sensitivity direction; the matrix part is one of
// {psi, dpsi_dtau, dpsi_dnu} selected by kOperatorSlot.
inline std::array<cplx, 5> sensitivity_prefactors(const ParamVector& theta) {
    const cplx unit_rot = std::polar(1.0, theta.phase_rad);
    const cplx rot = theta.amp * unit_rot;
    return {unit_rot, kJ * rot, kJ * kPi * std::cos(theta.phi_rad) * rot, rot,
            rot};
}

inline constexpr std::array<int, 5> kOperatorSlot = {0, 0, 0, 1, 2};

inline cplx frobenius_inner(const MatrixXcd& a, const MatrixXcd& b) {
    return (a.conjugate().cwiseProduct(b)).sum();
}

}  // namespace detail

// Information matrix via the closed-form expectation over i.i.d. zero-mean
// symbols with per-bin power avg_symbol_power_w.  Every sensitivity direction
// factors into (scalar) * (operator * symbols) * (chain vector)^T, so the
// expected cross-products reduce to operator Frobenius inner products times
// per-block chain couplings.
inline FisherMatrix fisher_matrix(const ParamVector& theta, const OtfsConfig& cfg,
                                  const std::vector<MatrixXcd>& reduction,
                                  const VectorXcd& beam,
                                  double avg_symbol_power_w,
                                  double noise_power_w) {
    detail::check_fisher_inputs(theta, reduction, beam, avg_symbol_power_w,
                                noise_power_w);
    const CrosstalkApprox xt =
        psi_approx_with_derivatives(cfg, theta.nu_hz, theta.tau_s);
    const MatrixXcd* ops[3] = {&xt.psi, &xt.dpsi_dtau, &xt.dpsi_dnu};
    cplx op_inner[3][3];
    for (int i = 0; i < 3; ++i)
        for (int j = i; j < 3; ++j) {
            op_inner[i][j] = detail::frobenius_inner(*ops[i], *ops[j]);
            op_inner[j][i] = std::conj(op_inner[i][j]);
        }

    // Per-axis chain vectors summed over blocks as pairwise inner products.
    cplx coupling_sum[2][2] = {{0.0, 0.0}, {0.0, 0.0}};  // slots: 0=c, 1=cb
    for (const auto& u : reduction) {
        const VectorXcd c = chain_coupling(u, beam, theta.phi_rad);
        const VectorXcd cb =
            chain_coupling_angle_derivative(u, beam, theta.phi_rad);
        const VectorXcd* v[2] = {&c, &cb};
        for (int i = 0; i < 2; ++i)
            for (int j = 0; j < 2; ++j)
                coupling_sum[i][j] += v[i]->dot(*v[j]);
    }
    const auto pre = detail::sensitivity_prefactors(theta);
    const auto chain_slot = [](int axis) { return axis == kFisherAoa ? 1 : 0; };

    FisherMatrix fim;
    const double scale = 2.0 * avg_symbol_power_w / noise_power_w;
    for (int i = 0; i < 5; ++i)
        for (int j = i; j < 5; ++j) {
            const cplx value =
                std::conj(pre[i]) * pre[j] *
                coupling_sum[chain_slot(i)][chain_slot(j)] *
                op_inner[detail::kOperatorSlot[i]][detail::kOperatorSlot[j]];
            fim(i, j) = scale * value.real();
            fim(j, i) = fim(i, j);
        }
    return fim;
}

// Validation path for the symbol expectation: averages the exact per-draw
// cross-products of the sensitivity matrices over explicit unit-modulus
// symbol draws (independent per block), agreeing with the closed form up to
// Monte Carlo error.
inline FisherMatrix fisher_matrix_mc(const ParamVector& theta,
                                     const OtfsConfig& cfg,
                                     const std::vector<MatrixXcd>& reduction,
                                     const VectorXcd& beam,
                                     double avg_symbol_power_w,
                                     double noise_power_w, int trials,
                                     uint64_t seed) {
    detail::check_fisher_inputs(theta, reduction, beam, avg_symbol_power_w,
                                noise_power_w);
    if (trials < 1)
        throw ConfigError("fisher_matrix_mc: need at least one symbol draw");
    const CrosstalkApprox xt =
        psi_approx_with_derivatives(cfg, theta.nu_hz, theta.tau_s);

    FisherMatrix acc = FisherMatrix::Zero();
    for (int t = 0; t < trials; ++t) {
        for (size_t b = 0; b < reduction.size(); ++b) {
            const VectorXcd x =
                generate_symbols(cfg, 1, avg_symbol_power_w,
                                 derive_seed(seed, static_cast<uint64_t>(t),
                                             static_cast<uint64_t>(b)))
                    .col(0);
            const SignalDerivatives d =
                signal_derivatives(theta, xt, reduction[b], beam, x);
            for (int i = 0; i < 5; ++i)
                for (int j = i; j < 5; ++j) {
                    const double value =
                        detail::frobenius_inner(d.wrt[i], d.wrt[j]).real();
                    acc(i, j) += value;
                    acc(j, i) = acc(i, j);
                }
        }
    }
    return (2.0 / noise_power_w) * acc / static_cast<double>(trials);
}

inline constexpr double kMaxFisherCondition = 1e12;

// Diagonal of the inverse information matrix: the per-parameter variance
// floor.  The five parameters carry wildly different physical units (delay
// sensitivities in 1/s^2 dwarf Doppler sensitivities in 1/Hz^2), so the
// matrix is first equilibrated to unit diagonal; the condition cap applies to
// that dimensionless matrix, which measures intrinsic parameter coupling
// rather than unit mismatch.  Rejects singular or badly conditioned matrices
// with a report.
inline FisherVector crlb(const FisherMatrix& fim,
                         double max_condition = kMaxFisherCondition) {
    const FisherMatrix sym = 0.5 * (fim + fim.transpose());
    FisherVector diag;
    for (int i = 0; i < 5; ++i) {
        diag[i] = sym(i, i);
        if (!(diag[i] > 0.0)) {
            std::ostringstream msg;
            msg << "crlb: information matrix is singular (diagonal entry for "
                << kFisherParamNames[static_cast<size_t>(i)]
                << " is " << diag[i] << ")";
            throw ConfigError(msg.str());
        }
    }
    const FisherVector inv_scale = diag.cwiseSqrt().cwiseInverse();
    const FisherMatrix eq =
        inv_scale.asDiagonal() * sym * inv_scale.asDiagonal();
    Eigen::SelfAdjointEigenSolver<FisherMatrix> es(eq);
    const FisherVector evals = es.eigenvalues();
    const double lmax = evals.maxCoeff();
    const double lmin = evals.minCoeff();
    if (!(lmin > 0.0)) {
        std::ostringstream msg;
        msg << "crlb: information matrix is singular or indefinite (minimum "
               "eigenvalue "
            << lmin << " after unit-diagonal scaling)";
        throw ConfigError(msg.str());
    }
    const double condition = lmax / lmin;
    if (condition > max_condition) {
        std::ostringstream msg;
        msg << "crlb: information matrix condition number " << condition
            << " (after unit-diagonal scaling) exceeds the cap "
            << max_condition;
        throw ConfigError(msg.str());
    }
    const Eigen::Matrix<double, 5, 5>& v = es.eigenvectors();
    FisherVector variances;
    for (int i = 0; i < 5; ++i) {
        double s = 0.0;
        for (int k = 0; k < 5; ++k) s += v(i, k) * v(i, k) / evals[k];
        variances[i] = s * inv_scale[i] * inv_scale[i];
    }
    return variances;
}

// One row of the strategy comparison: variance floors for a named
// receive-combining schedule.
struct StrategyCrlb {
    std::string name;
    int num_blocks = 0;
    FisherVector variances;
};

// Variance floors per strategy at a common operating point, with an optional
// fully digital single-block reference (identity combining, one chain per
// antenna) appended last.  All schedules must share the block count, antenna
// count, and chain count.
inline std::vector<StrategyCrlb> compare_strategies(
    const ParamVector& theta, const OtfsConfig& cfg,
    const std::vector<ReductionSchedule>& strategies, const VectorXcd& beam,
    double avg_symbol_power_w, double noise_power_w,
    bool include_fully_digital = true,
    double max_condition = kMaxFisherCondition) {
    if (strategies.empty())
        throw ConfigError("compare_strategies: need at least one schedule");
    const int blocks = strategies.front().blocks();
    const auto& first = strategies.front().matrices;
    if (blocks < 1 || first.empty())
        throw ConfigError("compare_strategies: schedules must have blocks");
    for (const auto& s : strategies) {
        if (s.blocks() != blocks)
            throw ConfigError(
                "compare_strategies: schedules must share the block count");
        for (const auto& u : s.matrices)
            if (u.rows() != beam.size() || u.cols() != first.front().cols())
                throw ConfigError(
                    "compare_strategies: schedules must share the antenna and "
                    "chain counts");
    }

    std::vector<StrategyCrlb> table;
    for (const auto& s : strategies) {
        StrategyCrlb row;
        row.name = to_string(s.strategy);
        row.num_blocks = blocks;
        row.variances = crlb(fisher_matrix(theta, cfg, s.matrices, beam,
                                           avg_symbol_power_w, noise_power_w),
                             max_condition);
        table.push_back(std::move(row));
    }
    if (include_fully_digital) {
        const int na = static_cast<int>(beam.size());
        StrategyCrlb row;
        row.name = "fully_digital";
        row.num_blocks = 1;
        const std::vector<MatrixXcd> identity{MatrixXcd::Identity(na, na)};
        row.variances = crlb(fisher_matrix(theta, cfg, identity, beam,
                                           avg_symbol_power_w, noise_power_w),
                             max_condition);
        table.push_back(std::move(row));
    }
    return table;
}

}  // namespace otfsradar
