// Blocked beam-space backscatter channel.
//
// A sensing frame spans B blocks.  In block b the transmitter sends the
// Doppler-delay payload X_b (NM x N_s, one column per stream) through beams
// F (N_a x N_s) and the receiver reduces N_a antennas to N_rf chains with
// U_b (N_a x N_rf).  A point target (gain h, Doppler nu, delay tau, angle
// phi) contributes
//
//   Y_b = h * Psi(nu,tau) X_b (U_b^H a(phi) a(phi)^H F)^T + W_b
//
// where Y_b is NM x N_rf (one column per chain) and W_b has i.i.d.
// CN(0, sigma_w^2) entries.  Equivalently, stacking streams/chains into
// long vectors, the block channel is the Kronecker product
// (U_b^H a a^H F) (x) Psi acting on the stream-major stacked payload.
#pragma once

#include "otfsradar/array.hpp"
#include "otfsradar/crosstalk.hpp"

namespace otfsradar {

struct Target {
    cplx gain;      // two-way complex gain, incl. the e^{j2pi nu tau} fold
    double nu_hz;   // Doppler shift
    double tau_s;   // two-way delay
    double phi_rad; // angle of arrival

    Target(cplx gain_, double nu, double tau, double phi, const OtfsConfig& cfg)
        : gain(gain_), nu_hz(nu), tau_s(tau), phi_rad(phi) {
        if (tau < 0.0 || tau >= cfg.N * cfg.T)
            throw ConfigError("Target: delay outside the unambiguous span [0, N*T)");
        if (std::abs(nu) >= cfg.delta_f / 2.0)
            throw ConfigError("Target: |Doppler| must stay below delta_f/2");
        if (phi < -kPi / 2.0 || phi > kPi / 2.0)
            throw ConfigError("Target: angle outside [-pi/2, pi/2]");
    }
};

// Physical-parameter constructor: range/speed mapped through the link budget
// (nu = 2 v f_c / c, tau = 2 r / c), gain drawn via gain_from_range and
// rotated by the nu*tau fold.
inline Target make_target(const LinkBudget& link, const OtfsConfig& cfg,
                          double range_m, double speed_mps, double phi_rad, Rng& rng) {
    const double nu = 2.0 * speed_mps * link.carrier_hz / kSpeedOfLight;
    const double tau = 2.0 * range_m / kSpeedOfLight;
    const cplx h = gain_from_range(link, range_m, rng) * expj(2.0 * kPi * nu * tau);
    return Target(h, nu, tau, phi_rad, cfg);
}

// Static configuration of one sensing frame.
struct Scene {
    OtfsConfig otfs;
    Pulse pulse = Pulse::Rectangular;
    int num_antennas = 16;
    LinkBudget link;
    MatrixXcd tx_beams;                  // N_a x N_s
    std::vector<MatrixXcd> reduction;    // B matrices, each N_a x N_rf

    int num_blocks() const { return static_cast<int>(reduction.size()); }
    int num_streams() const { return static_cast<int>(tx_beams.cols()); }
    int num_chains() const {
        return reduction.empty() ? 0 : static_cast<int>(reduction.front().cols());
    }

    void validate() const {
        otfs.validate();
        link.validate();
        if (num_antennas < 1) throw ConfigError("Scene: num_antennas must be positive");
        if (tx_beams.rows() != num_antennas)
            throw ConfigError("Scene: tx_beams must have num_antennas rows");
        if (reduction.empty())
            throw ConfigError("Scene: need at least one block");
        for (const auto& U : reduction)
            if (U.rows() != num_antennas || U.cols() < 1)
                throw ConfigError("Scene: reduction matrices must be num_antennas x N_rf");
    }

    // Beam-space coupling U_b^H a(phi) a(phi)^H F for one block.
    MatrixXcd coupling(int b, double phi) const {
        const VectorXcd a = steering_vector(phi, num_antennas);
        const VectorXcd ua = reduction[b].adjoint() * a;      // N_rf
        const Eigen::RowVectorXcd af = a.adjoint() * tx_beams; // 1 x N_s
        return ua * af;
    }
};

// One block's effective channel at a parameter hypothesis; applies
// (U_b^H a a^H F) (x) Psi without materializing the Kronecker product.
class EffectiveChannel {
public:
    EffectiveChannel(const Scene& scene, int block, const PsiOperator& psi, double phi)
        : coupling_(scene.coupling(block, phi)), psi_(psi) {}

    // X: NM x N_s payload -> NM x N_rf received layout.
    MatrixXcd apply(const MatrixXcd& x) const {
        MatrixXcd zx(x.rows(), x.cols());
        for (int s = 0; s < x.cols(); ++s)
            zx.col(s) = psi_.apply(x.col(s));
        return zx * coupling_.transpose();
    }

    // Stacked form: input stream-major (len N_s*NM), output chain-major
    // (len N_rf*NM); matches the Kronecker convention above.
    VectorXcd apply_vec(const VectorXcd& x_stacked) const {
        const int S = static_cast<int>(psi_.config().grid_size());
        const int Ns = static_cast<int>(coupling_.cols());
        if (x_stacked.size() != Ns * S)
            throw ConfigError("EffectiveChannel: stacked payload has wrong length");
        MatrixXcd X(S, Ns);
        for (int s = 0; s < Ns; ++s) X.col(s) = x_stacked.segment(s * S, S);
        MatrixXcd Y = apply(X);
        VectorXcd y(Y.cols() * S);
        for (int c = 0; c < Y.cols(); ++c) y.segment(c * S, S) = Y.col(c);
        return y;
    }

    // Materialized (N_rf*NM) x (N_s*NM) Kronecker product; for small grids.
    MatrixXcd dense() const {
        const MatrixXcd P = psi_.dense();
        const int S = static_cast<int>(P.rows());
        MatrixXcd G(coupling_.rows() * S, coupling_.cols() * S);
        for (int i = 0; i < coupling_.rows(); ++i)
            for (int j = 0; j < coupling_.cols(); ++j)
                G.block(i * S, j * S, S, S) = coupling_(i, j) * P;
        return G;
    }

    const MatrixXcd& coupling() const { return coupling_; }

private:
    MatrixXcd coupling_;
    const PsiOperator& psi_;
};

// Superimpose all targets and add receiver noise:
//   Y_b = sum_p h_p Psi_p X_b C_{b,p}^T + W_b.
// Noise entries are drawn row-major per block from `noise_rng` so the byte
// layout of a run is independent of internal evaluation order.
inline std::vector<MatrixXcd> simulate_rx(const Scene& scene,
                                          const std::vector<Target>& targets,
                                          const std::vector<MatrixXcd>& payload,
                                          Rng& noise_rng) {
    const int B = scene.num_blocks();
    if (static_cast<int>(payload.size()) != B)
        throw ConfigError("simulate_rx: need one payload matrix per block");
    const int S = scene.otfs.grid_size();
    const int Nrf = scene.num_chains();
    const double sigma2 = scene.link.noise_power();

    std::vector<PsiOperator> psis;
    psis.reserve(targets.size());
    for (const auto& t : targets)
        psis.emplace_back(scene.otfs, scene.pulse, t.nu_hz, t.tau_s);

    std::vector<MatrixXcd> out(B);
    for (int b = 0; b < B; ++b) {
        if (payload[b].rows() != S || payload[b].cols() != scene.num_streams())
            throw ConfigError("simulate_rx: payload block has wrong shape");
        MatrixXcd Y = MatrixXcd::Zero(S, Nrf);
        for (size_t p = 0; p < targets.size(); ++p) {
            MatrixXcd zx(S, payload[b].cols());
            for (int s = 0; s < payload[b].cols(); ++s)
                zx.col(s) = psis[p].apply(payload[b].col(s));
            const MatrixXcd C = scene.coupling(static_cast<int>(b), targets[p].phi_rad);
            Y += targets[p].gain * zx * C.transpose();
        }
        for (int r = 0; r < S; ++r)
            for (int c = 0; c < Nrf; ++c)
                Y(r, c) += noise_rng.cnormal(sigma2);
        out[b] = std::move(Y);
    }
    return out;
}

} // namespace otfsradar
