// Tracking-mode parameter estimation for already-connected users.
//
// Each tracked user p owns a dedicated transmit beam f_p and a known symbol
// stream x_{b,p}, and the scheduler guarantees angular isolation:
// |a^H(phi_p) f_q| is negligible against |a^H(phi_p) f_p| for q != p.  The
// received blocks then decompose into per-user rank-one slices
//
//   G_{b,p} = (U_b^H a(phi_p) a^H(phi_p) f_p) (x) Psi(nu_p, tau_p)
//
// and the maximum-likelihood machinery reduces to the correlation system
//
//   r_p     = sum_b x_{b,p}^H G_{b,p}^H y_b
//   A_{p,q} = sum_b x_{b,p}^H G_{b,p}^H G_{b,q} x_{b,q}
//
// with gain solution h = A^{-1} r and concentrated objective r^H A^{-1} r.
// Because the off-diagonal A entries average out for independent symbol
// streams, the objective separates into per-user terms
//
//   S_p(nu,tau,phi) = | sum_b y_b^H G_{b,p} x_{b,p} |^2
//                     / sum_b || G_{b,p} x_{b,p} ||^2,
//
// each maximized independently over a local fine lattice around the user's
// prior (one coarse cell per dimension, refine_factor subdivisions, with
// optional zoom stages that rerun the search around the running argmax at
// one tenth the previous spacing).  S_p is the single-target detection
// statistic of detector.hpp applied to a single-beam view of the scene, and
// is evaluated through the same code path.
//
// Per-user searches share no mutable state and may run concurrently; the
// correlation system is assembled in user order for deterministic output.
#pragma once

#include <sstream>
#include <string>
#include <vector>

#include "otfsradar/detector.hpp"

namespace otfsradar {

// Scheduler premise: amplitude leakage of any other user's beam at phi_p,
// relative to the user's own beam, may not exceed this ratio.
inline constexpr double kIsolationTol = 0.05;

// A user tracked through a sensing frame: the prior parameter estimate the
// scheduler already holds, the beam it serves the user with, and the known
// per-block symbol vectors riding on that beam.
struct TrackedUser {
    int index = 0;
    double prior_nu_hz = 0.0;
    double prior_tau_s = 0.0;
    double prior_phi_rad = 0.0;
    VectorXcd beam;                  // N_a
    std::vector<VectorXcd> symbols;  // one NM vector per block
};

// A point parameter hypothesis for one user.
struct ParamTriple {
    double nu_hz = 0.0;
    double tau_s = 0.0;
    double phi_rad = 0.0;
};

inline void validate_users(const Scene& scene,
                           const std::vector<TrackedUser>& users) {
    if (users.empty()) throw ConfigError("tracking: need at least one user");
    const int S = scene.otfs.grid_size();
    for (const auto& u : users) {
        if (u.beam.size() != scene.num_antennas)
            throw ConfigError("tracking: user beam length must match the array");
        if (static_cast<int>(u.symbols.size()) != scene.num_blocks())
            throw ConfigError("tracking: need one symbol vector per block");
        for (const auto& x : u.symbols)
            if (x.size() != S)
                throw ConfigError("tracking: symbol vectors must hold NM entries");
    }
}

// Enforces the cross-isolation premise at the users' prior angles; throws
// naming the worst offending (user, beam) pair.
inline void check_user_isolation(int num_antennas,
                                 const std::vector<TrackedUser>& users,
                                 double tol = kIsolationTol) {
    for (size_t p = 0; p < users.size(); ++p) {
        const VectorXcd a = steering_vector(users[p].prior_phi_rad, num_antennas);
        const double own = std::abs(a.dot(users[p].beam));
        for (size_t q = 0; q < users.size(); ++q) {
            if (q == p) continue;
            const double leak = std::abs(a.dot(users[q].beam));
            if (leak > tol * own) {
                std::ostringstream msg;
                msg << "tracking: beam of user " << users[q].index
                    << " leaks into user " << users[p].index
                    << " (amplitude ratio " << (own > 0.0 ? leak / own : leak)
                    << " exceeds " << tol << ")";
                throw ConfigError(msg.str());
            }
        }
    }
}

// The p-th vertical slice of the blocked channel, materialized:
// (U_b^H a(phi) a^H(phi) f_p) (x) Psi, shape (N_rf * NM) x NM with
// chain-major block rows.
inline MatrixXcd slice_channel(const MatrixXcd& U_b, const VectorXcd& f_p,
                               const PsiOperator& psi, double phi) {
    if (U_b.rows() != f_p.size())
        throw ConfigError(
            "slice_channel: reduction matrix and beam must share the antenna count");
    const VectorXcd a = steering_vector(phi, static_cast<int>(U_b.rows()));
    const VectorXcd c = (U_b.adjoint() * a) * a.dot(f_p);  // N_rf coupling
    const MatrixXcd P = psi.dense();
    const int S = static_cast<int>(P.rows());
    MatrixXcd G(c.size() * S, S);
    for (int i = 0; i < c.size(); ++i) G.middleRows(i * S, S) = c[i] * P;
    return G;
}

// Single-beam view of the scene: user p's slice statistic is the detection
// statistic of this scene with the user's own payload.
inline Scene user_scene(const Scene& scene, const TrackedUser& user) {
    Scene s = scene;
    s.tx_beams = user.beam;
    return s;
}

inline std::vector<MatrixXcd> user_payload(const TrackedUser& user) {
    std::vector<MatrixXcd> payload(user.symbols.size());
    for (size_t b = 0; b < user.symbols.size(); ++b)
        payload[b] = user.symbols[b];
    return payload;
}

// ---------------------------------------------------------------------------
// Correlation system
// ---------------------------------------------------------------------------

// r holds the per-user matched-filter outputs, A the P x P signal
// cross-correlations.  A is Hermitian by construction with a real
// nonnegative diagonal.
struct CorrelationSystem {
    VectorXcd r;
    MatrixXcd A;

    int size() const { return static_cast<int>(r.size()); }
};

inline CorrelationSystem correlations(const Scene& scene,
                                      const std::vector<MatrixXcd>& received,
                                      const std::vector<TrackedUser>& users,
                                      const std::vector<ParamTriple>& at) {
    validate_users(scene, users);
    if (static_cast<int>(received.size()) != scene.num_blocks())
        throw ConfigError("correlations: need one received block per schedule entry");
    if (at.size() != users.size())
        throw ConfigError("correlations: need one hypothesis per user");
    const int P = static_cast<int>(users.size());
    const int B = scene.num_blocks();

    // Per (user, block): slice response z = Psi_p x_{b,p} and beam coupling
    // c = (U_b^H a_p)(a_p^H f_p).
    std::vector<std::vector<VectorXcd>> z(P), c(P);
    for (int p = 0; p < P; ++p) {
        const PsiOperator psi(scene.otfs, scene.pulse, at[p].nu_hz, at[p].tau_s);
        const VectorXcd a = steering_vector(at[p].phi_rad, scene.num_antennas);
        const cplx af = a.dot(users[p].beam);
        z[p].reserve(B);
        c[p].reserve(B);
        for (int b = 0; b < B; ++b) {
            z[p].push_back(psi.apply(users[p].symbols[b]));
            c[p].push_back((scene.reduction[b].adjoint() * a) * af);
        }
    }

    CorrelationSystem cs;
    cs.r.resize(P);
    cs.A.resize(P, P);
    for (int p = 0; p < P; ++p) {
        cplx rp = 0.0;
        for (int b = 0; b < B; ++b)
            rp += (z[p][b].adjoint() * received[b] * c[p][b].conjugate()).value();
        cs.r[p] = rp;
        for (int q = p; q < P; ++q) {
            cplx apq = 0.0;
            for (int b = 0; b < B; ++b)
                apq += c[p][b].dot(c[q][b]) * z[p][b].dot(z[q][b]);
            if (q == p) {
                cs.A(p, p) = cplx(apq.real(), 0.0);
            } else {
                cs.A(p, q) = apq;
                cs.A(q, p) = std::conj(apq);
            }
        }
    }
    return cs;
}

// Hypotheses default to the users' priors.
inline CorrelationSystem correlations(const Scene& scene,
                                      const std::vector<MatrixXcd>& received,
                                      const std::vector<TrackedUser>& users) {
    std::vector<ParamTriple> at;
    at.reserve(users.size());
    for (const auto& u : users)
        at.push_back({u.prior_nu_hz, u.prior_tau_s, u.prior_phi_rad});
    return correlations(scene, received, users, at);
}

// Relative singular-value floor below which the correlation matrix is
// treated as rank deficient.
inline constexpr double kCollinearRelTol = 1e-10;

namespace detail {

// Most correlated user pair, reported when A cannot be inverted.
inline std::string collinear_pair_message(const CorrelationSystem& cs) {
    std::ostringstream msg;
    msg << "joint_gain_estimate: correlation matrix is singular";
    for (int p = 0; p < cs.size(); ++p)
        if (!(cs.A(p, p).real() > 0.0)) {
            msg << "; user " << p << " has zero signal energy";
            return msg.str();
        }
    int bi = -1, bj = -1;
    double worst = -1.0;
    for (int p = 0; p < cs.size(); ++p)
        for (int q = p + 1; q < cs.size(); ++q) {
            const double coh = std::abs(cs.A(p, q)) /
                               std::sqrt(cs.A(p, p).real() * cs.A(q, q).real());
            if (coh > worst) {
                worst = coh;
                bi = p;
                bj = q;
            }
        }
    if (bi >= 0)
        msg << "; users " << bi << " and " << bj
            << " are nearly collinear (coherence " << worst << ")";
    return msg.str();
}

}  // namespace detail

// Gain solution of the full coupled system, h = A^{-1} r.
inline VectorXcd joint_gain_estimate(const CorrelationSystem& cs) {
    if (cs.size() == 0) throw ConfigError("joint_gain_estimate: empty system");
    if (cs.A.rows() != cs.size() || cs.A.cols() != cs.size())
        throw ConfigError("joint_gain_estimate: A must be P x P");
    Eigen::JacobiSVD<MatrixXcd> svd(cs.A, Eigen::ComputeThinU | Eigen::ComputeThinV);
    const auto& sv = svd.singularValues();
    if (!(sv[0] > 0.0) || sv[sv.size() - 1] < kCollinearRelTol * sv[0])
        throw ConfigError(detail::collinear_pair_message(cs));
    return svd.solve(cs.r);
}

// Gain solution with the cross-correlations dropped, h_p = r_p / A_{pp}.
// This is the default tracking path; the coupled solve above is kept for
// validating the diagonal approximation.
inline VectorXcd joint_gain_estimate_diagonal(const CorrelationSystem& cs) {
    if (cs.size() == 0) throw ConfigError("joint_gain_estimate: empty system");
    VectorXcd h(cs.size());
    for (int p = 0; p < cs.size(); ++p) {
        const double app = cs.A(p, p).real();
        if (!(app > 0.0))
            throw ConfigError(
                "joint_gain_estimate: user " + std::to_string(p) +
                " has zero signal energy");
        h[p] = cs.r[p] / app;
    }
    return h;
}

// ---------------------------------------------------------------------------
// Separable per-user likelihood
// ---------------------------------------------------------------------------

// Per-user term of the separated objective at one hypothesis, with gain and
// denominator.  For a single user this routes through the identical code
// path as the detection statistic, so the two agree bit for bit.
inline CellStat separable_cell(const Scene& scene,
                               const std::vector<MatrixXcd>& received,
                               const std::vector<TrackedUser>& users, int p,
                               double nu, double tau, double phi) {
    validate_users(scene, users);
    if (p < 0 || p >= static_cast<int>(users.size()))
        throw ConfigError("separable_cell: user index out of range");
    return glrt_cell(user_scene(scene, users[p]), received,
                     user_payload(users[p]), nu, tau, phi);
}

// The statistic alone; 0 for hypotheses the beams annihilate (such points
// are excluded from every search).
inline double separable_likelihood(const Scene& scene,
                                   const std::vector<MatrixXcd>& received,
                                   const std::vector<TrackedUser>& users, int p,
                                   double nu, double tau, double phi) {
    return separable_cell(scene, received, users, p, nu, tau, phi).stat;
}

// ---------------------------------------------------------------------------
// Local fine-grid search
// ---------------------------------------------------------------------------

// Nearest multiple of `step`; the local lattices are registered on such
// multiples so cached crosstalk operators land exactly on the evaluated
// points.
inline double snap_to_step(double x, double step) {
    return std::llround(x / step) * step;
}

// Search settings for one tracking frame.  Coarse cell sizes default to the
// native Doppler/delay resolution of the modulation and the array's
// beamwidth; each search spans one coarse cell each way at refine_factor
// subdivisions, and every extra zoom stage reruns the search around the
// running argmax with cells one refine_factor finer.
struct TrackingSearch {
    double step_nu_hz = 0.0;
    double step_tau_s = 0.0;
    double step_phi_rad = 0.0;
    int refine_factor = 10;
    int zoom_stages = 1;
    bool full_coupling = false;  // solve the P x P gain system instead of the
                                 // per-user diagonal default
    double isolation_tol = kIsolationTol;

    static TrackingSearch from_scene(const Scene& scene) {
        TrackingSearch s;
        s.step_nu_hz = 1.0 / (scene.otfs.N * scene.otfs.T);
        s.step_tau_s = 1.0 / (scene.otfs.M * scene.otfs.delta_f);
        s.step_phi_rad = 2.0 / scene.num_antennas;
        return s;
    }

    void validate() const {
        if (!(step_nu_hz > 0.0 && step_tau_s > 0.0 && step_phi_rad > 0.0))
            throw ConfigError("TrackingSearch: coarse steps must be positive");
        if (refine_factor < 1)
            throw ConfigError("TrackingSearch: refine_factor must be positive");
        if (zoom_stages < 1)
            throw ConfigError("TrackingSearch: need at least one zoom stage");
        if (!(isolation_tol > 0.0))
            throw ConfigError("TrackingSearch: isolation tolerance must be positive");
    }
};

// Fine lattice spanning refine_factor steps each way around the center,
// registered on multiples of the step and clipped to the physical domain.
inline SearchGrid local_fine_grid(const OtfsConfig& cfg, const ParamTriple& center,
                                  double fine_nu, double fine_tau, double fine_phi,
                                  int refine_factor) {
    if (!(fine_nu > 0.0 && fine_tau > 0.0 && fine_phi > 0.0))
        throw ConfigError("local_fine_grid: steps must be positive");
    if (refine_factor < 1)
        throw ConfigError("local_fine_grid: refine_factor must be positive");
    const double nu_lim = cfg.M * cfg.delta_f;  // crosstalk domain
    const double tau_max = cfg.N * cfg.T;
    const double c_nu = snap_to_step(center.nu_hz, fine_nu);
    const double c_tau = snap_to_step(center.tau_s, fine_tau);
    const double c_phi = snap_to_step(center.phi_rad, fine_phi);
    SearchGrid g;
    for (int i = -refine_factor; i <= refine_factor; ++i) {
        const double nu = c_nu + i * fine_nu;
        if (std::abs(nu) < nu_lim) g.doppler_hz.push_back(nu);
    }
    for (int i = -refine_factor; i <= refine_factor; ++i) {
        const double tau = c_tau + i * fine_tau;
        if (tau >= 0.0 && tau < tau_max) g.delay_s.push_back(tau);
    }
    for (int i = -refine_factor; i <= refine_factor; ++i) {
        const double phi = c_phi + i * fine_phi;
        if (phi >= -kPi / 2.0 && phi <= kPi / 2.0) g.angle_rad.push_back(phi);
    }
    if (g.doppler_hz.empty() || g.delay_s.empty() || g.angle_rad.empty())
        throw ConfigError("local_fine_grid: center outside the searchable domain");
    return g;
}

struct UserEstimate {
    int user = 0;  // TrackedUser::index
    double nu_hz = 0.0;
    double tau_s = 0.0;
    double phi_rad = 0.0;
    cplx gain = 0.0;
    double stat = 0.0;  // per-user likelihood at the estimate
};

// Full tracking pass: every user's separable likelihood is maximized over
// its local fine lattice (zoomed as configured), then the gains are read
// from the correlation system at the estimated points.  Output order
// follows the input user order; a lattice argmax can never fall below the
// value at the user's own (registered) prior cell, which the lattice always
// contains when the prior is interior to the domain.
inline std::vector<UserEstimate> estimate_all(
    const Scene& scene, const std::vector<MatrixXcd>& received,
    const std::vector<TrackedUser>& users, const TrackingSearch& search) {
    search.validate();
    validate_users(scene, users);
    check_user_isolation(scene.num_antennas, users, search.isolation_tol);
    if (static_cast<int>(received.size()) != scene.num_blocks())
        throw ConfigError("estimate_all: need one received block per schedule entry");

    const int P = static_cast<int>(users.size());
    std::vector<UserEstimate> out(P);
    std::vector<ParamTriple> points(P);
    for (int p = 0; p < P; ++p) {
        const Scene view = user_scene(scene, users[p]);
        const std::vector<MatrixXcd> payload = user_payload(users[p]);
        ParamTriple center{users[p].prior_nu_hz, users[p].prior_tau_s,
                           users[p].prior_phi_rad};
        double coarse_nu = search.step_nu_hz;
        double coarse_tau = search.step_tau_s;
        double coarse_phi = search.step_phi_rad;
        double stat = 0.0;
        for (int stage = 0; stage < search.zoom_stages; ++stage) {
            const double f_nu = coarse_nu / search.refine_factor;
            const double f_tau = coarse_tau / search.refine_factor;
            const double f_phi = coarse_phi / search.refine_factor;
            const SearchGrid grid = local_fine_grid(scene.otfs, center, f_nu,
                                                    f_tau, f_phi,
                                                    search.refine_factor);
            PsiCache cache(scene.otfs, scene.pulse, f_nu, f_tau);
            const LikelihoodMap map =
                build_likelihood_map(view, received, payload, grid, cache);
            const auto best = map.argmax();
            if (!best)
                throw ConfigError(
                    "estimate_all: no searchable hypothesis around the prior of "
                    "user " +
                    std::to_string(users[p].index));
            center = {grid.doppler_hz[(*best)[0]], grid.delay_s[(*best)[1]],
                      grid.angle_rad[(*best)[2]]};
            stat = map.at((*best)[0], (*best)[1], (*best)[2]);
            coarse_nu = f_nu;
            coarse_tau = f_tau;
            coarse_phi = f_phi;
        }
        points[p] = center;
        out[p] = UserEstimate{users[p].index, center.nu_hz, center.tau_s,
                              center.phi_rad, 0.0, stat};
    }

    const CorrelationSystem cs = correlations(scene, received, users, points);
    const VectorXcd h = search.full_coupling ? joint_gain_estimate(cs)
                                             : joint_gain_estimate_diagonal(cs);
    for (int p = 0; p < P; ++p) out[p].gain = h[p];
    return out;
}

}  // namespace otfsradar
