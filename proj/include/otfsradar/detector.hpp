// Discovery-mode detection: generalized-likelihood statistic over a
// Doppler-delay-angle search grid, order-statistic CFAR thresholding, local
// refinement, and the sequential detect-estimate-cancel loop.
//
// For a parameter hypothesis (nu, tau, phi) with per-block effective channel
// G_b and payload x_b, the statistic after concentrating out the complex
// gain is
//
//   S(nu,tau,phi) = | sum_b y_b^H G_b x_b |^2 / sum_b || G_b x_b ||^2
//
// with the concentrated gain estimate h = (sum_b y_b^H G_b x_b)^* over the
// same denominator.  G_b factors as the Kronecker product of the rank-one
// beam coupling (U_b^H a)(a^H F) with the Doppler-delay crosstalk Psi, so a
// map build hoists the angle-independent work: per (nu, tau) it forms
// Psi X_b once and contracts it against the received blocks, then sweeps the
// angle axis with O(N_rf) work per cell.
#pragma once

#include <algorithm>
#include <array>
#include <cstdint>
#include <limits>
#include <map>
#include <optional>
#include <vector>

#include "otfsradar/channel.hpp"

namespace otfsradar {

// ---------------------------------------------------------------------------
// Search grid
// ---------------------------------------------------------------------------

// Cells are ordered Doppler-major, then delay, then angle; every argmax and
// set below breaks ties toward the lowest (doppler, delay, angle) index.
struct SearchGrid {
    std::vector<double> doppler_hz;
    std::vector<double> delay_s;
    std::vector<double> angle_rad;

    // Coarse grid: the N x M Doppler-delay lattice of the modulation
    // (k/(NT), l/(M delta_f)) crossed with `angle_count` angles spanning the
    // field of view inclusively (a single angle collapses to the midpoint).
    static SearchGrid coarse(const OtfsConfig& cfg, double fov_min_rad,
                             double fov_max_rad, int angle_count) {
        if (angle_count < 1)
            throw ConfigError("SearchGrid: need at least one angle");
        if (!(fov_max_rad >= fov_min_rad))
            throw ConfigError("SearchGrid: empty field of view");
        SearchGrid g;
        for (int k = 0; k < cfg.N; ++k)
            g.doppler_hz.push_back(k / (cfg.N * cfg.T));
        for (int l = 0; l < cfg.M; ++l)
            g.delay_s.push_back(l / (cfg.M * cfg.delta_f));
        if (angle_count == 1) {
            g.angle_rad.push_back((fov_min_rad + fov_max_rad) / 2.0);
        } else {
            for (int i = 0; i < angle_count; ++i)
                g.angle_rad.push_back(fov_min_rad + (fov_max_rad - fov_min_rad) *
                                                        i / (angle_count - 1));
        }
        return g;
    }

    int n_doppler() const { return static_cast<int>(doppler_hz.size()); }
    int n_delay() const { return static_cast<int>(delay_s.size()); }
    int n_angle() const { return static_cast<int>(angle_rad.size()); }
    int cells() const { return n_doppler() * n_delay() * n_angle(); }

    int index(int i_nu, int i_tau, int i_phi) const {
        return (i_nu * n_delay() + i_tau) * n_angle() + i_phi;
    }

    // Uniform spacing along one axis; 0 for a single-point axis.
    static double step_of(const std::vector<double>& v) {
        if (v.size() < 2) return 0.0;
        const double d = v[1] - v[0];
        for (size_t i = 2; i < v.size(); ++i)
            if (std::abs((v[i] - v[i - 1]) - d) > 1e-9 * std::max(std::abs(d), 1e-300))
                throw ConfigError("SearchGrid: axis spacing must be uniform");
        return d;
    }

    void validate() const {
        if (doppler_hz.empty() || delay_s.empty() || angle_rad.empty())
            throw ConfigError("SearchGrid: every axis needs at least one point");
        step_of(doppler_hz);
        step_of(delay_s);
        step_of(angle_rad);
    }
};

// ---------------------------------------------------------------------------
// Statistic evaluation
// ---------------------------------------------------------------------------

struct CellStat {
    double stat = 0.0;       // S, nonnegative
    cplx gain = 0.0;         // concentrated gain estimate
    double denom = 0.0;      // sum_b ||G_b x_b||^2
    bool searchable = true;  // false when the beams annihilate the hypothesis
};

namespace detail {

// Angle-dependent factors of the rank-one coupling C_b = (U_b^H a)(a^H F).
struct AngleFactors {
    std::vector<VectorXcd> ua;   // per block, N_rf
    Eigen::RowVectorXcd af;      // 1 x N_s, block-independent
};

inline AngleFactors angle_factors(const Scene& scene, double phi) {
    AngleFactors f;
    const VectorXcd a = steering_vector(phi, scene.num_antennas);
    f.af = a.adjoint() * scene.tx_beams;
    f.ua.reserve(scene.num_blocks());
    for (int b = 0; b < scene.num_blocks(); ++b)
        f.ua.push_back(scene.reduction[b].adjoint() * a);
    return f;
}

// Payload columns lifted to the crosstalk kernel's input side, reusable
// across every (nu, tau) hypothesis of a frame.
inline std::vector<MatrixXcd> lift_payload(const PsiOperator& psi,
                                           const std::vector<MatrixXcd>& payload) {
    std::vector<MatrixXcd> lifted(payload.size());
    for (size_t b = 0; b < payload.size(); ++b) {
        lifted[b].resize(payload[b].rows(), payload[b].cols());
        for (int s = 0; s < payload[b].cols(); ++s)
            lifted[b].col(s) = psi.lift(payload[b].col(s));
    }
    return lifted;
}

// Angle-independent contractions at one (nu, tau): with Z_b = Psi X_b,
//   m_b = Y_b^H Z_b   (N_rf x N_s)   received correlation
//   q_b = Z_b^H Z_b   (N_s  x N_s)   payload energy through the crosstalk
struct NuTauSlice {
    std::vector<MatrixXcd> m;
    std::vector<MatrixXcd> q;
};

inline NuTauSlice make_slice(const PsiOperator& psi,
                             const std::vector<MatrixXcd>& received,
                             const std::vector<MatrixXcd>& lifted) {
    NuTauSlice slice;
    const size_t B = lifted.size();
    slice.m.resize(B);
    slice.q.resize(B);
    for (size_t b = 0; b < B; ++b) {
        MatrixXcd zx(lifted[b].rows(), lifted[b].cols());
        for (int s = 0; s < lifted[b].cols(); ++s)
            zx.col(s) = psi.apply_lifted(lifted[b].col(s));
        slice.m[b] = received[b].adjoint() * zx;
        slice.q[b] = zx.adjoint() * zx;
    }
    return slice;
}

// S, h and the denominator from the contracted pieces.  With the rank-one
// coupling C_b = ua_b af, the numerator term is tr(Y^H Z C^T) = ua^T m af^T
// and the energy term is ||Z C^T||^2 = ||ua||^2 (af^* q af^T).
inline CellStat stat_from_slice(const NuTauSlice& slice, const AngleFactors& ang) {
    cplx num = 0.0;
    double den = 0.0;
    for (size_t b = 0; b < slice.m.size(); ++b) {
        num += (ang.ua[b].transpose() * slice.m[b] * ang.af.transpose()).value();
        den += ang.ua[b].squaredNorm() *
               (ang.af.conjugate() * slice.q[b] * ang.af.transpose()).value().real();
    }
    CellStat out;
    out.denom = den;
    if (den <= 0.0) {
        out.searchable = false;
        return out;
    }
    out.stat = std::norm(num) / den;
    out.gain = std::conj(num) / den;
    return out;
}

}  // namespace detail

// Statistic, gain and denominator at a single (nu, tau, phi) hypothesis,
// evaluated with an exact (uncached) crosstalk operator.  A zero denominator
// marks the cell unsearchable (stat and gain read 0) rather than throwing.
inline CellStat glrt_cell(const Scene& scene,
                          const std::vector<MatrixXcd>& received,
                          const std::vector<MatrixXcd>& payload, double nu,
                          double tau, double phi) {
    if (received.size() != payload.size() ||
        static_cast<int>(received.size()) != scene.num_blocks())
        throw ConfigError("glrt_cell: need one received/payload pair per block");
    const PsiOperator psi(scene.otfs, scene.pulse, nu, tau);
    const auto lifted = detail::lift_payload(psi, payload);
    const auto slice = detail::make_slice(psi, received, lifted);
    return detail::stat_from_slice(slice, detail::angle_factors(scene, phi));
}

inline double glrt_statistic(const Scene& scene,
                             const std::vector<MatrixXcd>& received,
                             const std::vector<MatrixXcd>& payload, double nu,
                             double tau, double phi) {
    return glrt_cell(scene, received, payload, nu, tau, phi).stat;
}

inline cplx estimate_gain(const Scene& scene,
                          const std::vector<MatrixXcd>& received,
                          const std::vector<MatrixXcd>& payload, double nu,
                          double tau, double phi) {
    return glrt_cell(scene, received, payload, nu, tau, phi).gain;
}

// ---------------------------------------------------------------------------
// Likelihood map
// ---------------------------------------------------------------------------

struct LikelihoodMap {
    SearchGrid grid;
    std::vector<double> values;        // S per cell, grid-ordered
    std::vector<double> denominators;  // energy cache per cell
    std::vector<std::uint8_t> searchable;

    double at(int i_nu, int i_tau, int i_phi) const {
        return values[grid.index(i_nu, i_tau, i_phi)];
    }

    // Grid indices of the largest searchable value; ties resolve to the
    // lowest (doppler, delay, angle) index.
    std::optional<std::array<int, 3>> argmax() const {
        std::optional<std::array<int, 3>> best_cell;
        double best = -1.0;
        int idx = 0;
        for (int i = 0; i < grid.n_doppler(); ++i)
            for (int j = 0; j < grid.n_delay(); ++j)
                for (int k = 0; k < grid.n_angle(); ++k, ++idx)
                    if (searchable[idx] && values[idx] > best) {
                        best = values[idx];
                        best_cell = {{i, j, k}};
                    }
        return best_cell;
    }
};

// Cells whose denominator falls this far below the map's largest are treated
// as annihilated by the beams and excluded from search.
inline constexpr double kDenomRelativeFloor = 1e-12;

inline LikelihoodMap build_likelihood_map(const Scene& scene,
                                          const std::vector<MatrixXcd>& received,
                                          const std::vector<MatrixXcd>& payload,
                                          const SearchGrid& grid,
                                          PsiCache& cache) {
    grid.validate();
    if (received.size() != payload.size() ||
        static_cast<int>(received.size()) != scene.num_blocks())
        throw ConfigError(
            "build_likelihood_map: need one received/payload pair per block");
    LikelihoodMap map;
    map.grid = grid;
    map.values.assign(grid.cells(), 0.0);
    map.denominators.assign(grid.cells(), 0.0);
    map.searchable.assign(grid.cells(), 1);

    std::vector<detail::AngleFactors> ang;
    ang.reserve(grid.n_angle());
    for (double phi : grid.angle_rad)
        ang.push_back(detail::angle_factors(scene, phi));

    bool lifted_ready = false;
    std::vector<MatrixXcd> lifted;
    for (int i = 0; i < grid.n_doppler(); ++i) {
        for (int j = 0; j < grid.n_delay(); ++j) {
            const PsiOperator& psi =
                cache.get(grid.doppler_hz[i], grid.delay_s[j]);
            if (!lifted_ready) {
                lifted = detail::lift_payload(psi, payload);
                lifted_ready = true;  // the lift does not depend on (nu, tau)
            }
            const auto slice = detail::make_slice(psi, received, lifted);
            for (int k = 0; k < grid.n_angle(); ++k) {
                const CellStat cell = detail::stat_from_slice(slice, ang[k]);
                const int idx = grid.index(i, j, k);
                map.values[idx] = cell.stat;
                map.denominators[idx] = cell.denom;
                map.searchable[idx] = cell.searchable ? 1 : 0;
            }
        }
    }

    const double den_max =
        *std::max_element(map.denominators.begin(), map.denominators.end());
    for (int idx = 0; idx < grid.cells(); ++idx)
        if (map.denominators[idx] < kDenomRelativeFloor * den_max)
            map.searchable[idx] = 0;
    return map;
}

// Convenience overload with a throwaway cache quantized at one tenth of the
// grid spacing (the refinement lattice).
inline LikelihoodMap build_likelihood_map(const Scene& scene,
                                          const std::vector<MatrixXcd>& received,
                                          const std::vector<MatrixXcd>& payload,
                                          const SearchGrid& grid,
                                          int refine_factor = 10) {
    grid.validate();
    const double dnu = SearchGrid::step_of(grid.doppler_hz);
    const double dtau = SearchGrid::step_of(grid.delay_s);
    PsiCache cache(scene.otfs, scene.pulse,
                   dnu > 0.0 ? dnu / refine_factor : 1.0,
                   dtau > 0.0 ? dtau / refine_factor : 1.0);
    return build_likelihood_map(scene, received, payload, grid, cache);
}

// ---------------------------------------------------------------------------
// Order-statistic CFAR
// ---------------------------------------------------------------------------

struct CfarConfig {
    std::array<int, 3> window = {3, 3, 3};  // half-widths (doppler, delay, angle)
    std::array<int, 3> guard = {1, 1, 1};   // guard half-widths, same order
    double kappa = 0.75;                    // percentile of the neighbor CDF
    double alpha = 1.0;                     // calibrated scale

    void validate() const {
        long long win = 1, grd = 1;
        for (int d = 0; d < 3; ++d) {
            if (guard[d] < 0 || window[d] <= guard[d])
                throw ConfigError(
                    "CfarConfig: window must strictly contain the guard region");
            win *= 2 * window[d] + 1;
            grd *= 2 * guard[d] + 1;
        }
        if (win - grd < 8)
            throw ConfigError("CfarConfig: window must hold at least 8 neighbors");
        if (!(kappa > 0.0 && kappa < 1.0))
            throw ConfigError("CfarConfig: kappa must lie in (0, 1)");
        if (!(alpha > 0.0))
            throw ConfigError("CfarConfig: alpha must be positive");
    }
};

// Per-cell adaptive threshold aligned with its map; cells whose truncated
// neighborhood is too small to estimate a distribution are marked invalid
// and never enter the above-threshold set.
struct ThresholdMap {
    std::vector<double> values;
    std::vector<std::uint8_t> valid;
};

// A cell needs at least this many valid neighbors for an order-statistic
// threshold; below it the empirical distribution is meaningless.
inline constexpr int kMinCfarNeighbors = 8;

inline ThresholdMap os_cfar_threshold(const LikelihoodMap& map,
                                      const CfarConfig& cfg) {
    cfg.validate();
    const SearchGrid& g = map.grid;
    ThresholdMap out;
    out.values.assign(g.cells(), std::numeric_limits<double>::infinity());
    out.valid.assign(g.cells(), 0);

    std::vector<double> neigh;
    for (int i = 0; i < g.n_doppler(); ++i) {
        for (int j = 0; j < g.n_delay(); ++j) {
            for (int k = 0; k < g.n_angle(); ++k) {
                const int idx = g.index(i, j, k);
                if (!map.searchable[idx]) continue;
                neigh.clear();
                for (int di = -cfg.window[0]; di <= cfg.window[0]; ++di) {
                    const int ii = i + di;
                    if (ii < 0 || ii >= g.n_doppler()) continue;
                    for (int dj = -cfg.window[1]; dj <= cfg.window[1]; ++dj) {
                        const int jj = j + dj;
                        if (jj < 0 || jj >= g.n_delay()) continue;
                        for (int dk = -cfg.window[2]; dk <= cfg.window[2]; ++dk) {
                            const int kk = k + dk;
                            if (kk < 0 || kk >= g.n_angle()) continue;
                            if (std::abs(di) <= cfg.guard[0] &&
                                std::abs(dj) <= cfg.guard[1] &&
                                std::abs(dk) <= cfg.guard[2])
                                continue;  // guard box, including the cell itself
                            const int nidx = g.index(ii, jj, kk);
                            if (map.searchable[nidx])
                                neigh.push_back(map.values[nidx]);
                        }
                    }
                }
                const int n_c = static_cast<int>(neigh.size());
                if (n_c < kMinCfarNeighbors) continue;
                std::sort(neigh.begin(), neigh.end());
                const int rank =
                    static_cast<int>(std::ceil(cfg.kappa * n_c));  // 1-based
                out.values[idx] = cfg.alpha * neigh[rank - 1];
                out.valid[idx] = 1;
            }
        }
    }
    return out;
}

// Cells with S >= T_r, in grid order (lowest lexicographic index first).
inline std::vector<std::array<int, 3>> above_threshold_set(
    const LikelihoodMap& map, const ThresholdMap& thresholds) {
    std::vector<std::array<int, 3>> cells;
    const SearchGrid& g = map.grid;
    for (int i = 0; i < g.n_doppler(); ++i)
        for (int j = 0; j < g.n_delay(); ++j)
            for (int k = 0; k < g.n_angle(); ++k) {
                const int idx = g.index(i, j, k);
                if (map.searchable[idx] && thresholds.valid[idx] &&
                    map.values[idx] >= thresholds.values[idx])
                    cells.push_back({i, j, k});
            }
    return cells;
}

// ---------------------------------------------------------------------------
// Local refinement, gain estimation, cancellation
// ---------------------------------------------------------------------------

struct RefinedPoint {
    double nu = 0.0, tau = 0.0, phi = 0.0;
    double stat = 0.0;
};

// Dense search over a fine lattice spanning +/- one coarse cell around the
// given cell, `refine_factor` subdivisions per coarse step.  Fine points
// outside the physical domain (negative delay, angles beyond +/- pi/2) are
// skipped; ties resolve toward the lowest fine index.
inline RefinedPoint refine_local(const Scene& scene,
                                 const std::vector<MatrixXcd>& received,
                                 const std::vector<MatrixXcd>& payload,
                                 const SearchGrid& grid,
                                 std::array<int, 3> cell, int refine_factor,
                                 PsiCache& cache) {
    grid.validate();
    if (refine_factor < 1)
        throw ConfigError("refine_local: refine_factor must be positive");
    if (cell[0] < 0 || cell[0] >= grid.n_doppler() || cell[1] < 0 ||
        cell[1] >= grid.n_delay() || cell[2] < 0 || cell[2] >= grid.n_angle())
        throw ConfigError("refine_local: cell outside the search grid");
    const double nu0 = grid.doppler_hz[cell[0]];
    const double tau0 = grid.delay_s[cell[1]];
    const double phi0 = grid.angle_rad[cell[2]];
    const double dnu = SearchGrid::step_of(grid.doppler_hz) / refine_factor;
    const double dtau = SearchGrid::step_of(grid.delay_s) / refine_factor;
    const double dphi = SearchGrid::step_of(grid.angle_rad) / refine_factor;
    const double tau_max = scene.otfs.N * scene.otfs.T;

    // A zero-step axis (single-point grid dimension) refines to its only value.
    const int span_nu = dnu > 0.0 ? refine_factor : 0;
    const int span_tau = dtau > 0.0 ? refine_factor : 0;
    const int span_phi = dphi > 0.0 ? refine_factor : 0;
    bool lifted_ready = false;
    std::vector<MatrixXcd> lifted;
    RefinedPoint best;
    best.stat = -1.0;
    for (int a = -span_nu; a <= span_nu; ++a) {
        const double nu = nu0 + a * dnu;
        for (int b = -span_tau; b <= span_tau; ++b) {
            const double tau = tau0 + b * dtau;
            if (tau < 0.0 || tau >= tau_max) continue;
            const PsiOperator& psi = cache.get(nu, tau);
            if (!lifted_ready) {
                lifted = detail::lift_payload(psi, payload);
                lifted_ready = true;
            }
            const auto slice = detail::make_slice(psi, received, lifted);
            for (int c = -span_phi; c <= span_phi; ++c) {
                const double phi = phi0 + c * dphi;
                if (phi < -kPi / 2.0 || phi > kPi / 2.0) continue;
                const CellStat s =
                    detail::stat_from_slice(slice, detail::angle_factors(scene, phi));
                if (s.searchable && s.stat > best.stat)
                    best = RefinedPoint{nu, tau, phi, s.stat};
            }
        }
    }
    if (best.stat < 0.0)
        throw ConfigError("refine_local: no searchable point in the neighborhood");
    return best;
}

struct Detection {
    std::array<int, 3> cell{0, 0, 0};  // coarse grid indices
    double coarse_nu = 0.0, coarse_tau = 0.0, coarse_phi = 0.0;
    double nu = 0.0, tau = 0.0, phi = 0.0;  // refined parameters
    cplx gain = 0.0;
    double stat = 0.0;  // statistic at the refined point
    int order = 0;      // 0-based detection index within the frame
};

// Subtracts the detected path h * G_b x_b (at the refined parameters) from
// every received block.
inline std::vector<MatrixXcd> sic_cancel(const Scene& scene,
                                         const std::vector<MatrixXcd>& received,
                                         const std::vector<MatrixXcd>& payload,
                                         const Detection& det) {
    const PsiOperator psi(scene.otfs, scene.pulse, det.nu, det.tau);
    std::vector<MatrixXcd> residual = received;
    for (int b = 0; b < scene.num_blocks(); ++b) {
        MatrixXcd zx(payload[b].rows(), payload[b].cols());
        for (int s = 0; s < payload[b].cols(); ++s)
            zx.col(s) = psi.apply(payload[b].col(s));
        const MatrixXcd c = scene.coupling(b, det.phi);
        residual[b] -= det.gain * zx * c.transpose();
    }
    return residual;
}

struct DetectorLimits {
    int max_detections = -1;  // negative selects the number of RF chains
    int refine_factor = 10;
};

// Sequential detection loop: build the map on the current residual,
// threshold it, take the strongest above-threshold cell, refine, estimate
// the gain, cancel, and repeat until the above-threshold set empties or the
// detection budget is spent.
inline std::vector<Detection> detect_all(const Scene& scene,
                                         const std::vector<MatrixXcd>& received,
                                         const std::vector<MatrixXcd>& payload,
                                         const SearchGrid& grid,
                                         const CfarConfig& cfar,
                                         DetectorLimits limits = {}) {
    grid.validate();
    cfar.validate();
    const int budget =
        limits.max_detections < 0 ? scene.num_chains() : limits.max_detections;
    std::vector<Detection> detections;
    if (budget == 0) return detections;

    const double dnu = SearchGrid::step_of(grid.doppler_hz);
    const double dtau = SearchGrid::step_of(grid.delay_s);
    PsiCache cache(scene.otfs, scene.pulse,
                   dnu > 0.0 ? dnu / limits.refine_factor : 1.0,
                   dtau > 0.0 ? dtau / limits.refine_factor : 1.0);

    std::vector<MatrixXcd> residual = received;
    while (static_cast<int>(detections.size()) < budget) {
        const LikelihoodMap map =
            build_likelihood_map(scene, residual, payload, grid, cache);
        const ThresholdMap thr = os_cfar_threshold(map, cfar);
        const auto exceed = above_threshold_set(map, thr);
        if (exceed.empty()) break;

        std::array<int, 3> cell = exceed.front();
        for (const auto& c : exceed) {
            const int idx = grid.index(c[0], c[1], c[2]);
            if (map.values[idx] >
                map.values[grid.index(cell[0], cell[1], cell[2])])
                cell = c;
        }

        const RefinedPoint fine = refine_local(scene, residual, payload, grid,
                                               cell, limits.refine_factor, cache);
        Detection det;
        det.cell = cell;
        det.coarse_nu = grid.doppler_hz[cell[0]];
        det.coarse_tau = grid.delay_s[cell[1]];
        det.coarse_phi = grid.angle_rad[cell[2]];
        det.nu = fine.nu;
        det.tau = fine.tau;
        det.phi = fine.phi;
        det.stat = fine.stat;
        det.gain =
            estimate_gain(scene, residual, payload, det.nu, det.tau, det.phi);
        det.order = static_cast<int>(detections.size());
        detections.push_back(det);
        residual = sic_cancel(scene, residual, payload, det);
    }
    return detections;
}

}  // namespace otfsradar
