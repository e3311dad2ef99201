#include "otfsradar/detector.hpp"

#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>

#include "otfsradar/beams.hpp"

using namespace otfsradar;

namespace {

// Small scene with a seeded random unit beam and a DFT-column reduction
// schedule: N=M=4, N_a=8, N_rf=2.
Scene dft_scene(int num_blocks = 3, uint64_t seed = 11) {
    Scene sc;
    sc.otfs = OtfsConfig(4, 4, 1e6);
    sc.num_antennas = 8;
    Rng rng(seed);
    sc.tx_beams = MatrixXcd(8, 1);
    for (int n = 0; n < 8; ++n) sc.tx_beams(n, 0) = rng.cnormal(1.0);
    sc.tx_beams.col(0).normalize();
    ReductionSchedule sched = build_schedule(Codebook{}, 8, num_blocks, 2,
                                             ReductionStrategy::Dft, seed);
    sc.reduction = sched.matrices;
    sc.validate();
    return sc;
}

std::vector<MatrixXcd> qpsk_payload(const Scene& sc, uint64_t seed) {
    std::vector<MatrixXcd> blocks;
    for (int b = 0; b < sc.num_blocks(); ++b)
        blocks.push_back(generate_symbols(sc.otfs, sc.num_streams(),
                                          sc.link.tx_power_w,
                                          derive_seed(seed, 7, b, 0)));
    return blocks;
}

// Independent reassembly of sum_b ||G_b x_b||^2 through EffectiveChannel.
double direct_energy(const Scene& sc, const std::vector<MatrixXcd>& payload,
                     double nu, double tau, double phi) {
    PsiOperator psi(sc.otfs, sc.pulse, nu, tau);
    double den = 0.0;
    for (int b = 0; b < sc.num_blocks(); ++b)
        den += EffectiveChannel(sc, b, psi, phi).apply(payload[b]).squaredNorm();
    return den;
}

// Least-squares misfit sum_b ||y_b - h G_b x_b||^2 for the gain probe.
double gain_misfit(const Scene& sc, const std::vector<MatrixXcd>& ys,
                   const std::vector<MatrixXcd>& payload, double nu, double tau,
                   double phi, cplx h) {
    PsiOperator psi(sc.otfs, sc.pulse, nu, tau);
    double j = 0.0;
    for (int b = 0; b < sc.num_blocks(); ++b)
        j += (ys[b] - h * EffectiveChannel(sc, b, psi, phi).apply(payload[b]))
                 .squaredNorm();
    return j;
}

// Two-sided Kolmogorov-Smirnov distance against an exponential CDF.
double ks_distance_exponential(std::vector<double> samples, double mean) {
    std::sort(samples.begin(), samples.end());
    const double n = static_cast<double>(samples.size());
    double d = 0.0;
    for (size_t i = 0; i < samples.size(); ++i) {
        const double f = 1.0 - std::exp(-samples[i] / mean);
        d = std::max(d, std::abs((i + 1) / n - f));
        d = std::max(d, std::abs(i / n - f));
    }
    return d;
}

SearchGrid synthetic_grid(int n0, int n1, int n2) {
    SearchGrid g;
    for (int i = 0; i < n0; ++i) g.doppler_hz.push_back(i * 1.0);
    for (int i = 0; i < n1; ++i) g.delay_s.push_back(i * 1.0);
    for (int i = 0; i < n2; ++i) g.angle_rad.push_back(i * 0.01);
    return g;
}

LikelihoodMap constant_map(const SearchGrid& g, double v) {
    LikelihoodMap map;
    map.grid = g;
    map.values.assign(g.cells(), v);
    map.denominators.assign(g.cells(), 1.0);
    map.searchable.assign(g.cells(), 1);
    return map;
}

}  // namespace

// ---------------------------------------------------------------------------
// Search grid
// ---------------------------------------------------------------------------

TEST(GridTest, CoarseGridMatchesModulationLattice) {
    OtfsConfig cfg(4, 8, 1e6);
    SearchGrid g = SearchGrid::coarse(cfg, -kPi / 4.0, kPi / 4.0, 5);
    ASSERT_EQ(g.n_doppler(), 4);
    ASSERT_EQ(g.n_delay(), 8);
    ASSERT_EQ(g.n_angle(), 5);
    EXPECT_EQ(g.cells(), 4 * 8 * 5);
    for (int k = 0; k < 4; ++k)
        EXPECT_NEAR(g.doppler_hz[k], k / (4.0 * cfg.T), 1e-9);
    for (int l = 0; l < 8; ++l)
        EXPECT_NEAR(g.delay_s[l], l / (8.0 * cfg.delta_f), 1e-18);
    EXPECT_NEAR(g.angle_rad.front(), -kPi / 4.0, 1e-15);
    EXPECT_NEAR(g.angle_rad.back(), kPi / 4.0, 1e-15);
    EXPECT_NEAR(g.angle_rad[2], 0.0, 1e-15);

    SearchGrid one = SearchGrid::coarse(cfg, -0.4, 0.8, 1);
    ASSERT_EQ(one.n_angle(), 1);
    EXPECT_NEAR(one.angle_rad[0], 0.2, 1e-15);
}

TEST(GridTest, ValidationRejectsDegenerateAxes) {
    SearchGrid g = synthetic_grid(3, 3, 3);
    EXPECT_NO_THROW(g.validate());
    g.doppler_hz = {0.0, 1.0, 3.0};
    EXPECT_THROW(g.validate(), ConfigError);
    g = synthetic_grid(3, 3, 3);
    g.angle_rad.clear();
    EXPECT_THROW(g.validate(), ConfigError);
    EXPECT_THROW(SearchGrid::coarse(OtfsConfig(4, 4, 1e6), 0.0, 1.0, 0),
                 ConfigError);
}

// ---------------------------------------------------------------------------
// Statistic and gain at a point
// ---------------------------------------------------------------------------

TEST(GlrtTest, NoiselessOnGridTargetMatchesClosedForm) {
    Scene sc = dft_scene();
    sc.link.noise_density_w_per_hz = 0.0;
    auto payload = qpsk_payload(sc, 3);
    const double nu = 1.0 / (4.0 * sc.otfs.T);
    const double tau = 2.0 / (4.0 * sc.otfs.delta_f);
    const double phi = 0.2;
    const cplx c(0.8, -0.6);
    Target t(c, nu, tau, phi, sc.otfs);
    Rng noise(0);
    auto ys = simulate_rx(sc, {t}, payload, noise);

    const double den = direct_energy(sc, payload, nu, tau, phi);
    const CellStat cell = glrt_cell(sc, ys, payload, nu, tau, phi);
    EXPECT_TRUE(cell.searchable);
    EXPECT_NEAR(cell.denom, den, 1e-9 * den);
    EXPECT_NEAR(cell.stat, std::norm(c) * den, 1e-9 * std::norm(c) * den);
}

TEST(GlrtTest, StatisticIsQuadraticAndGainLinearInReceived) {
    Scene sc = dft_scene();
    auto payload = qpsk_payload(sc, 5);
    Target t(cplx(0.3, 0.1), 1e5, 3e-7, -0.15, sc.otfs);
    Rng noise(44);
    auto ys = simulate_rx(sc, {t}, payload, noise);
    const cplx c(2.0, -1.5);
    auto ys_scaled = ys;
    for (auto& y : ys_scaled) y *= c;

    const CellStat base = glrt_cell(sc, ys, payload, 1e5, 3e-7, -0.15);
    const CellStat scaled = glrt_cell(sc, ys_scaled, payload, 1e5, 3e-7, -0.15);
    EXPECT_NEAR(scaled.stat, std::norm(c) * base.stat,
                1e-12 * std::norm(c) * base.stat);
    EXPECT_LT(std::abs(scaled.gain - c * base.gain), 1e-12 * std::abs(c * base.gain));
}

TEST(GlrtTest, ReceivedOrthogonalToSignalGivesZeroStatistic) {
    Scene sc = dft_scene(2);
    sc.link.noise_density_w_per_hz = 0.0;
    auto payload = qpsk_payload(sc, 7);
    const double nu = 0.0, tau = 1.0 / (4e6), phi = 0.1;
    Target t(cplx(1.0, 0.0), nu, tau, phi, sc.otfs);
    Rng noise(0);
    auto z = simulate_rx(sc, {t}, payload, noise);  // z_b = G_b x_b
    // y_1 = z_1 and y_2 = -(||z_1||^2/||z_2||^2) z_2 zero the numerator.
    auto ys = z;
    ys[1] *= -(z[0].squaredNorm() / z[1].squaredNorm());

    const CellStat cell = glrt_cell(sc, ys, payload, nu, tau, phi);
    EXPECT_TRUE(cell.searchable);
    EXPECT_LT(cell.stat, 1e-20 * cell.denom);
}

TEST(GlrtTest, GainRecoveredExactlyWithoutNoise) {
    Scene sc = dft_scene();
    sc.link.noise_density_w_per_hz = 0.0;
    auto payload = qpsk_payload(sc, 9);
    const double nu = 1.0 / (4.0 * sc.otfs.T), tau = 5e-7, phi = 0.35;
    const cplx h(-0.4, 0.9);
    Target t(h, nu, tau, phi, sc.otfs);
    Rng noise(0);
    auto ys = simulate_rx(sc, {t}, payload, noise);
    const cplx est = estimate_gain(sc, ys, payload, nu, tau, phi);
    EXPECT_LT(std::abs(est - h), 1e-9 * std::abs(h));
}

TEST(GlrtTest, EstimatedGainMinimizesTheMisfit) {
    Scene sc = dft_scene();
    auto payload = qpsk_payload(sc, 13);
    Target t(cplx(0.5, 0.2), 1.3e5, 6e-7, 0.05, sc.otfs);
    Rng noise(77);
    auto ys = simulate_rx(sc, {t}, payload, noise);
    const double nu = 1.3e5, tau = 6e-7, phi = 0.05;
    const cplx est = estimate_gain(sc, ys, payload, nu, tau, phi);
    const double at_est = gain_misfit(sc, ys, payload, nu, tau, phi, est);
    for (cplx factor : {cplx(1.01, 0.0), cplx(0.99, 0.0), cplx(1.0, 0.01),
                        cplx(1.0, -0.01)}) {
        EXPECT_GT(gain_misfit(sc, ys, payload, nu, tau, phi, est * factor),
                  at_est);
    }
}

TEST(GlrtTest, ZeroReceivedGivesZeroGainAndStatistic) {
    Scene sc = dft_scene();
    auto payload = qpsk_payload(sc, 15);
    std::vector<MatrixXcd> ys(sc.num_blocks(),
                              MatrixXcd::Zero(sc.otfs.grid_size(), 2));
    const CellStat cell = glrt_cell(sc, ys, payload, 0.0, 0.0, 0.0);
    EXPECT_TRUE(cell.searchable);
    EXPECT_EQ(cell.stat, 0.0);
    EXPECT_EQ(cell.gain, cplx(0.0, 0.0));
}

TEST(GlrtTest, ZeroPayloadMarksCellUnsearchable) {
    Scene sc = dft_scene();
    std::vector<MatrixXcd> payload(sc.num_blocks(),
                                   MatrixXcd::Zero(sc.otfs.grid_size(), 1));
    std::vector<MatrixXcd> ys(sc.num_blocks(),
                              MatrixXcd::Ones(sc.otfs.grid_size(), 2));
    const CellStat cell = glrt_cell(sc, ys, payload, 0.0, 0.0, 0.0);
    EXPECT_FALSE(cell.searchable);
    EXPECT_EQ(cell.stat, 0.0);
    EXPECT_EQ(cell.gain, cplx(0.0, 0.0));
}

// ---------------------------------------------------------------------------
// Likelihood map
// ---------------------------------------------------------------------------

TEST(MapTest, EveryCellMatchesTheScalarEvaluator) {
    Scene sc = dft_scene();
    auto payload = qpsk_payload(sc, 17);
    Target t(cplx(1e-6, 2e-6), 1e5, 4e-7, 0.12, sc.otfs);
    Rng noise(5);
    auto ys = simulate_rx(sc, {t}, payload, noise);
    SearchGrid grid = SearchGrid::coarse(sc.otfs, -0.5, 0.5, 7);
    LikelihoodMap map = build_likelihood_map(sc, ys, payload, grid);
    for (int i = 0; i < grid.n_doppler(); ++i)
        for (int j = 0; j < grid.n_delay(); ++j)
            for (int k = 0; k < grid.n_angle(); ++k) {
                const double direct =
                    glrt_statistic(sc, ys, payload, grid.doppler_hz[i],
                                   grid.delay_s[j], grid.angle_rad[k]);
                EXPECT_NEAR(map.at(i, j, k), direct,
                            1e-9 * std::max(direct, 1e-300))
                    << i << "," << j << "," << k;
            }
}

TEST(MapTest, StrongTargetPutsArgmaxAtItsCell) {
    Scene sc = dft_scene();
    auto payload = qpsk_payload(sc, 19);
    SearchGrid grid = SearchGrid::coarse(sc.otfs, -0.5, 0.5, 9);
    const int ci = 1, cj = 3, ck = 6;
    Target t(cplx(1.0, 0.5), grid.doppler_hz[ci], grid.delay_s[cj],
             grid.angle_rad[ck], sc.otfs);
    Rng noise(23);
    auto ys = simulate_rx(sc, {t}, payload, noise);
    LikelihoodMap map = build_likelihood_map(sc, ys, payload, grid);
    auto best = map.argmax();
    ASSERT_TRUE(best.has_value());
    EXPECT_EQ((*best)[0], ci);
    EXPECT_EQ((*best)[1], cj);
    EXPECT_EQ((*best)[2], ck);
}

TEST(MapTest, BlockPermutationLeavesTheMapUnchanged) {
    Scene sc = dft_scene(4);
    auto payload = qpsk_payload(sc, 21);
    Target t(cplx(2e-6, 0.0), 2e5, 7e-7, -0.2, sc.otfs);
    Rng noise(31);
    auto ys = simulate_rx(sc, {t}, payload, noise);

    const std::vector<int> perm{2, 0, 3, 1};
    Scene sc2 = sc;
    std::vector<MatrixXcd> ys2(4), payload2(4);
    for (int b = 0; b < 4; ++b) {
        sc2.reduction[b] = sc.reduction[perm[b]];
        ys2[b] = ys[perm[b]];
        payload2[b] = payload[perm[b]];
    }
    SearchGrid grid = SearchGrid::coarse(sc.otfs, -0.4, 0.4, 5);
    LikelihoodMap a = build_likelihood_map(sc, ys, payload, grid);
    LikelihoodMap b = build_likelihood_map(sc2, ys2, payload2, grid);
    for (int idx = 0; idx < grid.cells(); ++idx)
        EXPECT_NEAR(a.values[idx], b.values[idx],
                    1e-12 * std::max(a.values[idx], 1e-300));
}

TEST(MapTest, AnnihilatedAngleIsExcludedFromSearch) {
    Scene sc = dft_scene();
    SearchGrid grid = SearchGrid::coarse(sc.otfs, -0.5, 0.5, 5);
    const double dead = grid.angle_rad[1];
    // Beam orthogonal to the steering vector at one grid angle: the
    // denominator collapses there for every (doppler, delay) pair.
    const VectorXcd a = steering_vector(dead, sc.num_antennas);
    VectorXcd f = sc.tx_beams.col(0);
    f -= a * (a.dot(f) / a.squaredNorm());
    sc.tx_beams.col(0) = f.normalized();

    auto payload = qpsk_payload(sc, 23);
    Rng noise(3);
    auto ys = simulate_rx(sc, {}, payload, noise);
    LikelihoodMap map = build_likelihood_map(sc, ys, payload, grid);
    for (int i = 0; i < grid.n_doppler(); ++i)
        for (int j = 0; j < grid.n_delay(); ++j)
            for (int k = 0; k < grid.n_angle(); ++k)
                EXPECT_EQ(map.searchable[grid.index(i, j, k)], k == 1 ? 0 : 1);
}

TEST(MapTest, NoiseOnlyStatisticIsExponentialAtACell) {
    Scene sc = dft_scene(2);
    auto payload = qpsk_payload(sc, 29);
    const double nu = 1.0 / (4.0 * sc.otfs.T);
    const double tau = 1.0 / (4.0 * sc.otfs.delta_f);
    const double phi = 0.15;
    const int n = 10000;
    std::vector<double> draws;
    draws.reserve(n);
    for (int trial = 0; trial < n; ++trial) {
        Rng noise(derive_seed(901, trial, 0, 0));
        auto ys = simulate_rx(sc, {}, payload, noise);
        draws.push_back(glrt_statistic(sc, ys, payload, nu, tau, phi));
    }
    const double d = ks_distance_exponential(draws, sc.link.noise_power());
    // 5% two-sided Kolmogorov-Smirnov critical value for n = 10^4.
    EXPECT_LT(d, 1.358 / std::sqrt(static_cast<double>(n)));
}

// ---------------------------------------------------------------------------
// OS-CFAR
// ---------------------------------------------------------------------------

TEST(CfarTest, ConstantMapThresholdsAtAlphaTimesValue) {
    LikelihoodMap map = constant_map(synthetic_grid(9, 9, 9), 3.7);
    CfarConfig cfg;
    cfg.window = {2, 2, 2};
    cfg.guard = {1, 1, 1};
    cfg.alpha = 2.5;
    ThresholdMap thr = os_cfar_threshold(map, cfg);
    for (int idx = 0; idx < map.grid.cells(); ++idx) {
        ASSERT_EQ(thr.valid[idx], 1);
        EXPECT_NEAR(thr.values[idx], 2.5 * 3.7, 1e-12);
    }
}

TEST(CfarTest, TopPercentileTracksAWindowOutlier) {
    SearchGrid g = synthetic_grid(9, 9, 9);
    LikelihoodMap map = constant_map(g, 1.0);
    map.values[g.index(4, 4, 4)] = 100.0;
    CfarConfig cfg;
    cfg.window = {2, 2, 2};
    cfg.guard = {1, 1, 1};
    cfg.kappa = 0.999;
    cfg.alpha = 1.0;
    ThresholdMap thr = os_cfar_threshold(map, cfg);
    // The outlier sits inside this cell's window but outside its guard box.
    EXPECT_NEAR(thr.values[g.index(4, 4, 2)], 100.0, 1e-12);
    // Far from the outlier the neighborhood is flat.
    EXPECT_NEAR(thr.values[g.index(0, 0, 0)], 1.0, 1e-12);
}

TEST(CfarTest, ThresholdScalesWithTheMap) {
    SearchGrid g = synthetic_grid(8, 8, 8);
    LikelihoodMap map = constant_map(g, 0.0);
    Rng rng(55);
    for (auto& v : map.values) v = -std::log(1.0 - rng.uniform());
    LikelihoodMap scaled = map;
    const double c = 3.25;
    for (auto& v : scaled.values) v *= c;
    CfarConfig cfg;
    cfg.window = {2, 2, 2};
    cfg.guard = {0, 0, 0};
    ThresholdMap ta = os_cfar_threshold(map, cfg);
    ThresholdMap tb = os_cfar_threshold(scaled, cfg);
    for (int idx = 0; idx < g.cells(); ++idx) {
        ASSERT_EQ(ta.valid[idx], tb.valid[idx]);
        if (ta.valid[idx]) {
            EXPECT_NEAR(tb.values[idx], c * ta.values[idx],
                        1e-12 * std::max(ta.values[idx], 1e-300));
        }
    }
}

TEST(CfarTest, FalseAlarmRateMatchesTheOrderStatisticPrediction) {
    SearchGrid g = synthetic_grid(30, 20, 20);
    LikelihoodMap map = constant_map(g, 0.0);
    Rng rng(4242);
    for (auto& v : map.values) v = -std::log(1.0 - rng.uniform());
    CfarConfig cfg;  // window 3, guard 1, kappa 0.75
    cfg.alpha = 2.0;
    ThresholdMap thr = os_cfar_threshold(map, cfg);

    // Prediction: average over cells of the neighbor-fraction above the
    // cell's own threshold (the empirical-CDF tail at T_r), recomputed here
    // by direct counting.
    long long valid = 0, hits = 0;
    double predicted = 0.0;
    for (int i = 0; i < g.n_doppler(); ++i)
        for (int j = 0; j < g.n_delay(); ++j)
            for (int k = 0; k < g.n_angle(); ++k) {
                const int idx = g.index(i, j, k);
                if (!thr.valid[idx]) continue;
                ++valid;
                if (map.values[idx] >= thr.values[idx]) ++hits;
                int n_c = 0, above = 0;
                for (int di = -3; di <= 3; ++di)
                    for (int dj = -3; dj <= 3; ++dj)
                        for (int dk = -3; dk <= 3; ++dk) {
                            if (std::abs(di) <= 1 && std::abs(dj) <= 1 &&
                                std::abs(dk) <= 1)
                                continue;
                            const int ii = i + di, jj = j + dj, kk = k + dk;
                            if (ii < 0 || ii >= g.n_doppler() || jj < 0 ||
                                jj >= g.n_delay() || kk < 0 || kk >= g.n_angle())
                                continue;
                            ++n_c;
                            if (map.values[g.index(ii, jj, kk)] >
                                thr.values[idx])
                                ++above;
                        }
                predicted += static_cast<double>(above) / n_c;
            }
    ASSERT_GE(valid, 10000);
    predicted /= valid;
    const double measured = static_cast<double>(hits) / valid;
    EXPECT_GT(predicted, 0.01);
    EXPECT_LT(predicted, 0.2);
    EXPECT_LT(std::abs(measured - predicted), 0.5 * predicted);
}

TEST(CfarTest, RaisingAlphaShrinksTheAboveThresholdSet) {
    SearchGrid g = synthetic_grid(10, 10, 10);
    LikelihoodMap map = constant_map(g, 0.0);
    Rng rng(77);
    for (auto& v : map.values) v = -std::log(1.0 - rng.uniform());
    CfarConfig lo, hi;
    lo.window = hi.window = {2, 2, 2};
    lo.guard = hi.guard = {1, 1, 1};
    lo.alpha = 1.5;
    hi.alpha = 2.5;
    auto set_lo = above_threshold_set(map, os_cfar_threshold(map, lo));
    auto set_hi = above_threshold_set(map, os_cfar_threshold(map, hi));
    EXPECT_LT(set_hi.size(), set_lo.size());
    for (const auto& cell : set_hi)
        EXPECT_NE(std::find(set_lo.begin(), set_lo.end(), cell), set_lo.end());
}

TEST(CfarTest, StarvedNeighborhoodsAreExcluded) {
    LikelihoodMap map = constant_map(synthetic_grid(3, 3, 1), 1.0);
    CfarConfig cfg;  // window 3, guard 1: every neighborhood here is < 8
    ThresholdMap thr = os_cfar_threshold(map, cfg);
    for (int idx = 0; idx < map.grid.cells(); ++idx) EXPECT_EQ(thr.valid[idx], 0);
    EXPECT_TRUE(above_threshold_set(map, thr).empty());
}

TEST(CfarTest, ConfigValidationRejectsDegenerateShapes) {
    CfarConfig cfg;
    EXPECT_NO_THROW(cfg.validate());
    cfg.kappa = 1.0;
    EXPECT_THROW(cfg.validate(), ConfigError);
    cfg = CfarConfig{};
    cfg.kappa = 0.0;
    EXPECT_THROW(cfg.validate(), ConfigError);
    cfg = CfarConfig{};
    cfg.guard = {3, 1, 1};  // window no longer strictly contains the guard
    EXPECT_THROW(cfg.validate(), ConfigError);
    cfg = CfarConfig{};
    cfg.window = {1, 0, 0};
    cfg.guard = {0, 0, 0};  // only two neighbors
    EXPECT_THROW(cfg.validate(), ConfigError);
    cfg = CfarConfig{};
    cfg.alpha = 0.0;
    EXPECT_THROW(cfg.validate(), ConfigError);
    cfg = CfarConfig{};
    cfg.guard = {-1, 1, 1};
    EXPECT_THROW(cfg.validate(), ConfigError);
}

// ---------------------------------------------------------------------------
// Refinement
// ---------------------------------------------------------------------------

TEST(RefineTest, OnGridPeakRefinesToTheCoarseCell) {
    Scene sc = dft_scene();
    sc.link.noise_density_w_per_hz = 0.0;
    auto payload = qpsk_payload(sc, 31);
    SearchGrid grid = SearchGrid::coarse(sc.otfs, -0.5, 0.5, 9);
    const int ci = 1, cj = 2, ck = 3;
    Target t(cplx(0.7, 0.7), grid.doppler_hz[ci], grid.delay_s[cj],
             grid.angle_rad[ck], sc.otfs);
    Rng noise(0);
    auto ys = simulate_rx(sc, {t}, payload, noise);
    PsiCache cache(sc.otfs, sc.pulse, SearchGrid::step_of(grid.doppler_hz) / 10,
                   SearchGrid::step_of(grid.delay_s) / 10);
    RefinedPoint fine =
        refine_local(sc, ys, payload, grid, {ci, cj, ck}, 10, cache);
    EXPECT_DOUBLE_EQ(fine.nu, grid.doppler_hz[ci]);
    EXPECT_DOUBLE_EQ(fine.tau, grid.delay_s[cj]);
    EXPECT_DOUBLE_EQ(fine.phi, grid.angle_rad[ck]);
}

TEST(RefineTest, MidCellTargetRecoveredToWithinAFineStep) {
    Scene sc = dft_scene();
    sc.link.noise_density_w_per_hz = 0.0;
    auto payload = qpsk_payload(sc, 33);
    SearchGrid grid = SearchGrid::coarse(sc.otfs, -0.5, 0.5, 9);
    const double dnu = SearchGrid::step_of(grid.doppler_hz);
    const double dtau = SearchGrid::step_of(grid.delay_s);
    const double dphi = SearchGrid::step_of(grid.angle_rad);
    const double nu_true = grid.doppler_hz[1] + 0.5 * dnu;
    const double tau_true = grid.delay_s[2] + 0.5 * dtau;
    const double phi_true = grid.angle_rad[5] + 0.5 * dphi;
    Target t(cplx(1.0, 0.0), nu_true, tau_true, phi_true, sc.otfs);
    Rng noise(0);
    auto ys = simulate_rx(sc, {t}, payload, noise);

    LikelihoodMap map = build_likelihood_map(sc, ys, payload, grid);
    auto best = map.argmax();
    ASSERT_TRUE(best.has_value());
    PsiCache cache(sc.otfs, sc.pulse, dnu / 10, dtau / 10);
    RefinedPoint fine = refine_local(sc, ys, payload, grid, *best, 10, cache);
    EXPECT_LE(std::abs(fine.nu - nu_true), dnu / 10 + 1e-9 * dnu);
    EXPECT_LE(std::abs(fine.tau - tau_true), dtau / 10 + 1e-9 * dtau);
    EXPECT_LE(std::abs(fine.phi - phi_true), dphi / 10 + 1e-9 * dphi);
}

TEST(RefineTest, RefinedStatisticNeverFallsBelowTheCoarseCell) {
    Scene sc = dft_scene();
    auto payload = qpsk_payload(sc, 35);
    Target t(cplx(3e-6, -1e-6), 1.7e5, 6.5e-7, 0.22, sc.otfs);
    Rng noise(91);
    auto ys = simulate_rx(sc, {t}, payload, noise);
    SearchGrid grid = SearchGrid::coarse(sc.otfs, -0.5, 0.5, 9);
    PsiCache cache(sc.otfs, sc.pulse, SearchGrid::step_of(grid.doppler_hz) / 10,
                   SearchGrid::step_of(grid.delay_s) / 10);
    LikelihoodMap map = build_likelihood_map(sc, ys, payload, grid, cache);
    auto best = map.argmax();
    ASSERT_TRUE(best.has_value());
    RefinedPoint fine = refine_local(sc, ys, payload, grid, *best, 10, cache);
    EXPECT_GE(fine.stat, map.at((*best)[0], (*best)[1], (*best)[2]));
}

// ---------------------------------------------------------------------------
// Cancellation
// ---------------------------------------------------------------------------

TEST(SicTest, ExactParametersCancelExactly) {
    Scene sc = dft_scene();
    sc.link.noise_density_w_per_hz = 0.0;
    auto payload = qpsk_payload(sc, 37);
    const double nu = 1.37e5, tau = 4.81e-7, phi = -0.23;  // off-grid on purpose
    Target t(cplx(0.6, -1.1), nu, tau, phi, sc.otfs);
    Rng noise(0);
    auto ys = simulate_rx(sc, {t}, payload, noise);

    Detection det;
    det.nu = nu;
    det.tau = tau;
    det.phi = phi;
    det.gain = estimate_gain(sc, ys, payload, nu, tau, phi);
    auto residual = sic_cancel(sc, ys, payload, det);
    double rn = 0.0, yn = 0.0;
    for (int b = 0; b < sc.num_blocks(); ++b) {
        rn += residual[b].squaredNorm();
        yn += ys[b].squaredNorm();
    }
    EXPECT_LT(std::sqrt(rn), 1e-8 * std::sqrt(yn));
}

TEST(SicTest, CancelThenReAddRestoresTheReceived) {
    Scene sc = dft_scene();
    auto payload = qpsk_payload(sc, 39);
    Target t(cplx(1e-6, 1e-6), 9e4, 2.5e-7, 0.4, sc.otfs);
    Rng noise(17);
    auto ys = simulate_rx(sc, {t}, payload, noise);
    Detection det;
    det.nu = 1.1e5;
    det.tau = 3.0e-7;
    det.phi = 0.3;
    det.gain = cplx(0.8, 0.1);  // deliberately not matched to the data
    auto residual = sic_cancel(sc, ys, payload, det);
    PsiOperator psi(sc.otfs, sc.pulse, det.nu, det.tau);
    for (int b = 0; b < sc.num_blocks(); ++b) {
        const MatrixXcd comp =
            det.gain * EffectiveChannel(sc, b, psi, det.phi).apply(payload[b]);
        const MatrixXcd readd = residual[b] + comp;
        EXPECT_LT((readd - ys[b]).norm(),
                  1e-12 * (ys[b].norm() + comp.norm()));
    }
}

// ---------------------------------------------------------------------------
// Sequential detection
// ---------------------------------------------------------------------------

TEST(DetectTest, ZeroBudgetReturnsNothing) {
    Scene sc = dft_scene();
    auto payload = qpsk_payload(sc, 41);
    Rng noise(1);
    auto ys = simulate_rx(sc, {}, payload, noise);
    SearchGrid grid = SearchGrid::coarse(sc.otfs, -0.5, 0.5, 7);
    DetectorLimits limits;
    limits.max_detections = 0;
    EXPECT_TRUE(detect_all(sc, ys, payload, grid, CfarConfig{}, limits).empty());
}

TEST(DetectTest, PureNoiseWithConservativeAlphaStaysQuiet) {
    Scene sc = dft_scene();
    auto payload = qpsk_payload(sc, 43);
    SearchGrid grid = SearchGrid::coarse(sc.otfs, -0.5, 0.5, 7);
    CfarConfig cfar;
    cfar.alpha = 10.0;
    int total = 0;
    for (int trial = 0; trial < 10; ++trial) {
        Rng noise(derive_seed(500, trial, 0, 0));
        auto ys = simulate_rx(sc, {}, payload, noise);
        total += static_cast<int>(
            detect_all(sc, ys, payload, grid, cfar).size());
    }
    EXPECT_EQ(total, 0);
}

TEST(DetectTest, TwoSeparatedTargetsAreBothFoundAccurately) {
    Scene sc = dft_scene(4);
    auto payload = qpsk_payload(sc, 45);
    SearchGrid grid = SearchGrid::coarse(sc.otfs, -0.6, 0.6, 13);
    const double dphi_fine = SearchGrid::step_of(grid.angle_rad) / 10.0;
    Target strong(cplx(2e-5, 1e-5), grid.doppler_hz[1], grid.delay_s[1],
                  -0.3, sc.otfs);
    Target weak(cplx(-0.7e-5, 0.7e-5), grid.doppler_hz[1], grid.delay_s[2],
                0.4, sc.otfs);
    Rng noise(47);
    auto ys = simulate_rx(sc, {strong, weak}, payload, noise);
    CfarConfig cfar;
    cfar.alpha = 6.0;
    auto dets = detect_all(sc, ys, payload, grid, cfar);
    ASSERT_GE(dets.size(), 2u);

    const double aoa_tol = 0.5 * kPi / 180.0;
    auto err = [&](const Detection& d, const Target& t) {
        return std::abs(d.phi - t.phi_rad);
    };
    // The stronger target must come out first.
    EXPECT_EQ(dets[0].order, 0);
    EXPECT_LE(err(dets[0], strong), aoa_tol);
    EXPECT_LE(err(dets[1], weak), aoa_tol);
    EXPECT_LE(std::abs(dets[0].phi + 0.3), dphi_fine + 1e-12);
    EXPECT_LE(std::abs(dets[1].phi - 0.4), dphi_fine + 1e-12);
    EXPECT_LE(std::abs(dets[0].nu - strong.nu_hz), 1e-6 * grid.doppler_hz[1]);
    EXPECT_LE(std::abs(dets[1].tau - weak.tau_s), 1e-6 * grid.delay_s[2]);
    EXPECT_LE(std::abs(dets[1].nu - weak.nu_hz), 1e-6 * grid.doppler_hz[1]);
}

TEST(DetectTest, NearFarWeakTargetEmergesAfterCancellation) {
    Scene sc = dft_scene(4);
    auto payload = qpsk_payload(sc, 49);
    SearchGrid grid = SearchGrid::coarse(sc.otfs, -0.6, 0.6, 13);
    // Same Doppler-delay cell, different angles: the strong return masks the
    // weak one until it is cancelled.
    Target strong(cplx(4e-5, 0.0), grid.doppler_hz[1], grid.delay_s[1], -0.2,
                  sc.otfs);
    Target weak(cplx(0.0, 8e-7), grid.doppler_hz[1], grid.delay_s[1], 0.4,
                sc.otfs);
    CfarConfig cfar;
    cfar.alpha = 6.0;
    DetectorLimits limits;
    limits.max_detections = 4;
    // Angle recovery is limited by the refinement lattice, one tenth of the
    // coarse spacing here.
    const double aoa_tol = SearchGrid::step_of(grid.angle_rad) / 10.0 + 1e-12;
    int weak_found = 0;
    const int trials = 5;
    for (int trial = 0; trial < trials; ++trial) {
        Rng noise(derive_seed(600, trial, 0, 0));
        auto ys = simulate_rx(sc, {strong, weak}, payload, noise);
        auto dets = detect_all(sc, ys, payload, grid, cfar, limits);
        for (const auto& d : dets)
            if (std::abs(d.phi - weak.phi_rad) <= aoa_tol) {
                ++weak_found;
                break;
            }
    }
    EXPECT_EQ(weak_found, trials) << "weak target missed after cancellation";
}

TEST(DetectTest, DetectionsCarryConsistentMetadata) {
    Scene sc = dft_scene(4);
    auto payload = qpsk_payload(sc, 51);
    SearchGrid grid = SearchGrid::coarse(sc.otfs, -0.6, 0.6, 13);
    Target t1(cplx(1e-5, 0.0), grid.doppler_hz[1], grid.delay_s[2], -0.1,
              sc.otfs);
    Target t2(cplx(0.0, 1e-5), grid.doppler_hz[0], grid.delay_s[3], 0.3,
              sc.otfs);
    Rng noise(53);
    auto ys = simulate_rx(sc, {t1, t2}, payload, noise);
    CfarConfig cfar;
    cfar.alpha = 6.0;
    auto dets = detect_all(sc, ys, payload, grid, cfar);
    ASSERT_GE(dets.size(), 2u);
    const double dnu = SearchGrid::step_of(grid.doppler_hz);
    const double dtau = SearchGrid::step_of(grid.delay_s);
    const double dphi = SearchGrid::step_of(grid.angle_rad);
    for (size_t i = 0; i < dets.size(); ++i) {
        const Detection& d = dets[i];
        EXPECT_EQ(d.order, static_cast<int>(i));
        EXPECT_GT(d.stat, 0.0);
        // Refined parameters stay within one coarse cell of the coarse hit.
        EXPECT_LE(std::abs(d.nu - d.coarse_nu), dnu * (1.0 + 1e-12));
        EXPECT_LE(std::abs(d.tau - d.coarse_tau), dtau * (1.0 + 1e-12));
        EXPECT_LE(std::abs(d.phi - d.coarse_phi), dphi * (1.0 + 1e-12));
        EXPECT_EQ(d.coarse_nu, grid.doppler_hz[d.cell[0]]);
        EXPECT_EQ(d.coarse_tau, grid.delay_s[d.cell[1]]);
        EXPECT_EQ(d.coarse_phi, grid.angle_rad[d.cell[2]]);
    }
}
