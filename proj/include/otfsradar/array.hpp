// Uniform linear array geometry, angle grids and the mono-static link budget.
#pragma once

#include "otfsradar/otfs.hpp"
#include "otfsradar/rng.hpp"

namespace otfsradar {

// Half-wavelength ULA response, a_n(phi) = e^{j n pi sin(phi)} for
// n = 0..num_antennas-1.  phi is measured from boresight, in radians.
inline VectorXcd steering_vector(double phi, int num_antennas) {
    if (num_antennas < 1)
        throw ConfigError("steering_vector: num_antennas must be positive");
    if (phi < -kPi / 2.0 || phi > kPi / 2.0)
        throw ConfigError("steering_vector: phi must lie in [-pi/2, pi/2]");
    VectorXcd a(num_antennas);
    const double s = std::sin(phi);
    for (int n = 0; n < num_antennas; ++n)
        a[n] = expj(n * kPi * s);
    return a;
}

// G angles theta_g = -pi/2 + pi (g-1)/G, g = 1..G (uniform over the front
// half-space, endpoint at +pi/2 excluded).
struct AngleGrid {
    int G = 181;

    AngleGrid() = default;
    explicit AngleGrid(int G_) : G(G_) {
        if (G < 2) throw ConfigError("AngleGrid: need at least two points");
    }
    double angle(int g) const { return -kPi / 2.0 + kPi * double(g) / G; } // g in [0, G)
    int size() const { return G; }
    double step() const { return kPi / G; }
    // Index of the grid point closest to phi.
    int nearest(double phi) const {
        int g = static_cast<int>(std::llround((phi + kPi / 2.0) / step()));
        return std::clamp(g, 0, G - 1);
    }
};

// num_antennas x G matrix whose column g is a(theta_g).
inline MatrixXcd array_factor_matrix(const AngleGrid& grid, int num_antennas) {
    MatrixXcd A(num_antennas, grid.size());
    for (int g = 0; g < grid.size(); ++g)
        A.col(g) = steering_vector(grid.angle(g), num_antennas);
    return A;
}

// Mono-static radar link budget (carrier, powers and noise in SI units).
struct LinkBudget {
    double carrier_hz = 28.25e9;
    double tx_power_w = dbm_to_watt(24.0);
    double noise_density_w_per_hz = 2e-21; // N0
    double noise_figure = db_to_linear(3.0);
    double rcs_m2 = 1.0;
    double bandwidth_hz = 64e6;

    void validate() const {
        if (carrier_hz <= 0 || tx_power_w <= 0 || noise_density_w_per_hz <= 0 ||
            noise_figure < 1.0 || rcs_m2 <= 0 || bandwidth_hz <= 0)
            throw ConfigError("LinkBudget: all entries must be positive (noise figure >= 1)");
    }
    double wavelength() const { return kSpeedOfLight / carrier_hz; }
    double noise_power() const { // sigma_w^2 = N0 * W * NF
        return noise_density_w_per_hz * bandwidth_hz * noise_figure;
    }
};

// Pre-beamforming receive SNR of a point target at range r:
//   SNR = lambda^2 sigma_rcs P_avg / ((4 pi)^3 r^4 sigma_w^2).
inline double radar_snr(const LinkBudget& link, double range_m) {
    if (range_m <= 0.0) throw ConfigError("radar_snr: range must be positive");
    const double lam = link.wavelength();
    const double fourpi = 4.0 * kPi;
    return lam * lam * link.rcs_m2 * link.tx_power_w /
           (fourpi * fourpi * fourpi * std::pow(range_m, 4) * link.noise_power());
}

// Two-way channel gain: deterministic magnitude from the budget,
// |h|^2 = lambda^2 sigma_rcs / ((4 pi)^3 r^4), with a seeded uniform phase.
inline cplx gain_from_range(const LinkBudget& link, double range_m, Rng& rng) {
    if (range_m <= 0.0) throw ConfigError("gain_from_range: range must be positive");
    const double lam = link.wavelength();
    const double fourpi = 4.0 * kPi;
    const double mag2 = lam * lam * link.rcs_m2 /
                        (fourpi * fourpi * fourpi * std::pow(range_m, 4));
    return std::sqrt(mag2) * rng.unit_phase();
}

struct Resolutions {
    double velocity_mps; // c W / (2 N M f_c)
    double range_m;      // c / (2 W)
    double angle_rad;    // 1.22 lambda / L with aperture L = N_a lambda / 2
};

inline Resolutions resolutions(const OtfsConfig& cfg, int num_antennas, double carrier_hz) {
    if (num_antennas < 1 || carrier_hz <= 0)
        throw ConfigError("resolutions: bad array parameters");
    const double W = cfg.bandwidth();
    Resolutions r;
    r.velocity_mps = kSpeedOfLight * W / (2.0 * cfg.N * cfg.M * carrier_hz);
    r.range_m = kSpeedOfLight / (2.0 * W);
    r.angle_rad = 2.44 / num_antennas; // 1.22 lambda / (N_a lambda / 2)
    return r;
}

} // namespace otfsradar
