// Shared aliases, constants and error types for the beam-space OTFS radar library.
#pragma once

#include <complex>
#include <stdexcept>
#include <string>
#include <cmath>
#include <cstdint>
#include <Eigen/Dense>

namespace otfsradar {

using cplx = std::complex<double>;
using Eigen::MatrixXcd;
using Eigen::MatrixXd;
using Eigen::VectorXcd;
using Eigen::VectorXd;
using Eigen::VectorXi;

inline constexpr double kPi = 3.141592653589793238462643383279502884;
inline constexpr double kSpeedOfLight = 299792458.0; // m/s
inline constexpr cplx kJ{0.0, 1.0};

// Invalid configuration or out-of-domain argument. The CLI maps this to exit code 2.
struct ConfigError : std::invalid_argument {
    explicit ConfigError(const std::string& what) : std::invalid_argument(what) {}
};

// A calibration loop failed to reach its target. The CLI maps this to exit code 3.
struct CalibrationError : std::runtime_error {
    explicit CalibrationError(const std::string& what) : std::runtime_error(what) {}
};

struct NotImplementedError : std::logic_error {
    explicit NotImplementedError(const std::string& what) : std::logic_error(what) {}
};

inline double db_to_linear(double db) { return std::pow(10.0, db / 10.0); }
inline double linear_to_db(double lin) { return 10.0 * std::log10(lin); }
inline double dbm_to_watt(double dbm) { return 1e-3 * std::pow(10.0, dbm / 10.0); }
inline double deg_to_rad(double deg) { return deg * kPi / 180.0; }
inline double rad_to_deg(double rad) { return rad * 180.0 / kPi; }

inline cplx expj(double phase) { return {std::cos(phase), std::sin(phase)}; }

// sin(pi x)/(pi x), the unit-area sampling kernel.
inline double sinc(double x) {
    if (std::abs(x) < 1e-9) {
        double p = kPi * x;
        return 1.0 - p * p / 6.0;
    }
    return std::sin(kPi * x) / (kPi * x);
}

} // namespace otfsradar
