// Transmit/receive pulse shapes and their cross ambiguity function
//   C_{u,v}(tau, nu) = integral u(s) v*(s - tau) e^{-j2pi nu s} ds.
#pragma once

#include "otfsradar/common.hpp"

namespace otfsradar {

enum class Pulse {
    Rectangular // unit-energy rectangle of duration T: g(t) = 1/sqrt(T) on [0,T)
};

// Cross ambiguity of a pulse with itself (tx and rx use the same shape).
// Only the rectangular pulse has a closed form here; for it the overlap of
// g(s) and g(s - tau) is the interval [max(0,tau), min(T, T+tau)] and
//   C(tau, nu) = (1/T) * int_lo^hi e^{-j2pi nu s} ds
//              = (len/T) * e^{-j pi nu (lo+hi)} * sinc(nu * len).
inline cplx cross_ambiguity(Pulse pulse, double T, double tau, double nu) {
    if (pulse != Pulse::Rectangular)
        throw NotImplementedError("cross_ambiguity: only the rectangular pulse is supported");
    if (T <= 0.0)
        throw ConfigError("cross_ambiguity: pulse duration must be positive");
    const double lo = std::max(0.0, tau);
    const double hi = std::min(T, T + tau);
    const double len = hi - lo;
    if (len <= 0.0) return {0.0, 0.0};
    return (len / T) * sinc(nu * len) * expj(-kPi * nu * (lo + hi));
}

} // namespace otfsradar
