#pragma once

#include <cmath>
#include <complex>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace mgsim {

using Real = double;
using Complex = std::complex<Real>;

inline constexpr Real kPi = 3.14159265358979323846;

/// Base error for every failure this library reports deliberately.
class Error : public std::runtime_error {
public:
    explicit Error(const std::string& what) : std::runtime_error(what) {}
};

/// Malformed or inconsistent model input (bad bus reference, bad ZIP fractions, ...).
class ModelError : public Error {
public:
    using Error::Error;
};

/// The algebraic network solve failed to converge.
class NetworkSolveError : public Error {
public:
    using Error::Error;
};

/// A Newton iteration on an equilibrium problem diverged or stalled.
class ConvergenceError : public Error {
public:
    using Error::Error;
};

/// Linearization was requested exactly on a piecewise breakpoint whose active
/// branch cannot be inferred from the regulator state.
class BreakpointAmbiguityError : public Error {
public:
    using Error::Error;
};

/// The algebraic Jacobian block is singular; carries a near-null direction.
class SingularAlgebraicError : public Error {
public:
    SingularAlgebraicError(const std::string& what, std::vector<Real> null_direction)
        : Error(what), null_direction(std::move(null_direction)) {}
    std::vector<Real> null_direction;
};

/// Per-unit base quantities shared by every module.
struct PerUnitBase {
    Real s_base_va = 10.0e6;   ///< system apparent-power base
    Real v_base_v = 480.0;     ///< line-to-line voltage base
    Real f_base_hz = 60.0;     ///< nominal frequency

    [[nodiscard]] Real w_base() const { return 2.0 * kPi * f_base_hz; }
    [[nodiscard]] Real z_base() const { return v_base_v * v_base_v / s_base_va; }
};

/// Converts a physical inductance [H] to per-unit on this base.
[[nodiscard]] inline Real inductance_pu(const PerUnitBase& base, Real henry) {
    return base.w_base() * henry / base.z_base();
}

/// Converts a physical capacitance [F] to per-unit on this base.
[[nodiscard]] inline Real capacitance_pu(const PerUnitBase& base, Real farad) {
    return base.w_base() * farad * base.z_base();
}

[[nodiscard]] inline Real clamp(Real x, Real lo, Real hi) {
    return x < lo ? lo : (x > hi ? hi : x);
}

/// Active/reactive power pair, p.u.
struct PowerPQ {
    Real p = 0.0;
    Real q = 0.0;
};

}  // namespace mgsim
