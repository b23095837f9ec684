#pragma once

#include <algorithm>
#include <cmath>
#include <complex>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Dense>
#include <Eigen/Eigenvalues>

#include "mgsim/common.hpp"
#include "mgsim/dynamics.hpp"
#include "mgsim/equilibrium.hpp"
#include "mgsim/model.hpp"

namespace mgsim {

// ============================================================================
// Linearization of the semi-explicit DAE
// ============================================================================

/// Partial derivative blocks of the split system
///   dx/dt = f(x, y),   0 = g(x, y)
/// taken at a frozen-branch operating point, with the symbol names of both
/// partitions in block order.
struct LinearizedModel {
    Eigen::MatrixXd f_x;
    Eigen::MatrixXd f_y;
    Eigen::MatrixXd g_x;
    Eigen::MatrixXd g_y;
    Eigen::VectorXd x0;
    Eigen::VectorXd y0;
    SystemBranches branches;
    std::vector<std::string> state_labels;
    std::vector<std::string> algebraic_labels;
};

/// Central-difference Jacobians of the split DAE around (x0, y(x0)) with the
/// discontinuous branches pinned to their attractor sides. Steps are scaled
/// per variable as h_rel * max(1, |value|). Works on any system exposing the
/// MicrogridDynamics evaluation surface (state/algebraic dimensions, branch
/// inference, the split residuals, and labels).
template <typename System>
[[nodiscard]] LinearizedModel linearize(System& dyn, Real t, const Eigen::VectorXd& x0,
                                        Real h_rel = 1e-6) {
    LinearizedModel out;
    out.x0 = x0;
    out.branches = dyn.infer_branches(t, x0);
    out.state_labels = dyn.state_labels();
    out.algebraic_labels = dyn.algebraic_labels();

    DynamicsScratch scratch;
    out.y0 = dyn.algebraic_from_state(t, x0, scratch, &out.branches);

    const auto nx = static_cast<Eigen::Index>(dyn.n_states());
    const auto ny = static_cast<Eigen::Index>(dyn.n_algebraic());
    out.f_x.resize(nx, nx);
    out.f_y.resize(nx, ny);
    out.g_x.resize(ny, nx);
    out.g_y.resize(ny, ny);

    Eigen::VectorXd fp(nx), fm(nx), gp(ny), gm(ny);
    Eigen::VectorXd x = x0;
    for (Eigen::Index i = 0; i < nx; ++i) {
        const Real h = h_rel * std::max(Real(1), std::abs(x0[i]));
        x[i] = x0[i] + h;
        dyn.dae_residuals(t, x, out.y0, fp, gp, &out.branches);
        x[i] = x0[i] - h;
        dyn.dae_residuals(t, x, out.y0, fm, gm, &out.branches);
        x[i] = x0[i];
        out.f_x.col(i) = (fp - fm) / (2.0 * h);
        out.g_x.col(i) = (gp - gm) / (2.0 * h);
    }
    Eigen::VectorXd y = out.y0;
    for (Eigen::Index j = 0; j < ny; ++j) {
        const Real h = h_rel * std::max(Real(1), std::abs(out.y0[j]));
        y[j] = out.y0[j] + h;
        dyn.dae_residuals(t, x0, y, fp, gp, &out.branches);
        y[j] = out.y0[j] - h;
        dyn.dae_residuals(t, x0, y, fm, gm, &out.branches);
        y[j] = out.y0[j];
        out.f_y.col(j) = (fp - fm) / (2.0 * h);
        out.g_y.col(j) = (gp - gm) / (2.0 * h);
    }
    return out;
}

/// Eliminate the algebraic variables:  A = f_x - f_y g_y^{-1} g_x.
/// `rcond` (optional) receives the reciprocal condition estimate of g_y.
/// Throws SingularAlgebraicError carrying a null direction when the algebraic
/// constraints lose rank (a voltage-collapse fold of the network).
[[nodiscard]] inline Eigen::MatrixXd reduce_state_matrix(const LinearizedModel& jac,
                                                         Real rank_tol = 1e-8,
                                                         Real* rcond = nullptr) {
    if (jac.g_y.size() == 0) {
        if (rcond) *rcond = 1.0;
        return jac.f_x;
    }
    Eigen::FullPivLU<Eigen::MatrixXd> lu(jac.g_y);
    lu.setThreshold(rank_tol);
    if (rcond) *rcond = lu.rcond();
    if (lu.rank() < jac.g_y.rows()) {
        const Eigen::MatrixXd kernel = lu.kernel();
        std::vector<Real> dir(static_cast<size_t>(kernel.rows()));
        for (Eigen::Index i = 0; i < kernel.rows(); ++i) dir[static_cast<size_t>(i)] = kernel(i, 0);
        throw SingularAlgebraicError("algebraic constraints are singular at this point",
                                     std::move(dir));
    }
    return jac.f_x - jac.f_y * lu.solve(jac.g_x);
}

// ============================================================================
// Spectrum
// ============================================================================

struct Mode {
    Complex lambda;        ///< eigenvalue [1/s]
    Real damping = 0.0;    ///< -Re / |lambda|, 1 for pure decay
    Real frequency = 0.0;  ///< Im / 2 pi [Hz]
};

struct Spectrum {
    std::vector<Mode> modes;     ///< physical modes, least damped first
    std::vector<Complex> zeros;  ///< structural zero eigenvalues that were excluded
    Eigen::MatrixXd a;           ///< reduced state matrix
    Eigen::MatrixXcd vectors;    ///< right eigenvectors, column k for eigenvalue k
    Eigen::VectorXcd values;     ///< all eigenvalues, unsorted, matching `vectors`
};

namespace detail {

/// Rows of A that are identically zero (frozen integrators contribute one
/// structural zero eigenvalue each).
[[nodiscard]] inline int count_zero_rows(const Eigen::MatrixXd& a, Real tol) {
    int n = 0;
    for (Eigen::Index i = 0; i < a.rows(); ++i)
        if (a.row(i).cwiseAbs().maxCoeff() <= tol) ++n;
    return n;
}

}  // namespace detail

/// Eigen-decompose the reduced state matrix. Frozen regulator integrators
/// carry identically zero rows, so exactly that many zero eigenvalues are
/// structural; they are split off (and must all be numerically tiny) rather
/// than reported as physical modes.
[[nodiscard]] inline Spectrum compute_spectrum(const Eigen::MatrixXd& a, Real zero_tol = 1e-8) {
    Spectrum out;
    out.a = a;
    const Eigen::EigenSolver<Eigen::MatrixXd> solver(a);
    if (solver.info() != Eigen::Success) throw ConvergenceError("eigenvalue iteration failed");
    out.values = solver.eigenvalues();
    out.vectors = solver.eigenvectors();

    const int n_zero = detail::count_zero_rows(a, 1e-12);
    std::vector<int> order(static_cast<size_t>(out.values.size()));
    for (size_t i = 0; i < order.size(); ++i) order[i] = static_cast<int>(i);
    std::sort(order.begin(), order.end(), [&](int i, int j) {
        return std::abs(out.values[i]) < std::abs(out.values[j]);
    });

    for (size_t rank = 0; rank < order.size(); ++rank) {
        const Complex lambda = out.values[order[rank]];
        if (rank < static_cast<size_t>(n_zero)) {
            if (std::abs(lambda) > zero_tol)
                throw ConvergenceError("structural zero mode has magnitude " +
                                       std::to_string(std::abs(lambda)));
            out.zeros.push_back(lambda);
            continue;
        }
        Mode m;
        m.lambda = lambda;
        const Real mag = std::abs(lambda);
        m.damping = mag > 0.0 ? -lambda.real() / mag : 1.0;
        m.frequency = lambda.imag() / (2.0 * kPi);
        out.modes.push_back(m);
    }
    std::sort(out.modes.begin(), out.modes.end(),
              [](const Mode& a_, const Mode& b_) { return a_.lambda.real() > b_.lambda.real(); });
    return out;
}

/// Largest real part over the physical modes.
[[nodiscard]] inline Real spectral_abscissa(const Spectrum& sp) {
    Real worst = -1e30;
    for (const Mode& m : sp.modes) worst = std::max(worst, m.lambda.real());
    return worst;
}

/// Participation factor matrix |left_ik * right_ki| normalized per mode, for
/// attributing modes to states. Row = state index, column = eigenvalue index
/// in the order of `values`.
[[nodiscard]] inline Eigen::MatrixXd participation_factors(const Spectrum& sp) {
    const Eigen::MatrixXcd& v = sp.vectors;
    const Eigen::MatrixXcd w = v.inverse();  // rows are left eigenvectors
    Eigen::MatrixXd p(v.rows(), v.cols());
    for (Eigen::Index k = 0; k < v.cols(); ++k) {
        for (Eigen::Index i = 0; i < v.rows(); ++i) p(i, k) = std::abs(v(i, k) * w(k, i));
        const Real m = p.col(k).maxCoeff();
        if (m > 0.0) p.col(k) /= m;
    }
    return p;
}

/// Linearize the model at a solved equilibrium and return the physical
/// spectrum. The operating point must be converged well below the
/// linearization step, or the Jacobians would mix residual drift into the
/// mode estimates.
[[nodiscard]] inline Spectrum spectrum_at(MicrogridDynamics& dyn, const EquilibriumSolution& eq,
                                          Real t = 0.0) {
    if (!(eq.residual_norm <= 1e-8)) {
        throw ModelError("operating point residual " + std::to_string(eq.residual_norm) +
                         " is too large to linearize");
    }
    const Eigen::VectorXd x0 = dyn.initial_state(eq);
    const LinearizedModel jac = linearize(dyn, t, x0);
    return compute_spectrum(reduce_state_matrix(jac));
}

// ============================================================================
// Stability margin sweeps
// ============================================================================

/// One evaluated grid point of a gain sweep.
struct SweepPoint {
    Real scale = 1.0;                  ///< multiplier applied to the swept gains
    bool solved = false;               ///< equilibrium and spectrum both computed
    Real abscissa = 0.0;               ///< largest real part at that scale
    std::vector<Complex> eigenvalues;  ///< physical modes at that scale
};

/// Sweep outcome: the spectrum trajectory over the grid plus the first
/// stability crossing, bisected once a sign change of the abscissa brackets.
/// The bracket endpoints are actual evaluations, so a reported crossing is
/// always verified by a sign change between bracket_lo and bracket_hi.
struct EigenSweepResult {
    std::string swept_parameter;  ///< which gains the scale multiplies
    std::vector<SweepPoint> points;
    bool crossing_found = false;
    Real crossing_gain = 0.0;  ///< bisected boundary scale, when found
    Real bracket_lo = 0.0;     ///< stable side of the verified bracket
    Real bracket_hi = 0.0;     ///< unstable side of the verified bracket
    Real abscissa_lo = 0.0;    ///< abscissa evaluated at bracket_lo (< 0)
    Real abscissa_hi = 0.0;    ///< abscissa evaluated at bracket_hi (>= 0)
    std::string diagnostic;    ///< non-empty when the sweep was cut short
};

struct GainSweepOptions {
    Real scale_min = 2.0;
    Real scale_max = 20.0;
    int n_points = 40;
    Real bisect_tol = 1e-4;  ///< relative width of the bracketing interval
    Fidelity fidelity = Fidelity::kFull;
    /// Regulated sweeps bind every capacity reference this far below the
    /// base-model droop dispatch, so all regulators are active while the
    /// operating point stays comparable to the unregulated system.
    Real binding_margin = 0.02;
    /// Seed each equilibrium from the previous grid point. Disable to make
    /// grid points independent (order-free, safe to evaluate concurrently).
    bool warm_start = true;
};

namespace detail {

/// Shared sweep driver: walks a log-spaced grid, stops at the first
/// unsolvable point, and bisects the first abscissa sign change. `eval` fills
/// one SweepPoint and returns whether it solved.
template <typename Eval>
[[nodiscard]] EigenSweepResult run_gain_sweep(std::string swept_parameter,
                                              const GainSweepOptions& opts, Eval&& eval) {
    if (opts.n_points < 1) throw ModelError("gain sweep needs at least one point");
    if (!(opts.scale_min > 0.0) || opts.scale_max < opts.scale_min) {
        throw ModelError("gain sweep range must be positive and ascending");
    }
    EigenSweepResult out;
    out.swept_parameter = std::move(swept_parameter);

    const bool single = opts.n_points == 1 || opts.scale_max == opts.scale_min;
    const int n = single ? 1 : opts.n_points;
    const Real ratio = opts.scale_max / opts.scale_min;
    for (int i = 0; i < n; ++i) {
        const Real u = single ? 0.0 : static_cast<Real>(i) / static_cast<Real>(n - 1);
        SweepPoint pt;
        const bool ok = eval(opts.scale_min * std::pow(ratio, u), pt);
        out.points.push_back(std::move(pt));
        if (!ok) {
            out.diagnostic = "equilibrium or spectrum lost at scale " +
                             std::to_string(out.points.back().scale) + "; sweep truncated";
            break;
        }
    }

    // first sign change over consecutive solved points
    for (size_t i = 1; i < out.points.size(); ++i) {
        const SweepPoint& a = out.points[i - 1];
        const SweepPoint& b = out.points[i];
        if (!a.solved || !b.solved || (a.abscissa < 0.0) == (b.abscissa < 0.0)) continue;
        Real lo = a.scale;
        Real hi = b.scale;
        Real a_lo = a.abscissa;
        Real a_hi = b.abscissa;
        const bool lo_stable = a.abscissa < 0.0;
        while ((hi - lo) / hi > opts.bisect_tol) {
            const Real mid = std::sqrt(lo * hi);
            SweepPoint pt;
            if (!eval(mid, pt)) {
                out.diagnostic = "bisection point at scale " + std::to_string(mid) +
                                 " failed to solve; crossing kept at bracket width " +
                                 std::to_string((hi - lo) / hi);
                break;
            }
            if ((pt.abscissa < 0.0) == lo_stable) {
                lo = mid;
                a_lo = pt.abscissa;
            } else {
                hi = mid;
                a_hi = pt.abscissa;
            }
        }
        out.crossing_found = true;
        out.crossing_gain = std::sqrt(lo * hi);
        // report the bracket with its stable side first
        out.bracket_lo = lo_stable ? lo : hi;
        out.bracket_hi = lo_stable ? hi : lo;
        out.abscissa_lo = lo_stable ? a_lo : a_hi;
        out.abscissa_hi = lo_stable ? a_hi : a_lo;
        break;
    }
    return out;
}

}  // namespace detail

/// Which gain family a sweep scales, and whether the decentralized capacity
/// regulators are part of the swept system. Scaling a pair preserves its
/// internal ratio (k_dv/k_df, k_w/k_v).
enum class GainSweepKind {
    kDroop,            ///< scale [k_df, k_dv] on the droop-governed system
    kDroopRegulated,   ///< scale [k_df, k_dv] with capacity regulators engaged
    kAllocationRegulated,  ///< scale [k_w, k_v] with capacity regulators engaged
};

[[nodiscard]] inline const char* to_string(GainSweepKind kind) {
    switch (kind) {
        case GainSweepKind::kDroop: return "droop gains [k_df, k_dv]";
        case GainSweepKind::kDroopRegulated:
            return "droop gains [k_df, k_dv], capacity regulators engaged";
        case GainSweepKind::kAllocationRegulated:
            return "allocation gains [k_w, k_v], capacity regulators engaged";
    }
    return "?";
}

/// Sweep a custom gain multiplier over a log grid on the droop-governed
/// system, re-solving the equilibrium and spectrum at every point. `scaler`
/// maps (base model, scale) to the modified model.
template <typename Scaler>
[[nodiscard]] EigenSweepResult gain_sweep(const MicrogridModel& base, std::string swept_parameter,
                                          Scaler&& scaler, const GainSweepOptions& opts = {}) {
    std::optional<EquilibriumSolution> warm;
    auto eval = [&](Real scale, SweepPoint& pt) {
        pt.scale = scale;
        try {
            const MicrogridModel model = scaler(base, scale);
            MicrogridDynamics dyn(model, opts.fidelity);
            EquilibriumOptions eopts;
            if (opts.warm_start) eopts.initial = warm;
            const EquilibriumSolution eq = solve_droop_equilibrium(model, eopts);
            const Spectrum sp = spectrum_at(dyn, eq);
            pt.abscissa = spectral_abscissa(sp);
            pt.eigenvalues.reserve(sp.modes.size());
            for (const Mode& m : sp.modes) pt.eigenvalues.push_back(m.lambda);
            if (opts.warm_start) warm = eq;
            pt.solved = true;
        } catch (const Error&) {
            pt.solved = false;
        }
        return pt.solved;
    };
    return detail::run_gain_sweep(std::move(swept_parameter), opts, eval);
}

/// Stability-margin sweep of one of the studied gain families. Droop-only
/// sweeps rescale [k_df, k_dv] and re-solve the droop equilibrium per point.
/// Regulated sweeps first bind every unit's capacity reference just below its
/// base droop dispatch (see GainSweepOptions::binding_margin), then re-solve
/// the regulated equilibrium per point with the regulators engaged, so the
/// swept system carries the full capacity-regulation loop.
[[nodiscard]] inline EigenSweepResult gain_sweep(const MicrogridModel& base, GainSweepKind kind,
                                                 const GainSweepOptions& opts = {}) {
    std::vector<int> engaged;
    std::vector<Real> s_ref;
    if (kind != GainSweepKind::kDroop) {
        const EquilibriumSolution eq0 = solve_droop_equilibrium(base);
        for (int k = 0; k < base.n_units(); ++k) {
            engaged.push_back(k);
            s_ref.push_back((1.0 - opts.binding_margin) *
                            std::hypot(eq0.output[static_cast<size_t>(k)].p,
                                       eq0.output[static_cast<size_t>(k)].q));
        }
    }
    const auto scaler = [kind](const MicrogridModel& m0, Real s) {
        MicrogridModel m = m0;
        for (auto& u : m.units) {
            if (kind == GainSweepKind::kAllocationRegulated) {
                u.power_reg.k_w *= s;
                u.power_reg.k_v *= s;
            } else {
                u.inverter.k_df *= s;
                u.inverter.k_dv *= s;
            }
        }
        return m;
    };
    if (kind == GainSweepKind::kDroop) {
        return gain_sweep(base, to_string(kind), scaler, opts);
    }

    std::optional<EquilibriumSolution> warm;
    auto eval = [&](Real scale, SweepPoint& pt) {
        pt.scale = scale;
        try {
            const MicrogridModel model = scaler(base, scale);
            MicrogridDynamics dyn(model, opts.fidelity);
            EquilibriumOptions eopts;
            eopts.engaged = engaged;
            eopts.s_ref = s_ref;
            if (opts.warm_start) eopts.initial = warm;
            const EquilibriumSolution eq =
                solve_equilibrium(model, EquilibriumMode::kRegulated, eopts);
            for (int k = 0; k < model.n_units(); ++k) {
                // enabled long before the linearization instant, so the
                // ramp-in window is over and the regulator is fully attached
                dyn.enable_power_regulator(k, -1.0, s_ref[static_cast<size_t>(k)]);
            }
            const Spectrum sp = spectrum_at(dyn, eq);
            pt.abscissa = spectral_abscissa(sp);
            pt.eigenvalues.reserve(sp.modes.size());
            for (const Mode& m : sp.modes) pt.eigenvalues.push_back(m.lambda);
            if (opts.warm_start) warm = eq;
            pt.solved = true;
        } catch (const Error&) {
            pt.solved = false;
        }
        return pt.solved;
    };
    return detail::run_gain_sweep(to_string(kind), opts, eval);
}

}  // namespace mgsim
