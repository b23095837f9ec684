#pragma once

#include <optional>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "mgsim/model.hpp"

namespace mgsim {

// ======================================================================
// Problem description
// ======================================================================

enum class EquilibriumMode {
    kDroop,        ///< droop laws pick the operating point
    kConstrained,  ///< inverter injections pinned to given (p, q)
    kRegulated,    ///< power regulators engaged and binding at s_ref
};

/// Fixed supplementary trims entering the droop laws (held regulator outputs).
struct SuppTrim {
    Real w = 0.0;
    Real v = 0.0;
};

struct EquilibriumSolution {
    Real f = 1.0;                  ///< system frequency, p.u.
    Eigen::VectorXd v;             ///< extended-network voltage magnitudes
    Eigen::VectorXd theta;         ///< extended-network angles, reference at 0
    std::vector<PowerPQ> output;   ///< per-unit injection at its terminal node
    std::vector<Real> xi_s;        ///< per-unit regulator integrals (kRegulated)
    int iterations = 0;
    Real residual_norm = 0.0;
};

struct EquilibriumOptions {
    LoadScaling scaling;
    std::vector<SuppTrim> trims;          ///< per unit; empty means all zero
    std::vector<PowerPQ> injections;      ///< kConstrained: per-unit (p, q)
    std::vector<Real> s_ref;              ///< kRegulated: binding capacity per engaged unit
    std::vector<int> engaged;             ///< kRegulated: unit indices that bind
    /// Warm start from a nearby solved point on the same model (sweeps seed
    /// each grid point with the previous one); empty means a flat start.
    std::optional<EquilibriumSolution> initial;
    int max_iter = 50;
    Real tol = 1e-10;
    int max_halvings = 8;
};

// ======================================================================
// Newton core
// ======================================================================

namespace detail {

struct Layout {
    int n = 0;       ///< extended bus count
    int m = 0;       ///< unit count
    int ref = 0;     ///< dense index of the reference node
    int n_xi = 0;    ///< engaged unit count (kRegulated)
    EquilibriumMode mode{};

    [[nodiscard]] int unknowns() const {
        const int base = 1 + n + (n - 1);
        if (mode == EquilibriumMode::kConstrained) return base;
        return base + 2 * m + n_xi;
    }
    [[nodiscard]] int off_v() const { return 1; }
    [[nodiscard]] int off_theta() const { return 1 + n; }
    [[nodiscard]] int off_p() const { return 2 * n; }
    [[nodiscard]] int off_q() const { return 2 * n + m; }
    [[nodiscard]] int off_xi() const { return 2 * n + 2 * m; }

    /// column of theta_i, skipping the reference node
    [[nodiscard]] int theta_col(int i) const {
        return off_theta() + (i < ref ? i : i - 1);
    }
};

inline void unpack(const Layout& lay, const Eigen::VectorXd& x, Real& f, Eigen::VectorXd& v,
                   Eigen::VectorXd& theta) {
    f = x[0];
    v = x.segment(lay.off_v(), lay.n);
    theta.resize(lay.n);
    for (int i = 0; i < lay.n; ++i) theta[i] = i == lay.ref ? 0.0 : x[lay.theta_col(i)];
}

}  // namespace detail

/// Solves the stationary microgrid equations on the extended network.
///
/// Unknowns: system frequency, all voltage magnitudes, all angles but the
/// reference (unit 0's terminal node), plus per-unit injections with either
/// droop closure (kDroop), binding-capacity closure (kRegulated), or no
/// injection unknowns at all (kConstrained, injections given). Power-balance
/// rows at every bus carry the ZIP load evaluated at the solved voltage and
/// frequency, so the global frequency is pinned by aggregate balance.
[[nodiscard]] inline EquilibriumSolution solve_equilibrium(const MicrogridModel& model,
                                                           EquilibriumMode mode,
                                                           const EquilibriumOptions& opts = {}) {
    const ExtendedNetwork ext = build_extended(model);
    const int n = ext.size();
    const int m = model.n_units();

    detail::Layout lay;
    lay.n = n;
    lay.m = m;
    lay.ref = ext.terminal[0];
    lay.mode = mode;
    lay.n_xi = mode == EquilibriumMode::kRegulated ? static_cast<int>(opts.engaged.size()) : 0;

    if (mode == EquilibriumMode::kConstrained &&
        static_cast<int>(opts.injections.size()) != m) {
        throw ModelError("constrained mode needs one injection per inverter");
    }
    if (mode == EquilibriumMode::kRegulated &&
        opts.engaged.size() != opts.s_ref.size()) {
        throw ModelError("regulated mode needs one s_ref per engaged unit");
    }
    for (const int k : opts.engaged) {
        if (k < 0 || k >= m) throw ModelError("engaged unit index out of range");
    }
    std::vector<SuppTrim> trims = opts.trims;
    trims.resize(static_cast<size_t>(m));

    // per-bus load lists on the extended network
    std::vector<std::vector<const ZipLoadParams*>> bus_loads(static_cast<size_t>(n));
    for (const ZipLoadParams& load : ext.net.loads) {
        bus_loads[static_cast<size_t>(ext.net.index_of(load.bus))].push_back(&load);
    }

    const int n_unknown = lay.unknowns();
    const int n_rows = 2 * n + (mode == EquilibriumMode::kConstrained ? 0 : 2 * m) + lay.n_xi;
    if (n_rows != n_unknown) throw ModelError("equilibrium system is not square");

    // flat start
    Eigen::VectorXd x = Eigen::VectorXd::Zero(n_unknown);
    x[0] = 1.0;
    for (int i = 0; i < n; ++i) x[lay.off_v() + i] = ext.net.buses[static_cast<size_t>(i)].v_nominal;
    if (mode != EquilibriumMode::kConstrained) {
        for (int k = 0; k < m; ++k) {
            x[lay.off_p() + k] = model.units[static_cast<size_t>(k)].inverter.p0;
            x[lay.off_q() + k] = model.units[static_cast<size_t>(k)].inverter.q0;
        }
        // engaged units start on their capacity circle; a start at the origin
        // would leave the binding rows without a gradient
        for (size_t e = 0; e < opts.engaged.size(); ++e) {
            const int k = opts.engaged[e];
            Real p = x[lay.off_p() + k];
            Real q = x[lay.off_q() + k];
            Real s = std::hypot(p, q);
            if (s < 1e-9) {
                p = 0.8;
                q = 0.6;
                s = 1.0;
            }
            x[lay.off_p() + k] = opts.s_ref[e] * p / s;
            x[lay.off_q() + k] = opts.s_ref[e] * q / s;
        }
    }
    if (opts.initial) {
        const EquilibriumSolution& g = *opts.initial;
        if (g.v.size() != n || static_cast<int>(g.output.size()) != m) {
            throw ModelError("equilibrium warm start does not match this model");
        }
        x[0] = g.f;
        for (int i = 0; i < n; ++i) x[lay.off_v() + i] = g.v[i];
        for (int i = 0; i < n; ++i) {
            if (i != lay.ref) x[lay.theta_col(i)] = g.theta[i] - g.theta[lay.ref];
        }
        if (mode != EquilibriumMode::kConstrained) {
            for (int k = 0; k < m; ++k) {
                x[lay.off_p() + k] = g.output[static_cast<size_t>(k)].p;
                x[lay.off_q() + k] = g.output[static_cast<size_t>(k)].q;
            }
            for (size_t e = 0; e < opts.engaged.size(); ++e) {
                const int k = opts.engaged[e];
                if (k < static_cast<int>(g.xi_s.size())) {
                    x[lay.off_xi() + static_cast<int>(e)] = g.xi_s[static_cast<size_t>(k)];
                }
            }
        }
    }

    Eigen::VectorXd v(n), theta(n);
    Real f = 1.0;

    const auto residual = [&](const Eigen::VectorXd& xv, Eigen::VectorXd& out) {
        detail::unpack(lay, xv, f, v, theta);
        const InjectionResult net_inj = network_injections(ext.y, v, theta);
        out.setZero(n_rows);
        for (int i = 0; i < n; ++i) {
            Real p_inj = 0.0;
            Real q_inj = 0.0;
            for (int k = 0; k < m; ++k) {
                if (ext.terminal[static_cast<size_t>(k)] != i) continue;
                if (mode == EquilibriumMode::kConstrained) {
                    p_inj += opts.injections[static_cast<size_t>(k)].p;
                    q_inj += opts.injections[static_cast<size_t>(k)].q;
                } else {
                    p_inj += xv[lay.off_p() + k];
                    q_inj += xv[lay.off_q() + k];
                }
            }
            Real p_load = 0.0;
            Real q_load = 0.0;
            for (const ZipLoadParams* load : bus_loads[static_cast<size_t>(i)]) {
                const PowerPQ s = eval_zip_load(*load, v[i], f);
                p_load += opts.scaling.apply(s.p);
                q_load += opts.scaling.apply(s.q);
            }
            out[i] = p_inj - p_load - net_inj.p[i];
            out[n + i] = q_inj - q_load - net_inj.q[i];
        }
        if (mode != EquilibriumMode::kConstrained) {
            for (int k = 0; k < m; ++k) {
                const InverterParams& par = model.units[static_cast<size_t>(k)].inverter;
                const PowerRegulatorParams& reg = model.units[static_cast<size_t>(k)].power_reg;
                Real reg_w = 0.0;
                Real reg_v = 0.0;
                if (mode == EquilibriumMode::kRegulated) {
                    for (size_t e = 0; e < opts.engaged.size(); ++e) {
                        if (opts.engaged[e] != k) continue;
                        const Real u = reg.ki_s * xv[lay.off_xi() + static_cast<int>(e)];
                        reg_w = reg.k_w * u;
                        reg_v = reg.k_v * u;
                    }
                }
                const Real p_k = xv[lay.off_p() + k];
                const Real q_k = xv[lay.off_q() + k];
                const SuppTrim& trim = trims[static_cast<size_t>(k)];
                out[2 * n + k] =
                    f - (par.w0 + par.k_df * (par.p0 - p_k) + trim.w + reg_w);
                out[2 * n + m + k] = v[ext.terminal[static_cast<size_t>(k)]] -
                                     (par.v0 + par.k_dv * (par.q0 - q_k) + trim.v + reg_v);
            }
            for (size_t e = 0; e < opts.engaged.size(); ++e) {
                const int k = opts.engaged[e];
                const Real p_k = xv[lay.off_p() + k];
                const Real q_k = xv[lay.off_q() + k];
                out[2 * n + 2 * m + static_cast<int>(e)] =
                    std::hypot(p_k, q_k) - opts.s_ref[e];
            }
        }
    };

    const auto jacobian = [&](const Eigen::VectorXd& xv, Eigen::MatrixXd& jac) {
        detail::unpack(lay, xv, f, v, theta);
        const InjectionResult net_inj = network_injections(ext.y, v, theta);
        jac.setZero(n_rows, n_unknown);
        for (int i = 0; i < n; ++i) {
            // load sensitivities (diagonal in V, shared column for f)
            for (const ZipLoadParams* load : bus_loads[static_cast<size_t>(i)]) {
                const PowerPQ dv = zip_voltage_gradient(*load, v[i], f);
                const PowerPQ df = zip_frequency_gradient(*load, v[i]);
                jac(i, lay.off_v() + i) -= opts.scaling.apply(dv.p);
                jac(n + i, lay.off_v() + i) -= opts.scaling.apply(dv.q);
                jac(i, 0) -= opts.scaling.apply(df.p);
                jac(n + i, 0) -= opts.scaling.apply(df.q);
            }
            // network flow sensitivities
            for (int j = 0; j < n; ++j) {
                const Real g = ext.y(i, j).real();
                const Real b = ext.y(i, j).imag();
                if (i == j) {
                    jac(i, lay.off_v() + i) -= net_inj.p[i] / v[i] + g * v[i];
                    jac(n + i, lay.off_v() + i) -= net_inj.q[i] / v[i] - b * v[i];
                    if (i != lay.ref) {
                        jac(i, lay.theta_col(i)) -= -net_inj.q[i] - b * v[i] * v[i];
                        jac(n + i, lay.theta_col(i)) -= net_inj.p[i] - g * v[i] * v[i];
                    }
                    continue;
                }
                if (g == 0.0 && b == 0.0) continue;
                const Real t = theta[i] - theta[j];
                const Real ct = std::cos(t);
                const Real st = std::sin(t);
                jac(i, lay.off_v() + j) -= v[i] * (g * ct + b * st);
                jac(n + i, lay.off_v() + j) -= v[i] * (g * st - b * ct);
                if (j != lay.ref) {
                    jac(i, lay.theta_col(j)) -= v[i] * v[j] * (g * st - b * ct);
                    jac(n + i, lay.theta_col(j)) += v[i] * v[j] * (g * ct + b * st);
                }
            }
            if (mode != EquilibriumMode::kConstrained) {
                for (int k = 0; k < m; ++k) {
                    if (ext.terminal[static_cast<size_t>(k)] != i) continue;
                    jac(i, lay.off_p() + k) += 1.0;
                    jac(n + i, lay.off_q() + k) += 1.0;
                }
            }
        }
        if (mode != EquilibriumMode::kConstrained) {
            for (int k = 0; k < m; ++k) {
                const InverterParams& par = model.units[static_cast<size_t>(k)].inverter;
                const PowerRegulatorParams& reg = model.units[static_cast<size_t>(k)].power_reg;
                jac(2 * n + k, 0) = 1.0;
                jac(2 * n + k, lay.off_p() + k) = par.k_df;
                jac(2 * n + m + k, lay.off_v() + ext.terminal[static_cast<size_t>(k)]) = 1.0;
                jac(2 * n + m + k, lay.off_q() + k) = par.k_dv;
                if (mode == EquilibriumMode::kRegulated) {
                    for (size_t e = 0; e < opts.engaged.size(); ++e) {
                        if (opts.engaged[e] != k) continue;
                        jac(2 * n + k, lay.off_xi() + static_cast<int>(e)) =
                            -reg.k_w * reg.ki_s;
                        jac(2 * n + m + k, lay.off_xi() + static_cast<int>(e)) =
                            -reg.k_v * reg.ki_s;
                    }
                }
            }
            for (size_t e = 0; e < opts.engaged.size(); ++e) {
                const int k = opts.engaged[e];
                const Real p_k = xv[lay.off_p() + k];
                const Real q_k = xv[lay.off_q() + k];
                const Real s = std::max(std::hypot(p_k, q_k), 1e-12);
                jac(2 * n + 2 * m + static_cast<int>(e), lay.off_p() + k) = p_k / s;
                jac(2 * n + 2 * m + static_cast<int>(e), lay.off_q() + k) = q_k / s;
            }
        }
    };

    Eigen::VectorXd res(n_rows), res_trial(n_rows);
    Eigen::MatrixXd jac(n_rows, n_unknown);
    residual(x, res);
    Real norm = res.cwiseAbs().maxCoeff();

    int iter = 0;
    for (; iter < opts.max_iter; ++iter) {
        if (norm <= opts.tol) break;
        jacobian(x, jac);
        const Eigen::VectorXd step = jac.partialPivLu().solve(-res);
        if (!step.allFinite()) {
            throw ConvergenceError("equilibrium Jacobian produced a non-finite step");
        }
        Real alpha = 1.0;
        bool accepted = false;
        for (int half = 0; half <= opts.max_halvings; ++half) {
            const Eigen::VectorXd trial = x + alpha * step;
            residual(trial, res_trial);
            const Real trial_norm = res_trial.cwiseAbs().maxCoeff();
            if (std::isfinite(trial_norm) && (trial_norm < norm || trial_norm <= opts.tol)) {
                x = trial;
                res = res_trial;
                norm = trial_norm;
                accepted = true;
                break;
            }
            alpha *= 0.5;
        }
        if (!accepted) {
            throw ConvergenceError("equilibrium Newton stalled at residual " +
                                   std::to_string(norm));
        }
    }
    if (norm > opts.tol) {
        throw ConvergenceError("equilibrium Newton did not converge, residual " +
                               std::to_string(norm));
    }

    EquilibriumSolution sol;
    detail::unpack(lay, x, sol.f, sol.v, sol.theta);
    sol.iterations = iter;
    sol.residual_norm = norm;
    sol.output.resize(static_cast<size_t>(m));
    sol.xi_s.assign(static_cast<size_t>(m), 0.0);
    for (int k = 0; k < m; ++k) {
        if (mode == EquilibriumMode::kConstrained) {
            sol.output[static_cast<size_t>(k)] = opts.injections[static_cast<size_t>(k)];
        } else {
            sol.output[static_cast<size_t>(k)] = {x[lay.off_p() + k], x[lay.off_q() + k]};
        }
    }
    if (mode == EquilibriumMode::kRegulated) {
        for (size_t e = 0; e < opts.engaged.size(); ++e) {
            sol.xi_s[static_cast<size_t>(opts.engaged[e])] = x[lay.off_xi() + static_cast<int>(e)];
        }
    }
    return sol;
}

[[nodiscard]] inline EquilibriumSolution solve_droop_equilibrium(
    const MicrogridModel& model, const EquilibriumOptions& opts = {}) {
    return solve_equilibrium(model, EquilibriumMode::kDroop, opts);
}

/// Emergency transition: every inverter pinned at a prescribed capacity-circle
/// allocation; frequency and voltages settle by aggregate balance.
[[nodiscard]] inline EquilibriumSolution solve_constrained_transition(
    const MicrogridModel& model, const std::vector<PowerPQ>& injections,
    EquilibriumOptions opts = {}) {
    opts.injections = injections;
    return solve_equilibrium(model, EquilibriumMode::kConstrained, opts);
}

// ======================================================================
// Feasibility sweep
// ======================================================================

struct FeasibilityPoint {
    Real offset = 0.0;           ///< common angle offset applied to all units, rad
    std::vector<Real> alpha;     ///< absolute circle angle per unit, rad
    bool solved = false;         ///< constrained solve converged
    bool feasible = false;       ///< solved and inside the security box
    Real delta_f = 0.0;          ///< f - 1
    Eigen::VectorXd delta_v;     ///< monitored-bus deviations from nominal
};

struct FeasibilityMap {
    Real load_factor = 1.0;
    Real shed = 0.0;
    Real df_max = 0.01;
    Real dv_max = 0.05;
    std::vector<FeasibilityPoint> points;

    [[nodiscard]] int feasible_count() const {
        int c = 0;
        for (const FeasibilityPoint& pt : points) c += pt.feasible ? 1 : 0;
        return c;
    }
};

struct FeasibilityOptions {
    int n_angles = 181;
    Real offset_min = -0.45;  ///< sweep range around the PF-matched base angle, rad
    Real offset_max = 0.45;
    Real df_max = 0.01;
    Real dv_max = 0.05;
    Real shed = 0.0;
    std::vector<int> monitored_buses;  ///< bus ids; empty = every inverter bus
};

/// Sweeps capacity-circle allocations at a given load factor. Every unit runs
/// at full capacity, angles = PF-matched base angle + a common offset. A point
/// is feasible when the constrained equilibrium exists and the frequency and
/// every monitored bus voltage stay inside the security box.
[[nodiscard]] inline FeasibilityMap sweep_feasibility(const MicrogridModel& model,
                                                      Real load_factor,
                                                      const FeasibilityOptions& fopts = {}) {
    if (fopts.n_angles < 1) throw ModelError("feasibility sweep needs at least one angle");
    FeasibilityMap map;
    map.load_factor = load_factor;
    map.shed = fopts.shed;
    map.df_max = fopts.df_max;
    map.dv_max = fopts.dv_max;

    EquilibriumOptions opts;
    opts.scaling.factor = load_factor_scale(model, load_factor);
    opts.scaling.shed = fopts.shed;

    const PowerPQ base = total_base_load(model.network);
    const Real alpha_base = std::atan2(base.q, base.p);

    std::vector<int> monitored = fopts.monitored_buses;
    if (monitored.empty()) {
        for (const InverterUnit& u : model.units) monitored.push_back(u.inverter.bus);
    }
    const ExtendedNetwork ext = build_extended(model);

    const int m = model.n_units();
    for (int a = 0; a < fopts.n_angles; ++a) {
        FeasibilityPoint pt;
        pt.offset = fopts.n_angles == 1
                        ? 0.5 * (fopts.offset_min + fopts.offset_max)
                        : fopts.offset_min + (fopts.offset_max - fopts.offset_min) * a /
                                                 (fopts.n_angles - 1);
        std::vector<PowerPQ> inj(static_cast<size_t>(m));
        for (int k = 0; k < m; ++k) {
            const Real s = model.units[static_cast<size_t>(k)].inverter.s_rated;
            const Real alpha = alpha_base + pt.offset;
            pt.alpha.push_back(alpha);
            inj[static_cast<size_t>(k)] = {s * std::cos(alpha), s * std::sin(alpha)};
        }
        try {
            const EquilibriumSolution sol = solve_constrained_transition(model, inj, opts);
            pt.solved = true;
            pt.delta_f = sol.f - 1.0;
            pt.delta_v.resize(static_cast<int>(monitored.size()));
            for (size_t b = 0; b < monitored.size(); ++b) {
                const int idx = ext.net.index_of(monitored[b]);
                pt.delta_v[static_cast<int>(b)] =
                    sol.v[idx] - ext.net.buses[static_cast<size_t>(idx)].v_nominal;
            }
            pt.feasible = std::abs(pt.delta_f) <= fopts.df_max &&
                          pt.delta_v.cwiseAbs().maxCoeff() <= fopts.dv_max;
        } catch (const ConvergenceError&) {
            pt.solved = false;
            pt.feasible = false;
        }
        map.points.push_back(std::move(pt));
    }
    return map;
}

// ======================================================================
// Minimum-shed search
// ======================================================================

/// Smallest shed fraction, on a fixed lattice (default 0.1% steps), that makes
/// the feasibility map nonempty at the given load factor. The scan walks the
/// lattice upward: feasibility in shed is a band, not a monotone frontier
/// (shedding past the band over-lightens the system), so bisection would skip
/// valid answers.
[[nodiscard]] inline Real min_shed_search(const MicrogridModel& model, Real load_factor,
                                          FeasibilityOptions fopts = {}, Real step = 1e-3,
                                          Real shed_max = 0.5) {
    if (step <= 0.0) throw ModelError("shed lattice step must be positive");
    const int hi_cap = static_cast<int>(std::ceil(shed_max / step));
    for (int i = 0; i <= hi_cap; ++i) {
        fopts.shed = i * step;
        if (sweep_feasibility(model, load_factor, fopts).feasible_count() > 0) {
            return i * step;
        }
    }
    throw ConvergenceError("no feasible allocation below the shed ceiling");
}

}  // namespace mgsim
