#pragma once

#include <string>
#include <vector>

#include <Eigen/Dense>

#include "mgsim/common.hpp"
#include "mgsim/inverter.hpp"
#include "mgsim/network.hpp"
#include "mgsim/regulators.hpp"

namespace mgsim {

// ======================================================================
// Composed microgrid
// ======================================================================

/// One grid-forming source with its attached supplementary regulators.
struct InverterUnit {
    InverterParams inverter;
    PowerRegulatorParams power_reg;
    VfRegulatorParams vf_reg;
};

struct MicrogridModel {
    NetworkModel network;  ///< external buses only
    std::vector<InverterUnit> units;

    [[nodiscard]] int n_units() const { return static_cast<int>(units.size()); }

    void validate() const {
        validate_network(network);
        if (units.empty()) throw ModelError("microgrid has no inverters");
        for (const InverterUnit& u : units) {
            static_cast<void>(network.index_of(u.inverter.bus));  // throws on unknown bus
            if (u.inverter.s_rated <= 0.0) {
                throw ModelError("inverter '" + u.inverter.name + "' has no capacity");
            }
        }
    }

    [[nodiscard]] Real total_capacity() const {
        Real s = 0.0;
        for (const InverterUnit& u : units) s += u.inverter.s_rated;
        return s;
    }
};

// ======================================================================
// Extended network: external buses + one terminal node per inverter
// ======================================================================

/// The network seen by the equilibrium and reduced-order engines. Each
/// inverter contributes a terminal node (its filter-capacitor bus) tied to
/// its external bus through the coupling branch, so droop laws and power
/// measurements apply at the node the controls actually regulate.
struct ExtendedNetwork {
    NetworkModel net;
    Eigen::MatrixXcd y;
    std::vector<int> terminal;  ///< dense index of unit k's terminal node
    std::vector<int> bus;       ///< dense index of unit k's external bus

    [[nodiscard]] int size() const { return net.size(); }
    [[nodiscard]] int n_external() const {
        return net.size() - static_cast<int>(terminal.size());
    }
};

[[nodiscard]] inline ExtendedNetwork build_extended(const MicrogridModel& model) {
    model.validate();
    ExtendedNetwork ext;
    ext.net = model.network;
    int next_id = 0;
    for (const Bus& b : model.network.buses) next_id = std::max(next_id, b.id);
    for (const InverterUnit& u : model.units) {
        ++next_id;
        ext.net.buses.push_back({next_id, u.inverter.name + "_t", 1.0, 0.0, 0.0});
        const Complex yc = 1.0 / Complex(u.inverter.r_c, u.inverter.l_c);
        ext.net.branches.push_back({u.inverter.bus, next_id, yc.real(), yc.imag()});
    }
    ext.y = build_admittance(ext.net);
    for (int k = 0; k < model.n_units(); ++k) {
        ext.terminal.push_back(model.network.size() + k);
        ext.bus.push_back(ext.net.index_of(model.units[static_cast<size_t>(k)].inverter.bus));
    }
    return ext;
}

// ======================================================================
// Load scaling shared by every engine
// ======================================================================

/// Uniform load disturbance: every base power is multiplied by
/// factor * (1 - shed). Per-bus load steps mutate the model itself.
struct LoadScaling {
    Real factor = 1.0;
    Real shed = 0.0;

    [[nodiscard]] Real apply(Real base) const { return base * factor * (1.0 - shed); }
};

/// Total complex base load of a network under a scaling.
[[nodiscard]] inline PowerPQ total_base_load(const NetworkModel& net,
                                             const LoadScaling& scaling = {}) {
    PowerPQ s;
    for (const ZipLoadParams& load : net.loads) {
        s.p += scaling.apply(load.p0);
        s.q += scaling.apply(load.q0);
    }
    return s;
}

/// Scaling factor that brings the total apparent base load to
/// load_factor * total capacity.
[[nodiscard]] inline Real load_factor_scale(const MicrogridModel& model, Real load_factor) {
    const PowerPQ s = total_base_load(model.network);
    const Real mag = std::hypot(s.p, s.q);
    if (mag <= 0.0) throw ModelError("cannot scale a zero base load");
    return load_factor * model.total_capacity() / mag;
}

// ======================================================================
// Algebraic network solve (current balance) used by the dynamic engines
// ======================================================================

struct NetworkSolveOptions {
    Real tol = 1e-12;
    int max_iter = 50;
    int max_halvings = 10;
};

/// Newton solve of the complex current balance at the `unknown` buses.
/// Known buses keep their voltages from `v` (which also supplies the warm
/// start). `i_fixed` holds externally injected currents (inverter couplings),
/// loads draw I = conj(S/V) with S from the ZIP laws at frequency f.
/// On success `v` holds the solution. Throws NetworkSolveError on divergence.
inline void solve_network(const NetworkModel& net, const Eigen::MatrixXcd& y,
                          const std::vector<int>& unknown, const Eigen::VectorXcd& i_fixed,
                          Real f, const LoadScaling& scaling, Eigen::VectorXcd& v,
                          const NetworkSolveOptions& opts = {}) {
    const int n = net.size();
    const int m = static_cast<int>(unknown.size());
    if (m == 0) return;

    // per-bus load pointers for the residual
    std::vector<std::vector<const ZipLoadParams*>> bus_loads(static_cast<size_t>(n));
    for (const ZipLoadParams& load : net.loads) {
        bus_loads[static_cast<size_t>(net.index_of(load.bus))].push_back(&load);
    }

    const auto residual = [&](const Eigen::VectorXcd& volt, Eigen::VectorXcd& out) {
        const Eigen::VectorXcd flow = y * volt;
        for (int r = 0; r < m; ++r) {
            const int k = unknown[static_cast<size_t>(r)];
            Complex i_load(0.0, 0.0);
            const Real vm = std::abs(volt[k]);
            for (const ZipLoadParams* load : bus_loads[static_cast<size_t>(k)]) {
                PowerPQ s = eval_zip_load(*load, vm, f);
                s.p = scaling.apply(s.p);
                s.q = scaling.apply(s.q);
                // I = conj(S / V)
                i_load += std::conj(Complex(s.p, s.q) / volt[k]);
            }
            out[r] = flow[k] - i_fixed[k] + i_load;
        }
    };

    Eigen::VectorXcd res(m), res_trial(m);
    residual(v, res);
    Real norm = res.cwiseAbs().maxCoeff();

    for (int iter = 0; iter < opts.max_iter; ++iter) {
        if (norm <= opts.tol) return;

        // Real-valued Jacobian in rectangular coordinates: the linear part is
        // Y itself; load blocks are dense 2x2 per bus, filled by central FD.
        Eigen::MatrixXd jac(2 * m, 2 * m);
        for (int r = 0; r < m; ++r) {
            for (int c = 0; c < m; ++c) {
                const Complex yk = y(unknown[static_cast<size_t>(r)],
                                     unknown[static_cast<size_t>(c)]);
                jac(2 * r, 2 * c) = yk.real();
                jac(2 * r, 2 * c + 1) = -yk.imag();
                jac(2 * r + 1, 2 * c) = yk.imag();
                jac(2 * r + 1, 2 * c + 1) = yk.real();
            }
        }
        for (int c = 0; c < m; ++c) {
            const int k = unknown[static_cast<size_t>(c)];
            if (bus_loads[static_cast<size_t>(k)].empty()) continue;
            const Real h = 1e-7;
            for (int part = 0; part < 2; ++part) {
                Eigen::VectorXcd vp = v;
                Eigen::VectorXcd vn = v;
                const Complex dh = part == 0 ? Complex(h, 0.0) : Complex(0.0, h);
                vp[k] += dh;
                vn[k] -= dh;
                Complex up(0.0, 0.0), un(0.0, 0.0);
                for (const ZipLoadParams* load : bus_loads[static_cast<size_t>(k)]) {
                    PowerPQ sp = eval_zip_load(*load, std::abs(vp[k]), f);
                    PowerPQ sn = eval_zip_load(*load, std::abs(vn[k]), f);
                    up += std::conj(Complex(scaling.apply(sp.p), scaling.apply(sp.q)) / vp[k]);
                    un += std::conj(Complex(scaling.apply(sn.p), scaling.apply(sn.q)) / vn[k]);
                }
                const Complex d = (up - un) / (2.0 * h);
                jac(2 * c, 2 * c + part) += d.real();
                jac(2 * c + 1, 2 * c + part) += d.imag();
            }
        }

        Eigen::VectorXd rhs(2 * m);
        for (int r = 0; r < m; ++r) {
            rhs[2 * r] = -res[r].real();
            rhs[2 * r + 1] = -res[r].imag();
        }
        const Eigen::VectorXd step = jac.partialPivLu().solve(rhs);
        if (!step.allFinite()) {
            throw NetworkSolveError("network Jacobian produced a non-finite step");
        }

        Real alpha = 1.0;
        bool accepted = false;
        for (int half = 0; half <= opts.max_halvings; ++half) {
            Eigen::VectorXcd trial = v;
            for (int r = 0; r < m; ++r) {
                trial[unknown[static_cast<size_t>(r)]] +=
                    alpha * Complex(step[2 * r], step[2 * r + 1]);
            }
            residual(trial, res_trial);
            const Real trial_norm = res_trial.cwiseAbs().maxCoeff();
            if (std::isfinite(trial_norm) && (trial_norm < norm || trial_norm <= opts.tol)) {
                v = trial;
                res = res_trial;
                norm = trial_norm;
                accepted = true;
                break;
            }
            alpha *= 0.5;
        }
        if (!accepted) {
            throw NetworkSolveError("network solve stalled at residual " + std::to_string(norm));
        }
    }
    if (norm > opts.tol) {
        throw NetworkSolveError("network solve did not converge, residual " +
                                std::to_string(norm));
    }
}

}  // namespace mgsim
