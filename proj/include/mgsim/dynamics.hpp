#pragma once

#include <Eigen/Dense>

#include <array>
#include <cmath>
#include <complex>
#include <string>
#include <vector>

#include "mgsim/common.hpp"
#include "mgsim/equilibrium.hpp"
#include "mgsim/inverter.hpp"
#include "mgsim/model.hpp"
#include "mgsim/network.hpp"
#include "mgsim/regulators.hpp"

namespace mgsim {

// ======================================================================
// Fidelity and state layout
// ======================================================================

/// Model fidelity of the composed dynamics.
///  - kFull: every inverter carries its LC-filter, coupling-branch, control
///    integrator, power-filter, and regulator states; the network holds the
///    external buses only and the couplings inject current.
///  - kReduced: the inner loops and coupling are ideal, each inverter imposes
///    its droop-commanded voltage on its terminal node of the extended
///    network; only angle, power filters, and regulator states remain.
enum class Fidelity { kFull, kReduced };

[[nodiscard]] inline const char* to_string(Fidelity f) {
    return f == Fidelity::kFull ? "full" : "reduced";
}

/// Every per-unit state the composed model can carry. A given fidelity uses
/// a subset; the first unit never carries kDelta because the common frame is
/// pinned to it.
enum class StateField {
    kDelta,
    kPhiId,
    kPhiIq,
    kPhiVd,
    kPhiVq,
    kId,
    kIq,
    kVd,
    kVq,
    kIgd,
    kIgq,
    kPm,
    kQm,
    kXiS,
    kXiF,
    kXiV,
    kFMeas,
    kVMeas,
    kCount,
};

inline constexpr int kStateFieldCount = static_cast<int>(StateField::kCount);

[[nodiscard]] inline const char* field_name(StateField f) {
    switch (f) {
        case StateField::kDelta: return "delta";
        case StateField::kPhiId: return "phi_id";
        case StateField::kPhiIq: return "phi_iq";
        case StateField::kPhiVd: return "phi_vd";
        case StateField::kPhiVq: return "phi_vq";
        case StateField::kId: return "i_d";
        case StateField::kIq: return "i_q";
        case StateField::kVd: return "v_d";
        case StateField::kVq: return "v_q";
        case StateField::kIgd: return "i_gd";
        case StateField::kIgq: return "i_gq";
        case StateField::kPm: return "p_m";
        case StateField::kQm: return "q_m";
        case StateField::kXiS: return "xi_s";
        case StateField::kXiF: return "xi_f";
        case StateField::kXiV: return "xi_v";
        case StateField::kFMeas: return "f_meas";
        case StateField::kVMeas: return "v_meas";
        case StateField::kCount: break;
    }
    return "?";
}

/// Maps (unit, field) pairs to positions in the packed state vector.
/// Absent fields map to -1.
class StateLayout {
public:
    StateLayout() = default;

    StateLayout(const MicrogridModel& model, Fidelity fidelity) {
        const int m = model.n_units();
        offsets_.assign(static_cast<size_t>(m), {});
        int next = 0;
        for (int k = 0; k < m; ++k) {
            auto& offs = offsets_[static_cast<size_t>(k)];
            offs.fill(-1);
            for (int f = 0; f < kStateFieldCount; ++f) {
                if (!carries(fidelity, k, static_cast<StateField>(f))) continue;
                offs[static_cast<size_t>(f)] = next++;
            }
        }
        size_ = next;
    }

    [[nodiscard]] int size() const { return size_; }
    [[nodiscard]] int n_units() const { return static_cast<int>(offsets_.size()); }

    /// Position of a field in the state vector, -1 when the fidelity does not
    /// carry it (or for the first unit's angle).
    [[nodiscard]] int offset(int unit, StateField f) const {
        return offsets_[static_cast<size_t>(unit)][static_cast<size_t>(f)];
    }

    [[nodiscard]] Real get(const Eigen::VectorXd& x, int unit, StateField f) const {
        const int o = offset(unit, f);
        return o < 0 ? 0.0 : x[o];
    }

    void set(Eigen::VectorXd& x, int unit, StateField f, Real value) const {
        const int o = offset(unit, f);
        if (o >= 0) x[o] = value;
    }

    /// Whether this (fidelity, unit) combination carries the field.
    [[nodiscard]] static bool carries(Fidelity fidelity, int unit, StateField f) {
        if (f == StateField::kDelta) return unit != 0;
        if (fidelity == Fidelity::kFull) return f != StateField::kCount;
        switch (f) {
            case StateField::kPm:
            case StateField::kQm:
            case StateField::kXiS:
            case StateField::kXiF:
            case StateField::kXiV:
            case StateField::kFMeas:
            case StateField::kVMeas: return true;
            default: return false;
        }
    }

private:
    std::vector<std::array<int, static_cast<size_t>(kStateFieldCount)>> offsets_;
    int size_ = 0;
};

// ======================================================================
// Control surface and diagnostics
// ======================================================================

/// Ramp-in window applied to regulator outputs after an enable event, s.
inline constexpr Real kEnableRamp = 0.1;

/// Per-unit discrete controls. Events mutate these between integration
/// steps; the continuous dynamics read them.
struct UnitControl {
    bool active = true;          ///< false once the unit has tripped offline
    Real s_ref = 0.0;            ///< capacity reference for the power regulator
    bool power_reg = false;      ///< decentralized power regulator enabled
    Real power_reg_t0 = 0.0;     ///< enable instant (output ramps over kEnableRamp)
    bool vf_reg = false;         ///< V-f regulator enabled
    Real vf_reg_t0 = 0.0;
    SuppTrim trim;               ///< constant supplementary trims (tests, pinning)
    LimiterConfig limiter;       ///< current limiter (full fidelity only)
};

/// Pinned branch selections for one unit, used to evaluate the piecewise
/// dynamics as a smooth function around an operating point. Attractor
/// breakpoints (capacity error, deadbands, trigger, trim clamps) live in the
/// slow layer and are pinned here; the current-limiter circle is not an
/// attractor, so it stays live and infer_branches instead rejects points
/// sitting on it.
struct UnitBranches {
    bool es_active = false;   ///< capacity error on its binding branch
    int band_f = 0;           ///< frequency deadband: -1 below, 0 inside, +1 above
    int band_v = 0;           ///< voltage deadband branch
    TriggerAction action = TriggerAction::kNone;
    int w_clamp = 0;          ///< total frequency trim clamp: 0 free, +/-1 saturated
    int v_clamp = 0;          ///< total voltage trim clamp
};

using SystemBranches = std::vector<UnitBranches>;

/// Per-unit signals of one derivative evaluation, for traces and tests.
struct UnitReport {
    bool active = true;
    Real w_ref = 1.0;
    Real v_ref = 1.0;
    Real p_inst = 0.0;        ///< instantaneous terminal active power
    Real q_inst = 0.0;
    Real s_m = 0.0;           ///< filtered apparent power
    Real e_s = 0.0;           ///< capacity error feeding the power regulator
    Real e_f = 0.0;           ///< deadbanded frequency error
    Real e_v = 0.0;           ///< deadbanded voltage error
    Real dw1 = 0.0;           ///< power-regulator trims (post clamp)
    Real dv1 = 0.0;
    Real dw2 = 0.0;           ///< V-f regulator trims (post clamp)
    Real dv2 = 0.0;
    TriggerAction action = TriggerAction::kNone;
    bool limiter_active = false;
    Real i_dref = 0.0;
    Real i_qref = 0.0;
};

/// Snapshot of everything one derivative evaluation computed besides dx.
struct EvalReport {
    Real f_sys = 1.0;              ///< load frequency (capacity-weighted)
    Eigen::VectorXcd v_net;        ///< solved network voltages, common frame
    std::vector<UnitReport> units;
};

/// Reusable workspace: network warm start and injection buffer.
struct DynamicsScratch {
    Eigen::VectorXcd v;
    Eigen::VectorXcd i_fixed;
    bool warm = false;
};

// ======================================================================
// Composed dynamics
// ======================================================================

/// The microgrid as one ODE with an embedded algebraic network solve. State
/// order per unit follows StateField; the first unit's angle is dropped
/// because the common frame rotates with the first active unit's reference.
/// derivatives() solves the network internally; dae_residuals() exposes the
/// split f(x, y), g(x, y) form for linearization.
class MicrogridDynamics {
public:
    MicrogridDynamics(const MicrogridModel& model, Fidelity fidelity)
        : model_(model),
          fidelity_(fidelity),
          ext_(build_extended(model)),
          y_full_(build_admittance(model.network)),
          layout_(model, fidelity) {
        const int m = model_.n_units();
        controls_.resize(static_cast<size_t>(m));
        bus_.resize(static_cast<size_t>(m));
        for (int k = 0; k < m; ++k) {
            controls_[static_cast<size_t>(k)].s_ref = unit(k).inverter.s_rated;
            bus_[static_cast<size_t>(k)] = model_.network.index_of(unit(k).inverter.bus);
        }
        full_unknowns_.resize(static_cast<size_t>(model_.network.size()));
        for (int i = 0; i < model_.network.size(); ++i) full_unknowns_[static_cast<size_t>(i)] = i;
        rebuild_unknowns();
    }

    [[nodiscard]] Fidelity fidelity() const { return fidelity_; }
    [[nodiscard]] const MicrogridModel& model() const { return model_; }
    [[nodiscard]] const StateLayout& layout() const { return layout_; }
    [[nodiscard]] int n_units() const { return model_.n_units(); }
    [[nodiscard]] int n_states() const { return layout_.size(); }
    [[nodiscard]] int n_algebraic() const { return 2 * static_cast<int>(unknowns().size()); }

    /// Names of the carried states in packed order, "<unit>.<field>".
    [[nodiscard]] std::vector<std::string> state_labels() const {
        std::vector<std::string> out(static_cast<size_t>(layout_.size()));
        for (int k = 0; k < n_units(); ++k) {
            for (int f = 0; f < kStateFieldCount; ++f) {
                const int o = layout_.offset(k, static_cast<StateField>(f));
                if (o < 0) continue;
                out[static_cast<size_t>(o)] =
                    unit(k).inverter.name + "." + field_name(static_cast<StateField>(f));
            }
        }
        return out;
    }

    /// Names of the algebraic unknowns in packed order: the rectangular
    /// voltage components of each unknown network bus.
    [[nodiscard]] std::vector<std::string> algebraic_labels() const {
        const NetworkModel& net = eval_network();
        std::vector<std::string> out;
        out.reserve(2 * unknowns().size());
        for (const int b : unknowns()) {
            const std::string& bus = net.buses[static_cast<size_t>(b)].name;
            out.push_back(bus + ".v_re");
            out.push_back(bus + ".v_im");
        }
        return out;
    }

    // ------------------------------------------------------------------
    // Control surface
    // ------------------------------------------------------------------

    [[nodiscard]] const UnitControl& control(int k) const {
        return controls_[static_cast<size_t>(k)];
    }

    void enable_power_regulator(int k, Real t, Real s_ref) {
        UnitControl& c = controls_[static_cast<size_t>(k)];
        c.power_reg = true;
        c.power_reg_t0 = t;
        c.s_ref = s_ref;
    }

    void enable_vf_regulator(int k, Real t) {
        UnitControl& c = controls_[static_cast<size_t>(k)];
        c.vf_reg = true;
        c.vf_reg_t0 = t;
    }

    void set_capacity_reference(int k, Real s_ref) {
        if (s_ref <= 0.0) throw ModelError("capacity reference must be positive");
        controls_[static_cast<size_t>(k)].s_ref = s_ref;
    }

    void set_limiter(int k, const LimiterConfig& cfg) {
        controls_[static_cast<size_t>(k)].limiter = cfg;
    }

    void set_trim(int k, const SuppTrim& trim) { controls_[static_cast<size_t>(k)].trim = trim; }

    /// Takes a unit offline (breaker at the inverter: no injection, frozen
    /// states, terminal node floats) or brings it back.
    void set_active(int k, bool on) {
        controls_[static_cast<size_t>(k)].active = on;
        rebuild_unknowns();
    }

    [[nodiscard]] LoadScaling& scaling() { return scaling_; }
    [[nodiscard]] const LoadScaling& scaling() const { return scaling_; }

    /// Adds (dp, dq) to the base draw of the named load.
    void apply_load_step(const std::string& load_name, Real dp, Real dq) {
        bool found = false;
        for (ZipLoadParams& load : model_.network.loads) {
            if (load.name != load_name) continue;
            load.p0 += dp;
            load.q0 += dq;
            found = true;
        }
        for (ZipLoadParams& load : ext_.net.loads) {
            if (load.name != load_name) continue;
            load.p0 += dp;
            load.q0 += dq;
        }
        if (!found) throw ModelError("no load named '" + load_name + "'");
    }

    // ------------------------------------------------------------------
    // Initialization
    // ------------------------------------------------------------------

    /// Packs an equilibrium into a state vector that is stationary under the
    /// current control flags: plant states back-solved per unit, power
    /// filters at the equilibrium injections, power-regulator integrators
    /// from the solution, V-f integrators at zero, measurement filters
    /// settled.
    [[nodiscard]] Eigen::VectorXd initial_state(const EquilibriumSolution& eq) const {
        const int m = n_units();
        if (eq.v.size() != ext_.net.size() || static_cast<int>(eq.output.size()) != m) {
            throw ModelError("equilibrium solution does not match this model");
        }
        Eigen::VectorXd x = Eigen::VectorXd::Zero(n_states());
        const Real theta0 = eq.theta[ext_.terminal[0]];
        for (int k = 0; k < m; ++k) {
            const InverterParams& par = unit(k).inverter;
            const int t_k = ext_.terminal[static_cast<size_t>(k)];
            const Real v_t = eq.v[t_k];
            const Real delta = eq.theta[t_k] - theta0;
            const PowerPQ out = eq.output[static_cast<size_t>(k)];
            layout_.set(x, k, StateField::kDelta, delta);
            if (fidelity_ == Fidelity::kFull) {
                if (v_t <= 0.0) throw ModelError("equilibrium terminal voltage must be positive");
                const InverterState st =
                    stationary_inverter_state(par, v_t, out.p / v_t, -out.q / v_t, eq.f);
                layout_.set(x, k, StateField::kPhiId, st.phi_id);
                layout_.set(x, k, StateField::kPhiIq, st.phi_iq);
                layout_.set(x, k, StateField::kPhiVd, st.phi_vd);
                layout_.set(x, k, StateField::kPhiVq, st.phi_vq);
                layout_.set(x, k, StateField::kId, st.i_d);
                layout_.set(x, k, StateField::kIq, st.i_q);
                layout_.set(x, k, StateField::kVd, st.v_d);
                layout_.set(x, k, StateField::kVq, st.v_q);
                layout_.set(x, k, StateField::kIgd, st.i_gd);
                layout_.set(x, k, StateField::kIgq, st.i_gq);
            }
            layout_.set(x, k, StateField::kPm, out.p);
            layout_.set(x, k, StateField::kQm, out.q);
            layout_.set(x, k, StateField::kXiS,
                        k < static_cast<int>(eq.xi_s.size()) ? eq.xi_s[static_cast<size_t>(k)]
                                                             : 0.0);
            layout_.set(x, k, StateField::kFMeas, eq.f);
            layout_.set(x, k, StateField::kVMeas, v_t);
        }
        return x;
    }

    // ------------------------------------------------------------------
    // Evaluation
    // ------------------------------------------------------------------

    /// Time derivatives at (t, x) with the network solved internally.
    /// Throws NetworkSolveError when the algebraic solve diverges.
    void derivatives(Real t, const Eigen::VectorXd& x, Eigen::VectorXd& dx,
                     DynamicsScratch& scratch, EvalReport* report = nullptr,
                     const SystemBranches* freeze = nullptr) const {
        std::vector<SlowSignals> slow = slow_layer(t, x, freeze);
        const Real f_sys = system_frequency(slow);
        solve_voltages(x, slow, f_sys, scratch);
        eval_with_voltages(x, scratch.v, slow, f_sys, dx, report);
    }

    /// Network buses whose voltages are algebraic unknowns, as dense indices
    /// into the evaluation network (external network for full fidelity, the
    /// extended network for reduced).
    [[nodiscard]] const std::vector<int>& unknowns() const {
        return fidelity_ == Fidelity::kFull ? full_unknowns_ : reduced_unknowns_;
    }

    /// Solves the network at x and packs the unknown voltages as [Re, Im]
    /// pairs in unknowns() order.
    [[nodiscard]] Eigen::VectorXd algebraic_from_state(Real t, const Eigen::VectorXd& x,
                                                       DynamicsScratch& scratch,
                                                       const SystemBranches* freeze = nullptr) const {
        std::vector<SlowSignals> slow = slow_layer(t, x, freeze);
        solve_voltages(x, slow, system_frequency(slow), scratch);
        const std::vector<int>& unk = unknowns();
        Eigen::VectorXd y(2 * unk.size());
        for (size_t r = 0; r < unk.size(); ++r) {
            y[2 * static_cast<Eigen::Index>(r)] = scratch.v[unk[r]].real();
            y[2 * static_cast<Eigen::Index>(r) + 1] = scratch.v[unk[r]].imag();
        }
        return y;
    }

    /// Split DAE evaluation for linearization: given states x and algebraic
    /// unknowns y, fills dx = f(x, y) and the network current-balance
    /// residuals g(x, y) (one [Re, Im] pair per unknown bus). Consistent with
    /// derivatives(): g(x, algebraic_from_state(x)) = 0 and f matches.
    void dae_residuals(Real t, const Eigen::VectorXd& x, const Eigen::VectorXd& y,
                       Eigen::VectorXd& f_out, Eigen::VectorXd& g_out,
                       const SystemBranches* freeze = nullptr) const {
        std::vector<SlowSignals> slow = slow_layer(t, x, freeze);
        const Real f_sys = system_frequency(slow);
        const NetworkModel& net = eval_network();
        const std::vector<int>& unk = unknowns();
        if (y.size() != 2 * static_cast<Eigen::Index>(unk.size())) {
            throw ModelError("algebraic vector length does not match the unknown set");
        }

        Eigen::VectorXcd volt = Eigen::VectorXcd::Constant(net.size(), Complex(1.0, 0.0));
        place_known_voltages(x, slow, volt);
        for (size_t r = 0; r < unk.size(); ++r) {
            volt[unk[r]] = Complex(y[2 * static_cast<Eigen::Index>(r)],
                                   y[2 * static_cast<Eigen::Index>(r) + 1]);
        }

        Eigen::VectorXcd i_fixed = Eigen::VectorXcd::Zero(net.size());
        place_injections(x, i_fixed);

        const Eigen::MatrixXcd& y_mat = eval_admittance();
        const Eigen::VectorXcd flow = y_mat * volt;
        g_out.resize(2 * static_cast<Eigen::Index>(unk.size()));
        for (size_t r = 0; r < unk.size(); ++r) {
            const int b = unk[r];
            Complex i_load(0.0, 0.0);
            const Real vm = std::abs(volt[b]);
            for (const ZipLoadParams& load : net.loads) {
                if (net.index_of(load.bus) != b) continue;
                PowerPQ s = eval_zip_load(load, vm, f_sys);
                s.p = scaling_.apply(s.p);
                s.q = scaling_.apply(s.q);
                i_load += std::conj(Complex(s.p, s.q) / volt[b]);
            }
            const Complex res = flow[b] - i_fixed[b] + i_load;
            g_out[2 * static_cast<Eigen::Index>(r)] = res.real();
            g_out[2 * static_cast<Eigen::Index>(r) + 1] = res.imag();
        }

        eval_with_voltages(x, volt, slow, f_sys, f_out, nullptr);
    }

    /// Infers the branch selections active at x. Throws
    /// BreakpointAmbiguityError when x sits on a breakpoint that no charged
    /// integrator disambiguates, or on the current-limiter circle.
    [[nodiscard]] SystemBranches infer_branches(Real t, const Eigen::VectorXd& x) const {
        SystemBranches out(static_cast<size_t>(n_units()));
        for (int k = 0; k < n_units(); ++k) {
            const UnitControl& ctl = controls_[static_cast<size_t>(k)];
            UnitBranches& br = out[static_cast<size_t>(k)];
            if (!ctl.active) continue;
            const InverterUnit& u = unit(k);
            if (ctl.power_reg) {
                const Real s_m = std::hypot(layout_.get(x, k, StateField::kPm),
                                            layout_.get(x, k, StateField::kQm));
                const Real gap = s_m - ctl.s_ref;
                if (gap > kBreakTol) {
                    br.es_active = true;
                } else if (gap < -kBreakTol) {
                    br.es_active = false;
                } else if (std::abs(layout_.get(x, k, StateField::kXiS)) > kChargeTol) {
                    br.es_active = true;  // the regulator is holding the binding
                } else {
                    throw BreakpointAmbiguityError("unit '" + u.inverter.name +
                                                   "' sits on the capacity breakpoint with an "
                                                   "uncharged integrator");
                }
            }
            if (ctl.vf_reg) {
                br.band_f = infer_band(u.inverter.w0 - layout_.get(x, k, StateField::kFMeas),
                                       u.vf_reg.df_max, layout_.get(x, k, StateField::kXiF),
                                       u.inverter.name, "frequency");
                br.band_v = infer_band(u.inverter.v0 - layout_.get(x, k, StateField::kVMeas),
                                       u.vf_reg.dv_max, layout_.get(x, k, StateField::kXiV),
                                       u.inverter.name, "voltage");
                const bool state_f = br.band_f > 0;
                const bool state_v = br.band_v > 0;
                br.action = state_f && state_v  ? TriggerAction::kShed
                            : state_f || state_v ? TriggerAction::kReallocate
                                                 : TriggerAction::kNone;
            }
        }
        // classify the trim clamps and limiter margins from one pinned pass
        // with the clamps held free, so the raw trim totals are visible
        const std::vector<SlowSignals> slow = slow_layer(t, x, &out);
        for (int k = 0; k < n_units(); ++k) {
            const UnitControl& ctl = controls_[static_cast<size_t>(k)];
            if (!ctl.active) continue;
            const SlowSignals& sig = slow[static_cast<size_t>(k)];
            const VfRegulatorParams& vf = unit(k).vf_reg;
            UnitBranches& br = out[static_cast<size_t>(k)];
            br.w_clamp = classify_clamp(sig.dw1 + sig.dw2, vf.w_clamp, unit(k).inverter.name,
                                        "frequency trim");
            br.v_clamp = classify_clamp(sig.dv1 + sig.dv2, vf.v_clamp, unit(k).inverter.name,
                                        "voltage trim");
            check_limiter_margin(x, k, sig);
        }
        return out;
    }

private:
    static constexpr Real kBreakTol = 1e-7;   ///< proximity window around breakpoints
    static constexpr Real kChargeTol = 1e-10; ///< integrator charge that selects a branch

    struct SlowSignals {
        Real w_ref = 1.0;
        Real v_ref = 1.0;
        Real s_m = 0.0;
        Real e_s = 0.0;
        Real e_f = 0.0;
        Real e_v = 0.0;
        Real dw1 = 0.0;
        Real dv1 = 0.0;
        Real dw2 = 0.0;
        Real dv2 = 0.0;
        TriggerAction action = TriggerAction::kNone;
        Real xi_s_dot = 0.0;
        Real xi_f_dot = 0.0;
        Real xi_v_dot = 0.0;
    };

    [[nodiscard]] const InverterUnit& unit(int k) const {
        return model_.units[static_cast<size_t>(k)];
    }

    [[nodiscard]] const NetworkModel& eval_network() const {
        return fidelity_ == Fidelity::kFull ? model_.network : ext_.net;
    }

    [[nodiscard]] const Eigen::MatrixXcd& eval_admittance() const {
        return fidelity_ == Fidelity::kFull ? y_full_ : ext_.y;
    }

    [[nodiscard]] static Real ramp(Real t, Real t0) {
        return clamp((t - t0) / kEnableRamp, 0.0, 1.0);
    }

    /// Regulator outputs and integrator derivatives for every unit. Only
    /// state values feed this layer, so it runs before the network solve.
    [[nodiscard]] std::vector<SlowSignals> slow_layer(Real t, const Eigen::VectorXd& x,
                                                      const SystemBranches* freeze) const {
        if (freeze && static_cast<int>(freeze->size()) != n_units()) {
            throw ModelError("branch freeze does not match the unit count");
        }
        std::vector<SlowSignals> out(static_cast<size_t>(n_units()));
        for (int k = 0; k < n_units(); ++k) {
            const UnitControl& ctl = controls_[static_cast<size_t>(k)];
            if (!ctl.active) continue;
            const InverterUnit& u = unit(k);
            const UnitBranches* fz = freeze ? &(*freeze)[static_cast<size_t>(k)] : nullptr;
            SlowSignals& sig = out[static_cast<size_t>(k)];

            const Real p_m = layout_.get(x, k, StateField::kPm);
            const Real q_m = layout_.get(x, k, StateField::kQm);
            sig.s_m = std::hypot(p_m, q_m);

            if (ctl.power_reg) {
                sig.e_s = fz ? (fz->es_active ? ctl.s_ref - sig.s_m : 0.0)
                             : capacity_error(ctl.s_ref, sig.s_m);
                const PowerRegulatorOutput reg =
                    power_regulator_step(u.power_reg, layout_.get(x, k, StateField::kXiS), sig.e_s);
                const Real rho = fz ? 1.0 : ramp(t, ctl.power_reg_t0);
                sig.dw1 = rho * reg.dw1;
                sig.dv1 = rho * reg.dv1;
                sig.xi_s_dot = reg.xi_s_dot;
            }

            if (ctl.vf_reg) {
                const VfRegulatorParams& vf = u.vf_reg;
                const Real raw_f = u.inverter.w0 - layout_.get(x, k, StateField::kFMeas);
                const Real raw_v = u.inverter.v0 - layout_.get(x, k, StateField::kVMeas);
                if (fz) {
                    sig.e_f = banded(raw_f, vf.df_max, fz->band_f);
                    sig.e_v = banded(raw_v, vf.dv_max, fz->band_v);
                    sig.action = fz->action;
                } else {
                    sig.e_f = deadband(raw_f, vf.df_max);
                    sig.e_v = deadband(raw_v, vf.dv_max);
                    sig.action = trigger_logic(sig.e_f, sig.e_v).action;
                }
                RegulatorState rs;
                rs.xi_f = layout_.get(x, k, StateField::kXiF);
                rs.xi_v = layout_.get(x, k, StateField::kXiV);
                const VfRegulatorOutput reg = vf_regulator_step(vf, rs, sig.e_f, sig.e_v, sig.action);
                const Real rho = fz ? 1.0 : ramp(t, ctl.vf_reg_t0);
                sig.dw2 = rho * reg.dw2;
                sig.dv2 = rho * reg.dv2;
                sig.xi_f_dot = reg.xi_f_dot;
                sig.xi_v_dot = reg.xi_v_dot;
            }

            // shared trim budget; the power regulator keeps its share first
            apply_trim_clamp(u.vf_reg.w_clamp, fz ? fz->w_clamp : 2, ctl.vf_reg, sig.dw1,
                             sig.dw2, sig.xi_s_dot, sig.xi_f_dot);
            apply_trim_clamp(u.vf_reg.v_clamp, fz ? fz->v_clamp : 2, ctl.vf_reg, sig.dv1,
                             sig.dv2, sig.xi_s_dot, sig.xi_v_dot);

            const PrimarySignals primary = droop_primary(u.inverter, p_m, q_m,
                                                         sig.dw1 + sig.dw2 + ctl.trim.w,
                                                         sig.dv1 + sig.dv2 + ctl.trim.v);
            sig.w_ref = primary.w_ref;
            sig.v_ref = primary.v_dref;
        }
        return out;
    }

    /// Clamps the combined trim dw1 + dw2 to [-bound, bound]. When a
    /// secondary channel exists it absorbs the cut (the power regulator keeps
    /// its share first); otherwise the primary saturates directly.
    /// Integrators pushing further out freeze. mode 2 evaluates the clamp
    /// live, 0 pins it free, +/-1 pins saturation.
    static void apply_trim_clamp(Real bound, int mode, bool has_secondary, Real& dw1, Real& dw2,
                                 Real& xi_primary_dot, Real& xi_secondary_dot) {
        if (mode == 0) return;
        const Real total = dw1 + dw2;
        if (mode == 2 && std::abs(total) <= bound) return;
        const Real target = mode == 2 ? std::copysign(bound, total)
                                      : std::copysign(bound, static_cast<Real>(mode));
        if (mode != 2) {
            // pinned saturation: the regulators hold
            xi_primary_dot = 0.0;
            xi_secondary_dot = 0.0;
        } else {
            if (xi_primary_dot * total > 0.0) xi_primary_dot = 0.0;
            if (xi_secondary_dot * total > 0.0) xi_secondary_dot = 0.0;
        }
        if (has_secondary) {
            dw2 = target - dw1;
        } else {
            dw1 = target;
        }
    }

    /// Deadband output with the branch pinned: 0 inside, the offset from the
    /// pinned edge outside.
    [[nodiscard]] static Real banded(Real raw, Real half_width, int band) {
        if (band == 0) return 0.0;
        return raw - (band > 0 ? half_width : -half_width);
    }

    [[nodiscard]] int infer_band(Real raw, Real half_width, Real xi, const std::string& name,
                                 const char* channel) const {
        if (raw > half_width + kBreakTol) return 1;
        if (raw < -half_width - kBreakTol) return -1;
        if (std::abs(raw) < half_width - kBreakTol) return 0;
        if (std::abs(xi) > kChargeTol) return raw > 0.0 ? 1 : -1;
        throw BreakpointAmbiguityError("unit '" + name + "' sits on the " + channel +
                                       " deadband edge with an uncharged integrator");
    }

    [[nodiscard]] int classify_clamp(Real total, Real bound, const std::string& name,
                                     const char* channel) const {
        if (std::abs(total) < bound - kBreakTol) return 0;
        if (std::abs(total) > bound + kBreakTol) return total > 0.0 ? 1 : -1;
        throw BreakpointAmbiguityError("unit '" + name + "' sits on the " + channel +
                                       " saturation boundary");
    }

    void check_limiter_margin(const Eigen::VectorXd& x, int k, const SlowSignals& sig) const {
        const UnitControl& ctl = controls_[static_cast<size_t>(k)];
        if (!ctl.limiter.enabled || fidelity_ != Fidelity::kFull) return;
        const InverterState st = unpack_inverter(x, k);
        // the commanded current before limiting, at the reference this state implies
        const CurrentCommand cmd =
            voltage_regulator_step(unit(k).inverter, st, sig.v_ref, 0.0, sig.w_ref);
        Real i_max = ctl.limiter.i_max;
        if (ctl.limiter.adaptive) {
            i_max = ctl.limiter.s_cap / std::max(std::hypot(st.v_d, st.v_q), 0.2);
        }
        if (std::abs(std::hypot(cmd.i_dref, cmd.i_qref) - i_max) <= kBreakTol) {
            throw BreakpointAmbiguityError("unit '" + unit(k).inverter.name +
                                           "' sits on the current-limiter circle");
        }
    }

    /// Capacity-weighted mean reference speed of the active units: the
    /// frequency the loads see. Throws when every unit is offline.
    [[nodiscard]] Real system_frequency(const std::vector<SlowSignals>& slow) const {
        Real num = 0.0;
        Real den = 0.0;
        for (int k = 0; k < n_units(); ++k) {
            if (!controls_[static_cast<size_t>(k)].active) continue;
            const Real s = unit(k).inverter.s_rated;
            num += s * slow[static_cast<size_t>(k)].w_ref;
            den += s;
        }
        if (den <= 0.0) throw NetworkSolveError("every inverter is offline");
        return num / den;
    }

    [[nodiscard]] int anchor_unit() const {
        for (int k = 0; k < n_units(); ++k) {
            if (controls_[static_cast<size_t>(k)].active) return k;
        }
        throw NetworkSolveError("every inverter is offline");
    }

    [[nodiscard]] InverterState unpack_inverter(const Eigen::VectorXd& x, int k) const {
        InverterState st;
        st.delta = layout_.get(x, k, StateField::kDelta);
        st.phi_id = layout_.get(x, k, StateField::kPhiId);
        st.phi_iq = layout_.get(x, k, StateField::kPhiIq);
        st.phi_vd = layout_.get(x, k, StateField::kPhiVd);
        st.phi_vq = layout_.get(x, k, StateField::kPhiVq);
        st.i_d = layout_.get(x, k, StateField::kId);
        st.i_q = layout_.get(x, k, StateField::kIq);
        st.v_d = layout_.get(x, k, StateField::kVd);
        st.v_q = layout_.get(x, k, StateField::kVq);
        st.i_gd = layout_.get(x, k, StateField::kIgd);
        st.i_gq = layout_.get(x, k, StateField::kIgq);
        st.p_m = layout_.get(x, k, StateField::kPm);
        st.q_m = layout_.get(x, k, StateField::kQm);
        return st;
    }

    /// Writes the voltages that are pinned by states (reduced terminals).
    void place_known_voltages(const Eigen::VectorXd& x, const std::vector<SlowSignals>& slow,
                              Eigen::VectorXcd& volt) const {
        if (fidelity_ != Fidelity::kReduced) return;
        for (int k = 0; k < n_units(); ++k) {
            if (!controls_[static_cast<size_t>(k)].active) continue;
            volt[ext_.terminal[static_cast<size_t>(k)]] = std::polar(
                slow[static_cast<size_t>(k)].v_ref, layout_.get(x, k, StateField::kDelta));
        }
    }

    /// Accumulates the fixed current injections (full-fidelity couplings).
    void place_injections(const Eigen::VectorXd& x, Eigen::VectorXcd& i_fixed) const {
        if (fidelity_ != Fidelity::kFull) return;
        for (int k = 0; k < n_units(); ++k) {
            if (!controls_[static_cast<size_t>(k)].active) continue;
            const Complex i_local(layout_.get(x, k, StateField::kIgd),
                                  layout_.get(x, k, StateField::kIgq));
            i_fixed[bus_[static_cast<size_t>(k)]] +=
                to_common_frame(i_local, layout_.get(x, k, StateField::kDelta));
        }
    }

    void solve_voltages(const Eigen::VectorXd& x, const std::vector<SlowSignals>& slow, Real f_sys,
                        DynamicsScratch& scratch) const {
        const NetworkModel& net = eval_network();
        if (!scratch.warm || scratch.v.size() != net.size()) {
            scratch.v = Eigen::VectorXcd::Constant(net.size(), Complex(1.0, 0.0));
            scratch.warm = true;
        }
        if (scratch.i_fixed.size() != net.size()) {
            scratch.i_fixed.resize(net.size());
        }
        scratch.i_fixed.setZero();
        place_injections(x, scratch.i_fixed);
        place_known_voltages(x, slow, scratch.v);
        solve_network(net, eval_admittance(), unknowns(), scratch.i_fixed, f_sys, scaling_,
                      scratch.v);
    }

    /// State derivatives given solved (or candidate) network voltages.
    void eval_with_voltages(const Eigen::VectorXd& x, const Eigen::VectorXcd& volt,
                            const std::vector<SlowSignals>& slow, Real f_sys, Eigen::VectorXd& dx,
                            EvalReport* report) const {
        const Real w_base = model_.network.base.w_base();
        const Real w_common = slow[static_cast<size_t>(anchor_unit())].w_ref;
        dx.setZero(n_states());
        if (report) {
            report->f_sys = f_sys;
            report->v_net = volt;
            report->units.assign(static_cast<size_t>(n_units()), UnitReport{});
        }
        for (int k = 0; k < n_units(); ++k) {
            const UnitControl& ctl = controls_[static_cast<size_t>(k)];
            UnitReport* ur = report ? &report->units[static_cast<size_t>(k)] : nullptr;
            if (!ctl.active) {
                if (ur) ur->active = false;
                continue;
            }
            const InverterUnit& u = unit(k);
            const SlowSignals& sig = slow[static_cast<size_t>(k)];
            Real p_inst = 0.0;
            Real q_inst = 0.0;
            Real v_measured = sig.v_ref;

            if (fidelity_ == Fidelity::kFull) {
                const InverterState st = unpack_inverter(x, k);
                const Complex v_bus = to_local_frame(volt[bus_[static_cast<size_t>(k)]], st.delta);
                const PrimarySignals primary{sig.w_ref, sig.v_ref, 0.0};
                const GridInterface grid{v_bus.real(), v_bus.imag(), w_common};
                const InverterDerivatives der =
                    inverter_derivatives(u.inverter, st, primary, grid, ctl.limiter, w_base);
                layout_.set(dx, k, StateField::kDelta, der.d.delta);
                layout_.set(dx, k, StateField::kPhiId, der.d.phi_id);
                layout_.set(dx, k, StateField::kPhiIq, der.d.phi_iq);
                layout_.set(dx, k, StateField::kPhiVd, der.d.phi_vd);
                layout_.set(dx, k, StateField::kPhiVq, der.d.phi_vq);
                layout_.set(dx, k, StateField::kId, der.d.i_d);
                layout_.set(dx, k, StateField::kIq, der.d.i_q);
                layout_.set(dx, k, StateField::kVd, der.d.v_d);
                layout_.set(dx, k, StateField::kVq, der.d.v_q);
                layout_.set(dx, k, StateField::kIgd, der.d.i_gd);
                layout_.set(dx, k, StateField::kIgq, der.d.i_gq);
                layout_.set(dx, k, StateField::kPm, der.d.p_m);
                layout_.set(dx, k, StateField::kQm, der.d.q_m);
                const PowerPQ s = measured_power(st);
                p_inst = s.p;
                q_inst = s.q;
                v_measured = std::hypot(st.v_d, st.v_q);
                if (ur) {
                    ur->limiter_active = der.limiter_active;
                    ur->i_dref = der.i_dref;
                    ur->i_qref = der.i_qref;
                }
            } else {
                const int t_k = ext_.terminal[static_cast<size_t>(k)];
                const Complex s_inj = volt[t_k] * std::conj((ext_.y.row(t_k) * volt)(0));
                p_inst = s_inj.real();
                q_inst = s_inj.imag();
                layout_.set(dx, k, StateField::kDelta, (sig.w_ref - w_common) * w_base);
                layout_.set(dx, k, StateField::kPm,
                            u.inverter.pm_cutoff * (p_inst - layout_.get(x, k, StateField::kPm)));
                layout_.set(dx, k, StateField::kQm,
                            u.inverter.pm_cutoff * (q_inst - layout_.get(x, k, StateField::kQm)));
            }

            layout_.set(dx, k, StateField::kXiS, sig.xi_s_dot);
            layout_.set(dx, k, StateField::kXiF, sig.xi_f_dot);
            layout_.set(dx, k, StateField::kXiV, sig.xi_v_dot);
            const Real cutoff = u.vf_reg.meas_cutoff;
            layout_.set(dx, k, StateField::kFMeas,
                        cutoff * (sig.w_ref - layout_.get(x, k, StateField::kFMeas)));
            layout_.set(dx, k, StateField::kVMeas,
                        cutoff * (v_measured - layout_.get(x, k, StateField::kVMeas)));

            if (ur) {
                ur->w_ref = sig.w_ref;
                ur->v_ref = sig.v_ref;
                ur->p_inst = p_inst;
                ur->q_inst = q_inst;
                ur->s_m = sig.s_m;
                ur->e_s = sig.e_s;
                ur->e_f = sig.e_f;
                ur->e_v = sig.e_v;
                ur->dw1 = sig.dw1;
                ur->dv1 = sig.dv1;
                ur->dw2 = sig.dw2;
                ur->dv2 = sig.dv2;
                ur->action = sig.action;
            }
        }
    }

    void rebuild_unknowns() {
        reduced_unknowns_.clear();
        std::vector<bool> pinned(static_cast<size_t>(ext_.net.size()), false);
        for (int k = 0; k < n_units(); ++k) {
            if (controls_[static_cast<size_t>(k)].active) {
                pinned[static_cast<size_t>(ext_.terminal[static_cast<size_t>(k)])] = true;
            }
        }
        for (int i = 0; i < ext_.net.size(); ++i) {
            if (!pinned[static_cast<size_t>(i)]) reduced_unknowns_.push_back(i);
        }
    }

    MicrogridModel model_;
    Fidelity fidelity_;
    ExtendedNetwork ext_;
    Eigen::MatrixXcd y_full_;
    StateLayout layout_;
    std::vector<UnitControl> controls_;
    std::vector<int> bus_;               ///< dense external-bus index per unit
    std::vector<int> full_unknowns_;     ///< all external buses
    std::vector<int> reduced_unknowns_;  ///< externals plus floating terminals
    LoadScaling scaling_;
};

}  // namespace mgsim
