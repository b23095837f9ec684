#pragma once

#include <cmath>
#include <string>
#include <tuple>
#include <utility>

#include "mgsim/common.hpp"

namespace mgsim {

// ======================================================================
// Parameters and state
// ======================================================================

/// Grid-forming inverter: LC filter + coupling branch, cascaded voltage and
/// current PI loops, droop primary control, low-pass power measurement.
/// Every quantity is on the common system base.
struct InverterParams {
    std::string name;
    int bus = 0;          ///< external bus the coupling branch lands on
    Real s_rated = 0.1;   ///< apparent-power capacity, p.u.

    Real l_f = 0.8;       ///< inverter-side filter inductance, p.u.
    Real r_f = 0.005;     ///< filter series resistance, p.u.
    Real c_f = 1e-4;      ///< filter capacitance, p.u.
    Real l_c = 0.4;       ///< coupling inductance to the bus, p.u.
    Real r_c = 0.08;      ///< coupling resistance, p.u.

    Real kp_i = 4.0;      ///< current regulator proportional gain
    Real ki_i = 16.0;     ///< current regulator integral gain
    Real kp_v = 0.012;    ///< voltage regulator proportional gain
    Real ki_v = 0.12;     ///< voltage regulator integral gain

    Real k_df = 0.01;     ///< frequency droop gain, p.u.-f per p.u.-P
    Real k_dv = 0.05;     ///< voltage droop gain, p.u.-V per p.u.-Q
    Real p0 = 0.0;        ///< active power setpoint, p.u.
    Real q0 = 0.0;        ///< reactive power setpoint, p.u.
    Real w0 = 1.0;        ///< nominal frequency reference, p.u.
    Real v0 = 1.0;        ///< nominal voltage reference, p.u.

    Real pm_cutoff = 31.4;  ///< power measurement low-pass cutoff, rad/s
};

/// Dynamic state of one inverter, all in its own dq frame (d axis on the
/// commanded voltage, v_qref = 0).
struct InverterState {
    Real delta = 0.0;    ///< frame angle relative to the common frame, rad
    Real phi_id = 0.0;   ///< current-regulator d integrator
    Real phi_iq = 0.0;   ///< current-regulator q integrator
    Real phi_vd = 0.0;   ///< voltage-regulator d integrator
    Real phi_vq = 0.0;   ///< voltage-regulator q integrator
    Real i_d = 0.0;      ///< inverter-side filter current
    Real i_q = 0.0;
    Real v_d = 1.0;      ///< filter capacitor voltage
    Real v_q = 0.0;
    Real i_gd = 0.0;     ///< grid-side (coupling branch) current
    Real i_gq = 0.0;
    Real p_m = 0.0;      ///< filtered active power measurement
    Real q_m = 0.0;      ///< filtered reactive power measurement
};

/// Stationary capacitor voltage from the current balance
///   j c_f v = i - i_g   (nominal frequency, matching the phasor network).
/// Solving: v_d = (i_q - i_gq) / c_f,  v_q = -(i_d - i_gd) / c_f.
[[nodiscard]] inline std::pair<Real, Real> capacitor_voltage(const InverterParams& par,
                                                             const InverterState& st) {
    return {(st.i_q - st.i_gq) / par.c_f, -(st.i_d - st.i_gd) / par.c_f};
}

/// Outputs of the droop primary layer.
struct PrimarySignals {
    Real w_ref = 1.0;
    Real v_dref = 1.0;
    Real v_qref = 0.0;
};

/// Bus-side quantities an inverter needs for one derivative evaluation.
struct GridInterface {
    Real v_bus_d = 1.0;   ///< bus voltage in the inverter's own frame
    Real v_bus_q = 0.0;
    Real w_common = 1.0;  ///< rotation speed of the common network frame, p.u.
};

/// Baseline current-magnitude limiter configuration.
struct LimiterConfig {
    bool enabled = false;
    Real i_max = 1.5;            ///< fixed threshold, p.u.; ignored when adaptive
    bool active_priority = true; ///< keep d-axis (active) current first
    bool adaptive = false;       ///< threshold follows s_cap / |v|
    Real s_cap = 0.0;            ///< capacity used by the adaptive threshold
};

// ======================================================================
// Control layers
// ======================================================================

/// Droop laws with supplementary trims:
///   w_ref = w0 + k_df (p0 - p_m) + supp_w
///   v_dref = v0 + k_dv (q0 - q_m) + supp_v, v_qref = 0.
[[nodiscard]] inline PrimarySignals droop_primary(const InverterParams& par, Real p_m, Real q_m,
                                                  Real supp_w = 0.0, Real supp_v = 0.0) {
    return {par.w0 + par.k_df * (par.p0 - p_m) + supp_w,
            par.v0 + par.k_dv * (par.q0 - q_m) + supp_v, 0.0};
}

struct CurrentCommand {
    Real i_dref = 0.0;
    Real i_qref = 0.0;
};

/// Outer voltage loop with capacitive decoupling feed-forward:
///   i_dref = i_gd - w c_f v_q + kp_v (v_dref - v_d) + ki_v phi_vd
///   i_qref = i_gq + w c_f v_d + kp_v (v_qref - v_q) + ki_v phi_vq
[[nodiscard]] inline CurrentCommand voltage_regulator_step(const InverterParams& par,
                                                           const InverterState& st, Real v_dref,
                                                           Real v_qref, Real w) {
    return {st.i_gd - w * par.c_f * st.v_q + par.kp_v * (v_dref - st.v_d) + par.ki_v * st.phi_vd,
            st.i_gq + w * par.c_f * st.v_d + par.kp_v * (v_qref - st.v_q) + par.ki_v * st.phi_vq};
}

struct VoltageCommand {
    Real e_d = 0.0;
    Real e_q = 0.0;
};

/// Inner current loop with inductive decoupling feed-forward:
///   e_d = v_d - w l_f i_q + kp_i (i_dref - i_d) + ki_i phi_id
///   e_q = v_q + w l_f i_d + kp_i (i_qref - i_q) + ki_i phi_iq
[[nodiscard]] inline VoltageCommand current_regulator_step(const InverterParams& par,
                                                           const InverterState& st, Real i_dref,
                                                           Real i_qref, Real w) {
    return {st.v_d - w * par.l_f * st.i_q + par.kp_i * (i_dref - st.i_d) + par.ki_i * st.phi_id,
            st.v_q + w * par.l_f * st.i_d + par.kp_i * (i_qref - st.i_q) + par.ki_i * st.phi_iq};
}

struct LimitedCommand {
    Real i_dref = 0.0;
    Real i_qref = 0.0;
    bool saturated = false;
};

/// Circular current limit. With active-power priority the d component is
/// clamped first and the q component gets the remaining headroom; otherwise
/// the vector is scaled to the limit circle.
[[nodiscard]] inline LimitedCommand current_limiter_baseline(Real i_dref, Real i_qref, Real i_max,
                                                             bool active_priority) {
    if (i_max <= 0.0) return {0.0, 0.0, true};
    const Real mag = std::hypot(i_dref, i_qref);
    if (mag <= i_max) return {i_dref, i_qref, false};
    if (!active_priority) {
        const Real scale = i_max / mag;
        return {i_dref * scale, i_qref * scale, true};
    }
    const Real d = clamp(i_dref, -i_max, i_max);
    const Real head = std::sqrt(std::max(0.0, i_max * i_max - d * d));
    const Real q = clamp(i_qref, -head, head);
    return {d, q, true};
}

/// Instantaneous powers delivered through the coupling branch, measured at
/// the capacitor node: s = (v_d + j v_q) conj(i_gd + j i_gq).
[[nodiscard]] inline PowerPQ measured_power(const InverterState& st) {
    return {st.v_d * st.i_gd + st.v_q * st.i_gq, st.v_q * st.i_gd - st.v_d * st.i_gq};
}

/// Back-solves the stationary inverter state for a prescribed terminal
/// condition: capacitor voltage v_d (v_q = 0), coupling current (i_gd, i_gq),
/// and reference speed w_ref. Amplitude cross terms sit at nominal frequency,
/// matching inverter_derivatives, so the returned state has zero derivatives
/// when driven with supplements that command exactly this point.
[[nodiscard]] inline InverterState stationary_inverter_state(const InverterParams& par, Real v_d,
                                                             Real i_gd, Real i_gq, Real w_ref) {
    InverterState st;
    st.delta = 0.0;
    st.v_d = v_d;
    st.v_q = 0.0;
    st.i_gd = i_gd;
    st.i_gq = i_gq;
    st.i_d = i_gd;                   // cap balance, v_q = 0
    st.i_q = i_gq + par.c_f * v_d;   // cap balance, nominal speed
    const PowerPQ s = measured_power(st);
    st.p_m = s.p;
    st.q_m = s.q;
    // voltage loop: command must equal the stationary current
    st.phi_vd = (st.i_d - (i_gd - w_ref * par.c_f * st.v_q)) / par.ki_v;
    st.phi_vq = (st.i_q - (i_gq + w_ref * par.c_f * st.v_d)) / par.ki_v;
    // current loop: modulation must cover the resistive drop
    const Real e_d_needed = st.v_d + par.r_f * st.i_d - st.i_q * par.l_f;
    const Real e_d_ff = st.v_d - w_ref * par.l_f * st.i_q;
    st.phi_id = (e_d_needed - e_d_ff) / par.ki_i;
    const Real e_q_needed = par.r_f * st.i_q + st.i_d * par.l_f;
    const Real e_q_ff = w_ref * par.l_f * st.i_d;
    st.phi_iq = (e_q_needed - e_q_ff) / par.ki_i;
    return st;
}

// ======================================================================
// Dynamics
// ======================================================================

struct InverterDerivatives {
    InverterState d;       ///< element-wise time derivatives
    bool limiter_active = false;
    Real i_dref = 0.0;     ///< post-limiter current command (trace/debug)
    Real i_qref = 0.0;
};

/// Time derivatives of the full inverter state. Amplitude cross-coupling
/// terms use nominal frequency so that stationary points coincide with the
/// fixed-frequency network model; angle dynamics use the true speed
/// difference. When the limiter saturates, the voltage-regulator integrators
/// freeze (anti-windup).
[[nodiscard]] inline InverterDerivatives inverter_derivatives(const InverterParams& par,
                                                              const InverterState& st,
                                                              const PrimarySignals& primary,
                                                              const GridInterface& grid,
                                                              const LimiterConfig& limiter,
                                                              Real w_base) {
    const Real w = primary.w_ref;
    CurrentCommand cmd = voltage_regulator_step(par, st, primary.v_dref, primary.v_qref, w);

    bool saturated = false;
    if (limiter.enabled) {
        Real i_max = limiter.i_max;
        if (limiter.adaptive) {
            const Real vmag = std::max(std::hypot(st.v_d, st.v_q), 0.2);
            i_max = limiter.s_cap / vmag;
        }
        const LimitedCommand lim =
            current_limiter_baseline(cmd.i_dref, cmd.i_qref, i_max, limiter.active_priority);
        cmd.i_dref = lim.i_dref;
        cmd.i_qref = lim.i_qref;
        saturated = lim.saturated;
    }

    const VoltageCommand ecmd = current_regulator_step(par, st, cmd.i_dref, cmd.i_qref, w);
    const PowerPQ s = measured_power(st);

    InverterDerivatives out;
    out.limiter_active = saturated;
    out.i_dref = cmd.i_dref;
    out.i_qref = cmd.i_qref;

    InverterState& d = out.d;
    d.delta = (primary.w_ref - grid.w_common) * w_base;
    d.phi_id = cmd.i_dref - st.i_d;
    d.phi_iq = cmd.i_qref - st.i_q;
    d.phi_vd = saturated ? 0.0 : (primary.v_dref - st.v_d);
    d.phi_vq = saturated ? 0.0 : (primary.v_qref - st.v_q);
    d.v_d = (w_base / par.c_f) * (st.i_d - st.i_gd) + w_base * st.v_q;
    d.v_q = (w_base / par.c_f) * (st.i_q - st.i_gq) - w_base * st.v_d;
    d.i_d = (w_base / par.l_f) * (ecmd.e_d - st.v_d - par.r_f * st.i_d) + w_base * st.i_q;
    d.i_q = (w_base / par.l_f) * (ecmd.e_q - st.v_q - par.r_f * st.i_q) - w_base * st.i_d;
    d.i_gd = (w_base / par.l_c) * (st.v_d - grid.v_bus_d - par.r_c * st.i_gd) + w_base * st.i_gq;
    d.i_gq = (w_base / par.l_c) * (st.v_q - grid.v_bus_q - par.r_c * st.i_gq) - w_base * st.i_gd;
    d.p_m = par.pm_cutoff * (s.p - st.p_m);
    d.q_m = par.pm_cutoff * (s.q - st.q_m);
    return out;
}

// ======================================================================
// Frame rotation helpers
// ======================================================================

/// Rotates a phasor from an inverter frame (angle delta) to the common frame.
[[nodiscard]] inline Complex to_common_frame(Complex local, Real delta) {
    return local * std::polar(1.0, delta);
}

/// Rotates a phasor from the common frame into an inverter frame.
[[nodiscard]] inline Complex to_local_frame(Complex common, Real delta) {
    return common * std::polar(1.0, -delta);
}

}  // namespace mgsim
