#pragma once

#include <cmath>
#include <string>

#include "mgsim/common.hpp"

namespace mgsim {

// ======================================================================
// Parameters
// ======================================================================

/// Decentralized power regulator: one PI on the capacity error, allocated to
/// the frequency and voltage droop channels by (k_w, k_v).
struct PowerRegulatorParams {
    Real kp_s = 0.2;
    Real ki_s = 4.0;
    Real k_w = 0.008;
    Real k_v = 0.006;
};

/// Decentralized V-f regulator: deadbanded PI channels on local frequency and
/// voltage deviations, gated by the trigger logic.
struct VfRegulatorParams {
    Real kp_f = 0.05;
    Real ki_f = 1.0;
    Real kp_v = 0.05;
    Real ki_v = 1.0;
    Real df_max = 0.01;     ///< frequency deadband half width, p.u.
    Real dv_max = 0.05;     ///< voltage deadband half width, p.u.
    Real w_clamp = 0.05;    ///< bound on the total supplementary frequency trim
    Real v_clamp = 0.10;    ///< bound on the total supplementary voltage trim
    Real meas_cutoff = 62.8;  ///< first-order f/V measurement filter, rad/s
};

/// What the trigger logic asks the host system to do.
enum class TriggerAction { kNone, kReallocate, kShed };

[[nodiscard]] inline const char* to_string(TriggerAction a) {
    switch (a) {
        case TriggerAction::kNone: return "NONE";
        case TriggerAction::kReallocate: return "REALLOCATE";
        case TriggerAction::kShed: return "SHED";
    }
    return "NONE";
}

/// Integrator and trigger state attached to one inverter.
struct RegulatorState {
    Real xi_s = 0.0;     ///< power-regulator integrator
    Real xi_f = 0.0;     ///< V-f frequency-channel integrator
    Real xi_v = 0.0;     ///< V-f voltage-channel integrator
    Real f_meas = 1.0;   ///< filtered local frequency measurement
    Real v_meas = 1.0;   ///< filtered local voltage measurement
    bool state_f = false;  ///< frequency loop needs more capacity
    bool state_v = false;  ///< voltage loop needs more capacity
    TriggerAction action = TriggerAction::kNone;
    bool shed_request = false;
    Real shed_magnitude = 0.0;  ///< estimated load excess behind a shed request
};

// ======================================================================
// Power regulator
// ======================================================================

/// One-sided capacity error: zero while measured apparent power is under the
/// reference, s_ref - s_m once the reference is reached or exceeded.
[[nodiscard]] inline Real capacity_error(Real s_ref, Real s_m) {
    return s_ref > s_m ? 0.0 : s_ref - s_m;
}

struct PowerRegulatorOutput {
    Real dw1 = 0.0;
    Real dv1 = 0.0;
    Real xi_s_dot = 0.0;
};

/// PI on the capacity error, split between the droop channels:
///   u = kp_s e_s + ki_s xi_s,  dw1 = k_w u,  dv1 = k_v u,  d(xi_s)/dt = e_s.
[[nodiscard]] inline PowerRegulatorOutput power_regulator_step(const PowerRegulatorParams& par,
                                                               Real xi_s, Real e_s) {
    const Real u = par.kp_s * e_s + par.ki_s * xi_s;
    return {par.k_w * u, par.k_v * u, e_s};
}

/// Channel allocation ratio k_w / k_v matching a disturbance power factor:
/// ratio = tan(acos(pf)). pf = 1 puts the whole allocation on the voltage
/// channel. Throws ModelError outside (0, 1].
[[nodiscard]] inline Real allocation_from_power_factor(Real pf) {
    if (!(pf > 0.0) || pf > 1.0) {
        throw ModelError("power factor must lie in (0, 1]");
    }
    return std::tan(std::acos(pf));
}

// ======================================================================
// Deadbands and trigger logic
// ======================================================================

/// Symmetric deadband: zero inside [-half_width, half_width], the overshoot
/// beyond the nearer edge outside.
[[nodiscard]] inline Real deadband(Real x, Real half_width) {
    if (x > half_width) return x - half_width;
    if (x < -half_width) return x + half_width;
    return 0.0;
}

struct TriggerDecision {
    bool state_f = false;
    bool state_v = false;
    TriggerAction action = TriggerAction::kNone;
};

/// Maps deadbanded errors to loop states and a coordination action. A
/// positive error means that loop needs more capacity (under-frequency or
/// under-voltage); both loops starved means local regulation cannot help and
/// load must be shed; exactly one starved means capacity can be reallocated
/// between the loops.
[[nodiscard]] inline TriggerDecision trigger_logic(Real e_f, Real e_v) {
    TriggerDecision out;
    out.state_f = e_f > 0.0;
    out.state_v = e_v > 0.0;
    if (out.state_f && out.state_v) {
        out.action = TriggerAction::kShed;
    } else if (out.state_f || out.state_v) {
        out.action = TriggerAction::kReallocate;
    } else {
        out.action = TriggerAction::kNone;
    }
    return out;
}

// ======================================================================
// V-f regulator
// ======================================================================

struct VfRegulatorOutput {
    Real dw2 = 0.0;
    Real dv2 = 0.0;
    Real xi_f_dot = 0.0;
    Real xi_v_dot = 0.0;
};

/// Deadbanded PI channels gated by the trigger action. Under SHED the
/// regulation outputs stay held (shedding is the host's job) and the
/// integrators freeze; under NONE outputs hold with frozen integrators;
/// under REALLOCATE both channels run on their gated errors.
[[nodiscard]] inline VfRegulatorOutput vf_regulator_step(const VfRegulatorParams& par,
                                                         const RegulatorState& st, Real e_f,
                                                         Real e_v, TriggerAction action) {
    const bool integrate = action == TriggerAction::kReallocate;
    const Real ef_used = integrate ? e_f : 0.0;
    const Real ev_used = integrate ? e_v : 0.0;
    VfRegulatorOutput out;
    out.dw2 = par.kp_f * ef_used + par.ki_f * st.xi_f;
    out.dv2 = par.kp_v * ev_used + par.ki_v * st.xi_v;
    out.xi_f_dot = ef_used;
    out.xi_v_dot = ev_used;
    return out;
}

}  // namespace mgsim
