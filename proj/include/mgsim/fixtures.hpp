#pragma once

#include <string>
#include <vector>

#include "mgsim/model.hpp"

namespace mgsim {

// ======================================================================
// Machine-base ratings
// ======================================================================

/// Nameplate ratings of one unit: physical filter values plus controller
/// gains on the machine's own power base. `to_system_base` converts them to
/// the shared system base the solvers work on.
struct MachineRatings {
    std::string name;
    int bus = 0;
    Real s_rated_va = 1.2e6;

    Real l_f_henry = 5.0e-5;
    Real c_f_farad = 1.0e-5;
    Real r_f = 0.005;  ///< filter loss, machine p.u.
    Real r_c = 0.004;  ///< coupling resistance, machine p.u.
    Real l_c = 0.015;  ///< coupling reactance, machine p.u.

    // Inner-loop gains, machine p.u. Both PI pairs need enough stiffness that
    // the cascade tracks its references well below the droop band; with much
    // weaker gains the current-loop tracking lag couples the coupling-current
    // feed-forward back into the droop swing and drives it unstable.
    Real kp_i = 5.0;   ///< current regulator proportional gain
    Real ki_i = 20.0;  ///< current regulator integral gain (zero at 4 rad/s)
    Real kp_v = 1.0;   ///< voltage regulator proportional gain
    Real ki_v = 10.0;  ///< voltage regulator integral gain (zero at 10 rad/s)

    Real k_df = 0.01;  ///< droop gains, system p.u.
    Real k_dv = 0.05;
    Real p0 = 0.0;  ///< droop setpoints, system p.u.
    Real q0 = 0.0;
};

/// Rescales machine-base ratings onto the shared system base.
///
/// Impedance-like values divide by the capacity fraction, admittance-like
/// values multiply by it; regulator gains follow the base of the signal they
/// produce (voltage regulators emit currents, current regulators emit
/// voltages). Droop gains and setpoints are already system-base.
[[nodiscard]] inline InverterParams to_system_base(const MachineRatings& m,
                                                   const PerUnitBase& base) {
    const Real s_pu = m.s_rated_va / base.s_base_va;
    if (s_pu <= 0.0) throw ModelError("unit rating must be positive");
    InverterParams par;
    par.name = m.name;
    par.bus = m.bus;
    par.s_rated = s_pu;
    par.l_f = inductance_pu(base, m.l_f_henry);
    par.c_f = capacitance_pu(base, m.c_f_farad);
    par.r_f = m.r_f / s_pu;
    par.r_c = m.r_c / s_pu;
    par.l_c = m.l_c / s_pu;
    par.kp_i = m.kp_i / s_pu;
    par.ki_i = m.ki_i / s_pu;
    par.kp_v = m.kp_v * s_pu;
    par.ki_v = m.ki_v * s_pu;
    par.k_df = m.k_df;
    par.k_dv = m.k_dv;
    par.p0 = m.p0;
    par.q0 = m.q0;
    return par;
}

/// The capacity-regulator PI acts on the machine's own power error, so on the
/// system base the gains grow by the inverse capacity fraction. The allocation
/// gains emit frequency/voltage quantities and stay as given.
[[nodiscard]] inline PowerRegulatorParams power_reg_to_system_base(PowerRegulatorParams reg,
                                                                   const MachineRatings& m,
                                                                   const PerUnitBase& base) {
    const Real s_pu = m.s_rated_va / base.s_base_va;
    if (s_pu <= 0.0) throw ModelError("unit rating must be positive");
    reg.kp_s /= s_pu;
    reg.ki_s /= s_pu;
    return reg;
}

// ======================================================================
// Built-in models
// ======================================================================

/// Three identical-feeder inverters on a star network around one composite
/// load bus. Unit 2 carries half the capacity and twice the droop stiffness,
/// so load increments split 1:2:1 across the units.
[[nodiscard]] inline MicrogridModel toy3_model() {
    MicrogridModel model;
    NetworkModel& net = model.network;
    net.buses = {{1, "inv1", 1.0, 0.0, 0.0},
                 {2, "inv2", 1.0, 0.0, 0.0},
                 {3, "inv3", 1.0, 0.0, 0.0},
                 {4, "load", 1.0, 0.0, 0.0}};
    net.branches = {make_branch(1, 4, 0.005, 0.05), make_branch(2, 4, 0.005, 0.05),
                    make_branch(3, 4, 0.005, 0.05)};

    ZipLoadParams load;
    load.bus = 4;
    load.name = "aggregate";
    load.p0 = 0.20;
    load.q0 = 0.10;
    load.z_p = 0.45;
    load.i_p = 0.30;
    load.c_p = 0.25;
    load.z_q = 0.50;
    load.i_q = 0.30;
    load.c_q = 0.20;
    load.k_pf = 2.0;
    load.k_qf = -1.5;
    net.loads = {load};

    const PowerRegulatorParams reg_large{0.2, 4.0, 0.008, 0.006};
    const PowerRegulatorParams reg_small{0.1, 2.0, 0.004, 0.003};
    const VfRegulatorParams vf{};

    MachineRatings r1;
    r1.name = "inv1";
    r1.bus = 1;
    r1.s_rated_va = 1.2e6;
    r1.l_f_henry = 5.0e-5;
    MachineRatings r2 = r1;
    r2.name = "inv2";
    r2.bus = 2;
    r2.s_rated_va = 0.6e6;
    r2.l_f_henry = 2.5e-5;
    r2.k_df = 0.005;
    r2.k_dv = 0.025;
    MachineRatings r3 = r1;
    r3.name = "inv3";
    r3.bus = 3;

    model.units = {
        {to_system_base(r1, net.base), power_reg_to_system_base(reg_large, r1, net.base), vf},
        {to_system_base(r2, net.base), power_reg_to_system_base(reg_small, r2, net.base), vf},
        {to_system_base(r3, net.base), power_reg_to_system_base(reg_large, r3, net.base), vf}};
    model.validate();
    return model;
}

/// Seven-bus radial feeder with three grid-forming units and five composite
/// loads of distinct voltage/frequency sensitivity. Line impedances are
/// documented fixture values for a 10 MVA, 480 V, 60 Hz base.
[[nodiscard]] inline MicrogridModel banshee7_model() {
    MicrogridModel model;
    NetworkModel& net = model.network;
    net.buses = {{101, "bus101", 1.0, 0.0, 0.0}, {102, "bus102", 1.0, 0.0, 0.0},
                 {103, "bus103", 1.0, 0.0, 0.0}, {104, "bus104", 1.0, 0.0, 0.0},
                 {105, "bus105", 1.0, 0.0, 0.0}, {106, "bus106", 1.0, 0.0, 0.0},
                 {107, "bus107", 1.0, 0.0, 0.0}};
    net.branches = {make_branch(101, 102, 0.008, 0.04), make_branch(102, 103, 0.006, 0.03),
                    make_branch(103, 104, 0.010, 0.05), make_branch(104, 105, 0.008, 0.04),
                    make_branch(105, 106, 0.012, 0.06), make_branch(106, 107, 0.010, 0.05)};

    const auto zip = [](int bus, std::string name, Real p0, Real q0, Real z_p, Real i_p,
                        Real c_p, Real z_q, Real i_q, Real c_q, Real k_pf, Real k_qf) {
        ZipLoadParams load;
        load.bus = bus;
        load.name = std::move(name);
        load.p0 = p0;
        load.q0 = q0;
        load.z_p = z_p;
        load.i_p = i_p;
        load.c_p = c_p;
        load.z_q = z_q;
        load.i_q = i_q;
        load.c_q = c_q;
        load.k_pf = k_pf;
        load.k_qf = k_qf;
        return load;
    };
    net.loads = {
        zip(101, "L1", 0.062, 0.021, 0.1, 0.3, 0.6, 0.5, 0.3, 0.2, 2.0, -0.1),
        zip(102, "C1", 0.052, 0.019, 0.5, 0.3, 0.2, 0.2, 0.3, 0.5, 3.0, -0.1),
        zip(104, "L2", 0.054, 0.017, 0.6, 0.2, 0.2, 0.6, 0.2, 0.2, 2.5, -2.0),
        zip(106, "C2", 0.060, 0.021, 0.4, 0.3, 0.3, 0.4, 0.3, 0.3, 1.0, -0.5),
        zip(107, "P2", 0.052, 0.017, 0.5, 0.3, 0.2, 0.5, 0.3, 0.2, 3.0, -1.0),
    };

    MachineRatings g1;
    g1.name = "G1";
    g1.bus = 103;
    g1.s_rated_va = 1.2e6;
    g1.l_f_henry = 5.0e-5;
    g1.p0 = 0.115;
    g1.q0 = 0.035;
    MachineRatings g2;
    g2.name = "G2";
    g2.bus = 102;
    g2.s_rated_va = 0.6e6;
    g2.l_f_henry = 2.5e-5;
    g2.k_df = 0.005;
    g2.k_dv = 0.025;
    g2.p0 = 0.045;
    g2.q0 = 0.014;
    MachineRatings g3;
    g3.name = "G3";
    g3.bus = 105;
    g3.s_rated_va = 2.0e6;
    g3.l_f_henry = 5.0e-5;
    g3.p0 = 0.080;
    g3.q0 = 0.020;

    const PowerRegulatorParams reg_g1{0.2, 4.0, 0.008, 0.006};
    const PowerRegulatorParams reg_g2{0.1, 2.0, 0.004, 0.003};
    const PowerRegulatorParams reg_g3{0.2, 4.0, 0.008, 0.006};
    VfRegulatorParams vf_g1;
    VfRegulatorParams vf_g3;
    vf_g3.ki_f = 10.0;

    model.units = {
        {to_system_base(g1, net.base), power_reg_to_system_base(reg_g1, g1, net.base), vf_g1},
        {to_system_base(g2, net.base), power_reg_to_system_base(reg_g2, g2, net.base), vf_g1},
        {to_system_base(g3, net.base), power_reg_to_system_base(reg_g3, g3, net.base), vf_g3}};
    model.validate();
    return model;
}

/// Names of the built-in microgrid models.
[[nodiscard]] inline std::vector<std::string> model_fixture_names() {
    return {"toy3", "banshee7"};
}

/// Looks up a built-in microgrid model by name.
[[nodiscard]] inline MicrogridModel make_model_fixture(const std::string& name) {
    if (name == "toy3") return toy3_model();
    if (name == "banshee7") return banshee7_model();
    throw ModelError("unknown model fixture: " + name);
}

}  // namespace mgsim
