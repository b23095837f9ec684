#include <catch2/catch_amalgamated.hpp>

#include <random>

#include "mgsim/inverter.hpp"

using namespace mgsim;
using Catch::Approx;

namespace {

constexpr Real kWb = 2.0 * kPi * 60.0;

InverterParams table_like_params() {
    InverterParams par;
    par.s_rated = 0.12;
    par.l_f = 0.8;
    par.r_f = 0.005;
    par.c_f = 1e-4;
    par.l_c = 0.4;
    par.r_c = 0.08;
    par.kp_i = 4.0;
    par.ki_i = 16.0;
    par.kp_v = 0.012;
    par.ki_v = 0.12;
    par.k_df = 0.01;
    par.k_dv = 0.05;
    par.p0 = 0.08;
    par.q0 = 0.02;
    return par;
}


}  // namespace

TEST_CASE("droop laws move references against measured power", "[inverter][droop]") {
    const InverterParams par = table_like_params();
    const PrimarySignals at_setpoint = droop_primary(par, par.p0, par.q0);
    CHECK(at_setpoint.w_ref == Approx(1.0));
    CHECK(at_setpoint.v_dref == Approx(1.0));
    CHECK(at_setpoint.v_qref == 0.0);

    // 0.05 p.u. above the active setpoint drops frequency by k_df * 0.05
    const PrimarySignals loaded = droop_primary(par, par.p0 + 0.05, par.q0 + 0.04);
    CHECK(loaded.w_ref == Approx(1.0 - 0.01 * 0.05).epsilon(1e-12));
    CHECK(loaded.v_dref == Approx(1.0 - 0.05 * 0.04).epsilon(1e-12));

    // supplementary trims add on top
    const PrimarySignals trimmed = droop_primary(par, par.p0, par.q0, -2e-4, 1.5e-3);
    CHECK(trimmed.w_ref == Approx(1.0 - 2e-4).epsilon(1e-12));
    CHECK(trimmed.v_dref == Approx(1.0 + 1.5e-3).epsilon(1e-12));
}

TEST_CASE("voltage regulator reproduces its defining arithmetic", "[inverter]") {
    const InverterParams par = table_like_params();
    InverterState st;
    st.v_d = 0.98;
    st.v_q = 0.01;
    st.i_gd = 0.3;
    st.i_gq = -0.1;
    st.phi_vd = 0.02;
    st.phi_vq = -0.005;
    const CurrentCommand cmd = voltage_regulator_step(par, st, 1.0, 0.0, 1.001);
    CHECK(cmd.i_dref == Approx(0.3 - 1.001 * par.c_f * 0.01 + par.kp_v * 0.02 +
                               par.ki_v * 0.02).epsilon(1e-12));
    CHECK(cmd.i_qref == Approx(-0.1 + 1.001 * par.c_f * 0.98 + par.kp_v * (-0.01) +
                               par.ki_v * (-0.005)).epsilon(1e-12));
}

TEST_CASE("current regulator reproduces its defining arithmetic", "[inverter]") {
    const InverterParams par = table_like_params();
    InverterState st;
    st.v_d = 0.99;
    st.v_q = -0.02;
    st.i_d = 0.25;
    st.i_q = 0.05;
    st.phi_id = 0.001;
    st.phi_iq = -0.002;
    const VoltageCommand e = current_regulator_step(par, st, 0.3, 0.0, 0.999);
    CHECK(e.e_d == Approx(0.99 - 0.999 * par.l_f * 0.05 + par.kp_i * (0.3 - 0.25) +
                          par.ki_i * 0.001).epsilon(1e-12));
    CHECK(e.e_q == Approx(-0.02 + 0.999 * par.l_f * 0.25 + par.kp_i * (0.0 - 0.05) +
                          par.ki_i * (-0.002)).epsilon(1e-12));
}

TEST_CASE("current limiter clamps with active-power priority", "[inverter][limiter]") {
    const LimitedCommand pass = current_limiter_baseline(0.4, 0.2, 1.0, true);
    CHECK_FALSE(pass.saturated);
    CHECK(pass.i_dref == 0.4);
    CHECK(pass.i_qref == 0.2);

    // d component takes the whole budget, q is squeezed out
    const LimitedCommand hard = current_limiter_baseline(1.0, 1.0, 1.0, true);
    CHECK(hard.saturated);
    CHECK(hard.i_dref == Approx(1.0));
    CHECK(hard.i_qref == Approx(0.0).margin(1e-12));

    // proportional scaling without priority: (0.8, 0.6) -> (0.4, 0.3) at 0.5
    const LimitedCommand scaled = current_limiter_baseline(0.8, 0.6, 0.5, false);
    CHECK(scaled.saturated);
    CHECK(scaled.i_dref == Approx(0.4).epsilon(1e-12));
    CHECK(scaled.i_qref == Approx(0.3).epsilon(1e-12));
}

TEST_CASE("current limiter output never exceeds the circle", "[inverter][limiter]") {
    std::mt19937 rng(3);
    std::uniform_real_distribution<Real> dist(-2.0, 2.0);
    std::uniform_real_distribution<Real> lim(0.2, 1.5);
    for (int trial = 0; trial < 200; ++trial) {
        const Real imax = lim(rng);
        const bool prio = trial % 2 == 0;
        const LimitedCommand out = current_limiter_baseline(dist(rng), dist(rng), imax, prio);
        CHECK(std::hypot(out.i_dref, out.i_qref) <= imax + 1e-12);
    }
}

TEST_CASE("measured power follows the dq power formula", "[inverter]") {
    InverterState st;
    st.v_d = 1.0;
    st.v_q = 0.05;
    st.i_gd = 0.4;
    st.i_gq = -0.2;
    const PowerPQ s = measured_power(st);
    CHECK(s.p == Approx(1.0 * 0.4 + 0.05 * (-0.2)).epsilon(1e-14));
    CHECK(s.q == Approx(0.05 * 0.4 - 1.0 * (-0.2)).epsilon(1e-14));
}

TEST_CASE("stationary state yields near-zero derivatives", "[inverter][equilibrium]") {
    const InverterParams par = table_like_params();
    const Real w_ref = 0.9995;
    const InverterState st = stationary_inverter_state(par, 1.01, 0.35, -0.08, w_ref);

    // the droop supplement that makes this the commanded operating point
    const Real supp_w = w_ref - (par.w0 + par.k_df * (par.p0 - st.p_m));
    const Real supp_v = st.v_d - (par.v0 + par.k_dv * (par.q0 - st.q_m));
    const PrimarySignals primary = droop_primary(par, st.p_m, st.q_m, supp_w, supp_v);
    REQUIRE(primary.w_ref == Approx(w_ref).epsilon(1e-14));
    REQUIRE(primary.v_dref == Approx(st.v_d).epsilon(1e-14));

    GridInterface grid;
    grid.w_common = w_ref;
    grid.v_bus_d = st.v_d - par.r_c * st.i_gd + par.l_c * st.i_gq;
    grid.v_bus_q = -par.r_c * st.i_gq - par.l_c * st.i_gd;

    const InverterDerivatives der = inverter_derivatives(par, st, primary, grid, {}, kWb);
    CHECK(std::abs(der.d.delta) < 1e-8);
    CHECK(std::abs(der.d.phi_id) < 1e-8);
    CHECK(std::abs(der.d.phi_iq) < 1e-8);
    CHECK(std::abs(der.d.phi_vd) < 1e-8);
    CHECK(std::abs(der.d.phi_vq) < 1e-8);
    CHECK(std::abs(der.d.v_d) < 1e-6);
    CHECK(std::abs(der.d.v_q) < 1e-6);
    CHECK(std::abs(der.d.i_d) < 1e-6);
    CHECK(std::abs(der.d.i_q) < 1e-6);
    CHECK(std::abs(der.d.i_gd) < 1e-6);
    CHECK(std::abs(der.d.i_gq) < 1e-6);
    CHECK(std::abs(der.d.p_m) < 1e-8);
    CHECK(std::abs(der.d.q_m) < 1e-8);
}

TEST_CASE("frame rotation round-trips", "[inverter][frames]") {
    std::mt19937 rng(5);
    std::uniform_real_distribution<Real> dist(-1.5, 1.5);
    for (int trial = 0; trial < 50; ++trial) {
        const Complex ph(dist(rng), dist(rng));
        const Real delta = dist(rng);
        const Complex back = to_local_frame(to_common_frame(ph, delta), delta);
        CHECK(std::abs(back - ph) < 1e-14);
    }
}
