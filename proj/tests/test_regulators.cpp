#include <catch2/catch_amalgamated.hpp>

#include <random>

#include "mgsim/regulators.hpp"

using namespace mgsim;
using Catch::Approx;

TEST_CASE("capacity error is one-sided", "[regulators][power]") {
    CHECK(capacity_error(1.2, 1.0) == 0.0);
    CHECK(capacity_error(1.0, 1.0) == 0.0);
    CHECK(capacity_error(1.0, 1.1) == Approx(-0.1));
}

TEST_CASE("power regulator PI arithmetic and channel split", "[regulators][power]") {
    const PowerRegulatorParams par{0.2, 4.0, 0.008, 0.006};
    const PowerRegulatorOutput out = power_regulator_step(par, 0.0, -0.1);
    // u = 0.2 * -0.1 = -0.02
    CHECK(out.dw1 == Approx(0.008 * -0.02).epsilon(1e-12));
    CHECK(out.dv1 == Approx(0.006 * -0.02).epsilon(1e-12));
    CHECK(out.xi_s_dot == Approx(-0.1));

    const PowerRegulatorOutput with_integral = power_regulator_step(par, -0.05, 0.0);
    CHECK(with_integral.dw1 == Approx(0.008 * 4.0 * -0.05).epsilon(1e-12));
    CHECK(with_integral.dv1 == Approx(0.006 * 4.0 * -0.05).epsilon(1e-12));
    CHECK(with_integral.xi_s_dot == 0.0);
}

TEST_CASE("power regulator only ever pulls output down", "[regulators][power]") {
    const PowerRegulatorParams par{0.1, 2.0, 0.004, 0.003};
    std::mt19937 rng(17);
    std::uniform_real_distribution<Real> sdist(0.0, 2.0);
    Real xi = 0.0;
    const Real dt = 1e-2;
    for (int step = 0; step < 500; ++step) {
        const Real e = capacity_error(1.0, sdist(rng));
        REQUIRE(e <= 0.0);
        const PowerRegulatorOutput out = power_regulator_step(par, xi, e);
        CHECK(out.dw1 <= 1e-15);
        CHECK(out.dv1 <= 1e-15);
        CHECK(out.dw1 == Approx(out.dv1 * par.k_w / par.k_v).margin(1e-15));
        xi += dt * out.xi_s_dot;  // integral of a nonpositive signal stays nonpositive
        REQUIRE(xi <= 0.0);
    }
}

TEST_CASE("allocation ratio follows the power factor", "[regulators][allocation]") {
    CHECK(allocation_from_power_factor(1.0) == Approx(0.0).margin(1e-12));
    CHECK(allocation_from_power_factor(0.6) == Approx(4.0 / 3.0).epsilon(1e-12));
    CHECK(allocation_from_power_factor(std::sqrt(0.5)) == Approx(1.0).epsilon(1e-12));
    CHECK_THROWS_AS(allocation_from_power_factor(0.0), ModelError);
    CHECK_THROWS_AS(allocation_from_power_factor(1.1), ModelError);
    CHECK_THROWS_AS(allocation_from_power_factor(-0.5), ModelError);
}

TEST_CASE("deadband passes only the overshoot", "[regulators][deadband]") {
    CHECK(deadband(0.005, 0.01) == 0.0);
    CHECK(deadband(-0.01, 0.01) == 0.0);
    CHECK(deadband(0.015, 0.01) == Approx(0.005).epsilon(1e-12));
    CHECK(deadband(-0.02, 0.01) == Approx(-0.01).epsilon(1e-12));
    CHECK(deadband(0.08, 0.05) == Approx(0.03).epsilon(1e-12));
    CHECK(deadband(0.05, 0.05) == 0.0);
}

TEST_CASE("trigger logic truth table", "[regulators][trigger]") {
    const TriggerDecision shed = trigger_logic(0.01, 0.02);
    CHECK(shed.state_f);
    CHECK(shed.state_v);
    CHECK(shed.action == TriggerAction::kShed);

    const TriggerDecision realloc_f = trigger_logic(0.01, 0.0);
    CHECK(realloc_f.state_f);
    CHECK_FALSE(realloc_f.state_v);
    CHECK(realloc_f.action == TriggerAction::kReallocate);

    const TriggerDecision realloc_v = trigger_logic(-0.002, 0.03);
    CHECK_FALSE(realloc_v.state_f);
    CHECK(realloc_v.state_v);
    CHECK(realloc_v.action == TriggerAction::kReallocate);

    const TriggerDecision none = trigger_logic(0.0, 0.0);
    CHECK_FALSE(none.state_f);
    CHECK_FALSE(none.state_v);
    CHECK(none.action == TriggerAction::kNone);

    // surplus on both axes also asks for nothing
    CHECK(trigger_logic(-0.01, -0.01).action == TriggerAction::kNone);
}

TEST_CASE("vf regulator acts only under REALLOCATE", "[regulators][vf]") {
    const VfRegulatorParams par;
    RegulatorState st;

    const VfRegulatorOutput idle = vf_regulator_step(par, st, 0.0, 0.0, TriggerAction::kNone);
    CHECK(idle.dw2 == 0.0);
    CHECK(idle.dv2 == 0.0);
    CHECK(idle.xi_f_dot == 0.0);
    CHECK(idle.xi_v_dot == 0.0);

    const VfRegulatorOutput act =
        vf_regulator_step(par, st, 0.01, -0.002, TriggerAction::kReallocate);
    CHECK(act.dw2 == Approx(0.05 * 0.01).epsilon(1e-12));
    CHECK(act.dv2 == Approx(0.05 * -0.002).epsilon(1e-12));
    CHECK(act.xi_f_dot == Approx(0.01));
    CHECK(act.xi_v_dot == Approx(-0.002));

    // charged integrators keep contributing when gated off (held outputs)
    st.xi_f = 2e-3;
    st.xi_v = -1e-3;
    const VfRegulatorOutput held = vf_regulator_step(par, st, 0.0, 0.0, TriggerAction::kNone);
    CHECK(held.dw2 == Approx(par.ki_f * 2e-3).epsilon(1e-12));
    CHECK(held.dv2 == Approx(par.ki_v * -1e-3).epsilon(1e-12));
    CHECK(held.xi_f_dot == 0.0);
    CHECK(held.xi_v_dot == 0.0);

    // under SHED the channels freeze too: shedding is the host's job
    const VfRegulatorOutput shed = vf_regulator_step(par, st, 0.02, 0.06, TriggerAction::kShed);
    CHECK(shed.xi_f_dot == 0.0);
    CHECK(shed.xi_v_dot == 0.0);
    CHECK(shed.dw2 == Approx(par.ki_f * 2e-3).epsilon(1e-12));
}

TEST_CASE("in-band errors produce no vf drive from rest", "[regulators][vf]") {
    const VfRegulatorParams par;
    std::mt19937 rng(29);
    std::uniform_real_distribution<Real> fdist(-par.df_max, par.df_max);
    std::uniform_real_distribution<Real> vdist(-par.dv_max, par.dv_max);
    RegulatorState st;  // integrators at rest
    for (int trial = 0; trial < 100; ++trial) {
        const Real e_f = deadband(fdist(rng), par.df_max);
        const Real e_v = deadband(vdist(rng), par.dv_max);
        REQUIRE(e_f == 0.0);
        REQUIRE(e_v == 0.0);
        const TriggerDecision dec = trigger_logic(e_f, e_v);
        REQUIRE(dec.action == TriggerAction::kNone);
        const VfRegulatorOutput out = vf_regulator_step(par, st, e_f, e_v, dec.action);
        CHECK(out.dw2 == 0.0);
        CHECK(out.dv2 == 0.0);
        CHECK(out.xi_f_dot == 0.0);
        CHECK(out.xi_v_dot == 0.0);
    }
}
