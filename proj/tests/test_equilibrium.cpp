#include <catch2/catch_amalgamated.hpp>

#include <cmath>

#include "mgsim/equilibrium.hpp"
#include "mgsim/fixtures.hpp"

using namespace mgsim;

namespace {

MicrogridModel single_unit_model(Real p_load, Real q_load, Real c_p, Real c_q, Real z_p,
                                 Real z_q, Real k_pf, Real k_qf, Real r_c_machine) {
    MicrogridModel model;
    model.network.buses = {{1, "bus1", 1.0, 0.0, 0.0}};
    ZipLoadParams load;
    load.bus = 1;
    load.name = "load";
    load.p0 = p_load;
    load.q0 = q_load;
    load.z_p = z_p;
    load.i_p = 1.0 - z_p - c_p;
    load.c_p = c_p;
    load.z_q = z_q;
    load.i_q = 1.0 - z_q - c_q;
    load.c_q = c_q;
    load.k_pf = k_pf;
    load.k_qf = k_qf;
    model.network.loads = {load};

    MachineRatings ratings;
    ratings.name = "unit";
    ratings.bus = 1;
    ratings.s_rated_va = 10.0e6;  // capacity fraction one: machine base == system base
    ratings.r_c = r_c_machine;
    model.units = {{to_system_base(ratings, model.network.base), {}, {}}};
    model.validate();
    return model;
}

/// Residual certificate on a solved equilibrium through the complex-power
/// path: S_k = V_k conj((Y V)_k) must match injections minus loads everywhere.
void check_power_balance(const MicrogridModel& model, const EquilibriumSolution& sol,
                         const LoadScaling& scaling, Real tol) {
    const ExtendedNetwork ext = build_extended(model);
    const Eigen::VectorXcd vc = polar_voltages(sol.v, sol.theta);
    const Eigen::VectorXcd flow = ext.y * vc;
    for (int i = 0; i < ext.size(); ++i) {
        Complex s_net = vc[i] * std::conj(flow[i]);
        Complex s_inj{0.0, 0.0};
        for (int k = 0; k < static_cast<int>(model.units.size()); ++k) {
            if (ext.terminal[static_cast<size_t>(k)] == i) {
                s_inj += Complex(sol.output[static_cast<size_t>(k)].p,
                                 sol.output[static_cast<size_t>(k)].q);
            }
        }
        Complex s_load{0.0, 0.0};
        for (const ZipLoadParams& load : ext.net.loads) {
            if (ext.net.index_of(load.bus) != i) continue;
            const PowerPQ s = eval_zip_load(load, sol.v[i], sol.f);
            s_load += Complex(scaling.apply(s.p), scaling.apply(s.q));
        }
        CAPTURE(i);
        CHECK(std::abs(s_inj - s_load - s_net) < tol);
    }
}

}  // namespace

TEST_CASE("load scaling arithmetic") {
    LoadScaling scaling;
    scaling.factor = 1.4;
    scaling.shed = 0.1;
    CHECK(scaling.apply(0.2) == Catch::Approx(0.2 * 1.4 * 0.9).epsilon(1e-14));

    const MicrogridModel model = toy3_model();
    const PowerPQ base = total_base_load(model.network);
    CHECK(base.p == Catch::Approx(0.20).epsilon(1e-14));
    CHECK(base.q == Catch::Approx(0.10).epsilon(1e-14));
    const Real expected = 1.0 * (0.12 + 0.06 + 0.12) / std::hypot(0.20, 0.10);
    CHECK(load_factor_scale(model, 1.0) == Catch::Approx(expected).epsilon(1e-12));
}

TEST_CASE("machine ratings rescale onto the system base") {
    MachineRatings m;
    m.name = "u";
    m.bus = 1;
    m.s_rated_va = 1.2e6;  // capacity fraction 0.12
    PerUnitBase base;
    const InverterParams par = to_system_base(m, base);
    CHECK(par.s_rated == Catch::Approx(0.12).epsilon(1e-14));
    // 377 * 5e-5 / 0.02304 on the 10 MVA, 480 V base
    CHECK(par.l_f == Catch::Approx(base.w_base() * 5e-5 / base.z_base()).epsilon(1e-14));
    CHECK(par.c_f == Catch::Approx(base.w_base() * 1e-5 * base.z_base()).epsilon(1e-14));
    CHECK(par.r_f == Catch::Approx(0.005 / 0.12).epsilon(1e-12));
    CHECK(par.r_c == Catch::Approx(0.004 / 0.12).epsilon(1e-12));
    CHECK(par.l_c == Catch::Approx(0.015 / 0.12).epsilon(1e-12));
    CHECK(par.kp_i == Catch::Approx(5.0 / 0.12).epsilon(1e-12));
    CHECK(par.ki_i == Catch::Approx(20.0 / 0.12).epsilon(1e-12));
    CHECK(par.kp_v == Catch::Approx(1.0 * 0.12).epsilon(1e-12));
    CHECK(par.ki_v == Catch::Approx(10.0 * 0.12).epsilon(1e-12));
    CHECK(par.k_df == Catch::Approx(0.01).epsilon(1e-14));
    CHECK_THROWS_AS(to_system_base(MachineRatings{.s_rated_va = 0.0}, base), ModelError);
}

TEST_CASE("zero load settles at nominal frequency and voltage") {
    MicrogridModel model;
    model.network.buses = {{1, "a", 1.0, 0.0, 0.0}, {2, "b", 1.0, 0.0, 0.0}};
    model.network.branches = {make_branch(1, 2, 0.01, 0.1)};
    MachineRatings ratings;
    ratings.name = "unit";
    ratings.bus = 1;
    model.units = {{to_system_base(ratings, model.network.base), {}, {}}};
    model.validate();

    const EquilibriumSolution sol = solve_droop_equilibrium(model);
    CHECK(std::abs(sol.f - 1.0) < 1e-10);
    CHECK((sol.v.array() - 1.0).abs().maxCoeff() < 1e-10);
    CHECK(sol.theta.cwiseAbs().maxCoeff() < 1e-10);
    CHECK(std::abs(sol.output[0].p) < 1e-10);
    CHECK(std::abs(sol.output[0].q) < 1e-10);
}

TEST_CASE("single unit with rigid load lands on the droop line") {
    // lossless coupling, so the unit's active output equals the load exactly
    const MicrogridModel model =
        single_unit_model(0.5, 0.1, 1.0, 1.0, 0.0, 0.0, 0.0, 0.0, 0.0);
    const EquilibriumSolution sol = solve_droop_equilibrium(model);

    CHECK(sol.f == Catch::Approx(1.0 - 0.01 * 0.5).epsilon(1e-9));
    CHECK(sol.output[0].p == Catch::Approx(0.5).epsilon(1e-9));

    // voltage droop holds at the terminal node with the solved reactive output
    const ExtendedNetwork ext = build_extended(model);
    const Real v_term = sol.v[ext.terminal[0]];
    CHECK(v_term == Catch::Approx(1.0 + 0.05 * (0.0 - sol.output[0].q)).epsilon(1e-9));
    check_power_balance(model, sol, {}, 1e-9);
}

TEST_CASE("rigid load splits inversely with droop gains") {
    MicrogridModel model = toy3_model();
    for (Branch& br : model.network.branches) br = make_branch(br.from, br.to, 0.0, 0.10);
    ZipLoadParams& load = model.network.loads[0];
    load.z_p = load.i_p = load.z_q = load.i_q = 0.0;
    load.c_p = load.c_q = 1.0;
    load.k_pf = load.k_qf = 0.0;
    for (InverterUnit& unit : model.units) unit.inverter.r_c = 0.0;

    const EquilibriumSolution sol = solve_droop_equilibrium(model);
    // sum of 1/k_df is 400, load 0.2: the frequency sags by 0.2/400
    CHECK(sol.f == Catch::Approx(1.0 - 0.2 / 400.0).epsilon(1e-8));
    CHECK(sol.output[0].p == Catch::Approx(0.05).margin(1e-8));
    CHECK(sol.output[1].p == Catch::Approx(0.10).margin(1e-8));
    CHECK(sol.output[2].p == Catch::Approx(0.05).margin(1e-8));
    check_power_balance(model, sol, {}, 1e-9);

    SECTION("a frequency trim on the stiff unit shifts the whole split onto it") {
        EquilibriumOptions opts;
        opts.trims = {{0.0, 0.0}, {0.001, 0.0}, {0.0, 0.0}};
        const EquilibriumSolution trimmed = solve_equilibrium(model, EquilibriumMode::kDroop, opts);
        // trim/k_df of unit 2 covers the whole 0.2 load: frequency recovers
        CHECK(trimmed.f == Catch::Approx(1.0).epsilon(1e-8));
        CHECK(trimmed.output[0].p == Catch::Approx(0.0).margin(1e-8));
        CHECK(trimmed.output[1].p == Catch::Approx(0.2).margin(1e-8));
        CHECK(trimmed.output[2].p == Catch::Approx(0.0).margin(1e-8));
    }
}

TEST_CASE("toy model equilibrium carries a machine-verified power balance") {
    const MicrogridModel model = toy3_model();
    const EquilibriumSolution sol = solve_droop_equilibrium(model);
    CHECK(sol.residual_norm <= 1e-10);
    CHECK(sol.iterations <= 8);  // analytic Jacobian keeps Newton quadratic
    check_power_balance(model, sol, {}, 1e-9);

    // active output splits roughly 1:2:1, blurred only by line losses
    CHECK(sol.output[1].p == Catch::Approx(2.0 * sol.output[0].p).epsilon(0.05));
    CHECK(sol.output[2].p == Catch::Approx(sol.output[0].p).epsilon(0.02));
}

TEST_CASE("seven bus model equilibrium converges and balances") {
    const MicrogridModel model = banshee7_model();
    const EquilibriumSolution sol = solve_droop_equilibrium(model);
    CHECK(sol.residual_norm <= 1e-10);
    CHECK(sol.iterations <= 8);
    check_power_balance(model, sol, {}, 1e-9);
    CHECK(std::abs(sol.f - 1.0) < 0.01);
    for (int i = 0; i < sol.v.size(); ++i) CHECK(std::abs(sol.v[i] - 1.0) < 0.1);
}

TEST_CASE("pinning injections at the droop solution reproduces it") {
    const MicrogridModel model = toy3_model();
    const EquilibriumSolution droop = solve_droop_equilibrium(model);
    const EquilibriumSolution pinned = solve_constrained_transition(model, droop.output);
    CHECK(std::abs(pinned.f - droop.f) < 1e-9);
    CHECK((pinned.v - droop.v).cwiseAbs().maxCoeff() < 1e-9);
    CHECK((pinned.theta - droop.theta).cwiseAbs().maxCoeff() < 1e-9);
}

TEST_CASE("pinned injections agree with an independent two-variable solve") {
    // one unit, one bus: fix the terminal voltage and frequency, solve the
    // network by complex current balance, and Newton on (V_t, f) against the
    // prescribed terminal power. Entirely separate solve path.
    const MicrogridModel model =
        single_unit_model(0.4, 0.15, 0.2, 0.3, 0.5, 0.4, 2.0, -0.5, 0.02);
    const std::vector<PowerPQ> inj = {{0.45, 0.20}};

    const ExtendedNetwork ext = build_extended(model);
    const int bus = 0;
    const int term = ext.terminal[0];
    const auto terminal_power = [&](Real v_t, Real f) {
        Eigen::VectorXcd v = Eigen::VectorXcd::Ones(2);
        v[term] = Complex(v_t, 0.0);
        solve_network(ext.net, ext.y, {bus}, Eigen::VectorXcd::Zero(2), f, {}, v);
        const Complex flow = (ext.y * v)(term);
        return Complex(v[term] * std::conj(flow));
    };
    Real v_t = 1.0;
    Real f = 1.0;
    for (int it = 0; it < 60; ++it) {
        const Complex s = terminal_power(v_t, f);
        const Eigen::Vector2d res(s.real() - inj[0].p, s.imag() - inj[0].q);
        if (res.cwiseAbs().maxCoeff() < 1e-12) break;
        const Real h = 1e-7;
        const Complex sv = terminal_power(v_t + h, f);
        const Complex sf = terminal_power(v_t, f + h);
        Eigen::Matrix2d jac;
        jac << (sv.real() - s.real()) / h, (sf.real() - s.real()) / h,
            (sv.imag() - s.imag()) / h, (sf.imag() - s.imag()) / h;
        const Eigen::Vector2d step = jac.partialPivLu().solve(res);
        v_t -= step[0];
        f -= step[1];
    }

    const EquilibriumSolution sol = solve_constrained_transition(model, inj);
    CHECK(sol.f == Catch::Approx(f).epsilon(1e-8));
    CHECK(sol.v[term] == Catch::Approx(v_t).epsilon(1e-8));
    check_power_balance(model, sol, {}, 1e-9);
}

TEST_CASE("binding capacity closure lands every engaged unit on its circle") {
    const MicrogridModel model = toy3_model();
    const EquilibriumSolution droop = solve_droop_equilibrium(model);
    std::vector<Real> s_droop;
    for (const PowerPQ& out : droop.output) s_droop.push_back(std::hypot(out.p, out.q));

    SECTION("all units engaged below their droop output") {
        EquilibriumOptions opts;
        opts.engaged = {0, 1, 2};
        opts.s_ref = {0.9 * s_droop[0], 0.9 * s_droop[1], 0.9 * s_droop[2]};
        const EquilibriumSolution sol =
            solve_equilibrium(model, EquilibriumMode::kRegulated, opts);
        for (int k = 0; k < 3; ++k) {
            CAPTURE(k);
            const Real s_m = std::hypot(sol.output[static_cast<size_t>(k)].p,
                                        sol.output[static_cast<size_t>(k)].q);
            CHECK(s_m == Catch::Approx(opts.s_ref[static_cast<size_t>(k)]).epsilon(1e-8));
            CHECK(sol.xi_s[static_cast<size_t>(k)] <= 1e-12);  // pull-down only
        }
        // the held correction enters the droop law scaled by k_w ki_s
        const InverterParams& par = model.units[0].inverter;
        const PowerRegulatorParams& reg = model.units[0].power_reg;
        const Real supp_w = reg.k_w * reg.ki_s * sol.xi_s[0];
        CHECK(sol.f ==
              Catch::Approx(par.w0 + par.k_df * (par.p0 - sol.output[0].p) + supp_w)
                  .epsilon(1e-9));
        check_power_balance(model, sol, {}, 1e-9);
    }

    SECTION("one engaged unit sheds output onto its droop-governed peers") {
        EquilibriumOptions opts;
        opts.engaged = {1};
        opts.s_ref = {0.5 * s_droop[1]};
        const EquilibriumSolution sol =
            solve_equilibrium(model, EquilibriumMode::kRegulated, opts);
        CHECK(std::hypot(sol.output[1].p, sol.output[1].q) ==
              Catch::Approx(opts.s_ref[0]).epsilon(1e-8));
        CHECK(sol.xi_s[1] < 0.0);
        CHECK(sol.xi_s[0] == 0.0);
        CHECK(sol.output[0].p > droop.output[0].p);  // peers pick up the slack
        CHECK(sol.output[2].p > droop.output[2].p);
        check_power_balance(model, sol, {}, 1e-9);
    }
}

TEST_CASE("equilibrium option validation") {
    const MicrogridModel model = toy3_model();
    EquilibriumOptions opts;
    CHECK_THROWS_AS(solve_equilibrium(model, EquilibriumMode::kConstrained, opts), ModelError);
    opts.engaged = {0};
    CHECK_THROWS_AS(solve_equilibrium(model, EquilibriumMode::kRegulated, opts), ModelError);
    opts.s_ref = {0.1};
    opts.engaged = {7};
    CHECK_THROWS_AS(solve_equilibrium(model, EquilibriumMode::kRegulated, opts), ModelError);
}

TEST_CASE("an unmeetable rigid load reports divergence") {
    const MicrogridModel model =
        single_unit_model(50.0, 10.0, 1.0, 1.0, 0.0, 0.0, 0.0, 0.0, 0.02);
    CHECK_THROWS_AS(solve_droop_equilibrium(model), ConvergenceError);
}

TEST_CASE("feasibility sweep traces a band around full capacity") {
    const MicrogridModel model = toy3_model();

    // slight overload: a wedge of circle angles still meets the security box
    const FeasibilityMap slight = sweep_feasibility(model, 1.02, {});
    REQUIRE(slight.points.size() == 181);
    CHECK(slight.feasible_count() >= 3);
    for (const FeasibilityPoint& pt : slight.points) {
        if (!pt.solved) continue;
        const bool in_box = std::abs(pt.delta_f) <= slight.df_max &&
                            pt.delta_v.cwiseAbs().maxCoeff() <= slight.dv_max;
        CHECK(pt.feasible == in_box);  // flags must mirror the stored deviations
    }

    // far overload is infeasible at every angle, and so is a light loading
    // that cannot absorb full-capacity injection
    CHECK(sweep_feasibility(model, 1.5, {}).feasible_count() == 0);
    CHECK(sweep_feasibility(model, 0.7, {}).feasible_count() == 0);

    FeasibilityOptions single;
    single.n_angles = 1;
    const FeasibilityMap mid = sweep_feasibility(model, 1.0, single);
    REQUIRE(mid.points.size() == 1);
    CHECK(mid.points[0].offset == Catch::Approx(0.0).margin(1e-12));
}

TEST_CASE("minimum shed search finds the first feasible lattice point") {
    const MicrogridModel model = toy3_model();
    FeasibilityOptions fopts;
    fopts.n_angles = 37;
    const Real step = 1e-3;
    const Real shed_max = 0.25;

    SECTION("already-feasible loading needs no shedding") {
        CHECK(min_shed_search(model, 1.02, fopts, step, shed_max) == 0.0);
    }

    SECTION("overload yields the smallest shed whose predecessor is infeasible") {
        const Real found = min_shed_search(model, 1.20, fopts, step, shed_max);
        CHECK(found > 0.0);
        FeasibilityOptions probe = fopts;
        probe.shed = found;
        CHECK(sweep_feasibility(model, 1.20, probe).feasible_count() > 0);
        probe.shed = found - step;
        CHECK(sweep_feasibility(model, 1.20, probe).feasible_count() == 0);
    }
}
