#include <catch2/catch_amalgamated.hpp>

#include <random>

#include "mgsim/network.hpp"

using namespace mgsim;
using Catch::Approx;

namespace {

NetworkModel two_bus_line(Real g, Real b) {
    NetworkModel net;
    net.buses = {{1, "a"}, {2, "b"}};
    net.branches = {{1, 2, g, b}};
    return net;
}

/// Independent oracle: S_k = V_k * conj(sum_m Y_km V_m).
InjectionResult complex_power_oracle(const Eigen::MatrixXcd& y, const Eigen::VectorXd& v,
                                     const Eigen::VectorXd& theta) {
    const Eigen::VectorXcd vc = polar_voltages(v, theta);
    const Eigen::VectorXcd s = vc.cwiseProduct((y * vc).conjugate());
    return {s.real(), s.imag()};
}

NetworkModel random_network(std::mt19937& rng, int n) {
    std::uniform_real_distribution<Real> xdist(0.05, 0.4);
    std::uniform_real_distribution<Real> rdist(0.01, 0.1);
    NetworkModel net;
    for (int i = 0; i < n; ++i) net.buses.push_back({100 + i, "b" + std::to_string(i)});
    for (int i = 1; i < n; ++i) {
        // random spanning tree plus one extra chord for n > 3
        std::uniform_int_distribution<int> pick(0, i - 1);
        const Real r = rdist(rng);
        const Real x = xdist(rng);
        const Complex y = 1.0 / Complex(r, x);
        net.branches.push_back({100 + pick(rng), 100 + i, y.real(), y.imag()});
    }
    if (n > 3) {
        const Complex y = 1.0 / Complex(rdist(rng), xdist(rng));
        net.branches.push_back({100, 100 + n - 1, y.real(), y.imag()});
    }
    return net;
}

}  // namespace

TEST_CASE("admittance assembly follows the sign convention", "[network]") {
    const Eigen::MatrixXcd y = build_admittance(two_bus_line(0.0, -10.0));
    CHECK(y(0, 0) == Complex(0.0, -10.0));
    CHECK(y(1, 1) == Complex(0.0, -10.0));
    CHECK(y(0, 1) == Complex(0.0, 10.0));
    CHECK(y(1, 0) == Complex(0.0, 10.0));
}

TEST_CASE("admittance rows sum to zero without shunts", "[network]") {
    std::mt19937 rng(7);
    for (int trial = 0; trial < 5; ++trial) {
        const NetworkModel net = random_network(rng, 6);
        const Eigen::MatrixXcd y = build_admittance(net);
        const Eigen::VectorXcd rowsum = y.rowwise().sum();
        for (int k = 0; k < y.rows(); ++k) {
            CHECK(std::abs(rowsum[k]) < 1e-12);
        }
    }
}

TEST_CASE("admittance includes shunt elements on the diagonal", "[network]") {
    NetworkModel net = two_bus_line(1.0, -5.0);
    net.buses[0].g_shunt = 0.2;
    net.buses[0].b_shunt = 0.1;
    const Eigen::MatrixXcd y = build_admittance(net);
    CHECK(y(0, 0) == Complex(1.2, -4.9));
    CHECK(y(1, 1) == Complex(1.0, -5.0));
}

TEST_CASE("network validation rejects malformed models", "[network]") {
    NetworkModel dup = two_bus_line(0.0, -10.0);
    dup.buses.push_back({1, "clone"});
    CHECK_THROWS_AS(validate_network(dup), ModelError);

    NetworkModel dangling = two_bus_line(0.0, -10.0);
    dangling.branches.push_back({1, 99, 0.0, -1.0});
    CHECK_THROWS_AS(validate_network(dangling), ModelError);

    NetworkModel split = two_bus_line(0.0, -10.0);
    split.buses.push_back({3, "island"});
    CHECK_THROWS_AS(validate_network(split), ModelError);

    NetworkModel bad_zip = two_bus_line(0.0, -10.0);
    bad_zip.loads.push_back({2, "l", 0.1, 0.05, 0.5, 0.5, 0.5, 0.0, 0.0, 1.0, 0.0, 0.0});
    CHECK_THROWS_AS(validate_network(bad_zip), ModelError);
}

TEST_CASE("zip load reduces to its base at nominal conditions", "[network][zip]") {
    const ZipLoadParams load{0, "l", 0.6, 0.25, 0.1, 0.3, 0.6, 0.5, 0.3, 0.2, 2.0, -0.1};
    const PowerPQ s = eval_zip_load(load, 1.0, 1.0);
    CHECK(s.p == Approx(0.6).margin(1e-15));
    CHECK(s.q == Approx(0.25).margin(1e-15));
}

TEST_CASE("zip load evaluates the polynomial and frequency factor", "[network][zip]") {
    // Frozen hand evaluation: v = 0.95, f = 0.99,
    // fractions [0.1 0.3 0.6], k_pf = 2:
    //   0.1*0.9025 + 0.3*0.95 + 0.6 = 0.97525, factor 1 + 2*(-0.01) = 0.98
    const ZipLoadParams load{0, "l", 1.0, 1.0, 0.1, 0.3, 0.6, 0.5, 0.3, 0.2, 2.0, -0.1};
    const PowerPQ s = eval_zip_load(load, 0.95, 0.99);
    CHECK(s.p == Approx(0.97525 * 0.98).epsilon(1e-12));
    // q side: 0.5*0.9025 + 0.3*0.95 + 0.2 = 0.93625, factor 1 + (-0.1)*(-0.01)
    CHECK(s.q == Approx(0.93625 * 1.001).epsilon(1e-12));
}

TEST_CASE("constant-power zip load ignores voltage", "[network][zip]") {
    const ZipLoadParams load{0, "l", 0.4, 0.1, 0.0, 0.0, 1.0, 0.0, 0.0, 1.0, 0.0, 0.0};
    for (Real v : {0.7, 0.9, 1.1}) {
        const PowerPQ s = eval_zip_load(load, v, 1.0);
        CHECK(s.p == Approx(0.4));
        CHECK(s.q == Approx(0.1));
    }
}

TEST_CASE("zip voltage gradient matches finite differences", "[network][zip]") {
    const ZipLoadParams load{0, "l", 0.6, 0.2, 0.6, 0.2, 0.2, 0.6, 0.2, 0.2, 2.5, -2.0};
    const Real v = 0.93;
    const Real f = 1.004;
    const Real h = 1e-6;
    const PowerPQ up = eval_zip_load(load, v + h, f);
    const PowerPQ dn = eval_zip_load(load, v - h, f);
    const PowerPQ grad = zip_voltage_gradient(load, v, f);
    CHECK(grad.p == Approx((up.p - dn.p) / (2 * h)).epsilon(1e-6));
    CHECK(grad.q == Approx((up.q - dn.q) / (2 * h)).epsilon(1e-6));

    const PowerPQ fu = eval_zip_load(load, v, f + h);
    const PowerPQ fd = eval_zip_load(load, v, f - h);
    const PowerPQ fgrad = zip_frequency_gradient(load, v);
    CHECK(fgrad.p == Approx((fu.p - fd.p) / (2 * h)).epsilon(1e-6));
    CHECK(fgrad.q == Approx((fu.q - fd.q) / (2 * h)).epsilon(1e-6));
}

TEST_CASE("flat profile injects nothing", "[network][injections]") {
    const NetworkModel net = two_bus_line(2.0, -8.0);
    const Eigen::MatrixXcd y = build_admittance(net);
    const Eigen::VectorXd v = Eigen::VectorXd::Ones(2);
    const Eigen::VectorXd theta = Eigen::VectorXd::Zero(2);
    const InjectionResult inj = network_injections(y, v, theta);
    CHECK(inj.p.cwiseAbs().maxCoeff() < 1e-15);
    CHECK(inj.q.cwiseAbs().maxCoeff() < 1e-15);
}

TEST_CASE("two-bus injection matches the closed form", "[network][injections]") {
    // Lossless line b = -10: P = v1 v2 b sin(t12) with the assembly signs,
    // so a +0.1 rad lead on bus 1 exports p = 10 sin(0.1).
    const NetworkModel net = two_bus_line(0.0, -10.0);
    const Eigen::MatrixXcd y = build_admittance(net);
    Eigen::VectorXd v(2), theta(2);
    v << 1.0, 1.0;
    theta << 0.1, 0.0;
    const InjectionResult inj = network_injections(y, v, theta);
    CHECK(inj.p[0] == Approx(10.0 * std::sin(0.1)).epsilon(1e-12));
    CHECK(inj.p[1] == Approx(-10.0 * std::sin(0.1)).epsilon(1e-12));
    // both ends absorb the line's reactive loss symmetrically here
    CHECK(inj.q[0] == Approx(10.0 - 10.0 * std::cos(0.1)).epsilon(1e-9));
    CHECK(inj.q[1] == Approx(inj.q[0]).epsilon(1e-12));
}

TEST_CASE("polar injections agree with the complex-power oracle", "[network][injections]") {
    std::mt19937 rng(11);
    std::uniform_real_distribution<Real> vdist(0.9, 1.1);
    std::uniform_real_distribution<Real> tdist(-0.3, 0.3);
    for (int trial = 0; trial < 8; ++trial) {
        const NetworkModel net = random_network(rng, 5);
        const Eigen::MatrixXcd y = build_admittance(net);
        Eigen::VectorXd v(5), theta(5);
        for (int k = 0; k < 5; ++k) {
            v[k] = vdist(rng);
            theta[k] = tdist(rng);
        }
        const InjectionResult a = network_injections(y, v, theta);
        const InjectionResult b = complex_power_oracle(y, v, theta);
        CHECK((a.p - b.p).cwiseAbs().maxCoeff() < 1e-12);
        CHECK((a.q - b.q).cwiseAbs().maxCoeff() < 1e-12);
    }
}

TEST_CASE("total injected power equals branch losses", "[network][injections]") {
    std::mt19937 rng(23);
    std::uniform_real_distribution<Real> vdist(0.95, 1.05);
    std::uniform_real_distribution<Real> tdist(-0.2, 0.2);
    for (int trial = 0; trial < 5; ++trial) {
        const NetworkModel net = random_network(rng, 6);
        const Eigen::MatrixXcd y = build_admittance(net);
        Eigen::VectorXd v(6), theta(6);
        for (int k = 0; k < 6; ++k) {
            v[k] = vdist(rng);
            theta[k] = tdist(rng);
        }
        const InjectionResult inj = network_injections(y, v, theta);
        const Eigen::VectorXcd vc = polar_voltages(v, theta);
        Real loss = 0.0;
        for (const Branch& br : net.branches) {
            const int a = net.index_of(br.from);
            const int b = net.index_of(br.to);
            const Complex ibr = Complex(br.g, br.b) * (vc[a] - vc[b]);
            loss += (std::norm(ibr) * br.g) / (br.g * br.g + br.b * br.b);
        }
        CHECK(inj.p.sum() == Approx(loss).margin(1e-9));
    }
}
