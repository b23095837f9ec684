#pragma once

#include <algorithm>
#include <map>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "mgsim/common.hpp"

namespace mgsim {

// ======================================================================
// Model types
// ======================================================================

struct Bus {
    int id = 0;
    std::string name;
    Real v_nominal = 1.0;  ///< target magnitude used for deviation reporting
    Real g_shunt = 0.0;    ///< shunt conductance, p.u.
    Real b_shunt = 0.0;    ///< shunt susceptance, p.u.
};

/// Series branch between two buses, given directly as an admittance y = g + jb.
struct Branch {
    int from = 0;
    int to = 0;
    Real g = 0.0;
    Real b = 0.0;
};

/// Builds a branch from a series impedance r + jx.
[[nodiscard]] inline Branch make_branch(int from, int to, Real r, Real x) {
    const Complex y = 1.0 / Complex(r, x);
    return {from, to, y.real(), y.imag()};
}

/// Voltage- and frequency-dependent composite load.
///
/// p(v, f) = p0 * (z_p v^2 + i_p v + c_p) * (1 + k_pf (f - f0)), q analogous.
/// The three fractions of each axis must sum to one.
struct ZipLoadParams {
    int bus = 0;
    std::string name;
    Real p0 = 0.0;
    Real q0 = 0.0;
    Real z_p = 0.0, i_p = 0.0, c_p = 1.0;
    Real z_q = 0.0, i_q = 0.0, c_q = 1.0;
    Real k_pf = 0.0;
    Real k_qf = 0.0;
};

struct NetworkModel {
    PerUnitBase base;
    std::vector<Bus> buses;
    std::vector<Branch> branches;
    std::vector<ZipLoadParams> loads;

    [[nodiscard]] int size() const { return static_cast<int>(buses.size()); }

    /// Dense index of a bus id; throws ModelError for unknown ids.
    [[nodiscard]] int index_of(int bus_id) const {
        for (int i = 0; i < size(); ++i) {
            if (buses[static_cast<size_t>(i)].id == bus_id) return i;
        }
        throw ModelError("unknown bus id " + std::to_string(bus_id));
    }
};

// ======================================================================
// Validation and admittance assembly
// ======================================================================

/// Structural checks: unique bus ids, branch endpoints exist, ZIP fractions
/// sum to one, and the graph is connected. Throws ModelError on violation.
inline void validate_network(const NetworkModel& net) {
    if (net.buses.empty()) throw ModelError("network has no buses");
    std::map<int, int> seen;
    for (int i = 0; i < net.size(); ++i) {
        const int id = net.buses[static_cast<size_t>(i)].id;
        if (!seen.emplace(id, i).second) {
            throw ModelError("duplicate bus id " + std::to_string(id));
        }
    }
    for (const Branch& br : net.branches) {
        if (!seen.count(br.from) || !seen.count(br.to)) {
            throw ModelError("branch references unknown bus " +
                             std::to_string(seen.count(br.from) ? br.to : br.from));
        }
        if (br.from == br.to) throw ModelError("branch endpoints coincide");
    }
    for (const ZipLoadParams& load : net.loads) {
        if (!seen.count(load.bus)) {
            throw ModelError("load '" + load.name + "' references unknown bus " +
                             std::to_string(load.bus));
        }
        const Real sp = load.z_p + load.i_p + load.c_p;
        const Real sq = load.z_q + load.i_q + load.c_q;
        if (std::abs(sp - 1.0) > 1e-9 || std::abs(sq - 1.0) > 1e-9) {
            throw ModelError("load '" + load.name + "' ZIP fractions do not sum to 1");
        }
    }
    // Connectivity via breadth-first search over branches.
    std::vector<char> reached(static_cast<size_t>(net.size()), 0);
    std::vector<int> queue{0};
    reached[0] = 1;
    while (!queue.empty()) {
        const int node = queue.back();
        queue.pop_back();
        const int id = net.buses[static_cast<size_t>(node)].id;
        for (const Branch& br : net.branches) {
            const int other = br.from == id ? br.to : (br.to == id ? br.from : -1);
            if (other < 0) continue;
            const int j = seen.at(other);
            if (!reached[static_cast<size_t>(j)]) {
                reached[static_cast<size_t>(j)] = 1;
                queue.push_back(j);
            }
        }
    }
    if (std::find(reached.begin(), reached.end(), 0) != reached.end()) {
        throw ModelError("network graph is disconnected");
    }
}

/// Dense bus admittance matrix. Convention: Y_kk = sum of incident branch
/// admittances plus the bus shunt, Y_km = -y_branch.
[[nodiscard]] inline Eigen::MatrixXcd build_admittance(const NetworkModel& net) {
    validate_network(net);
    const int n = net.size();
    Eigen::MatrixXcd y = Eigen::MatrixXcd::Zero(n, n);
    for (const Branch& br : net.branches) {
        const int a = net.index_of(br.from);
        const int b = net.index_of(br.to);
        const Complex yb(br.g, br.b);
        y(a, a) += yb;
        y(b, b) += yb;
        y(a, b) -= yb;
        y(b, a) -= yb;
    }
    for (int i = 0; i < n; ++i) {
        const Bus& bus = net.buses[static_cast<size_t>(i)];
        y(i, i) += Complex(bus.g_shunt, bus.b_shunt);
    }
    return y;
}

// ======================================================================
// ZIP load evaluation
// ======================================================================

/// Load drawn at voltage magnitude v (p.u.) and frequency f (p.u., f0 = 1).
[[nodiscard]] inline PowerPQ eval_zip_load(const ZipLoadParams& load, Real v, Real f) {
    const Real vp = load.z_p * v * v + load.i_p * v + load.c_p;
    const Real vq = load.z_q * v * v + load.i_q * v + load.c_q;
    return {load.p0 * vp * (1.0 + load.k_pf * (f - 1.0)),
            load.q0 * vq * (1.0 + load.k_qf * (f - 1.0))};
}

/// Partial derivatives of the ZIP laws with respect to voltage magnitude.
[[nodiscard]] inline PowerPQ zip_voltage_gradient(const ZipLoadParams& load, Real v, Real f) {
    return {load.p0 * (2.0 * load.z_p * v + load.i_p) * (1.0 + load.k_pf * (f - 1.0)),
            load.q0 * (2.0 * load.z_q * v + load.i_q) * (1.0 + load.k_qf * (f - 1.0))};
}

/// Partial derivatives of the ZIP laws with respect to frequency.
[[nodiscard]] inline PowerPQ zip_frequency_gradient(const ZipLoadParams& load, Real v) {
    const Real vp = load.z_p * v * v + load.i_p * v + load.c_p;
    const Real vq = load.z_q * v * v + load.i_q * v + load.c_q;
    return {load.p0 * vp * load.k_pf, load.q0 * vq * load.k_qf};
}

// ======================================================================
// Injections
// ======================================================================

struct InjectionResult {
    Eigen::VectorXd p;
    Eigen::VectorXd q;
};

/// Active/reactive power flowing from each bus into the network:
///   P_k = V_k sum_m V_m (G_km cos t_km + B_km sin t_km)
///   Q_k = V_k sum_m V_m (G_km sin t_km - B_km cos t_km)
[[nodiscard]] inline InjectionResult network_injections(const Eigen::MatrixXcd& y,
                                                        const Eigen::VectorXd& v,
                                                        const Eigen::VectorXd& theta) {
    const int n = static_cast<int>(v.size());
    InjectionResult out{Eigen::VectorXd::Zero(n), Eigen::VectorXd::Zero(n)};
    for (int k = 0; k < n; ++k) {
        Real pk = 0.0;
        Real qk = 0.0;
        for (int m = 0; m < n; ++m) {
            const Real g = y(k, m).real();
            const Real b = y(k, m).imag();
            if (g == 0.0 && b == 0.0) continue;
            const Real t = theta[k] - theta[m];
            pk += v[m] * (g * std::cos(t) + b * std::sin(t));
            qk += v[m] * (g * std::sin(t) - b * std::cos(t));
        }
        out.p[k] = v[k] * pk;
        out.q[k] = v[k] * qk;
    }
    return out;
}

/// Complex bus voltages from polar coordinates.
[[nodiscard]] inline Eigen::VectorXcd polar_voltages(const Eigen::VectorXd& v,
                                                     const Eigen::VectorXd& theta) {
    Eigen::VectorXcd out(v.size());
    for (int k = 0; k < v.size(); ++k) out[k] = std::polar(v[k], theta[k]);
    return out;
}

}  // namespace mgsim
