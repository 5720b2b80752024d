#pragma once

// Structure-preserving transmission dynamics: swing equations at generator
// buses, first-order frequency-dependent behavior at load buses, and a
// droop-governed reheat steam turbine chain per generator.  Angles in rad,
// speeds in rad/s deviation from synchronous.

#include <string>
#include <vector>

#include <Eigen/Dense>

#include "esgrid/common.hpp"
#include "esgrid/network.hpp"

namespace esgrid {

struct GeneratorParams {
    double inertia_m = 0.05;    // M (s^2 * p.u. / rad), typically 2H/omega_s
    double damping = 0.005;     // D (p.u. per rad/s)
    double droop_gain = 0.053;  // governor gain (p.u. per rad/s), 1/(R*omega_s)
    double t_gov = 0.2;         // governor servo (s)
    double t_ch = 0.3;          // steam chest (s)
    double t_rh = 7.0;          // reheater (s)
    double f_hp = 0.3;          // high-pressure turbine fraction
    bool agc_participation = true;
    double agc_gain = 1.0;      // relative share of the area AGC signal

    void validate() const {
        if (!(inertia_m > 0.0)) throw validation_error("generator: inertia must be > 0");
        if (damping < 0.0) throw validation_error("generator: damping must be >= 0");
        if (!(t_gov > 0.0 && t_ch > 0.0 && t_rh > 0.0))
            throw validation_error("generator: time constants must be > 0");
        if (f_hp < 0.0 || f_hp > 1.0) throw validation_error("generator: f_hp must lie in [0, 1]");
    }
};

struct GovernorTurbineState {
    double x_gov = 0.0;
    double x_ch = 0.0;
    double x_rh = 0.0;
    double p_ref = 0.0;  // dispatch setpoint
    double p_agc = 0.0;  // secondary-control setpoint, piecewise constant

    double mechanical_power(const GeneratorParams& g) const {
        return g.f_hp * x_ch + (1.0 - g.f_hp) * x_rh;
    }
};

// Case-derived constants for the swing integrator.
struct TransmissionModel {
    Eigen::MatrixXd b;               // b_ij = |V_i||V_j| / x_ij, zero off-line
    std::vector<int> gen_bus;        // bus index (0-based) per generator
    std::vector<int> gen_of_bus;     // -1 for non-generator buses
    std::vector<GeneratorParams> gens;
    double f_nominal = 60.0;

    int size() const { return static_cast<int>(b.rows()); }
    int n_gens() const { return static_cast<int>(gen_bus.size()); }

    static TransmissionModel from_case(const NetworkCase& c,
                                       const std::vector<GeneratorParams>& gen_params,
                                       double f_nominal = 60.0) {
        TransmissionModel m;
        const int n = c.size();
        m.b = Eigen::MatrixXd::Zero(n, n);
        for (const auto& l : c.lines) {
            // fixed voltage magnitudes per the pinned bus limits
            const double vi = c.bus(l.from).v_limits.hi;
            const double vk = c.bus(l.to).v_limits.hi;
            const double bij = vi * vk / l.x;
            m.b(l.from - 1, l.to - 1) += bij;
            m.b(l.to - 1, l.from - 1) += bij;
        }
        m.gen_of_bus.assign(n, -1);
        for (const auto& bus : c.buses)
            if (bus.kind == BusKind::Generator) {
                m.gen_of_bus[bus.id - 1] = static_cast<int>(m.gen_bus.size());
                m.gen_bus.push_back(bus.id - 1);
            }
        if (gen_params.size() != m.gen_bus.size())
            throw validation_error("transmission model: generator parameter count mismatch");
        m.gens = gen_params;
        for (const auto& g : m.gens) g.validate();
        m.f_nominal = f_nominal;
        return m;
    }
};

struct TransmissionState {
    double t = 0.0;
    Eigen::VectorXd delta;                     // per-bus angle
    Eigen::VectorXd omega;                     // per-generator speed deviation
    std::vector<GovernorTurbineState> chains;  // per-generator
    Eigen::VectorXd u;       // per-bus actual controllable-load response
    Eigen::VectorXd p_d;     // per-bus uncontrollable demand (positive draw)
    Eigen::VectorXd d_load;  // per-bus frequency coefficient at load buses
};

namespace detail {

// Net electrical outflow at every bus: sum_j b_ij sin(delta_i - delta_j).
inline Eigen::VectorXd bus_outflows(const TransmissionModel& m, const Eigen::VectorXd& delta) {
    const int n = m.size();
    Eigen::VectorXd f = Eigen::VectorXd::Zero(n);
    for (int i = 0; i < n; ++i)
        for (int k = i + 1; k < n; ++k) {
            const double bik = m.b(i, k);
            if (bik == 0.0) continue;
            const double w = bik * std::sin(delta(i) - delta(k));
            f(i) += w;
            f(k) -= w;
        }
    return f;
}

inline void governor_turbine_deriv(const GeneratorParams& g, const GovernorTurbineState& s,
                                   double omega_dev, double& dx_gov, double& dx_ch, double& dx_rh) {
    const double agc = g.agc_participation ? s.p_agc : 0.0;
    const double target = s.p_ref + agc - g.droop_gain * omega_dev;
    dx_gov = (target - s.x_gov) / g.t_gov;
    dx_ch = (s.x_gov - s.x_ch) / g.t_ch;
    dx_rh = (s.x_ch - s.x_rh) / g.t_rh;
}

}  // namespace detail

// One fixed-step RK4 advance of the coupled swing/governor dynamics.  The
// control inputs u, p_d and the AGC setpoints are held for the step.
inline TransmissionState step_swing(const TransmissionState& state, const TransmissionModel& m, double dt) {
    if (!(dt > 0.0 && dt <= 0.05)) throw domain_error("step_swing: dt must lie in (0, 0.05]");
    const int n = m.size();
    const int ng = m.n_gens();
    for (int i = 0; i < n; ++i)
        if (m.gen_of_bus[i] < 0 && state.d_load(i) == 0.0)
            throw numerical_error("step_swing: zero frequency coefficient at load bus " + std::to_string(i + 1));

    // packed state: delta (n), omega (ng), chains (3*ng)
    const int dim = n + ng + 3 * ng;
    Eigen::VectorXd y(dim);
    y.head(n) = state.delta;
    y.segment(n, ng) = state.omega;
    for (int g = 0; g < ng; ++g) {
        y(n + ng + 3 * g + 0) = state.chains[g].x_gov;
        y(n + ng + 3 * g + 1) = state.chains[g].x_ch;
        y(n + ng + 3 * g + 2) = state.chains[g].x_rh;
    }

    auto deriv = [&](const Eigen::VectorXd& ys) {
        Eigen::VectorXd dy(dim);
        const Eigen::VectorXd delta = ys.head(n);
        const Eigen::VectorXd flows = detail::bus_outflows(m, delta);
        for (int i = 0; i < n; ++i) {
            const int g = m.gen_of_bus[i];
            if (g >= 0) {
                dy(i) = ys(n + g);
            } else {
                dy(i) = (state.u(i) - flows(i) - state.p_d(i)) / state.d_load(i);
            }
        }
        for (int g = 0; g < ng; ++g) {
            const auto& gp = m.gens[g];
            GovernorTurbineState ch = state.chains[g];
            ch.x_gov = ys(n + ng + 3 * g + 0);
            ch.x_ch = ys(n + ng + 3 * g + 1);
            ch.x_rh = ys(n + ng + 3 * g + 2);
            const double omega = ys(n + g);
            const double p_m = ch.mechanical_power(gp);
            dy(n + g) = (p_m - gp.damping * omega - flows(m.gen_bus[g])) / gp.inertia_m;
            double d1, d2, d3;
            detail::governor_turbine_deriv(gp, ch, omega, d1, d2, d3);
            dy(n + ng + 3 * g + 0) = d1;
            dy(n + ng + 3 * g + 1) = d2;
            dy(n + ng + 3 * g + 2) = d3;
        }
        return dy;
    };

    const Eigen::VectorXd k1 = deriv(y);
    const Eigen::VectorXd k2 = deriv(y + 0.5 * dt * k1);
    const Eigen::VectorXd k3 = deriv(y + 0.5 * dt * k2);
    const Eigen::VectorXd k4 = deriv(y + dt * k3);
    const Eigen::VectorXd yn = y + dt / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4);

    TransmissionState out = state;
    out.t += dt;
    out.delta = yn.head(n);
    out.omega = yn.segment(n, ng);
    for (int g = 0; g < ng; ++g) {
        out.chains[g].x_gov = yn(n + ng + 3 * g + 0);
        out.chains[g].x_ch = yn(n + ng + 3 * g + 1);
        out.chains[g].x_rh = yn(n + ng + 3 * g + 2);
    }
    if (!out.delta.allFinite() || !out.omega.allFinite())
        throw numerical_error("step_swing: state diverged");
    return out;
}

// Standalone advance of one governor/turbine chain with a frozen speed
// deviation and AGC signal; returns the new mechanical power.
inline double governor_turbine_step(const GeneratorParams& g, GovernorTurbineState& s,
                                    double omega_dev, double agc_signal, double dt) {
    if (!(dt > 0.0)) throw domain_error("governor_turbine_step: dt must be > 0");
    s.p_agc = agc_signal;
    Eigen::Vector3d y(s.x_gov, s.x_ch, s.x_rh);
    auto deriv = [&](const Eigen::Vector3d& ys) {
        GovernorTurbineState tmp = s;
        tmp.x_gov = ys(0);
        tmp.x_ch = ys(1);
        tmp.x_rh = ys(2);
        Eigen::Vector3d d;
        detail::governor_turbine_deriv(g, tmp, omega_dev, d(0), d(1), d(2));
        return d;
    };
    const Eigen::Vector3d k1 = deriv(y);
    const Eigen::Vector3d k2 = deriv(y + 0.5 * dt * k1);
    const Eigen::Vector3d k3 = deriv(y + 0.5 * dt * k2);
    const Eigen::Vector3d k4 = deriv(y + dt * k3);
    y += dt / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
    s.x_gov = y(0);
    s.x_ch = y(1);
    s.x_rh = y(2);
    return s.mechanical_power(g);
}

// Per-bus power imbalance: mechanical minus electrical at generators, net
// load-side surplus at load buses.
inline Eigen::VectorXd compute_power_imbalance(const TransmissionState& state, const TransmissionModel& m) {
    const Eigen::VectorXd flows = detail::bus_outflows(m, state.delta);
    Eigen::VectorXd d(m.size());
    for (int i = 0; i < m.size(); ++i) {
        const int g = m.gen_of_bus[i];
        if (g >= 0)
            d(i) = state.chains[g].mechanical_power(m.gens[g]) - flows(i);
        else
            d(i) = state.u(i) - flows(i) - state.p_d(i);
    }
    return d;
}

// Speed deviation seen at every bus: generator rotor speeds, and the
// first-order angle rate at load buses.
inline Eigen::VectorXd bus_speed_deviation(const TransmissionState& state, const TransmissionModel& m) {
    const Eigen::VectorXd flows = detail::bus_outflows(m, state.delta);
    Eigen::VectorXd w(m.size());
    for (int i = 0; i < m.size(); ++i) {
        const int g = m.gen_of_bus[i];
        w(i) = (g >= 0) ? state.omega(g)
                        : (state.u(i) - flows(i) - state.p_d(i)) / state.d_load(i);
    }
    return w;
}

// Inertia-weighted system frequency in Hz.
inline double system_frequency(const TransmissionState& state, const TransmissionModel& m) {
    double num = 0.0, den = 0.0;
    for (int g = 0; g < m.n_gens(); ++g) {
        num += m.gens[g].inertia_m * state.omega(g);
        den += m.gens[g].inertia_m;
    }
    return m.f_nominal + (num / den) / (2.0 * pi);
}

// Steady state for given demand: dispatches generators proportionally to the
// given weights, solves the lossless angle flow by Newton, and seats the
// governor chains at their equilibrium.
inline TransmissionState solve_equilibrium(const TransmissionModel& m, const Eigen::VectorXd& p_d,
                                           const Eigen::VectorXd& d_load,
                                           const std::vector<double>& dispatch_weights) {
    const int n = m.size();
    const int ng = m.n_gens();
    if (static_cast<int>(dispatch_weights.size()) != ng)
        throw domain_error("solve_equilibrium: dispatch weight count mismatch");

    double wsum = 0.0;
    for (double w : dispatch_weights) {
        if (w < 0.0) throw domain_error("solve_equilibrium: negative dispatch weight");
        wsum += w;
    }
    if (wsum <= 0.0) throw domain_error("solve_equilibrium: dispatch weights sum to zero");

    const double total_demand = p_d.sum();
    Eigen::VectorXd inj = -p_d;
    std::vector<double> p_m(ng);
    for (int g = 0; g < ng; ++g) {
        p_m[g] = total_demand * dispatch_weights[g] / wsum;
        inj(m.gen_bus[g]) += p_m[g];
    }

    // Newton on angles with bus 0 as reference.
    Eigen::VectorXd delta = Eigen::VectorXd::Zero(n);
    for (int it = 0;; ++it) {
        const Eigen::VectorXd f = inj - detail::bus_outflows(m, delta);
        Eigen::VectorXd fr(n - 1);
        for (int i = 1; i < n; ++i) fr(i - 1) = f(i);
        if (fr.cwiseAbs().maxCoeff() < 1e-12) break;
        if (it >= 50)
            throw numerical_error("solve_equilibrium: no steady state found (angle flow diverged)");
        Eigen::MatrixXd J = Eigen::MatrixXd::Zero(n - 1, n - 1);
        for (int i = 1; i < n; ++i)
            for (int k = 1; k < n; ++k) {
                if (i == k) {
                    double s = 0.0;
                    for (int j = 0; j < n; ++j)
                        if (j != i && m.b(i, j) != 0.0) s += m.b(i, j) * std::cos(delta(i) - delta(j));
                    J(i - 1, k - 1) = -s;
                } else if (m.b(i, k) != 0.0) {
                    J(i - 1, k - 1) = m.b(i, k) * std::cos(delta(i) - delta(k));
                }
            }
        const Eigen::VectorXd dd = J.partialPivLu().solve(fr);
        if (!dd.allFinite())
            throw numerical_error("solve_equilibrium: singular angle Jacobian");
        for (int i = 1; i < n; ++i) delta(i) -= dd(i - 1);
    }

    TransmissionState st;
    st.delta = delta;
    st.omega = Eigen::VectorXd::Zero(ng);
    st.chains.resize(ng);
    for (int g = 0; g < ng; ++g) {
        st.chains[g].x_gov = p_m[g];
        st.chains[g].x_ch = p_m[g];
        st.chains[g].x_rh = p_m[g];
        st.chains[g].p_ref = p_m[g];
        st.chains[g].p_agc = 0.0;
    }
    st.u = Eigen::VectorXd::Zero(n);
    st.p_d = p_d;
    st.d_load = d_load;
    return st;
}

}  // namespace esgrid
