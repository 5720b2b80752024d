#pragma once

// Power flow on a subtransmission case: the decoupled linearized model used
// inside the optimizer, the full AC Newton-Raphson solve used as the plant and
// as the accuracy oracle, and the linear loss model fitted from AC samples.

#include <string>
#include <vector>

#include <Eigen/Dense>

#include "esgrid/common.hpp"
#include "esgrid/network.hpp"

namespace esgrid {

// Net injections for every bus (slack entries ignored); the PCC is pinned at
// (v_slack, theta_slack).  PV entries, when flagged, hold voltage magnitude
// instead of reactive power.
struct InjectionSpec {
    Eigen::VectorXd p;  // per-unit net active injections (loads negative)
    Eigen::VectorXd q;
    double v_slack = 1.0;
    double theta_slack = 0.0;  // rad
    std::vector<char> is_pv;        // optional, size N; slack flag ignored
    Eigen::VectorXd v_setpoint;     // used for PV buses only

    static InjectionSpec zero(int n) {
        InjectionSpec s;
        s.p = Eigen::VectorXd::Zero(n);
        s.q = Eigen::VectorXd::Zero(n);
        return s;
    }
};

struct PowerFlowSolution {
    Eigen::VectorXd v;      // per-bus voltage magnitude (p.u.)
    Eigen::VectorXd theta;  // per-bus angle (rad)
    double p_pcc = 0.0;     // slack active injection
    double q_pcc = 0.0;
    double p_loss = 0.0;    // sum of all net active injections
    bool converged = false;
    int iterations = 0;
};

// Nominal injections implied by a case: critical loads plus each aggregator's
// nominal draw evaluated at its nominal voltage.
inline InjectionSpec nominal_injections(const NetworkCase& c) {
    const int n = c.size();
    auto s = InjectionSpec::zero(n);
    for (const auto& b : c.buses) {
        s.p(b.id - 1) = b.p_nominal;
        s.q(b.id - 1) = b.q_nominal;
    }
    for (const auto& [id, par] : c.aggregators) {
        s.p(id - 1) -= par.p0;
        s.q(id - 1) -= par.q0;
    }
    if (c.has_pcc()) {
        const auto& pcc = c.bus(c.pcc_id());
        s.v_slack = pcc.v_limits.hi;  // PCC pinned at its (equal) limits
        s.theta_slack = deg2rad(pcc.theta_limits_deg.hi);
    }
    return s;
}

// Direct solve of [P; Q] = -[[-G, B'], [B, G]] [V; theta] with the slack
// rows dropped and its (v, theta) contribution moved to the right-hand side.
inline PowerFlowSolution solve_dlpf(const AdmittanceTriple& adm, const InjectionSpec& spec, int slack_id) {
    const int n = adm.size();
    const int s = slack_id - 1;
    if (s < 0 || s >= n) throw domain_error("solve_dlpf: slack id out of range");
    const int m = n - 1;

    std::vector<int> idx;  // non-slack bus indices
    idx.reserve(m);
    for (int i = 0; i < n; ++i)
        if (i != s) idx.push_back(i);

    // P = G V - B' theta ; Q = -B V - G theta
    Eigen::MatrixXd M(2 * m, 2 * m);
    Eigen::VectorXd rhs(2 * m);
    for (int a = 0; a < m; ++a) {
        const int i = idx[a];
        rhs(a) = spec.p(i) - (adm.G(i, s) * spec.v_slack - adm.B_prime(i, s) * spec.theta_slack);
        rhs(m + a) = spec.q(i) - (-adm.B(i, s) * spec.v_slack - adm.G(i, s) * spec.theta_slack);
        for (int b = 0; b < m; ++b) {
            const int k = idx[b];
            M(a, b) = adm.G(i, k);
            M(a, m + b) = -adm.B_prime(i, k);
            M(m + a, b) = -adm.B(i, k);
            M(m + a, m + b) = -adm.G(i, k);
        }
    }

    Eigen::FullPivLU<Eigen::MatrixXd> lu(M);
    if (!lu.isInvertible())
        throw numerical_error("solve_dlpf: reduced linear model is singular (degenerate case)");
    const Eigen::VectorXd u = lu.solve(rhs);

    PowerFlowSolution sol;
    sol.v = Eigen::VectorXd::Constant(n, spec.v_slack);
    sol.theta = Eigen::VectorXd::Constant(n, spec.theta_slack);
    for (int a = 0; a < m; ++a) {
        sol.v(idx[a]) = u(a);
        sol.theta(idx[a]) = u(m + a);
    }
    sol.p_pcc = adm.G.row(s).dot(sol.v) - adm.B_prime.row(s).dot(sol.theta);
    sol.q_pcc = -adm.B.row(s).dot(sol.v) - adm.G.row(s).dot(sol.theta);
    double total = sol.p_pcc;
    for (int i = 0; i < n; ++i)
        if (i != s) total += spec.p(i);
    sol.p_loss = total;
    sol.converged = true;
    sol.iterations = 1;
    return sol;
}

namespace detail {

inline void ac_injections(const AdmittanceTriple& adm, const Eigen::VectorXd& v,
                          const Eigen::VectorXd& theta, Eigen::VectorXd& p, Eigen::VectorXd& q) {
    const int n = adm.size();
    p.setZero(n);
    q.setZero(n);
    for (int i = 0; i < n; ++i) {
        double pi = 0.0, qi = 0.0;
        for (int k = 0; k < n; ++k) {
            const double gik = adm.G(i, k), bik = adm.B(i, k);
            if (gik == 0.0 && bik == 0.0) continue;
            const double d = theta(i) - theta(k);
            const double c = std::cos(d), sn = std::sin(d);
            pi += v(k) * (gik * c + bik * sn);
            qi += v(k) * (gik * sn - bik * c);
        }
        p(i) = v(i) * pi;
        q(i) = v(i) * qi;
    }
}

}  // namespace detail

// Full AC power flow, polar Newton-Raphson with analytic Jacobian, flat start.
inline PowerFlowSolution solve_ac_newton(const NetworkCase& c, const InjectionSpec& spec,
                                         double tol = 1e-8, int max_iter = 50) {
    const auto adm = build_admittance(c);
    const int n = c.size();
    const int s = c.pcc_id() - 1;

    std::vector<char> pv(n, 0);
    if (!spec.is_pv.empty()) {
        if (static_cast<int>(spec.is_pv.size()) != n)
            throw domain_error("solve_ac_newton: is_pv size mismatch");
        pv = spec.is_pv;
    }
    pv[s] = 0;

    Eigen::VectorXd v = Eigen::VectorXd::Ones(n);
    Eigen::VectorXd theta = Eigen::VectorXd::Constant(n, spec.theta_slack);
    v(s) = spec.v_slack;
    for (int i = 0; i < n; ++i)
        if (pv[i]) v(i) = spec.v_setpoint(i);

    // unknown layout: theta for all non-slack, then V for PQ buses
    std::vector<int> ang_idx, mag_idx;
    for (int i = 0; i < n; ++i)
        if (i != s) ang_idx.push_back(i);
    for (int i = 0; i < n; ++i)
        if (i != s && !pv[i]) mag_idx.push_back(i);
    const int na = static_cast<int>(ang_idx.size());
    const int nm = static_cast<int>(mag_idx.size());

    Eigen::VectorXd p_calc, q_calc;
    PowerFlowSolution sol;

    double mismatch_norm = 0.0;
    for (int it = 0; it <= max_iter; ++it) {
        detail::ac_injections(adm, v, theta, p_calc, q_calc);
        Eigen::VectorXd f(na + nm);
        for (int a = 0; a < na; ++a) f(a) = spec.p(ang_idx[a]) - p_calc(ang_idx[a]);
        for (int b = 0; b < nm; ++b) f(na + b) = spec.q(mag_idx[b]) - q_calc(mag_idx[b]);
        mismatch_norm = (na + nm) ? f.cwiseAbs().maxCoeff() : 0.0;
        if (mismatch_norm <= tol) {
            sol.converged = true;
            sol.iterations = it;
            break;
        }
        if (it == max_iter) break;

        Eigen::MatrixXd J(na + nm, na + nm);
        for (int a = 0; a < na; ++a) {
            const int i = ang_idx[a];
            for (int b = 0; b < na; ++b) {
                const int k = ang_idx[b];
                if (i == k) {
                    J(a, b) = -q_calc(i) - adm.B(i, i) * v(i) * v(i);
                } else {
                    const double d = theta(i) - theta(k);
                    J(a, b) = v(i) * v(k) * (adm.G(i, k) * std::sin(d) - adm.B(i, k) * std::cos(d));
                }
            }
            for (int b = 0; b < nm; ++b) {
                const int k = mag_idx[b];
                if (i == k) {
                    J(a, na + b) = p_calc(i) / v(i) + adm.G(i, i) * v(i);
                } else {
                    const double d = theta(i) - theta(k);
                    J(a, na + b) = v(i) * (adm.G(i, k) * std::cos(d) + adm.B(i, k) * std::sin(d));
                }
            }
        }
        for (int a = 0; a < nm; ++a) {
            const int i = mag_idx[a];
            for (int b = 0; b < na; ++b) {
                const int k = ang_idx[b];
                if (i == k) {
                    J(na + a, b) = p_calc(i) - adm.G(i, i) * v(i) * v(i);
                } else {
                    const double d = theta(i) - theta(k);
                    J(na + a, b) = -v(i) * v(k) * (adm.G(i, k) * std::cos(d) + adm.B(i, k) * std::sin(d));
                }
            }
            for (int b = 0; b < nm; ++b) {
                const int k = mag_idx[b];
                if (i == k) {
                    J(na + a, na + b) = q_calc(i) / v(i) - adm.B(i, i) * v(i);
                } else {
                    const double d = theta(i) - theta(k);
                    J(na + a, na + b) = v(i) * (adm.G(i, k) * std::sin(d) - adm.B(i, k) * std::cos(d));
                }
            }
        }

        Eigen::PartialPivLU<Eigen::MatrixXd> lu(J);
        const Eigen::VectorXd dx = lu.solve(f);
        if (!dx.allFinite())
            throw numerical_error("solve_ac_newton: singular Jacobian");
        for (int a = 0; a < na; ++a) theta(ang_idx[a]) += dx(a);
        for (int b = 0; b < nm; ++b) v(mag_idx[b]) += dx(na + b);
        if (v.minCoeff() <= 0.0)
            throw numerical_error("solve_ac_newton: voltage collapsed below zero during iteration");
    }

    if (!sol.converged)
        throw numerical_error("solve_ac_newton: no convergence after " + std::to_string(max_iter) +
                              " iterations, final mismatch " + std::to_string(mismatch_norm));

    detail::ac_injections(adm, v, theta, p_calc, q_calc);
    sol.v = v;
    sol.theta = theta;
    sol.p_pcc = p_calc(s);
    sol.q_pcc = q_calc(s);
    sol.p_loss = p_calc.sum();
    return sol;
}

// Self-consistent state with every aggregator idle: its draw follows the
// exponential load at the solved bus voltage, so the injections and the AC
// solution are mutually consistent (fixed-point iteration on the loads).
struct NaturalState {
    PowerFlowSolution sol;
    InjectionSpec spec;               // injections realized at the fixed point
    Eigen::VectorXd p_sl, q_sl;       // per-bus aggregator draws (0 elsewhere)
};

inline NaturalState natural_subnet_state(const NetworkCase& c, double tol = 1e-13, int max_iter = 60) {
    NaturalState ns;
    ns.spec = nominal_injections(c);
    const int n = c.size();
    ns.p_sl = Eigen::VectorXd::Zero(n);
    ns.q_sl = Eigen::VectorXd::Zero(n);
    for (int it = 0; it < max_iter; ++it) {
        ns.sol = solve_ac_newton(c, ns.spec);
        double worst = 0.0;
        for (const auto& [id, par] : c.aggregators) {
            const int i = id - 1;
            const double v_nl = par.v_nl_limits.clamp(ns.sol.v(i));
            const double p_new = par.p0 * std::pow(v_nl / par.v0, par.alpha_p);
            const double q_new = par.q0 * std::pow(v_nl / par.v0, par.alpha_q);
            worst = std::max({worst, std::abs(p_new - ns.p_sl(i)), std::abs(q_new - ns.q_sl(i))});
            ns.p_sl(i) = p_new;
            ns.q_sl(i) = q_new;
            ns.spec.p(i) = c.bus(id).p_nominal - p_new;
            ns.spec.q(i) = c.bus(id).q_nominal - q_new;
        }
        if (worst < tol) return ns;
    }
    throw numerical_error("natural_subnet_state: load/voltage fixed point did not settle");
}

struct LossModel {
    double d_l = 0.0;  // slope against PCC active power
    double c = 0.0;    // intercept (p.u.)
    double max_residual = 0.0;

    double loss_at(double p_pcc) const { return d_l * p_pcc + c; }
};

// Least-squares fit of total active loss against PCC injection over scaled
// nominal loadings.
inline LossModel fit_loss_model(const NetworkCase& c, const std::vector<double>& load_scalings) {
    if (load_scalings.size() < 2)
        throw domain_error("fit_loss_model: need at least two load scalings");
    {
        bool distinct = false;
        for (std::size_t i = 1; i < load_scalings.size(); ++i)
            if (load_scalings[i] != load_scalings[0]) distinct = true;
        if (!distinct) throw domain_error("fit_loss_model: scalings must not all coincide");
    }

    const auto base = nominal_injections(c);
    const int s = c.pcc_id() - 1;
    Eigen::MatrixXd A(load_scalings.size(), 2);
    Eigen::VectorXd y(load_scalings.size());
    for (std::size_t k = 0; k < load_scalings.size(); ++k) {
        InjectionSpec spec = base;
        spec.p *= load_scalings[k];
        spec.q *= load_scalings[k];
        PowerFlowSolution sol;
        try {
            sol = solve_ac_newton(c, spec);
        } catch (const numerical_error& e) {
            throw numerical_error("fit_loss_model: sample at scaling " + std::to_string(load_scalings[k]) +
                                  " failed: " + e.what());
        }
        A(k, 0) = sol.p_pcc;
        A(k, 1) = 1.0;
        y(k) = sol.p_loss;
    }
    const Eigen::Vector2d fit = A.colPivHouseholderQr().solve(y);
    LossModel m;
    m.d_l = fit(0);
    m.c = fit(1);
    m.max_residual = (A * fit - y).cwiseAbs().maxCoeff();
    return m;
}

// Default sampling bracket for the loss fit.
inline LossModel fit_loss_model(const NetworkCase& c) {
    std::vector<double> s;
    for (int k = 0; k < 9; ++k) s.push_back(0.8 + 0.05 * k);
    return fit_loss_model(c, s);
}

}  // namespace esgrid
