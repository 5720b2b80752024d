#pragma once

// Smart-load algebra for an ES aggregator: a series voltage source (backed by
// a shunt inverter) in front of an aggregate noncritical load with exponential
// voltage dependence.  All quantities per-unit, bus voltage on the d-axis.

#include <cstddef>
#include <limits>
#include <string>
#include <vector>

#include "esgrid/common.hpp"

namespace esgrid {

struct AggregatorParams {
    double p0 = 1.0;   // nominal noncritical active power (> 0)
    double q0 = 0.0;   // nominal noncritical reactive power
    double v0 = 1.0;   // nominal load voltage magnitude
    double alpha_p = 2.0;  // active exponent (!= 0)
    double alpha_q = 2.0;  // reactive exponent
    Interval v_nl_limits{0.6, 1.4};
    Interval v_es_d_limits{-0.7, 0.7};
    Interval v_es_q_limits{-0.7, 0.7};
    double h = 100.0;  // active-power deviation cost coefficient
    double g = 40.0;   // reactive-power deviation cost coefficient

    void validate() const {
        if (!(p0 > 0.0)) throw validation_error("aggregator: p0 must be > 0");
        if (!(v0 > 0.0)) throw validation_error("aggregator: v0 must be > 0");
        if (alpha_p == 0.0) throw validation_error("aggregator: alpha_p must be nonzero");
        if (!(v_nl_limits.lo > 0.0)) throw validation_error("aggregator: lower load-voltage limit must be > 0");
        if (!v_nl_limits.ordered() || !v_es_d_limits.ordered() || !v_es_q_limits.ordered())
            throw validation_error("aggregator: limit pair out of order");
        if (h < 0.0 || g < 0.0) throw validation_error("aggregator: cost coefficients must be >= 0");
    }
};

struct NoncriticalPower {
    double p_nl = 0.0;
    double q_nl = 0.0;
};

// Exponential load model evaluated at load voltage v_nl.
inline NoncriticalPower noncritical_power(double v_nl, const AggregatorParams& par) {
    if (!par.v_nl_limits.contains(v_nl))
        throw domain_error("noncritical_power: v_nl=" + std::to_string(v_nl) + " outside [" +
                           std::to_string(par.v_nl_limits.lo) + ", " + std::to_string(par.v_nl_limits.hi) + "]");
    const double r = v_nl / par.v0;
    return {par.p0 * std::pow(r, par.alpha_p), par.q0 * std::pow(r, par.alpha_q)};
}

struct SmartLoadPower {
    double p_sl = 0.0;  // aggregate active power (= p_nl, shunt cancels series)
    double q_sl = 0.0;  // aggregate reactive power
    double p_nl = 0.0;
    double q_nl = 0.0;
    double v_nl = 0.0;
    double i_d = 0.0;
    double i_q = 0.0;
    double p_es_series = 0.0;  // series-source active power; shunt supplies the negative
    double q_es_series = 0.0;
};

// Forward map from an ES voltage and bus voltage to realized aggregate powers.
// With enforce_limits=false the load-voltage band is not checked (plant use);
// the v_nl field lets callers audit excursions.
inline SmartLoadPower forward_power(double v_es_d, double v_es_q, double v_s,
                                    const AggregatorParams& par, bool enforce_limits = true) {
    const double v_nl_d = v_s - v_es_d;
    const double v_nl_q = -v_es_q;
    const double v_nl2 = v_nl_d * v_nl_d + v_nl_q * v_nl_q;
    const double v_nl = std::sqrt(v_nl2);
    if (v_nl2 <= 0.0)
        throw domain_error("forward_power: load voltage collapsed to zero");
    if (enforce_limits && !par.v_nl_limits.contains(v_nl))
        throw domain_error("forward_power: v_nl=" + std::to_string(v_nl) + " outside limits");

    const double r = v_nl / par.v0;
    const double p_nl = par.p0 * std::pow(r, par.alpha_p);
    const double q_nl = par.q0 * std::pow(r, par.alpha_q);

    // Invert p_nl = v_nl_d i_d + v_nl_q i_q, q_nl = v_nl_q i_d - v_nl_d i_q.
    const double i_d = (p_nl * v_nl_d + q_nl * v_nl_q) / v_nl2;
    const double i_q = (p_nl * v_nl_q - q_nl * v_nl_d) / v_nl2;

    SmartLoadPower out;
    out.p_nl = p_nl;
    out.q_nl = q_nl;
    out.v_nl = v_nl;
    out.i_d = i_d;
    out.i_q = i_q;
    out.p_sl = p_nl;
    out.q_sl = -v_s * i_q;
    out.p_es_series = v_es_d * i_d + v_es_q * i_q;
    out.q_es_series = v_es_q * i_d - v_es_d * i_q;
    return out;
}

struct EsSetpoints {
    double v_es_d = 0.0;
    double v_es_q = 0.0;
    bool clamped = false;  // true if either component hit its saturation limit
    double delta = 0.0;    // feasibility discriminant, >= 0 for valid commands
};

// Closed-form ES voltage setpoints realizing a commanded (p*, q*) at bus
// voltage setpoint v_s_star (taken equal to v0 in the derivation).  The
// negative sqrt branch in the q component is the one that vanishes at the
// nominal command (p0, q0); the positive branch yields a spurious nonzero
// ES voltage there and is rejected.
inline EsSetpoints es_voltage_setpoints(double p_star, double q_star, double v_s_star,
                                        const AggregatorParams& par) {
    if (!(p_star > 0.0))
        throw domain_error("es_voltage_setpoints: p_star must be > 0");

    const double rho = p_star / par.p0;
    const double ap = par.alpha_p;
    const double aq = par.alpha_q;
    const double q0 = par.q0;

    const double rho_2ap = std::pow(rho, 2.0 / ap);
    const double rho_2aqap = std::pow(rho, 2.0 * aq / ap);
    double delta = p_star * p_star - rho_2ap * q_star * q_star + q0 * q0 * rho_2aqap;
    if (delta < 0.0) {
        if (delta > -1e-12)
            delta = 0.0;  // boundary-of-region command, round-off only
        else
            throw domain_error("es_voltage_setpoints: infeasible command, discriminant=" +
                               std::to_string(delta));
    }
    const double sqrt_delta = std::sqrt(delta);
    const double denom = p_star * p_star + q0 * q0 * rho_2aqap;

    const double num_q = rho_2ap * p_star * q_star - q0 * std::pow(rho, (aq + 1.0) / ap) * sqrt_delta;
    const double num_d = q0 * std::pow(rho, (aq + 2.0) / ap) * q_star + std::pow(rho, 1.0 / ap) * p_star * sqrt_delta;

    EsSetpoints sp;
    sp.delta = delta;
    const double raw_d = v_s_star - num_d / denom * par.v0;
    const double raw_q = num_q / denom * par.v0;
    sp.v_es_d = par.v_es_d_limits.clamp(raw_d);
    sp.v_es_q = par.v_es_q_limits.clamp(raw_q);
    sp.clamped = (sp.v_es_d != raw_d) || (sp.v_es_q != raw_q);
    return sp;
}

struct OperatingRegion {
    Interval p_limits;  // from the load-voltage band through the exponent
    Interval q_limits;  // rectangle: tightest reactive band over all p
    std::vector<double> p_samples;
    std::vector<double> q_lower;  // min achievable q_sl at each sampled p
    std::vector<double> q_upper;  // max achievable q_sl at each sampled p
};

// Achievable (p_sl, q_sl) region at bus voltage v_s.  Active-power limits come
// from the load-voltage band through the exponent.  For each sampled p the load
// voltage magnitude is fixed, so the ES voltage sweeps a circular arc clipped by
// its saturation box; q_sl is extremized over the arc set exactly (endpoints and
// interior critical angles), each candidate evaluated through forward_power.
inline OperatingRegion operating_region(const AggregatorParams& par, double v_s,
                                        std::size_t n_p_samples = 241) {
    par.validate();
    OperatingRegion reg;
    reg.p_limits = {par.p0 * std::pow(par.v_nl_limits.lo / par.v0, par.alpha_p),
                    par.p0 * std::pow(par.v_nl_limits.hi / par.v0, par.alpha_p)};

    for (std::size_t k = 0; k < n_p_samples; ++k) {
        const double frac = (n_p_samples == 1) ? 0.0 : double(k) / double(n_p_samples - 1);
        const double p = reg.p_limits.lo + frac * reg.p_limits.width();
        const double v_nl = par.v0 * std::pow(p / par.p0, 1.0 / par.alpha_p);
        const double q_nl = par.q0 * std::pow(p / par.p0, par.alpha_q / par.alpha_p);

        // Angle t parameterizes v_nl_d = v_nl cos t, v_nl_q = v_nl sin t.
        const double clo = (v_s - par.v_es_d_limits.hi) / v_nl;
        const double chi = (v_s - par.v_es_d_limits.lo) / v_nl;
        const double slo = -par.v_es_q_limits.hi / v_nl;
        const double shi = -par.v_es_q_limits.lo / v_nl;

        auto feasible = [&](double t) {
            const double c = std::cos(t), s = std::sin(t);
            const double tol = 1e-9;
            return c >= clo - tol && c <= chi + tol && s >= slo - tol && s <= shi + tol;
        };

        std::vector<double> cand;
        auto arc_angles = [&](double v, bool is_cos) {
            if (v < -1.0 || v > 1.0) return;
            if (is_cos) {
                const double a = std::acos(v);
                cand.push_back(a);
                cand.push_back(-a);
            } else {
                const double a = std::asin(v);
                cand.push_back(a);
                cand.push_back(pi - a);
            }
        };
        arc_angles(clo, true);
        arc_angles(chi, true);
        arc_angles(slo, false);
        arc_angles(shi, false);
        // q_sl(t) = -v_s (p sin t - q_nl cos t)/v_nl: interior extrema.
        const double t_crit = std::atan2(-p, q_nl);
        cand.push_back(t_crit);
        cand.push_back(t_crit + pi);
        cand.push_back(t_crit - pi);

        double q_min = std::numeric_limits<double>::infinity();
        double q_max = -q_min;
        for (double t : cand) {
            if (!feasible(t)) continue;
            const double v_es_d = v_s - v_nl * std::cos(t);
            const double v_es_q = -v_nl * std::sin(t);
            const auto fp = forward_power(par.v_es_d_limits.clamp(v_es_d),
                                          par.v_es_q_limits.clamp(v_es_q), v_s, par, false);
            q_min = std::min(q_min, fp.q_sl);
            q_max = std::max(q_max, fp.q_sl);
        }
        if (q_min > q_max) continue;  // p unreachable within the ES box
        reg.p_samples.push_back(p);
        reg.q_lower.push_back(q_min);
        reg.q_upper.push_back(q_max);
    }

    if (reg.p_samples.size() != n_p_samples)
        throw domain_error("operating_region: part of the active-power range is unreachable within the ES box");

    double lo = -std::numeric_limits<double>::infinity();
    double hi = std::numeric_limits<double>::infinity();
    for (std::size_t k = 0; k < reg.p_samples.size(); ++k) {
        lo = std::max(lo, reg.q_lower[k]);
        hi = std::min(hi, reg.q_upper[k]);
    }
    if (lo > hi) throw domain_error("operating_region: empty reactive rectangle");
    reg.q_limits = {lo, hi};
    return reg;
}

// Two independent PI loops drive the ES voltage components onto their
// setpoints through a short actuator lag; integration halts while the
// command saturates against the box (conditional anti-windup).
struct PiGains {
    double kp = 4.0;
    double ki = 300.0;
    double t_act = 0.005;  // actuator lag (s)
};

struct EsTracking {
    double v_es_d = 0.0;
    double v_es_q = 0.0;
    double sp_d = 0.0;
    double sp_q = 0.0;
    double int_d = 0.0;
    double int_q = 0.0;
};

inline void pi_track_step(EsTracking& st, const AggregatorParams& par, const PiGains& g, double dt) {
    if (!(dt > 0.0)) throw domain_error("pi_track_step: dt must be > 0");
    // Substep so the loop stays stable for any caller dt.
    const int n_sub = std::max(1, static_cast<int>(std::ceil(dt / 1e-3)));
    const double h = dt / n_sub;
    auto axis = [&](double sp, double& v, double& integ, const Interval& box) {
        for (int k = 0; k < n_sub; ++k) {
            const double err = sp - v;
            const double cmd = g.kp * err + integ;
            const double cmd_sat = box.clamp(cmd);
            const bool windup = (cmd != cmd_sat) &&
                                ((cmd > box.hi && err > 0.0) || (cmd < box.lo && err < 0.0));
            if (!windup) integ += g.ki * err * h;
            v += (cmd_sat - v) / g.t_act * h;
            v = box.clamp(v);
        }
    };
    axis(st.sp_d, st.v_es_d, st.int_d, par.v_es_d_limits);
    axis(st.sp_q, st.v_es_q, st.int_q, par.v_es_q_limits);
}

}  // namespace esgrid
