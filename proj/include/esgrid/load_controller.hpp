#pragma once

// Switched distributed load-side controller for the transmission layer.  In
// frequency-regulation mode each bus runs average consensus on its imbalance
// estimate and loads emit a saturated integral+proportional response; in
// load-recovery mode the estimates decay and loads return to nominal.

#include <string>
#include <vector>

#include <Eigen/Dense>

#include "esgrid/common.hpp"
#include "esgrid/network.hpp"

namespace esgrid {

enum class ControlMode { Frm, Lrm };

struct ControllerParams {
    double k_i = 1.0;         // integral gain on the consensus state (> 0)
    double k_p = 0.02;        // proportional gain on local speed deviation (> 0)
    double alpha = 0.1;       // recovery rate (1/s)
    double tau = 3.0;         // dwell time before returning to recovery (s)
    double freq_band = 0.05;  // acceptable |f - f_nominal| (Hz)
    Eigen::MatrixXd comm;     // a_ij: symmetric, zero diagonal, connected
    std::vector<char> emits;        // per-bus: true where a controllable load responds
    std::vector<Interval> u_limits; // per-bus response saturation (emitting buses)

    // Hard faults throw; soft ones come back as warnings.
    std::vector<std::string> validate() const {
        if (!(k_i > 0.0)) throw validation_error("controller: k_i must be > 0");
        if (!(k_p > 0.0)) throw validation_error("controller: k_p must be > 0");
        if (alpha < 0.0) throw validation_error("controller: alpha must be >= 0");
        if (tau < 0.0) throw validation_error("controller: tau must be >= 0");
        if (!(freq_band > 0.0)) throw validation_error("controller: freq_band must be > 0");
        const int n = static_cast<int>(comm.rows());
        if (comm.cols() != n || n == 0) throw validation_error("controller: comm matrix must be square");
        if (!comm.isApprox(comm.transpose()))
            throw validation_error("controller: comm matrix must be symmetric");
        for (int i = 0; i < n; ++i) {
            if (comm(i, i) != 0.0) throw validation_error("controller: comm diagonal must be zero");
            for (int k = 0; k < n; ++k)
                if (comm(i, k) < 0.0) throw validation_error("controller: comm weights must be >= 0");
        }
        // connectivity
        std::vector<char> seen(n, 0);
        std::vector<int> stack{0};
        seen[0] = 1;
        int count = 1;
        while (!stack.empty()) {
            const int v = stack.back();
            stack.pop_back();
            for (int w = 0; w < n; ++w)
                if (comm(v, w) > 0.0 && !seen[w]) {
                    seen[w] = 1;
                    ++count;
                    stack.push_back(w);
                }
        }
        if (count != n) throw validation_error("controller: comm graph is disconnected");

        std::vector<std::string> warnings;
        if (alpha == 0.0)
            warnings.push_back("controller: alpha = 0 holds load responses forever (no recovery)");
        return warnings;
    }

    // Communication mirrors the physical topology.
    static Eigen::MatrixXd comm_from_case(const NetworkCase& c, double weight = 10.0) {
        Eigen::MatrixXd a = Eigen::MatrixXd::Zero(c.size(), c.size());
        for (const auto& l : c.lines) {
            a(l.from - 1, l.to - 1) = weight;
            a(l.to - 1, l.from - 1) = weight;
        }
        return a;
    }
};

struct SwitchEvent {
    double time = 0.0;
    int phi = 0;  // 0: frequency-regulation entered, 1: recovery entered
};

struct ControllerState {
    ControlMode mode = ControlMode::Lrm;
    int phi = 1;
    double t_m = -1.0;        // latest regulation-mode entry
    double t_m_prime = -1.0;  // start of the in-band stretch that triggered recovery
    Eigen::VectorXd r;        // per-bus consensus state
    Eigen::VectorXd u_bar;    // per-bus required response (emitting buses)

    static ControllerState zero(int n) {
        ControllerState s;
        s.r = Eigen::VectorXd::Zero(n);
        s.u_bar = Eigen::VectorXd::Zero(n);
        return s;
    }
};

struct FreqSample {
    double t = 0.0;
    double f = 0.0;
};

// Mode machine.  Leaves regulation only after the frequency has stayed inside
// the band for a full dwell interval.
inline std::vector<SwitchEvent> switch_logic(ControllerState& st, const std::vector<FreqSample>& history,
                                             const ControllerParams& par, double f_nominal, double now) {
    if (history.empty()) throw domain_error("switch_logic: empty frequency history");
    if (now - history.front().t < par.tau - 1e-9)
        throw domain_error("switch_logic: frequency history shorter than the dwell time");

    std::vector<SwitchEvent> events;
    const double f_now = history.back().f;
    const bool outside = std::abs(f_now - f_nominal) > par.freq_band;

    if (st.mode == ControlMode::Lrm) {
        if (outside) {
            st.mode = ControlMode::Frm;
            st.phi = 0;
            st.t_m = now;
            st.t_m_prime = -1.0;
            events.push_back({now, 0});
        }
        return events;
    }

    // regulation mode: find the start of the trailing in-band stretch
    double band_start = -1.0;
    for (auto it = history.rbegin(); it != history.rend(); ++it) {
        if (it->t > now) continue;
        if (std::abs(it->f - f_nominal) > par.freq_band) break;
        band_start = it->t;
    }
    if (band_start >= 0.0 && now - band_start >= par.tau) {
        st.mode = ControlMode::Lrm;
        st.phi = 1;
        st.t_m_prime = band_start;
        events.push_back({now, 1});
    }
    return events;
}

// Reinitialize the consensus states from the measured per-bus imbalance at a
// regulation-mode entry.
inline void reinit(ControllerState& st, const Eigen::VectorXd& d) {
    st.r = d;
}

// Regulation mode: consensus dynamics on r plus saturated load responses.
// Saturation acts on the emitted response only, never on r itself.
inline void frm_step(ControllerState& st, const ControllerParams& par,
                     const Eigen::VectorXd& omega_dev, double dt) {
    if (st.mode != ControlMode::Frm) throw domain_error("frm_step: controller not in regulation mode");
    const Eigen::MatrixXd& a = par.comm;
    auto deriv = [&](const Eigen::VectorXd& r) -> Eigen::VectorXd {
        return a * r - a.rowwise().sum().asDiagonal() * r;
    };
    const Eigen::VectorXd k1 = deriv(st.r);
    const Eigen::VectorXd k2 = deriv(st.r + 0.5 * dt * k1);
    const Eigen::VectorXd k3 = deriv(st.r + 0.5 * dt * k2);
    const Eigen::VectorXd k4 = deriv(st.r + dt * k3);
    st.r += dt / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4);

    for (int i = 0; i < st.r.size(); ++i) {
        if (!par.emits.empty() && !par.emits[i]) {
            st.u_bar(i) = 0.0;
            continue;
        }
        double u = -par.k_i * st.r(i) - par.k_p * omega_dev(i);
        if (!par.u_limits.empty()) u = par.u_limits[i].clamp(u);
        st.u_bar(i) = u;
    }
}

// Recovery mode: exact exponential decay of the consensus states, integral
// response only.
inline void lrm_step(ControllerState& st, const ControllerParams& par, double dt) {
    if (st.mode != ControlMode::Lrm) throw domain_error("lrm_step: controller not in recovery mode");
    st.r *= std::exp(-par.alpha * dt);
    for (int i = 0; i < st.r.size(); ++i) {
        if (!par.emits.empty() && !par.emits[i]) {
            st.u_bar(i) = 0.0;
            continue;
        }
        double u = -par.k_i * st.r(i);
        if (!par.u_limits.empty()) u = par.u_limits[i].clamp(u);
        st.u_bar(i) = u;
    }
}

}  // namespace esgrid
