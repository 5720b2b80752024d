#pragma once

// Constrained setpoint optimization for the aggregators of one
// subtransmission network, on top of the linearized power flow model.  The
// same problem is solved two ways: a centralized QP used as the verification
// oracle, and multi-agent projected consensus dynamics in which every bus
// refines a full estimate of the network state by exchanging it with its
// physical neighbors.

#include <map>
#include <optional>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "esgrid/common.hpp"
#include "esgrid/es_aggregator.hpp"
#include "esgrid/network.hpp"
#include "esgrid/powerflow.hpp"
#include "esgrid/qp.hpp"

namespace esgrid {

// Componentwise clamp: the Euclidean projection onto an axis-aligned box.
inline Eigen::VectorXd project_box(const Eigen::VectorXd& w, const Eigen::VectorXd& lo,
                                   const Eigen::VectorXd& hi) {
    return w.cwiseMax(lo).cwiseMin(hi);
}

// Decision vector layout: x = (P_1..P_n, Q_1..Q_n, V_1..V_n, th_1..th_n).
struct DistOptProblem {
    int n = 0;
    Eigen::MatrixXd W;    // 2n x 4n linear-flow constraint
    Eigen::VectorXd lo;   // box, dim 4n
    Eigen::VectorXd hi;
    Eigen::MatrixXd comm;                 // c_jq over all buses
    std::vector<std::vector<int>> nbrs;   // N_j: neighbors plus self, per bus

    // per-agent slice of W in sparse row form (rows of W indexed by N_j)
    struct SparseRow {
        std::vector<int> idx;
        std::vector<double> val;

        double dot(const Eigen::VectorXd& x) const {
            double s = 0.0;
            for (std::size_t k = 0; k < idx.size(); ++k) s += val[k] * x(idx[k]);
            return s;
        }
        void axpy(double a, Eigen::VectorXd& out) const {
            for (std::size_t k = 0; k < idx.size(); ++k) out(idx[k]) += a * val[k];
        }
    };
    std::vector<std::vector<SparseRow>> w_rows;  // [agent][local row]

    Eigen::MatrixXd w_slice_dense(int j) const {
        Eigen::MatrixXd m = Eigen::MatrixXd::Zero(w_rows[j].size(), 4 * n);
        for (std::size_t r = 0; r < w_rows[j].size(); ++r)
            for (std::size_t k = 0; k < w_rows[j][r].idx.size(); ++k)
                m(r, w_rows[j][r].idx[k]) = w_rows[j][r].val[k];
        return m;
    }
    Eigen::VectorXd h, g;                 // cost coefficients per bus (0 where no aggregator)
    Eigen::VectorXd p_cost0, q_cost0;     // injection references with zero cost
    std::vector<int> agg_buses;           // 0-based indices
    Eigen::VectorXd x_ref;                // nominal operating point (feasible)

    // nominal bookkeeping
    double pcc_pin = 0.0;        // pinned PCC active injection
    double pcc_model_base = 0.0; // model PCC supply at the nominal point
    double pcc_draw_base = 0.0;  // nominal AC draw of the case
    double p_loss_base = 0.0;    // nominal AC loss of the case
    double u_bar = 0.0;
    double p_loss = 0.0;
    Eigen::VectorXd v_base;     // nominal AC voltage profile
    Eigen::VectorXd p_sl0, q_sl0;  // per-bus nominal aggregator draw (0 elsewhere)

    int pcc = 0;  // 0-based

    int idx_p(int i) const { return i; }
    int idx_q(int i) const { return n + i; }
    int idx_v(int i) const { return 2 * n + i; }
    int idx_t(int i) const { return 3 * n + i; }
};

// Quadratic deviation cost over the aggregator entries of a decision vector.
inline double cost(const Eigen::VectorXd& x, const DistOptProblem& pb) {
    double c = 0.0;
    for (int i : pb.agg_buses) {
        const double dp = x(pb.idx_p(i)) - pb.p_cost0(i);
        const double dq = x(pb.idx_q(i)) - pb.q_cost0(i);
        c += pb.h(i) * dp * dp + pb.g(i) * dq * dq;
    }
    return c;
}

// Builds the boxed, pinned problem for one subnetwork.  u_bar is the required
// load response (positive sheds consumption), p_loss the caller's current
// absolute loss estimate (defaults to the nominal loss solved here); both
// shift the pinned PCC draw away from the nominal operating point.
inline DistOptProblem build_problem(const NetworkCase& subnet, double u_bar,
                                    std::optional<double> p_loss,
                                    const std::map<int, OperatingRegion>& regions,
                                    double q_pcc_limit = 100.0) {
    subnet.validate();
    DistOptProblem pb;
    const int n = subnet.size();
    pb.n = n;
    pb.pcc = subnet.pcc_id() - 1;
    pb.u_bar = u_bar;

    const auto adm = build_admittance(subnet);
    pb.W = Eigen::MatrixXd::Zero(2 * n, 4 * n);
    pb.W.block(0, 0, n, n).setIdentity();
    pb.W.block(n, n, n, n).setIdentity();
    pb.W.block(0, 2 * n, n, n) = -adm.G;
    pb.W.block(0, 3 * n, n, n) = adm.B_prime;
    pb.W.block(n, 2 * n, n, n) = adm.B;
    pb.W.block(n, 3 * n, n, n) = adm.G;

    // nominal operating point of the case as given (events already applied)
    NaturalState ns;
    try {
        ns = natural_subnet_state(subnet);
    } catch (const numerical_error& e) {
        throw numerical_error(std::string("build_problem: nominal state unsolvable: ") + e.what());
    }
    pb.pcc_draw_base = ns.sol.p_pcc;
    pb.p_loss_base = ns.sol.p_loss;
    pb.v_base = ns.sol.v;
    pb.p_sl0 = ns.p_sl;
    pb.q_sl0 = ns.q_sl;

    // nominal point in model coordinates: linear solve at the realized draws
    const auto dl = solve_dlpf(adm, ns.spec, subnet.pcc_id());

    // The model conserves active power, so its PCC supply equals the total
    // consumption it serves.  The pin shifts that by the required response
    // and by the predicted loss change, which the model itself cannot see.
    pb.p_loss = p_loss.value_or(pb.p_loss_base);
    pb.pcc_model_base = dl.p_pcc;
    pb.pcc_pin = dl.p_pcc - u_bar - (pb.p_loss - pb.p_loss_base);

    pb.lo = Eigen::VectorXd::Zero(4 * n);
    pb.hi = Eigen::VectorXd::Zero(4 * n);
    pb.h = Eigen::VectorXd::Zero(n);
    pb.g = Eigen::VectorXd::Zero(n);
    pb.p_cost0 = Eigen::VectorXd::Zero(n);
    pb.q_cost0 = Eigen::VectorXd::Zero(n);

    double agg_lo_sum = 0.0, agg_hi_sum = 0.0, pinned_p_sum = 0.0;
    for (const auto& bus : subnet.buses) {
        const int i = bus.id - 1;
        if (bus.kind == BusKind::Pcc) {
            pb.lo(pb.idx_p(i)) = pb.hi(pb.idx_p(i)) = pb.pcc_pin;
            pb.lo(pb.idx_q(i)) = -q_pcc_limit;
            pb.hi(pb.idx_q(i)) = q_pcc_limit;
            pb.lo(pb.idx_v(i)) = bus.v_limits.lo;
            pb.hi(pb.idx_v(i)) = bus.v_limits.hi;
            pb.lo(pb.idx_t(i)) = deg2rad(bus.theta_limits_deg.lo);
            pb.hi(pb.idx_t(i)) = deg2rad(bus.theta_limits_deg.hi);
            continue;
        }
        pb.lo(pb.idx_v(i)) = bus.v_limits.lo;
        pb.hi(pb.idx_v(i)) = bus.v_limits.hi;
        pb.lo(pb.idx_t(i)) = deg2rad(bus.theta_limits_deg.lo);
        pb.hi(pb.idx_t(i)) = deg2rad(bus.theta_limits_deg.hi);

        auto it = subnet.aggregators.find(bus.id);
        if (it == subnet.aggregators.end()) {
            // uncontrollable bus: pinned at its current loading
            pb.lo(pb.idx_p(i)) = pb.hi(pb.idx_p(i)) = bus.p_nominal;
            pb.lo(pb.idx_q(i)) = pb.hi(pb.idx_q(i)) = bus.q_nominal;
            pinned_p_sum += bus.p_nominal;
            continue;
        }
        const auto reg_it = regions.find(bus.id);
        if (reg_it == regions.end())
            throw domain_error("build_problem: missing operating region for bus " + std::to_string(bus.id));
        const auto& reg = reg_it->second;
        // injection = critical injection minus aggregate draw
        pb.lo(pb.idx_p(i)) = bus.p_nominal - reg.p_limits.hi;
        pb.hi(pb.idx_p(i)) = bus.p_nominal - reg.p_limits.lo;
        pb.lo(pb.idx_q(i)) = bus.q_nominal - reg.q_limits.hi;
        pb.hi(pb.idx_q(i)) = bus.q_nominal - reg.q_limits.lo;
        agg_lo_sum += pb.lo(pb.idx_p(i));
        agg_hi_sum += pb.hi(pb.idx_p(i));

        pb.h(i) = it->second.h;
        pb.g(i) = it->second.g;
        pb.p_cost0(i) = bus.p_nominal - pb.p_sl0(i);
        pb.q_cost0(i) = bus.q_nominal - pb.q_sl0(i);
        pb.agg_buses.push_back(i);
    }

    // conservation of the linear model: injections sum to zero
    const double needed_agg = -(pb.pcc_pin + pinned_p_sum);
    if (needed_agg < agg_lo_sum - 1e-12 || needed_agg > agg_hi_sum + 1e-12)
        throw validation_error(
            "build_problem: required response exceeds aggregator capacity (needs " +
            std::to_string(needed_agg) + " of aggregate injection, box allows [" +
            std::to_string(agg_lo_sum) + ", " + std::to_string(agg_hi_sum) + "])");

    // communication mirrors the physical topology
    pb.comm = Eigen::MatrixXd::Zero(n, n);
    for (const auto& l : subnet.lines) {
        pb.comm(l.from - 1, l.to - 1) = 1.0;
        pb.comm(l.to - 1, l.from - 1) = 1.0;
    }
    pb.nbrs.resize(n);
    pb.w_rows.resize(n);
    for (int j = 0; j < n; ++j) {
        pb.nbrs[j].push_back(j);
        for (int q = 0; q < n; ++q)
            if (pb.comm(j, q) > 0.0) pb.nbrs[j].push_back(q);
        std::sort(pb.nbrs[j].begin(), pb.nbrs[j].end());
        const int k = static_cast<int>(pb.nbrs[j].size());
        pb.w_rows[j].resize(2 * k);
        for (int r = 0; r < 2 * k; ++r) {
            const int global_row = (r < k) ? pb.nbrs[j][r] : n + pb.nbrs[j][r - k];
            auto& row = pb.w_rows[j][r];
            for (int col = 0; col < 4 * n; ++col)
                if (pb.W(global_row, col) != 0.0) {
                    row.idx.push_back(col);
                    row.val.push_back(pb.W(global_row, col));
                }
        }
    }

    pb.x_ref = Eigen::VectorXd::Zero(4 * n);
    for (int i = 0; i < n; ++i) {
        pb.x_ref(pb.idx_p(i)) = (i == pb.pcc) ? dl.p_pcc : ns.spec.p(i);
        pb.x_ref(pb.idx_q(i)) = (i == pb.pcc) ? dl.q_pcc : ns.spec.q(i);
        pb.x_ref(pb.idx_v(i)) = dl.v(i);
        pb.x_ref(pb.idx_t(i)) = dl.theta(i);
    }
    return pb;
}

// Updates the pinned PCC draw for a new broadcast without rebuilding the rest
// of the problem; the nominal bookkeeping stays.
inline void repin(DistOptProblem& pb, double u_bar, double p_loss) {
    pb.u_bar = u_bar;
    pb.p_loss = p_loss;
    pb.pcc_pin = pb.pcc_model_base - u_bar - (p_loss - pb.p_loss_base);
    pb.lo(pb.idx_p(pb.pcc)) = pb.pcc_pin;
    pb.hi(pb.idx_p(pb.pcc)) = pb.pcc_pin;

    double agg_lo_sum = 0.0, agg_hi_sum = 0.0, pinned_p_sum = 0.0;
    for (int i = 0; i < pb.n; ++i) {
        if (i == pb.pcc) continue;
        if (pb.lo(pb.idx_p(i)) == pb.hi(pb.idx_p(i))) {
            pinned_p_sum += pb.lo(pb.idx_p(i));
        } else {
            agg_lo_sum += pb.lo(pb.idx_p(i));
            agg_hi_sum += pb.hi(pb.idx_p(i));
        }
    }
    const double needed = -(pb.pcc_pin + pinned_p_sum);
    if (needed < agg_lo_sum - 1e-12 || needed > agg_hi_sum + 1e-12)
        throw validation_error("repin: required response exceeds aggregator capacity");
}

struct QpSolution {
    Eigen::VectorXd x;
    double cost = 0.0;
    double kkt_residual = 0.0;
};

// Centralized verification oracle: the same cost and constraints handed to a
// dense QP over the full decision vector.  Flow rows are equalities, box
// entries become two-sided rows on the identity.
inline QpSolution centralized_qp(const DistOptProblem& pb) {
    const int nx = 4 * pb.n;
    Eigen::MatrixXd H = Eigen::MatrixXd::Zero(nx, nx);
    Eigen::VectorXd f = Eigen::VectorXd::Zero(nx);
    for (int i : pb.agg_buses) {
        H(pb.idx_p(i), pb.idx_p(i)) = 2.0 * pb.h(i);
        H(pb.idx_q(i), pb.idx_q(i)) = 2.0 * pb.g(i);
        f(pb.idx_p(i)) = -2.0 * pb.h(i) * pb.p_cost0(i);
        f(pb.idx_q(i)) = -2.0 * pb.g(i) * pb.q_cost0(i);
    }

    const int m = 2 * pb.n + nx;
    Eigen::MatrixXd A = Eigen::MatrixXd::Zero(m, nx);
    Eigen::VectorXd l(m), u(m);
    A.topRows(2 * pb.n) = pb.W;
    l.head(2 * pb.n).setZero();
    u.head(2 * pb.n).setZero();
    A.bottomRows(nx).setIdentity();
    l.tail(nx) = pb.lo;
    u.tail(nx) = pb.hi;

    QpResult res;
    try {
        res = solve_qp_rows(H, f, A, l, u);
    } catch (const numerical_error& e) {
        throw numerical_error(std::string("centralized_qp: ") + e.what());
    }
    QpSolution out;
    out.x = res.x;
    out.cost = cost(res.x, pb);
    out.kkt_residual = res.kkt_residual;
    return out;
}

struct AgentGains {
    double kappa = 250.0;
    double zeta = 500.0;
    double eta = 250.0;
    // Weight of the local feasibility-restoring term W_j'(W_j x_j) in the w
    // update.  It vanishes at every feasible point, so equilibria are exactly
    // those of the plain flow; without it the constraint modes are neutrally
    // stable rotations and settle impractically slowly.
    double augmentation = 1.0;
};

struct AgentState {
    Eigen::VectorXd w;  // ancillary state, dim 4n
    Eigen::VectorXd x;  // projected estimate, dim 4n
    Eigen::VectorXd y;  // constraint multipliers, dim 2|N_j|
    Eigen::VectorXd z;  // disagreement integrator, dim 4n
    AgentGains gains;
};

inline std::vector<AgentState> init_agents(const DistOptProblem& pb, const AgentGains& gains = {}) {
    std::vector<AgentState> agents(pb.n);
    for (int j = 0; j < pb.n; ++j) {
        agents[j].w = pb.x_ref;
        agents[j].x = project_box(pb.x_ref, pb.lo, pb.hi);
        agents[j].y = Eigen::VectorXd::Zero(static_cast<int>(pb.w_rows[j].size()));
        agents[j].z = Eigen::VectorXd::Zero(4 * pb.n);
        agents[j].gains = gains;
    }
    return agents;
}

// Re-project agent estimates after the box moved (new broadcast pin).
inline void reproject_agents(const DistOptProblem& pb, std::vector<AgentState>& agents) {
    for (auto& a : agents) a.x = project_box(a.w, pb.lo, pb.hi);
}

// One synchronous advance of all agents.  The w update integrates forward in
// the old estimates; the multiplier and disagreement states integrate against
// the freshly projected estimates, which keeps the oscillatory constraint
// modes neutrally stable under discretization.
inline void agent_step(const DistOptProblem& pb, std::vector<AgentState>& agents, double dt) {
    const int n = pb.n;
    const int nx = 4 * n;
    if (static_cast<int>(agents.size()) != n) throw domain_error("agent_step: agent count mismatch");

    static thread_local std::vector<Eigen::VectorXd> x_old;
    x_old.assign(agents.size(), Eigen::VectorXd());
    for (int j = 0; j < n; ++j) x_old[j] = agents[j].x;

    for (int j = 0; j < n; ++j) {
        auto& a = agents[j];
        Eigen::VectorXd rhs = -a.w + x_old[j] - a.z;
        // local objective only: agent j prices just its own aggregator
        if (pb.h(j) != 0.0 || pb.g(j) != 0.0) {
            rhs(pb.idx_p(j)) -= 2.0 * pb.h(j) * (x_old[j](pb.idx_p(j)) - pb.p_cost0(j));
            rhs(pb.idx_q(j)) -= 2.0 * pb.g(j) * (x_old[j](pb.idx_q(j)) - pb.q_cost0(j));
        }
        const auto& rows = pb.w_rows[j];
        for (std::size_t r = 0; r < rows.size(); ++r) {
            double coeff = a.y(static_cast<int>(r));
            if (a.gains.augmentation != 0.0) coeff += a.gains.augmentation * rows[r].dot(x_old[j]);
            rows[r].axpy(-coeff, rhs);
        }
        for (int q = 0; q < n; ++q) {
            const double c = pb.comm(j, q);
            if (c > 0.0) rhs.noalias() -= c * (x_old[j] - x_old[q]);
        }
        a.w += dt * a.gains.kappa * rhs;
        if (!a.w.allFinite() || a.w.cwiseAbs().maxCoeff() > 1e6)
            throw numerical_error("agent_step: diverged; gains unstable for this step size");
        a.x = project_box(a.w, pb.lo, pb.hi);
    }
    for (int j = 0; j < n; ++j) {
        auto& a = agents[j];
        const auto& rows = pb.w_rows[j];
        for (std::size_t r = 0; r < rows.size(); ++r)
            a.y(static_cast<int>(r)) += dt * a.gains.zeta * rows[r].dot(a.x);
        for (int q = 0; q < n; ++q) {
            const double c = pb.comm(j, q);
            if (c > 0.0) a.z.noalias() += dt * a.gains.eta * c * (a.x - agents[q].x);
        }
    }
    (void)nx;
}

struct ConsensusReport {
    Eigen::VectorXd x;          // averaged estimate
    double consensus_residual = 0.0;  // max over pairs of the sup-norm spread
    double constraint_residual = 0.0; // ||W x||_inf at the average
    int steps = 0;
};

inline ConsensusReport consensus_state(const DistOptProblem& pb, const std::vector<AgentState>& agents) {
    ConsensusReport rep;
    rep.x = Eigen::VectorXd::Zero(4 * pb.n);
    for (const auto& a : agents) rep.x += a.x;
    rep.x /= double(agents.size());
    double spread = 0.0;
    for (const auto& a : agents) spread = std::max(spread, (a.x - rep.x).lpNorm<Eigen::Infinity>());
    rep.consensus_residual = 2.0 * spread;
    rep.constraint_residual = (pb.W * rep.x).lpNorm<Eigen::Infinity>();
    return rep;
}

// Runs agent dynamics until the consensus and constraint residuals fall under
// tol (or the step/virtual-time budget runs out); returns the averaged state.
inline ConsensusReport solve_distributed(const DistOptProblem& pb, std::vector<AgentState>& agents,
                                         double dt, double max_virtual_time, double tol = 0.0) {
    const int max_steps = static_cast<int>(std::ceil(max_virtual_time / dt));
    ConsensusReport rep;
    int k = 0;
    for (; k < max_steps; ++k) {
        agent_step(pb, agents, dt);
        if (tol > 0.0 && (k % 200 == 199)) {
            rep = consensus_state(pb, agents);
            if (rep.consensus_residual < tol && rep.constraint_residual < tol) {
                rep.steps = k + 1;
                return rep;
            }
        }
    }
    rep = consensus_state(pb, agents);
    rep.steps = k;
    return rep;
}

struct Allocation {
    std::vector<int> buses;       // 1-based ids
    std::vector<double> p_sl;     // aggregate draws
    std::vector<double> q_sl;
    double cost = 0.0;
};

// Capacity-proportional baseline: the total draw change implied by (u_bar,
// p_loss) is split across aggregators in proportion to headroom, and each
// aggregator's reactive power is whatever holds the nominal voltage profile
// in the AC model, clipped to its operating rectangle.
inline Allocation proportional_adjustment(const DistOptProblem& pb, const NetworkCase& subnet,
                                          const std::map<int, OperatingRegion>& regions,
                                          double u_bar, double p_loss) {
    Allocation out;
    const double delta_total = -(u_bar + p_loss - pb.p_loss_base);

    double cap_sum = 0.0;
    std::vector<double> cap(pb.agg_buses.size(), 0.0);
    for (std::size_t k = 0; k < pb.agg_buses.size(); ++k) {
        const int id = pb.agg_buses[k] + 1;
        const auto& reg = regions.at(id);
        cap[k] = (delta_total < 0.0) ? pb.p_sl0(id - 1) - reg.p_limits.lo
                                     : reg.p_limits.hi - pb.p_sl0(id - 1);
        cap[k] = std::max(cap[k], 0.0);
        cap_sum += cap[k];
    }
    if (std::abs(delta_total) > cap_sum + 1e-12)
        throw validation_error("proportional_adjustment: insufficient aggregator capacity for " +
                               std::to_string(delta_total));

    InjectionSpec spec = nominal_injections(subnet);
    std::vector<char> is_pv(subnet.size(), 0);
    Eigen::VectorXd vset = pb.v_base;
    for (std::size_t k = 0; k < pb.agg_buses.size(); ++k) {
        const int i = pb.agg_buses[k];
        const double share = (cap_sum > 0.0) ? cap[k] / cap_sum : 0.0;
        const double p_new = pb.p_sl0(i) + delta_total * share;
        out.buses.push_back(i + 1);
        out.p_sl.push_back(p_new);
        spec.p(i) = subnet.bus(i + 1).p_nominal - p_new;
        is_pv[i] = 1;
    }
    spec.is_pv = is_pv;
    spec.v_setpoint = vset;

    PowerFlowSolution sol;
    try {
        sol = solve_ac_newton(subnet, spec);
    } catch (const numerical_error& e) {
        throw numerical_error(std::string("proportional_adjustment: voltage-holding flow failed: ") + e.what());
    }

    const auto adm = build_admittance(subnet);
    Eigen::VectorXd p_chk, q_chk;
    detail::ac_injections(adm, sol.v, sol.theta, p_chk, q_chk);
    for (std::size_t k = 0; k < pb.agg_buses.size(); ++k) {
        const int i = pb.agg_buses[k];
        const auto& reg = regions.at(i + 1);
        double q_sl = subnet.bus(i + 1).q_nominal - q_chk(i);
        q_sl = reg.q_limits.clamp(q_sl);
        out.q_sl.push_back(q_sl);
    }

    for (std::size_t k = 0; k < pb.agg_buses.size(); ++k) {
        const int i = pb.agg_buses[k];
        const double dp = out.p_sl[k] - pb.p_sl0(i);
        const double dq = out.q_sl[k] - pb.q_sl0(i);
        out.cost += pb.h(i) * dp * dp + pb.g(i) * dq * dq;
    }
    return out;
}

}  // namespace esgrid
