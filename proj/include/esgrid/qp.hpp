#pragma once

// Small dense convex QP solver for problems of the form
//     minimize 1/2 x'Px + q'x   subject to   l <= Ax <= u
// (equality rows carry l == u).  Operator-splitting iteration with a single
// prefactored normal matrix, followed by an active-set polish solve that
// sharpens the answer to machine precision.  Sized for a few dozen variables.

#include <string>
#include <vector>

#include <Eigen/Dense>

#include "esgrid/common.hpp"

namespace esgrid {

struct QpResult {
    Eigen::VectorXd x;
    double objective = 0.0;
    double kkt_residual = 0.0;
    double primal_residual = 0.0;
    int iterations = 0;
    bool polished = false;
};

inline QpResult solve_qp_rows(const Eigen::MatrixXd& P, const Eigen::VectorXd& q,
                              const Eigen::MatrixXd& A_in, const Eigen::VectorXd& l_in,
                              const Eigen::VectorXd& u_in, int max_iter = 40000,
                              double eps = 1e-10) {
    const int n = static_cast<int>(P.rows());
    const int m = static_cast<int>(A_in.rows());
    for (int i = 0; i < m; ++i)
        if (l_in(i) > u_in(i)) throw domain_error("qp: row bound out of order");

    // row equilibration
    Eigen::MatrixXd A = A_in;
    Eigen::VectorXd l = l_in, u = u_in;
    for (int i = 0; i < m; ++i) {
        const double s = A.row(i).norm();
        if (s > 0.0) {
            A.row(i) /= s;
            l(i) /= s;
            u(i) /= s;
        }
    }

    const double sigma = 1e-6;
    Eigen::VectorXd rho(m);
    for (int i = 0; i < m; ++i) rho(i) = (l(i) == u(i)) ? 1e3 : 1.0;

    Eigen::MatrixXd K = P + sigma * Eigen::MatrixXd::Identity(n, n);
    K.noalias() += A.transpose() * rho.asDiagonal() * A;
    Eigen::LLT<Eigen::MatrixXd> chol(K);
    if (chol.info() != Eigen::Success)
        throw numerical_error("qp: normal matrix factorization failed");

    Eigen::VectorXd x = Eigen::VectorXd::Zero(n);
    Eigen::VectorXd z = Eigen::VectorXd::Zero(m);
    Eigen::VectorXd y = Eigen::VectorXd::Zero(m);

    QpResult out;
    double prim = 0.0, dual = 0.0;
    int it = 0;
    for (; it < max_iter; ++it) {
        const Eigen::VectorXd rhs = sigma * x - q + A.transpose() * (rho.cwiseProduct(z) - y);
        const Eigen::VectorXd x_new = chol.solve(rhs);
        const Eigen::VectorXd ax = A * x_new;
        const Eigen::VectorXd z_prev = z;
        z = (ax + y.cwiseQuotient(rho)).cwiseMax(l).cwiseMin(u);
        y += rho.cwiseProduct(ax - z);
        x = x_new;

        if (it % 25 == 24) {
            prim = (ax - z).lpNorm<Eigen::Infinity>();
            dual = (A.transpose() * (rho.cwiseProduct(z - z_prev))).lpNorm<Eigen::Infinity>();
            if (prim < eps && dual < eps) break;
        }
    }
    out.iterations = it;
    out.primal_residual = prim;

    // polish: solve the equality system over the detected active rows
    auto kkt_residual = [&](const Eigen::VectorXd& xs) {
        Eigen::VectorXd grad = P * xs + q;
        std::vector<int> act;
        const Eigen::VectorXd axs = A * xs;
        for (int i = 0; i < m; ++i)
            if (l(i) == u(i) || axs(i) - l(i) < 1e-7 || u(i) - axs(i) < 1e-7) act.push_back(i);
        if (!act.empty()) {
            Eigen::MatrixXd M(static_cast<int>(act.size()), n);
            for (std::size_t r = 0; r < act.size(); ++r) M.row(r) = A.row(act[r]);
            const Eigen::VectorXd mu = M.transpose().colPivHouseholderQr().solve(grad);
            grad -= M.transpose() * mu;
        }
        return grad.lpNorm<Eigen::Infinity>();
    };

    {
        const Eigen::VectorXd ax = A * x;
        std::vector<int> act;
        Eigen::VectorXd target(m);
        for (int i = 0; i < m; ++i) {
            if (l(i) == u(i)) {
                act.push_back(i);
                target(i) = l(i);
            } else if (ax(i) - l(i) < 1e-6) {
                act.push_back(i);
                target(i) = l(i);
            } else if (u(i) - ax(i) < 1e-6) {
                act.push_back(i);
                target(i) = u(i);
            }
        }
        const int k = static_cast<int>(act.size());
        Eigen::MatrixXd kkt = Eigen::MatrixXd::Zero(n + k, n + k);
        kkt.topLeftCorner(n, n) = P + 1e-12 * Eigen::MatrixXd::Identity(n, n);
        Eigen::VectorXd rhs(n + k);
        rhs.head(n) = -q;
        for (int r = 0; r < k; ++r) {
            kkt.block(n + r, 0, 1, n) = A.row(act[r]);
            kkt.block(0, n + r, n, 1) = A.row(act[r]).transpose();
            rhs(n + r) = target(act[r]);
        }
        Eigen::PartialPivLU<Eigen::MatrixXd> lu(kkt);
        const Eigen::VectorXd sol = lu.solve(rhs);
        if (sol.allFinite()) {
            const Eigen::VectorXd x_pol = sol.head(n);
            const Eigen::VectorXd axp = A * x_pol;
            const bool feasible = (axp - l).minCoeff() > -1e-8 && (u - axp).minCoeff() > -1e-8;
            if (feasible && kkt_residual(x_pol) <= kkt_residual(x) + 1e-12) {
                x = x_pol;
                out.polished = true;
            }
        }
    }

    const Eigen::VectorXd ax = A * x;
    out.primal_residual = std::max((ax - u).maxCoeff(), (l - ax).maxCoeff());
    if (out.primal_residual > 1e-6)
        throw numerical_error("qp: did not reach feasibility (residual " +
                              std::to_string(out.primal_residual) + "); problem may be infeasible");
    out.x = x;
    out.objective = 0.5 * x.dot(P * x) + q.dot(x);
    out.kkt_residual = kkt_residual(x);
    return out;
}

}  // namespace esgrid
