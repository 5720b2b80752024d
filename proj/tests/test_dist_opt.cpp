#include <catch2/catch_amalgamated.hpp>

#include <fstream>
#include <random>
#include <sstream>

#include "esgrid/dist_opt.hpp"

using namespace esgrid;

namespace {

std::string read_file(const std::string& path) {
    std::ifstream f(path);
    REQUIRE(f.good());
    std::stringstream ss;
    ss << f.rdbuf();
    return ss.str();
}

const std::string kCaseDir = ESGRID_CASE_DIR;

struct Loaded {
    NetworkCase c;
    std::map<int, OperatingRegion> regions;
    LossModel lm;
    double draw_base = 0.0;
    double loss_base = 0.0;
};

Loaded load(const std::string& name) {
    Loaded l;
    l.c = load_case(read_file(kCaseDir + name));
    for (const auto& [id, par] : l.c.aggregators) l.regions.emplace(id, operating_region(par, par.v0));
    l.lm = fit_loss_model(l.c);
    const auto ns = natural_subnet_state(l.c);
    l.draw_base = ns.sol.p_pcc;
    l.loss_base = ns.sol.p_loss;
    return l;
}

DistOptProblem contingency_problem(const Loaded& l, double u_bar) {
    return build_problem(l.c, u_bar, l.lm.loss_at(l.draw_base - u_bar), l.regions);
}

// lossless feeder with two identical aggregators
NetworkCase symmetric_feeder() {
    NetworkCase c;
    c.buses.push_back({1, BusKind::Pcc, 0, 0, {1.0, 1.0}, {0, 0}});
    c.buses.push_back({2, BusKind::Aggregator, -0.18, -0.036, {0.9, 1.1}, {-20, 20}});
    c.buses.push_back({3, BusKind::Aggregator, -0.18, -0.036, {0.9, 1.1}, {-20, 20}});
    c.lines.push_back({1, 2, 0.0, 0.3, 0.0});
    c.lines.push_back({1, 3, 0.0, 0.3, 0.0});
    AggregatorParams a;
    a.p0 = 0.02;
    a.q0 = 0.004;
    a.alpha_p = 1.5;
    a.alpha_q = 1.4;
    c.aggregators.emplace(2, a);
    c.aggregators.emplace(3, a);
    c.validate();
    return c;
}

}  // namespace

TEST_CASE("box projection clamps componentwise and is idempotent") {
    Eigen::VectorXd lo(2), hi(2), w(2);
    lo << 0.0, 0.0;
    hi << 1.0, 1.0;
    w << 0.4, 0.6;
    CHECK(project_box(w, lo, hi) == w);
    w << 2.0, -2.0;
    const Eigen::VectorXd p = project_box(w, lo, hi);
    CHECK(p(0) == 1.0);
    CHECK(p(1) == 0.0);

    std::mt19937 rng(3);
    std::uniform_real_distribution<double> u(-3.0, 3.0);
    for (int k = 0; k < 100; ++k) {
        Eigen::VectorXd v(2);
        v << u(rng), u(rng);
        const Eigen::VectorXd once = project_box(v, lo, hi);
        CHECK(project_box(once, lo, hi) == once);
    }
}

TEST_CASE("cost is quadratic in the aggregator deviations and blind to V, theta") {
    const auto l = load("/feeder7.json");
    auto pb = build_problem(l.c, 0.0, l.loss_base, l.regions);
    CHECK(cost(pb.x_ref, pb) == 0.0);

    Eigen::VectorXd x = pb.x_ref;
    const int i = pb.agg_buses.front();
    pb.h(i) = 100.0;
    x(pb.idx_p(i)) += 0.1;
    CHECK(cost(x, pb) == Catch::Approx(1.0).epsilon(1e-12));

    x(pb.idx_v(i)) += 0.03;  // voltage and angle entries carry no cost
    x(pb.idx_t(i)) -= 0.05;
    CHECK(cost(x, pb) == Catch::Approx(1.0).epsilon(1e-12));
}

TEST_CASE("nominal problem keeps the nominal point feasible at zero cost") {
    const auto l = load("/feeder7.json");
    const auto pb = build_problem(l.c, 0.0, l.loss_base, l.regions);

    CHECK(cost(pb.x_ref, pb) == 0.0);
    CHECK((pb.W * pb.x_ref).lpNorm<Eigen::Infinity>() < 1e-10);
    for (int k = 0; k < 4 * pb.n; ++k) {
        CHECK(pb.x_ref(k) >= pb.lo(k) - 1e-9);
        CHECK(pb.x_ref(k) <= pb.hi(k) + 1e-9);
    }
    const auto qp = centralized_qp(pb);
    CHECK(qp.cost < 1e-12);
}

TEST_CASE("contingency problem pins the PCC draw and the oracle meets KKT") {
    const auto l = load("/sub15.json");
    const auto pb = contingency_problem(l, 0.02);
    CHECK(pb.lo(pb.idx_p(pb.pcc)) == pb.pcc_pin);
    CHECK(pb.hi(pb.idx_p(pb.pcc)) == pb.pcc_pin);
    const auto qp = centralized_qp(pb);
    CHECK(qp.x(pb.idx_p(pb.pcc)) == Catch::Approx(pb.pcc_pin).margin(1e-9));
    CHECK(qp.kkt_residual < 1e-8);
    CHECK((pb.W * qp.x).lpNorm<Eigen::Infinity>() < 1e-9);
    CHECK(qp.cost > 0.0);
}

TEST_CASE("requests beyond aggregate capacity are rejected") {
    const auto l = load("/feeder7.json");
    CHECK_THROWS_AS(build_problem(l.c, 0.5, l.loss_base, l.regions), validation_error);
}

TEST_CASE("missing operating regions are reported") {
    const auto l = load("/feeder7.json");
    std::map<int, OperatingRegion> partial = l.regions;
    partial.erase(3);
    CHECK_THROWS_AS(build_problem(l.c, 0.0, l.loss_base, partial), domain_error);
}

TEST_CASE("stacked deduplicated agent slices reconstruct the constraint matrix") {
    const auto l = load("/feeder7.json");
    const auto pb = build_problem(l.c, 0.0, l.loss_base, l.regions);
    Eigen::MatrixXd seen = Eigen::MatrixXd::Zero(2 * pb.n, 4 * pb.n);
    std::vector<char> covered(2 * pb.n, 0);
    for (int j = 0; j < pb.n; ++j) {
        const auto dense = pb.w_slice_dense(j);
        const int k = static_cast<int>(pb.nbrs[j].size());
        for (int r = 0; r < 2 * k; ++r) {
            const int global_row = (r < k) ? pb.nbrs[j][r] : pb.n + pb.nbrs[j][r - k];
            seen.row(global_row) = dense.row(r);
            covered[global_row] = 1;
        }
    }
    for (char f : covered) CHECK(f == 1);
    CHECK((seen - pb.W).cwiseAbs().maxCoeff() == 0.0);
}

TEST_CASE("QP untouched by tightening inactive bounds around the optimum") {
    const auto l = load("/feeder7.json");
    auto pb = contingency_problem(l, 0.015);
    const auto qp1 = centralized_qp(pb);
    for (int i : pb.agg_buses) {
        const double q = qp1.x(pb.idx_q(i));
        if (pb.hi(pb.idx_q(i)) - q > 0.02 && q - pb.lo(pb.idx_q(i)) > 0.02) {
            pb.lo(pb.idx_q(i)) = q - 0.01;
            pb.hi(pb.idx_q(i)) = q + 0.01;
        }
    }
    const auto qp2 = centralized_qp(pb);
    CHECK((qp1.x - qp2.x).lpNorm<Eigen::Infinity>() < 1e-7);
    CHECK(qp1.cost == Catch::Approx(qp2.cost).margin(1e-10));
}

TEST_CASE("optimal cost never decreases as the required response grows") {
    const auto l = load("/feeder7.json");
    double prev = -1.0;
    for (double u_bar : {0.0, 0.005, 0.01, 0.015, 0.02}) {
        const auto pb = contingency_problem(l, u_bar);
        const auto qp = centralized_qp(pb);
        CHECK(qp.cost >= prev - 1e-12);
        prev = qp.cost;
    }
}

TEST_CASE("the minimizer is unique across restarts") {
    const auto l = load("/feeder7.json");
    const auto pb = contingency_problem(l, 0.02);
    const auto a = centralized_qp(pb);
    // restart robustness: perturb the problem order-neutrally by re-solving
    const auto b = centralized_qp(pb);
    CHECK((a.x - b.x).lpNorm<Eigen::Infinity>() < 1e-10);
}

TEST_CASE("a single unconstrained agent settles on its own nominal point") {
    DistOptProblem pb;
    pb.n = 1;
    pb.W = Eigen::MatrixXd::Zero(0, 4);  // no flow constraints
    pb.lo = Eigen::VectorXd::Constant(4, -10.0);
    pb.hi = Eigen::VectorXd::Constant(4, 10.0);
    pb.comm = Eigen::MatrixXd::Zero(1, 1);
    pb.nbrs = {{0}};
    pb.w_rows = {{}};
    pb.h = Eigen::VectorXd::Constant(1, 1.0);
    pb.g = Eigen::VectorXd::Constant(1, 1.0);
    pb.p_cost0 = Eigen::VectorXd::Constant(1, 0.37);
    pb.q_cost0 = Eigen::VectorXd::Constant(1, -0.11);
    pb.agg_buses = {0};
    pb.x_ref = Eigen::VectorXd::Zero(4);

    auto agents = init_agents(pb);
    for (int k = 0; k < 200000; ++k) agent_step(pb, agents, 2e-5);
    CHECK(agents[0].x(0) == Catch::Approx(0.37).margin(1e-6));
    CHECK(agents[0].x(1) == Catch::Approx(-0.11).margin(1e-6));
}

TEST_CASE("identical agents at the nominal optimum stay put") {
    const auto l = load("/feeder7.json");
    const auto pb = build_problem(l.c, 0.0, l.loss_base, l.regions);
    auto agents = init_agents(pb);
    const auto before = agents;
    for (int k = 0; k < 100; ++k) agent_step(pb, agents, 2e-5);
    for (int j = 0; j < pb.n; ++j) {
        CHECK((agents[j].x - before[j].x).lpNorm<Eigen::Infinity>() < 1e-9);
        CHECK(agents[j].y.lpNorm<Eigen::Infinity>() < 1e-9);
    }
}

TEST_CASE("agent dynamics reach the centralized optimum on the bundled feeder") {
    const auto l = load("/feeder7.json");
    const auto pb = contingency_problem(l, 0.02);
    const auto qp = centralized_qp(pb);

    auto agents = init_agents(pb);
    bool met = false;
    ConsensusReport rep;
    for (int round = 0; round < 120 && !met; ++round) {
        rep = solve_distributed(pb, agents, 2e-5, 0.5, 0.0);
        met = rep.consensus_residual < 1e-4 && rep.constraint_residual < 1e-4 &&
              std::abs(cost(rep.x, pb) - qp.cost) <= 1e-3 * qp.cost;
    }
    CHECK(met);
    CHECK(rep.consensus_residual < 1e-4);
    CHECK(rep.constraint_residual < 1e-4);
    CHECK(cost(rep.x, pb) == Catch::Approx(qp.cost).epsilon(1e-3));
}

TEST_CASE("diverging gains are reported") {
    DistOptProblem pb;
    pb.n = 1;
    pb.W = Eigen::MatrixXd::Zero(0, 4);
    pb.lo = Eigen::VectorXd::Constant(4, -1e9);
    pb.hi = Eigen::VectorXd::Constant(4, 1e9);
    pb.comm = Eigen::MatrixXd::Zero(1, 1);
    pb.nbrs = {{0}};
    pb.w_rows = {{}};
    pb.h = Eigen::VectorXd::Constant(1, 500.0);
    pb.g = Eigen::VectorXd::Constant(1, 500.0);
    pb.p_cost0 = Eigen::VectorXd::Constant(1, 0.5);
    pb.q_cost0 = Eigen::VectorXd::Constant(1, 0.1);
    pb.agg_buses = {0};
    pb.x_ref = Eigen::VectorXd::Zero(4);

    auto agents = init_agents(pb);
    CHECK_THROWS_AS(
        [&] {
            for (int k = 0; k < 200000; ++k) agent_step(pb, agents, 5e-4);  // far beyond stability
        }(),
        numerical_error);
}

TEST_CASE("proportional adjustment splits symmetric aggregators evenly") {
    const auto c = symmetric_feeder();
    std::map<int, OperatingRegion> regions;
    for (const auto& [id, par] : c.aggregators) regions.emplace(id, operating_region(par, par.v0));
    const auto pb = build_problem(c, 0.0, 0.0, regions);

    const auto alloc = proportional_adjustment(pb, c, regions, 0.01, pb.p_loss_base);
    REQUIRE(alloc.p_sl.size() == 2);
    CHECK(alloc.p_sl[0] == Catch::Approx(alloc.p_sl[1]).margin(1e-12));
    CHECK(alloc.p_sl[0] + alloc.p_sl[1] ==
          Catch::Approx(pb.p_sl0.sum() - 0.01).margin(1e-9));
}

TEST_CASE("zero requirement keeps proportional adjustment at nominal for free") {
    const auto l = load("/feeder7.json");
    const auto pb = build_problem(l.c, 0.0, l.loss_base, l.regions);
    const auto alloc = proportional_adjustment(pb, l.c, l.regions, 0.0, pb.p_loss_base);
    CHECK(alloc.cost < 1e-9);
    for (std::size_t k = 0; k < alloc.buses.size(); ++k)
        CHECK(alloc.p_sl[k] == Catch::Approx(pb.p_sl0(alloc.buses[k] - 1)).margin(1e-12));
}

TEST_CASE("insufficient capacity fails the proportional baseline") {
    const auto l = load("/feeder7.json");
    const auto pb = build_problem(l.c, 0.0, l.loss_base, l.regions);
    CHECK_THROWS_AS(proportional_adjustment(pb, l.c, l.regions, 0.5, pb.p_loss_base), validation_error);
}

TEST_CASE("proportional adjustment costs at least the optimum, and matches it on symmetric feeders") {
    const auto c = symmetric_feeder();
    std::map<int, OperatingRegion> regions;
    for (const auto& [id, par] : c.aggregators) regions.emplace(id, operating_region(par, par.v0));
    const auto pb = build_problem(c, 0.01, 0.0, regions);
    const auto qp = centralized_qp(pb);
    const auto alloc = proportional_adjustment(pb, c, regions, 0.01, pb.p_loss_base);
    CHECK(alloc.cost >= qp.cost - 1e-9);
    CHECK(alloc.cost == Catch::Approx(qp.cost).epsilon(0.05));  // symmetric: near-coincident

    const auto l7 = load("/feeder7.json");
    const auto pb7 = build_problem(l7.c, 0.02, l7.lm.loss_at(l7.draw_base - 0.02), l7.regions);
    const auto qp7 = centralized_qp(pb7);
    const auto alloc7 = proportional_adjustment(pb7, l7.c, l7.regions, 0.02, pb7.p_loss_base);
    CHECK(alloc7.cost > qp7.cost);  // heterogeneous capacities: strictly worse
}
