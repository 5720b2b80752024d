#include <catch2/catch_amalgamated.hpp>

#include <fstream>
#include <random>
#include <sstream>

#include "esgrid/transmission.hpp"

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

GeneratorParams default_gen(double m = 0.1) {
    GeneratorParams g;
    g.inertia_m = m;
    g.damping = 0.005;
    g.droop_gain = 0.053;
    return g;
}

// one generator (bus 1), one load (bus 2)
TransmissionModel two_bus_model(double x = 0.5, double m = 0.1) {
    NetworkCase c;
    c.buses.push_back({1, BusKind::Generator, 0.3, 0, {1, 1}, {-60, 60}});
    c.buses.push_back({2, BusKind::Load, -0.3, 0, {1, 1}, {-60, 60}});
    c.lines.push_back({1, 2, 0.0, x, 0.0});
    c.validate();
    return TransmissionModel::from_case(c, {default_gen(m)});
}

TransmissionModel nine_bus_model() {
    const auto c = load_case(read_file(kCaseDir + "/nine_bus.json"));
    std::vector<GeneratorParams> gens = {default_gen(0.1254), default_gen(0.0340), default_gen(0.0160)};
    return TransmissionModel::from_case(c, gens);
}

Eigen::VectorXd nine_bus_demand() {
    Eigen::VectorXd p_d = Eigen::VectorXd::Zero(9);
    p_d(4) = 0.52;
    p_d(6) = 0.57;
    p_d(8) = 0.79;
    return p_d;
}

Eigen::VectorXd nine_bus_damping() {
    return Eigen::VectorXd::Constant(9, 0.02);
}

}  // namespace

TEST_CASE("equilibrium is a fixed point of the swing step") {
    const auto m = nine_bus_model();
    const auto st = solve_equilibrium(m, nine_bus_demand(), nine_bus_damping(), {0.716, 1.63, 0.85});
    const auto next = step_swing(st, m, 0.001);
    CHECK((next.delta - st.delta).cwiseAbs().maxCoeff() < 1e-12);
    CHECK(next.omega.cwiseAbs().maxCoeff() < 1e-12);
    const auto d = compute_power_imbalance(st, m);
    CHECK(d.cwiseAbs().maxCoeff() < 1e-11);
}

TEST_CASE("initial frequency slope follows the inertia after a demand step") {
    const auto m = two_bus_model(0.5, 0.2);
    Eigen::VectorXd p_d(2);
    p_d << 0.0, 0.3;
    Eigen::VectorXd dl = Eigen::VectorXd::Constant(2, 0.005);
    auto st = solve_equilibrium(m, p_d, dl, {1.0});
    st.p_d(1) += 0.2;  // demand step

    const double dt = 5e-4;
    double t0 = 0.03, t1 = 0.07;
    double w0 = 0, w1 = 0;
    for (double t = 0; t < t1 + dt / 2; t += dt) {
        if (std::abs(t - t0) < dt / 2) w0 = st.omega(0);
        if (std::abs(t - t1) < dt / 2) w1 = st.omega(0);
        st = step_swing(st, m, dt);
    }
    const double slope = (w1 - w0) / (t1 - t0);
    CHECK(slope == Catch::Approx(-0.2 / 0.2).epsilon(0.03));
}

TEST_CASE("governor and turbine track their analytic step response") {
    GeneratorParams g = default_gen();
    GovernorTurbineState s;  // starts relaxed at zero with p_ref = 0
    const double omega_dev = -0.1;
    const double u0 = -g.droop_gain * omega_dev;  // constant chain input

    // cascaded first-order lags with distinct time constants
    auto cascade = [&](double t, std::vector<double> taus) {
        double y = 1.0;
        for (std::size_t i = 0; i < taus.size(); ++i) {
            double ci = 1.0;
            for (std::size_t j = 0; j < taus.size(); ++j)
                if (j != i) ci *= taus[i] / (taus[i] - taus[j]);
            y -= ci * std::exp(-t / taus[i]);
        }
        return y;
    };

    const double dt = 1e-3;
    double t = 0.0;
    double prev_pm = s.mechanical_power(g);
    for (int k = 0; k < 5000; ++k) {
        const double pm = governor_turbine_step(g, s, omega_dev, 0.0, dt);
        t += dt;
        CHECK(pm >= prev_pm - 1e-12);  // monotone rise toward the droop value
        prev_pm = pm;
        if (k == 499 || k == 1999 || k == 4999) {
            const double y_ch = u0 * cascade(t, {g.t_gov, g.t_ch});
            const double y_rh = u0 * cascade(t, {g.t_gov, g.t_ch, g.t_rh});
            const double pm_ref = g.f_hp * y_ch + (1.0 - g.f_hp) * y_rh;
            CHECK(pm == Catch::Approx(pm_ref).margin(1e-9));
        }
    }
    // long-run value approaches the droop response
    for (int k = 0; k < 60000; ++k) governor_turbine_step(g, s, omega_dev, 0.0, dt);
    CHECK(s.mechanical_power(g) == Catch::Approx(u0).margin(1e-6));
}

TEST_CASE("equilibrium chain holds its reference") {
    GeneratorParams g = default_gen();
    GovernorTurbineState s;
    s.p_ref = 0.5;
    s.x_gov = s.x_ch = s.x_rh = 0.5;
    for (int k = 0; k < 100; ++k) {
        const double pm = governor_turbine_step(g, s, 0.0, 0.0, 1e-3);
        CHECK(pm == Catch::Approx(0.5).margin(1e-12));
    }
}

TEST_CASE("non-participating generator ignores the AGC signal") {
    GeneratorParams g = default_gen();
    g.agc_participation = false;
    GovernorTurbineState s;
    s.p_ref = 0.4;
    s.x_gov = s.x_ch = s.x_rh = 0.4;
    for (int k = 0; k < 200; ++k) governor_turbine_step(g, s, 0.0, 0.25, 1e-3);
    CHECK(s.mechanical_power(g) == Catch::Approx(0.4).margin(1e-12));
}

TEST_CASE("demand step shows up only in that bus's imbalance") {
    const auto m = nine_bus_model();
    auto st = solve_equilibrium(m, nine_bus_demand(), nine_bus_damping(), {0.716, 1.63, 0.85});
    const auto d0 = compute_power_imbalance(st, m);
    REQUIRE(d0.cwiseAbs().maxCoeff() < 1e-11);

    st.p_d(6) += 0.2;  // flows are continuous in the angles, only demand jumps
    const auto d1 = compute_power_imbalance(st, m);
    for (int i = 0; i < 9; ++i) {
        if (i == 6)
            CHECK(d1(i) == Catch::Approx(-0.2).margin(1e-11));
        else
            CHECK(d1(i) == Catch::Approx(0.0).margin(1e-11));
    }
}

TEST_CASE("imbalances telescope to generation minus demand") {
    const auto m = nine_bus_model();
    auto st = solve_equilibrium(m, nine_bus_demand(), nine_bus_damping(), {1.0, 1.0, 1.0});
    std::mt19937 rng(23);
    std::uniform_real_distribution<double> u(-0.3, 0.3);
    for (int trial = 0; trial < 20; ++trial) {
        for (int i = 0; i < 9; ++i) st.delta(i) += 0.1 * u(rng);
        for (int i = 0; i < 9; ++i) st.u(i) = (m.gen_of_bus[i] < 0) ? u(rng) * 0.05 : 0.0;
        const auto d = compute_power_imbalance(st, m);
        double pm_total = 0.0;
        for (int g = 0; g < m.n_gens(); ++g) pm_total += st.chains[g].mechanical_power(m.gens[g]);
        CHECK(d.sum() == Catch::Approx(pm_total + st.u.sum() - st.p_d.sum()).margin(1e-12));
    }
}

TEST_CASE("flow antisymmetry holds pairwise") {
    const auto m = nine_bus_model();
    std::mt19937 rng(29);
    std::uniform_real_distribution<double> u(-0.5, 0.5);
    Eigen::VectorXd delta(9);
    for (int i = 0; i < 9; ++i) delta(i) = u(rng);
    for (int i = 0; i < 9; ++i)
        for (int k = 0; k < 9; ++k)
            if (m.b(i, k) != 0.0) {
                const double f_ik = m.b(i, k) * std::sin(delta(i) - delta(k));
                const double f_ki = m.b(k, i) * std::sin(delta(k) - delta(i));
                CHECK(f_ik == Catch::Approx(-f_ki).margin(1e-15));
            }
}

TEST_CASE("halving the step changes a 10 s trajectory by less than 1e-6") {
    const auto m = nine_bus_model();
    auto st = solve_equilibrium(m, nine_bus_demand(), nine_bus_damping(), {0.716, 1.63, 0.85});
    st.p_d(6) += 0.2;

    auto run = [&](double dt) {
        auto s = st;
        const int steps = static_cast<int>(std::lround(10.0 / dt));
        for (int k = 0; k < steps; ++k) s = step_swing(s, m, dt);
        return s;
    };
    const auto a = run(1e-3);
    const auto b = run(5e-4);
    CHECK((a.delta - b.delta).cwiseAbs().maxCoeff() < 1e-6);
    CHECK((a.omega - b.omega).cwiseAbs().maxCoeff() < 1e-6);
}

TEST_CASE("perturbed trajectories stay bounded with damping present") {
    const auto m = nine_bus_model();
    auto st = solve_equilibrium(m, nine_bus_demand(), nine_bus_damping(), {0.716, 1.63, 0.85});
    st.omega(0) += 0.5;
    st.omega(1) -= 0.3;
    double w_max = 0.0;
    for (int k = 0; k < 20000; ++k) {
        st = step_swing(st, m, 1e-3);
        w_max = std::max(w_max, st.omega.cwiseAbs().maxCoeff());
    }
    CHECK(w_max < 2.0);
    CHECK(st.omega.cwiseAbs().maxCoeff() < 0.5);  // decaying, not growing
}

TEST_CASE("zero frequency coefficient at a load bus is rejected") {
    const auto m = two_bus_model();
    Eigen::VectorXd p_d(2);
    p_d << 0.0, 0.3;
    Eigen::VectorXd dl = Eigen::VectorXd::Zero(2);
    auto st = solve_equilibrium(m, p_d, Eigen::VectorXd::Constant(2, 0.02), {1.0});
    st.d_load = dl;
    CHECK_THROWS_AS(step_swing(st, m, 1e-3), numerical_error);
    CHECK_THROWS_AS(step_swing(st, m, 0.2), domain_error);
}
