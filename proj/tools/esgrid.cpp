// Command-line front end: scenario runs, power flow, loss fitting and
// operating-region export on bundled or user case files.
//
// Exit codes: 0 success, 2 configuration/input error, 3 numerical failure.

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>

#include <CLI11.hpp>

#include "esgrid/dist_opt.hpp"
#include "esgrid/network.hpp"
#include "esgrid/powerflow.hpp"
#include "esgrid/scenario.hpp"

namespace {

std::string read_file(const std::string& path) {
    std::ifstream f(path);
    if (!f.good()) throw esgrid::parse_error("cannot open " + path);
    std::stringstream ss;
    ss << f.rdbuf();
    return ss.str();
}

void write_file(const std::string& path, const std::string& content) {
    std::ofstream f(path, std::ios::binary);
    if (!f.good()) throw esgrid::parse_error("cannot write " + path);
    f << content;
}

int run_cmd(const std::string& scenario_path, const std::string& out_dir) {
    const auto cfg = esgrid::load_scenario_file(scenario_path);
    std::filesystem::create_directories(out_dir);
    write_file(out_dir + "/config-echo.json", esgrid::scenario_to_json(cfg).dump(2) + "\n");

    const auto result = esgrid::run_scenario(cfg);
    write_file(out_dir + "/log.csv", result.log.to_csv());
    write_file(out_dir + "/costs.json", result.costs.to_json().dump(2) + "\n");

    for (const auto& sw : result.switches)
        std::printf("switch: phi=%d at t=%.3f s\n", sw.phi, sw.time);
    for (const auto& e : result.costs.entries)
        std::printf("subnet %d: cost DO %.6g, cost PA %.6g, saving %.1f%%\n", e.subnet_bus, e.cost_do,
                    e.cost_pa, 100.0 * e.saving_rel);
    std::printf("wrote %s/log.csv (%zu rows)\n", out_dir.c_str(), result.log.rows.size());
    return 0;
}

int compare_costs_cmd(const std::string& dir) {
    const auto text = read_file(dir + "/costs.json");
    const auto j = nlohmann::json::parse(text);
    std::printf("%-12s %18s %18s %12s %8s\n", "subnet", "distributed-opt", "proportional", "saving", "rel");
    for (const auto& e : j) {
        std::printf("%-12d %18.6g %18.6g %12.6g %7.1f%%\n", e["subnet_bus"].get<int>(),
                    e["cost_distributed_optimization"].get<double>(),
                    e["cost_proportional_adjustment"].get<double>(), e["saving"].get<double>(),
                    100.0 * e["saving_rel"].get<double>());
    }
    return 0;
}

int region_cmd(const std::string& case_path, int bus) {
    const auto c = esgrid::load_case(read_file(case_path));
    auto it = c.aggregators.find(bus);
    if (it == c.aggregators.end())
        throw esgrid::validation_error("bus " + std::to_string(bus) + " has no aggregator");
    const auto reg = esgrid::operating_region(it->second, it->second.v0);
    std::printf("p,q_lower,q_upper\n");
    for (std::size_t k = 0; k < reg.p_samples.size(); ++k)
        std::printf("%.9g,%.9g,%.9g\n", reg.p_samples[k], reg.q_lower[k], reg.q_upper[k]);
    std::fprintf(stderr, "p limits [%.6g, %.6g], q rectangle [%.6g, %.6g]\n", reg.p_limits.lo,
                 reg.p_limits.hi, reg.q_limits.lo, reg.q_limits.hi);
    return 0;
}

int pf_cmd(const std::string& case_path, bool use_dlpf) {
    const auto c = esgrid::load_case(read_file(case_path));
    const auto spec = esgrid::nominal_injections(c);
    esgrid::PowerFlowSolution sol;
    if (use_dlpf)
        sol = esgrid::solve_dlpf(esgrid::build_admittance(c), spec, c.pcc_id());
    else
        sol = esgrid::solve_ac_newton(c, spec);
    std::printf("bus,v,theta_deg\n");
    for (int i = 0; i < c.size(); ++i)
        std::printf("%d,%.9g,%.9g\n", i + 1, sol.v(i), esgrid::rad2deg(sol.theta(i)));
    std::fprintf(stderr, "p_pcc=%.9g q_pcc=%.9g p_loss=%.9g iterations=%d\n", sol.p_pcc, sol.q_pcc,
                 sol.p_loss, sol.iterations);
    return 0;
}

int fit_loss_cmd(const std::string& case_path) {
    const auto c = esgrid::load_case(read_file(case_path));
    const auto m = esgrid::fit_loss_model(c);
    std::printf("d_l=%.9g c=%.9g max_residual=%.3g\n", m.d_l, m.c, m.max_residual);
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Hierarchical grid simulation with ES aggregators"};
    app.require_subcommand(1);

    std::string scenario_path, out_dir = "out", dir, case_path;
    int bus = 0;
    bool use_dlpf = false, use_ac = false;

    auto* run = app.add_subcommand("run", "run a scenario and write telemetry");
    run->add_option("scenario", scenario_path, "scenario JSON file")->required();
    run->add_option("--out", out_dir, "output directory");

    auto* cc = app.add_subcommand("compare-costs", "print the cost comparison of a finished run");
    cc->add_option("dir", dir, "output directory of a run")->required();

    auto* rg = app.add_subcommand("region", "export an aggregator operating region as CSV");
    rg->add_option("case", case_path, "case JSON file")->required();
    rg->add_option("bus", bus, "aggregator bus id")->required();

    auto* pf = app.add_subcommand("pf", "solve the nominal power flow of a case");
    pf->add_option("case", case_path, "case JSON file")->required();
    pf->add_flag("--dlpf", use_dlpf, "use the linearized model");
    pf->add_flag("--ac", use_ac, "use the AC model (default)");

    auto* fl = app.add_subcommand("fit-loss", "fit the linear loss model of a case");
    fl->add_option("case", case_path, "case JSON file")->required();

    CLI11_PARSE(app, argc, argv);

    try {
        if (run->parsed()) return run_cmd(scenario_path, out_dir);
        if (cc->parsed()) return compare_costs_cmd(dir);
        if (rg->parsed()) return region_cmd(case_path, bus);
        if (pf->parsed()) return pf_cmd(case_path, use_dlpf && !use_ac);
        if (fl->parsed()) return fit_loss_cmd(case_path);
    } catch (const esgrid::parse_error& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 2;
    } catch (const esgrid::validation_error& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 2;
    } catch (const esgrid::domain_error& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 2;
    } catch (const esgrid::numerical_error& e) {
        std::fprintf(stderr, "numerical failure: %s\n", e.what());
        return 3;
    } catch (const nlohmann::json::exception& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 2;
    }
    return 0;
}
