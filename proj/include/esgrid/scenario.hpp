#pragma once

// Clocked co-simulation of the whole stack: transmission swing dynamics with
// AGC, the switched load-side controllers, and per-subnetwork quasi-static AC
// plants in which ES aggregators track optimizer setpoints through PI loops.
// Deterministic by construction: fixed-step integer scheduling, ordered
// containers, no wall-clock or randomness anywhere.

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "esgrid/common.hpp"
#include "esgrid/dist_opt.hpp"
#include "esgrid/es_aggregator.hpp"
#include "esgrid/load_controller.hpp"
#include "esgrid/network.hpp"
#include "esgrid/powerflow.hpp"
#include "esgrid/transmission.hpp"

namespace esgrid {

struct ScenarioEvent {
    double time = 0.0;
    int subnet_bus = 0;  // transmission bus hosting the subnetwork
    int bus = 0;         // bus inside the subnetwork
    double dp = 0.0;     // uncontrollable draw step (positive adds load)
    double dq = 0.0;
};

struct SubnetRef {
    int bus = 0;
    std::string case_path;
    double kappa = 250.0;
    int monitor_bus = 0;  // 0: first aggregator bus
};

struct OptimizerConfig {
    double h_euler = 2e-5;
    bool iterate_to_tolerance = true;  // else: fixed virtual budget per broadcast
    double budget_s = 0.15;
    double tol = 1e-5;
    double max_virtual_s = 30.0;
    double zeta = 500.0;
    double eta = 250.0;
    double augmentation = 1.0;
};

struct ScenarioConfig {
    std::string transmission_case;
    std::vector<SubnetRef> subnets;
    std::vector<ScenarioEvent> events;
    double t_start = 0.0;
    double t_end = 10.0;
    double dt = 1e-3;
    double broadcast_period = 0.15;
    double log_every = 0.01;
    bool load_side_control = true;

    double k_i = 0.9;
    double k_p = 0.02;
    double alpha = 0.1;
    double tau = 3.0;
    double freq_band = 0.05;
    double comm_weight = 10.0;

    double agc_period = 2.0;
    double agc_gain = 0.08;

    double f_nominal = 60.0;
    double d_load = 0.02;
    std::map<int, double> d_load_overrides;
    std::map<int, GeneratorParams> generators;  // keyed by bus id

    OptimizerConfig optimizer;

    void validate() const {
        if (!(dt > 0.0 && dt <= 0.05)) throw validation_error("scenario: dt must lie in (0, 0.05]");
        if (t_end <= t_start) throw validation_error("scenario: t_end must exceed t_start");
        const double ratio = broadcast_period / dt;
        if (std::abs(ratio - std::lround(ratio)) > 1e-9)
            throw validation_error("scenario: broadcast_period must be a multiple of dt");
        for (const auto& e : events)
            if (e.time < 0.0 || e.time > t_end)
                throw validation_error("scenario: event outside [0, t_end]");
        if (subnets.empty()) throw validation_error("scenario: no subnetworks configured");
    }
};

// ---- config JSON ------------------------------------------------------------

inline GeneratorParams generator_from_json(const nlohmann::json& j, double f_nominal) {
    GeneratorParams g;
    const double omega_s = 2.0 * pi * f_nominal;
    if (j.contains("inertia_h")) g.inertia_m = 2.0 * j["inertia_h"].get<double>() / omega_s;
    if (j.contains("inertia_m")) g.inertia_m = j["inertia_m"].get<double>();
    if (j.contains("damping")) g.damping = j["damping"].get<double>();
    if (j.contains("droop_r")) g.droop_gain = 1.0 / (j["droop_r"].get<double>() * omega_s);
    if (j.contains("droop_gain")) g.droop_gain = j["droop_gain"].get<double>();
    if (j.contains("t_gov")) g.t_gov = j["t_gov"].get<double>();
    if (j.contains("t_ch")) g.t_ch = j["t_ch"].get<double>();
    if (j.contains("t_rh")) g.t_rh = j["t_rh"].get<double>();
    if (j.contains("f_hp")) g.f_hp = j["f_hp"].get<double>();
    if (j.contains("agc_participation")) g.agc_participation = j["agc_participation"].get<bool>();
    if (j.contains("agc_gain")) g.agc_gain = j["agc_gain"].get<double>();
    g.validate();
    return g;
}

inline ScenarioConfig scenario_from_json(const nlohmann::json& j, const std::string& base_dir = ".") {
    ScenarioConfig c;
    auto resolve = [&](const std::string& p) {
        std::filesystem::path fp(p);
        if (fp.is_absolute()) return p;
        return (std::filesystem::path(base_dir) / fp).string();
    };
    if (!j.contains("transmission_case")) throw parse_error("scenario: missing transmission_case");
    c.transmission_case = resolve(j["transmission_case"].get<std::string>());
    if (!j.contains("subnets") || !j["subnets"].is_array())
        throw parse_error("scenario: missing subnets array");
    for (const auto& js : j["subnets"]) {
        SubnetRef r;
        r.bus = js.at("bus").get<int>();
        r.case_path = resolve(js.at("case").get<std::string>());
        r.kappa = js.value("kappa", 250.0);
        r.monitor_bus = js.value("monitor_bus", 0);
        c.subnets.push_back(r);
    }
    for (const auto& je : j.value("events", nlohmann::json::array())) {
        ScenarioEvent e;
        e.time = je.at("time").get<double>();
        e.subnet_bus = je.at("subnet_bus").get<int>();
        e.bus = je.at("bus").get<int>();
        e.dp = je.value("dp", 0.0);
        e.dq = je.value("dq", 0.0);
        c.events.push_back(e);
    }
    c.t_start = j.value("t_start", 0.0);
    c.t_end = j.value("t_end", 10.0);
    c.dt = j.value("dt", 1e-3);
    c.broadcast_period = j.value("broadcast_period", 0.15);
    c.log_every = j.value("log_every", 0.01);
    c.load_side_control = j.value("load_side_control", true);
    c.f_nominal = j.value("f_nominal", 60.0);
    if (j.contains("controller")) {
        const auto& jc = j["controller"];
        c.k_i = jc.value("k_i", c.k_i);
        c.k_p = jc.value("k_p", c.k_p);
        c.alpha = jc.value("alpha", c.alpha);
        c.tau = jc.value("tau", c.tau);
        c.freq_band = jc.value("freq_band", c.freq_band);
        c.comm_weight = jc.value("comm_weight", c.comm_weight);
    }
    if (j.contains("agc")) {
        c.agc_period = j["agc"].value("period", c.agc_period);
        c.agc_gain = j["agc"].value("gain", c.agc_gain);
    }
    c.d_load = j.value("d_load", c.d_load);
    if (j.contains("d_load_overrides"))
        for (const auto& [key, val] : j["d_load_overrides"].items())
            c.d_load_overrides[std::stoi(key)] = val.get<double>();
    for (const auto& jg : j.value("generators", nlohmann::json::array()))
        c.generators[jg.at("bus").get<int>()] = generator_from_json(jg, c.f_nominal);
    if (j.contains("optimizer")) {
        const auto& jo = j["optimizer"];
        c.optimizer.h_euler = jo.value("h_euler", c.optimizer.h_euler);
        c.optimizer.iterate_to_tolerance = jo.value("iterate_to_tolerance", true);
        c.optimizer.budget_s = jo.value("budget_s", c.optimizer.budget_s);
        c.optimizer.tol = jo.value("tol", c.optimizer.tol);
        c.optimizer.max_virtual_s = jo.value("max_virtual_s", c.optimizer.max_virtual_s);
        c.optimizer.zeta = jo.value("zeta", c.optimizer.zeta);
        c.optimizer.eta = jo.value("eta", c.optimizer.eta);
        c.optimizer.augmentation = jo.value("augmentation", c.optimizer.augmentation);
    }
    c.validate();
    return c;
}

inline ScenarioConfig load_scenario_file(const std::string& path) {
    std::ifstream f(path);
    if (!f.good()) throw parse_error("scenario: cannot open " + path);
    nlohmann::json j;
    try {
        f >> j;
    } catch (const nlohmann::json::parse_error& e) {
        throw parse_error(std::string("scenario: invalid JSON: ") + e.what());
    }
    return scenario_from_json(j, std::filesystem::path(path).parent_path().string());
}

inline nlohmann::json scenario_to_json(const ScenarioConfig& c) {
    nlohmann::json j;
    j["transmission_case"] = c.transmission_case;
    j["subnets"] = nlohmann::json::array();
    for (const auto& s : c.subnets)
        j["subnets"].push_back({{"bus", s.bus}, {"case", s.case_path}, {"kappa", s.kappa},
                                {"monitor_bus", s.monitor_bus}});
    j["events"] = nlohmann::json::array();
    for (const auto& e : c.events)
        j["events"].push_back({{"time", e.time}, {"subnet_bus", e.subnet_bus}, {"bus", e.bus},
                               {"dp", e.dp}, {"dq", e.dq}});
    j["t_start"] = c.t_start;
    j["t_end"] = c.t_end;
    j["dt"] = c.dt;
    j["broadcast_period"] = c.broadcast_period;
    j["log_every"] = c.log_every;
    j["load_side_control"] = c.load_side_control;
    j["f_nominal"] = c.f_nominal;
    j["controller"] = {{"k_i", c.k_i}, {"k_p", c.k_p}, {"alpha", c.alpha}, {"tau", c.tau},
                       {"freq_band", c.freq_band}, {"comm_weight", c.comm_weight}};
    j["agc"] = {{"period", c.agc_period}, {"gain", c.agc_gain}};
    j["d_load"] = c.d_load;
    j["generators"] = nlohmann::json::array();
    for (const auto& [bus, g] : c.generators)
        j["generators"].push_back({{"bus", bus}, {"inertia_m", g.inertia_m}, {"damping", g.damping},
                                   {"droop_gain", g.droop_gain}, {"t_gov", g.t_gov}, {"t_ch", g.t_ch},
                                   {"t_rh", g.t_rh}, {"f_hp", g.f_hp},
                                   {"agc_participation", g.agc_participation}, {"agc_gain", g.agc_gain}});
    j["optimizer"] = {{"h_euler", c.optimizer.h_euler},
                      {"iterate_to_tolerance", c.optimizer.iterate_to_tolerance},
                      {"budget_s", c.optimizer.budget_s},
                      {"tol", c.optimizer.tol},
                      {"max_virtual_s", c.optimizer.max_virtual_s},
                      {"zeta", c.optimizer.zeta},
                      {"eta", c.optimizer.eta},
                      {"augmentation", c.optimizer.augmentation}};
    return j;
}

// ---- telemetry ---------------------------------------------------------------

struct TimeSeriesLog {
    std::vector<std::string> columns;
    std::vector<std::vector<double>> rows;

    int column(const std::string& name) const {
        for (std::size_t i = 0; i < columns.size(); ++i)
            if (columns[i] == name) return static_cast<int>(i);
        throw domain_error("log: unknown column " + name);
    }

    std::string to_csv() const {
        std::string out;
        for (std::size_t i = 0; i < columns.size(); ++i) {
            out += columns[i];
            out += (i + 1 < columns.size()) ? ',' : '\n';
        }
        char buf[40];
        for (const auto& row : rows)
            for (std::size_t i = 0; i < row.size(); ++i) {
                std::snprintf(buf, sizeof(buf), "%.9g", row[i]);
                out += buf;
                out += (i + 1 < row.size()) ? ',' : '\n';
            }
        return out;
    }
};

struct CostReportEntry {
    int subnet_bus = 0;
    double cost_do = 0.0;
    double cost_pa = 0.0;
    double saving = 0.0;      // pa - do
    double saving_rel = 0.0;  // (pa - do)/pa
};

struct CostReport {
    std::vector<CostReportEntry> entries;

    nlohmann::json to_json() const {
        nlohmann::json j = nlohmann::json::array();
        for (const auto& e : entries)
            j.push_back({{"subnet_bus", e.subnet_bus},
                         {"cost_distributed_optimization", e.cost_do},
                         {"cost_proportional_adjustment", e.cost_pa},
                         {"saving", e.saving},
                         {"saving_rel", e.saving_rel}});
        return j;
    }
};

// Integrated costs per subnetwork from the cumulative log columns.
inline CostReport compare_costs(const TimeSeriesLog& log) {
    CostReport rep;
    if (log.rows.empty()) return rep;
    for (const auto& name : log.columns) {
        if (name.rfind("cost_do_", 0) != 0) continue;
        const int bus = std::stoi(name.substr(8));
        CostReportEntry e;
        e.subnet_bus = bus;
        e.cost_do = log.rows.back()[log.column(name)];
        e.cost_pa = log.rows.back()[log.column("cost_pa_" + std::to_string(bus))];
        e.saving = e.cost_pa - e.cost_do;
        e.saving_rel = (e.cost_pa > 0.0) ? e.saving / e.cost_pa : 0.0;
        rep.entries.push_back(e);
    }
    return rep;
}

// ---- engine ------------------------------------------------------------------

namespace detail {

struct SubnetRuntime {
    SubnetRef ref;
    NetworkCase cs;  // events land in the critical loads of this copy
    std::map<int, OperatingRegion> regions;
    LossModel lossm;
    std::vector<int> agg_ids;
    AgentGains gains;

    DistOptProblem pb;
    std::vector<AgentState> agents;
    std::map<int, EsTracking> trackers;
    PiGains pi;

    PowerFlowSolution flow;
    Eigen::VectorXd p_sl, q_sl;  // realized draws, per bus
    double p_pcc = 0.0;
    double p_loss_meas = 0.0;

    double p_d = 0.0;          // natural draw of the current case
    Eigen::VectorXd p_sl_ref;  // natural draws (P_real reference)
    Eigen::VectorXd q_sl_ref;
    double cap_up = 0.0, cap_down = 0.0;

    double cost_do = 0.0;
    double cost_pa = 0.0;
    double pa_rate = 0.0;
    int monitor = 0;
};

// Quasi-static plant: alternate the voltage-dependent aggregator draws with
// the AC solve until the coupled state settles.
inline void solve_subnet_plant(SubnetRuntime& s) {
    InjectionSpec spec = InjectionSpec::zero(s.cs.size());
    for (const auto& b : s.cs.buses) {
        spec.p(b.id - 1) = b.p_nominal;
        spec.q(b.id - 1) = b.q_nominal;
    }
    const auto& pcc = s.cs.bus(s.cs.pcc_id());
    spec.v_slack = pcc.v_limits.hi;
    spec.theta_slack = deg2rad(pcc.theta_limits_deg.hi);

    Eigen::VectorXd v = s.flow.v.size() ? s.flow.v : Eigen::VectorXd::Ones(s.cs.size());
    for (int it = 0; it < 40; ++it) {
        for (int id : s.agg_ids) {
            const auto& tr = s.trackers.at(id);
            const auto fp = forward_power(tr.v_es_d, tr.v_es_q, v(id - 1), s.cs.aggregators.at(id), false);
            s.p_sl(id - 1) = fp.p_sl;
            s.q_sl(id - 1) = fp.q_sl;
            spec.p(id - 1) = s.cs.bus(id).p_nominal - fp.p_sl;
            spec.q(id - 1) = s.cs.bus(id).q_nominal - fp.q_sl;
        }
        const auto sol = solve_ac_newton(s.cs, spec);
        const double dv = (sol.v - v).cwiseAbs().maxCoeff();
        v = sol.v;
        s.flow = sol;
        if (dv < 1e-11) break;
    }
    s.p_pcc = s.flow.p_pcc;
    s.p_loss_meas = s.flow.p_loss;
}

inline void rebuild_problem(SubnetRuntime& s) {
    s.pb = build_problem(s.cs, 0.0, {}, s.regions);
    s.agents = init_agents(s.pb, s.gains);
    s.p_d = s.pb.pcc_draw_base;
    s.p_sl_ref = s.pb.p_sl0;
    s.q_sl_ref = s.pb.q_sl0;
    s.cap_up = 0.0;
    s.cap_down = 0.0;
    for (int id : s.agg_ids) {
        const auto& reg = s.regions.at(id);
        s.cap_down += s.p_sl_ref(id - 1) - reg.p_limits.lo;
        s.cap_up += reg.p_limits.hi - s.p_sl_ref(id - 1);
    }
}

inline double nl_voltage(const SubnetRuntime& s, int id) {
    const auto& tr = s.trackers.at(id);
    const double d = s.flow.v(id - 1) - tr.v_es_d;
    return std::sqrt(d * d + tr.v_es_q * tr.v_es_q);
}

}  // namespace detail

struct ScenarioResult {
    TimeSeriesLog log;
    CostReport costs;
    std::vector<SwitchEvent> switches;
};

inline ScenarioResult run_scenario(const ScenarioConfig& cfg) {
    cfg.validate();

    // ---- load cases ----
    std::ifstream tf(cfg.transmission_case);
    if (!tf.good()) throw parse_error("scenario: cannot open " + cfg.transmission_case);
    std::stringstream tss;
    tss << tf.rdbuf();
    const NetworkCase tx_case = load_case(tss.str());
    const int n_tx = tx_case.size();

    std::vector<detail::SubnetRuntime> subs;
    for (const auto& ref : cfg.subnets) {
        detail::SubnetRuntime s;
        s.ref = ref;
        std::ifstream f(ref.case_path);
        if (!f.good()) throw parse_error("scenario: cannot open " + ref.case_path);
        std::stringstream ss;
        ss << f.rdbuf();
        s.cs = load_case(ss.str());
        for (const auto& [id, par] : s.cs.aggregators) {
            s.agg_ids.push_back(id);
            s.regions.emplace(id, operating_region(par, par.v0));
            s.trackers.emplace(id, EsTracking{});
        }
        s.lossm = fit_loss_model(s.cs);
        s.gains.kappa = ref.kappa;
        s.gains.zeta = cfg.optimizer.zeta;
        s.gains.eta = cfg.optimizer.eta;
        s.gains.augmentation = cfg.optimizer.augmentation;
        s.p_sl = Eigen::VectorXd::Zero(s.cs.size());
        s.q_sl = Eigen::VectorXd::Zero(s.cs.size());
        s.monitor = ref.monitor_bus > 0 ? ref.monitor_bus : s.agg_ids.front();
        if (ref.bus < 1 || ref.bus > n_tx)
            throw validation_error("scenario: subnet bus " + std::to_string(ref.bus) + " not in the transmission case");
        subs.push_back(std::move(s));
    }

    // ---- transmission model ----
    std::vector<GeneratorParams> gen_params;
    for (const auto& b : tx_case.buses)
        if (b.kind == BusKind::Generator) {
            auto it = cfg.generators.find(b.id);
            gen_params.push_back(it != cfg.generators.end() ? it->second : GeneratorParams{});
        }
    const auto model = TransmissionModel::from_case(tx_case, gen_params, cfg.f_nominal);

    // ---- initialization: subnet naturals, then the transmission equilibrium ----
    for (auto& s : subs) {
        try {
            detail::rebuild_problem(s);
        } catch (const std::exception& e) {
            throw numerical_error("scenario init (subnet at bus " + std::to_string(s.ref.bus) + "): " + e.what());
        }
        detail::solve_subnet_plant(s);
    }

    Eigen::VectorXd p_d = Eigen::VectorXd::Zero(n_tx);
    Eigen::VectorXd d_load = Eigen::VectorXd::Constant(n_tx, cfg.d_load);
    for (const auto& [bus, v] : cfg.d_load_overrides) d_load(bus - 1) = v;
    for (const auto& b : tx_case.buses)
        if (b.kind != BusKind::Generator) p_d(b.id - 1) = -b.p_nominal;
    for (const auto& s : subs) p_d(s.ref.bus - 1) = s.p_d;

    std::vector<double> dispatch;
    for (const auto& b : tx_case.buses)
        if (b.kind == BusKind::Generator) dispatch.push_back(b.p_nominal);
    TransmissionState tx = solve_equilibrium(model, p_d, d_load, dispatch);

    // ---- controller ----
    ControllerParams ctrl_par;
    ctrl_par.k_i = cfg.k_i;
    ctrl_par.k_p = cfg.k_p;
    ctrl_par.alpha = cfg.alpha;
    ctrl_par.tau = cfg.tau;
    ctrl_par.freq_band = cfg.freq_band;
    ctrl_par.comm = ControllerParams::comm_from_case(tx_case, cfg.comm_weight);
    ctrl_par.emits.assign(n_tx, 0);
    ctrl_par.u_limits.assign(n_tx, Interval{0.0, 0.0});
    auto refresh_u_limits = [&]() {
        for (const auto& s : subs) {
            const int i = s.ref.bus - 1;
            ctrl_par.emits[i] = 1;
            const double cap = 0.1 * tx.p_d(i);
            ctrl_par.u_limits[i] = {-std::min(cap, 0.95 * s.cap_up), std::min(cap, 0.95 * s.cap_down)};
        }
    };
    refresh_u_limits();
    ctrl_par.validate();
    ControllerState ctrl = ControllerState::zero(n_tx);

    std::vector<FreqSample> freq_hist;
    for (double t = cfg.t_start - cfg.tau - 1.0; t < cfg.t_start; t += cfg.dt)
        freq_hist.push_back({t, cfg.f_nominal});

    // ---- schedule ----
    const int n_steps = static_cast<int>(std::lround((cfg.t_end - cfg.t_start) / cfg.dt));
    const int per_broadcast = static_cast<int>(std::lround(cfg.broadcast_period / cfg.dt));
    const int per_log = std::max(1, static_cast<int>(std::lround(cfg.log_every / cfg.dt)));
    const int per_agc = std::max(1, static_cast<int>(std::lround(cfg.agc_period / cfg.dt)));

    std::vector<ScenarioEvent> events = cfg.events;
    std::sort(events.begin(), events.end(),
              [](const ScenarioEvent& a, const ScenarioEvent& b) { return a.time < b.time; });
    std::size_t next_event = 0;

    ScenarioResult out;
    auto& log = out.log;
    log.columns = {"t", "f_sys", "phi"};
    for (const auto& s : subs) {
        const std::string b = std::to_string(s.ref.bus);
        for (const char* c : {"u_bar_", "u_meas_", "p_real_", "p_pcc_", "v_s_mon_", "v_nl_mon_",
                              "v_s_min_", "v_s_max_", "v_nl_min_", "v_nl_max_", "cost_do_", "cost_pa_"})
            log.columns.push_back(c + b);
    }

    double agc_total = 0.0;

    // Commands within the deadband of the realized draws leave the trackers
    // untouched, so a settled system does not churn.
    const double command_deadband = 1e-7;
    auto apply_setpoints = [&](detail::SubnetRuntime& s, const Eigen::VectorXd& x_hat) {
        for (int id : s.agg_ids) {
            const int i = id - 1;
            const auto& reg = s.regions.at(id);
            const auto& par = s.cs.aggregators.at(id);
            double p_star = s.cs.bus(id).p_nominal - x_hat(s.pb.idx_p(i));
            double q_star = s.cs.bus(id).q_nominal - x_hat(s.pb.idx_q(i));
            p_star = Interval{reg.p_limits.lo + 1e-9, reg.p_limits.hi - 1e-9}.clamp(p_star);
            q_star = reg.q_limits.clamp(q_star);
            if (std::abs(p_star - s.p_sl(i)) < command_deadband &&
                std::abs(q_star - s.q_sl(i)) < command_deadband)
                continue;
            auto& tr = s.trackers.at(id);
            const auto sp = es_voltage_setpoints(p_star, q_star, par.v0, par);
            tr.sp_d = sp.v_es_d;
            tr.sp_q = sp.v_es_q;
        }
    };

    for (int step = 0; step <= n_steps; ++step) {
        const double t = cfg.t_start + step * cfg.dt;

        try {
            // events
            while (next_event < events.size() && events[next_event].time <= t + cfg.dt / 2) {
                const auto& e = events[next_event];
                bool applied = false;
                for (auto& s : subs)
                    if (s.ref.bus == e.subnet_bus) {
                        auto& bus = s.cs.bus(e.bus);
                        bus.p_nominal -= e.dp;
                        bus.q_nominal -= e.dq;
                        detail::rebuild_problem(s);
                        tx.p_d(s.ref.bus - 1) = s.p_d;
                        applied = true;
                    }
                if (!applied)
                    throw validation_error("event at t=" + std::to_string(e.time) + ": no subnet at bus " +
                                           std::to_string(e.subnet_bus));
                refresh_u_limits();
                ++next_event;
            }

            // subnet plants: PI tracking then the quasi-static flow
            for (auto& s : subs) {
                for (int id : s.agg_ids) pi_track_step(s.trackers.at(id), s.cs.aggregators.at(id), s.pi, cfg.dt);
                detail::solve_subnet_plant(s);
                tx.u(s.ref.bus - 1) = tx.p_d(s.ref.bus - 1) - s.p_pcc;
            }

            // transmission dynamics
            tx = step_swing(tx, model, cfg.dt);

            // AGC
            if (step % per_agc == 0 && step > 0) {
                double num = 0.0, den = 0.0;
                for (int g = 0; g < model.n_gens(); ++g) {
                    num += model.gens[g].inertia_m * tx.omega(g);
                    den += model.gens[g].inertia_m;
                }
                agc_total -= cfg.agc_gain * (num / den) * cfg.agc_period;
                double wsum = 0.0;
                for (int g = 0; g < model.n_gens(); ++g)
                    if (model.gens[g].agc_participation) wsum += model.gens[g].agc_gain;
                for (int g = 0; g < model.n_gens(); ++g)
                    tx.chains[g].p_agc = model.gens[g].agc_participation && wsum > 0.0
                                             ? agc_total * model.gens[g].agc_gain / wsum
                                             : 0.0;
            }

            // load-side controllers
            const double f_sys = system_frequency(tx, model);
            freq_hist.push_back({t, f_sys});
            const std::size_t keep = static_cast<std::size_t>((cfg.tau + 2.0) / cfg.dt) + 4;
            if (freq_hist.size() > 2 * keep)
                freq_hist.erase(freq_hist.begin(), freq_hist.end() - static_cast<long>(keep));
            if (cfg.load_side_control) {
                const auto events_now = switch_logic(ctrl, freq_hist, ctrl_par, cfg.f_nominal, t);
                for (const auto& ev : events_now) {
                    out.switches.push_back(ev);
                    if (ev.phi == 0) reinit(ctrl, compute_power_imbalance(tx, model));
                }
                const auto omega_dev = bus_speed_deviation(tx, model);
                if (ctrl.mode == ControlMode::Frm)
                    frm_step(ctrl, ctrl_par, omega_dev, cfg.dt);
                else
                    lrm_step(ctrl, ctrl_par, cfg.dt);
            }

            // broadcast: re-pin, settle the agent dynamics, push setpoints
            if (step % per_broadcast == 0 && cfg.load_side_control) {
                for (auto& s : subs) {
                    const double u_bar = ctrl.u_bar(s.ref.bus - 1);
                    // fitted slope anchored at the solved nominal loss, so a
                    // zero requirement pins exactly the nominal draw
                    const double p_loss_est =
                        s.pb.p_loss_base + s.lossm.d_l * (s.p_pcc - u_bar - s.pb.pcc_draw_base);
                    if (u_bar == 0.0 && s.pb.u_bar == 0.0 &&
                        std::abs(p_loss_est - s.pb.p_loss) < 1e-12) {
                        s.pa_rate = 0.0;
                        continue;  // settled at nominal, nothing to broadcast
                    }
                    repin(s.pb, u_bar, p_loss_est);
                    reproject_agents(s.pb, s.agents);
                    if (cfg.optimizer.iterate_to_tolerance)
                        solve_distributed(s.pb, s.agents, cfg.optimizer.h_euler, cfg.optimizer.max_virtual_s,
                                          cfg.optimizer.tol);
                    else
                        solve_distributed(s.pb, s.agents, cfg.optimizer.h_euler, cfg.optimizer.budget_s, 0.0);
                    const auto rep = consensus_state(s.pb, s.agents);
                    apply_setpoints(s, rep.x);

                    const auto alloc = proportional_adjustment(s.pb, s.cs, s.regions, u_bar, p_loss_est);
                    s.pa_rate = alloc.cost;
                }
            }

            // cost integration
            for (auto& s : subs) {
                double rate = 0.0;
                for (int id : s.agg_ids) {
                    const auto& par = s.cs.aggregators.at(id);
                    const double dp = s.p_sl(id - 1) - s.p_sl_ref(id - 1);
                    const double dq = s.q_sl(id - 1) - s.q_sl_ref(id - 1);
                    rate += par.h * dp * dp + par.g * dq * dq;
                }
                s.cost_do += rate * cfg.dt;
                s.cost_pa += s.pa_rate * cfg.dt;
            }
        } catch (const std::exception& e) {
            throw numerical_error("scenario aborted at t=" + std::to_string(t) + ": " + e.what());
        }

        // telemetry
        if (step % per_log == 0) {
            std::vector<double> row;
            row.push_back(t);
            row.push_back(system_frequency(tx, model));
            row.push_back(ctrl.phi);
            for (auto& s : subs) {
                const int i = s.ref.bus - 1;
                const double u_meas = tx.p_d(i) - s.p_pcc;
                double p_real = 0.0;
                for (int id : s.agg_ids) p_real += s.p_sl_ref(id - 1) - s.p_sl(id - 1);
                double vs_min = 1e9, vs_max = -1e9, vnl_min = 1e9, vnl_max = -1e9;
                for (int b = 0; b < s.cs.size(); ++b) {
                    vs_min = std::min(vs_min, s.flow.v(b));
                    vs_max = std::max(vs_max, s.flow.v(b));
                }
                for (int id : s.agg_ids) {
                    const double vnl = detail::nl_voltage(s, id);
                    vnl_min = std::min(vnl_min, vnl);
                    vnl_max = std::max(vnl_max, vnl);
                }
                row.push_back(ctrl.u_bar(i));
                row.push_back(u_meas);
                row.push_back(p_real);
                row.push_back(s.p_pcc);
                row.push_back(s.flow.v(s.monitor - 1));
                row.push_back(detail::nl_voltage(s, s.monitor));
                row.push_back(vs_min);
                row.push_back(vs_max);
                row.push_back(vnl_min);
                row.push_back(vnl_max);
                row.push_back(s.cost_do);
                row.push_back(s.cost_pa);
            }
            log.rows.push_back(std::move(row));
        }
    }

    out.costs = compare_costs(log);
    return out;
}

}  // namespace esgrid
