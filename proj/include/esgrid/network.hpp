#pragma once

// Network cases: buses, lines, aggregator parameters, JSON (de)serialization
// and the bus admittance structures shared by power flow and optimization.
//
// Conventions: bus ids are contiguous from 1; p_nominal/q_nominal are net
// injections (loads negative) and, on aggregator buses, cover only the
// uncontrollable (critical) part -- the aggregator's own nominal draw lives in
// its AggregatorParams.  All electrical quantities per-unit on base_mva.

#include <map>
#include <queue>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include <nlohmann/json.hpp>

#include "esgrid/common.hpp"
#include "esgrid/es_aggregator.hpp"

namespace esgrid {

enum class BusKind { Pcc, Generator, Load, Aggregator };

inline std::string to_string(BusKind k) {
    switch (k) {
        case BusKind::Pcc: return "pcc";
        case BusKind::Generator: return "generator";
        case BusKind::Load: return "load";
        case BusKind::Aggregator: return "aggregator";
    }
    return "?";
}

inline BusKind bus_kind_from_string(const std::string& s) {
    if (s == "pcc" || s == "slack") return BusKind::Pcc;
    if (s == "generator") return BusKind::Generator;
    if (s == "load") return BusKind::Load;
    if (s == "aggregator") return BusKind::Aggregator;
    throw parse_error("unknown bus kind \"" + s + "\"");
}

struct Bus {
    int id = 0;
    BusKind kind = BusKind::Load;
    double p_nominal = 0.0;
    double q_nominal = 0.0;
    Interval v_limits{0.95, 1.05};
    Interval theta_limits_deg{-15.0, 15.0};
};

struct Line {
    int from = 0;
    int to = 0;
    double r = 0.0;
    double x = 0.0;
    double b_shunt = 0.0;
};

struct NetworkCase {
    double base_mva = 100.0;
    std::vector<Bus> buses;
    std::vector<Line> lines;
    std::map<int, AggregatorParams> aggregators;  // bus id -> params

    int size() const { return static_cast<int>(buses.size()); }

    const Bus& bus(int id) const { return buses.at(static_cast<std::size_t>(id - 1)); }
    Bus& bus(int id) { return buses.at(static_cast<std::size_t>(id - 1)); }

    int pcc_id() const {
        for (const auto& b : buses)
            if (b.kind == BusKind::Pcc) return b.id;
        throw validation_error("case has no PCC bus");
    }

    bool has_pcc() const {
        for (const auto& b : buses)
            if (b.kind == BusKind::Pcc) return true;
        return false;
    }

    void validate() const;
};

inline void NetworkCase::validate() const {
    std::vector<std::string> faults;
    if (buses.empty()) faults.push_back("no buses");
    for (std::size_t i = 0; i < buses.size(); ++i) {
        const auto& b = buses[i];
        if (b.id != static_cast<int>(i) + 1)
            faults.push_back("bus ids not contiguous from 1 at position " + std::to_string(i + 1) +
                             " (found id " + std::to_string(b.id) + ")");
        if (!b.v_limits.ordered())
            faults.push_back("bus " + std::to_string(b.id) + ": voltage limits out of order");
        if (!b.theta_limits_deg.ordered())
            faults.push_back("bus " + std::to_string(b.id) + ": angle limits out of order");
    }

    int n_pcc = 0;
    for (const auto& b : buses)
        if (b.kind == BusKind::Pcc) ++n_pcc;
    if (n_pcc > 1) faults.push_back("more than one PCC bus");
    if (!aggregators.empty() && n_pcc != 1)
        faults.push_back("subtransmission case (has aggregators) must have exactly one PCC bus");

    if (lines.empty() && buses.size() >= 1) faults.push_back("disconnected: case has no lines");

    const int n = size();
    for (const auto& l : lines) {
        if (l.from == l.to)
            faults.push_back("line " + std::to_string(l.from) + "-" + std::to_string(l.to) + ": self loop");
        if (l.from < 1 || l.from > n || l.to < 1 || l.to > n)
            faults.push_back("line " + std::to_string(l.from) + "-" + std::to_string(l.to) + ": unknown endpoint");
        if (!(l.x > 0.0))
            faults.push_back("line " + std::to_string(l.from) + "-" + std::to_string(l.to) + ": reactance must be > 0");
        if (l.r < 0.0)
            faults.push_back("line " + std::to_string(l.from) + "-" + std::to_string(l.to) + ": negative resistance");
    }

    for (const auto& [id, par] : aggregators) {
        if (id < 1 || id > n) {
            faults.push_back("aggregator references unknown bus " + std::to_string(id));
            continue;
        }
        if (bus(id).kind != BusKind::Aggregator)
            faults.push_back("bus " + std::to_string(id) + " has aggregator params but kind \"" +
                             to_string(bus(id).kind) + "\"");
        try {
            par.validate();
        } catch (const std::exception& e) {
            faults.push_back("bus " + std::to_string(id) + ": " + e.what());
        }
    }
    for (const auto& b : buses)
        if (b.kind == BusKind::Aggregator && !aggregators.count(b.id))
            faults.push_back("bus " + std::to_string(b.id) + " is an aggregator bus without parameters");

    // connectivity (only meaningful once endpoints are sane)
    if (faults.empty() && !buses.empty()) {
        std::vector<std::vector<int>> adj(buses.size());
        for (const auto& l : lines) {
            adj[l.from - 1].push_back(l.to - 1);
            adj[l.to - 1].push_back(l.from - 1);
        }
        std::vector<char> seen(buses.size(), 0);
        std::queue<int> q;
        q.push(0);
        seen[0] = 1;
        int count = 1;
        while (!q.empty()) {
            int v = q.front();
            q.pop();
            for (int w : adj[v])
                if (!seen[w]) {
                    seen[w] = 1;
                    ++count;
                    q.push(w);
                }
        }
        if (count != size()) faults.push_back("disconnected: graph does not reach every bus");
    }

    if (!faults.empty()) {
        std::string msg = "case validation failed:";
        for (const auto& f : faults) msg += "\n  - " + f;
        throw validation_error(msg);
    }
}

// ---- JSON (de)serialization -------------------------------------------------

namespace detail {

inline Interval interval_from_json(const nlohmann::json& j, const std::string& field) {
    if (!j.is_array() || j.size() != 2)
        throw parse_error("field \"" + field + "\" must be a [lo, hi] pair");
    return {j[0].get<double>(), j[1].get<double>()};
}

template <typename T>
T require(const nlohmann::json& j, const std::string& field, const std::string& ctx) {
    if (!j.contains(field)) throw parse_error(ctx + ": missing field \"" + field + "\"");
    try {
        return j.at(field).get<T>();
    } catch (const nlohmann::json::exception& e) {
        throw parse_error(ctx + ": field \"" + field + "\": " + e.what());
    }
}

}  // namespace detail

inline NetworkCase case_from_json(const nlohmann::json& j) {
    NetworkCase c;
    c.base_mva = j.value("base_mva", 100.0);

    if (!j.contains("buses") || !j["buses"].is_array()) throw parse_error("missing \"buses\" array");
    std::map<int, Bus> by_id;
    for (const auto& jb : j["buses"]) {
        Bus b;
        b.id = detail::require<int>(jb, "id", "bus");
        const std::string ctx = "bus " + std::to_string(b.id);
        if (by_id.count(b.id)) throw parse_error("duplicate bus id " + std::to_string(b.id));
        b.kind = bus_kind_from_string(detail::require<std::string>(jb, "kind", ctx));
        b.p_nominal = jb.value("p_nominal", 0.0);
        b.q_nominal = jb.value("q_nominal", 0.0);
        if (jb.contains("v_limits")) b.v_limits = detail::interval_from_json(jb["v_limits"], ctx + ".v_limits");
        if (jb.contains("theta_limits_deg"))
            b.theta_limits_deg = detail::interval_from_json(jb["theta_limits_deg"], ctx + ".theta_limits_deg");
        by_id.emplace(b.id, b);
    }
    for (auto& [id, b] : by_id) c.buses.push_back(b);

    if (j.contains("lines"))
        for (const auto& jl : j["lines"]) {
            Line l;
            l.from = detail::require<int>(jl, "from", "line");
            l.to = detail::require<int>(jl, "to", "line");
            const std::string ctx = "line " + std::to_string(l.from) + "-" + std::to_string(l.to);
            l.r = detail::require<double>(jl, "r", ctx);
            l.x = detail::require<double>(jl, "x", ctx);
            l.b_shunt = jl.value("b_shunt", 0.0);
            c.lines.push_back(l);
        }

    if (j.contains("aggregators"))
        for (const auto& ja : j["aggregators"]) {
            const int bus = detail::require<int>(ja, "bus", "aggregator");
            const std::string ctx = "aggregator at bus " + std::to_string(bus);
            AggregatorParams p;
            p.p0 = detail::require<double>(ja, "p0", ctx);
            p.q0 = detail::require<double>(ja, "q0", ctx);
            p.v0 = ja.value("v0", 1.0);
            p.alpha_p = detail::require<double>(ja, "alpha_p", ctx);
            p.alpha_q = detail::require<double>(ja, "alpha_q", ctx);
            if (ja.contains("v_es_d_limits"))
                p.v_es_d_limits = detail::interval_from_json(ja["v_es_d_limits"], ctx + ".v_es_d_limits");
            if (ja.contains("v_es_q_limits"))
                p.v_es_q_limits = detail::interval_from_json(ja["v_es_q_limits"], ctx + ".v_es_q_limits");
            if (ja.contains("v_nl_limits"))
                p.v_nl_limits = detail::interval_from_json(ja["v_nl_limits"], ctx + ".v_nl_limits");
            p.h = ja.value("h", 100.0);
            p.g = ja.value("g", 40.0);
            if (c.aggregators.count(bus)) throw parse_error("duplicate aggregator at bus " + std::to_string(bus));
            c.aggregators.emplace(bus, p);
        }

    c.validate();
    return c;
}

inline NetworkCase load_case(const std::string& text) {
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(text);
    } catch (const nlohmann::json::parse_error& e) {
        throw parse_error(std::string("case document is not valid JSON: ") + e.what());
    }
    return case_from_json(j);
}

inline nlohmann::json case_to_json(const NetworkCase& c) {
    nlohmann::json j;
    j["base_mva"] = c.base_mva;
    j["buses"] = nlohmann::json::array();
    for (const auto& b : c.buses) {
        j["buses"].push_back({{"id", b.id},
                              {"kind", to_string(b.kind)},
                              {"p_nominal", b.p_nominal},
                              {"q_nominal", b.q_nominal},
                              {"v_limits", {b.v_limits.lo, b.v_limits.hi}},
                              {"theta_limits_deg", {b.theta_limits_deg.lo, b.theta_limits_deg.hi}}});
    }
    j["lines"] = nlohmann::json::array();
    for (const auto& l : c.lines)
        j["lines"].push_back({{"from", l.from}, {"to", l.to}, {"r", l.r}, {"x", l.x}, {"b_shunt", l.b_shunt}});
    j["aggregators"] = nlohmann::json::array();
    for (const auto& [bus, p] : c.aggregators) {
        j["aggregators"].push_back({{"bus", bus},
                                    {"p0", p.p0},
                                    {"q0", p.q0},
                                    {"v0", p.v0},
                                    {"alpha_p", p.alpha_p},
                                    {"alpha_q", p.alpha_q},
                                    {"v_es_d_limits", {p.v_es_d_limits.lo, p.v_es_d_limits.hi}},
                                    {"v_es_q_limits", {p.v_es_q_limits.lo, p.v_es_q_limits.hi}},
                                    {"v_nl_limits", {p.v_nl_limits.lo, p.v_nl_limits.hi}},
                                    {"h", p.h},
                                    {"g", p.g}});
    }
    return j;
}

inline std::string save_case(const NetworkCase& c) { return case_to_json(c).dump(2); }

// ---- admittance -------------------------------------------------------------

struct AdmittanceTriple {
    Eigen::MatrixXd G;        // real part of the bus admittance matrix
    Eigen::MatrixXd B;        // imaginary part (with shunts)
    Eigen::MatrixXd B_prime;  // imaginary part with all shunt terms removed

    int size() const { return static_cast<int>(G.rows()); }
};

// Standard bus admittance assembly: each line contributes series admittance
// g - jb with g = r/(r^2+x^2), b = x/(r^2+x^2), plus half its charging
// susceptance at each end.  Off-diagonals hold -g and +b.
inline AdmittanceTriple build_admittance(const NetworkCase& c) {
    const int n = c.size();
    AdmittanceTriple a;
    a.G = Eigen::MatrixXd::Zero(n, n);
    a.B = Eigen::MatrixXd::Zero(n, n);
    a.B_prime = Eigen::MatrixXd::Zero(n, n);

    for (const auto& l : c.lines) {
        const double z2 = l.r * l.r + l.x * l.x;
        if (z2 <= 0.0)
            throw numerical_error("line " + std::to_string(l.from) + "-" + std::to_string(l.to) +
                                  ": degenerate impedance (r = x = 0)");
        const double g = l.r / z2;
        const double b = l.x / z2;
        const int i = l.from - 1, k = l.to - 1;

        a.G(i, k) -= g;
        a.G(k, i) -= g;
        a.G(i, i) += g;
        a.G(k, k) += g;

        a.B(i, k) += b;
        a.B(k, i) += b;
        a.B(i, i) -= b;
        a.B(k, k) -= b;
        a.B(i, i) += l.b_shunt / 2.0;
        a.B(k, k) += l.b_shunt / 2.0;

        a.B_prime(i, k) += b;
        a.B_prime(k, i) += b;
        a.B_prime(i, i) -= b;
        a.B_prime(k, k) -= b;
    }
    return a;
}

}  // namespace esgrid
