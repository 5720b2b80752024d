#include <catch2/catch_amalgamated.hpp>

#include <fstream>
#include <sstream>

#include "esgrid/network.hpp"

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

}  // namespace

TEST_CASE("nine-bus case loads with three generators and three aggregate loads") {
    const auto c = load_case(read_file(kCaseDir + "/nine_bus.json"));
    int gens = 0, loaded = 0;
    for (const auto& b : c.buses) {
        if (b.kind == BusKind::Generator) ++gens;
        if (b.kind == BusKind::Load && b.p_nominal != 0.0) ++loaded;
    }
    CHECK(gens == 3);
    CHECK(loaded == 3);
    CHECK(c.size() == 9);
}

TEST_CASE("single bus with no lines is rejected as disconnected") {
    const std::string doc = R"({"base_mva": 100, "buses": [{"id": 1, "kind": "load"}], "lines": []})";
    CHECK_THROWS_WITH(load_case(doc), Catch::Matchers::ContainsSubstring("no lines"));
}

TEST_CASE("duplicate bus id is a parse error naming the id") {
    const std::string doc = R"({"buses": [
        {"id": 1, "kind": "pcc"}, {"id": 2, "kind": "load"}, {"id": 2, "kind": "load"}],
        "lines": [{"from": 1, "to": 2, "r": 0, "x": 0.1}]})";
    CHECK_THROWS_MATCHES(load_case(doc), parse_error,
                         Catch::Matchers::MessageMatches(Catch::Matchers::ContainsSubstring("2")));
}

TEST_CASE("validation lists every failed check") {
    NetworkCase c;
    c.buses.push_back({1, BusKind::Load, 0.0, 0.0, {1.1, 0.9}, {-15, 15}});
    c.buses.push_back({2, BusKind::Load, 0.0, 0.0, {0.95, 1.05}, {15, -15}});
    c.lines.push_back({1, 2, -0.1, 0.0, 0.0});
    try {
        c.validate();
        FAIL("expected validation_error");
    } catch (const validation_error& e) {
        const std::string msg = e.what();
        CHECK(msg.find("voltage limits out of order") != std::string::npos);
        CHECK(msg.find("angle limits out of order") != std::string::npos);
        CHECK(msg.find("reactance must be > 0") != std::string::npos);
        CHECK(msg.find("negative resistance") != std::string::npos);
    }
}

TEST_CASE("two-bus admittance assembles by hand") {
    NetworkCase c;
    c.buses.push_back({1, BusKind::Pcc, 0, 0, {1, 1}, {0, 0}});
    c.buses.push_back({2, BusKind::Load, 0, 0, {0.95, 1.05}, {-15, 15}});
    c.lines.push_back({1, 2, 0.0, 0.5, 0.0});
    c.validate();
    const auto a = build_admittance(c);
    CHECK(a.G.isZero(0));
    CHECK(a.B(0, 0) == Catch::Approx(-2.0));
    CHECK(a.B(0, 1) == Catch::Approx(2.0));
    CHECK(a.B(1, 0) == Catch::Approx(2.0));
    CHECK(a.B(1, 1) == Catch::Approx(-2.0));
    CHECK((a.B - a.B_prime).isZero(0));  // shunt-free: identical
}

TEST_CASE("series admittance follows the standard formula") {
    NetworkCase c;
    c.buses.push_back({1, BusKind::Pcc, 0, 0, {1, 1}, {0, 0}});
    c.buses.push_back({2, BusKind::Load, 0, 0, {0.95, 1.05}, {-15, 15}});
    c.lines.push_back({1, 2, 0.1, 0.37, 0.0});
    const auto a = build_admittance(c);
    const double z2 = 0.1 * 0.1 + 0.37 * 0.37;
    CHECK(a.G(0, 1) == Catch::Approx(-0.1 / z2).epsilon(1e-14));
    CHECK(a.B(0, 1) == Catch::Approx(0.37 / z2).epsilon(1e-14));
    CHECK(a.G(0, 0) == Catch::Approx(0.1 / z2).epsilon(1e-14));
}

TEST_CASE("admittance entries and shunt handling across a meshed case") {
    NetworkCase c;
    for (int i = 1; i <= 4; ++i)
        c.buses.push_back({i, i == 1 ? BusKind::Pcc : BusKind::Load, 0, 0, {0.9, 1.1}, {-30, 30}});
    c.lines.push_back({1, 2, 0.05, 0.2, 0.04});
    c.lines.push_back({2, 3, 0.06, 0.25, 0.02});
    c.lines.push_back({3, 4, 0.04, 0.3, 0.0});
    c.lines.push_back({4, 1, 0.03, 0.15, 0.06});
    c.validate();
    const auto a = build_admittance(c);

    for (const auto& l : c.lines) {
        const double z2 = l.r * l.r + l.x * l.x;
        CHECK(a.G(l.from - 1, l.to - 1) == Catch::Approx(-l.r / z2).margin(1e-14));
        CHECK(a.B(l.from - 1, l.to - 1) == Catch::Approx(l.x / z2).margin(1e-14));
        CHECK(a.B_prime(l.from - 1, l.to - 1) == Catch::Approx(l.x / z2).margin(1e-14));
    }
    // B_prime rows sum to zero; B rows differ by the bus shunt total
    for (int i = 0; i < 4; ++i) {
        CHECK(a.B_prime.row(i).sum() == Catch::Approx(0.0).margin(1e-14));
        double shunt = 0.0;
        for (const auto& l : c.lines)
            if (l.from - 1 == i || l.to - 1 == i) shunt += l.b_shunt / 2.0;
        CHECK(a.B.row(i).sum() == Catch::Approx(shunt).margin(1e-14));
    }
    CHECK(a.G.isApprox(a.G.transpose()));
    CHECK(a.B.isApprox(a.B.transpose()));
}

TEST_CASE("degenerate line impedance is rejected") {
    NetworkCase c;
    c.buses.push_back({1, BusKind::Pcc, 0, 0, {1, 1}, {0, 0}});
    c.buses.push_back({2, BusKind::Load, 0, 0, {0.95, 1.05}, {-15, 15}});
    c.lines.push_back({1, 2, 0.0, 0.0, 0.0});
    CHECK_THROWS_AS(build_admittance(c), numerical_error);
}

TEST_CASE("case files round-trip losslessly through serialization") {
    for (const char* name : {"/feeder7.json", "/sub15.json", "/sub14.json", "/nine_bus.json"}) {
        const auto c1 = load_case(read_file(kCaseDir + name));
        const auto c2 = load_case(save_case(c1));
        CHECK(case_to_json(c1) == case_to_json(c2));
    }
}
