#pragma once

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <string>

namespace esgrid {

// Thrown for malformed documents (JSON schema, missing fields, bad ids).
struct parse_error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Thrown when structurally valid input violates a model invariant.
struct validation_error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Thrown when a solver fails to converge or a system is singular.
struct numerical_error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Thrown when an argument is outside an operation's mathematical domain.
struct domain_error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

inline constexpr double pi = 3.14159265358979323846;

inline double deg2rad(double d) { return d * pi / 180.0; }
inline double rad2deg(double r) { return r * 180.0 / pi; }

// Closed interval [lo, hi].
struct Interval {
    double lo = 0.0;
    double hi = 0.0;

    bool contains(double x) const { return x >= lo && x <= hi; }
    double clamp(double x) const { return std::min(std::max(x, lo), hi); }
    double width() const { return hi - lo; }
    bool ordered() const { return lo <= hi; }
};

}  // namespace esgrid
