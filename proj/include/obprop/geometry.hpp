#pragma once

// Coupling between observables. Two feature vectors y1, y2 living at the
// same site are coupled: constraining x . y1 = k on inputs of scale s pins
// the mean of x . y2 to k * C(y1, y2) with
//   C(y1, y2) = (y1 . y2) / |y1|^2
// and confines it to the closed-form extremes below. The sampler draws
// inputs uniformly from the constraint set {x : |x| = s, x . y1 = k} so
// both facts can be checked empirically.

#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <vector>

#include <nlohmann/json.hpp>

#include "linalg.hpp"
#include "propagate.hpp"
#include "rng.hpp"

namespace obprop {

inline double coupling_coefficient(const Vector& y1, const Vector& y2) {
    const double n1sq = dot(y1, y1);
    require(n1sq > 0.0, "coupling: y1 must be nonzero");
    require(y1.size() == y2.size(), "coupling: length mismatch");
    return dot(y1, y2) / n1sq;
}

struct CouplingExtremes {
    double expectation = 0.0;
    double min = 0.0;
    double max = 0.0;
};

// Extremes of x . y2 over {|x| = s, x . y1 = k}:
//   (|y2|/|y1|) * (k cos(theta) +- sin(theta) sqrt(s^2 |y1|^2 - k^2))
// with theta the angle between y1 and y2. The expectation k * C always sits
// inside the bracket.
inline CouplingExtremes coupling_extremes(const Vector& y1, const Vector& y2,
                                          double s, double k) {
    const double n1 = norm(y1);
    const double n2 = norm(y2);
    require(n1 > 0.0 && n2 > 0.0, "coupling_extremes: zero-norm input");
    require(y1.size() == y2.size(), "coupling_extremes: length mismatch");
    require(s > 0.0, "coupling_extremes: scale must be positive");
    const double slack = s * s * n1 * n1 - k * k;
    require(slack >= -1e-12 * s * s * n1 * n1,
            "coupling_extremes: constraint set is empty (|k| > s |y1|)");
    double cos_t = dot(y1, y2) / (n1 * n2);
    cos_t = std::min(1.0, std::max(-1.0, cos_t));
    const double sin_t = std::sqrt(std::max(0.0, 1.0 - cos_t * cos_t));
    const double disc = std::sqrt(std::max(0.0, slack));
    const double ratio = n2 / n1;
    CouplingExtremes e;
    e.expectation = k * coupling_coefficient(y1, y2);
    e.min = ratio * (k * cos_t - sin_t * disc);
    e.max = ratio * (k * cos_t + sin_t * disc);
    return e;
}

// Uniform samples from {x in R^d : |x| = s, x . y1 = k}: a (d-2)-sphere of
// radius r = sqrt(s^2 - k^2/|y1|^2) centred at (k/|y1|^2) y1 in the
// complement of y1. Gaussian directions in the complement give the uniform
// distribution on that slice.
inline std::vector<Vector> sample_constrained_sphere(const Vector& y1, double s,
                                                     double k, std::size_t count,
                                                     std::uint64_t seed) {
    const std::size_t d = y1.size();
    require(d >= 2, "sample_constrained_sphere: need d >= 2");
    const double n1 = norm(y1);
    require(n1 > 0.0, "sample_constrained_sphere: y1 must be nonzero");
    require(s > 0.0, "sample_constrained_sphere: scale must be positive");
    const double r2 = s * s - (k * k) / (n1 * n1);
    require(r2 >= -1e-12 * s * s,
            "sample_constrained_sphere: constraint set is empty (|k| > s |y1|)");
    const double r = std::sqrt(std::max(0.0, r2));

    Vector center = scaled(y1, k / (n1 * n1));
    Vector unit1 = scaled(y1, 1.0 / n1);

    Rng rng(seed);
    std::vector<Vector> out;
    out.reserve(count);
    for (std::size_t i = 0; i < count; ++i) {
        Vector g;
        double gn = 0.0;
        do {
            g = rng.gaussian_vector(d);
            const double along = dot(g, unit1);
            axpy(-along, unit1, g);
            gn = norm(g);
        } while (gn < 1e-12);
        Vector x = center;
        axpy(r / gn, g, x);
        out.push_back(std::move(x));
    }
    return out;
}

struct AngleStats {
    double mean_angle = 0.0;  // radians
    double bound = 0.0;       // 2 * acos(sqrt(1 - 1/(d-1)))
    double estimate = 0.0;    // bound / 2; empirically much closer to the mean
    int d = 0;
    int trials = 0;
};

inline double ln_angle_bound(int d) {
    require(d >= 8, "ln angle bound: requires d >= 8");
    return 2.0 * std::acos(std::sqrt(1.0 - 1.0 / (static_cast<double>(d) - 1.0)));
}

// How much does the exact LayerNorm pullback rotate a direction? For random
// x0 and random n, measures the angle between n and its pulled-back feature
// (unit LN scale, eps = 0, so only the two projections act). The guarantee
// is mean < bound; the halved figure tracks observations and is reported
// alongside, not asserted.
inline AngleStats layernorm_angle_stats(int d, int trials, std::uint64_t seed) {
    require(trials > 0, "layernorm_angle_stats: trials must be positive");
    AngleStats st;
    st.d = d;
    st.trials = trials;
    st.bound = ln_angle_bound(d);
    st.estimate = 0.5 * st.bound;
    Rng rng(seed);
    const Vector ones(static_cast<std::size_t>(d), 1.0);
    double sum = 0.0;
    for (int t = 0; t < trials; ++t) {
        Vector x0 = rng.gaussian_vector(d);
        Vector n = rng.gaussian_vector(d);
        Vector y = ln_vjp_exact(x0, ones, 0.0, n);
        const double ny = norm(y);
        if (ny == 0.0) {  // measure-zero; count as the worst admissible angle
            sum += st.bound;
            continue;
        }
        double c = dot(n, y) / (norm(n) * ny);
        c = std::min(1.0, std::max(-1.0, c));
        sum += std::acos(c);
    }
    st.mean_angle = sum / trials;
    return st;
}

struct CouplingReport {
    double coupling = 0.0;
    double cosine = 0.0;
    bool has_extremes = false;
    double s = 0.0, k = 0.0;
    CouplingExtremes extremes;
};

inline CouplingReport make_coupling_report(const Vector& y1, const Vector& y2) {
    CouplingReport rep;
    rep.coupling = coupling_coefficient(y1, y2);
    rep.cosine = cosine_similarity(y1, y2);
    return rep;
}

inline nlohmann::json coupling_report_to_json(const CouplingReport& r) {
    nlohmann::json j{{"coupling", r.coupling}, {"cosine", r.cosine}};
    if (r.has_extremes) {
        j["s"] = r.s;
        j["k"] = r.k;
        j["expectation"] = r.extremes.expectation;
        j["min"] = r.extremes.min;
        j["max"] = r.extremes.max;
    }
    return j;
}

}  // namespace obprop
