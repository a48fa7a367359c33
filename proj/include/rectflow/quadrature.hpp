#pragma once

#include <cmath>
#include <map>
#include <mutex>
#include <utility>

#include "rectflow/core.hpp"

namespace rectflow::quadrature {

struct Rule {
    Vec nodes;    // on [-1, 1]
    Vec weights;  // sum to 2
};

/// Gauss-Legendre rule of order n, computed by Newton iteration on P_n and
/// cached. Exact for polynomials of degree <= 2n - 1.
inline const Rule& gauss_legendre(int n) {
    static std::map<int, Rule> cache;
    static std::mutex mu;
    std::lock_guard<std::mutex> lock(mu);
    auto it = cache.find(n);
    if (it != cache.end()) return it->second;

    Rule r;
    r.nodes.resize(n);
    r.weights.resize(n);
    const int m = (n + 1) / 2;
    for (int i = 0; i < m; ++i) {
        // Chebyshev-based initial guess for the i-th positive root.
        double x = std::cos(M_PI * (i + 0.75) / (n + 0.5));
        double pp = 0.0;
        for (int iter = 0; iter < 100; ++iter) {
            double p0 = 1.0, p1 = 0.0;
            for (int k = 0; k < n; ++k) {
                const double p2 = p1;
                p1 = p0;
                p0 = ((2.0 * k + 1.0) * x * p1 - k * p2) / (k + 1.0);
            }
            pp = n * (x * p0 - p1) / (x * x - 1.0);
            const double dx = p0 / pp;
            x -= dx;
            if (std::abs(dx) < 1e-15) break;
        }
        const double w = 2.0 / ((1.0 - x * x) * pp * pp);
        r.nodes[i] = -x;
        r.nodes[n - 1 - i] = x;
        r.weights[i] = w;
        r.weights[n - 1 - i] = w;
    }
    if (n % 2 == 1) r.nodes[n / 2] = 0.0;
    return cache.emplace(n, std::move(r)).first->second;
}

/// Nodes and weights mapped from [-1, 1] to [a, b].
inline std::pair<Vec, Vec> on_interval(int n, double a, double b) {
    const Rule& r = gauss_legendre(n);
    const double mid = 0.5 * (a + b), half = 0.5 * (b - a);
    Vec nodes = (r.nodes.array() * half + mid).matrix();
    Vec weights = r.weights * half;
    return {std::move(nodes), std::move(weights)};
}

/// Composite Simpson rule over a uniform grid of values; the grid must have an
/// odd number of points (even interval count). Falls back to trapezoid when it
/// does not.
inline double simpson_uniform(const Vec& values, double step) {
    const Eigen::Index n = values.size();
    if (n < 2) return 0.0;
    if (n % 2 == 0) {
        double acc = 0.5 * (values[0] + values[n - 1]);
        for (Eigen::Index i = 1; i + 1 < n; ++i) acc += values[i];
        return acc * step;
    }
    double acc = values[0] + values[n - 1];
    for (Eigen::Index i = 1; i + 1 < n; ++i) acc += values[i] * (i % 2 == 1 ? 4.0 : 2.0);
    return acc * step / 3.0;
}

}  // namespace rectflow::quadrature
