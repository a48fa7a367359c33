#pragma once

#include <algorithm>
#include <cmath>
#include <utility>
#include <vector>

#include "rectflow/core.hpp"
#include "rectflow/errors.hpp"
#include "rectflow/geometry.hpp"
#include "rectflow/quadrature.hpp"

namespace rectflow::kde {

enum class KernelFamily { gaussian, epanechnikov, uniform_ball };

struct KernelSpec {
    KernelFamily family = KernelFamily::gaussian;
    int order_hint = 1;
};

namespace detail {

inline double unit_ball_volume(int d) {
    return std::pow(M_PI, 0.5 * d) / std::tgamma(0.5 * d + 1.0);
}

}  // namespace detail

/// Kernel value K(u) on R^d; each family integrates to one, and the compactly
/// supported families live on the unit ball.
inline double kernel_value(const KernelSpec& k, const Vec& u) {
    const int d = static_cast<int>(u.size());
    const double r2 = u.squaredNorm();
    switch (k.family) {
        case KernelFamily::gaussian:
            return std::pow(2.0 * M_PI, -0.5 * d) * std::exp(-0.5 * r2);
        case KernelFamily::epanechnikov:
            if (r2 >= 1.0) return 0.0;
            return (d + 2.0) / (2.0 * detail::unit_ball_volume(d)) * (1.0 - r2);
        case KernelFamily::uniform_ball:
            return r2 <= 1.0 ? 1.0 / detail::unit_ball_volume(d) : 0.0;
    }
    return 0.0;
}

/// log K(u) for the Gaussian family (used by the streaming log-space sums).
inline double gaussian_log_kernel(const Vec& u) {
    return -0.5 * u.squaredNorm() - 0.5 * u.size() * std::log(2.0 * M_PI);
}

/// Standard kernel density estimate (n h^d)^{-1} sum_i K((X_i - x)/h).
inline double kde_eval(const SampleSet& samples, const KernelSpec& kernel, double h,
                       const Vec& x) {
    if (h <= 0.0) throw ParameterError("kde_eval: bandwidth must be positive");
    const Eigen::Index n = samples.n();
    const int d = static_cast<int>(samples.dim());
    double acc = 0.0;
    for (Eigen::Index i = 0; i < n; ++i)
        acc += kernel_value(kernel, (samples.data.row(i).transpose() - x) / h);
    return acc / (static_cast<double>(n) * std::pow(h, d));
}

// ---- Boundary-corrected order-m kernels --------------------------------------

/// Multi-indices alpha with 1 <= |alpha| <= m in graded order, ties broken by
/// the first differing index (smaller entry first).
inline std::vector<std::vector<int>> monomial_indices(int dim, int m) {
    std::vector<std::vector<int>> out;
    // enumerate all alpha with |alpha| = deg; the recursion already emits the
    // lexicographic order that the first-differing-index tie-break demands
    for (int deg = 1; deg <= m; ++deg) {
        std::vector<int> cur(dim, 0);
        auto rec = [&](auto&& self, int pos, int remaining) -> void {
            if (pos == dim - 1) {
                cur[pos] = remaining;
                out.push_back(cur);
                return;
            }
            for (int v = 0; v <= remaining; ++v) {
                cur[pos] = v;
                self(self, pos + 1, remaining - v);
            }
        };
        rec(rec, 0, deg);
    }
    return out;
}

/// Order-m corrected kernel on V_{z,h} = (Omega - z) inters B(0, h), stored with
/// its quadrature (nodes, weights, values) and its polynomial coefficients.
///
/// The kernel is the residual of regressing the indicator of V_{z,h} on the
/// monomials of total degree 1..m (in u/h, for conditioning), normalized so its
/// zeroth moment equals Vol(V_{z,h}). It is a polynomial of degree <= m on
/// V_{z,h}, evaluated exactly from the coefficients.
struct BoundaryKernel {
    geometry::ConvexBody body;
    Vec z;
    double h = 0.0;
    int m = 1;
    Mat nodes;     // quadrature nodes u in V_{z,h}, one row each
    Vec weights;   // matching tensor Gauss-Legendre weights
    Vec values;    // kernel values at the nodes
    double vol = 0.0;

    std::vector<std::vector<int>> alphas;  // monomial multi-indices
    double coef0 = 1.0;                    // constant coefficient
    Vec coef;                              // coefficients on the scaled monomials

    double kappa_max = 0.0;  // max |K| over the nodes

    /// Evaluate the kernel polynomial at u; zero outside V_{z,h}.
    double operator()(const Vec& u) const {
        if (u.norm() > h + geometry::kMembershipTol) return 0.0;
        if (!geometry::contains(body, z + u)) return 0.0;
        double acc = coef0;
        for (std::size_t a = 0; a < alphas.size(); ++a) {
            double mono = 1.0;
            for (int j = 0; j < static_cast<int>(u.size()); ++j)
                for (int rep = 0; rep < alphas[a][static_cast<std::size_t>(j)]; ++rep)
                    mono *= u[j] / h;
            acc += coef[static_cast<Eigen::Index>(a)] * mono;
        }
        return acc;
    }
};

inline BoundaryKernel boundary_kernel_construct(const geometry::ConvexBody& body,
                                                const Vec& z, double h, int m,
                                                int nodes_per_axis = 0) {
    if (h <= 0.0) throw ParameterError("boundary_kernel_construct: h must be positive");
    if (m < 1) throw ParameterError("boundary_kernel_construct: m must be >= 1");
    if (!geometry::contains(body, z))
        throw DomainError("boundary_kernel_construct: z outside body");
    const int d = body.dim();
    if (nodes_per_axis <= 0) nodes_per_axis = std::max(2 * m + 2, 8);

    // Tensor Gauss-Legendre grid on the per-axis intersection of the body's
    // bounding box (shifted by z) with [-h, h], masked by exact membership.
    const geometry::StInterval bb = geometry::bounding_box(body);
    std::vector<Vec> axis_nodes(static_cast<std::size_t>(d));
    std::vector<Vec> axis_weights(static_cast<std::size_t>(d));
    for (int j = 0; j < d; ++j) {
        const double lo = std::max(bb.a[j] - z[j], -h);
        const double hi = std::min(bb.b[j] - z[j], h);
        if (hi <= lo)
            throw DegenerateRegionError("boundary_kernel_construct: empty axis interval");
        auto [nd, wt] = quadrature::on_interval(nodes_per_axis, lo, hi);
        axis_nodes[static_cast<std::size_t>(j)] = std::move(nd);
        axis_weights[static_cast<std::size_t>(j)] = std::move(wt);
    }

    std::vector<Vec> kept_nodes;
    std::vector<double> kept_weights;
    std::vector<int> idx(static_cast<std::size_t>(d), 0);
    Vec u(d);
    while (true) {
        double w = 1.0;
        for (int j = 0; j < d; ++j) {
            u[j] = axis_nodes[static_cast<std::size_t>(j)][idx[static_cast<std::size_t>(j)]];
            w *= axis_weights[static_cast<std::size_t>(j)][idx[static_cast<std::size_t>(j)]];
        }
        if (u.norm() <= h + geometry::kMembershipTol && geometry::contains(body, z + u)) {
            kept_nodes.push_back(u);
            kept_weights.push_back(w);
        }
        int j = d - 1;
        for (; j >= 0; --j) {
            if (++idx[static_cast<std::size_t>(j)] < nodes_per_axis) break;
            idx[static_cast<std::size_t>(j)] = 0;
        }
        if (j < 0) break;
    }
    const auto n_nodes = kept_nodes.size();
    if (n_nodes < static_cast<std::size_t>(std::pow(m + 2.0, d)))
        throw DegenerateRegionError("boundary_kernel_construct: too few nodes after clipping");

    BoundaryKernel bk{body, z, h, m, Mat(), Vec(), Vec(), 0.0, {}, 1.0, Vec(), 0.0};
    bk.alphas = monomial_indices(d, m);
    const auto p = bk.alphas.size();
    bk.nodes.resize(static_cast<Eigen::Index>(n_nodes), d);
    bk.weights.resize(static_cast<Eigen::Index>(n_nodes));
    // Moment system in the scaled monomials (u/h)^alpha.
    Mat phi(static_cast<Eigen::Index>(n_nodes), static_cast<Eigen::Index>(p));
    for (std::size_t i = 0; i < n_nodes; ++i) {
        bk.nodes.row(static_cast<Eigen::Index>(i)) = kept_nodes[i].transpose();
        bk.weights[static_cast<Eigen::Index>(i)] = kept_weights[i];
        for (std::size_t a = 0; a < p; ++a) {
            double mono = 1.0;
            for (int j = 0; j < d; ++j)
                for (int rep = 0; rep < bk.alphas[a][static_cast<std::size_t>(j)]; ++rep)
                    mono *= kept_nodes[i][j] / h;
            phi(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(a)) = mono;
        }
    }
    bk.vol = bk.weights.sum();
    SquareMat B = phi.transpose() * bk.weights.asDiagonal() * phi;
    Vec c = phi.transpose() * bk.weights;
    Eigen::SelfAdjointEigenSolver<SquareMat> es(B);
    const double emin = es.eigenvalues().minCoeff(), emax = es.eigenvalues().maxCoeff();
    if (emin <= 0.0 || emax / emin > 1e12)
        throw DegenerateRegionError("boundary_kernel_construct: moment matrix near-singular");
    const Vec beta = es.eigenvectors() *
                     (es.eigenvectors().transpose() * c).cwiseQuotient(es.eigenvalues());
    const double resid_mass = bk.vol - c.dot(beta);  // ||residual||^2 > 0
    if (resid_mass <= 0.0)
        throw DegenerateRegionError("boundary_kernel_construct: degenerate normalization");
    const double gamma = bk.vol / resid_mass;
    bk.coef0 = gamma;
    bk.coef = -gamma * beta;
    bk.values = gamma * (Vec::Ones(static_cast<Eigen::Index>(n_nodes)) - phi * beta);
    bk.kappa_max = bk.values.cwiseAbs().maxCoeff();
    return bk;
}

struct MomentReport {
    double zeroth_rel_err = 0.0;  // |sum w K - vol| / vol
    double max_moment = 0.0;      // max over 1 <= |alpha| <= m of normalized moments
};

/// Quadrature self-check of the defining moment conditions.
inline MomentReport kernel_moment_report(const BoundaryKernel& bk) {
    MomentReport rep;
    const double mass = bk.weights.dot(bk.values);
    rep.zeroth_rel_err = std::abs(mass - bk.vol) / bk.vol;
    for (std::size_t a = 0; a < bk.alphas.size(); ++a) {
        double mom = 0.0;
        for (Eigen::Index i = 0; i < bk.nodes.rows(); ++i) {
            double mono = 1.0;
            for (int j = 0; j < static_cast<int>(bk.nodes.cols()); ++j)
                for (int rep2 = 0; rep2 < bk.alphas[a][static_cast<std::size_t>(j)]; ++rep2)
                    mono *= bk.nodes(i, j) / bk.h;
            mom += bk.weights[i] * bk.values[i] * mono;
        }
        rep.max_moment = std::max(rep.max_moment, std::abs(mom) / bk.vol);
    }
    return rep;
}

/// Boundary-corrected density estimate (1/n) sum_i K_{z,h}(X_i - z) / Vol(V_{z,h}).
inline double boundary_kde_eval(const SampleSet& samples, const BoundaryKernel& bk) {
    const Eigen::Index n = samples.n();
    double acc = 0.0;
    for (Eigen::Index i = 0; i < n; ++i)
        acc += bk(samples.data.row(i).transpose() - bk.z);
    return acc / (static_cast<double>(n) * bk.vol);
}

inline double boundary_kde_eval(const SampleSet& samples, const geometry::ConvexBody& body,
                                double h, int m, const Vec& z) {
    return boundary_kde_eval(samples, boundary_kernel_construct(body, z, h, m));
}

}  // namespace rectflow::kde
