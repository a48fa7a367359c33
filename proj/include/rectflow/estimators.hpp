#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>
#include <memory>
#include <optional>
#include <utility>
#include <vector>

#include "rectflow/closedform.hpp"
#include "rectflow/core.hpp"
#include "rectflow/errors.hpp"
#include "rectflow/geometry.hpp"
#include "rectflow/kde.hpp"
#include "rectflow/quadrature.hpp"

namespace rectflow::estimators {

/// Bandwidth, kernel, quadrature, endpoint, and sample-splitting choices
/// shared across the velocity estimators.
struct EstimatorConfig {
    double h = 0.3;
    kde::KernelSpec kernel{};
    double t0_endpoint = 0.05;     // hybrid / reg3 guard, in (0, 0.5)
    double split_fraction = 0.5;   // one-step sample split, in (0, 1)
    int grid_per_axis = 0;         // 0 -> 64 in d=1, 32 in d=2
    int mc_draws = 4096;           // quadrature fallback for d > 2
    std::optional<geometry::ConvexBody> body;

    void validate() const {
        if (h <= 0.0) throw ParameterError("EstimatorConfig: h must be positive");
        if (t0_endpoint <= 0.0 || t0_endpoint >= 0.5)
            throw ParameterError("EstimatorConfig: t0_endpoint must lie in (0, 0.5)");
        if (split_fraction <= 0.0 || split_fraction >= 1.0)
            throw ParameterError("EstimatorConfig: split_fraction must lie in (0, 1)");
        if (mc_draws < 1) throw ParameterError("EstimatorConfig: mc_draws must be >= 1");
    }

    int grid_nodes(int dim) const {
        if (grid_per_axis > 0) return grid_per_axis;
        return dim == 1 ? 64 : 32;
    }
};

enum class Pairing { all_pairs, index_paired };

/// Two marginal samples and how they pair up.
struct PairedData {
    SampleSet x0, x1;
    Pairing pairing = Pairing::all_pairs;

    PairedData() = default;
    PairedData(SampleSet a, SampleSet b, Pairing p)
        : x0(std::move(a)), x1(std::move(b)), pairing(p) {
        if (x0.dim() != x1.dim()) throw ParameterError("PairedData: dimension mismatch");
        if (pairing == Pairing::index_paired && x0.n() != x1.n())
            throw ParameterError("PairedData: index pairing needs equal sample sizes");
    }

    int dim() const { return static_cast<int>(x0.dim()); }
};

/// Evaluable density with optional support box, mean, and underlying sample.
struct DensityHandle {
    std::function<double(const Vec&)> pdf;
    int dim = 0;
    std::optional<std::pair<Vec, Vec>> support;  // per-axis lo, hi
    std::optional<Vec> mean;
    std::shared_ptr<const SampleSet> samples;

    double operator()(const Vec& x) const { return pdf(x); }
};

inline DensityHandle make_gaussian_density(const Vec& mean, const SquareMat& cov) {
    DensityHandle h;
    h.dim = static_cast<int>(mean.size());
    h.pdf = [mean, cov](const Vec& x) {
        return std::exp(closedform::detail::log_normal_pdf(x, mean, cov));
    };
    Vec sd = cov.diagonal().cwiseMax(1e-30).cwiseSqrt();
    h.support = {Vec(mean - 12.0 * sd), Vec(mean + 12.0 * sd)};
    h.mean = mean;
    return h;
}

inline DensityHandle make_uniform_box_density(const Vec& lo, const Vec& hi) {
    if (((hi - lo).array() <= 0.0).any())
        throw ParameterError("make_uniform_box_density: need lo < hi");
    DensityHandle h;
    h.dim = static_cast<int>(lo.size());
    const double density = 1.0 / (hi - lo).prod();
    h.pdf = [lo, hi, density](const Vec& x) {
        const bool inside = ((x - lo).array() >= -geometry::kMembershipTol).all() &&
                            ((hi - x).array() >= -geometry::kMembershipTol).all();
        return inside ? density : 0.0;
    };
    h.support = {lo, hi};
    h.mean = 0.5 * (lo + hi);
    return h;
}

inline DensityHandle make_mixture_density(const MixtureHalf& half) {
    half.validate();
    DensityHandle h;
    h.dim = half.dim();
    h.pdf = [half](const Vec& x) {
        double acc = 0.0;
        for (std::size_t i = 0; i < half.components.size(); ++i)
            acc += half.weights[static_cast<Eigen::Index>(i)] *
                   std::exp(closedform::detail::log_normal_pdf(
                       x, half.components[i].first, half.components[i].second));
        return acc;
    };
    Vec lo = Vec::Constant(h.dim, std::numeric_limits<double>::infinity());
    Vec hi = -lo;
    Vec mean = Vec::Zero(h.dim);
    for (std::size_t i = 0; i < half.components.size(); ++i) {
        const Vec sd = half.components[i].second.diagonal().cwiseMax(1e-30).cwiseSqrt();
        lo = lo.cwiseMin(half.components[i].first - 12.0 * sd);
        hi = hi.cwiseMax(half.components[i].first + 12.0 * sd);
        mean += half.weights[static_cast<Eigen::Index>(i)] * half.components[i].first;
    }
    h.support = {std::move(lo), std::move(hi)};
    h.mean = std::move(mean);
    return h;
}

inline DensityHandle make_kde_density(std::shared_ptr<const SampleSet> samples,
                                      const kde::KernelSpec& kernel, double h) {
    if (h <= 0.0) throw ParameterError("make_kde_density: bandwidth must be positive");
    DensityHandle out;
    out.dim = static_cast<int>(samples->dim());
    out.pdf = [samples, kernel, h](const Vec& x) {
        return kde::kde_eval(*samples, kernel, h, x);
    };
    const double pad = kernel.family == kde::KernelFamily::gaussian ? 12.0 * h : h;
    Vec lo = samples->data.colwise().minCoeff().transpose().array() - pad;
    Vec hi = samples->data.colwise().maxCoeff().transpose().array() + pad;
    out.support = {std::move(lo), std::move(hi)};
    out.mean = samples->data.colwise().mean().transpose();
    out.samples = std::move(samples);
    return out;
}

// ---- Kernel-weighted ratio machinery ------------------------------------------

namespace detail {

constexpr double kDenominatorFloor = 1e-300;

/// Streaming log-sum-exp accumulator for the Gaussian-kernel ratio sums;
/// keeps the running maximum so far-field weights never underflow the ratio.
struct StreamingRatio {
    double logmax = -std::numeric_limits<double>::infinity();
    double den = 0.0;
    Vec num;

    explicit StreamingRatio(Eigen::Index d) : num(Vec::Zero(d)) {}

    void add(double logw, const Vec& y) {
        if (!(logw > -std::numeric_limits<double>::infinity())) return;
        if (logw > logmax) {
            const double scale = std::exp(logmax - logw);
            den *= scale;
            num *= scale;
            logmax = logw;
        }
        const double w = std::exp(logw - logmax);
        den += w;
        num += w * y;
    }

    /// log of the unnormalized kernel-sum denominator.
    double log_denominator() const { return logmax + std::log(den); }

    Vec ratio() const { return num / den; }
};

inline Vec sample_mean(const Mat& rows) { return rows.colwise().mean().transpose(); }

/// Nadaraya-Watson ratio over an explicit term stream. `term` is called with
/// (index) and must fill xt (feature) and y (response). Throws EmptyWindowError
/// when the kernel window carries no usable mass at z.
template <class TermFn>
Vec nw_ratio(const kde::KernelSpec& kernel, double h, const Vec& z, Eigen::Index count,
             TermFn&& term) {
    const Eigen::Index d = z.size();
    const double log_norm =
        -static_cast<double>(d) * std::log(h) - 0.5 * d * std::log(2.0 * M_PI);
    Vec xt(d), y(d);
    if (kernel.family == kde::KernelFamily::gaussian) {
        StreamingRatio acc(d);
        for (Eigen::Index i = 0; i < count; ++i) {
            term(i, xt, y);
            acc.add(-0.5 * (xt - z).squaredNorm() / (h * h), y);
        }
        if (acc.den <= 0.0 ||
            acc.log_denominator() + log_norm < std::log(kDenominatorFloor))
            throw EmptyWindowError("kernel regression: empty window");
        return acc.ratio();
    }
    double den = 0.0;
    Vec num = Vec::Zero(d);
    for (Eigen::Index i = 0; i < count; ++i) {
        term(i, xt, y);
        const double w = kde::kernel_value(kernel, (xt - z) / h);
        den += w;
        num += w * y;
    }
    if (den * std::pow(h, -static_cast<double>(d)) < kDenominatorFloor)
        throw EmptyWindowError("kernel regression: empty window");
    return num / den;
}

}  // namespace detail

// ---- Regression-based estimators ----------------------------------------------

/// Two-sample U-statistic kernel regression over all (i, j) pairs. The ratio
/// is well-defined on all of [0, 1]; at t = 0 it is the regression on X0.
inline Vec v_reg0(double t, const Vec& z, const PairedData& data,
                  const EstimatorConfig& cfg) {
    cfg.validate();
    const Eigen::Index n0 = data.x0.n(), n1 = data.x1.n();
    return detail::nw_ratio(cfg.kernel, cfg.h, z, n0 * n1,
                            [&](Eigen::Index k, Vec& xt, Vec& y) {
                                const Eigen::Index j = k / n1;  // source index
                                const Eigen::Index i = k % n1;  // target index
                                const auto x0j = data.x0.data.row(j);
                                const auto x1i = data.x1.data.row(i);
                                xt = ((1.0 - t) * x0j + t * x1i).transpose();
                                y = (x1i - x0j).transpose();
                            });
}

/// Kernel regression over one random index pairing.
inline Vec v_reg2(double t, const Vec& z, const PairedData& data,
                  const EstimatorConfig& cfg) {
    cfg.validate();
    if (data.pairing != Pairing::index_paired)
        throw ParameterError("v_reg2: needs index-paired data");
    return detail::nw_ratio(cfg.kernel, cfg.h, z, data.x0.n(),
                            [&](Eigen::Index i, Vec& xt, Vec& y) {
                                const auto x0i = data.x0.data.row(i);
                                const auto x1i = data.x1.data.row(i);
                                xt = ((1.0 - t) * x0i + t * x1i).transpose();
                                y = (x1i - x0i).transpose();
                            });
}

/// Regression of X0 on X_t: v = z/t - E[X0 | X_t = z]/t. Guarded below
/// cfg.t0_endpoint because of the explicit 1/t factor.
inline Vec v_reg3(double t, const Vec& z, const PairedData& data,
                  const EstimatorConfig& cfg) {
    cfg.validate();
    if (data.pairing != Pairing::index_paired)
        throw ParameterError("v_reg3: needs index-paired data");
    if (t < cfg.t0_endpoint)
        throw EndpointError("v_reg3: t below the endpoint guard t0");
    const Vec cond_x0 =
        detail::nw_ratio(cfg.kernel, cfg.h, z, data.x0.n(),
                         [&](Eigen::Index i, Vec& xt, Vec& y) {
                             const auto x0i = data.x0.data.row(i);
                             const auto x1i = data.x1.data.row(i);
                             xt = ((1.0 - t) * x0i + t * x1i).transpose();
                             y = x0i.transpose();
                         });
    return (z - cond_x0) / t;
}

// ---- Density-based estimator ---------------------------------------------------

/// U-statistic estimate of the X_t density at z (reg0 denominator).
inline double pt_reg0(double t, const Vec& z, const PairedData& data,
                      const kde::KernelSpec& kernel, double h) {
    const Eigen::Index n0 = data.x0.n(), n1 = data.x1.n();
    const int d = static_cast<int>(z.size());
    double acc = 0.0;
    for (Eigen::Index j = 0; j < n0; ++j)
        for (Eigen::Index i = 0; i < n1; ++i) {
            const Vec xt =
                ((1.0 - t) * data.x0.data.row(j) + t * data.x1.data.row(i)).transpose();
            acc += kde::kernel_value(kernel, (xt - z) / h);
        }
    return acc / (static_cast<double>(n0) * static_cast<double>(n1) * std::pow(h, d));
}

/// Substitution estimate of the X_t density at z: the empirical X0 average of
/// t^{-d} p1hat((z - x)/t + x).
inline double pt_den_substitution(double t, const Vec& z, const SampleSet& x0,
                                  const DensityHandle& p1hat) {
    const Eigen::Index n = x0.n();
    const int d = static_cast<int>(z.size());
    double acc = 0.0;
    for (Eigen::Index i = 0; i < n; ++i) {
        const Vec xi = x0.data.row(i).transpose();
        acc += p1hat((z - xi) / t + xi);
    }
    return acc / (static_cast<double>(n) * std::pow(t, d));
}

/// Numerator f_t(z), denominator p_t(z), and quadrature-node extremes of the
/// delta-representation of the velocity.
struct DenParts {
    Vec f;
    double p = 0.0;
    std::optional<std::pair<Vec, Vec>> node_range;  // per-coordinate min/max
};

namespace detail {

struct AxisWindow {
    Vec lo, hi;
};

inline AxisWindow delta_window(double t, const Vec& z, const Vec& box_lo0,
                               const Vec& box_hi0, const Vec& box_lo1, const Vec& box_hi1) {
    AxisWindow w;
    w.lo = ((z - box_hi0) / t).cwiseMax((box_lo1 - z) / (1.0 - t));
    w.hi = ((z - box_lo0) / t).cwiseMin((box_hi1 - z) / (1.0 - t));
    return w;
}

template <class Integrand>
DenParts integrate_delta(const AxisWindow& window, int grid_nodes, int mc_draws,
                         const std::function<bool(const Vec&)>& mask,
                         Integrand&& r) {
    const Eigen::Index d = window.lo.size();
    if (((window.hi - window.lo).array() <= 0.0).any())
        throw EmptyWindowError("v_den: empty displacement window");
    DenParts out;
    out.f = Vec::Zero(d);
    Vec node_min = Vec::Constant(d, std::numeric_limits<double>::infinity());
    Vec node_max = -node_min;
    auto accumulate = [&](const Vec& delta, double w) {
        if (mask && !mask(delta)) return;
        const double val = r(delta);
        out.p += w * val;
        out.f += w * val * delta;
        if (val > 0.0) {
            node_min = node_min.cwiseMin(delta);
            node_max = node_max.cwiseMax(delta);
        }
    };
    if (d <= 2) {
        std::vector<Vec> nodes(static_cast<std::size_t>(d)), wts(static_cast<std::size_t>(d));
        for (Eigen::Index j = 0; j < d; ++j) {
            auto [nd, wt] = quadrature::on_interval(grid_nodes, window.lo[j], window.hi[j]);
            nodes[static_cast<std::size_t>(j)] = std::move(nd);
            wts[static_cast<std::size_t>(j)] = std::move(wt);
        }
        Vec delta(d);
        if (d == 1) {
            for (int i = 0; i < grid_nodes; ++i) {
                delta[0] = nodes[0][i];
                accumulate(delta, wts[0][i]);
            }
        } else {
            for (int i = 0; i < grid_nodes; ++i)
                for (int j = 0; j < grid_nodes; ++j) {
                    delta[0] = nodes[0][i];
                    delta[1] = nodes[1][j];
                    accumulate(delta, wts[0][i] * wts[1][j]);
                }
        }
    } else {
        // Monte Carlo on the bounding window with a fixed internal stream so
        // repeated evaluations are deterministic.
        Philox gen(RngSpec{0x7ec7f10fULL, 0});
        const double cell = (window.hi - window.lo).prod() / mc_draws;
        Vec delta(d);
        for (int i = 0; i < mc_draws; ++i) {
            for (Eigen::Index j = 0; j < d; ++j)
                delta[j] = gen.uniform(window.lo[j], window.hi[j]);
            accumulate(delta, cell);
        }
    }
    if (!(out.p >= kDenominatorFloor))
        throw EmptyWindowError("v_den: vanishing denominator");
    out.node_range = {std::move(node_min), std::move(node_max)};
    return out;
}

}  // namespace detail

/// f_t(z) and p_t(z) for the density-based velocity. Bounded case: quadrature
/// of the delta representation over S_t(z). Unbounded with samples on the
/// stable side: the substitution representation with max{t, 1-t} in the
/// exponent. Unbounded with plain densities: quadrature over the support
/// window.
inline DenParts den_numerator_denominator(double t, const Vec& z, const DensityHandle& p0hat,
                                          const DensityHandle& p1hat,
                                          const EstimatorConfig& cfg) {
    cfg.validate();
    if (t <= 0.0 || t >= 1.0)
        throw DegenerateTimeError("den_numerator_denominator: t must lie in (0,1)");
    const Eigen::Index d = z.size();
    auto integrand = [&](const Vec& delta) {
        return p0hat(z - t * delta) * p1hat(z + (1.0 - t) * delta);
    };
    if (cfg.body) {
        const geometry::ConvexBody& body = *cfg.body;
        if (!geometry::contains(body, z))
            throw DomainError("den_numerator_denominator: z outside the body");
        detail::AxisWindow window;
        if (body.is_box()) {
            const auto iv = geometry::st_interval_box(body, t, z);
            window = {iv.a, iv.b};
        } else {
            const auto bb = geometry::bounding_box(body);
            window = detail::delta_window(t, z, bb.a, bb.b, bb.a, bb.b);
        }
        std::function<bool(const Vec&)> mask;
        if (!body.is_box())
            mask = [&body, t, &z](const Vec& delta) {
                return geometry::st_membership(body, t, z, delta);
            };
        return detail::integrate_delta(window, cfg.grid_nodes(static_cast<int>(d)),
                                       cfg.mc_draws, mask, integrand);
    }
    const SampleSet* subst = t >= 0.5 ? p0hat.samples.get() : p1hat.samples.get();
    if (subst) {
        DenParts out;
        out.f = Vec::Zero(d);
        const Eigen::Index n = subst->n();
        const double scale =
            std::pow(t >= 0.5 ? t : 1.0 - t, -static_cast<double>(d)) / static_cast<double>(n);
        for (Eigen::Index i = 0; i < n; ++i) {
            const Vec xi = subst->data.row(i).transpose();
            if (t >= 0.5) {
                const Vec delta = (z - xi) / t;
                const double val = p1hat(z + (1.0 - t) * delta);
                out.p += scale * val;
                out.f += scale * val * delta;
            } else {
                const Vec delta = (xi - z) / (1.0 - t);
                const double val = p0hat(z - t * delta);
                out.p += scale * val;
                out.f += scale * val * delta;
            }
        }
        if (!(out.p >= detail::kDenominatorFloor))
            throw EmptyWindowError("v_den: vanishing denominator");
        return out;
    }
    if (!p0hat.support || !p1hat.support)
        throw ParameterError("den_numerator_denominator: density handles need support boxes");
    const auto window = detail::delta_window(t, z, p0hat.support->first, p0hat.support->second,
                                             p1hat.support->first, p1hat.support->second);
    return detail::integrate_delta(window, cfg.grid_nodes(static_cast<int>(d)), cfg.mc_draws,
                                   {}, integrand);
}

/// Density-based velocity estimate f_t(z) / p_t(z); exact endpoint formulas at
/// t in {0, 1} from the handles' means.
inline Vec v_den(double t, const Vec& z, const DensityHandle& p0hat,
                 const DensityHandle& p1hat, const EstimatorConfig& cfg) {
    if (t == 0.0 || t == 1.0) {
        const DensityHandle& h = t == 0.0 ? p1hat : p0hat;
        Vec mean;
        if (h.mean)
            mean = *h.mean;
        else if (h.samples)
            mean = detail::sample_mean(h.samples->data);
        else
            throw ParameterError("v_den: endpoint needs a mean or samples");
        return t == 0.0 ? Vec(mean - z) : Vec(z - mean);
    }
    const DenParts parts = den_numerator_denominator(t, z, p0hat, p1hat, cfg);
    return parts.f / parts.p;
}

// ---- Substitution estimators ---------------------------------------------------

/// Substitution estimator using X0 samples and a density estimate of p1.
/// Stable for t >= 1/2 (variance factor t^{-d}).
inline Vec v_sub3(double t, const Vec& z, const SampleSet& x0, const DensityHandle& p1hat,
                  const EstimatorConfig& cfg) {
    cfg.validate();
    if (t <= 0.0 || t >= 1.0) throw DegenerateTimeError("v_sub3: t must lie in (0,1)");
    const Eigen::Index n = x0.n(), d = z.size();
    double den = 0.0;
    Vec num = Vec::Zero(d);
    for (Eigen::Index i = 0; i < n; ++i) {
        const Vec xi = x0.data.row(i).transpose();
        const Vec delta = (z - xi) / t;
        const double w = p1hat(z + (1.0 - t) * delta);
        den += w;
        num += w * delta;
    }
    const double scale = std::pow(t, -static_cast<double>(d)) / static_cast<double>(n);
    if (!(den * scale >= detail::kDenominatorFloor))
        throw EmptyWindowError("v_sub3: vanishing denominator");
    return num / den;
}

/// Mirror of v_sub3: X1 samples and a density estimate of p0; stable for t <= 1/2.
inline Vec v_sub4(double t, const Vec& z, const SampleSet& x1, const DensityHandle& p0hat,
                  const EstimatorConfig& cfg) {
    cfg.validate();
    if (t <= 0.0 || t >= 1.0) throw DegenerateTimeError("v_sub4: t must lie in (0,1)");
    const Eigen::Index n = x1.n(), d = z.size();
    double den = 0.0;
    Vec num = Vec::Zero(d);
    for (Eigen::Index i = 0; i < n; ++i) {
        const Vec yi = x1.data.row(i).transpose();
        const Vec delta = (yi - z) / (1.0 - t);
        const double w = p0hat(z - t * delta);
        den += w;
        num += w * delta;
    }
    const double scale = std::pow(1.0 - t, -static_cast<double>(d)) / static_cast<double>(n);
    if (!(den * scale >= detail::kDenominatorFloor))
        throw EmptyWindowError("v_sub4: vanishing denominator");
    return num / den;
}

// ---- Semiparametric one-step estimator ------------------------------------------

enum class InfluenceRole { phi_N0, phi_N1, phi_D0, phi_D1 };

inline Vec influence_N0(const Vec& x, double t, const Vec& z, const DensityHandle& p1hat,
                        const Vec& f_t) {
    const double d = static_cast<double>(z.size());
    const Vec delta = (z - x) / t;
    return std::pow(t, -d) * p1hat(delta + x) * delta - f_t;
}

inline Vec influence_N1(const Vec& y, double t, const Vec& z, const DensityHandle& p0hat,
                        const Vec& f_t) {
    // substituting y = z + (1-t) delta in f_t gives the displacement
    // delta = (y - z)/(1-t) and the density argument z - t delta
    const double d = static_cast<double>(z.size());
    const Vec delta = (y - z) / (1.0 - t);
    return std::pow(1.0 - t, -d) * p0hat(z - t * delta) * delta - f_t;
}

inline double influence_D0(const Vec& x, double t, const Vec& z, const DensityHandle& p1hat,
                           double p_t) {
    const double d = static_cast<double>(z.size());
    return std::pow(t, -d) * p1hat((z - x) / t + x) - p_t;
}

inline double influence_D1(const Vec& y, double t, const Vec& z, const DensityHandle& p0hat,
                           double p_t) {
    const double d = static_cast<double>(z.size());
    return std::pow(1.0 - t, -d) * p0hat((z - y) / (1.0 - t) + y) - p_t;
}

/// Role-dispatched influence evaluation; numerator roles return a d-vector,
/// denominator roles a 1-vector.
inline Vec onestep_influence(const Vec& point, InfluenceRole role, double t, const Vec& z,
                             const DensityHandle& density, const Vec& f_t, double p_t) {
    if (t <= 0.0 || t >= 1.0)
        throw DegenerateTimeError("onestep_influence: t must lie in (0,1)");
    switch (role) {
        case InfluenceRole::phi_N0: return influence_N0(point, t, z, density, f_t);
        case InfluenceRole::phi_N1: return influence_N1(point, t, z, density, f_t);
        case InfluenceRole::phi_D0: {
            Vec out(1);
            out[0] = influence_D0(point, t, z, density, p_t);
            return out;
        }
        case InfluenceRole::phi_D1: {
            Vec out(1);
            out[0] = influence_D1(point, t, z, density, p_t);
            return out;
        }
    }
    throw ParameterError("onestep_influence: bad role");
}

struct OneStepResult {
    Vec estimate;
    SquareMat variance;  // estimated covariance of the estimate
};

namespace detail {

struct SplitData {
    SampleSet fit0, fit1, eval0, eval1;
};

inline SplitData split(const PairedData& data, double fraction) {
    const Eigen::Index n = std::min(data.x0.n(), data.x1.n());
    const Eigen::Index nfit = static_cast<Eigen::Index>(std::floor(fraction * n));
    if (nfit < 2 || n - nfit < 2)
        throw InsufficientDataError("v_onestep: split leaves fewer than 2 observations");
    auto take = [](const Mat& m, Eigen::Index from, Eigen::Index count, SampleLabel l) {
        return SampleSet(m.middleRows(from, count), l);
    };
    return {take(data.x0.data, 0, nfit, SampleLabel::source),
            take(data.x1.data, 0, nfit, SampleLabel::target),
            take(data.x0.data, nfit, n - nfit, SampleLabel::source),
            take(data.x1.data, nfit, n - nfit, SampleLabel::target)};
}

}  // namespace detail

/// One-step estimator with an explicit density pair (already fitted on an
/// independent sample): plug-in + averaged influence corrections, plus the
/// influence-based variance estimate.
inline OneStepResult v_onestep_with_densities(double t, const Vec& z,
                                              const SampleSet& eval0, const SampleSet& eval1,
                                              const DensityHandle& p0hat,
                                              const DensityHandle& p1hat,
                                              const EstimatorConfig& cfg) {
    if (t <= 0.0 || t >= 1.0)
        throw DegenerateTimeError("v_onestep: t must lie in (0,1)");
    const Eigen::Index d = z.size();
    const DenParts parts = den_numerator_denominator(t, z, p0hat, p1hat, cfg);
    const Vec v_pi = parts.f / parts.p;

    const Eigen::Index n0 = eval0.n(), n1 = eval1.n();
    Mat phi0(n0, d), phi1(n1, d);
    for (Eigen::Index i = 0; i < n0; ++i) {
        const Vec x = eval0.data.row(i).transpose();
        const Vec num = influence_N0(x, t, z, p1hat, parts.f);
        const double den = influence_D0(x, t, z, p1hat, parts.p);
        phi0.row(i) = ((num - v_pi * den) / parts.p).transpose();
    }
    for (Eigen::Index i = 0; i < n1; ++i) {
        const Vec y = eval1.data.row(i).transpose();
        const Vec num = influence_N1(y, t, z, p0hat, parts.f);
        const double den = influence_D1(y, t, z, p0hat, parts.p);
        phi1.row(i) = ((num - v_pi * den) / parts.p).transpose();
    }
    OneStepResult res;
    res.estimate = v_pi + detail::sample_mean(phi0) + detail::sample_mean(phi1);
    auto cov_of = [](const Mat& rows) {
        const Vec mu = detail::sample_mean(rows);
        const Mat centered = rows.rowwise() - mu.transpose();
        return SquareMat((centered.transpose() * centered) /
                         static_cast<double>(rows.rows() - 1));
    };
    res.variance = cov_of(phi0) / static_cast<double>(n0) + cov_of(phi1) / static_cast<double>(n1);
    return res;
}

/// One-step estimator with a single sample split: the first split_fraction of
/// the data fits the kernel densities, the rest averages influence terms.
inline OneStepResult v_onestep(double t, const Vec& z, const PairedData& data,
                               const EstimatorConfig& cfg) {
    cfg.validate();
    auto sp = detail::split(data, cfg.split_fraction);
    const auto p0hat = make_kde_density(
        std::make_shared<SampleSet>(std::move(sp.fit0)), cfg.kernel, cfg.h);
    const auto p1hat = make_kde_density(
        std::make_shared<SampleSet>(std::move(sp.fit1)), cfg.kernel, cfg.h);
    return v_onestep_with_densities(t, z, sp.eval0, sp.eval1, p0hat, p1hat, cfg);
}

/// Hybrid estimator: exact sample-mean endpoint formulas on [0, t0] and
/// [1-t0, 1], one-step in between. The dispatch is the literal piecewise rule,
/// so the estimate need not be continuous at t0.
inline Vec v_hybrid(double t, const Vec& z, const PairedData& data,
                    const EstimatorConfig& cfg) {
    cfg.validate();
    if (t <= cfg.t0_endpoint)
        return Vec(detail::sample_mean(data.x1.data) - z);
    if (t >= 1.0 - cfg.t0_endpoint)
        return Vec(z - detail::sample_mean(data.x0.data));
    return v_onestep(t, z, data, cfg).estimate;
}

// ---- Smoothed transport ----------------------------------------------------------

namespace detail {

inline double smoothing_quadratic(double t) { return 2.0 * t * t - 2.0 * t + 1.0; }

}  // namespace detail

/// Closed form of the Gaussian-smoothing pair integrals
///   h(u,v)      = int delta K_sigma(z - t delta - u) K_sigma(z + (1-t) delta - v) d delta
///   htilde(u,v) = int       K_sigma(z - t delta - u) K_sigma(z + (1-t) delta - v) d delta
/// obtained by completing the square in delta: with c = 2t^2 - 2t + 1,
///   htilde = (2 pi sigma^2)^{-d} (2 pi sigma^2 / c)^{d/2}
///            exp(-||z - (1-t)u - tv||^2 / (2 sigma^2 c))
/// and h = m htilde where m = (t(z - u) - (1-t)(z - v)) / c.
struct SmoothedPairIntegrals {
    Vec numerator;
    double denominator = 0.0;
};

inline SmoothedPairIntegrals smoothed_pair_integrals(double t, const Vec& z, const Vec& u,
                                                     const Vec& v, double sigma) {
    if (sigma <= 0.0) throw ParameterError("smoothed_pair_integrals: sigma must be positive");
    const double d = static_cast<double>(z.size());
    const double c = detail::smoothing_quadratic(t);
    const Vec resid = z - (1.0 - t) * u - t * v;
    const double htilde = std::pow(2.0 * M_PI * sigma * sigma, -d) *
                          std::pow(2.0 * M_PI * sigma * sigma / c, 0.5 * d) *
                          std::exp(-resid.squaredNorm() / (2.0 * sigma * sigma * c));
    const Vec m = (t * (z - u) - (1.0 - t) * (z - v)) / c;
    return {m * htilde, htilde};
}

/// Smoothed-transport velocity: the ratio of the two-sample U-statistics of the
/// pair integrals above, accumulated in log space.
inline Vec v_smoothed(double t, const Vec& z, const PairedData& data, double sigma) {
    if (sigma <= 0.0) throw ParameterError("v_smoothed: sigma must be positive");
    const Eigen::Index n0 = data.x0.n(), n1 = data.x1.n(), d = data.dim();
    const double c = detail::smoothing_quadratic(t);
    detail::StreamingRatio acc(d);
    for (Eigen::Index j = 0; j < n0; ++j) {
        const Vec u = data.x0.data.row(j).transpose();
        for (Eigen::Index i = 0; i < n1; ++i) {
            const Vec v = data.x1.data.row(i).transpose();
            const double logw =
                -(z - (1.0 - t) * u - t * v).squaredNorm() / (2.0 * sigma * sigma * c);
            acc.add(logw, (t * (z - u) - (1.0 - t) * (z - v)) / c);
        }
    }
    if (acc.den <= 0.0) throw EmptyWindowError("v_smoothed: empty window");
    return acc.ratio();
}

// ---- Linear / L1-penalized linear velocity --------------------------------------

enum class PenaltyKind { none, l1_cv };

struct Penalty {
    PenaltyKind kind = PenaltyKind::none;
    int cv_folds = 5;
    int lambda_count = 25;
};

struct LinearVelocityModel {
    double t = 0.0;
    Vec intercept;
    SquareMat slope;  // v = intercept + slope * x
    double lambda = 0.0;
    bool converged = true;
};

struct LinearVelocityField {
    std::vector<LinearVelocityModel> models;  // ascending in t
    int dim = 0;

    const LinearVelocityModel& nearest(double t) const {
        std::size_t best = 0;
        double bestdist = std::numeric_limits<double>::infinity();
        for (std::size_t i = 0; i < models.size(); ++i) {
            const double dist = std::abs(models[i].t - t);
            if (dist < bestdist) {
                bestdist = dist;
                best = i;
            }
        }
        return models[best];
    }

    VelocityField field() const {
        VelocityField f;
        f.dim = dim;
        auto self = *this;
        f.eval = [self](double t, const Vec& z) {
            const auto& m = self.nearest(t);
            return Vec(m.intercept + m.slope * z);
        };
        f.jacobian = [self](double t, const Vec&) { return self.nearest(t).slope; };
        return f;
    }

    bool all_converged() const {
        return std::all_of(models.begin(), models.end(),
                           [](const auto& m) { return m.converged; });
    }
};

namespace detail {

/// Cyclic coordinate descent for the lasso in Gram form. gram = X^T X / n,
/// corr = X^T y / n (centered inputs). Returns false if the sweep cap is hit.
inline bool lasso_cd(const SquareMat& gram, const Vec& corr, double lambda, Vec& beta) {
    const Eigen::Index d = corr.size();
    Vec q = gram * beta;
    for (int sweep = 0; sweep < 10000; ++sweep) {
        double max_change = 0.0;
        for (Eigen::Index k = 0; k < d; ++k) {
            const double gk = gram(k, k);
            if (gk <= 0.0) continue;
            const double rho = corr[k] - q[k] + gk * beta[k];
            const double next =
                std::copysign(std::max(std::abs(rho) - lambda, 0.0), rho) / gk;
            const double change = next - beta[k];
            if (change != 0.0) {
                q += gram.col(k) * change;
                beta[k] = next;
                max_change = std::max(max_change, std::abs(change));
            }
        }
        if (max_change < 1e-8) return true;
    }
    return false;
}

struct CenteredDesign {
    Mat xc, yc;
    Vec xmean, ymean;
};

inline CenteredDesign center(const Mat& x, const Mat& y) {
    CenteredDesign c;
    c.xmean = x.colwise().mean().transpose();
    c.ymean = y.colwise().mean().transpose();
    c.xc = x.rowwise() - c.xmean.transpose();
    c.yc = y.rowwise() - c.ymean.transpose();
    return c;
}

}  // namespace detail

/// Per-t affine fit of Delta = X1 - X0 on X_t: ordinary least squares with a
/// 1e-10 ridge jitter, or the L1 path with K-fold cross-validated lambda.
/// Field evaluation at arbitrary t uses the nearest grid model.
inline LinearVelocityField fit_linear_velocity(const PairedData& data,
                                               const std::vector<double>& t_grid,
                                               const Penalty& penalty = {}) {
    if (data.pairing != Pairing::index_paired)
        throw ParameterError("fit_linear_velocity: needs index-paired data");
    if (t_grid.empty()) throw ParameterError("fit_linear_velocity: empty t grid");
    const Eigen::Index n = data.x0.n();
    const Eigen::Index d = data.dim();
    if (penalty.kind == PenaltyKind::none && n < d + 2)
        throw InsufficientDataError("fit_linear_velocity: need n >= d + 2 for OLS");

    const Mat delta = data.x1.data - data.x0.data;
    LinearVelocityField out;
    out.dim = static_cast<int>(d);
    for (double t : t_grid) {
        const Mat xt = (1.0 - t) * data.x0.data + t * data.x1.data;
        LinearVelocityModel model;
        model.t = t;
        if (penalty.kind == PenaltyKind::none) {
            Mat g(n, d + 1);
            g.col(0).setOnes();
            g.rightCols(d) = xt;
            const SquareMat gtg =
                g.transpose() * g + 1e-10 * SquareMat::Identity(d + 1, d + 1);
            const Mat theta = gtg.ldlt().solve(g.transpose() * delta);
            if (!theta.allFinite()) throw FitError("fit_linear_velocity: singular system");
            model.intercept = theta.row(0).transpose();
            model.slope = theta.bottomRows(d).transpose();
        } else {
            const auto cd = detail::center(xt, delta);
            const SquareMat gram_full = cd.xc.transpose() * cd.xc / static_cast<double>(n);
            const Mat corr_full = cd.xc.transpose() * cd.yc / static_cast<double>(n);
            const double lambda_max = corr_full.cwiseAbs().maxCoeff();
            if (lambda_max <= 0.0) throw FitError("fit_linear_velocity: degenerate design");
            std::vector<double> lambdas(static_cast<std::size_t>(penalty.lambda_count));
            for (int i = 0; i < penalty.lambda_count; ++i) {
                const double frac =
                    penalty.lambda_count == 1
                        ? 0.0
                        : static_cast<double>(i) / (penalty.lambda_count - 1);
                // log-spaced from 1e1*lambda_max down to 1e-4*lambda_max
                lambdas[static_cast<std::size_t>(i)] =
                    lambda_max * std::pow(10.0, 1.0 - 5.0 * frac);
            }
            const int folds = penalty.cv_folds;
            Vec cv_mse = Vec::Zero(penalty.lambda_count);
            bool converged = true;
            for (int f = 0; f < folds; ++f) {
                std::vector<Eigen::Index> train, test;
                for (Eigen::Index i = 0; i < n; ++i)
                    (i % folds == f ? test : train).push_back(i);
                if (train.size() < 2 || test.empty()) continue;
                Mat xtr(train.size(), d), ytr(train.size(), d);
                for (std::size_t i = 0; i < train.size(); ++i) {
                    xtr.row(static_cast<Eigen::Index>(i)) = xt.row(train[i]);
                    ytr.row(static_cast<Eigen::Index>(i)) = delta.row(train[i]);
                }
                const auto cdt = detail::center(xtr, ytr);
                const SquareMat gram =
                    cdt.xc.transpose() * cdt.xc / static_cast<double>(train.size());
                const Mat corr =
                    cdt.xc.transpose() * cdt.yc / static_cast<double>(train.size());
                Mat beta = Mat::Zero(d, d);  // warm-started across the path
                for (int li = 0; li < penalty.lambda_count; ++li) {
                    for (Eigen::Index j = 0; j < d; ++j) {
                        Vec bj = beta.col(j);
                        if (!detail::lasso_cd(gram, corr.col(j), lambdas[static_cast<std::size_t>(li)], bj))
                            converged = false;
                        beta.col(j) = bj;
                    }
                    double mse = 0.0;
                    for (Eigen::Index i : test) {
                        const Vec pred = cdt.ymean + beta.transpose() *
                                             (xt.row(i).transpose() - cdt.xmean);
                        mse += (delta.row(i).transpose() - pred).squaredNorm();
                    }
                    cv_mse[li] += mse;
                }
            }
            Eigen::Index best = 0;
            cv_mse.minCoeff(&best);
            model.lambda = lambdas[static_cast<std::size_t>(best)];
            model.converged = converged;
            Mat beta = Mat::Zero(d, d);
            for (Eigen::Index j = 0; j < d; ++j) {
                Vec bj = beta.col(j);
                if (!detail::lasso_cd(gram_full, corr_full.col(j), model.lambda, bj))
                    model.converged = false;
                beta.col(j) = bj;
            }
            model.slope = beta.transpose();
            model.intercept = cd.ymean - model.slope * cd.xmean;
        }
        out.models.push_back(std::move(model));
    }
    return out;
}

// ---- Frozen velocity-field factories ---------------------------------------------

/// Kernel-regression field over one index pairing; data are captured by value
/// so the field is frozen before integration.
inline VelocityField reg2_velocity_field(PairedData data, EstimatorConfig cfg) {
    if (data.pairing != Pairing::index_paired)
        throw ParameterError("reg2_velocity_field: needs index-paired data");
    VelocityField f;
    f.dim = data.dim();
    f.eval = [data = std::move(data), cfg = std::move(cfg)](double t, const Vec& z) {
        return v_reg2(t, z, data, cfg);
    };
    return f;
}

}  // namespace rectflow::estimators
