#pragma once

#include <cmath>
#include <utility>
#include <vector>

#include "rectflow/closedform.hpp"
#include "rectflow/core.hpp"
#include "rectflow/errors.hpp"
#include "rectflow/estimators.hpp"
#include "rectflow/flow.hpp"
#include "rectflow/parallel.hpp"
#include "rectflow/quadrature.hpp"

namespace rectflow::asymptotics {

/// Quadrature evaluation of the 1-D asymptotic map variance
///   Sigma(x) = int_0^1 Phi^2(1,t,z_t) / p_t(z_t) E[|Delta - v_t(z_t)| | X_t = z_t] dt
/// along the analytic Gaussian trajectory. The conditional law of Delta given
/// X_t = z_t is N(v_t(z_t), sigma0^2 sigma1^2 / s_t^2), so the conditional
/// absolute moment is sqrt(2/pi) sigma0 sigma1 / s_t.
inline double sigma_quadrature_1d(double x, const GaussianParams& p, int t_nodes = 256) {
    if (p.dim() != 1) throw ParameterError("sigma_quadrature_1d: needs 1-D parameters");
    const double s0 = std::sqrt(p.S0(0, 0)), s1 = std::sqrt(p.S1(0, 0));
    if (s0 <= 0.0 || s1 <= 0.0)
        throw ParameterError("sigma_quadrature_1d: needs positive variances");
    auto [nodes, weights] = quadrature::on_interval(t_nodes, 0.0, 1.0);
    double acc = 0.0;
    for (int i = 0; i < t_nodes; ++i) {
        const double t = nodes[i];
        const double st2 = t * t * s1 * s1 + (1.0 - t) * (1.0 - t) * s0 * s0;
        const double st = std::sqrt(st2);
        const double phi = closedform::gaussian_fundamental_matrix_1d(t, p);
        const double zt = closedform::gaussian_path_point_1d(t, x, p);
        const double mt = p.mean_at(t)[0];
        const double pt =
            std::exp(-0.5 * (zt - mt) * (zt - mt) / st2) / std::sqrt(2.0 * M_PI * st2);
        const double abs_moment = std::sqrt(2.0 / M_PI) * s0 * s1 / st;
        acc += weights[i] * phi * phi / pt * abs_moment;
    }
    return acc;
}

enum class CltEstimator { reg2, reg0 };

/// One Monte-Carlo CLT run: per-replicate map errors and the scaled variance
/// n * var (d = 1), against the closed-form reference Sigma(x).
struct CltRunResult {
    double x = 0.0;
    int n = 0;
    double h = 0.0;
    int replicates = 0;
    std::vector<double> errors;     // Rhat(x) - R(x), one per successful replicate
    int failures = 0;
    double scaled_variance = 0.0;   // n * sample variance of the errors
    double mean_error = 0.0;
    double reference = 0.0;         // Sigma(x)
};

/// Repeatedly draw fresh samples, freeze the kernel-regression field, integrate
/// to t = 1, and record the map error at x. Replicates run on separate rng
/// streams so the result is independent of the worker schedule.
inline CltRunResult clt_experiment(const GaussianParams& p, double x, int n, double h, int M,
                                   CltEstimator estimator, const flow::IntegratorSpec& spec,
                                   RngSpec rng, int workers = 0,
                                   kde::KernelSpec kernel = {}) {
    if (p.dim() != 1) throw ParameterError("clt_experiment: needs 1-D parameters");
    if (M < 2) throw ParameterError("clt_experiment: need at least 2 replicates");
    const closedform::AffineMap truth = closedform::gaussian_rectified_map(p);
    Vec xv(1);
    xv << x;
    const double r_true = truth(xv)[0];

    std::vector<double> errors(static_cast<std::size_t>(M),
                               std::numeric_limits<double>::quiet_NaN());
    parallel_for(
        M,
        [&](int m) {
            const std::uint64_t base = rng.stream + 2ULL * static_cast<std::uint64_t>(m);
            const auto x0 =
                sample_gaussian(p.m0, p.S0, n, rng.with_stream(base), SampleLabel::source);
            const auto x1 = sample_gaussian(p.m1, p.S1, n, rng.with_stream(base + 1),
                                            SampleLabel::target);
            estimators::EstimatorConfig cfg;
            cfg.h = h;
            cfg.kernel = kernel;
            estimators::PairedData data(x0, x1, estimator == CltEstimator::reg2
                                                    ? estimators::Pairing::index_paired
                                                    : estimators::Pairing::all_pairs);
            VelocityField field;
            if (estimator == CltEstimator::reg2) {
                field = estimators::reg2_velocity_field(std::move(data), cfg);
            } else {
                field.dim = 1;
                field.eval = [data = std::move(data), cfg](double t, const Vec& z) {
                    return estimators::v_reg0(t, z, data, cfg);
                };
            }
            try {
                const double endpoint = flow::integrate_flow(field, xv, spec).endpoint()[0];
                errors[static_cast<std::size_t>(m)] = endpoint - r_true;
            } catch (const Error&) {
                // recorded as a failure below
            }
        },
        workers);

    CltRunResult res;
    res.x = x;
    res.n = n;
    res.h = h;
    res.replicates = M;
    res.reference = closedform::gaussian_clt_variance_1d(x, p);
    for (double e : errors) {
        if (std::isfinite(e))
            res.errors.push_back(e);
        else
            ++res.failures;
    }
    if (res.failures * 10 > M)
        throw ExperimentError("clt_experiment: more than 10% of replicates failed");
    double mean = 0.0;
    for (double e : res.errors) mean += e;
    mean /= static_cast<double>(res.errors.size());
    double var = 0.0;
    for (double e : res.errors) var += (e - mean) * (e - mean);
    var /= static_cast<double>(res.errors.size() - 1);
    res.mean_error = mean;
    res.scaled_variance = n * var;
    return res;
}

/// Trace of the one-step variance estimate across a t grid; the trace blows up
/// like (t (1-t))^{-d} toward the endpoints.
inline std::vector<std::pair<double, double>> variance_blowup_scan(
    const std::vector<double>& t_grid, const estimators::PairedData& data, const Vec& z,
    const estimators::EstimatorConfig& cfg) {
    std::vector<std::pair<double, double>> out;
    out.reserve(t_grid.size());
    for (double t : t_grid)
        out.emplace_back(t, estimators::v_onestep(t, z, data, cfg).variance.trace());
    return out;
}

}  // namespace rectflow::asymptotics
