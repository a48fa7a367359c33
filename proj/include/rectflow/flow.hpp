#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <limits>
#include <string>
#include <utility>
#include <vector>

#include "rectflow/closedform.hpp"
#include "rectflow/core.hpp"
#include "rectflow/csvio.hpp"
#include "rectflow/errors.hpp"
#include "rectflow/quadrature.hpp"

namespace rectflow::flow {

enum class Method { euler, rk4 };

/// Fixed-step integrator configuration on the uniform grid over [0, 1].
struct IntegratorSpec {
    Method method = Method::rk4;
    int steps = 1000;
    double fd_step = 1e-6;  // central-difference step for missing Jacobians

    void validate() const {
        if (steps < 1) throw ParameterError("IntegratorSpec: steps must be >= 1");
        if (fd_step < 1e-8 || fd_step > 1e-3)
            throw ParameterError("IntegratorSpec: fd step outside [1e-8, 1e-3]");
    }
};

namespace detail {

inline Vec eval_checked(const VelocityField& v, double t, const Vec& z) {
    Vec out = v.eval(t, z);
    if (!out.allFinite())
        throw IntegrationError(t, std::vector<double>(z.data(), z.data() + z.size()),
                               "integrate_flow: non-finite velocity");
    return out;
}

inline SquareMat jacobian_at(const VelocityField& v, double t, const Vec& z, double fd) {
    if (v.has_jacobian()) return v.jacobian(t, z);
    const Eigen::Index d = z.size();
    SquareMat J(d, d);
    Vec zp = z, zm = z;
    for (Eigen::Index j = 0; j < d; ++j) {
        zp[j] = z[j] + fd;
        zm[j] = z[j] - fd;
        J.col(j) = (v.eval(t, zp) - v.eval(t, zm)) / (2.0 * fd);
        zp[j] = z[j];
        zm[j] = z[j];
    }
    return J;
}

}  // namespace detail

/// Integrate dz/dt = v(t, z) from x over [t0, t1]; the trajectory is stored at
/// every grid point and the rectified map value is the final state.
inline Trajectory integrate_flow(const VelocityField& v, const Vec& x,
                                 const IntegratorSpec& spec, double t0 = 0.0,
                                 double t1 = 1.0) {
    spec.validate();
    if (!x.allFinite()) throw ParameterError("integrate_flow: non-finite start");
    const int T = spec.steps;
    const double dt = (t1 - t0) / T;
    Trajectory traj;
    traj.times.resize(T + 1);
    traj.states.resize(T + 1, x.size());
    Vec z = x;
    traj.times[0] = t0;
    traj.states.row(0) = z.transpose();
    for (int k = 0; k < T; ++k) {
        const double t = t0 + k * dt;
        if (spec.method == Method::euler) {
            z += dt * detail::eval_checked(v, t, z);
        } else {
            const Vec k1 = detail::eval_checked(v, t, z);
            const Vec k2 = detail::eval_checked(v, t + 0.5 * dt, z + 0.5 * dt * k1);
            const Vec k3 = detail::eval_checked(v, t + 0.5 * dt, z + 0.5 * dt * k2);
            const Vec k4 = detail::eval_checked(v, t + dt, z + dt * k3);
            z += dt / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
        }
        if (!z.allFinite())
            throw IntegrationError(t + dt, std::vector<double>(z.data(), z.data() + z.size()),
                                   "integrate_flow: non-finite state");
        traj.times[k + 1] = t0 + (k + 1) * dt;
        traj.states.row(k + 1) = z.transpose();
    }
    return traj;
}

struct BatchMapResult {
    Mat endpoints;                  // one row per start point, NaN on failure
    std::vector<int> failed;        // indices of failed integrations
    std::vector<std::string> what;  // matching failure messages
};

/// Batched endpoint map R(x) = z(1) over a list of start points; per-point
/// failures are collected rather than thrown.
inline BatchMapResult rectified_map(const VelocityField& v, const Mat& starts,
                                    const IntegratorSpec& spec) {
    BatchMapResult res;
    res.endpoints.resize(starts.rows(), starts.cols());
    for (Eigen::Index i = 0; i < starts.rows(); ++i) {
        try {
            res.endpoints.row(i) =
                integrate_flow(v, starts.row(i).transpose(), spec).endpoint().transpose();
        } catch (const Error& e) {
            res.endpoints.row(i).setConstant(std::numeric_limits<double>::quiet_NaN());
            res.failed.push_back(static_cast<int>(i));
            res.what.emplace_back(e.what());
        }
    }
    return res;
}

/// Joint integration of the state and the variational matrix ODE
/// dPhi/dt = (dv/dz)(t, z_t) Phi, Phi(0) = I, on the same method and grid.
inline Trajectory fundamental_matrix(const VelocityField& v, const Vec& x,
                                     const IntegratorSpec& spec, double t0 = 0.0,
                                     double t1 = 1.0) {
    spec.validate();
    const Eigen::Index d = x.size();
    const int T = spec.steps;
    const double dt = (t1 - t0) / T;
    Trajectory traj;
    traj.times.resize(T + 1);
    traj.states.resize(T + 1, d);
    traj.fundamental.reserve(T + 1);
    Vec z = x;
    SquareMat phi = SquareMat::Identity(d, d);
    traj.times[0] = t0;
    traj.states.row(0) = z.transpose();
    traj.fundamental.push_back(phi);
    auto rhs = [&](double t, const Vec& zz, const SquareMat& pp, Vec& dz, SquareMat& dp) {
        dz = detail::eval_checked(v, t, zz);
        dp = detail::jacobian_at(v, t, zz, spec.fd_step) * pp;
    };
    Vec kz1(d), kz2(d), kz3(d), kz4(d);
    SquareMat kp1(d, d), kp2(d, d), kp3(d, d), kp4(d, d);
    for (int k = 0; k < T; ++k) {
        const double t = t0 + k * dt;
        if (spec.method == Method::euler) {
            rhs(t, z, phi, kz1, kp1);
            z += dt * kz1;
            phi += dt * kp1;
        } else {
            rhs(t, z, phi, kz1, kp1);
            rhs(t + 0.5 * dt, z + 0.5 * dt * kz1, phi + 0.5 * dt * kp1, kz2, kp2);
            rhs(t + 0.5 * dt, z + 0.5 * dt * kz2, phi + 0.5 * dt * kp2, kz3, kp3);
            rhs(t + dt, z + dt * kz3, phi + dt * kp3, kz4, kp4);
            z += dt / 6.0 * (kz1 + 2.0 * kz2 + 2.0 * kz3 + kz4);
            phi += dt / 6.0 * (kp1 + 2.0 * kp2 + 2.0 * kp3 + kp4);
        }
        traj.times[k + 1] = t0 + (k + 1) * dt;
        traj.states.row(k + 1) = z.transpose();
        traj.fundamental.push_back(phi);
    }
    return traj;
}

/// Fill the fundamental matrices of an already computed trajectory. The RK4
/// stages need states between the stored grid points, so the state is jointly
/// re-integrated on the same grid; it reproduces the stored path bit-exactly.
inline Trajectory fundamental_matrix(const VelocityField& v, const Trajectory& base,
                                     const IntegratorSpec& spec) {
    if (base.size() < 2) throw ParameterError("fundamental_matrix: trajectory too short");
    IntegratorSpec grid = spec;
    grid.steps = static_cast<int>(base.size()) - 1;
    return fundamental_matrix(v, base.state(0), grid, base.times[0],
                              base.times[base.size() - 1]);
}

/// Phi(t1, s, z_s) at every grid node of a trajectory with fundamental
/// matrices filled, via the flow composition Phi(t1,s) = Phi(t1,0) Phi(s,0)^{-1}.
inline std::vector<SquareMat> phi_from_each_node(const Trajectory& traj) {
    if (traj.fundamental.empty())
        throw ParameterError("phi_from_each_node: trajectory lacks fundamental matrices");
    const SquareMat& last = traj.fundamental.back();
    std::vector<SquareMat> out;
    out.reserve(traj.fundamental.size());
    for (const auto& phi : traj.fundamental)
        out.push_back(last * phi.partialPivLu().solve(
                                 SquareMat::Identity(phi.rows(), phi.cols())));
    return out;
}

struct AlekseevResult {
    Vec lhs;          // Rhat(x) - R(x) by two integrations
    Vec linearized;   // integral of Phi(1,s,z_s)(vhat - v)(s, z_s) ds
    double residual_norm = 0.0;
};

/// First-order (variation-of-parameters) linearization of the map difference,
/// with the quadrature taken along the stored grid of the true path.
inline AlekseevResult alekseev_residual(const VelocityField& v_true,
                                        const VelocityField& v_hat, const Vec& x,
                                        const IntegratorSpec& spec) {
    const Trajectory base = fundamental_matrix(v_true, x, spec);
    const Trajectory hat = integrate_flow(v_hat, x, spec);
    const std::vector<SquareMat> phi1s = phi_from_each_node(base);
    const Eigen::Index d = x.size();
    const Eigen::Index n = base.times.size();
    const double dt = base.times[1] - base.times[0];
    Mat integrand(n, d);
    for (Eigen::Index i = 0; i < n; ++i) {
        const Vec zs = base.state(i);
        integrand.row(i) =
            (phi1s[static_cast<std::size_t>(i)] *
             (v_hat.eval(base.times[i], zs) - v_true.eval(base.times[i], zs)))
                .transpose();
    }
    AlekseevResult res;
    res.lhs = hat.endpoint() - base.endpoint();
    res.linearized.resize(d);
    for (Eigen::Index j = 0; j < d; ++j)
        res.linearized[j] = quadrature::simpson_uniform(integrand.col(j), dt);
    res.residual_norm = (res.lhs - res.linearized).norm();
    return res;
}

/// Second-pass rectification of the analytic Gaussian map: integrate the
/// deterministic-coupling velocity of the first-pass map from each start.
inline BatchMapResult rectify_iterate_gaussian(const GaussianParams& p, const Mat& starts,
                                               const IntegratorSpec& spec) {
    const closedform::AffineMap first = closedform::gaussian_rectified_map(p);
    const VelocityField v = closedform::affine_coupling_velocity_field(first, p);
    return rectified_map(v, starts, spec);
}

/// Second-pass rectification from an empirical deterministic coupling
/// (x0_i, x1_i = Rhat(x0_i)): the caller supplies the velocity estimator to
/// fit on the coupling, and the fitted field is frozen before integration.
template <class VelocityBuilder>
inline std::pair<VelocityField, BatchMapResult> rectify_iterate(
    const Mat& coupling_x0, const Mat& coupling_x1, VelocityBuilder&& build_velocity,
    const Mat& starts, const IntegratorSpec& spec) {
    if (coupling_x0.rows() != coupling_x1.rows() || coupling_x0.cols() != coupling_x1.cols())
        throw ParameterError("rectify_iterate: coupling shape mismatch");
    VelocityField v = build_velocity(coupling_x0, coupling_x1);
    BatchMapResult second = rectified_map(v, starts, spec);
    return {std::move(v), std::move(second)};
}

/// Stability bound t^c delta^{-c} E_delta(t) for a(s) = c/s, kappa(u) = u.
inline double stability_bound_nagumo(double c, double delta, double err, double t) {
    if (c <= 0.0 || c >= 1.0)
        throw ParameterError("stability_bound_nagumo: need c in (0,1); the bound is vacuous otherwise");
    if (delta <= 0.0) throw ParameterError("stability_bound_nagumo: need delta > 0");
    return std::pow(t / delta, c) * err;
}

/// Stability bound E_delta(t) exp(L (t v delta - delta)) for a(s) = L, kappa(u) = u.
inline double stability_bound_osgood(double lipschitz, double delta, double err, double t) {
    if (lipschitz < 0.0 || delta <= 0.0)
        throw ParameterError("stability_bound_osgood: bad arguments");
    return err * std::exp(lipschitz * (std::max(t, delta) - delta));
}

struct MarginalStat {
    Vec ks;                 // per-coordinate two-sample Kolmogorov-Smirnov
    double energy = 0.0;    // multivariate energy distance
};

namespace detail {

inline double ks_two_sample(Vec a, Vec b) {
    std::sort(a.data(), a.data() + a.size());
    std::sort(b.data(), b.data() + b.size());
    const Eigen::Index n = a.size(), m = b.size();
    Eigen::Index i = 0, j = 0;
    double d = 0.0;
    while (i < n && j < m) {
        const double x = std::min(a[i], b[j]);
        while (i < n && a[i] <= x) ++i;
        while (j < m && b[j] <= x) ++j;
        d = std::max(d, std::abs(static_cast<double>(i) / n - static_cast<double>(j) / m));
    }
    return d;
}

}  // namespace detail

/// Per-coordinate KS statistics and the multivariate energy distance between
/// a pushed-forward sample and a target sample.
inline MarginalStat marginal_preservation_stat(const SampleSet& pushed,
                                               const SampleSet& target) {
    if (pushed.dim() != target.dim())
        throw ParameterError("marginal_preservation_stat: dimension mismatch");
    const Eigen::Index d = pushed.dim();
    const Eigen::Index n = pushed.n(), m = target.n();
    MarginalStat out;
    out.ks.resize(d);
    for (Eigen::Index j = 0; j < d; ++j)
        out.ks[j] = detail::ks_two_sample(pushed.data.col(j), target.data.col(j));
    double ab = 0.0, aa = 0.0, bb = 0.0;
    for (Eigen::Index i = 0; i < n; ++i)
        for (Eigen::Index j = 0; j < m; ++j)
            ab += (pushed.data.row(i) - target.data.row(j)).norm();
    for (Eigen::Index i = 0; i < n; ++i)
        for (Eigen::Index j = 0; j < n; ++j)
            aa += (pushed.data.row(i) - pushed.data.row(j)).norm();
    for (Eigen::Index i = 0; i < m; ++i)
        for (Eigen::Index j = 0; j < m; ++j)
            bb += (target.data.row(i) - target.data.row(j)).norm();
    out.energy = 2.0 * ab / (static_cast<double>(n) * m) -
                 aa / (static_cast<double>(n) * n) - bb / (static_cast<double>(m) * m);
    return out;
}

/// Critical value of the two-sample KS statistic at level alpha (asymptotic).
inline double ks_critical_value(double alpha, Eigen::Index n, Eigen::Index m) {
    const double c = std::sqrt(-0.5 * std::log(alpha / 2.0));
    return c * std::sqrt(static_cast<double>(n + m) / (static_cast<double>(n) * m));
}

/// Canonical trajectory dump: columns replicate,start_index,t,z_1..z_d, one
/// row per grid point of each trajectory.
inline std::size_t write_trajectory_csv(const std::filesystem::path& path,
                                        const std::vector<Trajectory>& trajectories,
                                        const std::vector<std::pair<std::int64_t, std::int64_t>>& ids) {
    if (trajectories.size() != ids.size())
        throw ParameterError("write_trajectory_csv: id/trajectory count mismatch");
    const int d = trajectories.empty() ? 0 : static_cast<int>(trajectories[0].states.cols());
    std::vector<std::string> header = {"replicate", "start_index", "t"};
    for (int j = 1; j <= d; ++j) header.push_back("z_" + std::to_string(j));
    io::CsvWriter out(path, header);
    for (std::size_t k = 0; k < trajectories.size(); ++k) {
        const auto& traj = trajectories[k];
        for (Eigen::Index i = 0; i < traj.size(); ++i) {
            std::vector<io::Cell> cells = {ids[k].first, ids[k].second, traj.times[i]};
            for (Eigen::Index j = 0; j < traj.states.cols(); ++j)
                cells.emplace_back(traj.states(i, j));
            out.row(cells);
        }
    }
    return out.rows();
}

}  // namespace rectflow::flow
