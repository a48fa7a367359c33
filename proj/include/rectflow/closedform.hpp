#pragma once

#include <cmath>
#include <utility>
#include <vector>

#include "rectflow/core.hpp"
#include "rectflow/errors.hpp"
#include "rectflow/geometry.hpp"

namespace rectflow::closedform {

/// x -> A x + b.
struct AffineMap {
    SquareMat A;
    Vec b;

    Vec operator()(const Vec& x) const { return A * x + b; }
    int dim() const { return static_cast<int>(b.size()); }
};

/// Positive square root P D^{1/2} P^T of a symmetric PSD matrix.
inline SquareMat matrix_sqrt_psd(const SquareMat& S) {
    if (S.rows() != S.cols() || (S - S.transpose()).cwiseAbs().maxCoeff() > 1e-10)
        throw ParameterError("matrix_sqrt_psd: matrix not symmetric");
    Eigen::SelfAdjointEigenSolver<SquareMat> es(S);
    if (es.eigenvalues().minCoeff() < -1e-10)
        throw ParameterError("matrix_sqrt_psd: negative eigenvalue");
    Vec ev = es.eigenvalues().cwiseMax(0.0);
    return es.eigenvectors() * ev.cwiseSqrt().asDiagonal() * es.eigenvectors().transpose();
}

namespace detail {

inline double min_eigenvalue(const SquareMat& S) {
    return Eigen::SelfAdjointEigenSolver<SquareMat>(S).eigenvalues().minCoeff();
}

/// Inverse through the eigendecomposition with a 1e-12 cutoff on eigenvalues.
inline SquareMat pseudo_inverse(const SquareMat& S) {
    Eigen::SelfAdjointEigenSolver<SquareMat> es(S);
    Vec inv = es.eigenvalues();
    for (Eigen::Index i = 0; i < inv.size(); ++i)
        inv[i] = std::abs(inv[i]) > 1e-12 ? 1.0 / inv[i] : 0.0;
    return es.eigenvectors() * inv.asDiagonal() * es.eigenvectors().transpose();
}

inline double log_normal_pdf(const Vec& x, const Vec& mean, const SquareMat& cov) {
    const Eigen::Index d = x.size();
    Eigen::LLT<SquareMat> llt(cov);
    if (llt.info() != Eigen::Success) {
        Eigen::SelfAdjointEigenSolver<SquareMat> es(cov);
        if (es.eigenvalues().minCoeff() <= 0.0)
            return -std::numeric_limits<double>::infinity();
        const Vec y = es.eigenvectors().transpose() * (x - mean);
        double q = 0.0, logdet = 0.0;
        for (Eigen::Index i = 0; i < d; ++i) {
            q += y[i] * y[i] / es.eigenvalues()[i];
            logdet += std::log(es.eigenvalues()[i]);
        }
        return -0.5 * (q + logdet + d * std::log(2.0 * M_PI));
    }
    const Vec y = llt.matrixL().solve(x - mean);
    double logdet = 0.0;
    for (Eigen::Index i = 0; i < d; ++i) logdet += std::log(llt.matrixL()(i, i));
    return -0.5 * (y.squaredNorm() + d * std::log(2.0 * M_PI)) - logdet;
}

}  // namespace detail

/// Time covariance t^2 S1 + (1-t)^2 S0 of X_t.
inline SquareMat time_covariance(double t, const GaussianParams& p) {
    return t * t * p.S1 + (1.0 - t) * (1.0 - t) * p.S0;
}

/// Conditional-mean velocity of the independent Gaussian coupling:
/// v_t(z) = m1 - m0 + (t S1 - (1-t) S0)(t^2 S1 + (1-t)^2 S0)^{-1}(z - m_t).
inline Vec gaussian_velocity(double t, const Vec& z, const GaussianParams& p) {
    const SquareMat M = time_covariance(t, p);
    if (detail::min_eigenvalue(M) <= 1e-12)
        throw SingularTimeError(t, "gaussian_velocity: singular time covariance");
    const SquareMat N = t * p.S1 - (1.0 - t) * p.S0;
    return p.m1 - p.m0 + N * M.ldlt().solve(z - p.mean_at(t));
}

/// d(v_t)/dz, constant in z for Gaussian marginals.
inline SquareMat gaussian_velocity_jacobian(double t, const GaussianParams& p) {
    const SquareMat M = time_covariance(t, p);
    if (detail::min_eigenvalue(M) <= 1e-12)
        throw SingularTimeError(t, "gaussian_velocity_jacobian: singular time covariance");
    const SquareMat N = t * p.S1 - (1.0 - t) * p.S0;
    return N * M.ldlt().solve(SquareMat::Identity(p.dim(), p.dim()));
}

/// Rectified map between the Gaussian marginals (independent coupling):
/// A = S0^{1/2} (S0^{-1/2} S1 S0^{-1/2})^{1/2} S0^{-1/2}, b = m1 - A m0.
inline AffineMap gaussian_rectified_map(const GaussianParams& p) {
    if (detail::min_eigenvalue(p.S0) <= 1e-12)
        throw ParameterError("gaussian_rectified_map: singular source covariance");
    const SquareMat R0 = matrix_sqrt_psd(p.S0);
    const SquareMat R0inv = detail::pseudo_inverse(R0);
    const SquareMat inner = matrix_sqrt_psd(R0inv * p.S1 * R0inv);
    SquareMat A = R0 * inner * R0inv;
    Vec b = p.m1 - A * p.m0;
    return {std::move(A), std::move(b)};
}

/// The optimal transport map between the same Gaussians:
/// T0(x) = m1 + S0^{-1/2} (S0^{1/2} S1 S0^{1/2})^{1/2} S0^{-1/2} (x - m0).
inline AffineMap gaussian_ot_map(const GaussianParams& p) {
    if (detail::min_eigenvalue(p.S0) <= 1e-12)
        throw ParameterError("gaussian_ot_map: singular source covariance");
    const SquareMat R0 = matrix_sqrt_psd(p.S0);
    const SquareMat R0inv = detail::pseudo_inverse(R0);
    const SquareMat inner = matrix_sqrt_psd(R0 * p.S1 * R0);
    SquareMat A = R0inv * inner * R0inv;
    Vec b = p.m1 - A * p.m0;
    return {std::move(A), std::move(b)};
}

/// Velocity of the deterministic coupling X1 = A X0 + b (A PSD, A S0 A^T = S1):
/// v_t(z) = m1 - m0 + (A - I)(t A + (1-t) I)^{-1}(z - m_t).
inline void check_affine_coupling(const AffineMap& map, const GaussianParams& p) {
    // A is similar to a PSD matrix (S0^{1/2} C S0^{-1/2}); the operative
    // condition is a real positive spectrum, not symmetry of A itself.
    const Eigen::EigenSolver<SquareMat> es(map.A);
    const double scale = std::max(1.0, map.A.cwiseAbs().maxCoeff());
    if (es.eigenvalues().imag().cwiseAbs().maxCoeff() > 1e-8 * scale ||
        es.eigenvalues().real().minCoeff() <= 0.0)
        throw ParameterError("affine_coupling_velocity: A must have a positive spectrum");
    if ((map.A * p.S0 * map.A.transpose() - p.S1).cwiseAbs().maxCoeff() > 1e-8)
        throw ParameterError("affine_coupling_velocity: A S0 A^T != S1");
    if ((map.b - (p.m1 - map.A * p.m0)).cwiseAbs().maxCoeff() > 1e-8)
        throw ParameterError("affine_coupling_velocity: b != m1 - A m0");
}

inline Vec gaussian_affine_coupling_velocity(double t, const Vec& z, const AffineMap& map,
                                             const GaussianParams& p) {
    const Eigen::Index d = p.dim();
    check_affine_coupling(map, p);
    const SquareMat T = t * map.A + (1.0 - t) * SquareMat::Identity(d, d);
    return p.m1 - p.m0 +
           (map.A - SquareMat::Identity(d, d)) * T.partialPivLu().solve(z - p.mean_at(t));
}

/// Mixture velocity: component-pair velocities mixed with posterior weights
/// tau^{ij}_t(z) = N(z; m_t^{ij}, S_t^{ij}), accumulated in log space.
inline Vec mixture_velocity(double t, const Vec& z, const MixtureParams& p) {
    const auto& h0 = p.half0;
    const auto& h1 = p.half1;
    const Eigen::Index d = z.size();
    std::vector<double> logw;
    std::vector<Vec> vels;
    double logw_max = -std::numeric_limits<double>::infinity();
    for (std::size_t i = 0; i < h0.components.size(); ++i) {
        const double pi0 = h0.weights[static_cast<Eigen::Index>(i)];
        if (pi0 == 0.0) continue;
        for (std::size_t j = 0; j < h1.components.size(); ++j) {
            const double pi1 = h1.weights[static_cast<Eigen::Index>(j)];
            if (pi1 == 0.0) continue;
            GaussianParams pair(h0.components[i].first, h0.components[i].second,
                                h1.components[j].first, h1.components[j].second);
            const SquareMat St = time_covariance(t, pair);
            const Vec mt = pair.mean_at(t);
            const double lw = std::log(pi0) + std::log(pi1) +
                              detail::log_normal_pdf(z, mt, St);
            logw.push_back(lw);
            logw_max = std::max(logw_max, lw);
            vels.push_back(gaussian_velocity(t, z, pair));
        }
    }
    if (!std::isfinite(logw_max))
        throw FarFieldError("mixture_velocity: all pair weights vanished in log space");
    double den = 0.0;
    Vec num = Vec::Zero(d);
    for (std::size_t k = 0; k < logw.size(); ++k) {
        const double w = std::exp(logw[k] - logw_max);
        den += w;
        num += w * vels[k];
    }
    return num / den;
}

/// Self-transport velocity for Unif[0,1]: the piecewise form on t <= 1/2 and
/// the exact interval-midpoint identity v = (a_t(z)+b_t(z))/2 on t > 1/2.
inline double uniform_velocity(double t, double z) {
    if (z < -geometry::kMembershipTol || z > 1.0 + geometry::kMembershipTol)
        throw DomainError("uniform_velocity: z outside [0,1]");
    if (t <= 0.0 || t >= 1.0)
        throw DegenerateTimeError("uniform_velocity: t must lie in (0,1)");
    if (t <= 0.5) {
        const double c = 1.0 / (2.0 * t * (1.0 - t));
        if (z <= t) return c * z * (1.0 - 2.0 * t);
        if (z <= 1.0 - t) return c * (1.0 - 2.0 * z) * t;
        return c * (1.0 - z) * (2.0 * t - 1.0);
    }
    const double a = std::max((z - 1.0) / t, -z / (1.0 - t));
    const double b = std::min(z / t, (1.0 - z) / (1.0 - t));
    return 0.5 * (a + b);
}

/// Lipschitz factor a(t) = 1/(2 t (1-t)) of the uniform velocity.
inline double uniform_lipschitz_bound(double t) { return 1.0 / (2.0 * t * (1.0 - t)); }

namespace detail {

inline void require_1d(const GaussianParams& p, const char* what) {
    if (p.dim() != 1) throw ParameterError(std::string(what) + ": needs 1-D parameters");
}

}  // namespace detail

/// Phi(1, t, z_t) = sigma1 / sqrt(t^2 sigma1^2 + (1-t)^2 sigma0^2) for the
/// 1-D Gaussian pair.
inline double gaussian_fundamental_matrix_1d(double t, const GaussianParams& p) {
    detail::require_1d(p, "gaussian_fundamental_matrix_1d");
    const double v1 = p.S1(0, 0), v0 = p.S0(0, 0);
    return std::sqrt(v1) / std::sqrt(t * t * v1 + (1.0 - t) * (1.0 - t) * v0);
}

/// Point z_t(x) on the 1-D Gaussian trajectory started at x.
inline double gaussian_path_point_1d(double t, double x, const GaussianParams& p) {
    detail::require_1d(p, "gaussian_path_point_1d");
    const double s0 = std::sqrt(p.S0(0, 0));
    const double st = std::sqrt(t * t * p.S1(0, 0) + (1.0 - t) * (1.0 - t) * p.S0(0, 0));
    return p.mean_at(t)[0] + (st / s0) * (x - p.m0[0]);
}

/// Asymptotic variance of sqrt(n) (Rhat(x) - R(x)) for the 1-D Gaussian pair.
/// Uses the conditional law Delta | X_t = z ~ N(v_t(z), sigma0^2 sigma1^2 / s_t^2),
/// which closes the t-integral to
///   Sigma(x) = 2 sigma1^2 (arctan(sigma1/sigma0) + arctan(sigma0/sigma1))
///              * exp((x - m0)^2 / (2 sigma0^2)).
inline double gaussian_clt_variance_1d(double x, const GaussianParams& p) {
    detail::require_1d(p, "gaussian_clt_variance_1d");
    const double s0 = std::sqrt(p.S0(0, 0)), s1 = std::sqrt(p.S1(0, 0));
    if (s0 <= 0.0 || s1 <= 0.0)
        throw ParameterError("gaussian_clt_variance_1d: needs positive variances");
    const double ang = std::atan(s1 / s0) + std::atan(s0 / s1);
    const double x0 = x - p.m0[0];
    return 2.0 * s1 * s1 * ang * std::exp(x0 * x0 / (2.0 * s0 * s0));
}

// ---- VelocityField factories -------------------------------------------------

inline VelocityField gaussian_velocity_field(GaussianParams p) {
    VelocityField f;
    f.dim = p.dim();
    f.eval = [p](double t, const Vec& z) { return gaussian_velocity(t, z, p); };
    f.jacobian = [p](double t, const Vec&) { return gaussian_velocity_jacobian(t, p); };
    return f;
}

inline VelocityField affine_coupling_velocity_field(AffineMap map, GaussianParams p) {
    check_affine_coupling(map, p);
    VelocityField f;
    f.dim = p.dim();
    const Eigen::Index d = p.dim();
    f.eval = [map, p, d](double t, const Vec& z) {
        const SquareMat T = t * map.A + (1.0 - t) * SquareMat::Identity(d, d);
        return Vec(p.m1 - p.m0 + (map.A - SquareMat::Identity(d, d)) *
                                     T.partialPivLu().solve(z - p.mean_at(t)));
    };
    f.jacobian = [map, p](double t, const Vec&) {
        const Eigen::Index d = p.dim();
        const SquareMat T = t * map.A + (1.0 - t) * SquareMat::Identity(d, d);
        return SquareMat((map.A - SquareMat::Identity(d, d)) *
                         T.partialPivLu().solve(SquareMat::Identity(d, d)));
    };
    return f;
}

inline VelocityField mixture_velocity_field(MixtureParams p) {
    VelocityField f;
    f.dim = p.dim();
    if (p.dim() == 1) {
        // scalar fast path: the flow integrators evaluate this in a hot loop
        struct Pair {
            double logw, m0, m1, v0, v1;
        };
        std::vector<Pair> pairs;
        for (std::size_t i = 0; i < p.half0.components.size(); ++i)
            for (std::size_t j = 0; j < p.half1.components.size(); ++j) {
                const double w0 = p.half0.weights[static_cast<Eigen::Index>(i)];
                const double w1 = p.half1.weights[static_cast<Eigen::Index>(j)];
                if (w0 == 0.0 || w1 == 0.0) continue;
                pairs.push_back({std::log(w0) + std::log(w1),
                                 p.half0.components[i].first[0],
                                 p.half1.components[j].first[0],
                                 p.half0.components[i].second(0, 0),
                                 p.half1.components[j].second(0, 0)});
            }
        f.eval = [pairs](double t, const Vec& zv) {
            const double z = zv[0];
            double logmax = -std::numeric_limits<double>::infinity();
            std::vector<double> logw(pairs.size()), vel(pairs.size());
            for (std::size_t k = 0; k < pairs.size(); ++k) {
                const auto& q = pairs[k];
                const double st2 = t * t * q.v1 + (1.0 - t) * (1.0 - t) * q.v0;
                if (st2 <= 1e-12)
                    throw SingularTimeError(t, "mixture velocity: singular time variance");
                const double mt = (1.0 - t) * q.m0 + t * q.m1;
                logw[k] = q.logw - 0.5 * ((z - mt) * (z - mt) / st2 +
                                          std::log(2.0 * M_PI * st2));
                vel[k] = q.m1 - q.m0 +
                         (t * q.v1 - (1.0 - t) * q.v0) / st2 * (z - mt);
                logmax = std::max(logmax, logw[k]);
            }
            if (!std::isfinite(logmax))
                throw FarFieldError("mixture velocity: weights vanished in log space");
            double den = 0.0, num = 0.0;
            for (std::size_t k = 0; k < pairs.size(); ++k) {
                const double w = std::exp(logw[k] - logmax);
                den += w;
                num += w * vel[k];
            }
            Vec out(1);
            out[0] = num / den;
            return out;
        };
        return f;
    }
    f.eval = [p](double t, const Vec& z) { return mixture_velocity(t, z, p); };
    return f;
}

/// Unif[0,1] self-transport field with the exact endpoint formulas at t = 0, 1.
inline VelocityField uniform_velocity_field() {
    VelocityField f;
    f.dim = 1;
    f.eval = [](double t, const Vec& z) {
        Vec out(1);
        if (t <= 0.0)
            out[0] = 0.5 - z[0];
        else if (t >= 1.0)
            out[0] = z[0] - 0.5;
        else
            out[0] = uniform_velocity(t, std::clamp(z[0], 0.0, 1.0));
        return out;
    };
    return f;
}

}  // namespace rectflow::closedform
