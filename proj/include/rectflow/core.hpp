#pragma once

#include <Eigen/Dense>
#include <cmath>
#include <functional>
#include <optional>
#include <utility>
#include <vector>

#include "rectflow/errors.hpp"
#include "rectflow/rng.hpp"

namespace rectflow {

// 64-bit floats, row-major storage throughout.
using Mat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using Vec = Eigen::VectorXd;
using SquareMat = Eigen::MatrixXd;

enum class SampleLabel { source, target };

/// An n x d array of draws from one marginal.
struct SampleSet {
    Mat data;
    SampleLabel label = SampleLabel::source;

    SampleSet() = default;
    SampleSet(Mat d, SampleLabel l) : data(std::move(d)), label(l) {
        if (data.rows() < 1) throw ParameterError("SampleSet: need n >= 1");
        if (!data.allFinite()) throw ParameterError("SampleSet: non-finite entry");
    }

    Eigen::Index n() const { return data.rows(); }
    Eigen::Index dim() const { return data.cols(); }
};

/// Evaluable velocity field (t, z) -> R^d, optionally with a Jacobian in z.
/// When the Jacobian is absent consumers fall back to finite differences.
struct VelocityField {
    std::function<Vec(double, const Vec&)> eval;
    std::function<SquareMat(double, const Vec&)> jacobian;  // may be empty
    int dim = 0;

    Vec operator()(double t, const Vec& z) const { return eval(t, z); }
    bool has_jacobian() const { return static_cast<bool>(jacobian); }
};

namespace detail {

inline void check_symmetric(const SquareMat& s, double tol, const char* what) {
    if (s.rows() != s.cols() || (s - s.transpose()).cwiseAbs().maxCoeff() > tol)
        throw ParameterError(std::string(what) + ": matrix not symmetric");
}

}  // namespace detail

/// Parameters of a Gaussian pair (source, target).
struct GaussianParams {
    Vec m0, m1;
    SquareMat S0, S1;

    GaussianParams() = default;
    GaussianParams(Vec mean0, SquareMat cov0, Vec mean1, SquareMat cov1)
        : m0(std::move(mean0)), m1(std::move(mean1)),
          S0(std::move(cov0)), S1(std::move(cov1)) {
        detail::check_symmetric(S0, 1e-12, "GaussianParams");
        detail::check_symmetric(S1, 1e-12, "GaussianParams");
        if (m0.size() != m1.size() || S0.rows() != m0.size() || S1.rows() != m1.size())
            throw ParameterError("GaussianParams: dimension mismatch");
        for (SquareMat* s : {&S0, &S1}) {
            Eigen::SelfAdjointEigenSolver<SquareMat> es(*s);
            if (es.eigenvalues().minCoeff() < -1e-10)
                throw ParameterError("GaussianParams: covariance not PSD");
            // clamp tiny negative eigenvalues to zero
            if (es.eigenvalues().minCoeff() < 0.0) {
                Vec ev = es.eigenvalues().cwiseMax(0.0);
                *s = es.eigenvectors() * ev.asDiagonal() * es.eigenvectors().transpose();
            }
        }
    }

    /// Convenience for the one-dimensional case.
    static GaussianParams scalar(double mean0, double var0, double mean1, double var1) {
        Vec a(1), b(1);
        a << mean0;
        b << mean1;
        SquareMat c(1, 1), d(1, 1);
        c << var0;
        d << var1;
        return GaussianParams(a, c, b, d);
    }

    int dim() const { return static_cast<int>(m0.size()); }
    Vec mean_at(double t) const { return (1.0 - t) * m0 + t * m1; }
};

/// One half (one marginal) of a Gaussian-mixture specification.
struct MixtureHalf {
    Vec weights;
    std::vector<std::pair<Vec, SquareMat>> components;

    void validate() const {
        if (components.empty()) throw ParameterError("MixtureHalf: empty component list");
        if (weights.size() != static_cast<Eigen::Index>(components.size()))
            throw ParameterError("MixtureHalf: weight/component count mismatch");
        if (weights.minCoeff() < 0.0)
            throw ParameterError("MixtureHalf: negative weight");
        if (std::abs(weights.sum() - 1.0) > 1e-12)
            throw ParameterError("MixtureHalf: weights do not sum to 1");
    }

    int dim() const { return static_cast<int>(components.at(0).first.size()); }
};

struct MixtureParams {
    MixtureHalf half0, half1;

    MixtureParams() = default;
    MixtureParams(MixtureHalf h0, MixtureHalf h1)
        : half0(std::move(h0)), half1(std::move(h1)) {
        half0.validate();
        half1.validate();
        if (half0.dim() != half1.dim())
            throw ParameterError("MixtureParams: dimension mismatch");
    }

    int dim() const { return half0.dim(); }
};

/// Time grid with states z(t_i) and, optionally, fundamental matrices Phi(t_i).
struct Trajectory {
    Vec times;                            // strictly increasing, times[0] = 0
    Mat states;                           // one row per grid point
    std::vector<SquareMat> fundamental;   // empty unless filled

    Eigen::Index size() const { return times.size(); }
    Vec state(Eigen::Index i) const { return states.row(i).transpose(); }
    Vec endpoint() const { return states.row(states.rows() - 1).transpose(); }
};

namespace detail {

/// Symmetric-eigendecomposition factor L with L L^T = cov; eigenvalues are
/// clamped at zero so singular covariances stay samplable on their support.
inline SquareMat psd_factor(const SquareMat& cov) {
    check_symmetric(cov, 1e-10 * std::max(1.0, cov.cwiseAbs().maxCoeff()),
                    "psd_factor");
    Eigen::SelfAdjointEigenSolver<SquareMat> es(cov);
    if (es.eigenvalues().minCoeff() < -1e-10)
        throw ParameterError("covariance not positive semidefinite");
    Vec ev = es.eigenvalues().cwiseMax(0.0);
    return es.eigenvectors() * ev.cwiseSqrt().asDiagonal();
}

}  // namespace detail

/// Draw n i.i.d. rows from N(mean, cov).
inline SampleSet sample_gaussian(const Vec& mean, const SquareMat& cov, int n,
                                 RngSpec rng, SampleLabel label = SampleLabel::source) {
    if (n < 1) throw ParameterError("sample_gaussian: need n >= 1");
    const auto d = mean.size();
    if (cov.rows() != d || cov.cols() != d)
        throw ParameterError("sample_gaussian: dimension mismatch");
    const SquareMat L = detail::psd_factor(cov);
    Philox gen(rng);
    Mat out(n, d);
    Vec z(d);
    for (int i = 0; i < n; ++i) {
        for (Eigen::Index j = 0; j < d; ++j) z[j] = gen.normal();
        out.row(i) = (mean + L * z).transpose();
    }
    return SampleSet(std::move(out), label);
}

/// Draw n i.i.d. rows from one mixture half: a categorical pick, then the
/// component Gaussian. A single-component mixture consumes no categorical
/// draw, so it replays bit-identically to sample_gaussian.
inline SampleSet sample_mixture(const MixtureHalf& half, int n, RngSpec rng,
                                SampleLabel label = SampleLabel::source) {
    half.validate();
    if (n < 1) throw ParameterError("sample_mixture: need n >= 1");
    const int d = half.dim();
    const auto k = half.components.size();
    std::vector<SquareMat> factors;
    factors.reserve(k);
    for (const auto& c : half.components) factors.push_back(detail::psd_factor(c.second));

    Philox gen(rng);
    Mat out(n, d);
    Vec z(d);
    for (int i = 0; i < n; ++i) {
        std::size_t idx = 0;
        if (k > 1) {
            const double u = gen.uniform01();
            double cum = 0.0;
            for (std::size_t c = 0; c < k; ++c) {
                cum += half.weights[static_cast<Eigen::Index>(c)];
                if (u < cum || c + 1 == k) {
                    idx = c;
                    break;
                }
            }
        }
        for (int j = 0; j < d; ++j) z[j] = gen.normal();
        out.row(i) = (half.components[idx].first + factors[idx] * z).transpose();
    }
    return SampleSet(std::move(out), label);
}

/// Draw n i.i.d. rows uniformly from the box [lo, hi].
inline SampleSet sample_uniform_box(const Vec& lo, const Vec& hi, int n, RngSpec rng,
                                    SampleLabel label = SampleLabel::source) {
    if (n < 1) throw ParameterError("sample_uniform_box: need n >= 1");
    if (lo.size() != hi.size()) throw ParameterError("sample_uniform_box: dim mismatch");
    if (((hi - lo).array() <= 0.0).any())
        throw ParameterError("sample_uniform_box: need lo < hi coordinatewise");
    Philox gen(rng);
    Mat out(n, lo.size());
    for (int i = 0; i < n; ++i)
        for (Eigen::Index j = 0; j < lo.size(); ++j)
            out(i, j) = gen.uniform(lo[j], hi[j]);
    return SampleSet(std::move(out), label);
}

struct Moments {
    Vec mean;
    SquareMat cov;
};

/// Sample mean and unbiased (divisor n-1) sample covariance.
inline Moments empirical_moments(const SampleSet& s) {
    const auto n = s.n();
    if (n < 2) throw InsufficientDataError("empirical_moments: need n >= 2");
    Vec mean = s.data.colwise().mean().transpose();
    Mat centered = s.data.rowwise() - mean.transpose();
    SquareMat cov = (centered.transpose() * centered) / static_cast<double>(n - 1);
    return {std::move(mean), std::move(cov)};
}

}  // namespace rectflow
