#include <catch2/catch_amalgamated.hpp>

#include <cmath>

#include "rectflow/closedform.hpp"
#include "rectflow/estimators.hpp"
#include "rectflow/quadrature.hpp"
#include "rectflow/rng.hpp"

using namespace rectflow;
using namespace rectflow::closedform;

namespace {

Vec v1(double a) {
    Vec x(1);
    x << a;
    return x;
}

GaussianParams standard_pair_1d() { return GaussianParams::scalar(0.0, 1.0, 0.0, 1.0); }

/// Random symmetric PSD matrix with eigenvalues in [lo, hi].
SquareMat random_spd(int d, Philox& gen, double lo = 0.3, double hi = 3.0) {
    Mat raw(d, d);
    for (int i = 0; i < d; ++i)
        for (int j = 0; j < d; ++j) raw(i, j) = gen.normal();
    const Eigen::HouseholderQR<Mat> qr(raw);
    SquareMat q = qr.householderQ();
    Vec ev(d);
    for (int i = 0; i < d; ++i) ev[i] = gen.uniform(lo, hi);
    return q * ev.asDiagonal() * q.transpose();
}

}  // namespace

TEST_CASE("matrix_sqrt_psd: identity, diagonal, multiply-back, errors") {
    REQUIRE((matrix_sqrt_psd(SquareMat::Identity(3, 3)) - SquareMat::Identity(3, 3))
                .cwiseAbs()
                .maxCoeff() < 1e-14);

    SquareMat d2(2, 2);
    d2 << 4.0, 0.0, 0.0, 9.0;
    const SquareMat r = matrix_sqrt_psd(d2);
    REQUIRE(r(0, 0) == Catch::Approx(2.0));
    REQUIRE(r(1, 1) == Catch::Approx(3.0));

    SquareMat s(2, 2);
    s << 2.0, 1.0, 1.0, 2.0;
    const SquareMat rs = matrix_sqrt_psd(s);
    REQUIRE((rs * rs - s).cwiseAbs().maxCoeff() < 1e-12);

    SquareMat asym(2, 2);
    asym << 1.0, 0.5, 0.0, 1.0;
    REQUIRE_THROWS_AS(matrix_sqrt_psd(asym), ParameterError);
    SquareMat neg(1, 1);
    neg << -1.0;
    REQUIRE_THROWS_AS(matrix_sqrt_psd(neg), ParameterError);
}

TEST_CASE("gaussian_velocity: 1-D substitutions and endpoint identity") {
    const auto p = standard_pair_1d();
    // v_t(z) = (2t-1)/(t^2+(1-t)^2) z
    REQUIRE(gaussian_velocity(0.25, v1(1.0), p)[0] == Catch::Approx(-0.8));

    // equal marginals at t = 1/2: velocity vanishes identically
    const auto q = GaussianParams::scalar(0.3, 2.0, 0.3, 2.0);
    REQUIRE(gaussian_velocity(0.5, v1(5.0), q)[0] == Catch::Approx(0.0).margin(1e-14));

    // t = 0 reduces to E[X1] - z
    const auto r = GaussianParams::scalar(1.0, 1.0, -2.0, 3.0);
    REQUIRE(gaussian_velocity(0.0, v1(0.7), r)[0] == Catch::Approx(-2.0 - 0.7));
    REQUIRE(gaussian_velocity(1.0, v1(0.7), r)[0] == Catch::Approx(0.7 - 1.0));
}

TEST_CASE("gaussian_velocity: singular time covariance carries t") {
    // two rank-deficient covariances whose time mixture is singular at t = 0
    SquareMat s0(2, 2), s1(2, 2);
    s0 << 1.0, 0.0, 0.0, 0.0;
    s1 << 1.0, 0.0, 0.0, 1.0;
    Vec m = Vec::Zero(2);
    const GaussianParams p(m, s0, m, s1);
    try {
        gaussian_velocity(0.0, Vec::Zero(2), p);
        FAIL("expected SingularTimeError");
    } catch (const SingularTimeError& e) {
        REQUIRE(e.t == 0.0);
    }
    REQUIRE_NOTHROW(gaussian_velocity(0.5, Vec::Zero(2), p));
}

TEST_CASE("gaussian_rectified_map: identity, 1-D scale, commuting = OT") {
    const auto self = gaussian_rectified_map(standard_pair_1d());
    REQUIRE(self.A(0, 0) == Catch::Approx(1.0));
    REQUIRE(self.b[0] == Catch::Approx(0.0).margin(1e-14));

    const auto widen = gaussian_rectified_map(GaussianParams::scalar(0.0, 1.0, 0.0, 9.0));
    REQUIRE(widen.A(0, 0) == Catch::Approx(3.0));

    SquareMat s0(2, 2), s1(2, 2);
    s0 << 1.0, 0.0, 0.0, 4.0;
    s1 << 9.0, 0.0, 0.0, 4.0;
    const GaussianParams p(Vec::Zero(2), s0, Vec::Zero(2), s1);
    const auto rect = gaussian_rectified_map(p);
    const auto ot = gaussian_ot_map(p);
    REQUIRE(rect.A(0, 0) == Catch::Approx(3.0));
    REQUIRE(rect.A(1, 1) == Catch::Approx(1.0));
    REQUIRE((rect.A - ot.A).cwiseAbs().maxCoeff() < 1e-12);

    REQUIRE_THROWS_AS(
        gaussian_rectified_map(GaussianParams::scalar(0.0, 0.0, 0.0, 1.0)),
        ParameterError);
}

TEST_CASE("gaussian_ot_map: shift map and pushforward identity") {
    const auto shift =
        gaussian_ot_map(GaussianParams::scalar(1.0, 2.0, -1.0, 2.0));
    REQUIRE(shift.A(0, 0) == Catch::Approx(1.0));
    REQUIRE(shift.b[0] == Catch::Approx(-2.0));

    Philox gen(RngSpec{31, 0});
    for (int trial = 0; trial < 20; ++trial) {
        const int d = 3;
        const GaussianParams p(Vec::Zero(d), random_spd(d, gen), Vec::Zero(d),
                               random_spd(d, gen));
        const auto ot = gaussian_ot_map(p);
        REQUIRE((ot.A * p.S0 * ot.A.transpose() - p.S1).cwiseAbs().maxCoeff() < 1e-10);
        const auto rect = gaussian_rectified_map(p);
        REQUIRE((rect.A * p.S0 * rect.A.transpose() - p.S1).cwiseAbs().maxCoeff() < 1e-10);
    }
}

TEST_CASE("rectified map equals OT iff the covariances commute") {
    Philox gen(RngSpec{32, 0});
    int noncommuting_separated = 0;
    for (int trial = 0; trial < 50; ++trial) {
        const int d = 2 + static_cast<int>(gen.next_u32() % 4);  // up to 5
        // commuting pair: shared eigenvectors
        Mat raw(d, d);
        for (int i = 0; i < d; ++i)
            for (int j = 0; j < d; ++j) raw(i, j) = gen.normal();
        SquareMat q = Eigen::HouseholderQR<Mat>(raw).householderQ();
        Vec e0(d), e1(d);
        for (int i = 0; i < d; ++i) {
            e0[i] = gen.uniform(0.3, 3.0);
            e1[i] = gen.uniform(0.3, 3.0);
        }
        const GaussianParams commuting(Vec::Zero(d), q * e0.asDiagonal() * q.transpose(),
                                       Vec::Zero(d), q * e1.asDiagonal() * q.transpose());
        REQUIRE((gaussian_rectified_map(commuting).A - gaussian_ot_map(commuting).A)
                    .cwiseAbs()
                    .maxCoeff() < 1e-9);

        const GaussianParams general(Vec::Zero(d), random_spd(d, gen), Vec::Zero(d),
                                     random_spd(d, gen));
        if ((gaussian_rectified_map(general).A - gaussian_ot_map(general).A)
                .cwiseAbs()
                .maxCoeff() > 1e-6)
            ++noncommuting_separated;
    }
    REQUIRE(noncommuting_separated >= 45);
}

TEST_CASE("affine coupling velocity: self-coupling, 1-D scale, consistency errors") {
    const auto p = standard_pair_1d();
    const AffineMap identity{SquareMat::Identity(1, 1), Vec::Zero(1)};
    REQUIRE(gaussian_affine_coupling_velocity(0.3, v1(2.0), identity, p)[0] ==
            Catch::Approx(0.0).margin(1e-14));

    const auto p3 = GaussianParams::scalar(0.0, 1.0, 0.0, 9.0);
    AffineMap scale3{SquareMat::Identity(1, 1) * 3.0, Vec::Zero(1)};
    // (A-1)/(tA+1-t) (z - m_t) with A=3, t=0.5 -> z - m_t
    REQUIRE(gaussian_affine_coupling_velocity(0.5, v1(1.7), scale3, p3)[0] ==
            Catch::Approx(1.7));

    AffineMap wrong{SquareMat::Identity(1, 1) * 2.0, Vec::Zero(1)};
    REQUIRE_THROWS_AS(gaussian_affine_coupling_velocity(0.5, v1(0.0), wrong, p3),
                      ParameterError);
}

TEST_CASE("mixture_velocity: degenerate mixture, symmetry, quadrature oracle") {
    // single-component mixture reduces to the Gaussian velocity exactly
    MixtureHalf h0, h1;
    h0.weights = v1(1.0);
    h0.components = {{v1(0.5), SquareMat::Identity(1, 1)}};
    h1.weights = v1(1.0);
    h1.components = {{v1(-0.5), SquareMat::Identity(1, 1) * 2.0}};
    const MixtureParams single(h0, h1);
    const GaussianParams pair(v1(0.5), SquareMat::Identity(1, 1), v1(-0.5),
                              SquareMat::Identity(1, 1) * 2.0);
    for (double t : {0.2, 0.5, 0.8})
        REQUIRE(mixture_velocity(t, v1(0.7), single)[0] ==
                Catch::Approx(gaussian_velocity(t, v1(0.7), pair)[0]));

    // symmetric self-mixture at the symmetry center
    MixtureHalf sym;
    sym.weights.resize(2);
    sym.weights << 0.5, 0.5;
    sym.components = {{v1(1.0), SquareMat::Identity(1, 1)},
                      {v1(-1.0), SquareMat::Identity(1, 1)}};
    const MixtureParams self(sym, sym);
    for (double t : {0.1, 0.5, 0.9})
        REQUIRE(mixture_velocity(t, v1(0.0), self)[0] == Catch::Approx(0.0).margin(1e-12));

    // quadrature of the delta representation with the analytic mixture densities
    const double t = 0.5, z = 1.0;
    const auto density = estimators::make_mixture_density(sym);
    auto [nodes, weights] = quadrature::on_interval(400, -14.0, 16.0);
    double num = 0.0, den = 0.0;
    for (int i = 0; i < nodes.size(); ++i) {
        const double delta = nodes[i];
        const double r = density(v1(z - t * delta)) * density(v1(z + (1.0 - t) * delta));
        num += weights[i] * delta * r;
        den += weights[i] * r;
    }
    REQUIRE(mixture_velocity(t, v1(z), self)[0] == Catch::Approx(num / den).margin(1e-6));
}

TEST_CASE("mixture velocity field fast path matches the generic evaluation") {
    MixtureHalf h0, h1;
    h0.weights.resize(2);
    h0.weights << 0.3, 0.7;
    h0.components = {{v1(0.8), SquareMat::Identity(1, 1) * 0.6},
                     {v1(-1.2), SquareMat::Identity(1, 1) * 1.4}};
    h1.weights.resize(2);
    h1.weights << 0.5, 0.5;
    h1.components = {{v1(1.0), SquareMat::Identity(1, 1)},
                     {v1(-1.0), SquareMat::Identity(1, 1)}};
    const MixtureParams p(h0, h1);
    const auto field = mixture_velocity_field(p);
    for (double t : {0.05, 0.3, 0.5, 0.8, 0.95})
        for (double z : {-2.0, -0.4, 0.0, 1.3})
            REQUIRE(field.eval(t, v1(z))[0] ==
                    Catch::Approx(mixture_velocity(t, v1(z), p)[0]).epsilon(1e-12));
}

TEST_CASE("mixture velocity: endpoint identities and the component hull") {
    MixtureHalf h0, h1;
    h0.weights.resize(2);
    h0.weights << 0.4, 0.6;
    h0.components = {{v1(0.5), SquareMat::Identity(1, 1) * 0.8},
                     {v1(-1.5), SquareMat::Identity(1, 1) * 1.2}};
    h1.weights.resize(2);
    h1.weights << 0.7, 0.3;
    h1.components = {{v1(2.0), SquareMat::Identity(1, 1) * 0.5},
                     {v1(-0.5), SquareMat::Identity(1, 1)}};
    const MixtureParams p(h0, h1);
    const double mean0 = 0.4 * 0.5 + 0.6 * -1.5;
    const double mean1 = 0.7 * 2.0 + 0.3 * -0.5;
    for (double z : {-1.0, 0.3, 2.0}) {
        REQUIRE(mixture_velocity(0.0, v1(z), p)[0] == Catch::Approx(mean1 - z));
        REQUIRE(mixture_velocity(1.0, v1(z), p)[0] == Catch::Approx(z - mean0));
    }

    // the mixture velocity is a convex combination of the pair velocities
    Philox gen(RngSpec{35, 0});
    for (int trial = 0; trial < 400; ++trial) {
        const double t = gen.uniform(0.02, 0.98);
        const double z = gen.uniform(-3.0, 3.0);
        double lo = 1e300, hi = -1e300;
        for (const auto& [m0c, s0c] : h0.components)
            for (const auto& [m1c, s1c] : h1.components) {
                const double v =
                    gaussian_velocity(t, v1(z), GaussianParams(m0c, s0c, m1c, s1c))[0];
                lo = std::min(lo, v);
                hi = std::max(hi, v);
            }
        const double v = mixture_velocity(t, v1(z), p)[0];
        REQUIRE(v >= lo - 1e-12);
        REQUIRE(v <= hi + 1e-12);
    }
}

TEST_CASE("uniform_velocity: substitutions, symmetry, midpoint identity") {
    // branch z <= t at t = 0.25, z = 0.1
    REQUIRE(uniform_velocity(0.25, 0.1) == Catch::Approx(0.1 * 0.5 / (2.0 * 0.25 * 0.75)));
    for (double t : {0.1, 0.3, 0.6, 0.9})
        REQUIRE(uniform_velocity(t, 0.5) == Catch::Approx(0.0).margin(1e-14));

    const auto unit = geometry::ConvexBody::unit_interval();
    Philox gen(RngSpec{33, 0});
    for (int trial = 0; trial < 3000; ++trial) {
        const double t = gen.uniform(0.01, 0.99);
        const double z = gen.uniform(0.0, 1.0);
        const auto iv = geometry::st_interval_box(unit, t, v1(z));
        REQUIRE(uniform_velocity(t, z) ==
                Catch::Approx(0.5 * (iv.a[0] + iv.b[0])).margin(1e-14));
        // swapping the (identical) marginals and reflecting z fixes the field:
        // v_t(z) = v_{1-t}(1-z)
        REQUIRE(uniform_velocity(t, z) ==
                Catch::Approx(uniform_velocity(1.0 - t, 1.0 - z)).margin(1e-13));
        // reflecting z alone flips the sign at fixed t
        REQUIRE(uniform_velocity(t, z) ==
                Catch::Approx(-uniform_velocity(t, 1.0 - z)).margin(1e-13));
    }
    REQUIRE_THROWS_AS(uniform_velocity(0.5, 1.5), DomainError);
}

TEST_CASE("uniform velocity respects the Lipschitz envelope a(t)") {
    Philox gen(RngSpec{34, 0});
    for (int trial = 0; trial < 3000; ++trial) {
        const double t = gen.uniform(0.02, 0.98);
        const double z1 = gen.uniform(0.0, 1.0), z2 = gen.uniform(0.0, 1.0);
        const double lhs = std::abs(uniform_velocity(t, z1) - uniform_velocity(t, z2));
        REQUIRE(lhs <= uniform_lipschitz_bound(t) * std::abs(z1 - z2) + 1e-12);
    }
    REQUIRE(uniform_lipschitz_bound(0.5) == Catch::Approx(2.0));
    REQUIRE(uniform_lipschitz_bound(0.1) == Catch::Approx(1.0 / 0.18));
    REQUIRE(uniform_lipschitz_bound(0.3) == Catch::Approx(uniform_lipschitz_bound(0.7)));
}

TEST_CASE("gaussian_fundamental_matrix_1d: substitutions") {
    REQUIRE(gaussian_fundamental_matrix_1d(0.0, standard_pair_1d()) == Catch::Approx(1.0));
    REQUIRE(gaussian_fundamental_matrix_1d(1.0, standard_pair_1d()) == Catch::Approx(1.0));
    const auto p = GaussianParams::scalar(0.0, 1.0, 0.0, 9.0);
    REQUIRE(gaussian_fundamental_matrix_1d(0.0, p) == Catch::Approx(3.0));
    REQUIRE(gaussian_fundamental_matrix_1d(0.0, p) ==
            Catch::Approx(gaussian_rectified_map(p).A(0, 0)));
}

TEST_CASE("gaussian_clt_variance_1d: value at the standard pair, growth in |x|") {
    REQUIRE(gaussian_clt_variance_1d(0.0, standard_pair_1d()) == Catch::Approx(M_PI));
    const auto p = GaussianParams::scalar(0.0, 1.0, 0.0, 4.0);
    double prev = 0.0;
    for (double x : {0.0, 0.5, 1.0, 2.0, 3.0}) {
        const double cur = gaussian_clt_variance_1d(x, p);
        REQUIRE(cur > prev);
        prev = cur;
    }
}

TEST_CASE("closed-form fields match quadrature of the delta representation") {
    // gaussian pair
    const auto p = GaussianParams::scalar(0.2, 1.0, -0.4, 2.25);
    const auto p0 = estimators::make_gaussian_density(p.m0, p.S0);
    const auto p1 = estimators::make_gaussian_density(p.m1, p.S1);
    auto quad_velocity = [&](double t, double z, const estimators::DensityHandle& d0,
                             const estimators::DensityHandle& d1, double lo, double hi) {
        auto [nodes, weights] = quadrature::on_interval(600, lo, hi);
        double num = 0.0, den = 0.0;
        for (int i = 0; i < nodes.size(); ++i) {
            const double r =
                d0(v1(z - t * nodes[i])) * d1(v1(z + (1.0 - t) * nodes[i]));
            num += weights[i] * nodes[i] * r;
            den += weights[i] * r;
        }
        return num / den;
    };
    for (double t : {0.2, 0.5, 0.8})
        for (double z : {-1.0, 0.0, 1.5})
            REQUIRE(gaussian_velocity(t, v1(z), p)[0] ==
                    Catch::Approx(quad_velocity(t, z, p0, p1, -40.0, 40.0)).margin(1e-6));

    // uniform pair: the integrand is constant on the displacement window, so
    // quadrature over that window is exact
    const auto u = estimators::make_uniform_box_density(v1(0.0), v1(1.0));
    for (double t : {0.25, 0.5, 0.7})
        for (double z : {0.1, 0.5, 0.9}) {
            const double lo = std::max((z - 1.0) / t, -z / (1.0 - t));
            const double hi = std::min(z / t, (1.0 - z) / (1.0 - t));
            REQUIRE(uniform_velocity(t, z) ==
                    Catch::Approx(quad_velocity(t, z, u, u, lo, hi)).margin(1e-9));
        }
}
