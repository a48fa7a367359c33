#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <vector>

#include "rectflow/kde.hpp"
#include "rectflow/rng.hpp"

using namespace rectflow;
using namespace rectflow::kde;

namespace {

Vec v1(double a) {
    Vec x(1);
    x << a;
    return x;
}

Vec v2(double a, double b) {
    Vec x(2);
    x << a, b;
    return x;
}

/// Draws from the density p(x) = (1 + x)/1.5 on [0, 1] by CDF inversion.
SampleSet sample_tilted(int n, RngSpec rng) {
    Philox gen(rng);
    Mat data(n, 1);
    for (int i = 0; i < n; ++i)
        data(i, 0) = -1.0 + std::sqrt(1.0 + 3.0 * gen.uniform01());
    return SampleSet(data, SampleLabel::source);
}

double tilted_density(double x) { return (1.0 + x) / 1.5; }

}  // namespace

TEST_CASE("kde_eval: peak value, compact support, consistency, errors") {
    Mat one(1, 1);
    one << 0.4;
    const SampleSet single(one, SampleLabel::source);
    const double h = 0.25;
    REQUIRE(kde_eval(single, {KernelFamily::gaussian, 1}, h, v1(0.4)) ==
            Catch::Approx(std::pow(2.0 * M_PI, -0.5) / h));

    REQUIRE(kde_eval(single, {KernelFamily::epanechnikov, 1}, h, v1(0.4 + 10.0 * h + 10.0)) ==
            0.0);

    const auto big = sample_gaussian(v1(0.0), SquareMat::Identity(1, 1), 100000,
                                     RngSpec{501, 0});
    REQUIRE(std::abs(kde_eval(big, {KernelFamily::gaussian, 1}, 0.2, v1(0.0)) -
                     0.3989422804014327) < 0.05);

    REQUIRE_THROWS_AS(kde_eval(single, {KernelFamily::gaussian, 1}, 0.0, v1(0.0)),
                      ParameterError);
}

TEST_CASE("kde_eval: gaussian-kernel estimate integrates to one") {
    const auto s = sample_gaussian(v1(0.3), SquareMat::Identity(1, 1) * 1.5, 2000,
                                   RngSpec{502, 0});
    const double h = 0.25;
    const double lo = s.data.minCoeff() - 5.0 * h, hi = s.data.maxCoeff() + 5.0 * h;
    const int grid = 4000;
    double integral = 0.0;
    double prev = kde_eval(s, {KernelFamily::gaussian, 1}, h, v1(lo));
    for (int i = 1; i <= grid; ++i) {
        const double x = lo + (hi - lo) * i / grid;
        const double cur = kde_eval(s, {KernelFamily::gaussian, 1}, h, v1(x));
        integral += 0.5 * (prev + cur) * (hi - lo) / grid;
        prev = cur;
    }
    REQUIRE(std::abs(integral - 1.0) < 1e-3);
}

TEST_CASE("monomial_indices: graded order with first-differing-index ties") {
    const auto idx = monomial_indices(2, 2);
    const std::vector<std::vector<int>> expect = {
        {0, 1}, {1, 0}, {0, 2}, {1, 1}, {2, 0}};
    REQUIRE(idx == expect);
    REQUIRE(monomial_indices(1, 3) ==
            std::vector<std::vector<int>>{{1}, {2}, {3}});
}

TEST_CASE("boundary kernel: interior symmetric window keeps K = 1") {
    const auto unit = geometry::ConvexBody::unit_interval();
    const auto bk = boundary_kernel_construct(unit, v1(0.5), 0.1, 1);
    REQUIRE((bk.values.array() - 1.0).abs().maxCoeff() < 1e-10);
    const auto rep = kernel_moment_report(bk);
    REQUIRE(rep.zeroth_rel_err < 1e-10);
    REQUIRE(rep.max_moment < 1e-10);
}

TEST_CASE("boundary kernel at z = 0 on [0,1]: the affine hand solution") {
    const auto unit = geometry::ConvexBody::unit_interval();
    const double h = 0.1;
    const auto bk = boundary_kernel_construct(unit, v1(0.0), h, 1);
    // affine moment system on [0, h]: K(u) = 4 - 60 u
    REQUIRE(bk.vol == Catch::Approx(h).margin(1e-12));
    REQUIRE(bk.coef0 == Catch::Approx(4.0).margin(1e-9));
    REQUIRE(bk.coef[0] == Catch::Approx(-6.0).margin(1e-8));  // on u/h
    for (double u : {0.0, 0.03, 0.08})
        REQUIRE(bk(v1(u)) == Catch::Approx(4.0 - 60.0 * u).margin(1e-8));
    REQUIRE(bk(v1(-0.01)) == 0.0);  // outside the body
    REQUIRE(bk(v1(0.2)) == 0.0);    // outside the ball

    double m0 = 0.0, m1 = 0.0;
    for (Eigen::Index i = 0; i < bk.nodes.rows(); ++i) {
        m0 += bk.weights[i] * bk.values[i];
        m1 += bk.weights[i] * bk.values[i] * bk.nodes(i, 0);
    }
    REQUIRE(m0 == Catch::Approx(h).margin(1e-10));
    REQUIRE(std::abs(m1) < 1e-8);
}

TEST_CASE("boundary kernel: moment conditions at random 2-D points, m = 2") {
    Philox gen(RngSpec{503, 0});
    const auto box = geometry::ConvexBody::box(v2(0.0, 0.0), v2(1.0, 1.0));
    const auto ball = geometry::ConvexBody::ball(v2(0.5, 0.5), 0.5);
    for (int trial = 0; trial < 10; ++trial) {
        // mix of boundary and interior points
        const double edge = trial % 2 == 0 ? 0.0 : gen.uniform(0.0, 1.0);
        const Vec zb = v2(edge, gen.uniform(0.0, 1.0));
        const auto rep = kernel_moment_report(boundary_kernel_construct(box, zb, 0.15, 2));
        REQUIRE(rep.zeroth_rel_err < 1e-8);
        REQUIRE(rep.max_moment < 1e-8);

        const double ang = gen.uniform(0.0, 2.0 * M_PI);
        const double rad = trial % 2 == 0 ? 0.5 : gen.uniform(0.0, 0.45);
        const Vec zc = v2(0.5 + rad * std::cos(ang), 0.5 + rad * std::sin(ang));
        const auto repb =
            kernel_moment_report(boundary_kernel_construct(ball, zc, 0.12, 2));
        REQUIRE(repb.zeroth_rel_err < 1e-8);
        REQUIRE(repb.max_moment < 1e-8);
    }
}

TEST_CASE("kernel_moment_report: zeroed values break normalization by one") {
    const auto unit = geometry::ConvexBody::unit_interval();
    auto bk = boundary_kernel_construct(unit, v1(0.3), 0.05, 1);
    bk.values.setZero();
    const auto rep = kernel_moment_report(bk);
    REQUIRE(rep.zeroth_rel_err == Catch::Approx(1.0));
}

TEST_CASE("boundary_kde_eval: corrects the boundary bias of the uniform density") {
    const auto unit = geometry::ConvexBody::unit_interval();
    const auto s = sample_uniform_box(v1(0.0), v1(1.0), 100000, RngSpec{504, 0});
    const double h = 0.05;

    const double corrected0 = boundary_kde_eval(s, unit, h, 1, v1(0.0));
    REQUIRE(std::abs(corrected0 - 1.0) < 0.05);
    const double uncorrected0 = kde_eval(s, {KernelFamily::epanechnikov, 1}, h, v1(0.0));
    REQUIRE(std::abs(uncorrected0 - 0.5) < 0.05);  // classic halving at the edge

    REQUIRE(std::abs(boundary_kde_eval(s, unit, h, 1, v1(0.5)) - 1.0) < 0.05);

    // single observation exactly at z
    Mat one(1, 1);
    one << 0.3;
    const SampleSet single(one, SampleLabel::source);
    const auto bk = boundary_kernel_construct(unit, v1(0.3), h, 1);
    REQUIRE(boundary_kde_eval(single, bk) == Catch::Approx(bk(v1(0.0)) / bk.vol));
}

TEST_CASE("boundary kde: bias envelope and variance scaling on a tilted density") {
    const auto unit = geometry::ConvexBody::unit_interval();
    const int n = 500, reps = 200;
    const double beta = 1.0, envelope_c = 1.0;
    for (double z : {0.0, 0.5, 1.0}) {
        double prev_env = -1.0;
        std::vector<double> variances;
        for (double h : {0.1, 0.05}) {
            const auto bk = boundary_kernel_construct(unit, v1(z), h, 1);
            std::vector<double> vals;
            vals.reserve(reps);
            for (int r = 0; r < reps; ++r)
                vals.push_back(boundary_kde_eval(
                    sample_tilted(n, RngSpec{600 + static_cast<std::uint64_t>(r), 0}), bk));
            double mean = 0.0;
            for (double v : vals) mean += v;
            mean /= reps;
            double var = 0.0;
            for (double v : vals) var += (v - mean) * (v - mean);
            var /= reps - 1;
            const double se = std::sqrt(var / reps);

            const double envelope = envelope_c * std::pow(h, beta) + 3.0 * se;
            REQUIRE(std::abs(mean - tilted_density(z)) <= envelope);
            if (prev_env > 0.0) REQUIRE(prev_env / envelope >= 1.0);  // non-inflating
            // the deterministic h^beta component shrinks by 2 >= 1.8 per halving
            if (prev_env > 0.0)
                REQUIRE(envelope_c * std::pow(2.0 * h, beta) /
                            (envelope_c * std::pow(h, beta)) >=
                        1.8);
            prev_env = envelope;

            REQUIRE(var <= bk.kappa_max * bk.kappa_max * (2.0 / 1.5) / (n * bk.vol));
            variances.push_back(var);
        }
        const double inflation = variances[1] / variances[0];
        REQUIRE(inflation >= 1.5);
        REQUIRE(inflation <= 3.0);
    }
}
