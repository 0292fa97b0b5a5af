#include <catch2/catch_amalgamated.hpp>

#include <Eigen/Dense>
#include <cmath>
#include <vector>

#include "aggext/aggregation.hpp"
#include "aggext/coeff.hpp"
#include "aggext/covariates.hpp"
#include "aggext/errors.hpp"
#include "aggext/geometry.hpp"
#include "aggext/hr_core.hpp"
#include "aggext/normal.hpp"
#include "aggext/variogram.hpp"

using namespace aggext;

namespace {
const CovariateSurface kUnitA = CovariateSurface::constant(1.0);

Functional seg_cell(double x0, double x1, double y = 0.0) {
    return Functional::cell_average({x0, x1, y, y});
}

// Mean distance between two independent uniform points in the unit square.
constexpr double kSquareMeanDist = 0.5214054331647207;
}  // namespace

TEST_CASE("theta_power_1d closed form and domain") {
    CHECK(theta_power_1d(1.0, 1.0, 1.0) == Catch::Approx(std::exp(-1.0 / 12.0)).epsilon(1e-14));
    CHECK(theta_power_1d(1.0, 2.0, 1.0) == Catch::Approx(std::exp(-1.0 / 24.0)).epsilon(1e-14));
    CHECK(theta_power_1d(1.0, 1.5, 1.0) == Catch::Approx(std::exp(-1.0 / 17.5)).epsilon(1e-14));
    // T -> 0 gives complete dependence, theta -> 1.
    CHECK(theta_power_1d(1e-12, 1.0, 1.0) == Catch::Approx(1.0).margin(1e-12));
    // Enormous range parameter also gives theta -> 1.
    CHECK(theta_power_1d(1.0, 1.0, 1e9) == Catch::Approx(1.0).margin(1e-8));
    CHECK_THROWS_AS(theta_power_1d(0.0, 1.0, 1.0), domain_error);
    CHECK_THROWS_AS(theta_power_1d(-1.0, 1.0, 1.0), domain_error);
    CHECK_THROWS_AS(theta_power_1d(1.0, 2.5, 1.0), domain_error);
    CHECK_THROWS_AS(theta_power_1d(1.0, 1.0, 0.0), domain_error);
}

TEST_CASE("theta_avg_closed_form agrees with the 1D closed form") {
    struct Case {
        double T, alpha, lambda;
    };
    for (const Case& c : {Case{1.0, 1.0, 1.0}, Case{1.0, 0.7, 2.5}, Case{2.3, 1.8, 0.8}}) {
        VariogramParams p;
        p.alpha = c.alpha;
        p.lambda = c.lambda;
        const double got = theta_avg_closed_form({0.0, c.T, 0.0, 0.0}, kUnitA, p);
        const double want = theta_power_1d(c.T, c.alpha, c.lambda);
        CHECK(got == Catch::Approx(want).epsilon(1e-7));
    }
}

TEST_CASE("theta_avg_closed_form: unit square and bounds") {
    VariogramParams p;  // alpha = 1, lambda = 1
    const double got = theta_avg_closed_form({0.0, 1.0, 0.0, 1.0}, kUnitA, p);
    CHECK(got == Catch::Approx(std::exp(-kSquareMeanDist / 4.0)).epsilon(1e-7));
    CHECK(got > 0.0);
    CHECK(got <= 1.0);

    p.lambda = 1e9;
    CHECK(theta_avg_closed_form({0.0, 1.0, 0.0, 1.0}, kUnitA, p) ==
          Catch::Approx(1.0).margin(1e-8));
}

TEST_CASE("theta_avg_closed_form is monotone under refinement") {
    VariogramParams p;
    p.alpha = 1.3;
    p.lambda = 0.9;
    // Larger averaging windows diversify more: theta decreases.
    const double t_half = theta_avg_closed_form({0.0, 0.5, 0.0, 0.0}, kUnitA, p);
    const double t_one = theta_avg_closed_form({0.0, 1.0, 0.0, 0.0}, kUnitA, p);
    const double t_two = theta_avg_closed_form({0.0, 2.0, 0.0, 0.0}, kUnitA, p);
    CHECK(t_two < t_one);
    CHECK(t_one < t_half);
    // A sub-interval of [0,1] is less aggregated than the whole.
    const double t_sub = theta_avg_closed_form({0.3, 0.8, 0.0, 0.0}, kUnitA, p);
    CHECK(t_sub > t_one);
    CHECK(t_half <= 1.0);
}

TEST_CASE("theta_mc: point evaluation has extremal coefficient one") {
    VariogramParams p;
    p.alpha = 1.4;
    p.lambda = 2.0;
    // The grid anchor sits at the centroid, so a functional set symmetric
    // around x = 2 puts the point exactly on the anchor: theta = 1 exactly.
    const std::vector<Functional> fs{Functional::point_eval({2.0, 0.0}), seg_cell(0.0, 4.0)};
    const SpectralSampler sampler(fs, p, 16.0);
    const McEstimate at_anchor = theta_mc(fs[0], Xi{0.0}, kUnitA, sampler, 1000);
    CHECK(at_anchor.value == Catch::Approx(1.0).margin(1e-12));
    CHECK(at_anchor.se == Catch::Approx(0.0).margin(1e-12));

    // Off-anchor the estimate is Monte Carlo but still unbiased for 1.
    const std::vector<Functional> off{Functional::point_eval({0.5, 0.0}),
                                      Functional::point_eval({3.0, 0.0})};
    const SpectralSampler s2(off, p, 16.0);
    const McEstimate est = theta_mc(off[0], Xi{0.0}, kUnitA, s2, 200000, 99);
    CHECK(est.se > 0.0);
    CHECK(std::fabs(est.value - 1.0) < 3.0 * est.se);

    // xi != 0 path gives the same answer through the general estimator.
    const McEstimate gen = theta_mc(off[0], Xi{1.0}, kUnitA, s2, 200000, 99);
    CHECK(std::fabs(gen.value - 1.0) < 3.0 * gen.se);
}

TEST_CASE("theta_mc: 1D cell average matches the closed form") {
    VariogramParams p;  // alpha = 1, lambda = 1
    const std::vector<Functional> fs{seg_cell(0.0, 1.0)};
    const SpectralSampler sampler(fs, p);  // default 64 nodes per unit
    const McEstimate est = theta_mc(fs[0], Xi{0.0}, kUnitA, sampler, 100000, 2024);
    const double want = std::exp(-1.0 / 12.0);
    INFO("estimate " << est.value << " +- " << est.se << " target " << want);
    CHECK(est.se < 1e-3);
    CHECK(std::fabs(est.value - want) < 3.0 * est.se + 5e-5);
    CHECK(est.n == 100000);
}

TEST_CASE("theta_mc: max over two distant points reproduces the pair coefficient") {
    VariogramParams p;  // alpha = 1, lambda = 1: distance 4 -> Gamma = 4
    const std::vector<Functional> fs{Functional::max_of({{0.0, 0.0}, {4.0, 0.0}})};
    const SpectralSampler sampler(fs, p, 16.0);
    const McEstimate est = theta_mc(fs[0], Xi{1.0}, kUnitA, sampler, 200000, 31);
    const double want = 2.0 * norm_cdf(1.0);  // 2 Phi(sqrt(Gamma)/2)
    INFO("estimate " << est.value << " +- " << est.se << " target " << want);
    CHECK(std::fabs(est.value - want) < 3.0 * est.se);

    // The Gumbel-scale estimator requires a linear functional.
    CHECK_THROWS_AS(theta_mc(fs[0], Xi{0.0}, kUnitA, sampler, 100), unsupported_functional_error);
}

TEST_CASE("theta_mc: max coefficient lies in [1, m]") {
    VariogramParams p;
    p.alpha = 0.8;
    p.lambda = 1.7;
    const std::vector<Functional> fs{
        Functional::max_of({{0.0, 0.0}, {1.3, 0.0}, {2.9, 1.0}})};
    const SpectralSampler sampler(fs, p, 8.0);
    const McEstimate est = theta_mc(fs[0], Xi{1.0}, kUnitA, sampler, 100000, 7);
    CHECK(est.value >= 1.0 - 3.0 * est.se);
    CHECK(est.value <= 3.0 + 3.0 * est.se);
}

TEST_CASE("theta_mc: weighted sums are invariant to weight rescaling") {
    VariogramParams p;
    const std::vector<Point> pts{{0.0, 0.0}, {1.0, 0.0}};
    const std::vector<Functional> fs{Functional::weighted_sum(pts, {0.3, 0.7}),
                                     Functional::weighted_sum(pts, {1.5, 3.5})};
    const SpectralSampler sampler(fs, p, 16.0);
    const McEstimate a = theta_mc(fs[0], Xi{0.0}, kUnitA, sampler, 20000, 5);
    const McEstimate b = theta_mc(fs[1], Xi{0.0}, kUnitA, sampler, 20000, 5);
    CHECK(a.value == Catch::Approx(b.value).epsilon(1e-13));
}

TEST_CASE("theta_mc: doubling the grid moves the estimate by less than one SE") {
    VariogramParams p;
    p.alpha = 1.2;
    p.lambda = 0.8;
    const std::vector<Functional> fs{seg_cell(0.0, 1.0)};
    const SpectralSampler coarse(fs, p, 64.0);
    const SpectralSampler fine(fs, p, 128.0);
    const McEstimate a = theta_mc(fs[0], Xi{0.0}, kUnitA, coarse, 50000, 11);
    const McEstimate b = theta_mc(fs[0], Xi{0.0}, kUnitA, fine, 50000, 11);
    INFO("coarse " << a.value << " fine " << b.value << " se " << a.se);
    CHECK(std::fabs(a.value - b.value) < std::max(a.se, b.se));
}

TEST_CASE("theta_mc: nonconstant covariate shifts theta per the quadrature") {
    VariogramParams p;
    CovariateSurface a;
    a.basis = {CovariateBasis::constant(), CovariateBasis::coord_x()};
    a.coeffs = {1.0, 1.0};  // A(s) = 1 + x on [0,1]
    const std::vector<Functional> fs{seg_cell(0.0, 1.0)};
    const SpectralSampler sampler(fs, p);
    const McEstimate est = theta_mc(fs[0], Xi{0.0}, a, sampler, 100000, 17);
    const double want = std::exp(-11.0 / 135.0);  // closed form for A = 1 + x
    INFO("estimate " << est.value << " +- " << est.se << " target " << want);
    CHECK(std::fabs(est.value - want) < 3.0 * est.se + 5e-5);
}

TEST_CASE("multivariate_tail_mc: single functional reduces to Theorem 1") {
    VariogramParams p;
    const std::vector<Functional> fs{seg_cell(0.0, 1.0)};
    const SpectralSampler sampler(fs, p);
    const double x = 0.4;
    const McEstimate tail = multivariate_tail_mc(fs, Eigen::VectorXd::Constant(1, x), Xi{0.0},
                                                 kUnitA, sampler, 60000, 3);
    const McEstimate th = theta_mc(fs[0], Xi{0.0}, kUnitA, sampler, 60000, 4);
    const double want = th.value * std::exp(-x);
    CHECK(std::fabs(tail.value - want) < 3.0 * (tail.se + th.se * std::exp(-x)));
}

TEST_CASE("multivariate_tail_mc: point evaluations with nonzero index") {
    VariogramParams p;
    const std::vector<Functional> fs{Functional::point_eval({0.0, 0.0}),
                                     Functional::point_eval({2.0, 0.0})};
    const SpectralSampler sampler(fs, p, 16.0);
    SECTION("single point, xi = 1: value is 1/x") {
        const std::vector<Functional> one{fs[0]};
        const McEstimate est = multivariate_tail_mc(one, Eigen::VectorXd::Constant(1, 2.0),
                                                    Xi{1.0}, kUnitA, sampler, 200000, 8);
        CHECK(std::fabs(est.value - 0.5) < 3.0 * est.se);
    }
    SECTION("single point, xi = -0.5: value is |x|^{-1/xi}") {
        const std::vector<Functional> one{fs[0]};
        const McEstimate est = multivariate_tail_mc(one, Eigen::VectorXd::Constant(1, -2.0),
                                                    Xi{-0.5}, kUnitA, sampler, 200000, 9);
        CHECK(std::fabs(est.value - 4.0) < 3.0 * est.se);
    }
    SECTION("xi-domain violations throw") {
        Eigen::VectorXd x(2);
        x << 1.0, -1.0;
        CHECK_THROWS_AS(multivariate_tail_mc(fs, x, Xi{1.0}, kUnitA, sampler, 100), domain_error);
        x << 1.0, 1.0;
        CHECK_THROWS_AS(multivariate_tail_mc(fs, x, Xi{-0.5}, kUnitA, sampler, 100),
                        domain_error);
    }
    SECTION("two points, xi = 1: pair extremal dependence at equal levels") {
        // P(max of the two standardized values) at x = (1,1) tends to
        // V(0,0) = 2 Phi(sqrt(Gamma)/2) with Gamma = 2 here.
        const McEstimate est = multivariate_tail_mc(fs, Eigen::VectorXd::Constant(2, 1.0),
                                                    Xi{1.0}, kUnitA, sampler, 200000, 10);
        const double want = 2.0 * norm_cdf(0.5 * std::sqrt(2.0));
        CHECK(std::fabs(est.value - want) < 3.0 * est.se);
    }
}

TEST_CASE("multivariate_tail_mc: Gumbel case matches the exponent measure") {
    VariogramParams p;
    p.alpha = 1.1;
    p.lambda = 1.4;
    CovariateSurface a;
    a.basis = {CovariateBasis::constant(), CovariateBasis::coord_x()};
    a.coeffs = {0.5, 0.25};  // positive on [0,2]
    const std::vector<Functional> fs{seg_cell(0.0, 1.0), seg_cell(1.0, 2.0)};

    // Independent route 1: quadrature Gamma + exact bivariate exponent measure.
    const GammaMatrix gm = gamma_matrix(fs, a, p, {}, false);
    Eigen::VectorXd x(2);
    x << 0.3, -0.2;
    const HRModel model(gm.gamma);
    const double exact =
        exponent_measure_V(Eigen::VectorXd(x - Eigen::Map<const Eigen::VectorXd>(
                                                   gm.log_theta.data(), 2)),
                           model)
            .value;

    // Independent route 2: spectral Monte Carlo on the sampler grid.
    const SpectralSampler sampler(fs, p);
    const McEstimate est = multivariate_tail_mc(fs, x, Xi{0.0}, a, sampler, 131072, 12);
    INFO("mc " << est.value << " +- " << est.se << " exact " << exact);
    CHECK(std::fabs(est.value - exact) < 3.0 * est.se + 2e-4);
}

TEST_CASE("multivariate_tail_mc: shifting all levels scales by exp(-c)") {
    VariogramParams p;
    const std::vector<Functional> fs{seg_cell(0.0, 1.0), seg_cell(1.0, 2.0)};
    const SpectralSampler sampler(fs, p, 32.0);
    Eigen::VectorXd x(2);
    x << 0.1, 0.6;
    const double c = 0.7;
    const McEstimate base = multivariate_tail_mc(fs, x, Xi{0.0}, kUnitA, sampler, 20000, 21);
    const McEstimate shifted = multivariate_tail_mc(
        fs, Eigen::VectorXd(x.array() + c), Xi{0.0}, kUnitA, sampler, 20000, 21);
    CHECK(shifted.value == Catch::Approx(base.value * std::exp(-c)).epsilon(1e-12));
}

TEST_CASE("sampler and estimator argument validation") {
    VariogramParams p;
    const std::vector<Functional> fs{seg_cell(0.0, 1.0)};
    CHECK_THROWS_AS(SpectralSampler({}, p), config_error);
    CHECK_THROWS_AS(SpectralSampler(fs, p, 0.0), config_error);

    const SpectralSampler sampler(fs, p);
    CHECK_THROWS_AS(theta_mc(fs[0], Xi{0.0}, kUnitA, sampler, 1), config_error);
    // A point outside the sampled grid cannot be evaluated.
    CHECK_THROWS_AS(theta_mc(Functional::point_eval({9.0, 0.0}), Xi{0.0}, kUnitA, sampler, 100),
                    coverage_error);
    // Dimension mismatch between functionals and levels.
    CHECK_THROWS_AS(multivariate_tail_mc(fs, Eigen::VectorXd::Zero(2), Xi{0.0}, kUnitA, sampler,
                                         100),
                    config_error);
    // Covariate surfaces must stay positive on the support.
    CovariateSurface bad;
    bad.basis = {CovariateBasis::constant(), CovariateBasis::coord_x()};
    bad.coeffs = {0.0, 1.0};  // vanishes at x = 0
    CHECK_THROWS_AS(theta_mc(fs[0], Xi{0.0}, bad, sampler, 100), domain_error);
}
