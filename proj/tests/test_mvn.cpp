#include <catch2/catch_amalgamated.hpp>

#include <Eigen/Dense>
#include <cmath>
#include <numbers>

#include "aggext/errors.hpp"
#include "aggext/mvn.hpp"
#include "aggext/normal.hpp"

using namespace aggext;

namespace {
Eigen::MatrixXd equicorrelated(int m, double rho) {
    Eigen::MatrixXd s = Eigen::MatrixXd::Constant(m, m, rho);
    s.diagonal().setOnes();
    return s;
}
}  // namespace

TEST_CASE("normal quantile inverts the cdf") {
    for (double p : {1e-12, 1e-6, 0.01, 0.3, 0.5, 0.7, 0.975, 1.0 - 1e-9}) {
        const double x = norm_quantile(p);
        CHECK(norm_cdf(x) == Catch::Approx(p).epsilon(1e-10));
    }
    CHECK(norm_quantile(0.5) == 0.0);
    CHECK(std::isinf(norm_quantile(0.0)));
    CHECK(std::isinf(norm_quantile(1.0)));
    CHECK_THROWS_AS(norm_quantile(-0.1), domain_error);
    CHECK_THROWS_AS(norm_quantile(1.1), domain_error);
}

TEST_CASE("dimension zero and one are exact") {
    CHECK(mvn_cdf(Eigen::VectorXd(0), Eigen::MatrixXd(0, 0)).value == 1.0);

    Eigen::VectorXd b(1);
    Eigen::MatrixXd s(1, 1);
    b << 1.96;
    s << 4.0;
    const MvnResult r = mvn_cdf(b, s);
    CHECK(r.value == Catch::Approx(norm_cdf(0.98)).epsilon(1e-14));
    CHECK(r.error == 0.0);
}

TEST_CASE("independent coordinates factorize") {
    Eigen::VectorXd b(3);
    b << 0.3, -0.7, 1.2;
    Eigen::MatrixXd s = Eigen::MatrixXd::Identity(3, 3);
    s(1, 1) = 4.0;  // scale invariance folded in
    const double expect = norm_cdf(0.3) * norm_cdf(-0.35) * norm_cdf(1.2);
    const MvnResult r = mvn_cdf(b, s, {1e-6, 20, 2000000});
    CHECK(r.value == Catch::Approx(expect).margin(3e-6));
    CHECK(std::fabs(r.value - expect) <= std::max(r.error, 1e-8));
}

TEST_CASE("bivariate orthant with rho = 1/2 equals 1/3") {
    Eigen::VectorXd b = Eigen::VectorXd::Zero(2);
    const MvnResult r = mvn_cdf(b, equicorrelated(2, 0.5), {1e-6, 20, 2000000});
    CHECK(r.value == Catch::Approx(1.0 / 3.0).margin(5e-6));
}

TEST_CASE("trivariate orthant with rho = 1/2 equals 1/4") {
    Eigen::VectorXd b = Eigen::VectorXd::Zero(3);
    const MvnResult r = mvn_cdf(b, equicorrelated(3, 0.5), {1e-6, 20, 2000000});
    CHECK(r.value == Catch::Approx(0.25).margin(1e-5));
    CHECK(std::fabs(r.value - 0.25) <= std::max(r.error, 1e-6));
}

TEST_CASE("general bivariate agrees with the arcsine formula") {
    // P(X<=0, Y<=0) = 1/4 + asin(rho) / (2 pi).
    for (double rho : {-0.8, -0.3, 0.2, 0.7, 0.95}) {
        Eigen::VectorXd b = Eigen::VectorXd::Zero(2);
        const double expect = 0.25 + std::asin(rho) / (2.0 * std::numbers::pi);
        const MvnResult r = mvn_cdf(b, equicorrelated(2, rho), {1e-6, 20, 2000000});
        REQUIRE(r.value == Catch::Approx(expect).margin(1e-5));
    }
}

TEST_CASE("rank-deficient covariance reduces to the tight bound") {
    Eigen::MatrixXd s = Eigen::MatrixXd::Ones(2, 2);  // X1 = X2 a.s.
    Eigen::VectorXd b(2);
    b << 0.4, -1.0;
    const MvnResult r = mvn_cdf(b, s, {1e-5, 20, 500000});
    CHECK(r.value == Catch::Approx(norm_cdf(-1.0)).margin(1e-6));

    Eigen::MatrixXd z = Eigen::MatrixXd::Zero(2, 2);  // X = 0 a.s.
    Eigen::VectorXd ok(2), notok(2);
    ok << 0.0, 1.0;
    notok << 0.5, -0.1;
    CHECK(mvn_cdf(ok, z).value == 1.0);
    CHECK(mvn_cdf(notok, z).value == 0.0);
}

TEST_CASE("error estimate is honest in higher dimensions") {
    // 5-dim equicorrelated orthant, rho = 1/2: P = 1/6 (exchangeable ranks of
    // iid variables representation: X_i = (Z_i - Z_0)/sqrt(2) <= 0 for all i
    // iff Z_0 is the maximum of 6 iid normals).
    Eigen::VectorXd b = Eigen::VectorXd::Zero(5);
    const MvnResult r = mvn_cdf(b, equicorrelated(5, 0.5), {1e-5, 20, 4000000});
    CHECK(r.value == Catch::Approx(1.0 / 6.0).margin(2e-5));
    CHECK(std::fabs(r.value - 1.0 / 6.0) <= std::max(r.error, 3e-6));
}

TEST_CASE("deterministic for a fixed seed, including the fixed-size mode") {
    Eigen::VectorXd b(4);
    b << 0.5, -0.2, 1.0, 0.1;
    Eigen::MatrixXd s = equicorrelated(4, 0.3);
    const MvnResult a1 = mvn_cdf(b, s);
    const MvnResult a2 = mvn_cdf(b, s);
    CHECK(a1.value == a2.value);
    CHECK(a1.points == a2.points);

    MvnOptions crn;
    crn.points_per_shift = 1024;
    crn.n_shifts = 4;
    const MvnResult c1 = mvn_cdf(b, s, crn);
    const MvnResult c2 = mvn_cdf(b, s, crn);
    CHECK(c1.value == c2.value);
    CHECK(c1.points == 4096);
    // Coarse but in the right neighbourhood of the adaptive answer.
    CHECK(c1.value == Catch::Approx(a1.value).margin(5e-4));
}

TEST_CASE("option and dimension guards") {
    Eigen::VectorXd b = Eigen::VectorXd::Zero(26);
    CHECK_THROWS_AS(mvn_cdf(b, Eigen::MatrixXd::Identity(26, 26)), config_error);

    Eigen::VectorXd b2 = Eigen::VectorXd::Zero(2);
    MvnOptions bad;
    bad.tol = 1e-7;
    CHECK_THROWS_AS(mvn_cdf(b2, equicorrelated(2, 0.0), bad), config_error);
    CHECK_THROWS_AS(mvn_cdf(b2, Eigen::MatrixXd::Identity(3, 3)), config_error);
}
