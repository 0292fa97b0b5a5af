#include <catch2/catch_amalgamated.hpp>

#include <Eigen/Dense>
#include <cmath>
#include <string>
#include <vector>

#include "aggext/dataset.hpp"
#include "aggext/errors.hpp"
#include "aggext/fit.hpp"
#include "aggext/hr_core.hpp"
#include "aggext/model.hpp"
#include "aggext/pipeline.hpp"
#include "aggext/simulate.hpp"

using namespace aggext;
using Catch::Approx;
using Catch::Matchers::ContainsSubstring;

namespace {

std::vector<Date> consecutive_dates(long n) {
    std::vector<Date> out;
    out.reserve(static_cast<std::size_t>(n));
    Date d{2000, 1, 1};
    for (long i = 0; i < n; ++i) {
        out.push_back(d);
        ++d.day;
        if (d.day > detail::days_in_month(d.year, d.month)) {
            d.day = 1;
            ++d.month;
            if (d.month > 12) {
                d.month = 1;
                ++d.year;
            }
        }
    }
    return out;
}

// Four cells of unequal area (1, 2, 2, 4): the distinct extremal
// coefficients make the dependence parameters visible to the least-squares
// stage from marginal quantities alone.
AggDataset synthetic_dataset(long n, std::uint64_t seed) {
    AggDataset ds;
    ds.cell_ids = {"c0", "c1", "c2", "c3"};
    ds.cell_regions = {Region{0.0, 1.0, 0.0, 1.0}, Region{1.5, 3.5, 0.0, 1.0},
                       Region{0.0, 1.0, 1.5, 3.5}, Region{1.5, 3.5, 1.5, 3.5}};
    ds.cell_covariates.resize(4);
    ds.dates = consecutive_dates(n);

    AggregationScheme scheme;
    scheme.functionals = ds.cell_functionals();
    scheme.basis_a = {CovariateBasis::constant()};
    scheme.basis_b = {CovariateBasis::constant()};
    ModelParams truth;
    truth.a_t = 1.0;
    truth.b_t = 0.0;
    truth.theta_A = Eigen::VectorXd::Ones(1);
    truth.theta_B = Eigen::VectorXd::Zero(1);
    truth.theta_W = VariogramParams{1.2, 1.5, 0.0, 1.0};
    const ModelEngine engine(scheme);
    const ModelEngine::Eval ev = engine.evaluate(truth, true);
    const AggregatedSampler sampler(ev.gamma, ev.log_theta, ev.ell_a, ev.ell_b);

    ds.obs.resize(n, 4);
    for (long i = 0; i < n; ++i)
        ds.obs.row(i) = sampler.draw(seed, static_cast<std::uint64_t>(i)).y.transpose();
    ds.validate();
    return ds;
}

struct Fixture {
    AggDataset ds;
    StudyConfig cfg;
    PipelineOptions opt;
    PipelineResult fit;
};

const Fixture& fixture() {
    static const Fixture f = [] {
        Fixture x;
        x.ds = synthetic_dataset(400, 0x5eed0401ULL);
        x.cfg.threshold_quantile = 0.95;
        x.cfg.gap_days = 0;  // keep every exceedance day as its own event
        x.cfg.jackknife_blocks = 6;
        x.opt.ls.restarts = 1;
        x.opt.cens.restarts = 1;
        x.opt.cens.nm.max_iter = 350;
        x.opt.cens.nm.tol = 1e-8;
        x.fit = pipeline_fit(x.ds, x.cfg, x.opt);
        return x;
    }();
    return f;
}

}  // namespace

TEST_CASE("basis resolution maps names to covariate surfaces") {
    AggDataset ds = synthetic_dataset(40, 7u);
    for (std::size_t j = 0; j < 4; ++j)
        ds.cell_covariates[j]["alt"] = 10.0 * static_cast<double>(j);
    SampledField relief;
    relief.xs = {0.0, 2.0, 4.0};
    relief.ys = {0.0, 2.0, 4.0};
    relief.values = {1, 2, 3, 4, 5, 6, 7, 8, 9};
    ds.rasters["relief"] = relief;

    SECTION("constant, coordinates, raster, and per-cell covariates") {
        const auto basis =
            resolve_basis(ds, {"const", "x", "coord_y", "relief", "alt"});
        REQUIRE(basis.size() == 5);
        CHECK(basis[1].name == "x");
        CHECK(basis[2].name == "coord_y");
        CHECK(basis[3].name == "relief");
        CHECK(basis[4].name == "alt");
        // per-cell covariate evaluates to the cell's value inside the cell
        CHECK(basis[4](Point{0.5, 0.5}) == Approx(0.0));
        CHECK(basis[4](Point{2.0, 0.5}) == Approx(10.0));
    }

    SECTION("a raster shadows a per-cell covariate of the same name") {
        for (std::size_t j = 0; j < 4; ++j) ds.cell_covariates[j]["relief"] = -99.0;
        const auto basis = resolve_basis(ds, {"const", "relief"});
        CHECK(basis[1](Point{0.0, 0.0}) == Approx(1.0));  // raster corner, not -99
    }

    SECTION("configuration errors") {
        CHECK_THROWS_AS(resolve_basis(ds, {}), config_error);
        CHECK_THROWS_AS(resolve_basis(ds, {"alt", "const"}), config_error);
        CHECK_THROWS_AS(resolve_basis(ds, {"const", "const"}), config_error);
        ds.cell_covariates[2].erase("alt");
        CHECK_THROWS_WITH(resolve_basis(ds, {"const", "alt"}), ContainsSubstring("c2"));
    }

    SECTION("build_scheme assembles cells and bases") {
        BasisSpec spec;
        spec.a = {"const", "alt"};
        spec.b = {"const", "y"};
        const AggregationScheme s = build_scheme(ds, spec);
        CHECK(s.functionals.size() == 4);
        CHECK(s.basis_a.size() == 2);
        CHECK(s.basis_b.size() == 2);
        CHECK(s.n_cells() == 4);
    }
}

TEST_CASE("unflatten_params inverts flatten_params on the normalized gauge") {
    AggregationScheme scheme;
    scheme.functionals = {Functional::cell_average({0, 1, 0, 1}),
                          Functional::cell_average({1, 2, 0, 1})};
    scheme.basis_a = {CovariateBasis::constant(), CovariateBasis::coord_x()};
    scheme.basis_b = {CovariateBasis::constant(), CovariateBasis::coord_y()};

    ModelParams p;
    p.a_t = 2.1;
    p.b_t = -0.3;
    p.theta_A = Eigen::Vector2d(0.8, 0.4);   // reference mean: 0.8 + 0.4*0.5 = 1
    p.theta_B = Eigen::Vector2d(-0.4, 0.8);  // reference mean: -0.4 + 0.8*0.5 = 0
    p.theta_W = VariogramParams{0.9, 6.42, -0.08, 1.14};

    const Eigen::VectorXd flat = flatten_params(p);
    REQUIRE(flat.size() == 8);
    const ModelParams q = unflatten_params(flat, scheme);
    CHECK(q.a_t == Approx(p.a_t).margin(1e-14));
    CHECK(q.b_t == Approx(p.b_t).margin(1e-14));
    for (int c = 0; c < 2; ++c) {
        CHECK(q.theta_A[c] == Approx(p.theta_A[c]).margin(1e-14));
        CHECK(q.theta_B[c] == Approx(p.theta_B[c]).margin(1e-14));
    }
    CHECK(q.theta_W.alpha == Approx(0.9).margin(1e-14));
    CHECK(q.theta_W.lambda == Approx(6.42).margin(1e-14));
    CHECK(q.theta_W.eta == Approx(-0.08).margin(1e-14));
    CHECK(q.theta_W.aniso == Approx(1.14).margin(1e-14));

    SECTION("reconstruction always lands on the gauge") {
        ModelParams off = p;
        off.theta_A[0] = 0.9;  // violates the reference normalization
        const ModelParams fixed = unflatten_params(flatten_params(off), scheme);
        const auto [ra, rb] = reference_basis_means(scheme);
        double acc = 0.0;
        for (int c = 0; c < 2; ++c) acc += ra[c] * fixed.theta_A[c];
        CHECK(acc == Approx(1.0).margin(1e-14));
    }

    SECTION("length mismatch is rejected") {
        CHECK_THROWS_AS(unflatten_params(Eigen::VectorXd::Zero(5), scheme), config_error);
    }
}

TEST_CASE("pipeline fits synthetic aggregated data end to end") {
    const Fixture& f = fixture();
    const PipelineResult& r = f.fit;

    SECTION("stage bookkeeping") {
        CHECK(r.t == Approx(400.0));
        CHECK(r.margins.size() == 4);
        for (const MarginEstimate& e : r.margins) {
            CHECK(e.t == Approx(400.0));
            CHECK(e.n_exceed >= 10);
        }
        long positive = 0;
        for (double s : r.events.scores) positive += s > 0.0;
        CHECK(r.n_events == positive);  // gap 0 keeps every exceedance day
        CHECK(r.n_censored == 400 - positive);
        CHECK(r.n_rows == r.n_censored + r.n_events);
        CHECK(r.n_events >= 15);
    }

    SECTION("recovers the generating parameters at the observation level") {
        REQUIRE(r.censored.converged);
        const ModelParams& p = r.censored.params;
        // truth: a = 1, b = log 400 ~ 5.99, alpha = 1.2, lambda = 1.5
        CHECK(p.a_t == Approx(1.0).margin(0.35));
        CHECK(p.b_t == Approx(std::log(400.0)).margin(0.8));
        CHECK(p.theta_W.alpha == Approx(1.2).margin(0.7));
        CHECK(p.theta_W.lambda > 0.1);
        CHECK(p.theta_A[0] == Approx(1.0));  // pinned by the gauge
        CHECK(p.theta_B[0] == Approx(0.0).margin(1e-12));
        // The least-squares stage pins the scale from the margins; its
        // dependence estimate can be arbitrarily poor on four near-equal
        // cells, which is exactly what the censored stage must absorb.
        CHECK(r.ls.params.a_t == Approx(1.0).margin(0.6));
    }

    SECTION("jackknife covariance is attached") {
        CHECK(r.jackknife.n_used >= 4);
        REQUIRE(r.censored.jackknife_sd.size() == 6);
        CHECK(r.censored.jackknife_sd[0] > 0.0);  // a_n
        CHECK(r.censored.jackknife_sd[1] > 0.0);  // b_n
        CHECK(r.censored.jackknife_sd[4] == Approx(0.0).margin(1e-14));  // eta fixed
        CHECK(r.censored.jackknife_sd[5] == Approx(0.0).margin(1e-14));  // aniso fixed
        REQUIRE(r.jackknife.cov.rows() == 6);
        for (int a = 0; a < 6; ++a)
            CHECK(r.jackknife.cov(a, a) == Approx(r.censored.jackknife_sd[a] *
                                                  r.censored.jackknife_sd[a])
                                               .margin(1e-12));
    }

    SECTION("reported objective matches the documented likelihood rows") {
        // Rebuild the likelihood matrix the way the pipeline documents it:
        // fully censored days first, then the retained events, in time order.
        std::vector<long> rows;
        for (long i = 0; i < f.ds.n(); ++i)
            if (!(r.events.scores[i] > 0.0)) rows.push_back(i);
        for (long i : r.events.event_rows) rows.push_back(i);
        REQUIRE(static_cast<long>(rows.size()) == r.n_rows);
        Eigen::MatrixXd y_ll(r.n_rows, 4);
        for (long i = 0; i < r.n_rows; ++i) y_ll.row(i) = f.ds.obs.row(rows[static_cast<std::size_t>(i)]);
        const ModelEngine engine(r.scheme);
        const double ll = censored_loglik(r.censored.params, engine, y_ll, r.events.thresholds,
                                          r.t, f.opt.cens.ll);
        CHECK(ll == Approx(r.censored.objective).margin(1e-8));
    }

    SECTION("engine evaluation is invariant under cell reordering") {
        const std::vector<int> perm{2, 0, 3, 1};
        AggregationScheme ps = r.scheme;
        for (int j = 0; j < 4; ++j)
            ps.functionals[static_cast<std::size_t>(j)] =
                r.scheme.functionals[static_cast<std::size_t>(perm[j])];
        const ModelEngine e1(r.scheme), e2(ps);
        const ModelEngine::Eval v1 = e1.evaluate(r.censored.params, true);
        const ModelEngine::Eval v2 = e2.evaluate(r.censored.params, true);
        for (int j = 0; j < 4; ++j) {
            CHECK(v2.mu[j] == Approx(v1.mu[perm[j]]).margin(1e-12));
            CHECK(v2.sigma[j] == Approx(v1.sigma[perm[j]]).margin(1e-12));
            for (int k = 0; k < 4; ++k)
                CHECK(v2.gamma(j, k) == Approx(v1.gamma(perm[j], perm[k])).margin(1e-12));
        }
    }

    SECTION("fit report is readable") {
        const std::string rep = fit_report(r);
        CHECK_THAT(rep, ContainsSubstring("cells: 4"));
        CHECK_THAT(rep, ContainsSubstring("alpha"));
        CHECK_THAT(rep, ContainsSubstring("lambda"));
        CHECK_THAT(rep, ContainsSubstring("(fixed)"));
        CHECK_THAT(rep, ContainsSubstring("converged: yes"));
        CHECK_THAT(rep, ContainsSubstring("std.error"));
    }
}

TEST_CASE("pipeline rejects unusable inputs with stage attribution") {
    SECTION("a single cell is not identifiable") {
        AggDataset ds = synthetic_dataset(40, 11u);
        AggDataset one;
        one.obs = ds.obs.col(0);
        one.dates = ds.dates;
        one.cell_ids = {"c0"};
        one.cell_regions = {ds.cell_regions[0]};
        one.cell_covariates.resize(1);
        CHECK_THROWS_WITH(pipeline_fit(one, StudyConfig{}), ContainsSubstring("single cell"));
    }

    SECTION("level t must exceed one") {
        AggDataset ds = synthetic_dataset(40, 11u);
        StudyConfig cfg;
        cfg.t = 0.5;
        CHECK_THROWS_AS(pipeline_fit(ds, cfg), config_error);
    }

    SECTION("a degenerate cell is reported by name in the margins stage") {
        Fixture broken;
        broken.ds = synthetic_dataset(400, 0x5eed0401ULL);
        broken.ds.obs.col(2).setConstant(1.0);
        StudyConfig cfg;
        cfg.threshold_quantile = 0.95;
        try {
            pipeline_fit(broken.ds, cfg);
            FAIL("expected a margins-stage failure");
        } catch (const data_error& e) {
            const std::string msg = e.what();
            CHECK_THAT(msg, ContainsSubstring("stage 'margins'"));
            CHECK_THAT(msg, ContainsSubstring("c2"));
        }
    }
}

TEST_CASE("return levels follow the fitted tail") {
    AggregationScheme scheme;
    scheme.functionals = {Functional::cell_average({0, 1, 0, 1}),
                          Functional::cell_average({1, 2, 0, 1})};
    scheme.basis_a = {CovariateBasis::constant(), CovariateBasis::coord_x()};
    scheme.basis_b = {CovariateBasis::constant(), CovariateBasis::coord_y()};
    ModelParams p;
    p.a_t = 2.0;
    p.b_t = 1.0;
    p.theta_A = Eigen::Vector2d(0.8, 0.4);
    p.theta_B = Eigen::Vector2d(-0.4, 0.8);

    const std::vector<Point> pts{{0, 0}, {1, 1}, {0.5, 0.5}, {2, 0.3}};
    const std::vector<double> periods{2, 5, 10, 20, 50, 100};
    const double t = 6200.0;
    const Eigen::MatrixXd x = return_levels(p, scheme, pts, periods, t, 62.0);
    REQUIRE(x.rows() == 4);
    REQUIRE(x.cols() == 6);

    SECTION("monotone in the return period") {
        for (int i = 0; i < 4; ++i)
            for (int k = 1; k < 6; ++k) CHECK(x(i, k) > x(i, k - 1));
    }

    SECTION("doubling the period adds A(s) * a(t) * log 2 exactly") {
        for (int i = 0; i < 4; ++i) {
            const double A = 0.8 + 0.4 * pts[static_cast<std::size_t>(i)].x;
            CHECK(x(i, 3) - x(i, 2) == Approx(A * p.a_t * std::log(2.0)).margin(1e-12));
            CHECK(x(i, 5) - x(i, 4) == Approx(A * p.a_t * std::log(2.0)).margin(1e-12));
        }
    }

    SECTION("affine surfaces give affine levels in space") {
        for (int k = 0; k < 6; ++k)
            CHECK(0.5 * (x(0, k) + x(1, k)) == Approx(x(2, k)).margin(1e-12));
    }

    SECTION("a period of t / obs_per_year recovers b(t) on the data scale") {
        const Eigen::MatrixXd x0 =
            return_levels(p, scheme, pts, {t / 62.0}, t, 62.0);
        for (int i = 0; i < 4; ++i) {
            const double A = 0.8 + 0.4 * pts[static_cast<std::size_t>(i)].x;
            const double B = -0.4 + 0.8 * pts[static_cast<std::size_t>(i)].y;
            CHECK(x0(i, 0) == Approx(B + A * p.b_t).margin(1e-12));
        }
    }

    SECTION("constant surfaces give flat maps") {
        AggregationScheme flat = scheme;
        flat.basis_a = {CovariateBasis::constant()};
        flat.basis_b = {CovariateBasis::constant()};
        ModelParams q;
        q.a_t = 2.0;
        q.b_t = 1.0;
        q.theta_A = Eigen::VectorXd::Ones(1);
        q.theta_B = Eigen::VectorXd::Zero(1);
        const Eigen::MatrixXd xf = return_levels(q, flat, {{0, 0}, {5, 5}}, {10.0}, t);
        CHECK(xf(0, 0) == Approx(xf(1, 0)).margin(1e-12));
    }

    SECTION("domain and configuration errors") {
        CHECK_THROWS_AS(return_levels(p, scheme, {{-2.0, 0.0}}, {10.0}, t), domain_error);
        CHECK_THROWS_AS(return_levels(p, scheme, pts, periods, 0.0), config_error);
        CHECK_THROWS_AS(return_levels(p, scheme, {}, periods, t), config_error);
        CHECK_THROWS_AS(return_levels(p, scheme, pts, {-1.0}, t), config_error);
        CHECK_THROWS_AS(return_levels(p, scheme, pts, periods, t, 0.0), config_error);
    }
}

TEST_CASE("diagnostics produce QQ tables and extremograms") {
    const Fixture& f = fixture();
    DiagnosticsOptions dopt;
    dopt.quantile = 0.95;
    dopt.n_boot = 200;
    dopt.seed = 99;
    const DiagnosticsResult d = diagnostics(f.ds, f.fit, dopt);

    SECTION("QQ rows cover the per-cell exceedances") {
        REQUIRE(!d.qq.empty());
        for (int j = 0; j < 4; ++j) {
            std::vector<double> col(f.ds.obs.col(j).data(), f.ds.obs.col(j).data() + f.ds.n());
            const double u = empirical_quantile(col, dopt.quantile);
            long expect = 0;
            for (double v : col) expect += v > u;
            long got = 0;
            for (const QqRow& row : d.qq) got += row.cell == j;
            CHECK(got == expect);
        }
        int last_cell = -1;
        double last_p = 0.0, last_emp = 0.0, last_model = 0.0;
        for (const QqRow& row : d.qq) {
            if (row.cell != last_cell) {
                last_cell = row.cell;
            } else {
                CHECK(row.p > last_p);
                CHECK(row.empirical <= last_emp);
                CHECK(row.model < last_model);
            }
            CHECK(row.p > 0.0);
            CHECK(row.p < 1.0);
            CHECK(std::isfinite(row.model));
            CHECK(row.lo <= row.hi);
            last_p = row.p;
            last_emp = row.empirical;
            last_model = row.model;
        }
    }

    SECTION("bands come from the jackknife covariance and are reproducible") {
        bool some_width = false;
        for (const QqRow& row : d.qq) some_width = some_width || row.hi > row.lo;
        CHECK(some_width);
        const DiagnosticsResult d2 = diagnostics(f.ds, f.fit, dopt);
        REQUIRE(d2.qq.size() == d.qq.size());
        for (std::size_t i = 0; i < d.qq.size(); ++i) {
            CHECK(d2.qq[i].lo == d.qq[i].lo);
            CHECK(d2.qq[i].hi == d.qq[i].hi);
        }
    }

    SECTION("without a jackknife the bands collapse onto the model") {
        PipelineResult bare = f.fit;
        bare.jackknife = JackknifeResult{};
        const DiagnosticsResult db = diagnostics(f.ds, bare, dopt);
        for (const QqRow& row : db.qq) {
            CHECK(row.lo == row.model);
            CHECK(row.hi == row.model);
        }
    }

    SECTION("extremogram pairs carry geometry and the fitted tail dependence") {
        REQUIRE(d.extremogram.size() == 6);
        const ModelEngine engine(f.fit.scheme);
        const ModelEngine::Eval ev = engine.evaluate(f.fit.censored.params, true);
        for (const ExtremogramRow& row : d.extremogram) {
            REQUIRE(row.cell_j < row.cell_k);
            const Point cj =
                f.fit.scheme.functionals[static_cast<std::size_t>(row.cell_j)].region.centroid();
            const Point ck =
                f.fit.scheme.functionals[static_cast<std::size_t>(row.cell_k)].region.centroid();
            CHECK(row.distance ==
                  Approx(std::hypot(ck.x - cj.x, ck.y - cj.y)).margin(1e-12));
            CHECK(row.direction > -1.5707963267948966);
            CHECK(row.direction <= 1.5707963267948966);
            CHECK(row.empirical >= 0.0);
            CHECK(row.empirical <= 1.0);
            CHECK(row.theoretical > 0.0);
            CHECK(row.theoretical <= 1.0);
            CHECK(row.theoretical ==
                  Approx(chi_pair(ev.gamma(row.cell_j, row.cell_k))).margin(1e-12));
            CHECK(row.n_cond > 0);
        }
    }

    SECTION("configuration validation") {
        DiagnosticsOptions bad;
        bad.quantile = 0.4;
        CHECK_THROWS_AS(diagnostics(f.ds, f.fit, bad), config_error);
    }
}

TEST_CASE("simulation study runs deterministically on a small grid") {
    SimStudyConfig cfg;
    cfg.reps = 2;
    cfg.n = 1200;
    cfg.grid_side = 2;
    cfg.bm_block = 60;
    cfg.n_exceed = 60;
    cfg.seed = 0x51a10ULL;
    cfg.ls.restarts = 1;
    cfg.cens.restarts = 0;
    cfg.cens.nm.max_iter = 400;
    cfg.cens.nm.tol = 1e-5;

    const SimStudyResult r = simstudy(cfg);
    REQUIRE(r.names == std::vector<std::string>{"a_t", "a0", "a1", "b_t", "b0", "b2", "alpha",
                                                "lambda"});
    CHECK(r.reps_requested == 2);
    CHECK(r.used_ls + r.failed_ls == 2);
    CHECK(r.used_censored + r.failed_censored == 2);
    REQUIRE(r.used_ls >= 1);
    REQUIRE(r.used_censored >= 1);
    REQUIRE(r.rmse_ls.size() == 8);
    REQUIRE(r.rmse_censored.size() == 8);
    for (int i = 0; i < 8; ++i) {
        CHECK(std::isfinite(r.rmse_ls[i]));
        CHECK(r.rmse_ls[i] >= 0.0);
        CHECK(std::isfinite(r.rmse_censored[i]));
        CHECK(r.rmse_censored[i] >= 0.0);
    }

    SECTION("table layout") {
        const std::string csv = r.table_csv();
        CHECK_THAT(csv, ContainsSubstring("method,a_t,a0,a1,b_t,b0,b2,alpha,lambda,mean\n"));
        CHECK_THAT(csv, ContainsSubstring("\ncensored,"));
        CHECK_THAT(csv, ContainsSubstring("\nleast_squares,"));
    }

    SECTION("bit-identical rerun") {
        const SimStudyResult r2 = simstudy(cfg);
        REQUIRE(r2.rmse_censored.size() == r.rmse_censored.size());
        for (int i = 0; i < 8; ++i) {
            CHECK(r2.rmse_censored[i] == r.rmse_censored[i]);
            CHECK(r2.rmse_ls[i] == r.rmse_ls[i]);
        }
        CHECK(r2.used_censored == r.used_censored);
    }

    SECTION("configuration validation") {
        SimStudyConfig bad = cfg;
        bad.reps = 0;
        CHECK_THROWS_AS(simstudy(bad), config_error);
        bad = cfg;
        bad.grid_side = 1;
        CHECK_THROWS_AS(simstudy(bad), config_error);
        bad = cfg;
        bad.n_exceed = bad.n;
        CHECK_THROWS_AS(simstudy(bad), config_error);
    }
}
