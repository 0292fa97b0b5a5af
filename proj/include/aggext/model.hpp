#pragma once

#include <Eigen/Dense>
#include <cmath>
#include <optional>
#include <utility>
#include <vector>

#include "aggext/aggregation.hpp"
#include "aggext/coeff.hpp"
#include "aggext/covariates.hpp"
#include "aggext/errors.hpp"
#include "aggext/geometry.hpp"
#include "aggext/variogram.hpp"

namespace aggext {

// The observation layout a model is fitted on: aggregation functionals
// (cells first, then points) plus the covariate bases of the two surfaces.
// The first basis function of each surface must be the intercept; it is the
// coefficient eliminated by the identifiability constraints.
struct AggregationScheme {
    std::vector<Functional> functionals;
    std::vector<CovariateBasis> basis_a{CovariateBasis::constant()};
    std::vector<CovariateBasis> basis_b{CovariateBasis::constant()};
    QuadratureRule quad;

    int size() const { return static_cast<int>(functionals.size()); }

    int n_cells() const {
        int n = 0;
        for (const Functional& f : functionals)
            if (f.kind == FunctionalKind::CellAverage) ++n;
        return n;
    }
    int n_points() const { return size() - n_cells(); }

    void validate() const {
        if (functionals.empty()) throw config_error("AggregationScheme: no functionals");
        if (basis_a.empty() || basis_b.empty())
            throw config_error("AggregationScheme: empty covariate basis");
        if (basis_a[0].kind != CovariateBasis::Kind::Constant ||
            basis_b[0].kind != CovariateBasis::Kind::Constant)
            throw config_error(
                "AggregationScheme: the first basis function of each surface must be the "
                "intercept");
        quad.validate();
        bool seen_point = false;
        for (const Functional& f : functionals) {
            switch (f.kind) {
                case FunctionalKind::CellAverage:
                    if (seen_point)
                        throw config_error(
                            "AggregationScheme: functionals must be ordered cells first, "
                            "points second");
                    f.region.validate();
                    break;
                case FunctionalKind::PointEval: seen_point = true; break;
                default:
                    throw unsupported_functional_error(
                        "AggregationScheme: only CellAverage and PointEval are supported");
            }
        }
    }
};

// Complete parameter vector: normalization pair (a_t, b_t) at the working
// level t, surface coefficients, and the variogram of the latent process.
struct ModelParams {
    double a_t = 1.0;
    double b_t = 0.0;
    Eigen::VectorXd theta_A = Eigen::VectorXd::Ones(1);
    Eigen::VectorXd theta_B = Eigen::VectorXd::Zero(1);
    VariogramParams theta_W;

    void validate() const {
        if (!(a_t > 0.0) || !std::isfinite(a_t))
            throw domain_error("ModelParams: a_t must be finite and > 0");
        if (!std::isfinite(b_t)) throw domain_error("ModelParams: b_t must be finite");
        if (theta_A.size() == 0 || theta_B.size() == 0)
            throw config_error("ModelParams: empty surface coefficients");
        if (!theta_A.allFinite() || !theta_B.allFinite())
            throw domain_error("ModelParams: surface coefficients must be finite");
        theta_W.validate();
    }
};

// ell_1 of each basis function (row 0 of basis_means), used both by the
// identifiability normalization and by the coefficient elimination in the
// fitting transforms.
inline std::pair<Eigen::RowVectorXd, Eigen::RowVectorXd> reference_basis_means(
    const AggregationScheme& scheme) {
    const std::vector<Functional> first{scheme.functionals.front()};
    Eigen::RowVectorXd ra = basis_means(first, scheme.basis_a, scheme.quad).row(0);
    Eigen::RowVectorXd rb = basis_means(first, scheme.basis_b, scheme.quad).row(0);
    return {ra, rb};
}

// Canonical representative of the parameter equivalence class:
// ell_1{A} = 1 via the exact model-preserving rescale (theta_A/c, c*a_t,
// c*b_t), then ell_1{B} = 0 by moving the B-intercept into b_t (exact at the
// reference functional).
inline ModelParams normalize_identifiability(ModelParams p, const AggregationScheme& scheme) {
    scheme.validate();
    p.validate();
    const auto [ra, rb] = reference_basis_means(scheme);
    if (ra.size() != p.theta_A.size() || rb.size() != p.theta_B.size())
        throw config_error("normalize_identifiability: coefficient/basis size mismatch");
    const double c = ra.dot(p.theta_A);
    if (!(c > 0.0) || !std::isfinite(c))
        throw domain_error("normalize_identifiability: ell_1{A} must be positive");
    p.theta_A /= c;
    p.a_t *= c;
    p.b_t *= c;
    const double d = rb.dot(p.theta_B);
    if (rb[0] == 0.0)
        throw config_error("normalize_identifiability: degenerate B intercept at functional 1");
    p.theta_B[0] -= d / rb[0];
    p.b_t += d;
    return p;
}

// Precomputed quadrature tables for repeated evaluation of the model map
// theta -> (mu_j, sigma_j) and of the dependence matrix Gamma at varying
// parameters over a fixed scheme.  Construction is the expensive part; each
// evaluate() costs one pass over the cached nodes.
class ModelEngine {
  public:
    explicit ModelEngine(AggregationScheme scheme) : scheme_(std::move(scheme)) {
        scheme_.validate();
        full_.emplace(scheme_.functionals, scheme_.basis_a, scheme_.quad);
        means_a_ = basis_means(scheme_.functionals, scheme_.basis_a, scheme_.quad);
        means_b_ = basis_means(scheme_.functionals, scheme_.basis_b, scheme_.quad);
        for (const Functional& f : scheme_.functionals) {
            if (f.kind != FunctionalKind::CellAverage) break;
            diag_.emplace_back(std::vector<Functional>{f}, scheme_.basis_a, scheme_.quad);
        }
    }

    const AggregationScheme& scheme() const { return scheme_; }
    int size() const { return scheme_.size(); }
    int n_cells() const { return static_cast<int>(diag_.size()); }
    int n_points() const { return size() - n_cells(); }
    const Eigen::MatrixXd& means_a() const { return means_a_; }
    const Eigen::MatrixXd& means_b() const { return means_b_; }

    struct Eval {
        Eigen::VectorXd mu;         // location per functional
        Eigen::VectorXd sigma;      // scale per functional (> 0)
        Eigen::VectorXd log_theta;  // log extremal coefficient (0 for points)
        Eigen::VectorXd ell_a;      // ell_j{A}
        Eigen::VectorXd ell_b;      // ell_j{B}
        Eigen::MatrixXd gamma;      // (L+K)^2 dependence matrix; empty unless requested
    };

    Eval evaluate(const ModelParams& p, bool need_gamma) const {
        p.validate();
        if (p.theta_A.size() != means_a_.cols() || p.theta_B.size() != means_b_.cols())
            throw config_error("ModelEngine: coefficient/basis size mismatch");
        const int m = size(), L = n_cells();

        Eval ev;
        ev.ell_b = means_b_ * p.theta_B;
        if (need_gamma) {
            SchemeQuadrature::Evaluation q = full_->evaluate(p.theta_A, p.theta_W);
            ev.gamma = std::move(q.gamma);
            ev.log_theta = std::move(q.log_theta);
            ev.ell_a = std::move(q.ell_a);
        } else {
            ev.log_theta = Eigen::VectorXd::Zero(m);
            ev.ell_a = means_a_ * p.theta_A;
            for (int j = 0; j < L; ++j) {
                SchemeQuadrature::Evaluation q = diag_[j].evaluate(p.theta_A, p.theta_W);
                ev.log_theta[j] = q.log_theta[0];
                ev.ell_a[j] = q.ell_a[0];
            }
            for (int j = L; j < m; ++j)
                if (!(ev.ell_a[j] > 0.0))
                    throw domain_error(
                        "ModelEngine: covariate surface A must be strictly positive");
        }

        ev.mu.resize(m);
        ev.sigma.resize(m);
        for (int j = 0; j < m; ++j) {
            ev.mu[j] = ev.ell_a[j] * (p.b_t + p.a_t * ev.log_theta[j]) + ev.ell_b[j];
            ev.sigma[j] = p.a_t * ev.ell_a[j];
            if (!(ev.sigma[j] > 0.0))
                throw domain_error("ModelEngine: sigma must be positive");
        }
        return ev;
    }

  private:
    AggregationScheme scheme_;
    std::optional<SchemeQuadrature> full_;
    std::vector<SchemeQuadrature> diag_;
    Eigen::MatrixXd means_a_, means_b_;
};

// One-shot model map.  The level t only labels which normalization pair
// (a_t, b_t) the caller is using; it does not enter the formula.  Cell
// extremal coefficients go through theta_avg_closed_form so the quadrature
// convergence check runs; fitting loops should prefer ModelEngine.
inline std::pair<Eigen::VectorXd, Eigen::VectorXd> model_mu_sigma(
    const ModelParams& p, const AggregationScheme& scheme, double t) {
    scheme.validate();
    p.validate();
    if (!(t > 0.0) || !std::isfinite(t)) throw config_error("model_mu_sigma: level t must be > 0");

    CovariateSurface A{scheme.basis_a,
                       std::vector<double>(p.theta_A.data(), p.theta_A.data() + p.theta_A.size())};
    CovariateSurface B{scheme.basis_b,
                       std::vector<double>(p.theta_B.data(), p.theta_B.data() + p.theta_B.size())};

    const int m = scheme.size();
    Eigen::VectorXd mu(m), sigma(m);
    for (int j = 0; j < m; ++j) {
        const Functional& f = scheme.functionals[j];
        double ell_a, ell_b, log_theta;
        if (f.kind == FunctionalKind::CellAverage) {
            ell_a = cell_mean([&](double x, double y) { return A({x, y}); }, f.region, scheme.quad);
            ell_b = cell_mean([&](double x, double y) { return B({x, y}); }, f.region, scheme.quad);
            log_theta = std::log(theta_avg_closed_form(f.region, A, p.theta_W, scheme.quad));
        } else {
            ell_a = A(f.points[0]);
            ell_b = B(f.points[0]);
            log_theta = 0.0;
        }
        if (!(ell_a > 0.0))
            throw domain_error("model_mu_sigma: covariate surface A must be strictly positive");
        mu[j] = ell_a * (p.b_t + p.a_t * log_theta) + ell_b;
        sigma[j] = p.a_t * ell_a;
    }
    return {mu, sigma};
}

}  // namespace aggext
