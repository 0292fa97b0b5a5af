#pragma once

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <vector>

#include "aggext/errors.hpp"
#include "aggext/mvn.hpp"
#include "aggext/normal.hpp"
#include "aggext/rng.hpp"

namespace aggext {

// Hüsler-Reiss model on m >= 2 functionals, parameterized by the
// conditionally negative definite matrix Gamma with zero diagonal.
struct HRModel {
    Eigen::MatrixXd gamma;
    int dim = 0;

    explicit HRModel(Eigen::MatrixXd g) : gamma(std::move(g)) {
        dim = static_cast<int>(gamma.rows());
        if (gamma.cols() != dim || dim < 2)
            throw invalid_gamma_error("HRModel: Gamma must be square with dimension >= 2");
        for (int i = 0; i < dim; ++i) {
            if (gamma(i, i) != 0.0)
                throw invalid_gamma_error("HRModel: Gamma diagonal must be zero");
            for (int j = 0; j < dim; ++j) {
                if (!(gamma(i, j) >= 0.0) || !std::isfinite(gamma(i, j)))
                    throw invalid_gamma_error("HRModel: Gamma entries must be finite and >= 0");
                if (std::fabs(gamma(i, j) - gamma(j, i)) > 1e-12 * (1.0 + gamma(i, j)))
                    throw invalid_gamma_error("HRModel: Gamma must be symmetric");
            }
        }
    }
};

// Covariance of the anchored Gaussian vector on the non-anchor coordinates:
// Sigma_jk = (Gamma_{j,a} + Gamma_{k,a} - Gamma_{jk}) / 2.
inline Eigen::MatrixXd sigma_from_gamma(const Eigen::MatrixXd& gamma, int anchor) {
    const int m = static_cast<int>(gamma.rows());
    if (anchor < 0 || anchor >= m) throw config_error("sigma_from_gamma: anchor out of range");
    std::vector<int> idx;
    for (int j = 0; j < m; ++j)
        if (j != anchor) idx.push_back(j);
    Eigen::MatrixXd sigma(m - 1, m - 1);
    for (std::size_t j = 0; j < idx.size(); ++j)
        for (std::size_t k = 0; k <= j; ++k) {
            const double v = 0.5 * (gamma(idx[j], anchor) + gamma(idx[k], anchor) -
                                    gamma(idx[j], idx[k]));
            sigma(j, k) = v;
            sigma(k, j) = v;
        }
    if (m > 1) {
        Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(sigma, Eigen::EigenvaluesOnly);
        const double lmax = std::max(es.eigenvalues().maxCoeff(), 0.0);
        if (es.eigenvalues().minCoeff() < -1e-10 * std::max(lmax, 1.0))
            throw invalid_gamma_error(
                "sigma_from_gamma: Gamma is not conditionally negative definite");
    }
    return sigma;
}

// Exact bivariate Hüsler-Reiss exponent measure.
inline double bivariate_V(double x1, double x2, double gamma12) {
    if (!(gamma12 >= 0.0)) throw invalid_gamma_error("bivariate_V: Gamma must be >= 0");
    if (gamma12 == 0.0) return std::exp(-std::min(x1, x2));
    const double s = std::sqrt(gamma12);
    const double t1 = std::exp(-x1) * norm_cdf(0.5 * s + (x2 - x1) / s);
    const double t2 = std::exp(-x2) * norm_cdf(0.5 * s + (x1 - x2) / s);
    return t1 + t2;
}

struct McEstimate {
    double value = 0.0;
    double se = 0.0;
    long n = 0;
};

namespace detail {

// Square root factor of a PSD matrix via its eigendecomposition; tolerant of
// rank deficiency (negative ripple clipped at zero).
inline Eigen::MatrixXd psd_sqrt(const Eigen::MatrixXd& s) {
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(s);
    Eigen::VectorXd d = es.eigenvalues();
    for (int i = 0; i < d.size(); ++i) d[i] = std::sqrt(std::max(d[i], 0.0));
    return es.eigenvectors() * d.asDiagonal();
}

}  // namespace detail

// Exponent measure V(x) of the Hüsler-Reiss model.  Bivariate: closed form
// (zero standard error).  m > 2: Monte Carlo over the anchored Gaussian
// representation with antithetic pairs and per-draw substreams.
inline McEstimate exponent_measure_V(const Eigen::VectorXd& x, const HRModel& model,
                                     long n_mc = 1 << 15, std::uint64_t seed = 0xabcdULL) {
    const int m = model.dim;
    if (x.size() != m) throw config_error("exponent_measure_V: dimension mismatch");
    if (n_mc < 1) throw config_error("exponent_measure_V: need n_mc >= 1");

    McEstimate est;
    if (m == 2) {
        est.value = bivariate_V(x[0], x[1], model.gamma(0, 1));
        return est;
    }

    const Eigen::MatrixXd sigma = sigma_from_gamma(model.gamma, 0);
    const Eigen::MatrixXd factor = detail::psd_sqrt(sigma);
    Eigen::VectorXd half_var(m - 1);
    for (int j = 1; j < m; ++j) half_var[j - 1] = 0.5 * model.gamma(0, j);

    const long pairs = (n_mc + 1) / 2;
    Eigen::VectorXd z(m - 1), y(m - 1);
    double mean = 0.0, m2 = 0.0;
    for (long i = 0; i < pairs; ++i) {
        Rng rng(seed, static_cast<std::uint64_t>(i));
        for (int j = 0; j < m - 1; ++j) z[j] = norm_draw(rng);
        double val = 0.0;
        for (int sign = 0; sign < 2; ++sign) {
            y.noalias() = (sign == 0 ? 1.0 : -1.0) * (factor * z);
            double best = -x[0];  // anchored coordinate: Y_1 = 0, var 0
            for (int j = 1; j < m; ++j)
                best = std::max(best, -x[j] + y[j - 1] - half_var[j - 1]);
            val += 0.5 * std::exp(best);
        }
        const double delta = val - mean;
        mean += delta / static_cast<double>(i + 1);
        m2 += delta * (val - mean);
    }
    est.value = mean;
    est.n = 2 * pairs;
    est.se = pairs > 1 ? std::sqrt(m2 / (static_cast<double>(pairs) *
                                         static_cast<double>(pairs - 1)))
                       : 0.0;
    return est;
}

// Theoretical pairwise extremogram chi = 2 (1 - Phi(sqrt(Gamma)/2)).
inline double chi_pair(double gamma_jk) {
    if (!(gamma_jk >= 0.0)) throw domain_error("chi_pair: Gamma must be >= 0");
    return 2.0 * (1.0 - norm_cdf(0.5 * std::sqrt(gamma_jk)));
}

struct CensoredDensity {
    double log_value = 0.0;   // log of the censored-density factor (-1) V_K(z)
    double mvn_error = 0.0;   // error estimate of the Phi factor, when present
};

// Censored partial derivative of the exponent measure: the density factor
// (-1) V_K(z) for the exceedance set K, all other coordinates censored at z.
// Coordinates are reordered so K comes first; its first element anchors the
// normalization.
inline CensoredDensity censored_partial_logV(const Eigen::VectorXd& z,
                                             const std::vector<int>& exceed_set,
                                             const HRModel& model,
                                             const MvnOptions& mvn_opt = {}) {
    const int m = model.dim;
    const int b = static_cast<int>(exceed_set.size());
    if (z.size() != m) throw config_error("censored_partial_V: dimension mismatch");
    if (b < 1 || b > m) throw config_error("censored_partial_V: exceedance set size");

    std::vector<char> in_set(m, 0);
    for (int j : exceed_set) {
        if (j < 0 || j >= m || in_set[j])
            throw config_error("censored_partial_V: invalid exceedance index");
        in_set[j] = 1;
    }
    for (int a = 0; a < b; ++a)
        for (int c = a + 1; c < b; ++c)
            if (model.gamma(exceed_set[a], exceed_set[c]) < 1e-10)
                throw degeneracy_error(
                    "censored_partial_V: coincident functionals in the exceedance set; "
                    "coalesce them before fitting");

    // Reorder: the exceedance set first (anchor = its first element), then the
    // censored coordinates in their original order.
    std::vector<int> perm(exceed_set);
    for (int j = 0; j < m; ++j)
        if (!in_set[j]) perm.push_back(j);

    Eigen::MatrixXd gperm(m, m);
    for (int i = 0; i < m; ++i)
        for (int j = 0; j < m; ++j) gperm(i, j) = model.gamma(perm[i], perm[j]);

    const int anchor_orig = perm[0];
    Eigen::VectorXd ztilde(m - 1);
    for (int i = 1; i < m; ++i)
        ztilde[i - 1] = (z[perm[i]] - z[anchor_orig]) + 0.5 * gperm(0, i);

    const Eigen::MatrixXd sigma = sigma_from_gamma(gperm, 0);

    CensoredDensity out;
    out.log_value = -z[anchor_orig];

    const int nb = b - 1;      // density block size
    const int nc = m - b;      // censored block size
    Eigen::VectorXd alpha;     // Sigma_bb^{-1} ztilde_b
    Eigen::LLT<Eigen::MatrixXd> llt;
    if (nb > 0) {
        const Eigen::MatrixXd sbb = sigma.topLeftCorner(nb, nb);
        llt.compute(sbb);
        if (llt.info() != Eigen::Success)
            throw degeneracy_error("censored_partial_V: singular exceedance-block covariance");
        const Eigen::VectorXd zb = ztilde.head(nb);
        alpha = llt.solve(zb);
        const Eigen::MatrixXd& lfac = llt.matrixLLT();
        double logdet = 0.0;
        for (int i = 0; i < nb; ++i) {
            const double l = lfac(i, i);
            if (!(l > 1e-154))
                throw degeneracy_error("censored_partial_V: singular exceedance-block covariance");
            logdet += 2.0 * std::log(l);
        }
        out.log_value += -0.5 * (nb * kLog2Pi + logdet + zb.dot(alpha));
    }
    if (nc > 0) {
        Eigen::VectorXd mu_c = ztilde.tail(nc);
        Eigen::MatrixXd sigma_c = sigma.bottomRightCorner(nc, nc);
        if (nb > 0) {
            const Eigen::MatrixXd scb = sigma.bottomLeftCorner(nc, nb);
            mu_c.noalias() -= scb * alpha;
            sigma_c.noalias() -= scb * llt.solve(scb.transpose());
        }
        const MvnResult phi = mvn_cdf(mu_c, sigma_c, mvn_opt);
        out.mvn_error = phi.error;
        out.log_value += phi.value > 0.0 ? std::log(phi.value)
                                         : -std::numeric_limits<double>::infinity();
    }
    return out;
}

inline double censored_partial_V(const Eigen::VectorXd& z, const std::vector<int>& exceed_set,
                                 const HRModel& model, const MvnOptions& mvn_opt = {}) {
    return std::exp(censored_partial_logV(z, exceed_set, model, mvn_opt).log_value);
}

// Interface-compatible MVN specification with an explicit mean vector.
struct MvnSpec {
    Eigen::VectorXd mean;
    Eigen::MatrixXd cov;
    Eigen::VectorXd upper;
};

inline MvnResult mvn_cdf(const MvnSpec& spec, double tol) {
    if (spec.mean.size() != spec.upper.size() || spec.cov.rows() != spec.mean.size())
        throw config_error("mvn_cdf: MvnSpec dimension mismatch");
    MvnOptions opt;
    opt.tol = tol;
    return mvn_cdf(Eigen::VectorXd(spec.upper - spec.mean), spec.cov, opt);
}

}  // namespace aggext
