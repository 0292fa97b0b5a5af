#pragma once

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <vector>

#include "aggext/errors.hpp"
#include "aggext/normal.hpp"
#include "aggext/rng.hpp"

namespace aggext {

// Multivariate normal orthant probabilities P(X <= b), X ~ N(0, Sigma), by
// separation of variables over a lattice rule with randomized shifts.
struct MvnOptions {
    double tol = 1e-4;          // target on the 3-sigma error estimate
    int n_shifts = 20;          // randomization count K; error = 3 sd / sqrt(K)
    long max_points = 200000;   // total point budget across shifts
    long points_per_shift = 0;  // > 0: fixed-size rule, no adaptation (CRN mode)
    std::uint64_t seed = 0x2c1b3c6dULL;
};

struct MvnResult {
    double value = 1.0;
    double error = 0.0;  // 3 sd / sqrt(K)
    long points = 0;
};

namespace detail {

inline constexpr int kMvnMaxDim = 25;

// Fractional parts of sqrt(prime): generators for the Richtmyer sequence.
inline const double* richtmyer_lattice() {
    static const double gens[] = {
        std::sqrt(2.0),  std::sqrt(3.0),  std::sqrt(5.0),  std::sqrt(7.0),
        std::sqrt(11.0), std::sqrt(13.0), std::sqrt(17.0), std::sqrt(19.0),
        std::sqrt(23.0), std::sqrt(29.0), std::sqrt(31.0), std::sqrt(37.0),
        std::sqrt(41.0), std::sqrt(43.0), std::sqrt(47.0), std::sqrt(53.0),
        std::sqrt(59.0), std::sqrt(61.0), std::sqrt(67.0), std::sqrt(71.0),
        std::sqrt(73.0), std::sqrt(79.0), std::sqrt(83.0), std::sqrt(89.0)};
    return gens;
}

// Cholesky with pivot guard: a vanishing pivot marks a deterministic
// coordinate, resolved by an indicator on its bound.
struct MvnPlan {
    int m = 0;
    Eigen::MatrixXd chol;    // lower triangular, zero row for degenerate pivots
    Eigen::VectorXd bounds;  // standardized upper bounds, reordered
    std::vector<bool> degenerate;
    bool feasible = true;    // false: a degenerate coordinate has bound < 0
};

inline MvnPlan mvn_plan(Eigen::VectorXd b, Eigen::MatrixXd sigma) {
    const int m = static_cast<int>(b.size());
    MvnPlan plan;
    plan.m = m;
    if (m == 0) return plan;

    // Standardize scales (unit diagonal where possible).
    for (int i = 0; i < m; ++i) {
        const double v = sigma(i, i);
        if (!(v >= 0.0) || !std::isfinite(b[i]))
            throw domain_error("mvn_cdf: invalid covariance or bound");
        const double s = std::sqrt(std::max(v, 0.0));
        if (s > 0.0) {
            b[i] /= s;
            for (int j = 0; j < m; ++j) {
                sigma(i, j) /= s;
                sigma(j, i) /= s;
            }
            sigma(i, i) = 1.0;
        }
    }

    // Ascending bounds: integrate the tightest constraints first.
    std::vector<int> order(m);
    std::iota(order.begin(), order.end(), 0);
    std::sort(order.begin(), order.end(), [&](int i, int j) { return b[i] < b[j]; });
    Eigen::VectorXd bo(m);
    Eigen::MatrixXd so(m, m);
    for (int i = 0; i < m; ++i) {
        bo[i] = b[order[i]];
        for (int j = 0; j < m; ++j) so(i, j) = sigma(order[i], order[j]);
    }

    plan.bounds = bo;
    plan.chol = Eigen::MatrixXd::Zero(m, m);
    plan.degenerate.assign(m, false);
    Eigen::MatrixXd a = so;
    const double eps = 1e-10;
    for (int i = 0; i < m; ++i) {
        double d = a(i, i);
        for (int k = 0; k < i; ++k) d -= plan.chol(i, k) * plan.chol(i, k);
        if (d < -1e-8) throw domain_error("mvn_cdf: covariance is not positive semi-definite");
        if (d <= eps) {
            // Deterministic coordinate: X_i equals its conditional mean, so the
            // constraint reduces to an indicator handled in the integrand.
            plan.degenerate[i] = true;
            continue;
        }
        const double r = std::sqrt(d);
        plan.chol(i, i) = r;
        for (int j = i + 1; j < m; ++j) {
            double v = a(j, i);
            for (int k = 0; k < i; ++k) v -= plan.chol(j, k) * plan.chol(i, k);
            plan.chol(j, i) = v / r;
        }
    }
    return plan;
}

// One integrand evaluation at a point w in [0,1]^(m-1) (extra coordinates
// ignored); returns the conditional probability product.
inline double mvn_integrand(const MvnPlan& plan, const double* w) {
    const int m = plan.m;
    double f = 1.0;
    double y[kMvnMaxDim];
    int wi = 0;
    for (int i = 0; i < m; ++i) {
        double cond = plan.bounds[i];
        for (int k = 0; k < i; ++k) cond -= plan.chol(i, k) * y[k];
        if (plan.degenerate[i]) {
            // Variance-free coordinate: bound must clear the conditional mean.
            if (cond < 0.0) return 0.0;
            y[i] = 0.0;
            continue;
        }
        const double e = norm_cdf(cond / plan.chol(i, i));
        if (e <= 0.0) return 0.0;
        f *= e;
        if (i + 1 < m) {
            double u = e * w[wi++];
            u = std::min(std::max(u, 1e-300), 1.0 - 1e-16);
            y[i] = norm_quantile(u);
        } else {
            y[i] = 0.0;
        }
    }
    return f;
}

}  // namespace detail

inline MvnResult mvn_cdf(const Eigen::VectorXd& upper, const Eigen::MatrixXd& cov,
                         const MvnOptions& opt = {}) {
    const int m = static_cast<int>(upper.size());
    if (cov.rows() != m || cov.cols() != m)
        throw config_error("mvn_cdf: bound/covariance dimension mismatch");
    if (m > detail::kMvnMaxDim) throw config_error("mvn_cdf: dimension exceeds 25");
    if (opt.tol < 1e-6) throw config_error("mvn_cdf: tolerance below 1e-6 unsupported");
    if (opt.n_shifts < 2) throw config_error("mvn_cdf: need at least 2 shifts");

    MvnResult res;
    if (m == 0) return res;  // value 1, error 0

    detail::MvnPlan plan = detail::mvn_plan(upper, cov);

    // Fully deterministic and one-dimensional cases are exact.
    bool all_degenerate = true;
    for (int i = 0; i < m; ++i) all_degenerate = all_degenerate && plan.degenerate[i];
    if (all_degenerate) {
        double f = 1.0;
        for (int i = 0; i < m; ++i)
            if (plan.bounds[i] < 0.0) f = 0.0;
        res.value = f;
        return res;
    }
    if (m == 1) {
        res.value = plan.degenerate[0] ? (plan.bounds[0] >= 0.0 ? 1.0 : 0.0)
                                       : norm_cdf(plan.bounds[0] / plan.chol(0, 0));
        return res;
    }

    const double* gens = detail::richtmyer_lattice();
    const int dim_w = m - 1;
    const int K = opt.n_shifts;
    Rng shift_rng(opt.seed);

    long n = opt.points_per_shift > 0
                 ? opt.points_per_shift
                 : std::max<long>(256, std::min<long>(2048, opt.max_points / (4 * K)));
    double shifts[detail::kMvnMaxDim];
    double w[detail::kMvnMaxDim];

    while (true) {
        double sum = 0.0, sumsq = 0.0;
        Rng rng(opt.seed);  // re-randomize identically per refinement pass
        for (int k = 0; k < K; ++k) {
            for (int j = 0; j < dim_w; ++j) shifts[j] = rng.uniform();
            double acc = 0.0;
            for (long i = 1; i <= n; ++i) {
                for (int j = 0; j < dim_w; ++j) {
                    double v = std::fmod(static_cast<double>(i) * gens[j] + shifts[j], 1.0);
                    // Symmetrized (tent) map improves the lattice rule's accuracy.
                    w[j] = 1.0 - std::fabs(2.0 * v - 1.0);
                }
                acc += (detail::mvn_integrand(plan, w) - acc) / static_cast<double>(i);
            }
            sum += acc;
            sumsq += acc * acc;
        }
        const double mean = sum / K;
        const double var = std::max(0.0, (sumsq - K * mean * mean) / (K - 1.0));
        res.value = mean;
        res.error = 3.0 * std::sqrt(var / K);
        res.points += n * K;
        if (opt.points_per_shift > 0) break;                  // fixed-size rule
        if (res.error < opt.tol || res.points * 2 > opt.max_points) break;
        n *= 2;
    }
    return res;
}

}  // namespace aggext
