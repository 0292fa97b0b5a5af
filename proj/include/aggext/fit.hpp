#pragma once

#include <Eigen/Dense>
#include <cmath>
#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "aggext/errors.hpp"
#include "aggext/hr_core.hpp"
#include "aggext/margins.hpp"
#include "aggext/model.hpp"
#include "aggext/mvn.hpp"
#include "aggext/optim.hpp"
#include "aggext/rng.hpp"

namespace aggext {

// Which parameter groups an optimizer run may move.  Surface coefficients
// always keep their identifiability pins (the two intercepts are eliminated,
// never free).
struct FitMask {
    bool a_t = true;
    bool b_t = true;
    bool theta_a = true;
    bool theta_b = true;
    bool alpha = true;
    bool lambda = true;
    bool eta = false;
    bool aniso = false;
};

struct FitResult {
    ModelParams params;
    double objective = 0.0;  // least squares: minimized value; censored: log-likelihood
    bool converged = false;
    bool non_identifiable = false;  // flat objective direction detected (least squares)
    long iterations = 0;
    Eigen::VectorXd jackknife_sd;  // empty unless a jackknife was attached
    int jackknife_failures = 0;
};

// Canonical free-parameter layout used for reporting and jackknife spreads:
// (a_t, b_t, theta_A[1..], theta_B[1..], alpha, lambda, eta, aniso).  The two
// surface intercepts are pinned by the identifiability constraints and thus
// not part of the vector.
inline Eigen::VectorXd flatten_params(const ModelParams& p) {
    const Eigen::Index ka = p.theta_A.size(), kb = p.theta_B.size();
    Eigen::VectorXd out(2 + (ka - 1) + (kb - 1) + 4);
    Eigen::Index r = 0;
    out[r++] = p.a_t;
    out[r++] = p.b_t;
    for (Eigen::Index c = 1; c < ka; ++c) out[r++] = p.theta_A[c];
    for (Eigen::Index c = 1; c < kb; ++c) out[r++] = p.theta_B[c];
    out[r++] = p.theta_W.alpha;
    out[r++] = p.theta_W.lambda;
    out[r++] = p.theta_W.eta;
    out[r++] = p.theta_W.aniso;
    return out;
}

inline std::vector<std::string> param_names(int ka, int kb) {
    std::vector<std::string> names{"a_n", "b_n"};
    for (int c = 1; c < ka; ++c) names.push_back("a" + std::to_string(c));
    for (int c = 1; c < kb; ++c) names.push_back("b" + std::to_string(c));
    names.insert(names.end(), {"alpha", "lambda", "eta", "a"});
    return names;
}

namespace detail {

// Bijection between the masked free parameters and an unconstrained vector:
// log for a_t and lambda, log((2-alpha)/alpha) for alpha in (0,2], tan for
// eta, log(aniso-1) for aniso >= 1.  Surface intercepts are eliminated via
// ell_1{A} = 1 and ell_1{B} = 0.
struct ParamSpace {
    FitMask mask;
    ModelParams base;  // canonical template; masked-off components come from here
    Eigen::RowVectorXd row_a, row_b;

    int dim() const {
        int d = 0;
        if (mask.a_t) ++d;
        if (mask.b_t) ++d;
        if (mask.theta_a) d += static_cast<int>(row_a.size()) - 1;
        if (mask.theta_b) d += static_cast<int>(row_b.size()) - 1;
        if (mask.alpha) ++d;
        if (mask.lambda) ++d;
        if (mask.eta) ++d;
        if (mask.aniso) ++d;
        return d;
    }

    Eigen::VectorXd pack(const ModelParams& p) const {
        Eigen::VectorXd z(dim());
        int r = 0;
        if (mask.a_t) z[r++] = std::log(p.a_t);
        if (mask.b_t) z[r++] = p.b_t;
        if (mask.theta_a)
            for (Eigen::Index c = 1; c < p.theta_A.size(); ++c) z[r++] = p.theta_A[c];
        if (mask.theta_b)
            for (Eigen::Index c = 1; c < p.theta_B.size(); ++c) z[r++] = p.theta_B[c];
        if (mask.alpha) {
            const double a = std::min(p.theta_W.alpha, 2.0 - 1e-12);
            z[r++] = std::log((2.0 - a) / a);
        }
        if (mask.lambda) z[r++] = std::log(p.theta_W.lambda);
        if (mask.eta) z[r++] = std::tan(p.theta_W.eta);
        if (mask.aniso) z[r++] = std::log(std::max(p.theta_W.aniso, 1.0 + 1e-10) - 1.0);
        return z;
    }

    ModelParams unpack(const Eigen::VectorXd& z) const {
        if (z.size() != dim()) throw config_error("ParamSpace: dimension mismatch");
        ModelParams p = base;
        int r = 0;
        if (mask.a_t) p.a_t = std::exp(z[r++]);
        if (mask.b_t) p.b_t = z[r++];
        if (mask.theta_a) {
            for (Eigen::Index c = 1; c < p.theta_A.size(); ++c) p.theta_A[c] = z[r++];
            double tail = 0.0;
            for (Eigen::Index c = 1; c < p.theta_A.size(); ++c) tail += row_a[c] * p.theta_A[c];
            p.theta_A[0] = (1.0 - tail) / row_a[0];
        }
        if (mask.theta_b) {
            for (Eigen::Index c = 1; c < p.theta_B.size(); ++c) p.theta_B[c] = z[r++];
            double tail = 0.0;
            for (Eigen::Index c = 1; c < p.theta_B.size(); ++c) tail += row_b[c] * p.theta_B[c];
            p.theta_B[0] = -tail / row_b[0];
        }
        if (mask.alpha) p.theta_W.alpha = 2.0 / (1.0 + std::exp(z[r++]));
        if (mask.lambda) p.theta_W.lambda = std::exp(z[r++]);
        if (mask.eta) p.theta_W.eta = std::atan(z[r++]);
        if (mask.aniso) p.theta_W.aniso = 1.0 + std::exp(z[r++]);
        return p;
    }
};

inline ParamSpace make_param_space(const ModelEngine& engine, const ModelParams& init,
                                   const FitMask& mask) {
    ParamSpace space;
    space.mask = mask;
    space.base = normalize_identifiability(init, engine.scheme());
    space.row_a = engine.means_a().row(0);
    space.row_b = engine.means_b().row(0);
    if (space.row_a[0] == 0.0 || space.row_b[0] == 0.0)
        throw config_error("fit: degenerate intercept at the reference functional");
    return space;
}

inline constexpr double kBadObjective = 1e100;

// Minimize f via Nelder-Mead with deterministic perturbed restarts; run 0
// starts from z0 itself so the result can never be worse than the start.
template <class F>
OptimResult multistart_nelder_mead(F&& f, const Eigen::VectorXd& z0, int restarts,
                                   std::uint64_t seed, const NelderMeadOptions& opt) {
    OptimResult best;
    best.x = z0;
    best.value = f(z0);
    best.converged = false;
    for (int r = 0; r < std::max(restarts, 1); ++r) {
        Eigen::VectorXd start = z0;
        if (r > 0) {
            Rng rng(seed, static_cast<std::uint64_t>(r));
            for (Eigen::Index i = 0; i < start.size(); ++i)
                start[i] += (2.0 * rng.uniform() - 1.0) * 0.1 * (1.0 + std::fabs(start[i]));
        }
        OptimResult res = nelder_mead(f, start, opt);
        best.iterations += res.iterations;
        if (res.value < best.value || (res.value == best.value && res.converged)) {
            best.x = res.x;
            best.value = res.value;
            best.converged = res.converged;
        } else if (res.converged && res.value <= best.value + 1e-12 * (1.0 + std::fabs(best.value))) {
            best.converged = true;
        }
    }
    return best;
}

// Smallest-to-largest eigenvalue ratio of the FD Hessian at z; a vanishing
// ratio marks a flat objective direction (non-identifiable parameters).
template <class F>
bool flat_direction(F&& f, const Eigen::VectorXd& z, double rel_tol) {
    const int d = static_cast<int>(z.size());
    if (d == 0) return false;
    Eigen::VectorXd h(d);
    for (int i = 0; i < d; ++i) h[i] = 1e-4 * (1.0 + std::fabs(z[i]));
    const double f0 = f(z);
    Eigen::MatrixXd hess(d, d);
    Eigen::VectorXd zp;
    for (int i = 0; i < d; ++i) {
        zp = z;
        zp[i] = z[i] + h[i];
        const double fp = f(zp);
        zp[i] = z[i] - h[i];
        const double fm = f(zp);
        hess(i, i) = (fp + fm - 2.0 * f0) / (h[i] * h[i]);
        for (int j = i + 1; j < d; ++j) {
            zp = z;
            zp[i] += h[i];
            zp[j] += h[j];
            const double fpp = f(zp);
            zp[j] -= 2.0 * h[j];
            const double fpm = f(zp);
            zp[i] -= 2.0 * h[i];
            const double fmm = f(zp);
            zp[j] += 2.0 * h[j];
            const double fmp = f(zp);
            hess(i, j) = hess(j, i) = (fpp - fpm - fmp + fmm) / (4.0 * h[i] * h[j]);
        }
    }
    if (!hess.allFinite()) return true;
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(hess, Eigen::EigenvaluesOnly);
    const double lmax = es.eigenvalues().cwiseAbs().maxCoeff();
    if (!(lmax > 0.0)) return true;
    return es.eigenvalues().minCoeff() < rel_tol * lmax;
}

}  // namespace detail

// Weights proportional to the inverse asymptotic variances of the Gumbel
// location/scale estimators, using each margin's effective count.
inline std::pair<Eigen::VectorXd, Eigen::VectorXd> default_ls_weights(
    const std::vector<MarginEstimate>& est) {
    const Eigen::Index m = static_cast<Eigen::Index>(est.size());
    Eigen::VectorXd v(m), w(m);
    for (Eigen::Index j = 0; j < m; ++j) {
        if (est[j].n_exceed <= 0 || !(est[j].sigma > 0.0)) {
            // Equal-weights fallback when effective counts are unavailable.
            v.setOnes();
            w.setOnes();
            return {v, w};
        }
        const double s2 = est[j].sigma * est[j].sigma;
        const double n = static_cast<double>(est[j].n_exceed);
        v[j] = n / (1.10867 * s2);
        w[j] = n / (0.60793 * s2);
    }
    return {v, w};
}

struct LsOptions {
    FitMask mask;
    NelderMeadOptions nm{4000, 1e-13, 0.25};
    int restarts = 3;
    std::uint64_t seed = 0x15f17e57ULL;
    bool polish = true;
    double flat_tol = 1e-8;
};

// Weighted least squares on the margin estimates:
//   min_theta  sum_j v_j (mu_hat_j - mu_j(theta))^2 + w_j (sigma_hat_j - sigma_j(theta))^2.
inline FitResult fit_least_squares(const std::vector<MarginEstimate>& est,
                                   const Eigen::VectorXd& v, const Eigen::VectorXd& w,
                                   const ModelEngine& engine, double t, const ModelParams& init,
                                   const LsOptions& opt = {}) {
    const int m = engine.size();
    if (static_cast<int>(est.size()) != m || v.size() != m || w.size() != m)
        throw config_error("fit_least_squares: estimates/weights length mismatch");
    if (!(t > 0.0) || !std::isfinite(t)) throw config_error("fit_least_squares: level t must be > 0");
    double wsum = 0.0;
    for (int j = 0; j < m; ++j) {
        if (!(v[j] >= 0.0) || !(w[j] >= 0.0) || !std::isfinite(v[j]) || !std::isfinite(w[j]))
            throw config_error("fit_least_squares: weights must be finite and >= 0");
        wsum += v[j] + w[j];
        if (!std::isfinite(est[j].mu) || !(est[j].sigma > 0.0))
            throw data_error("fit_least_squares: invalid margin estimate");
        if (std::fabs(est[j].t - t) > 1e-9 * (1.0 + std::fabs(t)))
            throw config_error(
                "fit_least_squares: margin estimates must be renormalized to the common level t");
    }
    if (!(wsum > 0.0)) throw config_error("fit_least_squares: weights must not all be zero");

    const detail::ParamSpace space = detail::make_param_space(engine, init, opt.mask);
    const auto objective = [&](const Eigen::VectorXd& z) -> double {
        try {
            const ModelParams p = space.unpack(z);
            const ModelEngine::Eval ev = engine.evaluate(p, false);
            double total = 0.0;
            for (int j = 0; j < m; ++j) {
                const double dmu = est[j].mu - ev.mu[j];
                const double dsi = est[j].sigma - ev.sigma[j];
                total += v[j] * dmu * dmu + w[j] * dsi * dsi;
            }
            return std::isfinite(total) ? total : detail::kBadObjective;
        } catch (const error&) {
            return detail::kBadObjective;
        }
    };

    const Eigen::VectorXd z0 = space.pack(space.base);
    FitResult out;
    if (space.dim() == 0) {
        out.params = space.base;
        out.objective = objective(z0);
        out.converged = true;
        return out;
    }

    OptimResult best = detail::multistart_nelder_mead(objective, z0, opt.restarts, opt.seed, opt.nm);
    if (opt.polish) {
        const auto fd_grad = [&](const Eigen::VectorXd& z) {
            Eigen::VectorXd g(z.size());
            Eigen::VectorXd zp = z;
            for (Eigen::Index i = 0; i < z.size(); ++i) {
                const double h = 1e-6 * (1.0 + std::fabs(z[i]));
                zp[i] = z[i] + h;
                const double fp = objective(zp);
                zp[i] = z[i] - h;
                const double fm = objective(zp);
                zp[i] = z[i];
                g[i] = (fp - fm) / (2.0 * h);
            }
            return g;
        };
        OptimResult fine = newton_polish(objective, fd_grad, best.x, 1e-12, 60);
        best.iterations += fine.iterations;
        if (fine.value <= best.value) {
            best.x = fine.x;
            best.value = fine.value;
            best.converged = best.converged || fine.converged;
        }
    }

    out.params = space.unpack(best.x);
    out.objective = best.value;
    out.converged = best.converged && best.value < detail::kBadObjective;
    out.iterations = best.iterations;
    out.non_identifiable = detail::flat_direction(objective, best.x, opt.flat_tol);
    return out;
}

inline FitResult fit_least_squares(const std::vector<MarginEstimate>& est,
                                   const Eigen::VectorXd& v, const Eigen::VectorXd& w,
                                   const AggregationScheme& scheme, double t,
                                   const ModelParams& init, const LsOptions& opt = {}) {
    ModelEngine engine(scheme);
    return fit_least_squares(est, v, w, engine, t, init, opt);
}

// Fixed-size QMC settings for likelihood evaluations: deterministic value for
// a given integrand (common random numbers across parameter values).
inline MvnOptions likelihood_mvn_options() {
    MvnOptions opt;
    opt.n_shifts = 4;
    opt.points_per_shift = 256;
    opt.tol = 1e-6;
    return opt;
}

struct CensoredLoglikOptions {
    long v_mc = 1 << 14;                 // draws for V(u_tilde) when m > 2
    std::uint64_t v_seed = 0xc5a11dULL;  // fixed seed: common random numbers
    MvnOptions mvn = likelihood_mvn_options();
};

// Censored log-likelihood of the exceedance model at level t:
//   (n - |I|) log{1 - V(u_tilde)/t}
//   + sum_{i in I} [ log{(-1) V_{K_i}(z_i)} - log t - sum_{j in K_i} log sigma_j ]
// with z_i the row normalized by (mu, sigma) and censored at u_tilde outside
// the exceedance set K_i.  The theta-shifts are absorbed in mu, so V is the
// plain Gumbel-margin exponent measure of Gamma.
inline double censored_loglik(const ModelParams& params, const ModelEngine& engine,
                              const Eigen::MatrixXd& y, const Eigen::VectorXd& u, double t,
                              const CensoredLoglikOptions& opt = {}) {
    const int m = engine.size();
    const long n = y.rows();
    if (y.cols() != m || u.size() != m)
        throw config_error("censored_loglik: data/threshold dimension mismatch");
    if (n < 1) throw data_error("censored_loglik: empty data");
    if (!(t > 0.0) || !std::isfinite(t)) throw config_error("censored_loglik: level t must be > 0");

    const ModelEngine::Eval ev = engine.evaluate(params, true);
    Eigen::VectorXd utilde(m);
    for (int j = 0; j < m; ++j) utilde[j] = (u[j] - ev.mu[j]) / ev.sigma[j];

    if (m == 1) {
        const double p_exc = std::exp(-utilde[0]) / t;
        if (!(p_exc < 1.0))
            throw config_error("censored_loglik: threshold too low for level t");
        double ll = 0.0;
        long n_exc = 0;
        for (long i = 0; i < n; ++i)
            if (y(i, 0) > u[0]) {
                ++n_exc;
                ll += -std::log(t * ev.sigma[0]) - (y(i, 0) - ev.mu[0]) / ev.sigma[0];
            }
        return ll + static_cast<double>(n - n_exc) * std::log1p(-p_exc);
    }

    const HRModel model(ev.gamma);
    const double v_at_u = exponent_measure_V(utilde, model, opt.v_mc, opt.v_seed).value;
    if (!(v_at_u / t < 1.0))
        throw config_error("censored_loglik: threshold too low for level t");

    double ll = 0.0;
    long n_exc = 0;
    const double log_t = std::log(t);
    std::vector<int> exceed;
    Eigen::VectorXd z(m);
    for (long i = 0; i < n; ++i) {
        exceed.clear();
        for (int j = 0; j < m; ++j) {
            if (y(i, j) > u[j]) {
                exceed.push_back(j);
                z[j] = (y(i, j) - ev.mu[j]) / ev.sigma[j];
            } else {
                z[j] = utilde[j];
            }
        }
        if (exceed.empty()) continue;
        ++n_exc;
        const CensoredDensity cd = censored_partial_logV(z, exceed, model, opt.mvn);
        double term = cd.log_value - log_t;
        for (int j : exceed) term -= std::log(ev.sigma[j]);
        ll += term;
    }
    return ll + static_cast<double>(n - n_exc) * std::log1p(-v_at_u / t);
}

inline double censored_loglik(const ModelParams& params, const AggregationScheme& scheme,
                              const Eigen::MatrixXd& y, const Eigen::VectorXd& u, double t,
                              const CensoredLoglikOptions& opt = {}) {
    ModelEngine engine(scheme);
    return censored_loglik(params, engine, y, u, t, opt);
}

struct CensoredFitOptions {
    FitMask mask;
    CensoredLoglikOptions ll;
    NelderMeadOptions nm{400, 1e-9, 0.15};
    int restarts = 3;
    std::uint64_t seed = 0xf17c3a5eULL;
};

// Maximize the censored log-likelihood from the given start (least-squares
// estimate recommended).  Derivative-free with deterministic restarts; the
// result can never fall below the start's likelihood.
inline FitResult fit_censored(const Eigen::MatrixXd& y, const Eigen::VectorXd& u, double t,
                              const ModelEngine& engine, const ModelParams& init,
                              const CensoredFitOptions& opt = {}) {
    const detail::ParamSpace space = detail::make_param_space(engine, init, opt.mask);
    const auto objective = [&](const Eigen::VectorXd& z) -> double {
        try {
            const double ll = censored_loglik(space.unpack(z), engine, y, u, t, opt.ll);
            return std::isfinite(ll) ? -ll : detail::kBadObjective;
        } catch (const error&) {
            return detail::kBadObjective;
        }
    };

    const Eigen::VectorXd z0 = space.pack(space.base);
    FitResult out;
    if (space.dim() == 0) {
        out.params = space.base;
        out.objective = -objective(z0);
        out.converged = true;
        return out;
    }
    const OptimResult best =
        detail::multistart_nelder_mead(objective, z0, opt.restarts, opt.seed, opt.nm);
    if (best.value >= detail::kBadObjective)
        throw config_error("fit_censored: likelihood undefined at every visited point");
    out.params = space.unpack(best.x);
    out.objective = -best.value;
    out.converged = best.converged;
    out.iterations = best.iterations;
    return out;
}

inline FitResult fit_censored(const Eigen::MatrixXd& y, const Eigen::VectorXd& u, double t,
                              const AggregationScheme& scheme, const ModelParams& init,
                              const CensoredFitOptions& opt = {}) {
    ModelEngine engine(scheme);
    return fit_censored(y, u, t, engine, init, opt);
}

struct JackknifeResult {
    Eigen::VectorXd sd;
    Eigen::MatrixXd cov;  // full delete-one-block covariance; sd = sqrt(diag)
    int n_used = 0;
    int n_failed = 0;
};

// Delete-one-block jackknife over consecutive blocks of event rows.  refit
// maps a reduced event matrix to a parameter vector; replicates that throw a
// library error are excluded and counted.  Variance per parameter is
// ((B-1)/B) * sum_b (theta_b - mean)^2 over the B successful replicates.
template <class Refit>
JackknifeResult jackknife(Refit&& refit, const Eigen::MatrixXd& events, int n_blocks,
                          int block_size) {
    if (n_blocks < 2 || block_size < 1)
        throw config_error("jackknife: need n_blocks >= 2 and block_size >= 1");
    if (static_cast<long>(n_blocks) * block_size > events.rows())
        throw config_error("jackknife: blocks exceed the number of exceedance events");

    JackknifeResult out;
    std::vector<Eigen::VectorXd> reps;
    for (int b = 0; b < n_blocks; ++b) {
        const long lo = static_cast<long>(b) * block_size;
        const long hi = lo + block_size;
        Eigen::MatrixXd kept(events.rows() - block_size, events.cols());
        long r = 0;
        for (long i = 0; i < events.rows(); ++i)
            if (i < lo || i >= hi) kept.row(r++) = events.row(i);
        try {
            reps.push_back(refit(kept));
        } catch (const error&) {
            ++out.n_failed;
        }
    }
    if (reps.size() < 2) throw data_error("jackknife: fewer than two replicates converged");
    const Eigen::Index d = reps.front().size();
    for (const Eigen::VectorXd& r : reps)
        if (r.size() != d) throw config_error("jackknife: inconsistent replicate dimensions");

    Eigen::VectorXd mean = Eigen::VectorXd::Zero(d);
    for (const Eigen::VectorXd& r : reps) mean += r;
    const double nb = static_cast<double>(reps.size());
    mean /= nb;
    Eigen::MatrixXd cov = Eigen::MatrixXd::Zero(d, d);
    for (const Eigen::VectorXd& r : reps) {
        const Eigen::VectorXd dev = r - mean;
        cov += dev * dev.transpose();
    }
    cov *= (nb - 1.0) / nb;
    out.cov = cov;
    out.sd = cov.diagonal().cwiseSqrt();
    out.n_used = static_cast<int>(reps.size());
    return out;
}

// Jackknife for the censored fit: blocks partition the exceedance events in
// time order; censored rows participate in every replicate.  Non-convergent
// replicates are excluded and counted.
inline JackknifeResult jackknife_censored(const Eigen::MatrixXd& y, const Eigen::VectorXd& u,
                                          double t, const ModelEngine& engine,
                                          const ModelParams& fitted, int n_blocks, int block_size,
                                          CensoredFitOptions opt = {}) {
    const int m = engine.size();
    if (y.cols() != m || u.size() != m)
        throw config_error("jackknife_censored: data/threshold dimension mismatch");

    std::vector<long> exc_rows, cens_rows;
    for (long i = 0; i < y.rows(); ++i) {
        bool any = false;
        for (int j = 0; j < m && !any; ++j) any = y(i, j) > u[j];
        (any ? exc_rows : cens_rows).push_back(i);
    }
    Eigen::MatrixXd events(static_cast<long>(exc_rows.size()), m);
    for (std::size_t i = 0; i < exc_rows.size(); ++i) events.row(i) = y.row(exc_rows[i]);
    Eigen::MatrixXd censored(static_cast<long>(cens_rows.size()), m);
    for (std::size_t i = 0; i < cens_rows.size(); ++i) censored.row(i) = y.row(cens_rows[i]);

    const auto refit = [&](const Eigen::MatrixXd& kept) {
        Eigen::MatrixXd yb(censored.rows() + kept.rows(), m);
        yb.topRows(censored.rows()) = censored;
        yb.bottomRows(kept.rows()) = kept;
        const FitResult fr = fit_censored(yb, u, t, engine, fitted, opt);
        if (!fr.converged) throw data_error("jackknife_censored: replicate did not converge");
        return flatten_params(fr.params);
    };
    return jackknife(refit, events, n_blocks, block_size);
}

}  // namespace aggext
