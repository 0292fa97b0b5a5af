#pragma once

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <cstddef>
#include <limits>
#include <vector>

#include "aggext/errors.hpp"
#include "aggext/optim.hpp"

namespace aggext {

struct GumbelParams {
    double mu = 0.0;
    double sigma = 1.0;

    void validate() const {
        if (!std::isfinite(mu) || !std::isfinite(sigma) || !(sigma > 0.0))
            throw domain_error("GumbelParams: need finite mu and sigma > 0");
    }
};

enum class MarginMethod { BlockMaxima, CensoredPot };

// Marginal Gumbel location/scale at an extremal level t > 1 (the effective
// number of observations per extreme event: block size for block maxima,
// inverse exceedance rate for threshold fits).
struct MarginEstimate {
    double mu = 0.0;
    double sigma = 1.0;
    double t = 2.0;
    MarginMethod method = MarginMethod::BlockMaxima;
    double threshold = std::numeric_limits<double>::quiet_NaN();  // CensoredPot only
    long n_exceed = 0;  // effective count: exceedances (CensoredPot) or blocks (BlockMaxima)
};

// Type-7 empirical quantile (linear interpolation of order statistics).
inline double empirical_quantile(std::vector<double> x, double p) {
    if (x.empty()) throw data_error("empirical_quantile: empty sample");
    if (!(p >= 0.0 && p <= 1.0)) throw config_error("empirical_quantile: p outside [0,1]");
    std::sort(x.begin(), x.end());
    const double h = (static_cast<double>(x.size()) - 1.0) * p;
    const std::size_t lo = static_cast<std::size_t>(h);
    if (lo + 1 >= x.size()) return x.back();
    return x[lo] + (h - lo) * (x[lo + 1] - x[lo]);
}

// Gumbel log-likelihood of a sample of maxima and its (mu, sigma) gradient.
inline double gumbel_loglik(const GumbelParams& p, const std::vector<double>& maxima) {
    p.validate();
    double ll = 0.0;
    for (double m : maxima) {
        const double z = (m - p.mu) / p.sigma;
        ll += -std::log(p.sigma) - z - std::exp(-z);
    }
    return ll;
}

inline Eigen::Vector2d gumbel_loglik_grad(const GumbelParams& p,
                                          const std::vector<double>& maxima) {
    p.validate();
    double dmu = 0.0, dsigma = 0.0;
    for (double m : maxima) {
        const double z = (m - p.mu) / p.sigma;
        const double e = std::exp(-z);
        dmu += (1.0 - e) / p.sigma;
        dsigma += (-1.0 + z - z * e) / p.sigma;
    }
    return {dmu, dsigma};
}

// Censored log-likelihood at extremal level t: observations above u carry the
// exponential-tail density t^{-1} sigma^{-1} exp{-(x-mu)/sigma}, those below
// contribute the censoring mass 1 - t^{-1} exp{-(u-mu)/sigma}.
inline double censored_pot_loglik(const GumbelParams& p, const std::vector<double>& series,
                                  double u, double t) {
    p.validate();
    if (!(t > 1.0) || !std::isfinite(t)) throw config_error("censored_pot_loglik: need t > 1");
    const double n = static_cast<double>(series.size());
    double k = 0.0, sum_exc = 0.0;
    for (double x : series)
        if (x > u) {
            k += 1.0;
            sum_exc += x;
        }
    const double cens = 1.0 - std::exp(-(u - p.mu) / p.sigma) / t;
    if (!(cens > 0.0)) return -std::numeric_limits<double>::infinity();
    return (n - k) * std::log(cens) - k * std::log(t * p.sigma) -
           (sum_exc - k * p.mu) / p.sigma;
}

inline Eigen::Vector2d censored_pot_loglik_grad(const GumbelParams& p,
                                                const std::vector<double>& series, double u,
                                                double t) {
    p.validate();
    const double n = static_cast<double>(series.size());
    double k = 0.0, sum_exc = 0.0;
    for (double x : series)
        if (x > u) {
            k += 1.0;
            sum_exc += x;
        }
    const double e = std::exp(-(u - p.mu) / p.sigma) / t;
    const double cens = 1.0 - e;
    const double dmu = -(n - k) * e / (cens * p.sigma) + k / p.sigma;
    const double dsigma = -(n - k) * e * (u - p.mu) / (cens * p.sigma * p.sigma) -
                          k / p.sigma + (sum_exc - k * p.mu) / (p.sigma * p.sigma);
    return {dmu, dsigma};
}

namespace detail {

// Maximize a log-likelihood over (mu, sigma) via Nelder-Mead on (mu, log
// sigma) followed by a Newton polish with the analytic gradient.
template <class LL, class Grad>
GumbelParams maximize_margin(LL&& ll, Grad&& grad, const GumbelParams& start) {
    const auto neg = [&](const Eigen::VectorXd& v) {
        GumbelParams p{v[0], std::exp(v[1])};
        return -ll(p);
    };
    Eigen::VectorXd x0(2);
    x0 << start.mu, std::log(start.sigma);
    NelderMeadOptions nm;
    nm.tol = 1e-10;
    const OptimResult coarse = nelder_mead(neg, x0, nm);

    const auto neg_grad = [&](const Eigen::VectorXd& v) {
        const GumbelParams p{v[0], std::exp(v[1])};
        const Eigen::Vector2d g = grad(p);
        // Chain rule through sigma = exp(s).
        return Eigen::VectorXd(-Eigen::Vector2d(g[0], g[1] * p.sigma));
    };
    const OptimResult fine = newton_polish(neg, neg_grad, coarse.x, 1e-12);
    // Function values are tied at floating-point noise level here; a
    // converged polish (tiny gradient) is the sharper optimum.
    const OptimResult& best = (fine.converged || fine.value <= coarse.value) ? fine : coarse;
    if (!fine.converged && !coarse.converged)
        throw data_error("margin fit did not converge");
    return {best.x[0], std::exp(best.x[1])};
}

inline void check_finite(const std::vector<double>& xs, const char* who) {
    for (double x : xs)
        if (!std::isfinite(x)) throw data_error(std::string(who) + ": non-finite value");
}

}  // namespace detail

// Gumbel fit of block maxima: the series is cut into consecutive blocks of
// block_size observations (trailing remainder dropped) and the block maxima
// are fitted by maximum likelihood.  The extremal level is the block size.
inline MarginEstimate fit_block_maxima(const std::vector<double>& series, long block_size) {
    if (block_size < 2) throw config_error("fit_block_maxima: block size must be >= 2");
    if (series.size() < 2 * static_cast<std::size_t>(block_size))
        throw data_error("fit_block_maxima: need at least two complete blocks");
    detail::check_finite(series, "fit_block_maxima");

    std::vector<double> maxima;
    const std::size_t n_blocks = series.size() / static_cast<std::size_t>(block_size);
    maxima.reserve(n_blocks);
    for (std::size_t b = 0; b < n_blocks; ++b) {
        double m = -std::numeric_limits<double>::infinity();
        for (long i = 0; i < block_size; ++i)
            m = std::max(m, series[b * static_cast<std::size_t>(block_size) +
                                    static_cast<std::size_t>(i)]);
        maxima.push_back(m);
    }
    const auto [mn, mx] = std::minmax_element(maxima.begin(), maxima.end());
    if (*mn == *mx) throw data_error("fit_block_maxima: degenerate data, all maxima equal");

    // Moment starting values for the Gumbel family.
    double mean = 0.0;
    for (double m : maxima) mean += m;
    mean /= static_cast<double>(maxima.size());
    double var = 0.0;
    for (double m : maxima) var += (m - mean) * (m - mean);
    var /= static_cast<double>(maxima.size() - 1);
    constexpr double kEuler = 0.57721566490153286;
    GumbelParams start{0.0, std::sqrt(6.0 * var) / 3.141592653589793};
    start.mu = mean - kEuler * start.sigma;

    const GumbelParams fit = detail::maximize_margin(
        [&](const GumbelParams& p) { return gumbel_loglik(p, maxima); },
        [&](const GumbelParams& p) { return gumbel_loglik_grad(p, maxima); }, start);

    MarginEstimate est;
    est.mu = fit.mu;
    est.sigma = fit.sigma;
    est.t = static_cast<double>(block_size);
    est.method = MarginMethod::BlockMaxima;
    est.n_exceed = static_cast<long>(maxima.size());
    return est;
}

// Censored threshold fit at extremal level t with threshold u.  Defaults pick
// u as the empirical 98% quantile and t as the matching inverse tail mass.
inline MarginEstimate fit_censored_pot(const std::vector<double>& series, double t,
                                       double threshold) {
    if (!(t > 1.0) || !std::isfinite(t)) throw config_error("fit_censored_pot: need t > 1");
    if (series.size() < 20) throw data_error("fit_censored_pot: series too short");
    detail::check_finite(series, "fit_censored_pot");
    if (!std::isfinite(threshold)) throw config_error("fit_censored_pot: bad threshold");
    if (threshold < empirical_quantile(series, 0.5))
        throw config_error("fit_censored_pot: threshold below the sample median");

    std::vector<double> exceed;
    for (double x : series)
        if (x > threshold) exceed.push_back(x);
    if (exceed.empty()) throw data_error("fit_censored_pot: no exceedances above threshold");
    if (exceed.size() < 10) throw data_error("fit_censored_pot: fewer than 10 exceedances");
    const auto [mn, mx] = std::minmax_element(exceed.begin(), exceed.end());
    if (*mn == *mx) throw data_error("fit_censored_pot: degenerate exceedances");

    double sigma0 = 0.0;
    for (double x : exceed) sigma0 += x - threshold;
    sigma0 /= static_cast<double>(exceed.size());
    const double rate = static_cast<double>(exceed.size()) / static_cast<double>(series.size());
    const GumbelParams start{threshold + sigma0 * std::log(t * rate), sigma0};

    const GumbelParams fit = detail::maximize_margin(
        [&](const GumbelParams& p) { return censored_pot_loglik(p, series, threshold, t); },
        [&](const GumbelParams& p) {
            return censored_pot_loglik_grad(p, series, threshold, t);
        },
        start);

    const double implied = std::exp(-(threshold - fit.mu) / fit.sigma) / t;
    if (!(implied > 0.0 && implied < 1.0))
        throw data_error("fit_censored_pot: implied exceedance probability escaped (0,1)");

    MarginEstimate est;
    est.mu = fit.mu;
    est.sigma = fit.sigma;
    est.t = t;
    est.method = MarginMethod::CensoredPot;
    est.threshold = threshold;
    est.n_exceed = static_cast<long>(exceed.size());
    return est;
}

inline MarginEstimate fit_censored_pot(const std::vector<double>& series) {
    constexpr double kQ = 0.98;
    return fit_censored_pot(series, 1.0 / (1.0 - kQ), empirical_quantile(series, kQ));
}

// Move an estimate to a different extremal level: the scale is untouched and
// the location shifts so that the implied tail is unchanged, i.e. the level
// plot mu + sigma * log(n/t) is the same straight line for every t.
inline MarginEstimate renormalize(const MarginEstimate& e, double t_new) {
    if (!(t_new > 1.0) || !std::isfinite(t_new))
        throw config_error("renormalize: need t > 1");
    if (!(e.t > 1.0) || !(e.sigma > 0.0)) throw config_error("renormalize: invalid estimate");
    MarginEstimate out = e;
    out.mu = e.mu + e.sigma * std::log(t_new / e.t);
    out.t = t_new;
    return out;
}

}  // namespace aggext
