#pragma once

#include <Eigen/Dense>
#include <cmath>
#include <cstdint>
#include <utility>
#include <vector>

#include "aggext/errors.hpp"
#include "aggext/hr_core.hpp"
#include "aggext/model.hpp"
#include "aggext/normal.hpp"
#include "aggext/rng.hpp"

namespace aggext {

// One draw of the aggregated-vector generator, with the generator state kept
// for reproducibility checks.
struct PseudoObservation {
    Eigen::VectorXd y;        // data units, length L
    Eigen::VectorXd y_tilde;  // normalized units (pre theta-shift and surfaces)
    double u = 0.0;           // standard exponential radius
    int j0 = 0;               // anchor index
    std::uint64_t seed = 0;
};

// One simulated fine-scale event: values at the K target points plus the L
// aggregate coordinates in data units.
struct ConditionalDraw {
    Eigen::VectorXd point_values;  // length K
    Eigen::VectorXd aggregates;    // length L
    double u = 0.0;                // exceedance radius on the normalized scale
    int j = 0;                     // conditioning index (or argmax cell)
};

struct SimulationBatch {
    std::vector<ConditionalDraw> events;
    long proposals = 0;
    double acceptance_rate = 0.0;
    bool low_acceptance = false;  // acceptance below 1e-3 on the probe batch
};

namespace detail {

inline double logsumexp(const Eigen::VectorXd& v) {
    const double m = v.maxCoeff();
    double s = 0.0;
    for (Eigen::Index i = 0; i < v.size(); ++i) s += std::exp(v[i] - m);
    return m + std::log(s);
}

inline double logsumexp_head(const Eigen::VectorXd& v, int n) {
    return logsumexp(v.head(n));
}

}  // namespace detail

// Draws pseudo-observations of the aggregated vector: uniform anchor j0,
// exponential radius U, anchored Gaussian profile, sum-renormalization over
// the first n_norm coordinates, then the data-unit transform
// Y_j = ell_j{A} (Ytilde_j + log theta_j) + ell_j{B}.
//
// The per-anchor Gaussian factors are cached at construction; draws use one
// substream per (seed, stream) pair and are order-deterministic.
class AggregatedSampler {
  public:
    AggregatedSampler(const Eigen::MatrixXd& gamma, Eigen::VectorXd log_theta,
                      Eigen::VectorXd ell_a, Eigen::VectorXd ell_b, int n_anchors = -1,
                      int n_norm = -1)
        : log_theta_(std::move(log_theta)), ell_a_(std::move(ell_a)), ell_b_(std::move(ell_b)) {
        HRModel model(gamma);  // validates symmetry, zero diagonal, finite entries
        m_ = model.dim;
        n_anchors_ = n_anchors < 0 ? m_ : n_anchors;
        n_norm_ = n_norm < 0 ? m_ : n_norm;
        if (n_anchors_ < 1 || n_anchors_ > m_ || n_norm_ < 1 || n_norm_ > m_)
            throw config_error("AggregatedSampler: anchor/normalization span out of range");
        if (log_theta_.size() != m_ || ell_a_.size() != m_ || ell_b_.size() != m_)
            throw config_error("AggregatedSampler: vector length mismatch");
        for (int j = 0; j < m_; ++j)
            if (!(ell_a_[j] > 0.0) || !std::isfinite(ell_a_[j]))
                throw domain_error("AggregatedSampler: ell_j{A} must be positive");
        means_.resize(n_anchors_);
        factors_.resize(n_anchors_);
        for (int a = 0; a < n_anchors_; ++a) {
            means_[a] = -0.5 * gamma.col(a);
            factors_[a] = detail::psd_sqrt(sigma_from_gamma(gamma, a));
        }
    }

    int dim() const { return m_; }
    int n_anchors() const { return n_anchors_; }
    int n_norm() const { return n_norm_; }

    PseudoObservation draw(std::uint64_t seed, std::uint64_t stream = 0) const {
        Rng rng(seed, stream);
        PseudoObservation obs;
        obs.seed = seed;
        obs.j0 = static_cast<int>(rng.uniform_index(static_cast<std::uint64_t>(n_anchors_)));
        obs.u = rng.exponential();

        Eigen::VectorXd z(m_ - 1);
        for (int i = 0; i < m_ - 1; ++i) z[i] = norm_draw(rng);
        const Eigen::VectorXd& mean = means_[obs.j0];
        const Eigen::VectorXd gz = factors_[obs.j0] * z;

        Eigen::VectorXd g(m_);
        for (int j = 0, r = 0; j < m_; ++j)
            g[j] = (j == obs.j0) ? 0.0 : mean[j] + gz[r++];

        const double lse = detail::logsumexp_head(g, n_norm_);
        obs.y_tilde = (g.array() + (obs.u - lse + std::log(static_cast<double>(n_norm_)))).matrix();
        obs.y = (ell_a_.array() * (obs.y_tilde + log_theta_).array() + ell_b_.array()).matrix();
        return obs;
    }

  private:
    Eigen::VectorXd log_theta_, ell_a_, ell_b_;
    int m_ = 0, n_anchors_ = 0, n_norm_ = 0;
    std::vector<Eigen::VectorXd> means_;
    std::vector<Eigen::MatrixXd> factors_;
};

// Single aggregated pseudo-observation over L >= 2 cells.
inline PseudoObservation sample_aggregated(const HRModel& model, const Eigen::VectorXd& thetas,
                                           const Eigen::VectorXd& ell_a,
                                           const Eigen::VectorXd& ell_b, std::uint64_t seed) {
    if (thetas.size() != model.dim)
        throw config_error("sample_aggregated: theta length mismatch");
    Eigen::VectorXd log_theta(thetas.size());
    for (Eigen::Index j = 0; j < thetas.size(); ++j) {
        if (!(thetas[j] > 0.0 && thetas[j] <= 1.0))
            throw domain_error("sample_aggregated: theta must lie in (0,1]");
        log_theta[j] = std::log(thetas[j]);
    }
    AggregatedSampler sampler(model.gamma, std::move(log_theta), ell_a, ell_b);
    return sampler.draw(seed);
}

// Conditional simulation at the K target points of the scheme given the L
// observed aggregates, conditioning on coordinate cond_j exceeding its
// location.  In log-spectral space the field is Gaussian with mean
// -Gamma_{.,J}/2 anchored at J; the theta-shifts live inside mu and need no
// extra term here.  Conditioning on the observed cells is an exact Schur
// complement; the J-th constraint is identically satisfied and pins the
// anchor, so it is excluded from the solve.
inline std::vector<ConditionalDraw> conditional_simulate(const ModelParams& fit,
                                                         const ModelEngine& engine,
                                                         const Eigen::VectorXd& y, int cond_j,
                                                         double t, long n_draws,
                                                         std::uint64_t seed) {
    const int L = engine.n_cells(), K = engine.n_points(), m = L + K;
    if (L < 1) throw config_error("conditional_simulate: need at least one aggregate");
    if (y.size() != L) throw config_error("conditional_simulate: observed vector length mismatch");
    if (cond_j < 0 || cond_j >= L)
        throw config_error("conditional_simulate: conditioning index out of range");
    if (n_draws < 0) throw config_error("conditional_simulate: negative draw count");
    if (!(t > 0.0) || !std::isfinite(t)) throw config_error("conditional_simulate: level t must be > 0");

    const ModelEngine::Eval ev = engine.evaluate(fit, true);
    const double u = (y[cond_j] - ev.mu[cond_j]) / ev.sigma[cond_j];
    if (!(u > 0.0))
        throw config_error(
            "conditional_simulate: conditioning aggregate must exceed its location (u > 0)");

    // Normalized observations relative to the exceedance radius.
    Eigen::VectorXd w(L);
    for (int j = 0; j < L; ++j) w[j] = (y[j] - ev.mu[j]) / ev.sigma[j] - u;

    // Anchored Gaussian on the m-1 non-J coordinates: first L-1 rows are the
    // observed cells (ascending, J excluded), last K rows the targets.
    const Eigen::MatrixXd sigma = sigma_from_gamma(ev.gamma, cond_j);
    Eigen::VectorXd mean(m - 1);
    Eigen::VectorXd w_obs(L - 1);
    for (int j = 0, r = 0; j < m; ++j) {
        if (j == cond_j) continue;
        mean[r] = -0.5 * ev.gamma(j, cond_j);
        if (j < L) w_obs[r] = w[j];
        ++r;
    }

    Eigen::VectorXd mu_c = mean.tail(K);
    Eigen::MatrixXd sigma_c = sigma.bottomRightCorner(K, K);
    if (L > 1) {
        const Eigen::MatrixXd s_oo = sigma.topLeftCorner(L - 1, L - 1);
        Eigen::LLT<Eigen::MatrixXd> llt(s_oo);
        if (llt.info() != Eigen::Success)
            throw degeneracy_error("conditional_simulate: singular conditioning covariance");
        const Eigen::MatrixXd s_to = sigma.bottomLeftCorner(K, L - 1);
        mu_c.noalias() += s_to * llt.solve(w_obs.head(L - 1) - mean.head(L - 1));
        sigma_c.noalias() -= s_to * llt.solve(s_to.transpose());
    }
    const Eigen::MatrixXd factor = detail::psd_sqrt(sigma_c);

    Eigen::VectorXd aggregates(L);
    for (int j = 0; j < L; ++j) aggregates[j] = ev.mu[j] + ev.sigma[j] * (w[j] + u);

    std::vector<ConditionalDraw> draws;
    draws.reserve(static_cast<std::size_t>(n_draws));
    Eigen::VectorXd z(K);
    for (long i = 0; i < n_draws; ++i) {
        Rng rng(seed, static_cast<std::uint64_t>(i));
        for (int k = 0; k < K; ++k) z[k] = norm_draw(rng);
        const Eigen::VectorXd psi = mu_c + factor * z;
        ConditionalDraw d;
        d.u = u;
        d.j = cond_j;
        d.aggregates = aggregates;
        d.point_values.resize(K);
        for (int k = 0; k < K; ++k)
            d.point_values[k] = ev.mu[L + k] + ev.sigma[L + k] * (u + psi[k]);
        draws.push_back(std::move(d));
    }
    return draws;
}

inline std::vector<ConditionalDraw> conditional_simulate(const ModelParams& fit,
                                                         const AggregationScheme& scheme,
                                                         const Eigen::VectorXd& y, int cond_j,
                                                         double t, long n_draws,
                                                         std::uint64_t seed) {
    ModelEngine engine(scheme);
    return conditional_simulate(fit, engine, y, cond_j, t, n_draws, seed);
}

// Unconditional extreme events over the scheme: rejection sampling from the
// aggregated-vector generator extended to the K target points, accepting
// when the largest of the L normalized cell coordinates exceeds the
// sum-renormalization level, then replacing the radius by a fresh
// exponential draw on the max-renormalized profile.
inline SimulationBatch unconditional_extreme_simulate(const ModelParams& fit,
                                                      const ModelEngine& engine, double t,
                                                      long n_draws, std::uint64_t seed) {
    const int L = engine.n_cells(), K = engine.n_points(), m = L + K;
    if (L < 1) throw config_error("unconditional_extreme_simulate: need at least one aggregate");
    if (n_draws < 0) throw config_error("unconditional_extreme_simulate: negative draw count");
    if (!(t > 0.0) || !std::isfinite(t))
        throw config_error("unconditional_extreme_simulate: level t must be > 0");

    const ModelEngine::Eval ev = engine.evaluate(fit, true);
    SimulationBatch batch;
    batch.events.reserve(static_cast<std::size_t>(n_draws));

    // Fresh exponential radii come from a substream family separated from the
    // proposal streams by a fixed key.
    const std::uint64_t radius_seed = seed ^ 0x9e3779b97f4a7c15ULL;

    if (m == 1) {
        // Single aggregate, no targets: every proposal is its own maximum.
        for (long i = 0; i < n_draws; ++i) {
            Rng rng(radius_seed, static_cast<std::uint64_t>(i));
            ConditionalDraw d;
            d.u = rng.exponential();
            d.j = 0;
            d.aggregates = Eigen::VectorXd::Constant(1, ev.mu[0] + ev.sigma[0] * d.u);
            d.point_values = Eigen::VectorXd(0);
            batch.events.push_back(std::move(d));
        }
        batch.proposals = n_draws;
        batch.acceptance_rate = 1.0;
        return batch;
    }

    AggregatedSampler proposals(ev.gamma, ev.log_theta, ev.ell_a,
                                Eigen::VectorXd::Zero(m), L, L);
    const double log_l = std::log(static_cast<double>(L));
    const long probe = 2000;
    const long cap = 10000 + 20L * static_cast<long>(L) * std::max<long>(n_draws, 1);

    long made = 0;
    while (static_cast<long>(batch.events.size()) < n_draws) {
        if (made == probe) {
            const double rate =
                static_cast<double>(batch.events.size()) / static_cast<double>(probe);
            if (rate < 1e-3) {
                batch.low_acceptance = true;
                break;
            }
        }
        if (made >= cap) {
            batch.low_acceptance = true;
            break;
        }
        const PseudoObservation prop = proposals.draw(seed, static_cast<std::uint64_t>(made));
        ++made;

        int argmax = 0;
        double best = prop.y_tilde[0];
        for (int j = 1; j < L; ++j)
            if (prop.y_tilde[j] > best) {
                best = prop.y_tilde[j];
                argmax = j;
            }
        if (!(best > log_l)) continue;

        Rng rng(radius_seed, static_cast<std::uint64_t>(made - 1));
        const double u = rng.exponential();

        ConditionalDraw d;
        d.u = u;
        d.j = argmax;
        d.aggregates.resize(L);
        d.point_values.resize(K);
        for (int j = 0; j < m; ++j) {
            const double normalized = u + (prop.y_tilde[j] - best);
            const double value = ev.mu[j] + ev.sigma[j] * normalized;
            if (j < L)
                d.aggregates[j] = value;
            else
                d.point_values[j - L] = value;
        }
        batch.events.push_back(std::move(d));
    }
    batch.proposals = made;
    batch.acceptance_rate =
        made > 0 ? static_cast<double>(batch.events.size()) / static_cast<double>(made) : 0.0;
    return batch;
}

inline SimulationBatch unconditional_extreme_simulate(const ModelParams& fit,
                                                      const AggregationScheme& scheme, double t,
                                                      long n_draws, std::uint64_t seed) {
    ModelEngine engine(scheme);
    return unconditional_extreme_simulate(fit, engine, t, n_draws, seed);
}

}  // namespace aggext
