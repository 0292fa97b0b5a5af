#pragma once

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <utility>
#include <vector>

#include "aggext/aggregation.hpp"
#include "aggext/covariates.hpp"
#include "aggext/errors.hpp"
#include "aggext/geometry.hpp"
#include "aggext/hr_core.hpp"
#include "aggext/rng.hpp"
#include "aggext/variogram.hpp"

namespace aggext {

// Extreme value index.  The fitting pipeline works at xi = 0 (Gumbel);
// nonzero values are supported by the Monte Carlo estimators only.
struct Xi {
    double value = 0.0;

    void validate() const {
        if (!std::isfinite(value)) throw domain_error("Xi: index must be finite");
    }
};

// Closed-form extremal coefficient of the 1D average over [0, T] under the
// power variogram: exp{-T^alpha / (2 lambda^alpha (alpha+1)(alpha+2))}.
inline double theta_power_1d(double T, double alpha, double lambda) {
    if (!(T > 0.0) || !std::isfinite(T)) throw domain_error("theta_power_1d: T must be > 0");
    VariogramParams p;
    p.alpha = alpha;
    p.lambda = lambda;
    p.validate();
    return std::exp(-std::pow(T / lambda, alpha) / (2.0 * (alpha + 1.0) * (alpha + 2.0)));
}

// Extremal coefficient of a weighted spatial average by quadrature:
// log theta = - (1/4) * double integral of A(s)A(t)gamma(s-t) / (int A)^2.
inline double theta_avg_closed_form(const Region& region, const CovariateSurface& A,
                                    const VariogramParams& p, const QuadratureRule& q = {}) {
    const std::vector<Functional> fs{Functional::cell_average(region)};
    const GammaMatrix gm = gamma_matrix(fs, A, p, q, true);
    if (!gm.converged)
        throw quadrature_error("theta_avg_closed_form: quadrature did not converge");
    const double theta = std::exp(gm.log_theta[0]);
    if (!(theta > 0.0 && theta <= 1.0))
        throw quadrature_error("theta_avg_closed_form: value escaped (0,1]");
    return theta;
}

// Spectral sampler for the Brown-Resnick profile W(s) = exp{G(s) - gamma(s)/2}
// on a uniform grid covering every functional support, anchored so that
// G = 0 at the grid centroid (E W = 1 by construction).
class SpectralSampler {
  public:
    SpectralSampler(const std::vector<Functional>& functionals, const VariogramParams& vp,
                    double nodes_per_unit = 64.0)
        : vp_(vp) {
        vp_.validate();
        if (!(nodes_per_unit > 0.0))
            throw config_error("SpectralSampler: nodes_per_unit must be > 0");
        if (functionals.empty()) throw config_error("SpectralSampler: no functionals");

        double x0 = std::numeric_limits<double>::infinity(), x1 = -x0;
        double y0 = x0, y1 = -x0;
        for (const Functional& f : functionals) {
            if (f.kind == FunctionalKind::CellAverage) {
                f.region.validate();
                x0 = std::min(x0, f.region.xmin);
                x1 = std::max(x1, f.region.xmax);
                y0 = std::min(y0, f.region.ymin);
                y1 = std::max(y1, f.region.ymax);
            } else {
                for (const Point& p : f.points) {
                    x0 = std::min(x0, p.x);
                    x1 = std::max(x1, p.x);
                    y0 = std::min(y0, p.y);
                    y1 = std::max(y1, p.y);
                }
            }
        }
        build_axis(x0, x1, nodes_per_unit, xs_);
        build_axis(y0, y1, nodes_per_unit, ys_);
        anchor_ = {0.5 * (x0 + x1), 0.5 * (y0 + y1)};

        const detail::VariogramEval ge(vp_);
        gamma_anchor_.resize(xs_.size() * ys_.size());
        for (std::size_t i = 0; i < xs_.size(); ++i)
            for (std::size_t j = 0; j < ys_.size(); ++j)
                gamma_anchor_[i * ys_.size() + j] =
                    ge(xs_[i] - anchor_.x, ys_[j] - anchor_.y);

        const long nx = static_cast<long>(xs_.size()), ny = static_cast<long>(ys_.size());
        diff_table_.resize((2 * nx - 1) * (2 * ny - 1));
        for (long di = -(nx - 1); di <= nx - 1; ++di)
            for (long dj = -(ny - 1); dj <= ny - 1; ++dj)
                diff_table_[(di + nx - 1) * (2 * ny - 1) + (dj + ny - 1)] =
                    ge(di * dx_, dj * dy_);
    }

    struct Node {
        int ix, iy;
        double w;  // quadrature weight along the support (trapezoid, tensorized)
    };

    const std::vector<double>& xs() const { return xs_; }
    const std::vector<double>& ys() const { return ys_; }
    Point node_point(const Node& n) const { return {xs_[n.ix], ys_[n.iy]}; }
    const VariogramParams& params() const { return vp_; }

    double gamma_to_anchor(const Node& n) const {
        return gamma_anchor_[static_cast<std::size_t>(n.ix) * ys_.size() + n.iy];
    }
    double cov(const Node& a, const Node& b) const {
        const long nx = static_cast<long>(xs_.size()), ny = static_cast<long>(ys_.size());
        const double gd =
            diff_table_[(a.ix - b.ix + nx - 1) * (2 * ny - 1) + (a.iy - b.iy + ny - 1)];
        return 0.5 * (gamma_to_anchor(a) + gamma_to_anchor(b) - gd);
    }

    // Grid nodes resolving the support of a functional, with tensorized
    // trapezoid weights for cell averages (unit weights otherwise).
    std::vector<Node> support_nodes(const Functional& f) const {
        std::vector<Node> out;
        if (f.kind == FunctionalKind::CellAverage) {
            const auto ix = axis_range(xs_, dx_, f.region.xmin, f.region.xmax);
            const auto iy = axis_range(ys_, dy_, f.region.ymin, f.region.ymax);
            for (std::size_t a = 0; a < ix.size(); ++a)
                for (std::size_t b = 0; b < iy.size(); ++b) {
                    const double wx =
                        (ix.size() > 1 && (a == 0 || a + 1 == ix.size())) ? 0.5 : 1.0;
                    const double wy =
                        (iy.size() > 1 && (b == 0 || b + 1 == iy.size())) ? 0.5 : 1.0;
                    out.push_back({ix[a], iy[b], wx * wy});
                }
        } else {
            for (const Point& p : f.points) out.push_back({nearest(xs_, dx_, p.x),
                                                           nearest(ys_, dy_, p.y), 1.0});
        }
        return out;
    }

  private:
    void build_axis(double lo, double hi, double npu, std::vector<double>& axis) {
        double& d = (&axis == &xs_) ? dx_ : dy_;
        if (!(std::isfinite(lo) && std::isfinite(hi)))
            throw geometry_error("SpectralSampler: unbounded functional support");
        if (hi - lo < 1e-12) {
            axis = {lo};
            d = 1.0;  // unused spacing placeholder for a collapsed axis
            return;
        }
        const int n = std::max(2, static_cast<int>(std::llround((hi - lo) * npu)) + 1);
        axis.resize(n);
        d = (hi - lo) / (n - 1);
        for (int i = 0; i < n; ++i) axis[i] = lo + d * i;
        axis.back() = hi;
    }

    static std::vector<int> axis_range(const std::vector<double>& axis, double d, double lo,
                                       double hi) {
        const double tol = 1e-9 * (1.0 + std::fabs(lo) + std::fabs(hi));
        std::vector<int> out;
        for (std::size_t i = 0; i < axis.size(); ++i)
            if (axis[i] >= lo - tol && axis[i] <= hi + tol) out.push_back(static_cast<int>(i));
        if (out.empty()) {
            // Degenerate range between grid rows: snap to the nearest one.
            const int i = nearest(axis, d, 0.5 * (lo + hi));
            out.push_back(i);
        }
        return out;
    }

    static int nearest(const std::vector<double>& axis, double d, double v) {
        if (axis.size() == 1) {
            if (std::fabs(v - axis[0]) > 0.5 * d + 1e-9)
                throw coverage_error("SpectralSampler: point outside the sampled grid");
            return 0;
        }
        if (v < axis.front() - 0.5 * d || v > axis.back() + 0.5 * d)
            throw coverage_error("SpectralSampler: point outside the sampled grid");
        const auto it = std::lower_bound(axis.begin(), axis.end(), v);
        if (it == axis.begin()) return 0;
        if (it == axis.end()) return static_cast<int>(axis.size()) - 1;
        const std::size_t hi = static_cast<std::size_t>(it - axis.begin());
        return (v - axis[hi - 1] <= axis[hi] - v) ? static_cast<int>(hi - 1)
                                                  : static_cast<int>(hi);
    }

    VariogramParams vp_;
    std::vector<double> xs_, ys_;
    double dx_ = 1.0, dy_ = 1.0;
    Point anchor_;
    std::vector<double> gamma_anchor_;
    std::vector<double> diff_table_;
};

namespace detail {

struct SupportWeights {
    std::vector<SpectralSampler::Node> nodes;
    std::vector<double> w;  // normalized: sum to 1 (linear functionals only)
};

// Normalized weights so that ell(f * A) / ell(A) = sum_i w_i f(node_i) for a
// linear functional under the sampler's grid discretization.
inline SupportWeights normalized_weights(const Functional& f, const CovariateSurface& A,
                                         const SpectralSampler& s) {
    if (f.kind == FunctionalKind::Max)
        throw unsupported_functional_error(
            "theta_mc: xi = 0 requires a linear functional (Max is not)");
    SupportWeights sw;
    sw.nodes = s.support_nodes(f);
    sw.w.resize(sw.nodes.size());
    double total = 0.0;
    for (std::size_t i = 0; i < sw.nodes.size(); ++i) {
        const Point p = s.node_point(sw.nodes[i]);
        const double a = A(p);
        if (!(a > 0.0)) throw domain_error("theta_mc: covariate surface must be positive");
        double wi = sw.nodes[i].w * a;
        if (f.kind == FunctionalKind::WeightedSum) wi = f.weights[i] * a;
        sw.w[i] = wi;
        total += wi;
    }
    if (!(total > 0.0)) throw domain_error("theta_mc: functional has zero mass");
    for (double& wi : sw.w) wi /= total;
    return sw;
}

// Evaluate a (possibly nonlinear) functional on per-node field values.
inline double apply_functional(const Functional& f, const std::vector<SpectralSampler::Node>& nodes,
                               const std::vector<double>& values) {
    switch (f.kind) {
        case FunctionalKind::CellAverage: {
            double num = 0.0, den = 0.0;
            for (std::size_t i = 0; i < nodes.size(); ++i) {
                num += nodes[i].w * values[i];
                den += nodes[i].w;
            }
            return num / den;
        }
        case FunctionalKind::PointEval:
            return values[0];
        case FunctionalKind::Max: {
            double best = -std::numeric_limits<double>::infinity();
            for (double v : values) best = std::max(best, v);
            return best;
        }
        case FunctionalKind::WeightedSum: {
            double total = 0.0;
            for (std::size_t i = 0; i < values.size(); ++i) total += f.weights[i] * values[i];
            return total;
        }
    }
    throw unsupported_functional_error("apply_functional: unknown kind");
}

inline Eigen::MatrixXd support_factor(const SpectralSampler& s,
                                      const std::vector<SpectralSampler::Node>& nodes) {
    const int n = static_cast<int>(nodes.size());
    if (n > 6000)
        throw config_error(
            "SpectralSampler: support too fine for a joint factorization; coarsen the grid");
    Eigen::MatrixXd cov(n, n);
    for (int i = 0; i < n; ++i)
        for (int j = 0; j <= i; ++j) {
            cov(i, j) = s.cov(nodes[i], nodes[j]);
            cov(j, i) = cov(i, j);
        }
    return psd_sqrt(cov);
}

}  // namespace detail

// Theorem-1 Monte Carlo extremal coefficient of a single functional.
// xi = 0 (linear functionals): theta = E exp{ell(A log W)/ell(A)}.
// xi != 0: theta = E [ell(W^xi A)/ell(A)]^{1/xi}.
inline McEstimate theta_mc(const Functional& ell, const Xi& xi, const CovariateSurface& A,
                           const SpectralSampler& sampler, long n,
                           std::uint64_t seed = 0x7e7aULL) {
    xi.validate();
    A.validate();
    if (n < 2) throw config_error("theta_mc: need n >= 2");

    double mean = 0.0, m2 = 0.0;
    if (xi.value == 0.0) {
        const detail::SupportWeights sw = detail::normalized_weights(ell, A, sampler);
        double drift = 0.0, var = 0.0;
        for (std::size_t i = 0; i < sw.nodes.size(); ++i) {
            drift -= 0.5 * sw.w[i] * sampler.gamma_to_anchor(sw.nodes[i]);
            for (std::size_t j = 0; j < sw.nodes.size(); ++j)
                var += sw.w[i] * sw.w[j] * sampler.cov(sw.nodes[i], sw.nodes[j]);
        }
        const double u = std::sqrt(std::max(var, 0.0));
        for (long i = 0; i < n; ++i) {
            Rng rng(seed, static_cast<std::uint64_t>(i));
            const double val = std::exp(drift + u * norm_draw(rng));
            const double delta = val - mean;
            mean += delta / static_cast<double>(i + 1);
            m2 += delta * (val - mean);
        }
    } else {
        const std::vector<SpectralSampler::Node> nodes = sampler.support_nodes(ell);
        const Eigen::MatrixXd factor = detail::support_factor(sampler, nodes);
        const int nn = static_cast<int>(nodes.size());
        std::vector<double> a_at(nn), field(nn);
        for (int i = 0; i < nn; ++i) {
            a_at[i] = A(sampler.node_point(nodes[i]));
            if (!(a_at[i] > 0.0))
                throw domain_error("theta_mc: covariate surface must be positive");
        }
        const double ell_a = detail::apply_functional(ell, nodes, a_at);
        Eigen::VectorXd z(nn), g(nn);
        for (long i = 0; i < n; ++i) {
            Rng rng(seed, static_cast<std::uint64_t>(i));
            for (int j = 0; j < nn; ++j) z[j] = norm_draw(rng);
            g.noalias() = factor * z;
            for (int j = 0; j < nn; ++j) {
                const double logw = g[j] - 0.5 * sampler.gamma_to_anchor(nodes[j]);
                field[j] = std::exp(xi.value * logw) * a_at[j];
            }
            const double val =
                std::pow(detail::apply_functional(ell, nodes, field) / ell_a, 1.0 / xi.value);
            const double delta = val - mean;
            mean += delta / static_cast<double>(i + 1);
            m2 += delta * (val - mean);
        }
    }
    McEstimate est;
    est.value = mean;
    est.n = n;
    est.se = std::sqrt(m2 / (static_cast<double>(n) * static_cast<double>(n - 1)));
    return est;
}

// Theorem-2 Monte Carlo estimate of the joint tail limit for several
// functionals at argument x.
inline McEstimate multivariate_tail_mc(const std::vector<Functional>& functionals,
                                       const Eigen::VectorXd& x, const Xi& xi,
                                       const CovariateSurface& A, const SpectralSampler& sampler,
                                       long n, std::uint64_t seed = 0x7e7bULL) {
    xi.validate();
    A.validate();
    const int L = static_cast<int>(functionals.size());
    if (L < 1 || x.size() != L) throw config_error("multivariate_tail_mc: dimension mismatch");
    if (n < 2) throw config_error("multivariate_tail_mc: need n >= 2");
    if (xi.value != 0.0)
        for (int j = 0; j < L; ++j)
            if (!(xi.value * x[j] > 0.0))
                throw domain_error("multivariate_tail_mc: need xi * x_j > 0 for all j");

    // Joint support with per-functional index lists into it.
    std::vector<SpectralSampler::Node> all;
    std::vector<std::vector<int>> offsets(L);
    std::vector<detail::SupportWeights> weights;
    for (int j = 0; j < L; ++j) {
        std::vector<SpectralSampler::Node> nodes;
        if (xi.value == 0.0) {
            weights.push_back(detail::normalized_weights(functionals[j], A, sampler));
            nodes = weights.back().nodes;
        } else {
            nodes = sampler.support_nodes(functionals[j]);
        }
        for (const auto& nd : nodes) {
            int found = -1;
            for (std::size_t k = 0; k < all.size(); ++k)
                if (all[k].ix == nd.ix && all[k].iy == nd.iy) {
                    found = static_cast<int>(k);
                    break;
                }
            if (found < 0) {
                found = static_cast<int>(all.size());
                all.push_back(nd);
            }
            offsets[j].push_back(found);
        }
    }
    const Eigen::MatrixXd factor = detail::support_factor(sampler, all);
    const int nn = static_cast<int>(all.size());

    std::vector<double> a_at(nn);
    for (int i = 0; i < nn; ++i) a_at[i] = A(sampler.node_point(all[i]));
    std::vector<double> ell_a(L, 0.0);
    if (xi.value != 0.0)
        for (int j = 0; j < L; ++j) {
            std::vector<double> av(offsets[j].size());
            std::vector<SpectralSampler::Node> nodes(offsets[j].size());
            for (std::size_t k = 0; k < offsets[j].size(); ++k) {
                av[k] = a_at[offsets[j][k]];
                nodes[k] = all[offsets[j][k]];
            }
            ell_a[j] = detail::apply_functional(functionals[j], nodes, av);
        }

    Eigen::VectorXd z(nn), g(nn);
    std::vector<double> logw(nn), field(nn);
    double mean = 0.0, m2 = 0.0;
    for (long i = 0; i < n; ++i) {
        Rng rng(seed, static_cast<std::uint64_t>(i));
        for (int j = 0; j < nn; ++j) z[j] = norm_draw(rng);
        g.noalias() = factor * z;
        for (int j = 0; j < nn; ++j) logw[j] = g[j] - 0.5 * sampler.gamma_to_anchor(all[j]);

        double val = 0.0;
        if (xi.value == 0.0) {
            double best = -std::numeric_limits<double>::infinity();
            for (int j = 0; j < L; ++j) {
                double s = -x[j];
                for (std::size_t k = 0; k < offsets[j].size(); ++k)
                    s += weights[j].w[k] * logw[offsets[j][k]];
                best = std::max(best, s);
            }
            val = std::exp(best);
        } else {
            for (int j = 0; j < L; ++j) {
                std::vector<double> fv(offsets[j].size());
                std::vector<SpectralSampler::Node> nodes(offsets[j].size());
                for (std::size_t k = 0; k < offsets[j].size(); ++k) {
                    const int idx = offsets[j][k];
                    fv[k] = std::exp(xi.value * logw[idx]) * a_at[idx];
                    nodes[k] = all[idx];
                }
                const double r = detail::apply_functional(functionals[j], nodes, fv) /
                                 (std::fabs(x[j]) * ell_a[j]);
                val = std::max(val, std::pow(r, 1.0 / xi.value));
            }
        }
        const double delta = val - mean;
        mean += delta / static_cast<double>(i + 1);
        m2 += delta * (val - mean);
    }
    McEstimate est;
    est.value = mean;
    est.n = n;
    est.se = std::sqrt(m2 / (static_cast<double>(n) * static_cast<double>(n - 1)));
    return est;
}

}  // namespace aggext
