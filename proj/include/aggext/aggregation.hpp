#pragma once

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <cstddef>
#include <vector>

#include "aggext/covariates.hpp"
#include "aggext/errors.hpp"
#include "aggext/geometry.hpp"
#include "aggext/rng.hpp"
#include "aggext/variogram.hpp"

namespace aggext {

// Hüsler-Reiss dependence matrix for a mixed vector of cell averages and
// point evaluations, ordered cells first, points second.
struct GammaMatrix {
    Eigen::MatrixXd gamma;
    Eigen::VectorXd log_theta;  // log extremal coefficient per functional (0 for points)
    int n_cells = 0;
    int n_points = 0;
    bool convergence_checked = false;
    bool converged = true;
    double max_rel_change = 0.0;
};

namespace detail {

struct QuadNode2 {
    double x, y, w;
};

inline constexpr int kGradeLevels = 14;

inline void append_tensor_nodes(double x0, double x1, double y0, double y1, int n,
                                std::vector<QuadNode2>& out) {
    std::vector<double> xs, wx, ys, wy;
    axis_nodes(x0, x1, n, xs, wx);
    axis_nodes(y0, y1, n, ys, wy);
    for (std::size_t i = 0; i < xs.size(); ++i)
        for (std::size_t j = 0; j < ys.size(); ++j)
            out.push_back({xs[i], ys[j], wx[i] * wy[j]});
}

// Nodes for a rectangle whose integrand has a kink at one corner: dyadically
// graded L-shells toward that corner, tensor GL of order p on each piece.
// The corner is (cx, cy); sx/sy give the direction into the rectangle
// (ignored for a degenerate axis, flagged by extent 0).
inline void append_corner_graded(double cx, double cy, double sx, double sy, double ex,
                                 double ey, int p, std::vector<QuadNode2>& out) {
    const bool dx_live = ex > 0.0, dy_live = ey > 0.0;
    // append_tensor_nodes expects ordered bounds; normalize after mapping.
    const auto emit_sorted = [&](double u0, double u1, double v0, double v1) {
        double a0 = dx_live ? cx + sx * u0 * ex : cx;
        double a1 = dx_live ? cx + sx * u1 * ex : cx;
        double b0 = dy_live ? cy + sy * v0 * ey : cy;
        double b1 = dy_live ? cy + sy * v1 * ey : cy;
        if (a0 > a1) std::swap(a0, a1);
        if (b0 > b1) std::swap(b0, b1);
        append_tensor_nodes(a0, a1, b0, b1, p, out);
    };
    double b = 1.0;
    for (int k = 0; k < kGradeLevels; ++k, b *= 0.5) {
        const double a = 0.5 * b;
        if (dx_live && dy_live) {
            emit_sorted(a, b, 0.0, a);
            emit_sorted(a, b, a, b);
            emit_sorted(0.0, a, a, b);
        } else {
            emit_sorted(a, b, a, b);  // one live axis: a plain graded interval
        }
    }
    emit_sorted(0.0, b, 0.0, b);  // innermost piece (relative size 2^-K)
}

// Split [lo,hi] at the interior breakpoints that fall strictly inside.
inline std::vector<std::pair<double, double>> split_axis(double lo, double hi,
                                                         std::initializer_list<double> breaks) {
    std::vector<double> cuts{lo};
    const double tol = 1e-13 * (1.0 + std::fabs(lo) + std::fabs(hi));
    for (double c : breaks)
        if (c > lo + tol && c < hi - tol) cuts.push_back(c);
    cuts.push_back(hi);
    std::sort(cuts.begin(), cuts.end());
    std::vector<std::pair<double, double>> segs;
    for (std::size_t i = 0; i + 1 < cuts.size(); ++i)
        if (cuts[i + 1] - cuts[i] > tol || i + 2 == cuts.size()) segs.push_back({cuts[i], cuts[i + 1]});
    return segs;
}

// Precomputed lag-space quadrature for one ordered cell pair (j,k):
// integral of A(s)A(t)gamma(s-t) over S_j x S_k as
// int gamma(d) * C(d) dd with C(d) = int_{S_j ∩ (S_k+d)} A(s)A(s-d) ds.
// basis_prod stores, per lag node, the inner-integral products of the
// covariate basis so that C(d) = a_coeffs' * M * a_coeffs.
struct PairTable {
    int j = 0, k = 0;
    std::vector<QuadNode2> lag_nodes;
    std::vector<double> basis_prod;  // lag_nodes.size() * kA * kA

    double contract(const double* coeffs, int ka, std::size_t node) const {
        const double* m = basis_prod.data() + node * ka * ka;
        double total = 0.0;
        for (int c = 0; c < ka; ++c)
            for (int d = 0; d < ka; ++d) total += coeffs[c] * coeffs[d] * m[c * ka + d];
        return total;
    }
};

// Quadrature for int_{S_j} A(s) gamma(s - p) ds (cell-point block).
struct PointTable {
    int j = 0, q = 0;
    Point p;
    std::vector<QuadNode2> nodes;  // absolute coordinates over S_j
    std::vector<double> basis;     // nodes.size() * kA
};

// Single-cell integral nodes (for Abar and positivity checks).
struct CellTable {
    std::vector<QuadNode2> nodes;
    std::vector<double> basis;  // nodes.size() * kA
};

}  // namespace detail

// Reusable quadrature tables for a fixed set of functionals, covariate basis
// and rule; evaluation per (A-coefficients, variogram parameters) is cheap,
// which is what the fitting loops rely on.
class SchemeQuadrature {
  public:
    SchemeQuadrature(const std::vector<Functional>& functionals,
                     std::vector<CovariateBasis> a_basis, QuadratureRule rule = {})
        : a_basis_(std::move(a_basis)), rule_(rule) {
        rule.validate();
        if (a_basis_.empty()) throw config_error("SchemeQuadrature: empty covariate basis");
        split_functionals(functionals);
        build_cell_tables();
        build_pair_tables();
        build_point_tables();
    }

    int n_cells() const { return static_cast<int>(cells_.size()); }
    int n_points() const { return static_cast<int>(points_.size()); }
    int n_basis() const { return static_cast<int>(a_basis_.size()); }
    const std::vector<Region>& cells() const { return cells_; }
    const std::vector<Point>& points() const { return points_; }
    const QuadratureRule& rule() const { return rule_; }

    struct Evaluation {
        Eigen::MatrixXd gamma;      // (L+K) x (L+K)
        Eigen::VectorXd log_theta;  // length L+K
        Eigen::VectorXd abar;       // integral of A over each cell (length L)
        Eigen::VectorXd ell_a;      // ell_j{A}: cell means of A, A(p) for points
    };

    Evaluation evaluate(const Eigen::VectorXd& a_coeffs, const VariogramParams& vp) const {
        if (a_coeffs.size() != static_cast<Eigen::Index>(a_basis_.size()))
            throw config_error("SchemeQuadrature: coefficient size mismatch");
        detail::VariogramEval geval(vp);
        const int L = n_cells(), K = n_points(), m = L + K, ka = n_basis();
        const double* th = a_coeffs.data();

        Evaluation ev;
        ev.abar.resize(L);
        ev.ell_a.resize(m);

        // Abar_j plus strict positivity of A over every cell.
        for (int j = 0; j < L; ++j) {
            const detail::CellTable& tab = cell_tables_[j];
            double total = 0.0, amin = std::numeric_limits<double>::infinity();
            for (std::size_t i = 0; i < tab.nodes.size(); ++i) {
                double a = 0.0;
                for (int c = 0; c < ka; ++c) a += th[c] * tab.basis[i * ka + c];
                amin = std::min(amin, a);
                total += tab.nodes[i].w * a;
            }
            if (!(amin > 0.0))
                throw domain_error("gamma_matrix: covariate surface A must be strictly positive");
            ev.abar[j] = total;
            ev.ell_a[j] = total / cells_[j].measure();
        }
        for (int q = 0; q < K; ++q) {
            double a = 0.0;
            for (int c = 0; c < ka; ++c) a += th[c] * point_basis_[q * ka + c];
            if (!(a > 0.0))
                throw domain_error("gamma_matrix: covariate surface A must be strictly positive");
            ev.ell_a[L + q] = a;
        }

        // D_jk = (1/(Abar_j Abar_k)) double integral of A A gamma.
        Eigen::MatrixXd D = Eigen::MatrixXd::Zero(L, L);
        for (const detail::PairTable& pt : pair_tables_) {
            double total = 0.0;
            for (std::size_t i = 0; i < pt.lag_nodes.size(); ++i) {
                const detail::QuadNode2& nd = pt.lag_nodes[i];
                const double g = geval(nd.x, nd.y);
                if (g != 0.0) total += nd.w * g * pt.contract(th, ka, i);
            }
            const double d = total / (ev.abar[pt.j] * ev.abar[pt.k]);
            D(pt.j, pt.k) = d;
            D(pt.k, pt.j) = d;
        }

        ev.gamma = Eigen::MatrixXd::Zero(m, m);
        for (int j = 0; j < L; ++j)
            for (int k = j + 1; k < L; ++k) {
                double g = D(j, k) - 0.5 * (D(j, j) + D(k, k));
                if (g < 0.0 && g > -1e-9) g = 0.0;
                ev.gamma(j, k) = ev.gamma(k, j) = g;
            }

        for (const detail::PointTable& pt : point_tables_) {
            double total = 0.0;
            for (std::size_t i = 0; i < pt.nodes.size(); ++i) {
                const detail::QuadNode2& nd = pt.nodes[i];
                double a = 0.0;
                for (int c = 0; c < ka; ++c) a += th[c] * pt.basis[i * ka + c];
                total += nd.w * a * geval(nd.x - pt.p.x, nd.y - pt.p.y);
            }
            double g = total / ev.abar[pt.j] - 0.5 * D(pt.j, pt.j);
            if (g < 0.0 && g > -1e-9) g = 0.0;
            ev.gamma(pt.j, L + pt.q) = ev.gamma(L + pt.q, pt.j) = g;
        }

        for (int p = 0; p < K; ++p)
            for (int q = p + 1; q < K; ++q) {
                const double g =
                    geval(points_[p].x - points_[q].x, points_[p].y - points_[q].y);
                ev.gamma(L + p, L + q) = ev.gamma(L + q, L + p) = g;
            }

        ev.log_theta = Eigen::VectorXd::Zero(m);
        for (int j = 0; j < L; ++j) ev.log_theta[j] = -0.25 * D(j, j);
        return ev;
    }

  private:
    void split_functionals(const std::vector<Functional>& fs) {
        bool seen_point = false;
        for (const Functional& f : fs) {
            switch (f.kind) {
                case FunctionalKind::CellAverage:
                    if (seen_point)
                        throw config_error(
                            "gamma_matrix: functionals must be ordered cells first, points second");
                    f.region.validate();
                    cells_.push_back(f.region);
                    break;
                case FunctionalKind::PointEval:
                    seen_point = true;
                    points_.push_back(f.points[0]);
                    break;
                default:
                    throw unsupported_functional_error(
                        "gamma_matrix: only CellAverage and PointEval are supported");
            }
        }
        if (cells_.empty() && points_.empty())
            throw config_error("gamma_matrix: no functionals given");
    }

    void build_cell_tables() {
        const int n = rule_.nodes_per_axis, ka = n_basis();
        cell_tables_.resize(cells_.size());
        for (std::size_t j = 0; j < cells_.size(); ++j) {
            detail::CellTable& tab = cell_tables_[j];
            detail::append_tensor_nodes(cells_[j].xmin, cells_[j].xmax, cells_[j].ymin,
                                        cells_[j].ymax, n, tab.nodes);
            tab.basis.resize(tab.nodes.size() * ka);
            for (std::size_t i = 0; i < tab.nodes.size(); ++i)
                for (int c = 0; c < ka; ++c)
                    tab.basis[i * ka + c] = a_basis_[c]({tab.nodes[i].x, tab.nodes[i].y});
        }
        point_basis_.resize(points_.size() * ka);
        for (std::size_t q = 0; q < points_.size(); ++q)
            for (int c = 0; c < ka; ++c) point_basis_[q * ka + c] = a_basis_[c](points_[q]);
    }

    // Lag-space nodes for the pair (j,k), graded toward the gamma kink at 0.
    void build_pair_tables() {
        const int L = n_cells();
        for (int j = 0; j < L; ++j)
            for (int k = j; k < L; ++k) pair_tables_.push_back(make_pair_table(j, k));
    }

    detail::PairTable make_pair_table(int j, int k) const {
        const Region& a = cells_[j];
        const Region& b = cells_[k];
        const int n = rule_.nodes_per_axis;
        const int p_shell = std::max(4, n / 2);

        detail::PairTable tab;
        tab.j = j;
        tab.k = k;

        const auto segs_x = detail::split_axis(a.xmin - b.xmax, a.xmax - b.xmin,
                                               {a.xmin - b.xmin, a.xmax - b.xmax, 0.0});
        const auto segs_y = detail::split_axis(a.ymin - b.ymax, a.ymax - b.ymin,
                                               {a.ymin - b.ymin, a.ymax - b.ymax, 0.0});
        for (const auto& sx : segs_x)
            for (const auto& sy : segs_y) {
                const bool x_at0 = sx.first == 0.0 || sx.second == 0.0 ||
                                   (sx.first == sx.second && sx.first == 0.0);
                const bool y_at0 = sy.first == 0.0 || sy.second == 0.0 ||
                                   (sy.first == sy.second && sy.first == 0.0);
                if (x_at0 && y_at0) {
                    const double cx = 0.0, cy = 0.0;
                    const double ex = std::max(std::fabs(sx.first), std::fabs(sx.second));
                    const double ey = std::max(std::fabs(sy.first), std::fabs(sy.second));
                    const double dirx = (sx.second > 0.0) ? 1.0 : -1.0;
                    const double diry = (sy.second > 0.0) ? 1.0 : -1.0;
                    detail::append_corner_graded(cx, cy, dirx, diry, ex, ey, p_shell,
                                                 tab.lag_nodes);
                } else {
                    detail::append_tensor_nodes(sx.first, sx.second, sy.first, sy.second, n,
                                                tab.lag_nodes);
                }
            }

        // Inner integrals: products of basis functions over the overlap.
        const int ka = n_basis();
        tab.basis_prod.assign(tab.lag_nodes.size() * ka * ka, 0.0);
        std::vector<double> xs, wx, ys, wy;
        for (std::size_t i = 0; i < tab.lag_nodes.size(); ++i) {
            const double dxv = tab.lag_nodes[i].x, dyv = tab.lag_nodes[i].y;
            const double ox0 = std::max(a.xmin, b.xmin + dxv), ox1 = std::min(a.xmax, b.xmax + dxv);
            const double oy0 = std::max(a.ymin, b.ymin + dyv), oy1 = std::min(a.ymax, b.ymax + dyv);
            if (ox1 < ox0 || oy1 < oy0) continue;  // zero overlap at the domain edge
            detail::axis_nodes(ox0, ox1, n, xs, wx);
            detail::axis_nodes(oy0, oy1, n, ys, wy);
            double* m = tab.basis_prod.data() + i * ka * ka;
            for (std::size_t ix = 0; ix < xs.size(); ++ix)
                for (std::size_t iy = 0; iy < ys.size(); ++iy) {
                    const double w = wx[ix] * wy[iy];
                    const Point s{xs[ix], ys[iy]};
                    const Point t{xs[ix] - dxv, ys[iy] - dyv};
                    for (int c = 0; c < ka; ++c) {
                        const double fc = a_basis_[c](s);
                        for (int d = 0; d < ka; ++d) m[c * ka + d] += w * fc * a_basis_[d](t);
                    }
                }
        }
        return tab;
    }

    void build_point_tables() {
        const int n = rule_.nodes_per_axis, ka = n_basis();
        const int p_shell = std::max(4, n / 2);
        for (int j = 0; j < n_cells(); ++j) {
            const Region& r = cells_[j];
            for (int q = 0; q < n_points(); ++q) {
                const Point& p = points_[q];
                detail::PointTable tab;
                tab.j = j;
                tab.q = q;
                tab.p = p;
                const auto segs_x = detail::split_axis(r.xmin, r.xmax, {p.x});
                const auto segs_y = detail::split_axis(r.ymin, r.ymax, {p.y});
                for (const auto& sx : segs_x)
                    for (const auto& sy : segs_y) {
                        const bool x_atp = sx.first == p.x || sx.second == p.x ||
                                           (sx.first == sx.second && sx.first == p.x);
                        const bool y_atp = sy.first == p.y || sy.second == p.y ||
                                           (sy.first == sy.second && sy.first == p.y);
                        if (x_atp && y_atp) {
                            const double ex = std::max(std::fabs(sx.first - p.x),
                                                       std::fabs(sx.second - p.x));
                            const double ey = std::max(std::fabs(sy.first - p.y),
                                                       std::fabs(sy.second - p.y));
                            const double dirx = (sx.second > p.x) ? 1.0 : -1.0;
                            const double diry = (sy.second > p.y) ? 1.0 : -1.0;
                            detail::append_corner_graded(p.x, p.y, dirx, diry, ex, ey, p_shell,
                                                         tab.nodes);
                        } else {
                            detail::append_tensor_nodes(sx.first, sx.second, sy.first, sy.second,
                                                        n, tab.nodes);
                        }
                    }
                tab.basis.resize(tab.nodes.size() * ka);
                for (std::size_t i = 0; i < tab.nodes.size(); ++i)
                    for (int c = 0; c < ka; ++c)
                        tab.basis[i * ka + c] = a_basis_[c]({tab.nodes[i].x, tab.nodes[i].y});
                point_tables_.push_back(std::move(tab));
            }
        }
    }

    std::vector<Region> cells_;
    std::vector<Point> points_;
    std::vector<CovariateBasis> a_basis_;
    QuadratureRule rule_;
    std::vector<detail::CellTable> cell_tables_;
    std::vector<double> point_basis_;  // n_points * kA
    std::vector<detail::PairTable> pair_tables_;
    std::vector<detail::PointTable> point_tables_;
};

// Conditional-negative-definiteness check on zero-sum contrasts.
inline void check_cnd(const Eigen::MatrixXd& gamma, int n_contrasts = 200,
                      double tol = 1e-8, std::uint64_t seed = 0x5eedULL) {
    const Eigen::Index m = gamma.rows();
    if (m < 2) return;
    const double gmax = gamma.cwiseAbs().maxCoeff();
    Rng rng(seed);
    Eigen::VectorXd w(m);
    for (int t = 0; t < n_contrasts; ++t) {
        for (Eigen::Index i = 0; i < m; ++i) w[i] = 2.0 * rng.uniform() - 1.0;
        w.array() -= w.mean();
        const double q = w.dot(gamma * w);
        if (q > tol * w.squaredNorm() * gmax)
            throw quadrature_error(
                "gamma_matrix: conditional negative definiteness violated; "
                "increase quadrature nodes-per-axis");
    }
}

// Builds the Hüsler-Reiss Gamma matrix for cell averages and point
// evaluations (cells first).  When check_convergence is set, the build is
// repeated at doubled order and the largest relative entry change recorded.
inline GammaMatrix gamma_matrix(const std::vector<Functional>& functionals,
                                const CovariateSurface& A, const VariogramParams& p,
                                const QuadratureRule& q = {}, bool check_convergence = true) {
    A.validate();
    p.validate();
    q.validate();
    SchemeQuadrature sq(functionals, A.basis, q);
    const Eigen::VectorXd coeffs =
        Eigen::Map<const Eigen::VectorXd>(A.coeffs.data(), static_cast<Eigen::Index>(A.coeffs.size()));
    SchemeQuadrature::Evaluation ev = sq.evaluate(coeffs, p);

    GammaMatrix gm;
    gm.gamma = ev.gamma;
    gm.log_theta = ev.log_theta;
    gm.n_cells = sq.n_cells();
    gm.n_points = sq.n_points();

    if (gm.gamma.minCoeff() < 0.0)
        throw quadrature_error("gamma_matrix: negative entry; increase quadrature nodes-per-axis");
    check_cnd(gm.gamma);

    if (check_convergence) {
        QuadratureRule q2{2 * q.nodes_per_axis};
        SchemeQuadrature sq2(functionals, A.basis, q2);
        const Eigen::MatrixXd g2 = sq2.evaluate(coeffs, p).gamma;
        gm.convergence_checked = true;
        gm.max_rel_change = 0.0;
        for (Eigen::Index i = 0; i < gm.gamma.rows(); ++i)
            for (Eigen::Index j = 0; j < gm.gamma.cols(); ++j)
                gm.max_rel_change =
                    std::max(gm.max_rel_change, std::fabs(g2(i, j) - gm.gamma(i, j)) /
                                                    (1.0 + std::fabs(gm.gamma(i, j))));
        gm.converged = gm.max_rel_change < 1e-6;
    }
    return gm;
}

// Cell means of each basis function for every functional (cells: area mean;
// points: the basis value at the point).  Rows follow the functional order.
inline Eigen::MatrixXd basis_means(const std::vector<Functional>& functionals,
                                   const std::vector<CovariateBasis>& basis,
                                   const QuadratureRule& q = {}) {
    Eigen::MatrixXd out(functionals.size(), basis.size());
    for (std::size_t j = 0; j < functionals.size(); ++j) {
        const Functional& f = functionals[j];
        for (std::size_t c = 0; c < basis.size(); ++c) {
            if (f.kind == FunctionalKind::CellAverage)
                out(j, c) = cell_mean([&](double x, double y) { return basis[c]({x, y}); },
                                      f.region, q);
            else if (f.kind == FunctionalKind::PointEval)
                out(j, c) = basis[c](f.points[0]);
            else
                throw unsupported_functional_error("basis_means: cells and points only");
        }
    }
    return out;
}

}  // namespace aggext
