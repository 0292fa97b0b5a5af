#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <limits>
#include <mutex>
#include <unordered_map>
#include <utility>
#include <vector>

#include "aggext/errors.hpp"

namespace aggext {

struct Point {
    double x = 0.0;
    double y = 0.0;
};

// Axis-aligned rectangle.  A rectangle may be degenerate in one axis (a
// segment), which is how one-dimensional study regions are represented; its
// measure is then the length of the non-degenerate axis.  Degenerate in both
// axes is invalid.
struct Region {
    double xmin = 0.0, xmax = 0.0, ymin = 0.0, ymax = 0.0;

    void validate() const {
        if (!(xmin <= xmax) || !(ymin <= ymax))
            throw geometry_error("Region: inverted bounds");
        if (!std::isfinite(xmin) || !std::isfinite(xmax) || !std::isfinite(ymin) ||
            !std::isfinite(ymax))
            throw geometry_error("Region: non-finite bounds");
        if (xmax == xmin && ymax == ymin)
            throw geometry_error("Region: zero measure in both axes");
    }

    double width() const { return xmax - xmin; }
    double height() const { return ymax - ymin; }

    // Lebesgue measure in the region's effective dimension.
    double measure() const {
        const double w = width(), h = height();
        if (w == 0.0) return h;
        if (h == 0.0) return w;
        return w * h;
    }

    bool contains(const Point& p) const {
        return p.x >= xmin && p.x <= xmax && p.y >= ymin && p.y <= ymax;
    }

    Point centroid() const { return {0.5 * (xmin + xmax), 0.5 * (ymin + ymax)}; }
};

enum class FunctionalKind { CellAverage, PointEval, Max, WeightedSum };

struct Functional {
    FunctionalKind kind = FunctionalKind::CellAverage;
    Region region;                 // CellAverage
    std::vector<Point> points;     // PointEval (size 1), Max, WeightedSum
    std::vector<double> weights;   // WeightedSum

    static Functional cell_average(const Region& r) {
        r.validate();
        Functional f;
        f.kind = FunctionalKind::CellAverage;
        f.region = r;
        return f;
    }
    static Functional point_eval(const Point& p) {
        Functional f;
        f.kind = FunctionalKind::PointEval;
        f.points = {p};
        return f;
    }
    static Functional max_of(std::vector<Point> pts) {
        if (pts.empty()) throw geometry_error("Max functional needs at least one point");
        Functional f;
        f.kind = FunctionalKind::Max;
        f.points = std::move(pts);
        return f;
    }
    static Functional weighted_sum(std::vector<Point> pts, std::vector<double> w) {
        if (pts.empty() || pts.size() != w.size())
            throw geometry_error("WeightedSum: points/weights size mismatch");
        for (double wi : w)
            if (!(wi >= 0.0)) throw geometry_error("WeightedSum: weights must be >= 0");
        Functional f;
        f.kind = FunctionalKind::WeightedSum;
        f.points = std::move(pts);
        f.weights = std::move(w);
        return f;
    }
};

struct QuadratureRule {
    int nodes_per_axis = 12;

    void validate() const {
        if (nodes_per_axis < 2)
            throw quadrature_error("QuadratureRule: nodes-per-axis must be >= 2");
    }
};

namespace detail {

inline constexpr double kPiGL = 3.141592653589793238462643383279502884;

struct GLRule {
    std::vector<double> x;  // nodes on [-1,1]
    std::vector<double> w;
};

// Gauss-Legendre nodes by Newton iteration on P_n; cached per order.
inline const GLRule& gauss_legendre(int n) {
    static std::unordered_map<int, GLRule> cache;
    static std::mutex mu;
    std::lock_guard<std::mutex> lock(mu);
    auto it = cache.find(n);
    if (it != cache.end()) return it->second;

    GLRule rule;
    rule.x.resize(n);
    rule.w.resize(n);
    const int m = (n + 1) / 2;
    for (int i = 0; i < m; ++i) {
        double x = std::cos(kPiGL * (i + 0.75) / (n + 0.5));
        double pp = 0.0;
        for (int iter = 0; iter < 100; ++iter) {
            double p0 = 1.0, p1 = x;
            for (int k = 2; k <= n; ++k) {
                const double p2 = ((2.0 * k - 1.0) * x * p1 - (k - 1.0) * p0) / k;
                p0 = p1;
                p1 = p2;
            }
            pp = n * (x * p1 - p0) / (x * x - 1.0);
            const double dx = p1 / pp;
            x -= dx;
            if (std::fabs(dx) < 1e-15) break;
        }
        rule.x[i] = -x;
        rule.x[n - 1 - i] = x;
        const double w = 2.0 / ((1.0 - x * x) * pp * pp);
        rule.w[i] = w;
        rule.w[n - 1 - i] = w;
    }
    return cache.emplace(n, std::move(rule)).first->second;
}

// 1D quadrature points mapped to [a,b]; a degenerate axis collapses to a
// single node of weight one.
inline void axis_nodes(double a, double b, int n, std::vector<double>& xs,
                       std::vector<double>& ws) {
    xs.clear();
    ws.clear();
    if (b <= a) {
        xs.push_back(a);
        ws.push_back(1.0);
        return;
    }
    const GLRule& gl = gauss_legendre(n);
    const double mid = 0.5 * (a + b), half = 0.5 * (b - a);
    for (int i = 0; i < n; ++i) {
        xs.push_back(mid + half * gl.x[i]);
        ws.push_back(half * gl.w[i]);
    }
}

// Tensor GL integral of f over a rectangle (degenerate axes collapse).
template <class F>
double rect_integral(const Region& r, int n, F&& f) {
    std::vector<double> xs, wx, ys, wy;
    axis_nodes(r.xmin, r.xmax, n, xs, wx);
    axis_nodes(r.ymin, r.ymax, n, ys, wy);
    double total = 0.0;
    for (std::size_t i = 0; i < xs.size(); ++i) {
        double row = 0.0;
        for (std::size_t j = 0; j < ys.size(); ++j) row += wy[j] * f(xs[i], ys[j]);
        total += wx[i] * row;
    }
    return total;
}

}  // namespace detail

// Area-mean of a continuous surface over a rectangle via tensor
// Gauss-Legendre quadrature.
template <class F>
double cell_mean(F&& f, const Region& r, const QuadratureRule& q = {}) {
    r.validate();
    q.validate();
    return detail::rect_integral(r, q.nodes_per_axis, std::forward<F>(f)) / r.measure();
}

// A surface sampled on a rectilinear grid; values[ix * ys.size() + iy].
struct SampledField {
    std::vector<double> xs;
    std::vector<double> ys;
    std::vector<double> values;

    void validate() const {
        if (xs.empty() || ys.empty() || values.size() != xs.size() * ys.size())
            throw geometry_error("SampledField: inconsistent dimensions");
    }

    double spacing_x() const { return xs.size() > 1 ? xs[1] - xs[0] : 0.0; }
    double spacing_y() const { return ys.size() > 1 ? ys[1] - ys[0] : 0.0; }

    std::size_t nearest_index(const Point& p) const {
        const auto nearest = [](const std::vector<double>& v, double t) {
            auto it = std::lower_bound(v.begin(), v.end(), t);
            if (it == v.end()) return v.size() - 1;
            if (it == v.begin()) return std::size_t{0};
            const std::size_t hi = static_cast<std::size_t>(it - v.begin());
            return (t - v[hi - 1] <= v[hi] - t) ? hi - 1 : hi;
        };
        return nearest(xs, p.x) * ys.size() + nearest(ys, p.y);
    }
};

// Evaluate an aggregation functional on a sampled field.  For CellAverage the
// grid nodes inside the region are averaged (A-weighted when weights are
// supplied); points map to their nearest node.
inline double evaluate_functional_on_sample(const Functional& ell, const SampledField& field,
                                            const std::vector<double>* a_weights = nullptr) {
    field.validate();
    if (a_weights && a_weights->size() != field.values.size())
        throw geometry_error("evaluate_functional_on_sample: weight grid size mismatch");

    const double sx = field.spacing_x(), sy = field.spacing_y();
    const auto in_bbox = [&](const Point& p) {
        return p.x >= field.xs.front() - 0.5 * sx - 1e-12 &&
               p.x <= field.xs.back() + 0.5 * sx + 1e-12 &&
               p.y >= field.ys.front() - 0.5 * sy - 1e-12 &&
               p.y <= field.ys.back() + 0.5 * sy + 1e-12;
    };

    switch (ell.kind) {
        case FunctionalKind::CellAverage: {
            const Region& r = ell.region;
            if (!in_bbox({r.xmin, r.ymin}) || !in_bbox({r.xmax, r.ymax}))
                throw coverage_error("evaluate_functional_on_sample: region outside field");
            double num = 0.0, den = 0.0;
            for (std::size_t i = 0; i < field.xs.size(); ++i) {
                if (field.xs[i] < r.xmin - 1e-12 || field.xs[i] > r.xmax + 1e-12) continue;
                for (std::size_t j = 0; j < field.ys.size(); ++j) {
                    if (field.ys[j] < r.ymin - 1e-12 || field.ys[j] > r.ymax + 1e-12) continue;
                    const std::size_t idx = i * field.ys.size() + j;
                    const double w = a_weights ? (*a_weights)[idx] : 1.0;
                    num += w * field.values[idx];
                    den += w;
                }
            }
            if (den == 0.0)
                throw coverage_error("evaluate_functional_on_sample: no grid node in region");
            return num / den;
        }
        case FunctionalKind::PointEval: {
            if (!in_bbox(ell.points[0]))
                throw coverage_error("evaluate_functional_on_sample: point outside field");
            return field.values[field.nearest_index(ell.points[0])];
        }
        case FunctionalKind::Max: {
            double best = -std::numeric_limits<double>::infinity();
            for (const Point& p : ell.points) {
                if (!in_bbox(p))
                    throw coverage_error("evaluate_functional_on_sample: point outside field");
                best = std::max(best, field.values[field.nearest_index(p)]);
            }
            return best;
        }
        case FunctionalKind::WeightedSum: {
            double total = 0.0;
            for (std::size_t i = 0; i < ell.points.size(); ++i) {
                if (!in_bbox(ell.points[i]))
                    throw coverage_error("evaluate_functional_on_sample: point outside field");
                total += ell.weights[i] * field.values[field.nearest_index(ell.points[i])];
            }
            return total;
        }
    }
    throw error("evaluate_functional_on_sample: unreachable");
}

}  // namespace aggext
