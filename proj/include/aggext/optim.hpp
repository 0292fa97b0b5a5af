#pragma once

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <utility>
#include <vector>

#include "aggext/errors.hpp"

namespace aggext {

struct NelderMeadOptions {
    int max_iter = 5000;
    double tol = 1e-10;
    double init_step = 0.25;
};

struct OptimResult {
    Eigen::VectorXd x;
    double value = 0.0;
    int iterations = 0;
    bool converged = false;
};

// Derivative-free simplex minimization (reflection/expansion/contraction/
// shrink with the standard coefficients).  Converges when both the function
// spread and the simplex diameter drop below a relative tolerance.
template <class F>
OptimResult nelder_mead(F&& f, const Eigen::VectorXd& x0, NelderMeadOptions opt = {}) {
    const int d = static_cast<int>(x0.size());
    if (d < 1) throw config_error("nelder_mead: empty parameter vector");
    if (opt.max_iter < 1 || !(opt.tol > 0.0) || !(opt.init_step > 0.0))
        throw config_error("nelder_mead: invalid options");

    std::vector<Eigen::VectorXd> xs(d + 1, x0);
    std::vector<double> fs(d + 1);
    for (int i = 0; i < d; ++i) xs[i + 1][i] += opt.init_step * (1.0 + std::fabs(x0[i]));
    for (int i = 0; i <= d; ++i) fs[i] = f(xs[i]);

    std::vector<int> order(d + 1);
    OptimResult res;
    int it = 0;
    for (; it < opt.max_iter; ++it) {
        for (int i = 0; i <= d; ++i) order[i] = i;
        std::sort(order.begin(), order.end(), [&](int a, int b) { return fs[a] < fs[b]; });
        const int best = order[0], worst = order[d], second = order[d - 1];

        double diam = 0.0;
        for (int i = 1; i <= d; ++i)
            diam = std::max(diam, (xs[order[i]] - xs[best]).template lpNorm<Eigen::Infinity>());
        const double spread = fs[worst] - fs[best];
        if (spread <= opt.tol * (1.0 + std::fabs(fs[best])) &&
            diam <= opt.tol * (1.0 + xs[best].template lpNorm<Eigen::Infinity>())) {
            res.converged = true;
            break;
        }

        Eigen::VectorXd centroid = Eigen::VectorXd::Zero(d);
        for (int i = 0; i < d; ++i) centroid += xs[order[i]];
        centroid /= d;

        const Eigen::VectorXd xr = centroid + (centroid - xs[worst]);
        const double fr = f(xr);
        if (fr < fs[order[0]]) {
            const Eigen::VectorXd xe = centroid + 2.0 * (centroid - xs[worst]);
            const double fe = f(xe);
            if (fe < fr) {
                xs[worst] = xe;
                fs[worst] = fe;
            } else {
                xs[worst] = xr;
                fs[worst] = fr;
            }
        } else if (fr < fs[second]) {
            xs[worst] = xr;
            fs[worst] = fr;
        } else {
            const bool outside = fr < fs[worst];
            const Eigen::VectorXd xc =
                outside ? Eigen::VectorXd(centroid + 0.5 * (centroid - xs[worst]))
                        : Eigen::VectorXd(centroid - 0.5 * (centroid - xs[worst]));
            const double fc = f(xc);
            if (fc < (outside ? fr : fs[worst])) {
                xs[worst] = xc;
                fs[worst] = fc;
            } else {
                for (int i = 1; i <= d; ++i) {
                    xs[order[i]] = xs[best] + 0.5 * (xs[order[i]] - xs[best]);
                    fs[order[i]] = f(xs[order[i]]);
                }
            }
        }
    }

    int best = 0;
    for (int i = 1; i <= d; ++i)
        if (fs[i] < fs[best]) best = i;
    res.x = xs[best];
    res.value = fs[best];
    res.iterations = it;
    return res;
}

// Newton refinement with an analytic gradient and a finite-difference Hessian
// of that gradient.  Minimization convention; backtracks along the Newton
// direction (falling back to steepest descent when the Hessian is not
// positive definite) and stops once the gradient norm drops below grad_tol.
template <class F, class G>
OptimResult newton_polish(F&& f, G&& grad, const Eigen::VectorXd& x0, double grad_tol = 1e-10,
                          int max_iter = 80) {
    const int d = static_cast<int>(x0.size());
    OptimResult res;
    res.x = x0;
    res.value = f(x0);

    for (int it = 0; it < max_iter; ++it) {
        const Eigen::VectorXd g = grad(res.x);
        res.iterations = it;
        if (g.lpNorm<Eigen::Infinity>() < grad_tol) {
            res.converged = true;
            return res;
        }

        Eigen::MatrixXd h(d, d);
        for (int j = 0; j < d; ++j) {
            const double hj = 1e-6 * (1.0 + std::fabs(res.x[j]));
            Eigen::VectorXd xp = res.x;
            xp[j] += hj;
            h.col(j) = (grad(xp) - g) / hj;
        }
        h = 0.5 * (h + h.transpose()).eval();

        Eigen::VectorXd dir;
        const Eigen::LDLT<Eigen::MatrixXd> ldlt(h);
        if (ldlt.info() == Eigen::Success && ldlt.isPositive()) {
            dir = -ldlt.solve(g);
        } else {
            dir = -g / std::max(1.0, g.norm());
        }
        if (dir.dot(g) >= 0.0) dir = -g / std::max(1.0, g.norm());

        double step = 1.0;
        bool moved = false;
        for (int k = 0; k < 50; ++k) {
            const Eigen::VectorXd xn = res.x + step * dir;
            const double fn = f(xn);
            const bool armijo =
                std::isfinite(fn) && fn <= res.value + 1e-4 * step * dir.dot(g);
            // Near the optimum the true decrease drowns in floating-point
            // noise of f; a full Newton step that halves the gradient norm is
            // still progress (quadratic phase), so accept on that evidence.
            const bool grad_descent =
                !armijo && k == 0 && std::isfinite(fn) &&
                grad(xn).template lpNorm<Eigen::Infinity>() <=
                    0.5 * g.template lpNorm<Eigen::Infinity>();
            if (armijo || grad_descent) {
                res.x = xn;
                res.value = fn;
                moved = true;
                break;
            }
            step *= 0.5;
        }
        if (!moved) return res;  // stuck: keep the best point, not converged
    }
    res.converged = grad(res.x).template lpNorm<Eigen::Infinity>() < grad_tol;
    return res;
}

}  // namespace aggext
