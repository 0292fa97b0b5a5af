#pragma once

#include <array>
#include <cmath>

#include "aggext/errors.hpp"

namespace aggext {

inline constexpr double kPi = 3.141592653589793238462643383279502884;

// Anisotropic power variogram gamma(h) = ||Omega h / lambda||^alpha with
//   Omega = [[cos eta, -sin eta], [a sin eta, a cos eta]].
struct VariogramParams {
    double alpha = 1.0;   // smoothness exponent, in (0, 2]
    double lambda = 1.0;  // range scale, coordinate units, > 0
    double eta = 0.0;     // anisotropy angle, radians, in (-pi/2, pi/2]
    double aniso = 1.0;   // anisotropy ratio a, >= 1

    void validate() const {
        if (!(alpha > 0.0) || !(alpha <= 2.0))
            throw domain_error("VariogramParams: alpha must be in (0,2]");
        if (!(lambda > 0.0) || !std::isfinite(lambda))
            throw domain_error("VariogramParams: lambda must be positive");
        if (!(eta > -kPi / 2.0) || !(eta <= kPi / 2.0))
            throw domain_error("VariogramParams: eta must be in (-pi/2, pi/2]");
        if (!(aniso >= 1.0) || !std::isfinite(aniso))
            throw domain_error("VariogramParams: aniso must be >= 1");
    }
};

struct Lag {
    double dx = 0.0;
    double dy = 0.0;
};

// Row-major 2x2 matrix {{m00, m01}, {m10, m11}}.
inline std::array<double, 4> anisotropy_matrix(double eta, double aniso) {
    VariogramParams p;
    p.eta = eta;
    p.aniso = aniso;
    p.validate();
    const double c = std::cos(eta), s = std::sin(eta);
    return {c, -s, aniso * s, aniso * c};
}

inline double variogram(const Lag& h, const VariogramParams& p) {
    p.validate();
    const double c = std::cos(p.eta), s = std::sin(p.eta);
    const double u = (c * h.dx - s * h.dy) / p.lambda;
    const double v = p.aniso * (s * h.dx + c * h.dy) / p.lambda;
    const double q = u * u + v * v;
    if (q == 0.0) return 0.0;
    return std::pow(q, 0.5 * p.alpha);
}

// Covariance of the origin-anchored Gaussian process G (G(0) = 0):
// E{G(s)G(t)} = 1/2 {gamma(s) + gamma(t) - gamma(s - t)}.
inline double gaussian_cov(const Lag& s, const Lag& t, const VariogramParams& p) {
    return 0.5 * (variogram(s, p) + variogram(t, p) +
                  -variogram(Lag{s.dx - t.dx, s.dy - t.dy}, p));
}

namespace detail {

// Validated, precomputed form used in inner quadrature loops: gamma as a
// function of the raw lag without re-validating parameters per call.
struct VariogramEval {
    double c, s, a, inv_lambda, half_alpha;

    explicit VariogramEval(const VariogramParams& p) {
        p.validate();
        c = std::cos(p.eta);
        s = std::sin(p.eta);
        a = p.aniso;
        inv_lambda = 1.0 / p.lambda;
        half_alpha = 0.5 * p.alpha;
    }

    double operator()(double dx, double dy) const {
        const double u = (c * dx - s * dy) * inv_lambda;
        const double v = a * (s * dx + c * dy) * inv_lambda;
        const double q = u * u + v * v;
        if (q == 0.0) return 0.0;
        return std::pow(q, half_alpha);
    }
};

}  // namespace detail
}  // namespace aggext
