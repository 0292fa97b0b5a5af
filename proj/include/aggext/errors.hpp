#pragma once

#include <stdexcept>
#include <string>

namespace aggext {

// Base class for all library errors.
struct error : std::runtime_error {
    explicit error(const std::string& msg) : std::runtime_error(msg) {}
};

// Parameter outside its admissible domain (alpha, lambda, sigma, ...).
struct domain_error : error {
    using error::error;
};

// Ill-formed regions, grids or rasters.
struct geometry_error : error {
    using error::error;
};

// Operation asked to handle a functional kind it does not support.
struct unsupported_functional_error : error {
    using error::error;
};

// Numerical quadrature failed to converge or produced an inconsistent result.
struct quadrature_error : error {
    using error::error;
};

// A matrix that must be conditionally negative definite / PSD is not.
struct invalid_gamma_error : error {
    using error::error;
};

// Degenerate dependence structure (singular conditioning, zero variance, ...).
struct degeneracy_error : error {
    using error::error;
};

// A sample grid does not cover a functional support.
struct coverage_error : error {
    using error::error;
};

// Malformed or inconsistent input data.
struct data_error : error {
    using error::error;
};

// Invalid run configuration (thresholds, levels, weights, ...).
struct config_error : error {
    using error::error;
};

}  // namespace aggext
