#pragma once

#include <cmath>
#include <string>
#include <utility>
#include <vector>

#include "aggext/errors.hpp"
#include "aggext/geometry.hpp"

namespace aggext {

// One covariate as a function of location.  Surfaces A and B are linear
// combinations of these (intercept plus slopes).
struct CovariateBasis {
    enum class Kind { Constant, CoordX, CoordY, Raster, CellConstant };

    Kind kind = Kind::Constant;
    std::string name = "intercept";
    SampledField raster;              // Kind::Raster (bilinear interpolation)
    std::vector<Region> cells;        // Kind::CellConstant
    std::vector<double> cell_values;  // Kind::CellConstant

    static CovariateBasis constant() { return {}; }
    static CovariateBasis coord_x(std::string nm = "x") {
        CovariateBasis b;
        b.kind = Kind::CoordX;
        b.name = std::move(nm);
        return b;
    }
    static CovariateBasis coord_y(std::string nm = "y") {
        CovariateBasis b;
        b.kind = Kind::CoordY;
        b.name = std::move(nm);
        return b;
    }
    static CovariateBasis from_raster(SampledField field, std::string nm) {
        field.validate();
        CovariateBasis b;
        b.kind = Kind::Raster;
        b.name = std::move(nm);
        b.raster = std::move(field);
        return b;
    }
    static CovariateBasis cell_constant(std::vector<Region> cell_rects,
                                        std::vector<double> values, std::string nm) {
        if (cell_rects.size() != values.size() || cell_rects.empty())
            throw geometry_error("CovariateBasis: cell/value size mismatch");
        CovariateBasis b;
        b.kind = Kind::CellConstant;
        b.name = std::move(nm);
        b.cells = std::move(cell_rects);
        b.cell_values = std::move(values);
        return b;
    }

    double operator()(const Point& p) const {
        switch (kind) {
            case Kind::Constant: return 1.0;
            case Kind::CoordX: return p.x;
            case Kind::CoordY: return p.y;
            case Kind::Raster: return bilinear(p);
            case Kind::CellConstant: {
                for (std::size_t i = 0; i < cells.size(); ++i)
                    if (cells[i].contains(p)) return cell_values[i];
                throw coverage_error("CovariateBasis: point outside every cell for '" + name + "'");
            }
        }
        throw error("CovariateBasis: unreachable");
    }

  private:
    double bilinear(const Point& p) const {
        const auto bracket = [](const std::vector<double>& v, double t, std::size_t& lo,
                                double& frac) {
            if (v.size() == 1) {
                lo = 0;
                frac = 0.0;
                return;
            }
            auto it = std::upper_bound(v.begin(), v.end(), t);
            std::size_t hi = static_cast<std::size_t>(it - v.begin());
            hi = std::min(std::max<std::size_t>(hi, 1), v.size() - 1);
            lo = hi - 1;
            const double den = v[hi] - v[lo];
            frac = den > 0.0 ? std::clamp((t - v[lo]) / den, 0.0, 1.0) : 0.0;
        };
        std::size_t i, j;
        double fx, fy;
        bracket(raster.xs, p.x, i, fx);
        bracket(raster.ys, p.y, j, fy);
        const std::size_t ny = raster.ys.size();
        const std::size_t i1 = std::min(i + 1, raster.xs.size() - 1);
        const std::size_t j1 = std::min(j + 1, ny - 1);
        const double v00 = raster.values[i * ny + j], v01 = raster.values[i * ny + j1];
        const double v10 = raster.values[i1 * ny + j], v11 = raster.values[i1 * ny + j1];
        return (1 - fx) * ((1 - fy) * v00 + fy * v01) + fx * ((1 - fy) * v10 + fy * v11);
    }
};

// Linear covariate surface: value(p) = sum_c coeffs[c] * basis[c](p).
struct CovariateSurface {
    std::vector<CovariateBasis> basis;
    std::vector<double> coeffs;

    static CovariateSurface constant(double c) {
        CovariateSurface s;
        s.basis = {CovariateBasis::constant()};
        s.coeffs = {c};
        return s;
    }

    void validate() const {
        if (basis.empty() || basis.size() != coeffs.size())
            throw config_error("CovariateSurface: basis/coefficient size mismatch");
    }

    double operator()(const Point& p) const {
        double v = 0.0;
        for (std::size_t c = 0; c < basis.size(); ++c) v += coeffs[c] * basis[c](p);
        return v;
    }
};

}  // namespace aggext
