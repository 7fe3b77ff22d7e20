#pragma once

// Fixture builders shared by the unit tests.

#include <string>
#include <vector>

#include "disagg/grid.hpp"
#include "disagg/polygons.hpp"
#include "disagg/prepare.hpp"

namespace testfix {

inline disagg::Grid make_grid(long ncols, long nrows, double xll, double yll, double cellsize,
                              std::vector<double> values) {
    disagg::Grid g;
    g.ncols = ncols;
    g.nrows = nrows;
    g.xll = xll;
    g.yll = yll;
    g.cellsize = cellsize;
    if (values.empty()) values.assign(static_cast<size_t>(ncols * nrows), 0.0);
    g.values = std::move(values);
    return g;
}

// Closed axis-aligned rectangle ring, counter-clockwise.
inline disagg::Ring rect_ring(double x0, double y0, double x1, double y1) {
    return {{x0, y0}, {x1, y0}, {x1, y1}, {x0, y1}, {x0, y0}};
}

inline disagg::PolygonSet rect_polygons(const std::vector<std::array<double, 4>>& boxes,
                                        const std::vector<double>& responses) {
    disagg::PolygonSet ps;
    for (size_t i = 0; i < boxes.size(); ++i) {
        ps.ids.push_back("p" + std::to_string(i));
        ps.responses.push_back(responses[i]);
        ps.rings.push_back({rect_ring(boxes[i][0], boxes[i][1], boxes[i][2], boxes[i][3])});
    }
    return ps;
}

// One polygon, one pixel at (0.5, 0.5), unit aggregation weight: the
// aggregated cases equal the pixel rate exactly, which pins the likelihood
// formulas one polygon at a time.
inline disagg::PreparedData single_pixel_data(double response, double weight = 1.0,
                                              double sample_size = -1.0) {
    disagg::PreparedData d;
    d.pixels.polygon_index = {0};
    d.pixels.x = {0.5};
    d.pixels.y = {0.5};
    d.pixels.aggregation = {weight};
    d.index.start = {0};
    d.index.end = {0};
    d.polygon_ids = {"p0"};
    d.responses = {response};
    if (sample_size >= 0.0) d.sample_sizes = {sample_size};
    d.lattice.ncols = 2;
    d.lattice.nrows = 2;
    d.lattice.x0 = 0.0;
    d.lattice.y0 = 0.0;
    d.lattice.spacing = 1.0;
    d.template_header = make_grid(1, 1, 0.0, 0.0, 1.0, {});
    d.template_header.values.clear();
    return d;
}

// n_pixels unit-spaced pixels split into polygons by `sizes`; covariate
// columns and aggregation weights supplied by the caller.
inline disagg::PreparedData row_data(const std::vector<long>& sizes,
                                     const std::vector<double>& responses,
                                     const std::vector<std::vector<double>>& covariates,
                                     const std::vector<double>& aggregation,
                                     const std::vector<double>& sample_sizes = {}) {
    disagg::PreparedData d;
    long np = 0;
    for (long s : sizes) np += s;
    long pix = 0;
    for (size_t p = 0; p < sizes.size(); ++p) {
        d.index.start.push_back(pix);
        for (long k = 0; k < sizes[p]; ++k, ++pix) {
            d.pixels.polygon_index.push_back(static_cast<long>(p));
            d.pixels.x.push_back(0.5 + static_cast<double>(pix));
            d.pixels.y.push_back(0.5);
        }
        d.index.end.push_back(pix - 1);
        d.polygon_ids.push_back("p" + std::to_string(p));
    }
    d.responses = responses;
    d.sample_sizes = sample_sizes;
    d.pixels.covariates = covariates;
    for (size_t k = 0; k < covariates.size(); ++k)
        d.covariate_names.push_back("c" + std::to_string(k));
    d.pixels.aggregation =
        aggregation.empty() ? std::vector<double>(static_cast<size_t>(np), 1.0) : aggregation;
    d.lattice.ncols = std::max<long>(2, (np + 3) / 2);
    d.lattice.nrows = 2;
    d.lattice.x0 = 0.0;
    d.lattice.y0 = 0.0;
    d.lattice.spacing = 2.0;
    d.template_header = make_grid(np, 1, 0.0, 0.0, 1.0, {});
    d.template_header.values.clear();
    return d;
}

}  // namespace testfix
