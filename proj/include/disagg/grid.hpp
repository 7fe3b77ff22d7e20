#pragma once

#include <cmath>
#include <optional>
#include <string>
#include <vector>

#include "disagg/errors.hpp"

namespace disagg {

// Regular raster, row-major with row 0 the northernmost. (xll, yll) is the
// corner of the south-west cell, not its center.
struct Grid {
    long ncols = 0;
    long nrows = 0;
    double xll = 0.0;
    double yll = 0.0;
    double cellsize = 1.0;
    double nodata = -9999.0;
    std::vector<double> values;  // nrows * ncols

    double& at(long row, long col) { return values[static_cast<size_t>(row * ncols + col)]; }
    double at(long row, long col) const { return values[static_cast<size_t>(row * ncols + col)]; }

    bool is_nodata(double v) const { return std::isnan(v) || v == nodata; }
    bool nodata_at(long row, long col) const { return is_nodata(at(row, col)); }

    size_t size() const { return static_cast<size_t>(nrows * ncols); }
};

struct Point {
    double x = 0.0;
    double y = 0.0;
};

inline Point cell_center(const Grid& g, long row, long col) {
    return {g.xll + (static_cast<double>(col) + 0.5) * g.cellsize,
            g.yll + (static_cast<double>(g.nrows - 1 - row) + 0.5) * g.cellsize};
}

// Cell containing (x, y); half-open cells so every point maps to at most one.
inline std::optional<std::pair<long, long>> cell_of(const Grid& g, double x, double y) {
    double fc = (x - g.xll) / g.cellsize;
    double fr = (y - g.yll) / g.cellsize;
    long col = static_cast<long>(std::floor(fc));
    long row_from_south = static_cast<long>(std::floor(fr));
    if (col < 0 || col >= g.ncols || row_from_south < 0 || row_from_south >= g.nrows)
        return std::nullopt;
    return std::make_pair(g.nrows - 1 - row_from_south, col);
}

// Alignment compares the geometry header fields exactly; the nodata sentinel
// is a per-file encoding detail and may differ. Returns the first differing
// field name, or nullopt when aligned.
inline std::optional<std::string> alignment_mismatch(const Grid& a, const Grid& b) {
    if (a.ncols != b.ncols) return "ncols";
    if (a.nrows != b.nrows) return "nrows";
    if (a.xll != b.xll) return "xllcorner";
    if (a.yll != b.yll) return "yllcorner";
    if (a.cellsize != b.cellsize) return "cellsize";
    return std::nullopt;
}

inline bool aligned(const Grid& a, const Grid& b) { return !alignment_mismatch(a, b).has_value(); }

// Ordered set of covariate rasters; names sorted lexicographically and all
// grids pairwise aligned.
struct CovariateStack {
    std::vector<std::string> names;
    std::vector<Grid> grids;

    size_t size() const { return names.size(); }
    const Grid& grid(size_t k) const { return grids[k]; }
};

}  // namespace disagg
