#pragma once

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "disagg/grid.hpp"
#include "disagg/polygons.hpp"

namespace disagg {

// Pixel-level training table. Rows are grouped by polygon in input order;
// polygon_index is non-decreasing and, after preparation, refers to the
// retained polygons 0..N-1.
struct PixelTable {
    std::vector<long> polygon_index;
    std::vector<double> x, y;                       // cell centers
    std::vector<std::vector<double>> covariates;    // covariates[k][pixel]
    std::vector<double> aggregation;                // 1.0 when no raster given

    size_t size() const { return polygon_index.size(); }
    size_t n_covariates() const { return covariates.size(); }
};

// Inclusive [start, end] pixel ranges per polygon.
struct StartEndIndex {
    std::vector<long> start, end;
    size_t size() const { return start.size(); }
};

// Regular field lattice. Node (i, j) sits at (x0 + i*spacing, y0 + j*spacing),
// flattened as j*ncols + i; the hull covers every pixel center.
struct LatticeSpec {
    long ncols = 0;
    long nrows = 0;
    double x0 = 0.0;
    double y0 = 0.0;
    double spacing = 1.0;
    long pad_nodes = 0;

    long n_nodes() const { return ncols * nrows; }
    double width() const { return static_cast<double>(ncols - 1) * spacing; }
    double height() const { return static_cast<double>(nrows - 1) * spacing; }
};

struct PreparedData {
    PixelTable pixels;
    StartEndIndex index;
    std::vector<std::string> polygon_ids;  // retained polygons, size N
    std::vector<double> responses;         // size N, finite
    std::vector<double> sample_sizes;      // size N or empty
    LatticeSpec lattice;
    Grid template_header;  // header only, values empty
    std::vector<std::string> covariate_names;
    bool aggregation_present = false;
    bool standardized = false;
    std::vector<double> cov_means, cov_sds;
    std::vector<std::string> dropped_ids;  // zero-pixel and NA-response polygons
    std::optional<CovariateStack> stack;   // raw training rasters when available

    size_t n_polygons() const { return polygon_ids.size(); }
    size_t n_pixels() const { return pixels.size(); }
};

struct PrepareOptions {
    bool na_action = false;
    bool standardize = false;
    double spacing = 0.0;  // 0 = 4x template cellsize
    long pad_nodes = 5;
    int ncores = 1;
};

struct NaReport {
    std::vector<std::string> dropped_response_ids;
    long imputed_covariate_values = 0;
    long zeroed_aggregation_values = 0;
};

namespace prepare_ops {

// Assign each covered cell center to the first polygon (file order) that
// contains it under the half-open even-odd rule, then read covariate and
// aggregation values at those pixels. Values at nodata cells become NaN.
PixelTable extract_pixels(const PolygonSet& polys, const CovariateStack& stack,
                          const Grid* aggregation, int ncores = 1);

// na_action=false: any NaN response/covariate/aggregation is a data error
// (message carries per-source counts). na_action=true: drop NA-response
// polygons, impute covariate NaNs with the global column median (computed
// over all extracted pixels before the drop), zero NaN aggregation weights.
// Idempotent when na_action=true.
NaReport apply_na_policy(PreparedData& data, bool na_action);

// (x - mean) / sd per covariate column, sample sd; records the transform.
void standardize_covariates(PreparedData& data);

StartEndIndex build_index(const std::vector<long>& polygon_index, long n_polygons);

LatticeSpec build_lattice(const PixelTable& pixels, double spacing, long pad_nodes);

std::string summarize(const PreparedData& data);

}  // namespace prepare_ops

// Full pipeline: extract, drop zero-pixel polygons, NA policy, reindex,
// optional standardization, lattice.
PreparedData prepare(const PolygonSet& polys, const CovariateStack& stack,
                     const std::optional<Grid>& aggregation, const PrepareOptions& opts);

void validate_prepared(const PreparedData& data);

std::string prepared_provenance(const PreparedData& data);

// Directory layout: manifest.json + pixels.csv + responses.csv
// (+ covariates/*.asc copies of the training rasters when available).
void save_prepared(const PreparedData& data, const std::filesystem::path& dir);
PreparedData load_prepared(const std::filesystem::path& dir);

}  // namespace disagg
