#pragma once

#include <filesystem>
#include <optional>
#include <string>

#include "disagg/grid.hpp"
#include "disagg/polygons.hpp"

namespace disagg {
namespace geoio {

// ESRI ASCII grid. Header keys are case-insensitive; NODATA_value is optional
// and defaults to -9999. Values are row-major, northernmost row first.
Grid read_ascii_grid(const std::filesystem::path& path);
Grid parse_ascii_grid(const std::string& text, const std::string& origin);
void write_ascii_grid(const Grid& grid, const std::filesystem::path& path);
std::string format_ascii_grid(const Grid& grid);

// GeoJSON-style FeatureCollection of Polygon/MultiPolygon features.
// Feature ids may be numeric or string properties; they are kept as strings.
// A null response/sample-size value reads as NaN (missing); an absent
// property is a data error.
PolygonSet read_polygons(const std::filesystem::path& path, const std::string& id_var,
                         const std::string& response_var,
                         const std::optional<std::string>& sample_size_var = std::nullopt);
void write_polygons(const PolygonSet& polys, const std::filesystem::path& path,
                    const std::string& id_var, const std::string& response_var,
                    const std::optional<std::string>& sample_size_var = std::nullopt);

// All *.asc files in `dir`, sorted by filename stem; every grid must align
// with `templ`. The stem becomes the covariate name.
CovariateStack load_covariate_dir(const std::filesystem::path& dir, const Grid& templ);

// Convenience: template taken from the first grid in the directory.
CovariateStack load_covariate_dir(const std::filesystem::path& dir);

}  // namespace geoio
}  // namespace disagg
