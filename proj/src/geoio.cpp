#include "disagg/geoio.hpp"

#include <algorithm>
#include <cctype>
#include <fstream>
#include <map>
#include <set>
#include <sstream>

#include <json.hpp>

#include "disagg/util.hpp"

namespace disagg {
namespace geoio {

using nlohmann::json;

namespace {

std::string lower(std::string s) {
    std::transform(s.begin(), s.end(), s.begin(), [](unsigned char c) { return std::tolower(c); });
    return s;
}

std::string read_file(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw DataError("cannot open " + path.string());
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

void write_file(const std::filesystem::path& path, const std::string& content) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw DataError("cannot write " + path.string());
    out << content;
    if (!out) throw DataError("write failed for " + path.string());
}

bool is_header_key_start(const std::string& tok) {
    return !tok.empty() && (std::isalpha(static_cast<unsigned char>(tok[0])) || tok[0] == '_');
}

}  // namespace

Grid parse_ascii_grid(const std::string& text, const std::string& origin) {
    std::istringstream in(text);
    std::map<std::string, double> header;
    std::string tok;
    // header: "key value" pairs until the first token that is not a key
    std::streampos value_start = 0;
    while (true) {
        value_start = in.tellg();
        if (!(in >> tok)) break;
        if (!is_header_key_start(tok)) break;
        std::string key = lower(tok);
        static const std::set<std::string> known = {"ncols",     "nrows",    "xllcorner",
                                                    "yllcorner", "cellsize", "nodata_value"};
        if (!known.count(key))
            throw DataError(origin + ": unrecognized header key '" + tok + "'");
        if (header.count(key)) throw DataError(origin + ": duplicate header key '" + tok + "'");
        std::string val;
        if (!(in >> val)) throw DataError(origin + ": header key '" + tok + "' has no value");
        header[key] = parse_double(val, origin + " header '" + tok + "'");
    }
    for (const char* req : {"ncols", "nrows", "xllcorner", "yllcorner", "cellsize"})
        if (!header.count(req))
            throw DataError(origin + ": missing required header key '" + std::string(req) + "'");

    Grid g;
    double ncols_d = header["ncols"], nrows_d = header["nrows"];
    if (ncols_d < 1 || nrows_d < 1 || ncols_d != std::floor(ncols_d) || nrows_d != std::floor(nrows_d))
        throw DataError(origin + ": ncols/nrows must be positive integers");
    g.ncols = static_cast<long>(ncols_d);
    g.nrows = static_cast<long>(nrows_d);
    g.xll = header["xllcorner"];
    g.yll = header["yllcorner"];
    g.cellsize = header["cellsize"];
    if (!(g.cellsize > 0.0)) throw DataError(origin + ": cellsize must be positive");
    g.nodata = header.count("nodata_value") ? header["nodata_value"] : -9999.0;

    size_t expected = static_cast<size_t>(g.ncols) * static_cast<size_t>(g.nrows);
    g.values.reserve(expected);
    // `tok` already holds the first value token unless the stream ran dry
    in.clear();
    in.seekg(value_start);
    std::string val;
    while (in >> val) {
        if (is_header_key_start(val))
            throw DataError(origin + ": unexpected token '" + val + "' in value block");
        g.values.push_back(parse_double(val, origin + " values"));
    }
    if (g.values.size() != expected)
        throw DataError(origin + ": expected " + std::to_string(expected) + " values (" +
                        std::to_string(g.nrows) + " rows x " + std::to_string(g.ncols) +
                        " cols), found " + std::to_string(g.values.size()));
    return g;
}

Grid read_ascii_grid(const std::filesystem::path& path) {
    return parse_ascii_grid(read_file(path), path.filename().string());
}

std::string format_ascii_grid(const Grid& grid) {
    if (grid.values.size() != grid.size())
        throw InternalError("grid value count does not match ncols*nrows");
    std::string out;
    out.reserve(grid.size() * 8 + 128);
    out += "ncols " + std::to_string(grid.ncols) + "\n";
    out += "nrows " + std::to_string(grid.nrows) + "\n";
    out += "xllcorner " + fmt_double(grid.xll) + "\n";
    out += "yllcorner " + fmt_double(grid.yll) + "\n";
    out += "cellsize " + fmt_double(grid.cellsize) + "\n";
    out += "NODATA_value " + fmt_double(grid.nodata) + "\n";
    for (long r = 0; r < grid.nrows; ++r) {
        for (long c = 0; c < grid.ncols; ++c) {
            if (c) out += ' ';
            double v = grid.at(r, c);
            out += fmt_double(std::isnan(v) ? grid.nodata : v);
        }
        out += '\n';
    }
    return out;
}

void write_ascii_grid(const Grid& grid, const std::filesystem::path& path) {
    write_file(path, format_ascii_grid(grid));
}

namespace {

Ring parse_ring(const json& arr, size_t feature_idx, const std::string& id) {
    Ring ring;
    for (const auto& pt : arr) {
        if (!pt.is_array() || pt.size() < 2 || !pt[0].is_number() || !pt[1].is_number())
            throw DataError("feature " + std::to_string(feature_idx) + " (id '" + id +
                            "'): ring vertex is not an [x, y] pair");
        ring.push_back({pt[0].get<double>(), pt[1].get<double>()});
    }
    if (ring.size() < 4)
        throw DataError("feature " + std::to_string(feature_idx) + " (id '" + id +
                        "'): ring has fewer than 4 vertices");
    if (ring.front()[0] != ring.back()[0] || ring.front()[1] != ring.back()[1])
        throw DataError("feature " + std::to_string(feature_idx) + " (id '" + id +
                        "'): ring is not closed");
    return ring;
}

double numeric_property(const json& props, const std::string& key, size_t feature_idx) {
    if (!props.contains(key))
        throw DataError("feature " + std::to_string(feature_idx) + ": missing property '" + key +
                        "'");
    const json& v = props.at(key);
    if (v.is_null()) return std::numeric_limits<double>::quiet_NaN();
    if (!v.is_number())
        throw DataError("feature " + std::to_string(feature_idx) + ": property '" + key +
                        "' is not numeric");
    return v.get<double>();
}

}  // namespace

PolygonSet read_polygons(const std::filesystem::path& path, const std::string& id_var,
                         const std::string& response_var,
                         const std::optional<std::string>& sample_size_var) {
    json doc;
    try {
        doc = json::parse(read_file(path));
    } catch (const json::parse_error& e) {
        throw DataError(path.string() + ": invalid JSON: " + e.what());
    }
    if (!doc.is_object() || doc.value("type", "") != "FeatureCollection" ||
        !doc.contains("features") || !doc["features"].is_array())
        throw DataError(path.string() + ": expected a FeatureCollection with a features array");

    PolygonSet out;
    std::set<std::string> seen;
    size_t idx = 0;
    for (const auto& feat : doc["features"]) {
        if (!feat.is_object() || !feat.contains("properties") || !feat["properties"].is_object())
            throw DataError("feature " + std::to_string(idx) + ": missing properties object");
        const json& props = feat["properties"];

        if (!props.contains(id_var))
            throw DataError("feature " + std::to_string(idx) + ": missing property '" + id_var +
                            "'");
        std::string id;
        const json& idv = props.at(id_var);
        if (idv.is_string())
            id = idv.get<std::string>();
        else if (idv.is_number_integer())
            id = std::to_string(idv.get<long long>());
        else if (idv.is_number())
            id = fmt_double(idv.get<double>());
        else
            throw DataError("feature " + std::to_string(idx) + ": property '" + id_var +
                            "' is neither string nor number");
        if (!seen.insert(id).second)
            throw DataError(path.string() + ": duplicate polygon id '" + id + "'");

        double resp = numeric_property(props, response_var, idx);
        double ssize = std::numeric_limits<double>::quiet_NaN();
        if (sample_size_var) ssize = numeric_property(props, *sample_size_var, idx);

        if (!feat.contains("geometry") || !feat["geometry"].is_object())
            throw DataError("feature " + std::to_string(idx) + " (id '" + id +
                            "'): missing geometry");
        const json& geom = feat["geometry"];
        std::string gtype = geom.value("type", "");
        if (!geom.contains("coordinates") || !geom["coordinates"].is_array())
            throw DataError("feature " + std::to_string(idx) + " (id '" + id +
                            "'): geometry has no coordinates");
        std::vector<Ring> rings;
        if (gtype == "Polygon") {
            for (const auto& ring : geom["coordinates"]) rings.push_back(parse_ring(ring, idx, id));
        } else if (gtype == "MultiPolygon") {
            for (const auto& poly : geom["coordinates"])
                for (const auto& ring : poly) rings.push_back(parse_ring(ring, idx, id));
        } else {
            throw DataError("feature " + std::to_string(idx) + " (id '" + id +
                            "'): unsupported geometry type '" + gtype + "'");
        }
        if (rings.empty())
            throw DataError("feature " + std::to_string(idx) + " (id '" + id + "'): empty geometry");

        out.ids.push_back(std::move(id));
        out.responses.push_back(resp);
        if (sample_size_var) out.sample_sizes.push_back(ssize);
        out.rings.push_back(std::move(rings));
        ++idx;
    }
    return out;
}

void write_polygons(const PolygonSet& polys, const std::filesystem::path& path,
                    const std::string& id_var, const std::string& response_var,
                    const std::optional<std::string>& sample_size_var) {
    json features = json::array();
    for (size_t i = 0; i < polys.size(); ++i) {
        json props;
        props[id_var] = polys.ids[i];
        if (std::isnan(polys.responses[i]))
            props[response_var] = nullptr;
        else
            props[response_var] = polys.responses[i];
        if (sample_size_var) {
            if (polys.has_sample_sizes() && !std::isnan(polys.sample_sizes[i]))
                props[*sample_size_var] = polys.sample_sizes[i];
            else
                props[*sample_size_var] = nullptr;
        }
        json geom;
        auto ring_json = [](const Ring& r) {
            json arr = json::array();
            for (const auto& pt : r) arr.push_back(json::array({pt[0], pt[1]}));
            return arr;
        };
        if (polys.rings[i].size() == 1) {
            geom["type"] = "Polygon";
            geom["coordinates"] = json::array({ring_json(polys.rings[i][0])});
        } else {
            geom["type"] = "MultiPolygon";
            json coords = json::array();
            for (const Ring& r : polys.rings[i]) coords.push_back(json::array({ring_json(r)}));
            geom["coordinates"] = coords;
        }
        features.push_back(
            json{{"type", "Feature"}, {"properties", props}, {"geometry", geom}});
    }
    json doc{{"type", "FeatureCollection"}, {"features", features}};
    write_file(path, doc.dump(1) + "\n");
}

CovariateStack load_covariate_dir(const std::filesystem::path& dir, const Grid& templ) {
    if (!std::filesystem::is_directory(dir))
        throw DataError(dir.string() + " is not a directory");
    std::vector<std::filesystem::path> files;
    for (const auto& entry : std::filesystem::directory_iterator(dir))
        if (entry.is_regular_file() && entry.path().extension() == ".asc")
            files.push_back(entry.path());
    if (files.empty()) throw DataError("no .asc covariate rasters found in " + dir.string());
    std::sort(files.begin(), files.end(),
              [](const auto& a, const auto& b) { return a.stem().string() < b.stem().string(); });

    CovariateStack stack;
    for (const auto& f : files) {
        Grid g = read_ascii_grid(f);
        if (auto field = alignment_mismatch(templ, g))
            throw DataError(f.filename().string() + " is not aligned with the template grid: '" +
                            *field + "' differs");
        stack.names.push_back(f.stem().string());
        stack.grids.push_back(std::move(g));
    }
    return stack;
}

CovariateStack load_covariate_dir(const std::filesystem::path& dir) {
    if (!std::filesystem::is_directory(dir))
        throw DataError(dir.string() + " is not a directory");
    std::vector<std::filesystem::path> files;
    for (const auto& entry : std::filesystem::directory_iterator(dir))
        if (entry.is_regular_file() && entry.path().extension() == ".asc")
            files.push_back(entry.path());
    if (files.empty()) throw DataError("no .asc covariate rasters found in " + dir.string());
    std::sort(files.begin(), files.end(),
              [](const auto& a, const auto& b) { return a.stem().string() < b.stem().string(); });
    Grid templ = read_ascii_grid(files.front());
    return load_covariate_dir(dir, templ);
}

}  // namespace geoio
}  // namespace disagg
