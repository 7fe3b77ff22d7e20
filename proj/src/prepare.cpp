#include "disagg/prepare.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>
#include <sstream>

#include <json.hpp>

#include "disagg/geoio.hpp"
#include "disagg/stats.hpp"
#include "disagg/util.hpp"

namespace disagg {

using nlohmann::json;

namespace {

constexpr double kNaN = std::numeric_limits<double>::quiet_NaN();

double column_median(const std::vector<double>& col, const std::string& name) {
    std::vector<double> vals;
    vals.reserve(col.size());
    for (double v : col)
        if (!std::isnan(v)) vals.push_back(v);
    if (vals.empty())
        throw DataError("covariate '" + name + "' has no non-missing pixel values to impute from");
    std::sort(vals.begin(), vals.end());
    size_t n = vals.size();
    return n % 2 ? vals[n / 2] : 0.5 * (vals[n / 2 - 1] + vals[n / 2]);
}

std::string csv_quote(const std::string& s) {
    if (s.find_first_of(",\"\n") == std::string::npos) return s;
    std::string out = "\"";
    for (char c : s) {
        if (c == '"') out += '"';
        out += c;
    }
    out += '"';
    return out;
}

std::vector<std::string> csv_split(const std::string& line, const std::string& origin) {
    std::vector<std::string> fields;
    std::string cur;
    bool quoted = false;
    for (size_t i = 0; i < line.size(); ++i) {
        char c = line[i];
        if (quoted) {
            if (c == '"') {
                if (i + 1 < line.size() && line[i + 1] == '"') {
                    cur += '"';
                    ++i;
                } else {
                    quoted = false;
                }
            } else {
                cur += c;
            }
        } else if (c == '"' && cur.empty()) {
            quoted = true;
        } else if (c == ',') {
            fields.push_back(cur);
            cur.clear();
        } else {
            cur += c;
        }
    }
    if (quoted) throw DataError(origin + ": unterminated quoted field");
    fields.push_back(cur);
    return fields;
}

}  // namespace

namespace prepare_ops {

PixelTable extract_pixels(const PolygonSet& polys, const CovariateStack& stack,
                          const Grid* aggregation, int ncores) {
    if (stack.size() == 0) throw DataError("covariate stack is empty");
    const Grid& templ = stack.grids[0];
    for (size_t k = 1; k < stack.size(); ++k)
        if (auto f = alignment_mismatch(templ, stack.grids[k]))
            throw DataError("covariate '" + stack.names[k] + "' is not aligned: '" + *f +
                            "' differs");
    if (aggregation)
        if (auto f = alignment_mismatch(templ, *aggregation))
            throw DataError("aggregation raster is not aligned: '" + *f + "' differs");

    std::vector<char> claimed(templ.size(), 0);
    PixelTable table;
    std::vector<std::pair<long, long>> cells;  // (row, col) of each kept pixel

    for (size_t p = 0; p < polys.size(); ++p) {
        // bounding box -> candidate cells, scanned north-first for determinism
        double bxmin = std::numeric_limits<double>::infinity(), bxmax = -bxmin;
        double bymin = bxmin, bymax = -bxmin;
        for (const Ring& ring : polys.rings[p])
            for (const auto& pt : ring) {
                bxmin = std::min(bxmin, pt[0]);
                bxmax = std::max(bxmax, pt[0]);
                bymin = std::min(bymin, pt[1]);
                bymax = std::max(bymax, pt[1]);
            }
        long cmin = std::max<long>(0, static_cast<long>(std::floor((bxmin - templ.xll) / templ.cellsize - 0.5)));
        long cmax = std::min<long>(templ.ncols - 1,
                                   static_cast<long>(std::ceil((bxmax - templ.xll) / templ.cellsize)));
        long rsmin = std::max<long>(0, static_cast<long>(std::floor((bymin - templ.yll) / templ.cellsize - 0.5)));
        long rsmax = std::min<long>(templ.nrows - 1,
                                    static_cast<long>(std::ceil((bymax - templ.yll) / templ.cellsize)));
        long rmin = templ.nrows - 1 - rsmax, rmax = templ.nrows - 1 - rsmin;
        for (long r = std::max<long>(0, rmin); r <= std::min(templ.nrows - 1, rmax); ++r) {
            for (long c = cmin; c <= cmax; ++c) {
                size_t flat = static_cast<size_t>(r * templ.ncols + c);
                if (claimed[flat]) continue;  // overlap: first polygon in file order wins
                Point ctr = cell_center(templ, r, c);
                if (!point_in_rings(polys.rings[p], ctr.x, ctr.y)) continue;
                claimed[flat] = 1;
                table.polygon_index.push_back(static_cast<long>(p));
                table.x.push_back(ctr.x);
                table.y.push_back(ctr.y);
                cells.emplace_back(r, c);
            }
        }
    }

    table.covariates.assign(stack.size(), std::vector<double>(table.size(), kNaN));
    parallel_for(stack.size(), ncores, [&](size_t k) {
        const Grid& g = stack.grids[k];
        auto& col = table.covariates[k];
        for (size_t i = 0; i < cells.size(); ++i) {
            double v = g.at(cells[i].first, cells[i].second);
            col[i] = g.is_nodata(v) ? kNaN : v;
        }
    });

    table.aggregation.assign(table.size(), 1.0);
    if (aggregation) {
        for (size_t i = 0; i < cells.size(); ++i) {
            double v = aggregation->at(cells[i].first, cells[i].second);
            table.aggregation[i] = aggregation->is_nodata(v) ? kNaN : v;
        }
    }
    return table;
}

NaReport apply_na_policy(PreparedData& data, bool na_action) {
    PixelTable& px = data.pixels;
    NaReport report;

    long na_resp = 0, na_cov = 0, na_agg = 0;
    for (double r : data.responses)
        if (std::isnan(r)) ++na_resp;
    for (const auto& col : px.covariates)
        for (double v : col)
            if (std::isnan(v)) ++na_cov;
    for (double a : px.aggregation)
        if (std::isnan(a)) ++na_agg;

    if (!na_action) {
        if (na_resp || na_cov || na_agg)
            throw DataError("missing values present and na_action is off: " +
                            std::to_string(na_resp) + " response(s), " + std::to_string(na_cov) +
                            " covariate value(s), " + std::to_string(na_agg) +
                            " aggregation value(s)");
        return report;
    }

    // medians over all extracted pixels, before any polygon is dropped
    std::vector<double> medians(px.n_covariates(), 0.0);
    for (size_t k = 0; k < px.n_covariates(); ++k)
        if (na_cov) medians[k] = column_median(px.covariates[k], data.covariate_names[k]);

    if (na_resp) {
        std::vector<char> keep_poly(data.responses.size(), 1);
        for (size_t i = 0; i < data.responses.size(); ++i)
            if (std::isnan(data.responses[i])) {
                keep_poly[i] = 0;
                report.dropped_response_ids.push_back(data.polygon_ids[i]);
            }
        std::vector<long> remap(data.responses.size(), -1);
        long next = 0;
        for (size_t i = 0; i < keep_poly.size(); ++i)
            if (keep_poly[i]) remap[i] = next++;

        PixelTable filtered;
        filtered.covariates.resize(px.n_covariates());
        for (size_t j = 0; j < px.size(); ++j) {
            long p = px.polygon_index[j];
            if (!keep_poly[static_cast<size_t>(p)]) continue;
            filtered.polygon_index.push_back(remap[static_cast<size_t>(p)]);
            filtered.x.push_back(px.x[j]);
            filtered.y.push_back(px.y[j]);
            for (size_t k = 0; k < px.n_covariates(); ++k)
                filtered.covariates[k].push_back(px.covariates[k][j]);
            filtered.aggregation.push_back(px.aggregation[j]);
        }
        px = std::move(filtered);

        auto filter = [&](auto& vec) {
            using V = std::decay_t<decltype(vec)>;
            V kept;
            for (size_t i = 0; i < vec.size(); ++i)
                if (keep_poly[i]) kept.push_back(vec[i]);
            vec = std::move(kept);
        };
        filter(data.responses);
        filter(data.polygon_ids);
        if (!data.sample_sizes.empty()) filter(data.sample_sizes);
        for (const auto& id : report.dropped_response_ids) data.dropped_ids.push_back(id);
    }

    for (size_t k = 0; k < px.n_covariates(); ++k)
        for (double& v : px.covariates[k])
            if (std::isnan(v)) {
                v = medians[k];
                ++report.imputed_covariate_values;
            }
    for (double& a : px.aggregation)
        if (std::isnan(a)) {
            a = 0.0;
            ++report.zeroed_aggregation_values;
        }
    return report;
}

void standardize_covariates(PreparedData& data) {
    if (data.standardized) throw InternalError("covariates already standardized");
    data.cov_means.clear();
    data.cov_sds.clear();
    for (size_t k = 0; k < data.pixels.n_covariates(); ++k) {
        auto& col = data.pixels.covariates[k];
        double m = mean_of(col);
        double s = sd_of(col);
        if (!(s > 0.0))
            throw DataError("covariate '" + data.covariate_names[k] +
                            "' is constant and cannot be standardized");
        for (double& v : col) v = (v - m) / s;
        data.cov_means.push_back(m);
        data.cov_sds.push_back(s);
    }
    data.standardized = true;
}

StartEndIndex build_index(const std::vector<long>& polygon_index, long n_polygons) {
    StartEndIndex idx;
    idx.start.assign(static_cast<size_t>(n_polygons), -1);
    idx.end.assign(static_cast<size_t>(n_polygons), -1);
    long prev = -1;
    for (size_t j = 0; j < polygon_index.size(); ++j) {
        long p = polygon_index[j];
        if (p < 0 || p >= n_polygons)
            throw InternalError("polygon index " + std::to_string(p) + " out of range");
        if (p < prev) throw InternalError("polygon_index is not non-decreasing");
        if (idx.start[static_cast<size_t>(p)] < 0) idx.start[static_cast<size_t>(p)] = static_cast<long>(j);
        idx.end[static_cast<size_t>(p)] = static_cast<long>(j);
        prev = p;
    }
    for (long p = 0; p < n_polygons; ++p)
        if (idx.start[static_cast<size_t>(p)] < 0)
            throw InternalError("polygon " + std::to_string(p) + " has no pixels in the index");
    return idx;
}

LatticeSpec build_lattice(const PixelTable& pixels, double spacing, long pad_nodes) {
    if (!(spacing > 0.0)) throw DataError("lattice spacing must be positive");
    if (pad_nodes < 0) throw DataError("lattice pad must be non-negative");
    if (pixels.size() == 0) throw DataError("cannot build a lattice over zero pixels");
    double xmin = pixels.x[0], xmax = pixels.x[0], ymin = pixels.y[0], ymax = pixels.y[0];
    for (size_t j = 0; j < pixels.size(); ++j) {
        xmin = std::min(xmin, pixels.x[j]);
        xmax = std::max(xmax, pixels.x[j]);
        ymin = std::min(ymin, pixels.y[j]);
        ymax = std::max(ymax, pixels.y[j]);
    }
    auto span_nodes = [&](double lo, double hi) {
        long n = static_cast<long>(std::ceil((hi - lo) / spacing - 1e-9)) + 1;
        while (lo + static_cast<double>(n - 1) * spacing < hi) ++n;  // exact coverage
        return n + 2 * pad_nodes;
    };
    LatticeSpec lat;
    lat.spacing = spacing;
    lat.pad_nodes = pad_nodes;
    lat.ncols = span_nodes(xmin, xmax);
    lat.nrows = span_nodes(ymin, ymax);
    lat.x0 = xmin - static_cast<double>(pad_nodes) * spacing;
    lat.y0 = ymin - static_cast<double>(pad_nodes) * spacing;
    return lat;
}

std::string summarize(const PreparedData& data) {
    std::ostringstream out;
    out << "prepared data summary\n";
    out << "  polygons: " << data.n_polygons();
    if (!data.dropped_ids.empty()) {
        out << " (dropped " << data.dropped_ids.size() << ":";
        for (const auto& id : data.dropped_ids) out << " " << id;
        out << ")";
    }
    out << "\n  pixels: " << data.n_pixels() << "\n";
    long pmin = std::numeric_limits<long>::max(), pmax = 0;
    for (size_t i = 0; i < data.index.size(); ++i) {
        long n = data.index.end[i] - data.index.start[i] + 1;
        pmin = std::min(pmin, n);
        pmax = std::max(pmax, n);
    }
    out << "  pixels per polygon: min " << pmin << ", max " << pmax << "\n";
    out << "  aggregation raster: " << (data.aggregation_present ? "yes" : "no (unit weights)")
        << "\n";
    out << "  covariates (" << data.covariate_names.size() << ")"
        << (data.standardized ? " [standardized]" : "") << ":\n";
    char buf[256];
    for (size_t k = 0; k < data.covariate_names.size(); ++k) {
        std::vector<double> col = data.pixels.covariates[k];
        std::sort(col.begin(), col.end());
        std::snprintf(buf, sizeof(buf),
                      "    %-16s min %.4g  q1 %.4g  median %.4g  mean %.4g  q3 %.4g  max %.4g\n",
                      data.covariate_names[k].c_str(), col.front(), quantile_sorted(col, 0.25),
                      quantile_sorted(col, 0.5), mean_of(col), quantile_sorted(col, 0.75),
                      col.back());
        out << buf;
    }
    return out.str();
}

}  // namespace prepare_ops

PreparedData prepare(const PolygonSet& polys, const CovariateStack& stack,
                     const std::optional<Grid>& aggregation, const PrepareOptions& opts) {
    if (polys.size() == 0) throw DataError("polygon set is empty");
    if (stack.size() == 0) throw DataError("covariate stack is empty");

    PreparedData data;
    data.covariate_names = stack.names;
    data.aggregation_present = aggregation.has_value();
    data.pixels = prepare_ops::extract_pixels(polys, stack, aggregation ? &*aggregation : nullptr,
                                              opts.ncores);

    // zero-pixel polygons are dropped from the likelihood (with a warning in
    // the summary); remaining polygons are reindexed contiguously
    std::vector<long> pixel_count(polys.size(), 0);
    for (long p : data.pixels.polygon_index) ++pixel_count[static_cast<size_t>(p)];
    std::vector<long> remap(polys.size(), -1);
    long next = 0;
    for (size_t p = 0; p < polys.size(); ++p) {
        if (pixel_count[p] == 0) {
            data.dropped_ids.push_back(polys.ids[p]);
            continue;
        }
        remap[p] = next++;
        data.polygon_ids.push_back(polys.ids[p]);
        data.responses.push_back(polys.responses[p]);
        if (polys.has_sample_sizes()) data.sample_sizes.push_back(polys.sample_sizes[p]);
    }
    if (next == 0) throw DataError("no polygon contains any pixel center");
    for (long& p : data.pixels.polygon_index) p = remap[static_cast<size_t>(p)];

    prepare_ops::apply_na_policy(data, opts.na_action);
    if (data.polygon_ids.empty())
        throw DataError("all polygons were dropped (missing responses / empty geometry)");

    data.index = prepare_ops::build_index(data.pixels.polygon_index,
                                          static_cast<long>(data.polygon_ids.size()));
    if (opts.standardize) prepare_ops::standardize_covariates(data);

    const Grid& templ = stack.grids[0];
    double spacing = opts.spacing > 0.0 ? opts.spacing : 4.0 * templ.cellsize;
    data.lattice = prepare_ops::build_lattice(data.pixels, spacing, opts.pad_nodes);

    data.template_header = templ;
    data.template_header.values.clear();
    data.stack = stack;
    validate_prepared(data);
    return data;
}

void validate_prepared(const PreparedData& data) {
    const size_t n = data.n_polygons();
    if (n == 0) throw DataError("prepared data has no polygons");
    if (data.responses.size() != n || data.index.size() != n)
        throw DataError("prepared data: responses/index size mismatch");
    if (!data.sample_sizes.empty() && data.sample_sizes.size() != n)
        throw DataError("prepared data: sample_sizes size mismatch");
    if (data.pixels.n_covariates() != data.covariate_names.size())
        throw DataError("prepared data: covariate column/name mismatch");
    for (double r : data.responses)
        if (std::isnan(r)) throw DataError("prepared data: NaN response after NA policy");
    for (const auto& col : data.pixels.covariates)
        for (double v : col)
            if (std::isnan(v)) throw DataError("prepared data: NaN covariate after NA policy");
    for (double a : data.pixels.aggregation)
        if (std::isnan(a)) throw DataError("prepared data: NaN aggregation after NA policy");
    long total = 0;
    for (size_t i = 0; i < n; ++i) {
        if (data.index.start[i] > data.index.end[i])
            throw DataError("prepared data: inverted index range");
        total += data.index.end[i] - data.index.start[i] + 1;
    }
    if (total != static_cast<long>(data.pixels.size()))
        throw DataError("prepared data: index ranges do not partition the pixel table");
    if (data.lattice.n_nodes() < 1) throw DataError("prepared data: empty lattice");
    // hull must cover every pixel center
    double x1 = data.lattice.x0 + data.lattice.width();
    double y1 = data.lattice.y0 + data.lattice.height();
    for (size_t j = 0; j < data.pixels.size(); ++j)
        if (data.pixels.x[j] < data.lattice.x0 || data.pixels.x[j] > x1 ||
            data.pixels.y[j] < data.lattice.y0 || data.pixels.y[j] > y1)
            throw DataError("prepared data: pixel outside the lattice hull");
}

namespace {

std::string pixels_csv(const PreparedData& data) {
    std::string out = "polygon_index,x,y";
    for (const auto& name : data.covariate_names) out += "," + csv_quote(name);
    out += ",aggregation\n";
    for (size_t j = 0; j < data.pixels.size(); ++j) {
        out += std::to_string(data.pixels.polygon_index[j]);
        out += ',' + fmt_double(data.pixels.x[j]) + ',' + fmt_double(data.pixels.y[j]);
        for (size_t k = 0; k < data.pixels.n_covariates(); ++k)
            out += ',' + fmt_double(data.pixels.covariates[k][j]);
        out += ',' + fmt_double(data.pixels.aggregation[j]);
        out += '\n';
    }
    return out;
}

std::string responses_csv(const PreparedData& data) {
    std::string out = "polygon_index,id,response,sample_size\n";
    for (size_t i = 0; i < data.n_polygons(); ++i) {
        out += std::to_string(i) + ',' + csv_quote(data.polygon_ids[i]) + ',' +
               fmt_double(data.responses[i]) + ',';
        if (!data.sample_sizes.empty() && !std::isnan(data.sample_sizes[i]))
            out += fmt_double(data.sample_sizes[i]);
        out += '\n';
    }
    return out;
}

json manifest_json(const PreparedData& data, const std::string& provenance) {
    json m;
    m["format"] = "disagg-prepared";
    m["version"] = 1;
    m["template"] = {{"ncols", data.template_header.ncols},
                     {"nrows", data.template_header.nrows},
                     {"xllcorner", data.template_header.xll},
                     {"yllcorner", data.template_header.yll},
                     {"cellsize", data.template_header.cellsize},
                     {"nodata", data.template_header.nodata}};
    m["covariates"] = data.covariate_names;
    m["aggregation_present"] = data.aggregation_present;
    m["lattice"] = {{"ncols", data.lattice.ncols},   {"nrows", data.lattice.nrows},
                    {"x0", data.lattice.x0},         {"y0", data.lattice.y0},
                    {"spacing", data.lattice.spacing}, {"pad_nodes", data.lattice.pad_nodes}};
    m["n_polygons"] = data.n_polygons();
    m["n_pixels"] = data.n_pixels();
    m["has_sample_sizes"] = !data.sample_sizes.empty();
    m["dropped_polygons"] = data.dropped_ids;
    m["standardize"] = {{"applied", data.standardized},
                        {"means", data.cov_means},
                        {"sds", data.cov_sds}};
    if (!provenance.empty()) m["provenance"] = provenance;
    return m;
}

}  // namespace

std::string prepared_provenance(const PreparedData& data) {
    Fnv1a h;
    h.update("pixels\n");
    h.update(pixels_csv(data));
    h.update("responses\n");
    h.update(responses_csv(data));
    h.update("manifest\n");
    h.update(manifest_json(data, "").dump());
    return h.hex();
}

void save_prepared(const PreparedData& data, const std::filesystem::path& dir) {
    validate_prepared(data);
    std::filesystem::create_directories(dir);
    auto write = [&](const std::filesystem::path& p, const std::string& content) {
        std::ofstream out(p, std::ios::binary);
        if (!out) throw DataError("cannot write " + p.string());
        out << content;
    };
    write(dir / "pixels.csv", pixels_csv(data));
    write(dir / "responses.csv", responses_csv(data));
    write(dir / "manifest.json", manifest_json(data, prepared_provenance(data)).dump(1) + "\n");
    if (data.stack) {
        std::filesystem::create_directories(dir / "covariates");
        for (size_t k = 0; k < data.stack->size(); ++k)
            geoio::write_ascii_grid(data.stack->grids[k],
                                    dir / "covariates" / (data.stack->names[k] + ".asc"));
    }
}

PreparedData load_prepared(const std::filesystem::path& dir) {
    auto read = [&](const std::filesystem::path& p) {
        std::ifstream in(p, std::ios::binary);
        if (!in) throw DataError("cannot open " + p.string());
        std::ostringstream ss;
        ss << in.rdbuf();
        return ss.str();
    };
    json m;
    try {
        m = json::parse(read(dir / "manifest.json"));
    } catch (const json::parse_error& e) {
        throw DataError((dir / "manifest.json").string() + ": invalid JSON: " + e.what());
    }
    if (m.value("format", "") != "disagg-prepared")
        throw DataError(dir.string() + ": not a prepared-data directory");

    PreparedData data;
    const json& t = m.at("template");
    data.template_header.ncols = t.at("ncols").get<long>();
    data.template_header.nrows = t.at("nrows").get<long>();
    data.template_header.xll = t.at("xllcorner").get<double>();
    data.template_header.yll = t.at("yllcorner").get<double>();
    data.template_header.cellsize = t.at("cellsize").get<double>();
    data.template_header.nodata = t.at("nodata").get<double>();
    data.covariate_names = m.at("covariates").get<std::vector<std::string>>();
    data.aggregation_present = m.at("aggregation_present").get<bool>();
    const json& l = m.at("lattice");
    data.lattice.ncols = l.at("ncols").get<long>();
    data.lattice.nrows = l.at("nrows").get<long>();
    data.lattice.x0 = l.at("x0").get<double>();
    data.lattice.y0 = l.at("y0").get<double>();
    data.lattice.spacing = l.at("spacing").get<double>();
    data.lattice.pad_nodes = l.at("pad_nodes").get<long>();
    data.dropped_ids = m.at("dropped_polygons").get<std::vector<std::string>>();
    data.standardized = m.at("standardize").at("applied").get<bool>();
    data.cov_means = m.at("standardize").at("means").get<std::vector<double>>();
    data.cov_sds = m.at("standardize").at("sds").get<std::vector<double>>();
    bool has_ss = m.at("has_sample_sizes").get<bool>();

    // pixels.csv
    {
        std::istringstream in(read(dir / "pixels.csv"));
        std::string line;
        if (!std::getline(in, line)) throw DataError("pixels.csv is empty");
        auto header = csv_split(line, "pixels.csv");
        size_t ncov = data.covariate_names.size();
        if (header.size() != 4 + ncov)
            throw DataError("pixels.csv: expected " + std::to_string(4 + ncov) +
                            " columns, found " + std::to_string(header.size()));
        data.pixels.covariates.assign(ncov, {});
        size_t lineno = 1;
        while (std::getline(in, line)) {
            ++lineno;
            if (line.empty()) continue;
            auto f = csv_split(line, "pixels.csv");
            if (f.size() != 4 + ncov)
                throw DataError("pixels.csv line " + std::to_string(lineno) +
                                ": wrong field count");
            data.pixels.polygon_index.push_back(parse_long(f[0], "pixels.csv polygon_index"));
            data.pixels.x.push_back(parse_double(f[1], "pixels.csv x"));
            data.pixels.y.push_back(parse_double(f[2], "pixels.csv y"));
            for (size_t k = 0; k < ncov; ++k)
                data.pixels.covariates[k].push_back(parse_double(f[3 + k], "pixels.csv covariate"));
            data.pixels.aggregation.push_back(parse_double(f[3 + ncov], "pixels.csv aggregation"));
        }
    }
    // responses.csv
    {
        std::istringstream in(read(dir / "responses.csv"));
        std::string line;
        if (!std::getline(in, line)) throw DataError("responses.csv is empty");
        size_t lineno = 1;
        while (std::getline(in, line)) {
            ++lineno;
            if (line.empty()) continue;
            auto f = csv_split(line, "responses.csv");
            if (f.size() != 4)
                throw DataError("responses.csv line " + std::to_string(lineno) +
                                ": wrong field count");
            data.polygon_ids.push_back(f[1]);
            data.responses.push_back(parse_double(f[2], "responses.csv response"));
            if (has_ss) {
                data.sample_sizes.push_back(
                    f[3].empty() ? std::numeric_limits<double>::quiet_NaN()
                                 : parse_double(f[3], "responses.csv sample_size"));
            }
        }
    }
    if (data.n_polygons() != m.at("n_polygons").get<size_t>() ||
        data.n_pixels() != m.at("n_pixels").get<size_t>())
        throw DataError(dir.string() + ": manifest counts do not match the csv contents");

    data.index = prepare_ops::build_index(data.pixels.polygon_index,
                                          static_cast<long>(data.n_polygons()));
    if (std::filesystem::is_directory(dir / "covariates")) {
        Grid templ = data.template_header;
        CovariateStack stack = geoio::load_covariate_dir(dir / "covariates");
        if (auto f = alignment_mismatch(data.template_header, stack.grids[0]))
            throw DataError(dir.string() + ": stored covariate rasters are misaligned ('" + *f +
                            "')");
        if (stack.names != data.covariate_names)
            throw DataError(dir.string() + ": stored covariate rasters do not match the manifest");
        data.stack = std::move(stack);
    }

    std::string expect = m.value("provenance", "");
    std::string actual = prepared_provenance(data);
    if (!expect.empty() && expect != actual)
        throw DataError(dir.string() + ": provenance hash mismatch (manifest " + expect +
                        ", contents " + actual + ")");
    validate_prepared(data);
    return data;
}

}  // namespace disagg
