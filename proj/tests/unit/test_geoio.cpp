#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <string>

#include <doctest.h>

#include "disagg/geoio.hpp"
#include "disagg/grid.hpp"

#include "helpers.hpp"

using namespace disagg;
namespace fs = std::filesystem;

namespace {

fs::path temp_dir(const std::string& tag) {
    fs::path p = fs::temp_directory_path() / ("disagg_test_" + tag);
    fs::remove_all(p);
    fs::create_directories(p);
    return p;
}

const char* kGridText =
    "NCOLS 3\n"
    "nrows 2\n"
    "xllcorner 10\n"
    "YLLCORNER -5\n"
    "cellsize 0.5\n"
    "NODATA_value -1\n"
    "1 2 3\n"
    "4 -1 6\n";

}  // namespace

TEST_CASE("ascii grid parses case-insensitive headers") {
    Grid g = geoio::parse_ascii_grid(kGridText, "inline");
    CHECK(g.ncols == 3);
    CHECK(g.nrows == 2);
    CHECK(g.xll == 10.0);
    CHECK(g.yll == -5.0);
    CHECK(g.cellsize == 0.5);
    CHECK(g.nodata == -1.0);
    // row 0 is the northernmost row
    CHECK(g.at(0, 0) == 1.0);
    CHECK(g.at(1, 2) == 6.0);
    CHECK(g.nodata_at(1, 1));
    CHECK_FALSE(g.nodata_at(0, 1));
}

TEST_CASE("nodata header is optional and defaults to -9999") {
    Grid g = geoio::parse_ascii_grid("ncols 1\nnrows 1\nxllcorner 0\nyllcorner 0\ncellsize 1\n7\n",
                                     "inline");
    CHECK(g.nodata == -9999.0);
    CHECK(g.at(0, 0) == 7.0);
}

TEST_CASE("ascii grid rejects malformed input") {
    CHECK_THROWS_AS(geoio::parse_ascii_grid("nrows 2\nxllcorner 0\nyllcorner 0\ncellsize 1\n1 2\n",
                                            "inline"),
                    DataError);  // missing ncols
    CHECK_THROWS_AS(
        geoio::parse_ascii_grid(
            "ncols 2\nnrows 1\nxllcorner 0\nyllcorner 0\ncellsize 1\n1\n", "inline"),
        DataError);  // short value block
    CHECK_THROWS_AS(
        geoio::parse_ascii_grid(
            "ncols 2\nnrows 1\nxllcorner 0\nyllcorner 0\ncellsize 1\n1 2 3\n", "inline"),
        DataError);  // long value block
    CHECK_THROWS_AS(
        geoio::parse_ascii_grid(
            "ncols 2\nnrows 1\nxllcorner 0\nyllcorner 0\ncellsize 1\n1 zz\n", "inline"),
        DataError);  // non-numeric value
    CHECK_THROWS_AS(
        geoio::parse_ascii_grid(
            "ncols 2\nncols 2\nnrows 1\nxllcorner 0\nyllcorner 0\ncellsize 1\n1 2\n", "inline"),
        DataError);  // duplicate key
    CHECK_THROWS_AS(
        geoio::parse_ascii_grid(
            "ncols 0\nnrows 1\nxllcorner 0\nyllcorner 0\ncellsize 1\n", "inline"),
        DataError);  // non-positive dimension
    CHECK_THROWS_AS(
        geoio::parse_ascii_grid(
            "ncols 1\nnrows 1\nxllcorner 0\nyllcorner 0\ncellsize -2\n1\n", "inline"),
        DataError);  // non-positive cellsize
    CHECK_THROWS_AS(geoio::read_ascii_grid("/nonexistent/grid.asc"), DataError);
}

TEST_CASE("ascii grid format/parse round trip is exact") {
    Grid g = testfix::make_grid(3, 2, -1.25, 2.5, 0.125,
                                {0.1, -2.0, 3.5e-13, 1e20, -9999.0, std::nan("")});
    g.nodata = -9999.0;
    std::string text = geoio::format_ascii_grid(g);
    Grid h = geoio::parse_ascii_grid(text, "inline");
    CHECK(h.ncols == g.ncols);
    CHECK(h.nrows == g.nrows);
    CHECK(h.xll == g.xll);
    CHECK(h.yll == g.yll);
    CHECK(h.cellsize == g.cellsize);
    for (size_t i = 0; i < g.values.size(); ++i) {
        if (g.is_nodata(g.values[i]))
            CHECK(h.is_nodata(h.values[i]));
        else
            CHECK(h.values[i] == g.values[i]);
    }
    // and the file round trip matches the in-memory text
    fs::path dir = temp_dir("grid_rt");
    geoio::write_ascii_grid(g, dir / "g.asc");
    Grid f = geoio::read_ascii_grid(dir / "g.asc");
    CHECK(geoio::format_ascii_grid(f) == text);
    fs::remove_all(dir);
}

TEST_CASE("cell geometry: centers, lookup, half-open edges") {
    Grid g = testfix::make_grid(3, 2, 10.0, -5.0, 0.5, {});
    // south-west cell is row nrows-1, col 0
    Point sw = cell_center(g, 1, 0);
    CHECK(sw.x == doctest::Approx(10.25));
    CHECK(sw.y == doctest::Approx(-4.75));
    Point ne = cell_center(g, 0, 2);
    CHECK(ne.x == doctest::Approx(11.25));
    CHECK(ne.y == doctest::Approx(-4.25));

    auto rc = cell_of(g, 10.25, -4.75);
    REQUIRE(rc.has_value());
    CHECK(rc->first == 1);
    CHECK(rc->second == 0);
    // bottom/left edges belong to the cell, top/right to the neighbour
    auto on_left = cell_of(g, 10.0, -5.0);
    REQUIRE(on_left.has_value());
    CHECK(on_left->first == 1);
    CHECK(on_left->second == 0);
    CHECK_FALSE(cell_of(g, 11.5, -4.5).has_value());  // right edge of the grid
    CHECK_FALSE(cell_of(g, 9.999, -4.5).has_value());
    auto interior_edge = cell_of(g, 10.5, -4.5);
    REQUIRE(interior_edge.has_value());
    CHECK(interior_edge->second == 1);
}

TEST_CASE("alignment ignores the nodata sentinel") {
    Grid a = testfix::make_grid(2, 2, 0.0, 0.0, 1.0, {});
    Grid b = a;
    b.nodata = -1.0;
    CHECK(aligned(a, b));
    b = a;
    b.cellsize = 2.0;
    CHECK(alignment_mismatch(a, b) == std::string("cellsize"));
    b = a;
    b.xll = 0.5;
    CHECK(alignment_mismatch(a, b) == std::string("xllcorner"));
    b = a;
    b.nrows = 3;
    b.values.resize(6);
    CHECK(alignment_mismatch(a, b) == std::string("nrows"));
}

TEST_CASE("geojson polygons read ids, responses and geometry") {
    fs::path dir = temp_dir("geojson");
    std::ofstream(dir / "p.geojson") << R"({
      "type": "FeatureCollection",
      "features": [
        {"type": "Feature",
         "properties": {"ID": 7, "cases": 12.5},
         "geometry": {"type": "Polygon",
                      "coordinates": [[[0,0],[2,0],[2,2],[0,2],[0,0]]]}},
        {"type": "Feature",
         "properties": {"ID": "west", "cases": null},
         "geometry": {"type": "MultiPolygon",
                      "coordinates": [[[[3,0],[4,0],[4,1],[3,1],[3,0]]],
                                      [[[5,0],[6,0],[6,1],[5,1],[5,0]]]]}}
      ]})";
    PolygonSet ps = geoio::read_polygons(dir / "p.geojson", "ID", "cases");
    REQUIRE(ps.size() == 2);
    CHECK(ps.ids[0] == "7");  // numeric ids normalize to strings
    CHECK(ps.ids[1] == "west");
    CHECK(ps.responses[0] == 12.5);
    CHECK(std::isnan(ps.responses[1]));  // null -> missing
    CHECK_FALSE(ps.has_sample_sizes());
    CHECK(ps.rings[0].size() == 1);
    CHECK(ps.rings[1].size() == 2);  // multipolygon parts flatten
    CHECK(point_in_rings(ps.rings[0], 1.0, 1.0));
    CHECK_FALSE(point_in_rings(ps.rings[0], 3.0, 1.0));
    CHECK(point_in_rings(ps.rings[1], 3.5, 0.5));
    CHECK(point_in_rings(ps.rings[1], 5.5, 0.5));
    fs::remove_all(dir);
}

TEST_CASE("geojson rejects missing properties and malformed collections") {
    fs::path dir = temp_dir("geojson_bad");
    std::ofstream(dir / "noresp.geojson") << R"({
      "type": "FeatureCollection",
      "features": [{"type": "Feature", "properties": {"ID": 1},
        "geometry": {"type": "Polygon",
                     "coordinates": [[[0,0],[1,0],[1,1],[0,1],[0,0]]]}}]})";
    CHECK_THROWS_AS(geoio::read_polygons(dir / "noresp.geojson", "ID", "cases"), DataError);
    // absent property is an error even with a response present
    CHECK_THROWS_AS(geoio::read_polygons(dir / "noresp.geojson", "name", "ID"), DataError);

    std::ofstream(dir / "notfc.geojson") << R"({"type": "Feature"})";
    CHECK_THROWS_AS(geoio::read_polygons(dir / "notfc.geojson", "ID", "cases"), DataError);

    std::ofstream(dir / "badjson.geojson") << "{ not json";
    CHECK_THROWS_AS(geoio::read_polygons(dir / "badjson.geojson", "ID", "cases"), DataError);

    std::ofstream(dir / "dupid.geojson") << R"({
      "type": "FeatureCollection",
      "features": [
        {"type": "Feature", "properties": {"ID": 1, "cases": 1},
         "geometry": {"type": "Polygon", "coordinates": [[[0,0],[1,0],[1,1],[0,1],[0,0]]]}},
        {"type": "Feature", "properties": {"ID": 1, "cases": 2},
         "geometry": {"type": "Polygon", "coordinates": [[[2,0],[3,0],[3,1],[2,1],[2,0]]]}}
      ]})";
    CHECK_THROWS_AS(geoio::read_polygons(dir / "dupid.geojson", "ID", "cases"), DataError);

    std::ofstream(dir / "badgeom.geojson") << R"({
      "type": "FeatureCollection",
      "features": [{"type": "Feature", "properties": {"ID": 1, "cases": 1},
        "geometry": {"type": "Point", "coordinates": [0, 0]}}]})";
    CHECK_THROWS_AS(geoio::read_polygons(dir / "badgeom.geojson", "ID", "cases"), DataError);
    fs::remove_all(dir);
}

TEST_CASE("polygon write/read round trip keeps ids, values and containment") {
    PolygonSet ps = testfix::rect_polygons({{0, 0, 2, 1}, {2, 0, 4, 1}}, {3.0, 5.5});
    ps.sample_sizes = {10.0, 20.0};
    fs::path dir = temp_dir("poly_rt");
    geoio::write_polygons(ps, dir / "p.geojson", "ID", "cases", std::string("trials"));
    PolygonSet rt = geoio::read_polygons(dir / "p.geojson", "ID", "cases", std::string("trials"));
    REQUIRE(rt.size() == 2);
    CHECK(rt.ids == ps.ids);
    CHECK(rt.responses == ps.responses);
    CHECK(rt.sample_sizes == ps.sample_sizes);
    CHECK(point_in_rings(rt.rings[0], 1.0, 0.5));
    CHECK(point_in_rings(rt.rings[1], 3.0, 0.5));
    CHECK_FALSE(point_in_rings(rt.rings[0], 3.0, 0.5));
    fs::remove_all(dir);
}

TEST_CASE("covariate directory loads sorted by stem and checks alignment") {
    fs::path dir = temp_dir("covdir");
    Grid t = testfix::make_grid(2, 2, 0.0, 0.0, 1.0, {1, 2, 3, 4});
    Grid b = t;
    b.values = {5, 6, 7, 8};
    geoio::write_ascii_grid(b, dir / "zeta.asc");
    geoio::write_ascii_grid(t, dir / "alpha.asc");
    CovariateStack st = geoio::load_covariate_dir(dir);
    REQUIRE(st.size() == 2);
    CHECK(st.names[0] == "alpha");
    CHECK(st.names[1] == "zeta");
    CHECK(st.grid(0).at(0, 0) == 1.0);
    CHECK(st.grid(1).at(0, 0) == 5.0);

    Grid off = testfix::make_grid(2, 2, 9.0, 0.0, 1.0, {0, 0, 0, 0});
    geoio::write_ascii_grid(off, dir / "off.asc");
    CHECK_THROWS_AS(geoio::load_covariate_dir(dir), DataError);
    fs::remove_all(dir);
    fs::create_directories(dir);
    CHECK_THROWS_AS(geoio::load_covariate_dir(dir), DataError);  // empty dir
    fs::remove_all(dir);
}
