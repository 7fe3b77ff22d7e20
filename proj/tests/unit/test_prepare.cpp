#include <algorithm>
#include <cmath>
#include <filesystem>
#include <optional>
#include <vector>

#include <doctest.h>

#include "disagg/prepare.hpp"
#include "disagg/rng.hpp"

#include "helpers.hpp"

using namespace disagg;
namespace fs = std::filesystem;

namespace {

// Independent containment oracle: nonzero winding number. Agrees with the
// even-odd rule away from edges for simple polygons.
bool winding_inside(const Ring& ring, double x, double y) {
    int wn = 0;
    for (size_t i = 0; i + 1 < ring.size(); ++i) {
        double x0 = ring[i][0], y0 = ring[i][1];
        double x1 = ring[i + 1][0], y1 = ring[i + 1][1];
        double cross = (x1 - x0) * (y - y0) - (x - x0) * (y1 - y0);
        if (y0 <= y) {
            if (y1 > y && cross > 0) ++wn;
        } else if (y1 <= y && cross < 0) {
            --wn;
        }
    }
    return wn != 0;
}

double edge_distance(const Ring& ring, double x, double y) {
    double best = 1e30;
    for (size_t i = 0; i + 1 < ring.size(); ++i) {
        double ax = ring[i][0], ay = ring[i][1];
        double bx = ring[i + 1][0], by = ring[i + 1][1];
        double dx = bx - ax, dy = by - ay;
        double t = ((x - ax) * dx + (y - ay) * dy) / std::max(dx * dx + dy * dy, 1e-300);
        t = std::clamp(t, 0.0, 1.0);
        double px = ax + t * dx - x, py = ay + t * dy - y;
        best = std::min(best, std::hypot(px, py));
    }
    return best;
}

}  // namespace

TEST_CASE("even-odd containment agrees with a winding-number oracle") {
    Rng rng(31);
    for (int trial = 0; trial < 40; ++trial) {
        // random star-shaped polygon around (0.5, 0.5)
        long n = 3 + static_cast<long>(rng.uniform() * 7);
        std::vector<double> angles;
        for (long i = 0; i < n; ++i) angles.push_back(rng.uniform() * 2.0 * M_PI);
        std::sort(angles.begin(), angles.end());
        Ring ring;
        for (double a : angles) {
            double r = 0.1 + 0.4 * rng.uniform();
            ring.push_back({0.5 + r * std::cos(a), 0.5 + r * std::sin(a)});
        }
        ring.push_back(ring.front());
        for (int q = 0; q < 50; ++q) {
            double x = rng.uniform(), y = rng.uniform();
            if (edge_distance(ring, x, y) < 1e-3) continue;  // conventions differ on edges
            CHECK(point_in_rings({ring}, x, y) == winding_inside(ring, x, y));
        }
    }
}

TEST_CASE("holes flip containment under the even-odd rule") {
    std::vector<Ring> rings{testfix::rect_ring(0, 0, 4, 4), testfix::rect_ring(1, 1, 3, 3)};
    CHECK(point_in_rings(rings, 0.5, 0.5));
    CHECK_FALSE(point_in_rings(rings, 2.0, 2.0));  // inside the hole
    CHECK(point_in_rings(rings, 3.5, 3.5));
    CHECK_FALSE(point_in_rings(rings, 5.0, 2.0));
}

TEST_CASE("extract_pixels assigns cells by first containing polygon") {
    // 4x4 unit grid; polygons overlap on x in [2, 3]
    Grid cov = testfix::make_grid(4, 4, 0.0, 0.0, 1.0, {});
    for (long r = 0; r < 4; ++r)
        for (long c = 0; c < 4; ++c) cov.at(r, c) = static_cast<double>(r * 4 + c);
    CovariateStack stack;
    stack.names = {"v"};
    stack.grids = {cov};
    PolygonSet polys = testfix::rect_polygons({{0, 0, 3, 4}, {2, 0, 4, 4}}, {1.0, 2.0});

    PixelTable t = prepare_ops::extract_pixels(polys, stack, nullptr);
    REQUIRE(t.size() == 16);  // all centers covered
    long n0 = 0, n1 = 0;
    for (size_t j = 0; j < t.size(); ++j) {
        if (t.polygon_index[j] == 0) {
            ++n0;
            CHECK(t.x[j] < 3.0);  // overlap column x=2.5 goes to the first polygon
        } else {
            ++n1;
            CHECK(t.x[j] > 3.0);
        }
        // covariate value read back from the containing cell
        auto rc = cell_of(cov, t.x[j], t.y[j]);
        REQUIRE(rc.has_value());
        CHECK(t.covariates[0][j] == cov.at(rc->first, rc->second));
        CHECK(t.aggregation[j] == 1.0);  // no raster -> unit weights
    }
    CHECK(n0 == 12);
    CHECK(n1 == 4);
}

TEST_CASE("extract_pixels skips uncovered cells and reads the aggregation raster") {
    Grid cov = testfix::make_grid(3, 1, 0.0, 0.0, 1.0, {1.0, 2.0, 3.0});
    Grid agg = testfix::make_grid(3, 1, 0.0, 0.0, 1.0, {10.0, -9999.0, 30.0});
    CovariateStack stack;
    stack.names = {"v"};
    stack.grids = {cov};
    PolygonSet polys = testfix::rect_polygons({{0, 0, 2, 1}}, {1.0});  // covers cells 0 and 1 only

    PixelTable t = prepare_ops::extract_pixels(polys, stack, &agg);
    REQUIRE(t.size() == 2);
    CHECK(t.aggregation[0] == 10.0);
    CHECK(std::isnan(t.aggregation[1]));  // nodata -> NaN for the NA policy
    CHECK(t.covariates[0][0] == 1.0);
}

TEST_CASE("na policy: drop, impute with the pre-drop median, zero weights") {
    // 4 cells in a row; polygon A (NaN response) owns cells 0-1, B owns 2-3.
    // Covariate: 1, 2, nodata, 100 -> median of extracted finite values
    // {1, 2, 100} is 2, computed before A is dropped.
    Grid cov = testfix::make_grid(4, 1, 0.0, 0.0, 1.0, {1.0, 2.0, -9999.0, 100.0});
    Grid agg = testfix::make_grid(4, 1, 0.0, 0.0, 1.0, {1.0, 1.0, 1.0, -9999.0});
    CovariateStack stack;
    stack.names = {"v"};
    stack.grids = {cov};
    PolygonSet polys =
        testfix::rect_polygons({{0, 0, 2, 1}, {2, 0, 4, 1}}, {std::nan(""), 5.0});

    PrepareOptions opts;
    opts.na_action = true;
    opts.spacing = 1.0;
    opts.pad_nodes = 1;
    PreparedData d = prepare(polys, stack, agg, opts);
    REQUIRE(d.n_polygons() == 1);
    CHECK(d.polygon_ids[0] == "p1");
    REQUIRE(d.dropped_ids.size() == 1);
    CHECK(d.dropped_ids[0] == "p0");
    REQUIRE(d.n_pixels() == 2);
    CHECK(d.pixels.covariates[0][0] == 2.0);  // imputed with the pre-drop median
    CHECK(d.pixels.covariates[0][1] == 100.0);
    CHECK(d.pixels.aggregation[1] == 0.0);  // nodata weight zeroed
    CHECK(d.responses[0] == 5.0);
    // polygon indices were compacted
    CHECK(d.pixels.polygon_index[0] == 0);
    CHECK(d.index.start[0] == 0);
    CHECK(d.index.end[0] == 1);

    // the policy is idempotent
    NaReport again = prepare_ops::apply_na_policy(d, true);
    CHECK(again.dropped_response_ids.empty());
    CHECK(again.imputed_covariate_values == 0);
    CHECK(again.zeroed_aggregation_values == 0);

    SUBCASE("same fixtures error without na_action") {
        opts.na_action = false;
        CHECK_THROWS_WITH_AS(prepare(polys, stack, agg, opts),
                             doctest::Contains("missing values present"), DataError);
    }
}

TEST_CASE("each NA source alone trips the strict policy") {
    CovariateStack clean;
    clean.names = {"v"};
    clean.grids = {testfix::make_grid(2, 1, 0.0, 0.0, 1.0, {1.0, 2.0})};
    PolygonSet polys = testfix::rect_polygons({{0, 0, 2, 1}}, {3.0});
    PrepareOptions opts;
    opts.spacing = 1.0;

    SUBCASE("NaN response") {
        PolygonSet bad = polys;
        bad.responses[0] = std::nan("");
        CHECK_THROWS_AS(prepare(bad, clean, std::nullopt, opts), DataError);
        PreparedData ok = prepare(polys, clean, std::nullopt, opts);
        CHECK(ok.n_polygons() == 1);
    }
    SUBCASE("nodata covariate") {
        CovariateStack bad = clean;
        bad.grids[0].values[1] = -9999.0;
        CHECK_THROWS_AS(prepare(polys, bad, std::nullopt, opts), DataError);
    }
    SUBCASE("nodata aggregation") {
        Grid agg = testfix::make_grid(2, 1, 0.0, 0.0, 1.0, {1.0, -9999.0});
        CHECK_THROWS_AS(prepare(polys, clean, agg, opts), DataError);
    }
}

TEST_CASE("polygons without any pixel center are dropped and recorded") {
    CovariateStack stack;
    stack.names = {"v"};
    stack.grids = {testfix::make_grid(2, 1, 0.0, 0.0, 1.0, {1.0, 2.0})};
    // second polygon sits between cell centers
    PolygonSet polys =
        testfix::rect_polygons({{0, 0, 2, 1}, {0.6, 0.6, 0.9, 0.9}}, {3.0, 4.0});
    PrepareOptions opts;
    opts.spacing = 1.0;
    PreparedData d = prepare(polys, stack, std::nullopt, opts);
    CHECK(d.n_polygons() == 1);
    REQUIRE(d.dropped_ids.size() == 1);
    CHECK(d.dropped_ids[0] == "p1");

    PolygonSet hopeless = testfix::rect_polygons({{0.6, 0.6, 0.9, 0.9}}, {3.0});
    CHECK_THROWS_AS(prepare(hopeless, stack, std::nullopt, opts), DataError);
}

TEST_CASE("standardization records the transform and normalizes columns") {
    Grid cov = testfix::make_grid(4, 1, 0.0, 0.0, 1.0, {2.0, 4.0, 6.0, 8.0});
    CovariateStack stack;
    stack.names = {"v"};
    stack.grids = {cov};
    PolygonSet polys = testfix::rect_polygons({{0, 0, 4, 1}}, {3.0});
    PrepareOptions opts;
    opts.spacing = 1.0;
    opts.standardize = true;
    PreparedData d = prepare(polys, stack, std::nullopt, opts);
    REQUIRE(d.standardized);
    REQUIRE(d.cov_means.size() == 1);
    CHECK(d.cov_means[0] == doctest::Approx(5.0));
    CHECK(d.cov_sds[0] == doctest::Approx(std::sqrt(20.0 / 3.0)));
    double m = 0.0, ss = 0.0;
    for (double v : d.pixels.covariates[0]) m += v;
    m /= 4.0;
    for (double v : d.pixels.covariates[0]) ss += (v - m) * (v - m);
    CHECK(m == doctest::Approx(0.0));
    CHECK(std::sqrt(ss / 3.0) == doctest::Approx(1.0));
    // a constant column cannot be standardized
    CovariateStack flat;
    flat.names = {"v"};
    flat.grids = {testfix::make_grid(4, 1, 0.0, 0.0, 1.0, {7.0, 7.0, 7.0, 7.0})};
    CHECK_THROWS_AS(prepare(polys, flat, std::nullopt, opts), DataError);
}

TEST_CASE("lattice spans the pixel hull with padding") {
    PixelTable t;
    for (long i = 0; i < 12; ++i)
        for (long j = 0; j < 12; ++j) {
            t.polygon_index.push_back(0);
            t.x.push_back(0.5 + static_cast<double>(i));
            t.y.push_back(0.5 + static_cast<double>(j));
        }
    LatticeSpec lat = prepare_ops::build_lattice(t, 4.0, 1);
    // span 11 needs 4 nodes at spacing 4; one pad node each side
    CHECK(lat.ncols == 6);
    CHECK(lat.nrows == 6);
    CHECK(lat.x0 == doctest::Approx(-3.5));
    CHECK(lat.y0 == doctest::Approx(-3.5));
    CHECK(lat.x0 + lat.width() >= 11.5);

    // exact multiples keep exact coverage
    LatticeSpec l2 = prepare_ops::build_lattice(t, 11.0, 0);
    CHECK(l2.ncols == 2);
    CHECK(l2.x0 + l2.width() == doctest::Approx(11.5));

    CHECK_THROWS_AS(prepare_ops::build_lattice(t, 0.0, 1), DataError);
    CHECK_THROWS_AS(prepare_ops::build_lattice(t, 1.0, -1), DataError);
    CHECK_THROWS_AS(prepare_ops::build_lattice(PixelTable{}, 1.0, 1), DataError);
}

TEST_CASE("default spacing is four template cells") {
    CovariateStack stack;
    stack.names = {"v"};
    Grid g = testfix::make_grid(8, 8, 0.0, 0.0, 0.5, {});
    for (auto& v : g.values) v = 1.0;
    stack.grids = {g};
    PolygonSet polys = testfix::rect_polygons({{0, 0, 4, 4}}, {3.0});
    PrepareOptions opts;  // spacing 0 -> default
    PreparedData d = prepare(polys, stack, std::nullopt, opts);
    CHECK(d.lattice.spacing == doctest::Approx(2.0));
    CHECK(d.lattice.pad_nodes == 5);
}

TEST_CASE("prepared save/load round trip preserves provenance and content") {
    Grid cov = testfix::make_grid(4, 2, -1.0, 2.0, 0.5, {});
    for (size_t i = 0; i < cov.values.size(); ++i) cov.values[i] = 0.25 * static_cast<double>(i) - 1.0;
    CovariateStack stack;
    stack.names = {"slope"};
    stack.grids = {cov};
    Grid agg = cov;
    for (auto& v : agg.values) v = 2.0 + v;
    PolygonSet polys = testfix::rect_polygons({{-1.0, 2.0, 0.0, 3.0}, {0.0, 2.0, 1.0, 3.0}},
                                              {4.0, 9.0});
    PrepareOptions opts;
    opts.spacing = 1.0;
    opts.standardize = true;
    PreparedData d = prepare(polys, stack, agg, opts);
    validate_prepared(d);

    fs::path dir = fs::temp_directory_path() / "disagg_test_prep_rt";
    fs::remove_all(dir);
    save_prepared(d, dir);
    PreparedData r = load_prepared(dir);
    CHECK(prepared_provenance(r) == prepared_provenance(d));
    CHECK(r.polygon_ids == d.polygon_ids);
    CHECK(r.responses == d.responses);
    CHECK(r.pixels.x == d.pixels.x);
    CHECK(r.pixels.covariates == d.pixels.covariates);
    CHECK(r.pixels.aggregation == d.pixels.aggregation);
    CHECK(r.lattice.ncols == d.lattice.ncols);
    CHECK(r.lattice.x0 == d.lattice.x0);
    CHECK(r.cov_means == d.cov_means);
    CHECK(r.standardized == d.standardized);
    CHECK(r.aggregation_present == d.aggregation_present);
    REQUIRE(r.stack.has_value());
    CHECK(r.stack->names == stack.names);
    CHECK(r.stack->grids[0].values == cov.values);
    fs::remove_all(dir);

    CHECK_THROWS_AS(load_prepared("/nonexistent/prep"), DataError);
}

TEST_CASE("validate_prepared rejects inconsistent tables") {
    PreparedData d = testfix::single_pixel_data(2.0);
    validate_prepared(d);
    SUBCASE("index not partitioning") {
        d.index.end[0] = 5;
        CHECK_THROWS_AS(validate_prepared(d), DataError);
    }
    SUBCASE("NaN response survives") {
        d.responses[0] = std::nan("");
        CHECK_THROWS_AS(validate_prepared(d), DataError);
    }
    SUBCASE("pixel outside hull") {
        d.pixels.x[0] = 99.0;
        CHECK_THROWS_AS(validate_prepared(d), DataError);
    }
    SUBCASE("no polygons") {
        CHECK_THROWS_AS(validate_prepared(PreparedData{}), DataError);
    }
}
