#include <algorithm>
#include <cmath>
#include <filesystem>
#include <vector>

#include <doctest.h>

#include "disagg/predictor.hpp"
#include "disagg/rng.hpp"
#include "disagg/simulate.hpp"
#include "disagg/stats.hpp"

#include "helpers.hpp"

using namespace disagg;
namespace fs = std::filesystem;

namespace {

// Reference metric formulas, computed the direct way.
MetricsReport reference_metrics(const std::vector<double>& obs, const std::vector<double>& pred) {
    MetricsReport m;
    double se = 0.0, ae = 0.0;
    for (size_t i = 0; i < obs.size(); ++i) {
        se += (pred[i] - obs[i]) * (pred[i] - obs[i]);
        ae += std::abs(pred[i] - obs[i]);
    }
    m.rmse = std::sqrt(se / static_cast<double>(obs.size()));
    m.mae = ae / static_cast<double>(obs.size());
    m.pearson = pearson(pred, obs);
    m.spearman = spearman(pred, obs);
    std::vector<double> lo(obs.size()), lp(obs.size());
    for (size_t i = 0; i < obs.size(); ++i) {
        lo[i] = std::log(obs[i] + 1e-8);
        lp[i] = std::log(pred[i] + 1e-8);
    }
    m.log_pearson = pearson(lp, lo);
    return m;
}

// Small fitted poisson model shared by the prediction tests.
struct Fixture {
    SimulatedData sim;
    PreparedData prep;
    FitResult fit;
};

Fixture make_fixture() {
    SimulationConfig cfg;
    cfg.grid_ncols = 10;
    cfg.grid_nrows = 10;
    cfg.n_polygons = 6;
    cfg.n_covariates = 1;
    cfg.true_beta0 = -1.0;
    cfg.true_beta = {0.4};
    cfg.true_sigma = 0.3;
    cfg.true_rho = 5.0;
    cfg.true_sigma_u = 0.05;
    cfg.seed = 31;
    Fixture f{simulate_dataset(cfg), {}, {}};
    PrepareOptions popts;
    popts.spacing = 3.0;
    popts.pad_nodes = 2;
    f.prep = prepare(f.sim.polygons, f.sim.covariates, f.sim.aggregation, popts);
    ModelSpec spec;
    spec.max_iterations = 80;
    f.fit = fit_model(f.prep, spec);
    return f;
}

const Fixture& fixture() {
    static Fixture f = make_fixture();
    return f;
}

}  // namespace

TEST_CASE("metrics match the reference implementation on random vectors") {
    Rng rng(12);
    for (int t = 0; t < 50; ++t) {
        size_t n = 3 + static_cast<size_t>(rng.uniform() * 40);
        std::vector<double> obs(n), pred(n);
        for (size_t i = 0; i < n; ++i) {
            obs[i] = rng.uniform() * 5.0;
            pred[i] = obs[i] + rng.normal() * 0.5;
            if (pred[i] < 0.0) pred[i] = 0.0;
        }
        MetricsReport got = compute_metrics(obs, pred);
        MetricsReport want = reference_metrics(obs, pred);
        CHECK(std::abs(got.rmse - want.rmse) < 1e-12);
        CHECK(std::abs(got.mae - want.mae) < 1e-12);
        CHECK(std::abs(got.pearson - want.pearson) < 1e-12);
        CHECK(std::abs(got.spearman - want.spearman) < 1e-12);
        CHECK(std::abs(got.log_pearson - want.log_pearson) < 1e-12);
    }
    CHECK_THROWS_AS(compute_metrics({1.0}, {1.0, 2.0}), UsageError);
    CHECK_THROWS_AS(compute_metrics({}, {}), UsageError);
    // constant side -> NaN correlations, finite errors
    MetricsReport flat = compute_metrics({2.0, 2.0, 2.0}, {1.0, 2.0, 3.0});
    CHECK(std::isnan(flat.pearson));
    CHECK(flat.rmse == doctest::Approx(std::sqrt(2.0 / 3.0)));

    // round trip through the json artifact
    MetricsReport m = compute_metrics({1.0, 2.0, 4.0}, {1.1, 1.9, 4.2});
    fs::path file = fs::temp_directory_path() / "disagg_test_metrics.json";
    save_metrics(m, file);
    MetricsReport r = load_metrics(file);
    CHECK(r.rmse == m.rmse);
    CHECK(r.spearman == m.spearman);
    fs::remove(file);
}

TEST_CASE("mean prediction components add up on the link scale") {
    const Fixture& f = fixture();
    PredictionSet p = predict_mean(f.fit, f.prep, std::nullopt, true);
    REQUIRE(p.rate.values.size() == 100);
    REQUIRE(p.iid_component.has_value());
    CHECK(aligned(p.rate, p.field_component));
    CHECK(aligned(p.rate, p.covariate_component));
    const double b0 = f.fit.theta_hat[0];  // intercept is not its own raster
    long checked = 0;
    for (long r = 0; r < p.rate.nrows; ++r)
        for (long c = 0; c < p.rate.ncols; ++c) {
            if (p.rate.nodata_at(r, c)) continue;
            double eta = b0 + p.covariate_component.at(r, c) + p.field_component.at(r, c) +
                         p.iid_component->at(r, c);
            CHECK(p.rate.at(r, c) == doctest::Approx(std::exp(eta)).epsilon(1e-12));
            ++checked;
        }
    CHECK(checked == 100);

    // without the iid request the component is absent and the rate drops it
    PredictionSet q = predict_mean(f.fit, f.prep);
    CHECK_FALSE(q.iid_component.has_value());
    for (size_t i = 0; i < 100; ++i)
        CHECK(q.rate.values[i] ==
              doctest::Approx(std::exp(b0 + p.covariate_component.values[i] +
                                       p.field_component.values[i]))
                  .epsilon(1e-12));
}

TEST_CASE("nodata covariate cells stay nodata in every output raster") {
    const Fixture& f = fixture();
    CovariateStack holey = *f.prep.stack;
    holey.grids[0].values[3] = holey.grids[0].nodata;
    holey.grids[0].values[47] = holey.grids[0].nodata;
    PredictionSet p = predict_mean(f.fit, f.prep, holey);
    CHECK(p.rate.nodata_at(0, 3));
    CHECK(p.rate.nodata_at(4, 7));
    CHECK_FALSE(p.rate.nodata_at(0, 4));
    CHECK(p.covariate_component.nodata_at(0, 3));
    CHECK(p.field_component.nodata_at(0, 3));
}

TEST_CASE("newdata must carry the fitted covariate names") {
    const Fixture& f = fixture();
    CovariateStack wrong = *f.prep.stack;
    wrong.names[0] = "unrelated";
    CHECK_THROWS_AS(predict_mean(f.fit, f.prep, wrong), DataError);
}

TEST_CASE("iid prediction on an iid-free model is a usage error") {
    const Fixture& f = fixture();
    ModelSpec spec;
    spec.use_iid = false;
    spec.max_iterations = 60;
    FitResult fit2 = fit_model(f.prep, spec);
    CHECK_THROWS_AS(predict_mean(fit2, f.prep, std::nullopt, true), UsageError);
}

TEST_CASE("uncertainty draws are seeded, bounded and quantile-consistent") {
    const Fixture& f = fixture();
    PredictionSet p = predict_uncertainty(f.fit, f.prep, std::nullopt, false, 24, 0.9, 7);
    REQUIRE(p.draws.size() == 24);
    // lower <= upper everywhere; both reproduce the draw quantiles
    std::vector<double> cell;
    for (long r = 0; r < p.rate.nrows; ++r)
        for (long c = 0; c < p.rate.ncols; ++c) {
            if (p.rate.nodata_at(r, c)) continue;
            cell.clear();
            for (const Grid& g : p.draws) cell.push_back(g.at(r, c));
            std::sort(cell.begin(), cell.end());
            CHECK(p.ci_lower.at(r, c) == doctest::Approx(quantile_sorted(cell, 0.05)));
            CHECK(p.ci_upper.at(r, c) == doctest::Approx(quantile_sorted(cell, 0.95)));
            CHECK(p.ci_lower.at(r, c) <= p.ci_upper.at(r, c));
        }

    // same seed, same draws; ncores does not change them
    PredictionSet q = predict_uncertainty(f.fit, f.prep, std::nullopt, false, 24, 0.9, 7, 4);
    for (size_t s = 0; s < p.draws.size(); ++s) CHECK(q.draws[s].values == p.draws[s].values);
    PredictionSet w = predict_uncertainty(f.fit, f.prep, std::nullopt, false, 24, 0.9, 8);
    bool any_diff = false;
    for (size_t s = 0; s < p.draws.size(); ++s)
        if (w.draws[s].values != p.draws[s].values) any_diff = true;
    CHECK(any_diff);

    // widening the interval can only widen the band
    PredictionSet wide = predict_uncertainty(f.fit, f.prep, std::nullopt, false, 24, 0.99, 7);
    for (size_t i = 0; i < p.rate.values.size(); ++i) {
        if (p.rate.is_nodata(p.rate.values[i])) continue;
        CHECK(wide.ci_lower.values[i] <= p.ci_lower.values[i] + 1e-12);
        CHECK(wide.ci_upper.values[i] >= p.ci_upper.values[i] - 1e-12);
    }

    CHECK_THROWS_AS(predict_uncertainty(f.fit, f.prep, std::nullopt, false, 1, 0.9, 7),
                    UsageError);
    CHECK_THROWS_AS(predict_uncertainty(f.fit, f.prep, std::nullopt, false, 10, 1.0, 7),
                    UsageError);
}

TEST_CASE("draw ensemble stays near the mean surface") {
    const Fixture& f = fixture();
    PredictionSet p = predict_uncertainty(f.fit, f.prep, std::nullopt, false, 60, 0.95, 3);
    double mean_rate = 0.0, mean_draws = 0.0;
    long n = 0;
    for (size_t i = 0; i < p.rate.values.size(); ++i) {
        if (p.rate.is_nodata(p.rate.values[i])) continue;
        mean_rate += p.rate.values[i];
        for (const Grid& g : p.draws) mean_draws += g.values[i];
        ++n;
    }
    mean_rate /= static_cast<double>(n);
    mean_draws /= static_cast<double>(n) * static_cast<double>(p.draws.size());
    // posterior mean of the draws tracks the plug-in surface loosely
    CHECK(mean_draws == doctest::Approx(mean_rate).epsilon(0.25));
}

TEST_CASE("in-sample metrics compare observed and fitted polygon rates") {
    const Fixture& f = fixture();
    MetricsReport m = in_sample_metrics(f.fit, f.prep);
    CHECK(std::isfinite(m.rmse));
    CHECK(m.rmse >= 0.0);
    CHECK(m.pearson > 0.3);  // the fit explains most of a 6-polygon dataset
    std::string txt = metrics_text(m);
    CHECK(txt.find("rmse") != std::string::npos);
    std::string full = full_summary(f.fit, f.prep);
    CHECK(full.find("rmse") != std::string::npos);
    CHECK(full.find("intercept") != std::string::npos);
}

TEST_CASE("prediction rasters serialize with the expected filenames") {
    const Fixture& f = fixture();
    PredictionSet p = predict_uncertainty(f.fit, f.prep, std::nullopt, true, 5, 0.95, 1);
    fs::path dir = fs::temp_directory_path() / "disagg_test_pred_save";
    fs::remove_all(dir);
    save_prediction(p, dir);
    CHECK(fs::exists(dir / "rate.asc"));
    CHECK(fs::exists(dir / "field.asc"));
    CHECK(fs::exists(dir / "covariates.asc"));
    CHECK(fs::exists(dir / "iid.asc"));
    CHECK(fs::exists(dir / "ci_lower.asc"));
    CHECK(fs::exists(dir / "ci_upper.asc"));
    CHECK(fs::exists(dir / "draws/draw_0000.asc"));
    CHECK(fs::exists(dir / "draws/draw_0004.asc"));
    fs::remove_all(dir);
}

TEST_CASE("provenance mismatch between fit and prepared data is rejected") {
    const Fixture& f = fixture();
    PreparedData other = f.prep;
    other.responses[0] += 1.0;
    CHECK_THROWS_AS(predict_mean(f.fit, other), DataError);
}
