#include "disagg/predictor.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <sstream>

#include <Eigen/Dense>

#include "disagg/geoio.hpp"
#include "disagg/rng.hpp"
#include "disagg/stats.hpp"
#include "disagg/util.hpp"

#include <json.hpp>

namespace disagg {

using json = nlohmann::ordered_json;

namespace {

// Fixed composition order: the raster path and the pixel-table path (metrics)
// must produce bit-identical linear predictors.
double compose_eta(double intercept, double covpart, double field, double iid) {
    return intercept + covpart + field + iid;
}

double field_at(const LatticeSpec& lattice, double x, double y, const Vec& latent, long offset) {
    long idx[4];
    double w[4];
    int n = spde::bilinear_weights(lattice, x, y, idx, w, /*clamp=*/true);
    double f = 0.0;
    for (int m = 0; m < n; ++m) f += w[m] * latent[offset + idx[m]];
    return f;
}

Grid blank_grid(const Grid& header) {
    Grid g;
    g.ncols = header.ncols;
    g.nrows = header.nrows;
    g.xll = header.xll;
    g.yll = header.yll;
    g.cellsize = header.cellsize;
    g.nodata = header.nodata;
    g.values.assign(g.size(), g.nodata);
    return g;
}

// Cell -> training polygon, on the training template geometry.
std::vector<long> training_membership(const PreparedData& prep) {
    const Grid& t = prep.template_header;
    std::vector<long> member(static_cast<size_t>(t.nrows * t.ncols), -1);
    for (size_t j = 0; j < prep.pixels.size(); ++j) {
        auto rc = cell_of(t, prep.pixels.x[j], prep.pixels.y[j]);
        if (!rc) throw InternalError("training pixel outside the template raster");
        member[static_cast<size_t>(rc->first * t.ncols + rc->second)] =
            prep.pixels.polygon_index[j];
    }
    return member;
}

// Prediction geometry: covariates in fit order (standardized with the stored
// transform), a covariate-nodata mask, and the training-polygon membership of
// each cell center.
struct Surface {
    Grid header;  // values empty
    std::vector<char> valid;
    std::vector<double> z;       // n_cells x n_cov, row-major by cell
    std::vector<long> poly_of;   // -1 off the training polygons
    long n_cov = 0;

    long n_cells() const { return header.nrows * header.ncols; }
};

Surface make_surface(const FitResult& fit, const PreparedData& prep,
                     const std::optional<CovariateStack>& newdata, bool need_membership) {
    const CovariateStack* stack = nullptr;
    if (newdata) {
        stack = &*newdata;
    } else {
        if (!prep.stack)
            throw DataError("prepared data carries no covariate rasters; pass new covariates");
        stack = &*prep.stack;
    }

    const auto& names = fit.covariate_names;
    std::vector<const Grid*> grids(names.size(), nullptr);
    for (size_t k = 0; k < stack->names.size(); ++k) {
        auto it = std::find(names.begin(), names.end(), stack->names[k]);
        if (it == names.end())
            throw DataError("covariate '" + stack->names[k] + "' was not in the fitted model");
        grids[static_cast<size_t>(it - names.begin())] = &stack->grids[k];
    }
    for (size_t k = 0; k < names.size(); ++k)
        if (!grids[k]) throw DataError("covariates are missing '" + names[k] + "'");

    Surface surf;
    surf.n_cov = static_cast<long>(names.size());
    if (surf.n_cov > 0) {
        surf.header = *grids[0];
        surf.header.values.clear();
    } else {
        surf.header = prep.template_header;
    }

    const long ncells = surf.n_cells();
    surf.valid.assign(static_cast<size_t>(ncells), 1);
    surf.z.assign(static_cast<size_t>(ncells * std::max<long>(surf.n_cov, 1)), 0.0);
    for (long k = 0; k < surf.n_cov; ++k) {
        const Grid& g = *grids[static_cast<size_t>(k)];
        const bool std_k = prep.standardized;
        const double mean = std_k ? prep.cov_means[static_cast<size_t>(k)] : 0.0;
        const double sd = std_k ? prep.cov_sds[static_cast<size_t>(k)] : 1.0;
        for (long c = 0; c < ncells; ++c) {
            double v = g.values[static_cast<size_t>(c)];
            if (g.is_nodata(v)) {
                surf.valid[static_cast<size_t>(c)] = 0;
                continue;
            }
            surf.z[static_cast<size_t>(c * surf.n_cov + k)] = std_k ? (v - mean) / sd : v;
        }
    }

    surf.poly_of.assign(static_cast<size_t>(ncells), -1);
    if (need_membership) {
        std::vector<long> member = training_membership(prep);
        const Grid& t = prep.template_header;
        for (long r = 0; r < surf.header.nrows; ++r) {
            for (long c = 0; c < surf.header.ncols; ++c) {
                Point p = cell_center(surf.header, r, c);
                auto rc = cell_of(t, p.x, p.y);
                if (!rc) continue;
                surf.poly_of[static_cast<size_t>(r * surf.header.ncols + c)] =
                    member[static_cast<size_t>(rc->first * t.ncols + rc->second)];
            }
        }
    }
    return surf;
}

// Rate raster at (theta, latent); optionally the link-scale component rasters.
void eval_surface(const Surface& surf, const ParamLayout& lay, const LatticeSpec& lattice,
                  Link link, const Vec& theta, const Vec& latent, bool want_iid, Grid& rate,
                  Grid* field_out, Grid* iid_out, Grid* cov_out) {
    const long ncells = surf.n_cells();
    for (long c = 0; c < ncells; ++c) {
        if (!surf.valid[static_cast<size_t>(c)]) continue;
        double covpart = 0.0;
        for (long k = 0; k < lay.n_cov; ++k)
            covpart += theta[lay.i_slope(k)] * surf.z[static_cast<size_t>(c * surf.n_cov + k)];
        double field = 0.0;
        if (lay.use_field) {
            Point p = cell_center(surf.header, c / surf.header.ncols, c % surf.header.ncols);
            field = field_at(lattice, p.x, p.y, latent, lay.n_iid);
        }
        double iid = 0.0;
        long poly = surf.poly_of[static_cast<size_t>(c)];
        if (want_iid && poly >= 0) iid = latent[poly];
        double eta = compose_eta(theta[lay.i_intercept()], covpart, field, iid);
        rate.values[static_cast<size_t>(c)] = link_inverse(link, eta);
        if (field_out) field_out->values[static_cast<size_t>(c)] = field;
        if (iid_out) iid_out->values[static_cast<size_t>(c)] = iid;
        if (cov_out) cov_out->values[static_cast<size_t>(c)] = covpart;
    }
}

void check_fit_prep(const FitResult& fit, const PreparedData& prep, const ParamLayout& lay) {
    if (!fit.prep_provenance.empty() && fit.prep_provenance != prepared_provenance(prep))
        throw DataError("fit was produced from different prepared data (provenance mismatch)");
    if (fit.latent_mode.size() != lay.n_latent() || fit.theta_hat.size() != lay.n_theta())
        throw DataError("fit dimensions do not match the prepared data");
}

// theta-space sampling transform: Cholesky when positive definite, otherwise
// an eigenvalue-floored square root (with a warning).
Eigen::MatrixXd sampling_transform(const Eigen::MatrixXd& cov, std::vector<std::string>& warnings) {
    Eigen::LLT<Eigen::MatrixXd> llt(cov);
    if (llt.info() == Eigen::Success) return llt.matrixL();
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(cov);
    Eigen::VectorXd ev = es.eigenvalues().cwiseMax(0.0).cwiseSqrt();
    warnings.push_back(
        "parameter covariance is not positive definite; draws use an eigenvalue-floored factor");
    return es.eigenvectors() * ev.asDiagonal();
}

}  // namespace

PredictionSet predict_mean(const FitResult& fit, const PreparedData& prep,
                           const std::optional<CovariateStack>& newdata, bool predict_iid) {
    if (predict_iid && !fit.spec.use_iid)
        throw UsageError("iid prediction requested but the model has no iid effect");
    ParamLayout lay = ParamLayout::create(fit.spec, prep);
    check_fit_prep(fit, prep, lay);

    Surface surf = make_surface(fit, prep, newdata, predict_iid && fit.spec.use_iid);

    PredictionSet out;
    out.rate = blank_grid(surf.header);
    out.field_component = blank_grid(surf.header);
    out.covariate_component = blank_grid(surf.header);
    Grid* iid_out = nullptr;
    if (predict_iid) {
        out.iid_component = blank_grid(surf.header);
        iid_out = &*out.iid_component;
    }
    eval_surface(surf, lay, prep.lattice, fit.spec.link, fit.theta_hat, fit.latent_mode,
                 predict_iid, out.rate, &out.field_component, iid_out, &out.covariate_component);
    return out;
}

PredictionSet predict_uncertainty(const FitResult& fit, const PreparedData& prep,
                                  const std::optional<CovariateStack>& newdata, bool predict_iid,
                                  long n_draws, double ci, uint64_t seed, int ncores) {
    if (n_draws < 2) throw UsageError("n_draws must be at least 2");
    if (!(ci > 0.0 && ci < 1.0)) throw UsageError("ci must lie strictly between 0 and 1");

    PredictionSet out = predict_mean(fit, prep, newdata, predict_iid);
    Surface surf = make_surface(fit, prep, newdata, predict_iid && fit.spec.use_iid);
    ModelContext ctx = make_context(prep, fit.spec);
    const ParamLayout& lay = ctx.layout;
    const long d = lay.n_theta();
    const long nl = lay.n_latent();

    Eigen::MatrixXd T = sampling_transform(fit.theta_cov, out.warnings);

    out.draws.assign(static_cast<size_t>(n_draws), blank_grid(surf.header));
    std::vector<std::string> draw_errors(static_cast<size_t>(n_draws));
    parallel_for(static_cast<size_t>(n_draws), ncores, [&](size_t s) {
        Rng rng = Rng::stream(seed, static_cast<uint64_t>(s));
        Vec z(d);
        for (long i = 0; i < d; ++i) z[i] = rng.normal();
        Vec theta_s = fit.theta_hat + T * z;

        Vec latent_s(nl);
        if (nl > 0) {
            PosteriorEval eval(ctx);
            InnerResult inner = inner_optimize(eval, ctx, theta_s, fit.latent_mode);
            if (inner.failed || !std::isfinite(inner.value)) {
                draw_errors[s] = "latent re-optimization failed for draw " + std::to_string(s);
                return;
            }
            Vec zl(nl);
            for (long i = 0; i < nl; ++i) zl[i] = rng.normal();
            const auto& ldlt = *inner.factor;
            Vec half = zl.array() / ldlt.vectorD().array().sqrt();
            latent_s = inner.mode + ldlt.permutationPinv() * ldlt.matrixU().solve(half);
        }
        eval_surface(surf, lay, prep.lattice, fit.spec.link, theta_s, latent_s, predict_iid,
                     out.draws[s], nullptr, nullptr, nullptr);
    });
    for (const auto& e : draw_errors)
        if (!e.empty()) throw NumericError(e);

    out.ci_lower = blank_grid(surf.header);
    out.ci_upper = blank_grid(surf.header);
    const double p_lo = (1.0 - ci) / 2.0;
    const double p_hi = 1.0 - p_lo;
    std::vector<double> vals(static_cast<size_t>(n_draws));
    for (long c = 0; c < surf.n_cells(); ++c) {
        if (!surf.valid[static_cast<size_t>(c)]) continue;
        for (size_t s = 0; s < static_cast<size_t>(n_draws); ++s)
            vals[s] = out.draws[s].values[static_cast<size_t>(c)];
        std::sort(vals.begin(), vals.end());
        out.ci_lower.values[static_cast<size_t>(c)] = quantile_sorted(vals, p_lo);
        out.ci_upper.values[static_cast<size_t>(c)] = quantile_sorted(vals, p_hi);
    }
    return out;
}

MetricsReport in_sample_metrics(const FitResult& fit, const PreparedData& prep) {
    ParamLayout lay = ParamLayout::create(fit.spec, prep);
    check_fit_prep(fit, prep, lay);

    const size_t np = prep.n_pixels();
    Vec pixel_rate(static_cast<long>(np));
    for (size_t j = 0; j < np; ++j) {
        double covpart = 0.0;
        for (long k = 0; k < lay.n_cov; ++k)
            covpart +=
                fit.theta_hat[lay.i_slope(k)] * prep.pixels.covariates[static_cast<size_t>(k)][j];
        double field = lay.use_field ? field_at(prep.lattice, prep.pixels.x[j], prep.pixels.y[j],
                                                fit.latent_mode, lay.n_iid)
                                     : 0.0;
        double iid = lay.use_iid ? fit.latent_mode[prep.pixels.polygon_index[j]] : 0.0;
        double eta = compose_eta(fit.theta_hat[lay.i_intercept()], covpart, field, iid);
        pixel_rate[static_cast<long>(j)] = link_inverse(fit.spec.link, eta);
    }

    Vec agg = Eigen::Map<const Vec>(prep.pixels.aggregation.data(), static_cast<long>(np));
    Vec cases, poly_rate;
    aggregate(pixel_rate, agg, prep.index, cases, poly_rate);

    const size_t n = prep.n_polygons();
    std::vector<double> p(n), o(n);
    for (size_t i = 0; i < n; ++i) {
        double sum_a = 0.0;
        for (long j = prep.index.start[i]; j <= prep.index.end[i]; ++j)
            sum_a += prep.pixels.aggregation[static_cast<size_t>(j)];
        p[i] = poly_rate[static_cast<long>(i)];
        o[i] = sum_a > 0.0 ? prep.responses[i] / sum_a : 0.0;
    }
    return compute_metrics(o, p);
}

MetricsReport compute_metrics(const std::vector<double>& observed,
                              const std::vector<double>& predicted) {
    if (observed.size() != predicted.size())
        throw UsageError("metrics need observed and predicted vectors of equal length");
    if (observed.empty()) throw UsageError("metrics need at least one value");
    const size_t n = observed.size();
    MetricsReport m;
    double se = 0.0, ae = 0.0;
    for (size_t i = 0; i < n; ++i) {
        se += (predicted[i] - observed[i]) * (predicted[i] - observed[i]);
        ae += std::abs(predicted[i] - observed[i]);
    }
    m.rmse = std::sqrt(se / static_cast<double>(n));
    m.mae = ae / static_cast<double>(n);
    m.pearson = pearson(predicted, observed);
    m.spearman = spearman(predicted, observed);
    std::vector<double> lp(n), lo(n);
    const double eps = 1e-8;
    for (size_t i = 0; i < n; ++i) {
        lp[i] = std::log(predicted[i] + eps);
        lo[i] = std::log(observed[i] + eps);
    }
    m.log_pearson = pearson(lp, lo);
    return m;
}

std::string metrics_text(const MetricsReport& m) {
    std::ostringstream out;
    out << "in-sample performance:\n";
    char line[96];
    auto row = [&](const char* name, double v) {
        std::snprintf(line, sizeof(line), "  %-12s %s\n", name, fmt_double(v).c_str());
        out << line;
    };
    row("rmse", m.rmse);
    row("mae", m.mae);
    row("pearson", m.pearson);
    row("spearman", m.spearman);
    row("log_pearson", m.log_pearson);
    return out.str();
}

std::string full_summary(const FitResult& fit, const PreparedData& prep) {
    return summarize_fit(fit) + metrics_text(in_sample_metrics(fit, prep));
}

void save_prediction(const PredictionSet& pred, const std::filesystem::path& dir) {
    std::filesystem::create_directories(dir);
    geoio::write_ascii_grid(pred.rate, dir / "rate.asc");
    geoio::write_ascii_grid(pred.field_component, dir / "field.asc");
    geoio::write_ascii_grid(pred.covariate_component, dir / "covariates.asc");
    if (pred.iid_component) geoio::write_ascii_grid(*pred.iid_component, dir / "iid.asc");
    if (pred.has_draws()) {
        geoio::write_ascii_grid(pred.ci_lower, dir / "ci_lower.asc");
        geoio::write_ascii_grid(pred.ci_upper, dir / "ci_upper.asc");
        std::filesystem::create_directories(dir / "draws");
        for (size_t s = 0; s < pred.draws.size(); ++s) {
            char name[32];
            std::snprintf(name, sizeof(name), "draw_%04zu.asc", s);
            geoio::write_ascii_grid(pred.draws[s], dir / "draws" / name);
        }
    }
}

void save_metrics(const MetricsReport& m, const std::filesystem::path& file) {
    json j;
    j["rmse"] = m.rmse;
    j["mae"] = m.mae;
    j["pearson"] = m.pearson;
    j["spearman"] = m.spearman;
    j["log_pearson"] = m.log_pearson;
    std::ofstream out(file, std::ios::binary);
    if (!out) throw DataError("cannot write " + file.string());
    out << j.dump(1) << "\n";
}

MetricsReport load_metrics(const std::filesystem::path& file) {
    std::ifstream in(file, std::ios::binary);
    if (!in) throw DataError("cannot open " + file.string());
    json j;
    try {
        j = json::parse(in);
    } catch (const json::parse_error& e) {
        throw DataError(file.string() + ": invalid JSON: " + e.what());
    }
    auto get = [&](const char* key) {
        const auto& v = j.at(key);
        return v.is_null() ? std::numeric_limits<double>::quiet_NaN() : v.get<double>();
    };
    MetricsReport m;
    m.rmse = get("rmse");
    m.mae = get("mae");
    m.pearson = get("pearson");
    m.spearman = get("spearman");
    m.log_pearson = get("log_pearson");
    return m;
}

}  // namespace disagg
