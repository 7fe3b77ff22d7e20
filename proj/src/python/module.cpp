// Thin python bindings over the pipeline stages. Each function mirrors the
// CLI subcommand of the same name: inputs and outputs are directories of
// artifacts, so python, the CLI and the C++ API interoperate on disk.

#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>
#include <pybind11/stl/filesystem.h>

#include <fstream>
#include <optional>

#include "disagg/geoio.hpp"
#include "disagg/laplace.hpp"
#include "disagg/mcmc.hpp"
#include "disagg/model.hpp"
#include "disagg/predictor.hpp"
#include "disagg/prepare.hpp"
#include "disagg/simulate.hpp"

namespace py = pybind11;
using namespace disagg;

namespace {

std::string py_prepare(const std::string& shapes, const std::string& covariates,
                       const std::string& out, const std::optional<std::string>& aggregation,
                       const std::string& id_var, const std::string& response_var,
                       const std::optional<std::string>& sample_size_var, bool na_action,
                       bool standardize, double spacing, long pad, int ncores) {
    PolygonSet polys = geoio::read_polygons(shapes, id_var, response_var, sample_size_var);
    CovariateStack stack = geoio::load_covariate_dir(covariates);
    std::optional<Grid> agg;
    if (aggregation) {
        agg = geoio::read_ascii_grid(*aggregation);
        if (auto field = alignment_mismatch(stack.grids[0], *agg))
            throw DataError("aggregation raster is misaligned with the covariates (" + *field +
                            ")");
    }
    PrepareOptions opts;
    opts.na_action = na_action;
    opts.standardize = standardize;
    opts.spacing = spacing;
    opts.pad_nodes = pad;
    opts.ncores = ncores;
    PreparedData prep = prepare(polys, stack, agg, opts);
    save_prepared(prep, out);
    return prepare_ops::summarize(prep);
}

PriorSpec priors_from_dict(const py::dict& d) {
    PriorSpec p;
    for (auto item : d) {
        const std::string key = py::cast<std::string>(item.first);
        const double v = py::cast<double>(item.second);
        if (key == "mean_intercept") p.mean_intercept = v;
        else if (key == "sd_intercept") p.sd_intercept = v;
        else if (key == "mean_slope") p.mean_slope = v;
        else if (key == "sd_slope") p.sd_slope = v;
        else if (key == "rho_min") p.rho_min = v;
        else if (key == "rho_prob") p.rho_prob = v;
        else if (key == "sigma_max") p.sigma_max = v;
        else if (key == "sigma_prob") p.sigma_prob = v;
        else if (key == "iid_sd_max") p.iid_sd_max = v;
        else if (key == "iid_sd_prob") p.iid_sd_prob = v;
        else if (key == "gaussian_tau_shape") p.gaussian_tau_shape = v;
        else if (key == "gaussian_tau_rate") p.gaussian_tau_rate = v;
        else throw UsageError("unknown prior '" + key + "'");
    }
    return p;
}

std::string py_fit(const std::string& prep_dir, const std::string& out,
                   const std::string& family, const std::optional<std::string>& link, bool field,
                   bool iid, long iterations, const py::dict& priors, int ncores) {
    ModelSpec spec;
    spec.family = family_from_string(family);
    spec.link = link ? link_from_string(*link) : default_link(spec.family);
    spec.use_field = field;
    spec.use_iid = iid;
    spec.max_iterations = iterations;
    spec.priors = priors_from_dict(priors);
    PreparedData prep = load_prepared(prep_dir);
    FitResult fit = fit_model(prep, spec, ncores);
    save_fit(fit, out);
    return full_summary(fit, prep);
}

py::dict metrics_dict(const MetricsReport& m) {
    py::dict d;
    d["rmse"] = m.rmse;
    d["mae"] = m.mae;
    d["pearson"] = m.pearson;
    d["spearman"] = m.spearman;
    d["log_pearson"] = m.log_pearson;
    return d;
}

py::dict py_predict(const std::string& prep_dir, const std::string& fit_dir,
                    const std::string& out, const std::optional<std::string>& newdata,
                    bool predict_iid, bool mean_only, long n_draws, double ci, uint64_t seed,
                    int ncores) {
    PreparedData prep = load_prepared(prep_dir);
    FitResult fit = load_fit(fit_dir);
    std::optional<CovariateStack> nd;
    if (newdata) nd = geoio::load_covariate_dir(*newdata);
    PredictionSet pred = mean_only
                             ? predict_mean(fit, prep, nd, predict_iid)
                             : predict_uncertainty(fit, prep, nd, predict_iid, n_draws, ci, seed,
                                                   ncores);
    save_prediction(pred, out);
    MetricsReport m = in_sample_metrics(fit, prep);
    save_metrics(m, std::filesystem::path(out) / "metrics.json");
    return metrics_dict(m);
}

void py_simulate(const std::string& out, long grid_ncols, long grid_nrows, double cellsize,
                 long n_polygons, long n_covariates, double beta0,
                 const std::vector<double>& beta, double sigma, double rho, double sigma_u,
                 const std::string& family, const std::optional<std::string>& link,
                 const std::string& aggregation_mode, double lognormal_mu, double lognormal_sigma,
                 double gaussian_obs_sigma, long binomial_sample_size, uint64_t seed) {
    SimulationConfig cfg;
    cfg.grid_ncols = grid_ncols;
    cfg.grid_nrows = grid_nrows;
    cfg.cellsize = cellsize;
    cfg.n_polygons = n_polygons;
    cfg.n_covariates = n_covariates;
    cfg.true_beta0 = beta0;
    cfg.true_beta = beta;
    cfg.true_sigma = sigma;
    cfg.true_rho = rho;
    cfg.true_sigma_u = sigma_u;
    cfg.family = family_from_string(family);
    cfg.link = link ? link_from_string(*link) : default_link(cfg.family);
    cfg.aggregation_mode = aggregation_mode_from_string(aggregation_mode);
    cfg.lognormal_mu = lognormal_mu;
    cfg.lognormal_sigma = lognormal_sigma;
    cfg.gaussian_obs_sigma = gaussian_obs_sigma;
    cfg.binomial_sample_size = binomial_sample_size;
    cfg.seed = seed;
    save_simulation(simulate_dataset(cfg), out);
}

py::dict py_mcmc(const std::string& prep_dir, const std::string& fit_dir, const std::string& out,
                 long chains, long iterations, long warmup, bool auto_double, double rhat_target,
                 int max_doublings, double init_scale, uint64_t seed, int ncores) {
    PreparedData prep = load_prepared(prep_dir);
    FitResult fit = load_fit(fit_dir);
    RwmOptions opts;
    opts.n_chains = chains;
    opts.seed = seed;
    opts.init_scale = init_scale;
    opts.ncores = ncores;

    ChainSet set;
    Diagnostics diag;
    bool converged = true;
    if (auto_double) {
        AutoRunResult res = run_until_converged(prep, fit, opts, rhat_target, iterations,
                                                max_doublings);
        set = std::move(res.chains);
        diag = std::move(res.diagnostics);
        converged = res.converged;
    } else {
        opts.n_iterations = iterations;
        opts.n_warmup = warmup >= 0 ? warmup : iterations / 4;
        set = run_chains(prep, fit, opts);
        diag = diagnose(set);
    }
    save_chains(set, out);
    save_diagnostics(diag, set, std::filesystem::path(out) / "diagnostics.json");

    py::dict rhat, ess;
    for (size_t k = 0; k < diag.param_names.size(); ++k) {
        rhat[py::str(diag.param_names[k])] = diag.rhat[k];
        ess[py::str(diag.param_names[k])] = diag.ess[k];
    }
    py::dict d;
    d["rhat"] = rhat;
    d["ess"] = ess;
    d["converged"] = converged;
    d["iterations"] = set.n_iterations;
    return d;
}

std::string py_compare(const std::string& fit_dir, const std::string& chains_dir,
                       const std::string& out) {
    FitResult fit = load_fit(fit_dir);
    ChainSet chains = load_chains(chains_dir);
    std::vector<CompareRow> rows = compare(fit, chains);
    std::filesystem::create_directories(out);
    std::ofstream f(std::filesystem::path(out) / "comparison.csv", std::ios::binary);
    if (!f) throw DataError("cannot write comparison.csv");
    f << comparison_csv(rows);
    return comparison_text(rows);
}

py::tuple py_read_grid(const std::string& path) {
    Grid g = geoio::read_ascii_grid(path);
    py::array_t<double> arr({g.nrows, g.ncols});
    auto buf = arr.mutable_unchecked<2>();
    for (long r = 0; r < g.nrows; ++r)
        for (long c = 0; c < g.ncols; ++c) buf(r, c) = g.at(r, c);
    py::dict header;
    header["ncols"] = g.ncols;
    header["nrows"] = g.nrows;
    header["xllcorner"] = g.xll;
    header["yllcorner"] = g.yll;
    header["cellsize"] = g.cellsize;
    header["nodata_value"] = g.nodata;
    return py::make_tuple(arr, header);
}

}  // namespace

PYBIND11_MODULE(_core, m) {
    m.doc() = "disaggregation regression: polygon responses to pixel rate rasters";

    py::register_exception<UsageError>(m, "UsageError", PyExc_ValueError);
    py::register_exception<DataError>(m, "DataError", PyExc_RuntimeError);
    py::register_exception<NumericError>(m, "NumericError", PyExc_ArithmeticError);

    m.def("prepare", &py_prepare, py::arg("shapes"), py::arg("covariates"), py::arg("out"),
          py::arg("aggregation") = std::nullopt, py::arg("id_var") = "ID",
          py::arg("response_var") = "response", py::arg("sample_size_var") = std::nullopt,
          py::arg("na_action") = false, py::arg("standardize") = false, py::arg("spacing") = 0.0,
          py::arg("pad") = 5, py::arg("ncores") = 1,
          "Extract pixel data for polygons and build the field lattice; returns a summary.");

    m.def("fit", &py_fit, py::arg("prep"), py::arg("out"), py::arg("family") = "poisson",
          py::arg("link") = std::nullopt, py::arg("field") = true, py::arg("iid") = true,
          py::arg("iterations") = 100, py::arg("priors") = py::dict(), py::arg("ncores") = 1,
          "Fit the model by nested optimization; returns the fit summary.");

    m.def("predict", &py_predict, py::arg("prep"), py::arg("fit"), py::arg("out"),
          py::arg("newdata") = std::nullopt, py::arg("predict_iid") = false,
          py::arg("mean_only") = false, py::arg("n_draws") = 100, py::arg("ci") = 0.95,
          py::arg("seed") = 0, py::arg("ncores") = 1,
          "Write rate/component rasters, draws and credible intervals; returns metrics.");

    m.def("simulate", &py_simulate, py::arg("out"), py::arg("grid_ncols") = 40,
          py::arg("grid_nrows") = 40, py::arg("cellsize") = 1.0, py::arg("n_polygons") = 20,
          py::arg("n_covariates") = 2, py::arg("beta0") = -2.0,
          py::arg("beta") = std::vector<double>{}, py::arg("sigma") = 1.0, py::arg("rho") = 8.0,
          py::arg("sigma_u") = 0.05, py::arg("family") = "poisson",
          py::arg("link") = std::nullopt, py::arg("aggregation_mode") = "uniform",
          py::arg("lognormal_mu") = 0.0, py::arg("lognormal_sigma") = 0.5,
          py::arg("gaussian_obs_sigma") = 0.1, py::arg("binomial_sample_size") = 100,
          py::arg("seed") = 0, "Generate a synthetic dataset with known truth.");

    m.def("mcmc", &py_mcmc, py::arg("prep"), py::arg("fit"), py::arg("out"),
          py::arg("chains") = 4, py::arg("iterations") = 1000, py::arg("warmup") = -1,
          py::arg("auto_double") = false, py::arg("rhat_target") = 1.05,
          py::arg("max_doublings") = 6, py::arg("init_scale") = 0.1, py::arg("seed") = 0,
          py::arg("ncores") = 1,
          "Sample the exact joint posterior; returns rhat/ess per parameter.");

    m.def("compare", &py_compare, py::arg("fit"), py::arg("chains"), py::arg("out"),
          "Optimizer posterior vs MCMC per hyperparameter; returns the comparison table.");

    m.def("read_grid", &py_read_grid, py::arg("path"),
          "Read an ESRI ASCII grid; returns (values array, header dict). Nodata reads as NaN.");
}
