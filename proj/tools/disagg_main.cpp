// disagg: polygon-level responses + pixel covariates -> fitted model ->
// fine-scale rate rasters. Subcommands stage the pipeline through on-disk
// artifacts chained by provenance hashes.
//
// Exit codes: 1 usage, 2 data, 3 numeric/internal.

#include <cstdio>
#include <fstream>
#include <iostream>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "disagg/geoio.hpp"
#include "disagg/laplace.hpp"
#include "disagg/mcmc.hpp"
#include "disagg/model.hpp"
#include "disagg/predictor.hpp"
#include "disagg/prepare.hpp"
#include "disagg/simulate.hpp"
#include "disagg/util.hpp"

using json = nlohmann::json;
using namespace disagg;

namespace {

// One flat config document serves every subcommand; keys mirror the long
// flags. A flag given on the command line wins over the config value.
const std::set<std::string>& config_schema() {
    static const std::set<std::string> keys = {
        // shared
        "seed", "ncores", "verbose",
        // prepare
        "shapes", "covariates", "aggregation", "id_var", "response_var", "sample_size_var",
        "na_action", "standardize", "spacing", "pad",
        // fit
        "prep", "out", "family", "link", "field", "iid", "iterations", "priors",
        // predict
        "fit", "newdata", "predict_iid", "n_draws", "ci", "mean_only",
        // mcmc / compare
        "chains", "warmup", "init_scale", "auto_double", "rhat_target", "max_doublings",
        "chains_dir",
        // simulate
        "simulate",
    };
    return keys;
}

const std::set<std::string>& priors_schema() {
    static const std::set<std::string> keys = {
        "mean_intercept", "sd_intercept", "mean_slope", "sd_slope",
        "rho_min", "rho_prob", "sigma_max", "sigma_prob",
        "iid_sd_max", "iid_sd_prob", "gaussian_tau_shape", "gaussian_tau_rate",
    };
    return keys;
}

const std::set<std::string>& simulate_schema() {
    static const std::set<std::string> keys = {
        "grid_ncols", "grid_nrows", "cellsize", "n_polygons", "n_covariates",
        "true_beta0", "true_beta", "true_sigma", "true_rho", "true_sigma_u",
        "family", "link", "aggregation_mode", "lognormal_mu", "lognormal_sigma",
        "gaussian_obs_sigma", "binomial_sample_size", "seed",
    };
    return keys;
}

void check_keys(const json& j, const std::set<std::string>& schema, const std::string& where) {
    if (!j.is_object()) throw UsageError(where + " must be a JSON object");
    for (const auto& item : j.items())
        if (!schema.count(item.key()))
            throw UsageError("unknown config key '" + item.key() + "' in " + where);
}

json load_config(const std::string& path) {
    if (path.empty()) return json::object();
    std::ifstream in(path, std::ios::binary);
    if (!in) throw DataError("cannot open config file " + path);
    json j;
    try {
        j = json::parse(in);
    } catch (const json::parse_error& e) {
        throw DataError(path + ": invalid JSON: " + e.what());
    }
    check_keys(j, config_schema(), path);
    if (j.contains("priors")) check_keys(j.at("priors"), priors_schema(), path + " priors");
    if (j.contains("simulate"))
        check_keys(j.at("simulate"), simulate_schema(), path + " simulate");
    return j;
}

// Pull a config value into `target` unless the flag was passed explicitly.
template <typename T>
void merge(const CLI::App& cmd, const std::string& flag, const json& cfg, const std::string& key,
           T& target) {
    if (cmd.count(flag) > 0) return;  // command line wins
    if (!cfg.contains(key)) return;
    try {
        target = cfg.at(key).get<T>();
    } catch (const json::type_error&) {
        throw UsageError("config key '" + key + "' has the wrong type");
    }
}

struct CommonArgs {
    std::string config;
    unsigned long long seed = 0;
    int ncores = 1;
};

void add_common(CLI::App* cmd, CommonArgs& args) {
    cmd->add_option("--config", args.config, "JSON config file; flags override its values");
    cmd->add_option("--seed", args.seed, "RNG seed");
    cmd->add_option("--ncores", args.ncores, "worker threads (results do not depend on this)");
}

void merge_common(const CLI::App& cmd, const json& cfg, CommonArgs& args) {
    merge(cmd, "--seed", cfg, "seed", args.seed);
    merge(cmd, "--ncores", cfg, "ncores", args.ncores);
    if (args.ncores < 1) throw UsageError("--ncores must be at least 1");
}

PriorSpec priors_from(const json& cfg) {
    PriorSpec p;
    if (!cfg.contains("priors")) return p;
    const json& j = cfg.at("priors");
    auto get = [&](const char* key, double& target) {
        if (j.contains(key)) target = j.at(key).get<double>();
    };
    get("mean_intercept", p.mean_intercept);
    get("sd_intercept", p.sd_intercept);
    get("mean_slope", p.mean_slope);
    get("sd_slope", p.sd_slope);
    get("rho_min", p.rho_min);
    get("rho_prob", p.rho_prob);
    get("sigma_max", p.sigma_max);
    get("sigma_prob", p.sigma_prob);
    get("iid_sd_max", p.iid_sd_max);
    get("iid_sd_prob", p.iid_sd_prob);
    get("gaussian_tau_shape", p.gaussian_tau_shape);
    get("gaussian_tau_rate", p.gaussian_tau_rate);
    return p;
}

// ---- prepare ----------------------------------------------------------

struct PrepareArgs {
    CommonArgs common;
    std::string shapes, covariates, aggregation;
    std::string id_var = "ID", response_var, sample_size_var;
    bool na_action = false, standardize = false;
    double spacing = 0.0;
    long pad = 5;
    std::string out;
};

int run_prepare(const CLI::App& cmd, PrepareArgs& a) {
    json cfg = load_config(a.common.config);
    merge_common(cmd, cfg, a.common);
    merge(cmd, "--shapes", cfg, "shapes", a.shapes);
    merge(cmd, "--covariates", cfg, "covariates", a.covariates);
    merge(cmd, "--aggregation", cfg, "aggregation", a.aggregation);
    merge(cmd, "--id-var", cfg, "id_var", a.id_var);
    merge(cmd, "--response-var", cfg, "response_var", a.response_var);
    merge(cmd, "--sample-size-var", cfg, "sample_size_var", a.sample_size_var);
    merge(cmd, "--na-action", cfg, "na_action", a.na_action);
    merge(cmd, "--standardize", cfg, "standardize", a.standardize);
    merge(cmd, "--spacing", cfg, "spacing", a.spacing);
    merge(cmd, "--pad", cfg, "pad", a.pad);
    merge(cmd, "--out", cfg, "out", a.out);
    if (a.shapes.empty()) throw UsageError("--shapes is required");
    if (a.covariates.empty()) throw UsageError("--covariates is required");
    if (a.response_var.empty()) throw UsageError("--response-var is required");
    if (a.out.empty()) throw UsageError("--out is required");

    std::optional<std::string> ssv;
    if (!a.sample_size_var.empty()) ssv = a.sample_size_var;
    PolygonSet polys = geoio::read_polygons(a.shapes, a.id_var, a.response_var, ssv);
    CovariateStack stack = geoio::load_covariate_dir(a.covariates);
    std::optional<Grid> agg;
    if (!a.aggregation.empty()) {
        agg = geoio::read_ascii_grid(a.aggregation);
        if (auto field = alignment_mismatch(stack.grids[0], *agg))
            throw DataError("aggregation raster is misaligned with the covariates (" + *field +
                            ")");
    }

    PrepareOptions opts;
    opts.na_action = a.na_action;
    opts.standardize = a.standardize;
    opts.spacing = a.spacing;
    opts.pad_nodes = a.pad;
    opts.ncores = a.common.ncores;
    PreparedData prep = prepare(polys, stack, agg, opts);
    save_prepared(prep, a.out);
    std::cout << prepare_ops::summarize(prep);
    return 0;
}

// ---- fit ---------------------------------------------------------------

struct FitArgs {
    CommonArgs common;
    std::string prep, out;
    std::string family = "poisson", link;
    bool field = true, iid = true;
    long iterations = 100;
    bool verbose = false;
};

int run_fit(const CLI::App& cmd, FitArgs& a) {
    json cfg = load_config(a.common.config);
    merge_common(cmd, cfg, a.common);
    merge(cmd, "--prep", cfg, "prep", a.prep);
    merge(cmd, "--out", cfg, "out", a.out);
    merge(cmd, "--family", cfg, "family", a.family);
    merge(cmd, "--link", cfg, "link", a.link);
    merge(cmd, "--field", cfg, "field", a.field);
    merge(cmd, "--iid", cfg, "iid", a.iid);
    merge(cmd, "--iterations", cfg, "iterations", a.iterations);
    merge(cmd, "--verbose", cfg, "verbose", a.verbose);
    if (a.prep.empty()) throw UsageError("--prep is required");
    if (a.out.empty()) throw UsageError("--out is required");

    ModelSpec spec;
    spec.family = family_from_string(a.family);
    spec.link = a.link.empty() ? default_link(spec.family) : link_from_string(a.link);
    spec.use_field = a.field;
    spec.use_iid = a.iid;
    spec.max_iterations = a.iterations;
    spec.priors = priors_from(cfg);

    PreparedData prep = load_prepared(a.prep);
    FitResult fit = fit_model(prep, spec, a.common.ncores, a.verbose ? &std::cerr : nullptr);
    save_fit(fit, a.out);
    std::cout << full_summary(fit, prep);
    return 0;
}

// ---- predict -----------------------------------------------------------

struct PredictArgs {
    CommonArgs common;
    std::string prep, fit, out, newdata;
    bool predict_iid = false, mean_only = false;
    long n_draws = 100;
    double ci = 0.95;
};

int run_predict(const CLI::App& cmd, PredictArgs& a) {
    json cfg = load_config(a.common.config);
    merge_common(cmd, cfg, a.common);
    merge(cmd, "--prep", cfg, "prep", a.prep);
    merge(cmd, "--fit", cfg, "fit", a.fit);
    merge(cmd, "--out", cfg, "out", a.out);
    merge(cmd, "--newdata", cfg, "newdata", a.newdata);
    merge(cmd, "--predict-iid", cfg, "predict_iid", a.predict_iid);
    merge(cmd, "--mean-only", cfg, "mean_only", a.mean_only);
    merge(cmd, "--n-draws", cfg, "n_draws", a.n_draws);
    merge(cmd, "--ci", cfg, "ci", a.ci);
    if (a.prep.empty()) throw UsageError("--prep is required");
    if (a.fit.empty()) throw UsageError("--fit is required");
    if (a.out.empty()) throw UsageError("--out is required");

    PreparedData prep = load_prepared(a.prep);
    FitResult fit = load_fit(a.fit);
    std::optional<CovariateStack> newdata;
    if (!a.newdata.empty()) newdata = geoio::load_covariate_dir(a.newdata);

    PredictionSet pred =
        a.mean_only
            ? predict_mean(fit, prep, newdata, a.predict_iid)
            : predict_uncertainty(fit, prep, newdata, a.predict_iid, a.n_draws, a.ci,
                                  a.common.seed, a.common.ncores);
    for (const auto& w : pred.warnings) std::cerr << "WARNING: " << w << "\n";
    save_prediction(pred, a.out);
    MetricsReport metrics = in_sample_metrics(fit, prep);
    save_metrics(metrics, std::filesystem::path(a.out) / "metrics.json");
    std::cout << metrics_text(metrics);
    return 0;
}

// ---- simulate ----------------------------------------------------------

struct SimulateArgs {
    CommonArgs common;
    std::string out;
    SimulationConfig sim;
    std::string family = "poisson", link, aggregation_mode = "uniform";
};

int run_simulate(const CLI::App& cmd, SimulateArgs& a) {
    json cfg = load_config(a.common.config);
    merge_common(cmd, cfg, a.common);
    merge(cmd, "--out", cfg, "out", a.out);
    if (a.out.empty()) throw UsageError("--out is required");

    json sim_cfg = cfg.contains("simulate") ? cfg.at("simulate") : json::object();
    merge(cmd, "--grid-ncols", sim_cfg, "grid_ncols", a.sim.grid_ncols);
    merge(cmd, "--grid-nrows", sim_cfg, "grid_nrows", a.sim.grid_nrows);
    merge(cmd, "--cellsize", sim_cfg, "cellsize", a.sim.cellsize);
    merge(cmd, "--n-polygons", sim_cfg, "n_polygons", a.sim.n_polygons);
    merge(cmd, "--n-covariates", sim_cfg, "n_covariates", a.sim.n_covariates);
    merge(cmd, "--beta0", sim_cfg, "true_beta0", a.sim.true_beta0);
    merge(cmd, "--beta", sim_cfg, "true_beta", a.sim.true_beta);
    merge(cmd, "--sigma", sim_cfg, "true_sigma", a.sim.true_sigma);
    merge(cmd, "--rho", sim_cfg, "true_rho", a.sim.true_rho);
    merge(cmd, "--sigma-u", sim_cfg, "true_sigma_u", a.sim.true_sigma_u);
    merge(cmd, "--family", sim_cfg, "family", a.family);
    merge(cmd, "--link", sim_cfg, "link", a.link);
    merge(cmd, "--aggregation-mode", sim_cfg, "aggregation_mode", a.aggregation_mode);
    merge(cmd, "--lognormal-mu", sim_cfg, "lognormal_mu", a.sim.lognormal_mu);
    merge(cmd, "--lognormal-sigma", sim_cfg, "lognormal_sigma", a.sim.lognormal_sigma);
    merge(cmd, "--gaussian-obs-sigma", sim_cfg, "gaussian_obs_sigma", a.sim.gaussian_obs_sigma);
    merge(cmd, "--binomial-sample-size", sim_cfg, "binomial_sample_size",
          a.sim.binomial_sample_size);
    if (cmd.count("--seed") == 0 && sim_cfg.contains("seed"))
        a.common.seed = sim_cfg.at("seed").get<unsigned long long>();

    a.sim.family = family_from_string(a.family);
    a.sim.link = a.link.empty() ? default_link(a.sim.family) : link_from_string(a.link);
    a.sim.aggregation_mode = aggregation_mode_from_string(a.aggregation_mode);
    a.sim.seed = a.common.seed;

    SimulatedData sim = simulate_dataset(a.sim);
    save_simulation(sim, a.out);
    std::cout << "simulated " << sim.polygons.size() << " polygons over " << a.sim.grid_nrows
              << "x" << a.sim.grid_ncols << " pixels (" << to_string(a.sim.family) << ", "
              << to_string(a.sim.link) << " link)\n";
    return 0;
}

// ---- mcmc --------------------------------------------------------------

struct McmcArgs {
    CommonArgs common;
    std::string prep, fit, out;
    long chains = 4, iterations = 1000, warmup = -1;
    double init_scale = 0.1, rhat_target = 1.05;
    bool auto_double = false;
    int max_doublings = 6;
};

int run_mcmc(const CLI::App& cmd, McmcArgs& a) {
    json cfg = load_config(a.common.config);
    merge_common(cmd, cfg, a.common);
    merge(cmd, "--prep", cfg, "prep", a.prep);
    merge(cmd, "--fit", cfg, "fit", a.fit);
    merge(cmd, "--out", cfg, "out", a.out);
    merge(cmd, "--chains", cfg, "chains", a.chains);
    merge(cmd, "--iterations", cfg, "iterations", a.iterations);
    merge(cmd, "--warmup", cfg, "warmup", a.warmup);
    merge(cmd, "--init-scale", cfg, "init_scale", a.init_scale);
    merge(cmd, "--auto-double", cfg, "auto_double", a.auto_double);
    merge(cmd, "--rhat-target", cfg, "rhat_target", a.rhat_target);
    merge(cmd, "--max-doublings", cfg, "max_doublings", a.max_doublings);
    if (a.prep.empty()) throw UsageError("--prep is required");
    if (a.fit.empty()) throw UsageError("--fit is required");
    if (a.out.empty()) throw UsageError("--out is required");

    PreparedData prep = load_prepared(a.prep);
    FitResult fit = load_fit(a.fit);

    RwmOptions opts;
    opts.n_chains = a.chains;
    opts.seed = a.common.seed;
    opts.init_scale = a.init_scale;
    opts.ncores = a.common.ncores;

    ChainSet chains;
    Diagnostics diag;
    if (a.auto_double) {
        AutoRunResult res =
            run_until_converged(prep, fit, opts, a.rhat_target, a.iterations, a.max_doublings);
        chains = std::move(res.chains);
        diag = std::move(res.diagnostics);
        std::cout << "schedule:";
        for (long n : res.schedule) std::cout << " " << n;
        std::cout << (res.converged ? " (converged)" : " (not converged)") << "\n";
        if (!res.converged)
            std::cerr << "WARNING: rhat target " << a.rhat_target
                      << " not reached; inspect diagnostics.json\n";
    } else {
        opts.n_iterations = a.iterations;
        opts.n_warmup = a.warmup >= 0 ? a.warmup : a.iterations / 4;
        chains = run_chains(prep, fit, opts);
        diag = diagnose(chains);
    }
    save_chains(chains, a.out);
    save_diagnostics(diag, chains, std::filesystem::path(a.out) / "diagnostics.json");

    double worst = 0.0;
    for (double r : diag.rhat)
        if (!std::isnan(r)) worst = std::max(worst, r);
    std::cout << chains.n_chains << " chains x " << chains.n_iterations << " iterations ("
              << chains.n_warmup << " warmup), max rhat " << fmt_double(worst) << "\n";
    return 0;
}

// ---- compare -----------------------------------------------------------

struct CompareArgs {
    CommonArgs common;
    std::string fit, chains_dir, out;
};

int run_compare(const CLI::App& cmd, CompareArgs& a) {
    json cfg = load_config(a.common.config);
    merge_common(cmd, cfg, a.common);
    merge(cmd, "--fit", cfg, "fit", a.fit);
    merge(cmd, "--chains", cfg, "chains_dir", a.chains_dir);
    merge(cmd, "--out", cfg, "out", a.out);
    if (a.fit.empty()) throw UsageError("--fit is required");
    if (a.chains_dir.empty()) throw UsageError("--chains is required");
    if (a.out.empty()) throw UsageError("--out is required");

    FitResult fit = load_fit(a.fit);
    ChainSet chains = load_chains(a.chains_dir);
    std::vector<CompareRow> rows = compare(fit, chains);
    std::filesystem::create_directories(a.out);
    {
        std::ofstream out(std::filesystem::path(a.out) / "comparison.csv", std::ios::binary);
        if (!out) throw DataError("cannot write comparison.csv");
        out << comparison_csv(rows);
    }
    std::cout << comparison_text(rows);
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"disaggregation regression: polygon responses to pixel rate rasters"};
    app.require_subcommand(1);

    PrepareArgs pa;
    CLI::App* prep_cmd = app.add_subcommand(
        "prepare", "extract pixel data for polygons and build the field lattice");
    add_common(prep_cmd, pa.common);
    prep_cmd->add_option("--shapes", pa.shapes, "GeoJSON feature collection of polygons");
    prep_cmd->add_option("--covariates", pa.covariates, "directory of covariate .asc grids");
    prep_cmd->add_option("--aggregation", pa.aggregation,
                         "aggregation-weight raster (default: uniform 1)");
    prep_cmd->add_option("--id-var", pa.id_var, "polygon id property (default ID)");
    prep_cmd->add_option("--response-var", pa.response_var, "response property");
    prep_cmd->add_option("--sample-size-var", pa.sample_size_var,
                         "sample-size property (binomial models)");
    prep_cmd->add_flag("--na-action", pa.na_action,
                       "drop NA-response polygons, impute covariate NAs, zero NA weights");
    prep_cmd->add_flag("--standardize", pa.standardize, "standardize covariate columns");
    prep_cmd->add_option("--spacing", pa.spacing,
                         "lattice node spacing (default: 4x the pixel size)");
    prep_cmd->add_option("--pad", pa.pad, "lattice padding in nodes (default 5)");
    prep_cmd->add_option("--out", pa.out, "output directory");

    FitArgs fa;
    CLI::App* fit_cmd = app.add_subcommand("fit", "fit the model by nested optimization");
    add_common(fit_cmd, fa.common);
    fit_cmd->add_option("--prep", fa.prep, "prepared-data directory");
    fit_cmd->add_option("--out", fa.out, "output directory");
    fit_cmd->add_option("--family", fa.family, "poisson | gaussian | binomial");
    fit_cmd->add_option("--link", fa.link, "log | logit | identity (default per family)");
    fit_cmd->add_flag("--field,!--no-field", fa.field, "include the spatial field (default on)");
    fit_cmd->add_flag("--iid,!--no-iid", fa.iid, "include polygon iid effects (default on)");
    fit_cmd->add_option("--iterations", fa.iterations, "outer iteration cap (default 100)");
    fit_cmd->add_flag("--verbose", fa.verbose, "stream outer-iteration progress to stderr");

    PredictArgs pra;
    CLI::App* pred_cmd =
        app.add_subcommand("predict", "rate/component rasters, draws and credible intervals");
    add_common(pred_cmd, pra.common);
    pred_cmd->add_option("--prep", pra.prep, "prepared-data directory");
    pred_cmd->add_option("--fit", pra.fit, "fit directory");
    pred_cmd->add_option("--out", pra.out, "output directory");
    pred_cmd->add_option("--newdata", pra.newdata, "covariate directory for a new extent");
    pred_cmd->add_flag("--predict-iid", pra.predict_iid, "add iid effects inside training polygons");
    pred_cmd->add_flag("--mean-only", pra.mean_only, "skip posterior draws and CI rasters");
    pred_cmd->add_option("--n-draws", pra.n_draws, "posterior draws (default 100)");
    pred_cmd->add_option("--ci", pra.ci, "credible-interval mass (default 0.95)");

    SimulateArgs sa;
    CLI::App* sim_cmd = app.add_subcommand("simulate", "generate a synthetic dataset with truth");
    add_common(sim_cmd, sa.common);
    sim_cmd->add_option("--out", sa.out, "output directory");
    sim_cmd->add_option("--grid-ncols", sa.sim.grid_ncols, "raster width (default 40)");
    sim_cmd->add_option("--grid-nrows", sa.sim.grid_nrows, "raster height (default 40)");
    sim_cmd->add_option("--cellsize", sa.sim.cellsize, "pixel size (default 1)");
    sim_cmd->add_option("--n-polygons", sa.sim.n_polygons, "polygon count (default 20)");
    sim_cmd->add_option("--n-covariates", sa.sim.n_covariates, "covariate count (default 2)");
    sim_cmd->add_option("--beta0", sa.sim.true_beta0, "true intercept (default -2)");
    sim_cmd->add_option("--beta", sa.sim.true_beta, "true slopes (default alternating +/-0.4)");
    sim_cmd->add_option("--sigma", sa.sim.true_sigma, "true field sd (default 1)");
    sim_cmd->add_option("--rho", sa.sim.true_rho, "true field range (default 8)");
    sim_cmd->add_option("--sigma-u", sa.sim.true_sigma_u, "true iid sd (default 0.05)");
    sim_cmd->add_option("--family", sa.family, "poisson | gaussian | binomial");
    sim_cmd->add_option("--link", sa.link, "log | logit | identity (default per family)");
    sim_cmd->add_option("--aggregation-mode", sa.aggregation_mode, "uniform | lognormal");
    sim_cmd->add_option("--lognormal-mu", sa.sim.lognormal_mu, "lognormal weight mu");
    sim_cmd->add_option("--lognormal-sigma", sa.sim.lognormal_sigma, "lognormal weight sigma");
    sim_cmd->add_option("--gaussian-obs-sigma", sa.sim.gaussian_obs_sigma,
                        "observation sd scale (gaussian family)");
    sim_cmd->add_option("--binomial-sample-size", sa.sim.binomial_sample_size,
                        "trials per polygon (binomial family)");

    McmcArgs ma;
    CLI::App* mcmc_cmd =
        app.add_subcommand("mcmc", "sample the exact joint posterior for validation");
    add_common(mcmc_cmd, ma.common);
    mcmc_cmd->add_option("--prep", ma.prep, "prepared-data directory");
    mcmc_cmd->add_option("--fit", ma.fit, "fit directory");
    mcmc_cmd->add_option("--out", ma.out, "output directory");
    mcmc_cmd->add_option("--chains", ma.chains, "chain count (default 4)");
    mcmc_cmd->add_option("--iterations", ma.iterations,
                         "iterations per chain, warmup included (default 1000)");
    mcmc_cmd->add_option("--warmup", ma.warmup, "warmup iterations (default: iterations/4)");
    mcmc_cmd->add_option("--init-scale", ma.init_scale,
                         "initial jitter / proposal sd (default 0.1)");
    mcmc_cmd->add_flag("--auto-double", ma.auto_double,
                       "double iterations until every rhat beats the target");
    mcmc_cmd->add_option("--rhat-target", ma.rhat_target, "rhat threshold (default 1.05)");
    mcmc_cmd->add_option("--max-doublings", ma.max_doublings, "doubling budget (default 6)");

    CompareArgs ca;
    CLI::App* cmp_cmd =
        app.add_subcommand("compare", "optimizer posterior vs MCMC, per hyperparameter");
    add_common(cmp_cmd, ca.common);
    cmp_cmd->add_option("--fit", ca.fit, "fit directory");
    cmp_cmd->add_option("--chains", ca.chains_dir, "chains directory");
    cmp_cmd->add_option("--out", ca.out, "output directory for comparison.csv");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        return app.exit(e) == 0 ? 0 : 1;
    }

    try {
        if (prep_cmd->parsed()) return run_prepare(*prep_cmd, pa);
        if (fit_cmd->parsed()) return run_fit(*fit_cmd, fa);
        if (pred_cmd->parsed()) return run_predict(*pred_cmd, pra);
        if (sim_cmd->parsed()) return run_simulate(*sim_cmd, sa);
        if (mcmc_cmd->parsed()) return run_mcmc(*mcmc_cmd, ma);
        if (cmp_cmd->parsed()) return run_compare(*cmp_cmd, ca);
    } catch (const UsageError& e) {
        std::cerr << "usage error: " << e.what() << "\n";
        return 1;
    } catch (const DataError& e) {
        std::cerr << "data error: " << e.what() << "\n";
        return 2;
    } catch (const NumericError& e) {
        std::cerr << "numeric error: " << e.what() << "\n";
        return 3;
    } catch (const std::exception& e) {
        std::cerr << "internal error: " << e.what() << "\n";
        return 3;
    }
    return 0;
}
