#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "disagg/laplace.hpp"

namespace disagg {

// Rate and component rasters on the link scale (components) / response scale
// (rate and draws). All grids share one header; the iid component is present
// only when it was requested, and draws/ci_* only after predict_uncertainty.
struct PredictionSet {
    Grid rate;
    Grid field_component;
    std::optional<Grid> iid_component;
    Grid covariate_component;
    std::vector<Grid> draws;
    Grid ci_lower, ci_upper;
    std::vector<std::string> warnings;

    bool has_draws() const { return !draws.empty(); }
};

struct MetricsReport {
    double rmse = 0.0;
    double mae = 0.0;
    double pearson = 0.0;
    double spearman = 0.0;
    double log_pearson = 0.0;  // pearson on log(rate + 1e-8)
};

// Mean-surface rasters at the fitted parameters. Prediction runs over the
// training covariate stack, or over `newdata` (same covariate names,
// transformed with the stored standardization). A cell is nodata when any
// covariate is nodata there. The field extrapolates off the lattice hull by
// clamping; the iid effect applies only where the cell center falls in a
// training pixel's cell and contributes 0 elsewhere.
PredictionSet predict_mean(const FitResult& fit, const PreparedData& prep,
                           const std::optional<CovariateStack>& newdata = std::nullopt,
                           bool predict_iid = false);

// Mean surface plus n_draws posterior rate rasters and cellwise equal-tailed
// credible-interval rasters. Per draw: theta ~ N(theta_hat, theta_cov) via
// Cholesky (eigenvalue-floored with a warning when not positive definite),
// the latent conditional is re-optimized warm-started at the fitted mode, and
// the latent vector is drawn from N(mode, H^{-1}) by sparse back-substitution.
// Draws use per-index RNG substreams, so results are byte-identical for any
// ncores.
PredictionSet predict_uncertainty(const FitResult& fit, const PreparedData& prep,
                                  const std::optional<CovariateStack>& newdata = std::nullopt,
                                  bool predict_iid = false, long n_draws = 100, double ci = 0.95,
                                  uint64_t seed = 0, int ncores = 1);

// Observed polygon rate y_i / sum_j a_ij against the fitted-rate aggregation
// over the same pixels. Correlations are NaN (JSON null) when either side has
// zero variance.
MetricsReport in_sample_metrics(const FitResult& fit, const PreparedData& prep);

// The raw metric formulas behind in_sample_metrics. rmse/mae over pairs,
// Pearson on values, Spearman as Pearson on average ranks, log-Pearson on
// log(value + 1e-8).
MetricsReport compute_metrics(const std::vector<double>& observed,
                              const std::vector<double>& predicted);

std::string metrics_text(const MetricsReport& m);

// Parameter table plus in-sample performance block.
std::string full_summary(const FitResult& fit, const PreparedData& prep);

// rate.asc, field.asc, covariates.asc (+ iid.asc, ci_lower.asc, ci_upper.asc,
// draws/draw_0000.asc ... when present).
void save_prediction(const PredictionSet& pred, const std::filesystem::path& dir);

void save_metrics(const MetricsReport& m, const std::filesystem::path& file);
MetricsReport load_metrics(const std::filesystem::path& file);

}  // namespace disagg
