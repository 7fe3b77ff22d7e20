#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "disagg/model.hpp"

namespace disagg {

enum class AggregationMode { uniform, lognormal };

AggregationMode aggregation_mode_from_string(const std::string& s);
std::string to_string(AggregationMode m);

struct SimulationConfig {
    long grid_ncols = 40;
    long grid_nrows = 40;
    double cellsize = 1.0;
    long n_polygons = 20;
    long n_covariates = 2;
    double true_beta0 = -2.0;
    std::vector<double> true_beta;  // empty: filled with alternating +/-0.4
    double true_sigma = 1.0;
    double true_rho = 8.0;
    double true_sigma_u = 0.05;
    Family family = Family::poisson;
    Link link = Link::log_link;
    AggregationMode aggregation_mode = AggregationMode::uniform;
    double lognormal_mu = 0.0;
    double lognormal_sigma = 0.5;
    double gaussian_obs_sigma = 0.1;  // observation sd scale, Gaussian family
    long binomial_sample_size = 100;  // trials per polygon, binomial family
    uint64_t seed = 0;
};

// Everything the pipeline needs on disk plus the generating state, kept so
// responses can be redrawn at the same latent state.
struct SimulatedData {
    SimulationConfig cfg;  // validated, true_beta filled
    PolygonSet polygons;   // responses hold the simulated y
    CovariateStack covariates;
    Grid aggregation;
    Grid true_field;  // field value at every pixel center
    std::vector<double> true_u;
    std::vector<double> true_cases;         // per polygon
    std::vector<double> true_polygon_rate;  // per polygon
    std::vector<double> obs_sigma;          // per polygon, Gaussian family only
};

// Forward model: smoothed standardized Gaussian covariates, an exact GMRF
// field draw on a lattice at twice the pixel spacing, iid polygon effects,
// and a seeded Voronoi partition of the pixel centers snapped to cell
// boundaries. Fully deterministic given cfg.seed.
SimulatedData simulate_dataset(const SimulationConfig& cfg);

// Redraw y at the stored latent state (cases / rates / dispersions).
// simulate_dataset uses draw_responses(sim, cfg.seed) internally, so the same
// seed reproduces the dataset's responses.
std::vector<double> draw_responses(const SimulatedData& sim, uint64_t seed);

// shapes.geojson + covariates/*.asc + aggregation.asc + true_field.asc
// + truth.json.
void save_simulation(const SimulatedData& sim, const std::filesystem::path& dir);

}  // namespace disagg
