#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <string>
#include <vector>

#include "disagg/laplace.hpp"

namespace disagg {

// Adaptive random-walk Metropolis over the full parameter vector (theta and
// latent jointly) targeting the exact joint posterior. During warmup the
// proposal covariance is re-estimated from the chain history (scaling
// 2.38^2/d) and a global step multiplier chases the target acceptance rate;
// both freeze at the warmup boundary, so kept draws use a fixed kernel.
struct RwmOptions {
    long n_chains = 4;
    long n_iterations = 1000;
    long n_warmup = 250;
    uint64_t seed = 0;
    double init_scale = 0.1;   // initial-state jitter and initial proposal sd
    long refresh_every = 25;   // proposal refresh cadence during warmup
    long adapt_start = 100;    // first iteration eligible for a refresh
    double target_acceptance = 0.234;  // random-walk optimum in high dimension
    int ncores = 1;
};

struct ChainSet {
    long n_chains = 0;
    long n_iterations = 0;  // total, warmup included
    long n_warmup = 0;
    uint64_t seed = 0;
    std::vector<std::string> param_names;
    std::vector<Eigen::MatrixXd> samples;  // per chain: n_iterations x n_params
    std::vector<double> acceptance_rates;  // per chain, over all iterations
    std::vector<std::vector<long>> adaptation_events;  // refresh iterations, per chain
    std::string fit_provenance;  // empty for harness targets
    std::string prep_provenance;

    long n_params() const { return static_cast<long>(param_names.size()); }
    long n_kept() const { return n_iterations - n_warmup; }
};

struct Diagnostics {
    std::vector<std::string> param_names;
    std::vector<double> rhat;  // NaN when a parameter is constant across draws
    std::vector<double> ess;
};

// Per-chain target factory so chains can run in parallel with stateful
// (cached) evaluators; chain c uses RNG substream (seed, c).
using TargetFactory = std::function<std::function<double(const Vec&)>(long chain)>;

// Generic engine; `center` seeds the jittered initial states. When
// `proposal_cov` is given it seeds the proposal covariance (and scales the
// state jitter), otherwise the proposal starts at init_scale * I. Throws a
// numeric error when a chain's warmup acceptance falls below 0.1% (proposal
// scale too large) or no finite starting point is found.
ChainSet sample_rwm(const TargetFactory& target, const Vec& center,
                    const std::vector<std::string>& param_names, const RwmOptions& opts,
                    const Eigen::MatrixXd* proposal_cov = nullptr);

// Joint posterior chains for a fitted model, initialized by jittering around
// the Laplace mode; the Laplace posterior covariance (theta block and latent
// conditional block) seeds the proposal, which adaptation then refines.
// Parameter order: theta, then iid values, then field nodes.
ChainSet run_chains(const PreparedData& prep, const FitResult& fit, const RwmOptions& opts);

// Split-chain potential scale reduction and initial-positive-sequence ESS.
// Needs >= 2 chains and >= 4 kept draws.
Diagnostics diagnose(const ChainSet& chains);

bool all_converged(const Diagnostics& diag, double rhat_target);

struct AutoRunResult {
    ChainSet chains;
    Diagnostics diagnostics;
    bool converged = false;
    std::vector<long> schedule;  // iteration counts attempted
};

// Doubling schedule: run with start_iterations (warmup = a quarter of that),
// double until every split-chain rhat drops below rhat_target or the attempt
// budget is exhausted.
AutoRunResult run_until_converged(const PreparedData& prep, const FitResult& fit, RwmOptions opts,
                                  double rhat_target = 1.05, long start_iterations = 1000,
                                  int max_doublings = 6);

// Hyperparameter comparison: Laplace mean/SD against the MCMC posterior, with
// |mean difference| / MCMC SD.
struct CompareRow {
    std::string name;
    double laplace_mean = 0.0, laplace_sd = 0.0;
    double mcmc_mean = 0.0, mcmc_sd = 0.0;
    double ratio = 0.0;
};

std::vector<CompareRow> compare(const FitResult& fit, const ChainSet& chains);
std::string comparison_csv(const std::vector<CompareRow>& rows);
std::string comparison_text(const std::vector<CompareRow>& rows);

// Directory layout: chains.csv (chain, iteration, one column per parameter)
// + chains.json (dimensions, seed, acceptance, adaptation log, provenance).
void save_chains(const ChainSet& chains, const std::filesystem::path& dir);
ChainSet load_chains(const std::filesystem::path& dir);

void save_diagnostics(const Diagnostics& diag, const ChainSet& chains,
                      const std::filesystem::path& file);

}  // namespace disagg
