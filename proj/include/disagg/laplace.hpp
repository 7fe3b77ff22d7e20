#pragma once

#include <filesystem>
#include <memory>
#include <ostream>
#include <string>
#include <vector>

#include <Eigen/SparseCholesky>

#include "disagg/model.hpp"

namespace disagg {

// Inner problem: minimize the joint NLL over the latent vector at fixed
// theta. Newton with sparse LDLT, Armijo halving line search (c = 1e-4),
// and a Levenberg ridge ladder (1e-6 .. 1e-2 on the diagonal) when the
// Hessian factorization fails. Stops at latent gradient max-norm < 1e-8 or
// 100 iterations.
struct InnerResult {
    Vec mode;
    bool converged = false;
    bool failed = false;  // factorization breakdown / non-finite objective
    long iterations = 0;
    double value = 0.0;     // joint NLL at the mode
    double logdet_h = 0.0;  // log det of the latent Hessian at the mode
    std::shared_ptr<Eigen::SimplicialLDLT<SparseMat>> factor;  // null when no latent
};

InnerResult inner_optimize(PosteriorEval& eval, const ModelContext& ctx, const Vec& theta,
                           const Vec& start);

// L(theta) = inner NLL at mode + 0.5 log det H - (n_latent/2) log 2pi.
// Inner failure maps to +infinity (the outer optimizer rejects the point).
double laplace_objective(const ModelContext& ctx, const Vec& theta, const Vec& warm_start,
                         InnerResult* inner_out = nullptr);

struct FitConvergence {
    bool converged = false;
    long outer_iterations = 0;
    long inner_iterations = 0;
    double gradient_max = 0.0;
    double objective = 0.0;  // Laplace marginal NLL at theta_hat
};

struct FitResult {
    ModelSpec spec;  // priors resolved
    std::vector<std::string> covariate_names;
    std::vector<std::string> theta_names;
    Vec theta_hat;
    Eigen::MatrixXd theta_cov;
    Vec latent_mode;  // u then w
    long n_iid = 0;
    long n_nodes = 0;
    FitConvergence convergence;
    double nll_at_mode = 0.0;  // joint NLL at (theta_hat, latent mode)
    std::string prep_provenance;

    Vec theta_se() const;
};

// Outer BFGS over theta with central finite-difference gradients,
// h_k = 1e-4 (1 + |theta_k|); stops at gradient max-norm < 1e-5 or
// spec.max_iterations. theta_cov is the inverse of the symmetrized,
// eigenvalue-floored (1e-10) FD Hessian at the optimum. The inner warm start
// is updated only at accepted outer iterates, so finite-difference probes are
// order-independent and the fit is deterministic for any ncores.
FitResult fit_model(const PreparedData& prep, const ModelSpec& spec, int ncores = 1,
                    std::ostream* verbose = nullptr);

std::string summarize_fit(const FitResult& fit);

std::string fit_provenance(const FitResult& fit);

// Directory layout: fit.json + latent.bin (raw little-endian doubles, u then w).
void save_fit(const FitResult& fit, const std::filesystem::path& dir);
FitResult load_fit(const std::filesystem::path& dir);

}  // namespace disagg
