#pragma once

#include <optional>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include <Eigen/Sparse>

#include "disagg/prepare.hpp"
#include "disagg/spde.hpp"

namespace disagg {

using Vec = Eigen::VectorXd;

enum class Family { poisson, gaussian, binomial };
enum class Link { log_link, logit_link, identity_link };

Family family_from_string(const std::string& s);
Link link_from_string(const std::string& s);
std::string to_string(Family f);
std::string to_string(Link l);
Link default_link(Family f);

struct PriorSpec {
    double mean_intercept = 0.0, sd_intercept = 2.0;
    double mean_slope = 0.0, sd_slope = 0.4;
    // P(rho < rho_min) = rho_prob, P(sigma > sigma_max) = sigma_prob.
    // rho_min = 0 means "resolve to 0.1 x lattice hull diagonal at fit time".
    double rho_min = 0.0, rho_prob = 0.01;
    double sigma_max = 1.0, sigma_prob = 0.01;
    // PC exponential on the iid effect sd: P(sigma_u > iid_sd_max) = iid_sd_prob.
    double iid_sd_max = 0.1, iid_sd_prob = 0.01;
    // log tau_obs ~ log-gamma(shape, rate), Gaussian family only.
    double gaussian_tau_shape = 1.0, gaussian_tau_rate = 5e-5;
};

struct ModelSpec {
    Family family = Family::poisson;
    Link link = Link::log_link;
    bool use_field = true;
    bool use_iid = true;
    long max_iterations = 100;
    PriorSpec priors;
};

// theta = [intercept, slopes..., iideffect_log_tau?, log_sigma?, log_rho?,
// log_tau_obs?]; latent = [u (N)?, w (n_nodes)?].
struct ParamLayout {
    long n_cov = 0;
    bool use_field = false, use_iid = false, gaussian = false;
    long n_iid = 0, n_nodes = 0;
    std::vector<std::string> covariate_names;

    long i_intercept() const { return 0; }
    long i_slope(long k) const { return 1 + k; }
    long i_iid_log_tau() const { return use_iid ? 1 + n_cov : -1; }
    long i_log_sigma() const { return use_field ? 1 + n_cov + (use_iid ? 1 : 0) : -1; }
    long i_log_rho() const { return use_field ? i_log_sigma() + 1 : -1; }
    long i_log_tau_obs() const {
        return gaussian ? 1 + n_cov + (use_iid ? 1 : 0) + (use_field ? 2 : 0) : -1;
    }
    long n_theta() const {
        return 1 + n_cov + (use_iid ? 1 : 0) + (use_field ? 2 : 0) + (gaussian ? 1 : 0);
    }
    long n_latent() const { return n_iid + n_nodes; }
    std::vector<std::string> theta_names() const;

    static ParamLayout create(const ModelSpec& spec, const PreparedData& prep);
};

struct Params {
    Vec theta;
    Vec latent;
};

struct Posterior {
    double value = 0.0;
    Vec grad_latent;
    SparseMat hessian_latent;
};

// Precomputed fit inputs (design matrix, projector, aggregation sums).
struct ModelContext {
    const PreparedData* prep = nullptr;
    ModelSpec spec;  // priors resolved
    ParamLayout layout;
    Eigen::MatrixXd X;  // n_pixels x n_cov
    SparseMat A;        // n_pixels x n_nodes when use_field
    Vec agg;
    Vec y;
    Vec sum_a, sum_a2;  // per polygon
    Vec sample_size;    // binomial only
    std::vector<long> poly_of_pixel;

    long n_pixels() const { return static_cast<long>(poly_of_pixel.size()); }
    long n_polygons() const { return sum_a.size(); }
};

// Validates data/spec compatibility and resolves data-dependent priors.
ModelContext make_context(const PreparedData& prep, const ModelSpec& spec);

Vec make_theta0(const ModelContext& ctx);

double link_inverse(Link link, double eta);
Vec apply_link_inverse(Link link, const Vec& eta);

Vec linear_predictor(const ModelContext& ctx, const Params& params);

// cases_i = sum_j a_ij rate_ij ; polygon_rate_i = cases_i / sum_j a_ij
// (rate 0 when the weights sum to zero).
void aggregate(const Vec& pixel_rate, const Vec& weights, const StartEndIndex& index, Vec& cases,
               Vec& polygon_rate);

// sigma_i = sigma_obs * sqrt(sum_j a_ij^2)
double gaussian_dispersion(double sigma_obs, const double* weights, size_t n);

// +infinity (never a throw) for arguments outside the likelihood's support.
double neg_log_likelihood(const ModelContext& ctx, const Params& params);
double neg_log_prior(const ModelContext& ctx, const Params& params);
// Hyperparameter part of the prior only (no latent-effect terms).
double neg_log_theta_prior(const ModelContext& ctx, const Vec& theta);
Posterior joint_neg_log_posterior(const ModelContext& ctx, const Params& params);

// Evaluator with a (log_sigma, log_rho) -> (Q, log det Q) cache; the latent
// Hessian is exact for log/identity links and Gauss-Newton (inverse-link
// curvature dropped) for logit, which keeps it positive semidefinite.
class PosteriorEval {
  public:
    explicit PosteriorEval(const ModelContext& ctx) : ctx_(&ctx) {}

    double value(const Vec& theta, const Vec& latent) {
        return eval(theta, latent, nullptr, nullptr);
    }
    double eval(const Vec& theta, const Vec& latent, Vec* grad, SparseMat* hess);

    const SparseMat& Q() const { return Q_; }

  private:
    // False when Q cannot be factorized in floating point at these
    // hyperparameters (it is positive definite in exact arithmetic); the
    // evaluation then reports an infinite NLL instead of throwing.
    bool refresh_field(double log_sigma, double log_rho);

    const ModelContext* ctx_;
    bool have_q_ = false;
    double cached_ls_ = 0.0, cached_lr_ = 0.0;
    SparseMat Q_;
    double logdetQ_ = 0.0;
};

}  // namespace disagg
