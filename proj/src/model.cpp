#include "disagg/model.hpp"

#include <cmath>
#include <limits>
#include <unordered_map>

#include <Eigen/SparseCholesky>

#include "disagg/errors.hpp"

namespace disagg {

namespace {

constexpr double kInf = std::numeric_limits<double>::infinity();
constexpr double kLog2Pi = 1.8378770664093454836;  // log(2*pi)

double normal_nll(double x, double mean, double sd) {
    double z = (x - mean) / sd;
    return 0.5 * kLog2Pi + std::log(sd) + 0.5 * z * z;
}

// Per-polygon negative log likelihood with first/second derivatives in
// `cases`. Invalid arguments yield +inf (the optimizers treat the point as
// rejected rather than throwing).
struct PolyNll {
    double value = 0.0;
    double d1 = 0.0;
    double d2 = 0.0;
};

PolyNll poisson_nll(double y, double cases) {
    PolyNll r;
    if (!std::isfinite(cases) || cases < 0.0) {
        r.value = kInf;
        return r;
    }
    if (cases == 0.0) {
        if (y == 0.0) {
            r.value = 0.0;
            r.d1 = 1.0;
            return r;
        }
        r.value = kInf;
        return r;
    }
    r.value = cases - y * std::log(cases) + std::lgamma(y + 1.0);
    r.d1 = 1.0 - y / cases;
    r.d2 = y / (cases * cases);
    return r;
}

PolyNll gaussian_nll(double y, double cases, double sigma_i) {
    PolyNll r;
    if (!std::isfinite(cases) || !(sigma_i > 0.0) || !std::isfinite(sigma_i)) {
        r.value = kInf;
        return r;
    }
    double z = (y - cases) / sigma_i;
    r.value = 0.5 * kLog2Pi + std::log(sigma_i) + 0.5 * z * z;
    r.d1 = (cases - y) / (sigma_i * sigma_i);
    r.d2 = 1.0 / (sigma_i * sigma_i);
    return r;
}

PolyNll binomial_nll(double y, double rate, double sum_a, double m) {
    PolyNll r;
    if (!std::isfinite(rate) || rate < 0.0 || rate > 1.0) {
        r.value = kInf;
        return r;
    }
    double ymis = m - y;
    double value = -(std::lgamma(m + 1.0) - std::lgamma(y + 1.0) - std::lgamma(ymis + 1.0));
    double dp = 0.0, dpp = 0.0;
    if (y > 0.0) {
        if (rate == 0.0) {
            r.value = kInf;
            return r;
        }
        value -= y * std::log(rate);
        dp -= y / rate;
        dpp += y / (rate * rate);
    }
    if (ymis > 0.0) {
        if (rate == 1.0) {
            r.value = kInf;
            return r;
        }
        value -= ymis * std::log1p(-rate);
        dp += ymis / (1.0 - rate);
        dpp += ymis / ((1.0 - rate) * (1.0 - rate));
    }
    r.value = value;
    if (sum_a > 0.0) {  // rate = cases / sum_a; all-zero weights pin the rate
        r.d1 = dp / sum_a;
        r.d2 = dpp / (sum_a * sum_a);
    }
    return r;
}

}  // namespace

Family family_from_string(const std::string& s) {
    if (s == "poisson") return Family::poisson;
    if (s == "gaussian") return Family::gaussian;
    if (s == "binomial") return Family::binomial;
    throw UsageError("unknown family '" + s + "' (expected poisson, gaussian or binomial)");
}

Link link_from_string(const std::string& s) {
    if (s == "log") return Link::log_link;
    if (s == "logit") return Link::logit_link;
    if (s == "identity") return Link::identity_link;
    throw UsageError("unknown link '" + s + "' (expected log, logit or identity)");
}

std::string to_string(Family f) {
    switch (f) {
        case Family::poisson: return "poisson";
        case Family::gaussian: return "gaussian";
        case Family::binomial: return "binomial";
    }
    throw InternalError("bad family enum");
}

std::string to_string(Link l) {
    switch (l) {
        case Link::log_link: return "log";
        case Link::logit_link: return "logit";
        case Link::identity_link: return "identity";
    }
    throw InternalError("bad link enum");
}

Link default_link(Family f) {
    switch (f) {
        case Family::poisson: return Link::log_link;
        case Family::gaussian: return Link::identity_link;
        case Family::binomial: return Link::logit_link;
    }
    throw InternalError("bad family enum");
}

std::vector<std::string> ParamLayout::theta_names() const {
    std::vector<std::string> names{"intercept"};
    for (long k = 0; k < n_cov; ++k) names.push_back("slope_" + covariate_names[static_cast<size_t>(k)]);
    if (use_iid) names.push_back("iideffect_log_tau");
    if (use_field) {
        names.push_back("log_sigma");
        names.push_back("log_rho");
    }
    if (gaussian) names.push_back("log_tau_obs");
    return names;
}

ParamLayout ParamLayout::create(const ModelSpec& spec, const PreparedData& prep) {
    ParamLayout l;
    l.n_cov = static_cast<long>(prep.covariate_names.size());
    l.covariate_names = prep.covariate_names;
    l.use_field = spec.use_field;
    l.use_iid = spec.use_iid;
    l.gaussian = spec.family == Family::gaussian;
    l.n_iid = spec.use_iid ? static_cast<long>(prep.n_polygons()) : 0;
    l.n_nodes = spec.use_field ? prep.lattice.n_nodes() : 0;
    return l;
}

ModelContext make_context(const PreparedData& prep, const ModelSpec& spec) {
    validate_prepared(prep);
    ModelContext ctx;
    ctx.prep = &prep;
    ctx.spec = spec;

    PriorSpec& pr = ctx.spec.priors;
    if (!(pr.sd_intercept > 0.0) || !(pr.sd_slope > 0.0))
        throw DataError("prior standard deviations must be positive");
    if (pr.rho_min == 0.0) {
        double w = prep.lattice.width(), h = prep.lattice.height();
        pr.rho_min = 0.1 * std::max(std::sqrt(w * w + h * h), prep.lattice.spacing);
    }
    for (double p : {pr.rho_prob, pr.sigma_prob, pr.iid_sd_prob})
        if (!(p > 0.0 && p < 1.0)) throw DataError("prior tail probabilities must lie in (0, 1)");
    if (!(pr.rho_min > 0.0) || !(pr.sigma_max > 0.0) || !(pr.iid_sd_max > 0.0))
        throw DataError("prior rho_min / sigma_max / iid_sd_max must be positive");

    ctx.layout = ParamLayout::create(ctx.spec, prep);

    const long np = static_cast<long>(prep.n_pixels());
    ctx.X.resize(np, ctx.layout.n_cov);
    for (long k = 0; k < ctx.layout.n_cov; ++k)
        for (long j = 0; j < np; ++j) ctx.X(j, k) = prep.pixels.covariates[static_cast<size_t>(k)][static_cast<size_t>(j)];
    if (spec.use_field) ctx.A = spde::projection_matrix(prep.lattice, prep.pixels);
    ctx.agg = Eigen::Map<const Vec>(prep.pixels.aggregation.data(), np);
    ctx.y = Eigen::Map<const Vec>(prep.responses.data(), static_cast<long>(prep.n_polygons()));
    ctx.poly_of_pixel = prep.pixels.polygon_index;

    const long n_poly = static_cast<long>(prep.n_polygons());
    ctx.sum_a = Vec::Zero(n_poly);
    ctx.sum_a2 = Vec::Zero(n_poly);
    for (long j = 0; j < np; ++j) {
        ctx.sum_a[ctx.poly_of_pixel[static_cast<size_t>(j)]] += ctx.agg[j];
        ctx.sum_a2[ctx.poly_of_pixel[static_cast<size_t>(j)]] += ctx.agg[j] * ctx.agg[j];
    }

    if (spec.family == Family::poisson || spec.family == Family::binomial)
        for (long i = 0; i < n_poly; ++i)
            if (ctx.y[i] < 0.0)
                throw DataError("negative response for polygon '" + prep.polygon_ids[static_cast<size_t>(i)] +
                                "' with a count family");
    if (spec.family == Family::binomial) {
        if (prep.sample_sizes.size() != prep.n_polygons())
            throw DataError("binomial family requires a sample size for every polygon");
        ctx.sample_size = Eigen::Map<const Vec>(prep.sample_sizes.data(), n_poly);
        for (long i = 0; i < n_poly; ++i) {
            if (std::isnan(ctx.sample_size[i]) || ctx.sample_size[i] < 0.0)
                throw DataError("missing/negative sample size for polygon '" +
                                prep.polygon_ids[static_cast<size_t>(i)] + "'");
            if (ctx.y[i] > ctx.sample_size[i])
                throw DataError("response exceeds sample size for polygon '" +
                                prep.polygon_ids[static_cast<size_t>(i)] + "'");
        }
    }
    return ctx;
}

Vec make_theta0(const ModelContext& ctx) {
    const ParamLayout& l = ctx.layout;
    Vec theta = Vec::Zero(l.n_theta());
    theta[l.i_intercept()] = ctx.spec.priors.mean_intercept;
    for (long k = 0; k < l.n_cov; ++k) theta[l.i_slope(k)] = ctx.spec.priors.mean_slope;
    if (l.use_iid) theta[l.i_iid_log_tau()] = 0.0;
    if (l.use_field) {
        theta[l.i_log_sigma()] = -1.0;
        const LatticeSpec& lat = ctx.prep->lattice;
        double diag = std::sqrt(lat.width() * lat.width() + lat.height() * lat.height());
        theta[l.i_log_rho()] = std::log(std::max(0.25 * diag, lat.spacing));
    }
    if (l.gaussian) theta[l.i_log_tau_obs()] = 0.0;
    return theta;
}

double link_inverse(Link link, double eta) {
    switch (link) {
        case Link::log_link: return std::exp(eta);
        case Link::logit_link: {
            if (eta >= 0.0) return 1.0 / (1.0 + std::exp(-eta));
            double e = std::exp(eta);
            return e / (1.0 + e);
        }
        case Link::identity_link: return eta;
    }
    throw InternalError("bad link enum");
}

Vec apply_link_inverse(Link link, const Vec& eta) {
    Vec out(eta.size());
    for (long i = 0; i < eta.size(); ++i) out[i] = link_inverse(link, eta[i]);
    return out;
}

Vec linear_predictor(const ModelContext& ctx, const Params& params) {
    const ParamLayout& l = ctx.layout;
    if (params.theta.size() != l.n_theta() || params.latent.size() != l.n_latent())
        throw InternalError("parameter vector does not match the model layout");
    Vec eta = Vec::Constant(ctx.n_pixels(), params.theta[l.i_intercept()]);
    if (l.n_cov > 0) eta += ctx.X * params.theta.segment(1, l.n_cov);
    if (l.use_field) eta += ctx.A * params.latent.tail(l.n_nodes);
    if (l.use_iid)
        for (long j = 0; j < ctx.n_pixels(); ++j)
            eta[j] += params.latent[ctx.poly_of_pixel[static_cast<size_t>(j)]];
    return eta;
}

void aggregate(const Vec& pixel_rate, const Vec& weights, const StartEndIndex& index, Vec& cases,
               Vec& polygon_rate) {
    if (pixel_rate.size() != weights.size()) throw InternalError("aggregate: size mismatch");
    const long n = static_cast<long>(index.size());
    cases.resize(n);
    polygon_rate.resize(n);
    for (long i = 0; i < n; ++i) {
        double c = 0.0, s = 0.0;
        for (long j = index.start[static_cast<size_t>(i)]; j <= index.end[static_cast<size_t>(i)]; ++j) {
            c += weights[j] * pixel_rate[j];
            s += weights[j];
        }
        cases[i] = c;
        polygon_rate[i] = s == 0.0 ? 0.0 : c / s;
    }
}

double gaussian_dispersion(double sigma_obs, const double* weights, size_t n) {
    double ss = 0.0;
    for (size_t j = 0; j < n; ++j) ss += weights[j] * weights[j];
    return sigma_obs * std::sqrt(ss);
}

namespace {

// theta-level prior terms (latent priors live in the joint evaluation)
double theta_prior_nll(const ModelContext& ctx, const Vec& theta) {
    const ParamLayout& l = ctx.layout;
    const PriorSpec& pr = ctx.spec.priors;
    double nll = normal_nll(theta[l.i_intercept()], pr.mean_intercept, pr.sd_intercept);
    for (long k = 0; k < l.n_cov; ++k)
        nll += normal_nll(theta[l.i_slope(k)], pr.mean_slope, pr.sd_slope);
    if (l.use_iid) {
        // sigma_u = exp(-log_tau/2) ~ Exp(lambda_u), with the log-tau Jacobian
        double lambda_u = -std::log(pr.iid_sd_prob) / pr.iid_sd_max;
        double sigma_u = std::exp(-0.5 * theta[l.i_iid_log_tau()]);
        nll -= std::log(lambda_u) - lambda_u * sigma_u + std::log(0.5) + std::log(sigma_u);
    }
    if (l.use_field) {
        double lambda_rho = -std::log(pr.rho_prob) * pr.rho_min;
        double lambda_sigma = -std::log(pr.sigma_prob) / pr.sigma_max;
        double rho = std::exp(theta[l.i_log_rho()]);
        double sigma = std::exp(theta[l.i_log_sigma()]);
        // joint PC density with the (log rho, log sigma) Jacobian folded in
        nll -= std::log(lambda_rho) + std::log(lambda_sigma) - std::log(rho) -
               lambda_rho / rho - lambda_sigma * sigma + std::log(sigma);
    }
    if (l.gaussian) {
        double a = pr.gaussian_tau_shape, b = pr.gaussian_tau_rate;
        double x = theta[l.i_log_tau_obs()];
        nll -= a * std::log(b) - std::lgamma(a) + a * x - b * std::exp(x);
    }
    return nll;
}

}  // namespace

bool PosteriorEval::refresh_field(double log_sigma, double log_rho) {
    if (have_q_ && cached_ls_ == log_sigma && cached_lr_ == log_rho) return true;
    have_q_ = false;
    Q_ = spde::precision_matrix(ctx_->prep->lattice, FieldHyper{log_sigma, log_rho});
    Eigen::SimplicialLDLT<SparseMat> ldlt(Q_);
    if (ldlt.info() != Eigen::Success) return false;
    logdetQ_ = 0.0;
    for (long i = 0; i < Q_.rows(); ++i) {
        double d = ldlt.vectorD()[i];
        if (!(d > 0.0)) return false;
        logdetQ_ += std::log(d);
    }
    cached_ls_ = log_sigma;
    cached_lr_ = log_rho;
    have_q_ = true;
    return true;
}

double PosteriorEval::eval(const Vec& theta, const Vec& latent, Vec* grad, SparseMat* hess) {
    const ModelContext& ctx = *ctx_;
    const ParamLayout& l = ctx.layout;
    if (theta.size() != l.n_theta() || latent.size() != l.n_latent())
        throw InternalError("PosteriorEval: parameter size mismatch");
    for (long i = 0; i < theta.size(); ++i)
        if (!std::isfinite(theta[i])) return kInf;

    const long np = ctx.n_pixels(), n_poly = ctx.n_polygons();

    Params params{theta, latent};
    Vec eta = linear_predictor(ctx, params);
    Vec rate = apply_link_inverse(ctx.spec.link, eta);

    Vec cases, poly_rate;
    aggregate(rate, ctx.agg, ctx.prep->index, cases, poly_rate);

    double sigma_obs = 0.0;
    if (ctx.spec.family == Family::gaussian)
        sigma_obs = std::exp(-0.5 * theta[l.i_log_tau_obs()]);

    double lik = 0.0;
    Vec d1(n_poly), d2(n_poly);
    for (long i = 0; i < n_poly; ++i) {
        PolyNll r;
        switch (ctx.spec.family) {
            case Family::poisson: r = poisson_nll(ctx.y[i], cases[i]); break;
            case Family::gaussian:
                r = gaussian_nll(ctx.y[i], cases[i], sigma_obs * std::sqrt(ctx.sum_a2[i]));
                break;
            case Family::binomial:
                r = binomial_nll(ctx.y[i], poly_rate[i], ctx.sum_a[i], ctx.sample_size[i]);
                break;
        }
        if (!std::isfinite(r.value)) return kInf;
        lik += r.value;
        d1[i] = r.d1;
        d2[i] = r.d2;
    }

    double value = lik + theta_prior_nll(ctx, theta);

    double tau_u = 0.0;
    if (l.use_iid) {
        tau_u = std::exp(theta[l.i_iid_log_tau()]);
        const auto u = latent.head(l.n_iid);
        value += 0.5 * static_cast<double>(l.n_iid) * (kLog2Pi - theta[l.i_iid_log_tau()]) +
                 0.5 * tau_u * u.squaredNorm();
    }
    if (l.use_field) {
        if (!refresh_field(theta[l.i_log_sigma()], theta[l.i_log_rho()])) return kInf;
        const auto w = latent.tail(l.n_nodes);
        value += 0.5 * w.dot(Q_ * w) - 0.5 * logdetQ_ +
                 0.5 * static_cast<double>(l.n_nodes) * kLog2Pi;
    }
    if (!std::isfinite(value)) return kInf;
    if (!grad && !hess) return value;

    // chain through link and aggregation:
    //   b_j = a_j g'(eta_j), v_j = d1_{p(j)} b_j, e_j = d1_{p(j)} a_j g''(eta_j)
    Vec b(np), e(np);
    const bool gauss_newton = ctx.spec.link == Link::logit_link;
    for (long j = 0; j < np; ++j) {
        double g1 = 0.0, g2 = 0.0;
        switch (ctx.spec.link) {
            case Link::log_link: g1 = g2 = rate[j]; break;
            case Link::logit_link:
                g1 = rate[j] * (1.0 - rate[j]);
                g2 = g1 * (1.0 - 2.0 * rate[j]);
                break;
            case Link::identity_link: g1 = 1.0; g2 = 0.0; break;
        }
        b[j] = ctx.agg[j] * g1;
        e[j] = gauss_newton ? 0.0 : d1[ctx.poly_of_pixel[static_cast<size_t>(j)]] * ctx.agg[j] * g2;
    }

    if (grad) {
        grad->setZero(l.n_latent());
        Vec v(np);
        for (long j = 0; j < np; ++j) v[j] = d1[ctx.poly_of_pixel[static_cast<size_t>(j)]] * b[j];
        if (l.use_iid) {
            for (long j = 0; j < np; ++j) (*grad)[ctx.poly_of_pixel[static_cast<size_t>(j)]] += v[j];
            grad->head(l.n_iid) += tau_u * latent.head(l.n_iid);
        }
        if (l.use_field) {
            grad->tail(l.n_nodes) += ctx.A.transpose() * v;
            grad->tail(l.n_nodes) += Q_ * latent.tail(l.n_nodes);
        }
    }

    if (hess) {
        std::vector<Eigen::Triplet<double>> trip;
        trip.reserve(static_cast<size_t>(np) * 25 + static_cast<size_t>(l.n_nodes) * 13 +
                     static_cast<size_t>(l.n_iid));
        // A is column-major; gather its rows once (pixel -> latent support)
        std::vector<std::vector<std::pair<long, double>>> rows(static_cast<size_t>(np));
        if (l.use_field)
            for (long c = 0; c < ctx.A.outerSize(); ++c)
                for (SparseMat::InnerIterator it(ctx.A, c); it; ++it)
                    rows[static_cast<size_t>(it.row())].emplace_back(l.n_iid + c, it.value());

        // diagonal e-term (exact links only)
        for (long j = 0; j < np; ++j) {
            if (e[j] == 0.0) continue;
            long idx[8];
            double w[8];
            int n = 0;
            if (l.use_iid) {
                idx[n] = ctx.poly_of_pixel[static_cast<size_t>(j)];
                w[n++] = 1.0;
            }
            for (const auto& [col, val] : rows[static_cast<size_t>(j)]) {
                idx[n] = col;
                w[n++] = val;
            }
            for (int aa = 0; aa < n; ++aa)
                for (int bb = 0; bb < n; ++bb)
                    trip.emplace_back(idx[aa], idx[bb], e[j] * w[aa] * w[bb]);
        }
        // per-polygon rank-1 curvature d2_i (sum_j b_j support_j)^2
        std::unordered_map<long, double> gi;
        for (long i = 0; i < n_poly; ++i) {
            if (d2[i] == 0.0) continue;
            gi.clear();
            for (long j = ctx.prep->index.start[static_cast<size_t>(i)];
                 j <= ctx.prep->index.end[static_cast<size_t>(i)]; ++j) {
                if (b[j] == 0.0) continue;
                if (l.use_iid) gi[i] += b[j];
                for (const auto& [col, val] : rows[static_cast<size_t>(j)]) gi[col] += b[j] * val;
            }
            for (const auto& [ia, va] : gi)
                for (const auto& [ib, vb] : gi)
                    trip.emplace_back(ia, ib, d2[i] * va * vb);
        }
        // latent priors
        if (l.use_iid)
            for (long i = 0; i < l.n_iid; ++i) trip.emplace_back(i, i, tau_u);
        if (l.use_field)
            for (long c = 0; c < Q_.outerSize(); ++c)
                for (SparseMat::InnerIterator it(Q_, c); it; ++it)
                    trip.emplace_back(l.n_iid + it.row(), l.n_iid + it.col(), it.value());

        hess->resize(l.n_latent(), l.n_latent());
        hess->setFromTriplets(trip.begin(), trip.end());
        hess->makeCompressed();
    }
    return value;
}

double neg_log_likelihood(const ModelContext& ctx, const Params& params) {
    Vec eta = linear_predictor(ctx, params);
    Vec rate = apply_link_inverse(ctx.spec.link, eta);
    Vec cases, poly_rate;
    aggregate(rate, ctx.agg, ctx.prep->index, cases, poly_rate);
    double sigma_obs = 0.0;
    if (ctx.spec.family == Family::gaussian)
        sigma_obs = std::exp(-0.5 * params.theta[ctx.layout.i_log_tau_obs()]);
    double nll = 0.0;
    for (long i = 0; i < ctx.n_polygons(); ++i) {
        PolyNll r;
        switch (ctx.spec.family) {
            case Family::poisson: r = poisson_nll(ctx.y[i], cases[i]); break;
            case Family::gaussian:
                r = gaussian_nll(ctx.y[i], cases[i], sigma_obs * std::sqrt(ctx.sum_a2[i]));
                break;
            case Family::binomial:
                r = binomial_nll(ctx.y[i], poly_rate[i], ctx.sum_a[i], ctx.sample_size[i]);
                break;
        }
        if (!std::isfinite(r.value)) return kInf;
        nll += r.value;
    }
    return nll;
}

double neg_log_theta_prior(const ModelContext& ctx, const Vec& theta) {
    return theta_prior_nll(ctx, theta);
}

double neg_log_prior(const ModelContext& ctx, const Params& params) {
    const ParamLayout& l = ctx.layout;
    double nll = theta_prior_nll(ctx, params.theta);
    if (l.use_iid) {
        double lt = params.theta[l.i_iid_log_tau()];
        double tau_u = std::exp(lt);
        const auto u = params.latent.head(l.n_iid);
        nll += 0.5 * static_cast<double>(l.n_iid) * (kLog2Pi - lt) + 0.5 * tau_u * u.squaredNorm();
    }
    if (l.use_field) {
        SparseMat Q = spde::precision_matrix(
            ctx.prep->lattice,
            FieldHyper{params.theta[l.i_log_sigma()], params.theta[l.i_log_rho()]});
        Eigen::SimplicialLDLT<SparseMat> ldlt(Q);
        if (ldlt.info() != Eigen::Success)
            throw NumericError("field precision factorization failed");
        double logdet = 0.0;
        for (long i = 0; i < Q.rows(); ++i) logdet += std::log(ldlt.vectorD()[i]);
        const auto w = params.latent.tail(l.n_nodes);
        nll += 0.5 * w.dot(Q * w) - 0.5 * logdet + 0.5 * static_cast<double>(l.n_nodes) * kLog2Pi;
    }
    return nll;
}

Posterior joint_neg_log_posterior(const ModelContext& ctx, const Params& params) {
    PosteriorEval eval(ctx);
    Posterior post;
    if (ctx.layout.n_latent() > 0) {
        post.value = eval.eval(params.theta, params.latent, &post.grad_latent,
                               &post.hessian_latent);
        if (!std::isfinite(post.value)) {
            post.grad_latent.resize(0);
            post.hessian_latent.resize(0, 0);
        }
    } else {
        post.value = eval.value(params.theta, params.latent);
    }
    return post;
}

}  // namespace disagg
