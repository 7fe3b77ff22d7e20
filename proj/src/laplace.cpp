#include "disagg/laplace.hpp"

#include <atomic>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>
#include <sstream>

#include <json.hpp>

#include "disagg/util.hpp"

namespace disagg {

using nlohmann::json;

namespace {

constexpr double kInf = std::numeric_limits<double>::infinity();
constexpr double kLog2Pi = 1.8378770664093454836;
constexpr double kInnerTol = 1e-8;
constexpr long kInnerMaxIter = 100;
constexpr double kOuterTol = 1e-5;
constexpr double kArmijoC = 1e-4;

// Factorize H (+ ridge * diag on failure, escalating 1e-6 -> 1e4). Large
// ridges turn the Newton step into a scaled gradient step, which keeps the
// line search making progress when H is indefinite far from the mode (e.g.
// Poisson with observed counts far above the current prediction). Returns
// the ridge that worked, or a negative value when everything failed.
double factorize_with_ridge(Eigen::SimplicialLDLT<SparseMat>& ldlt, const SparseMat& H) {
    const double ladders[] = {0.0,  1e-6, 1e-5, 1e-4, 1e-3, 1e-2,
                              1e-1, 1.0,  1e1,  1e2,  1e4};
    for (double ridge : ladders) {
        SparseMat M = H;
        if (ridge > 0.0) {
            Vec d = H.diagonal();
            for (long i = 0; i < d.size(); ++i)
                M.coeffRef(i, i) += ridge * std::max(std::abs(d[i]), 1.0);
        }
        ldlt.compute(M);
        if (ldlt.info() != Eigen::Success) continue;
        bool pd = true;
        for (long i = 0; i < M.rows(); ++i)
            if (!(ldlt.vectorD()[i] > 0.0)) {
                pd = false;
                break;
            }
        if (pd) return ridge;
    }
    return -1.0;
}

double logdet_of(const Eigen::SimplicialLDLT<SparseMat>& ldlt) {
    double s = 0.0;
    for (long i = 0; i < ldlt.vectorD().size(); ++i) s += std::log(ldlt.vectorD()[i]);
    return s;
}

}  // namespace

InnerResult inner_optimize(PosteriorEval& eval, const ModelContext& ctx, const Vec& theta,
                           const Vec& start) {
    InnerResult res;
    const long n = ctx.layout.n_latent();
    if (n == 0) {
        res.mode.resize(0);
        res.value = eval.value(theta, res.mode);
        res.converged = true;
        return res;
    }

    Vec x = start.size() == n ? start : Vec::Zero(n);
    Vec g;
    SparseMat H;
    double f = eval.eval(theta, x, &g, &H);
    if (!std::isfinite(f) && start.size() == n && !start.isZero()) {
        x.setZero();
        f = eval.eval(theta, x, &g, &H);
    }
    if (!std::isfinite(f)) {
        res.failed = true;
        return res;
    }

    auto ldlt = std::make_shared<Eigen::SimplicialLDLT<SparseMat>>();
    for (long it = 0; it < kInnerMaxIter; ++it) {
        // Gradient tolerance relative to the objective scale: near the mode
        // the achievable |g| is limited by rounding in f, not by kInnerTol.
        const double gtol = kInnerTol * std::max(1.0, std::abs(f));
        if (g.lpNorm<Eigen::Infinity>() < gtol) {
            res.converged = true;
            break;
        }
        ++res.iterations;
        double ridge = factorize_with_ridge(*ldlt, H);
        if (ridge < 0.0) {
            res.failed = true;
            return res;
        }
        Vec step = ldlt->solve(-g);
        double gd = g.dot(step);
        if (!(gd < 0.0)) {  // not a descent direction even after ridging
            res.failed = true;
            return res;
        }
        const double f_old = f;
        double t = 1.0;
        bool accepted = false;
        for (int halving = 0; halving < 50; ++halving) {
            double f_new = eval.value(theta, x + t * step);
            if (std::isfinite(f_new) && f_new <= f + kArmijoC * t * gd) {
                x += t * step;
                f = f_new;
                accepted = true;
                break;
            }
            t *= 0.5;
        }
        if (!accepted) break;  // stalled; report the last iterate un-converged
        f = eval.eval(theta, x, &g, &H);
        if (!std::isfinite(f)) {
            res.failed = true;
            return res;
        }
        if (f_old - f <= 1e-14 * std::max(1.0, std::abs(f_old))) {
            // No decrease distinguishable in doubles: the mode is resolved to
            // machine precision, even if |g| sits just above the tolerance.
            res.converged = g.lpNorm<Eigen::Infinity>() < 1e3 * gtol;
            break;
        }
    }

    double ridge = factorize_with_ridge(*ldlt, H);
    if (ridge < 0.0) {
        res.failed = true;
        return res;
    }
    res.mode = std::move(x);
    res.value = f;
    res.logdet_h = logdet_of(*ldlt);
    res.factor = std::move(ldlt);
    return res;
}

double laplace_objective(const ModelContext& ctx, const Vec& theta, const Vec& warm_start,
                         InnerResult* inner_out) {
    PosteriorEval eval(ctx);
    InnerResult inner = inner_optimize(eval, ctx, theta, warm_start);
    double value = kInf;
    if (!inner.failed && std::isfinite(inner.value))
        value = inner.value + 0.5 * inner.logdet_h -
                0.5 * static_cast<double>(ctx.layout.n_latent()) * kLog2Pi;
    if (inner_out) *inner_out = std::move(inner);
    return value;
}

namespace {

struct Objective {
    const ModelContext& ctx;
    std::atomic<long> inner_evals{0};

    double operator()(const Vec& theta, const Vec& warm, InnerResult* out = nullptr) {
        InnerResult inner;
        double v = laplace_objective(ctx, theta, warm, &inner);
        inner_evals += inner.iterations;
        if (out) *out = std::move(inner);
        return v;
    }
};

Vec fd_gradient(Objective& obj, const Vec& theta, const Vec& warm, int ncores) {
    const long d = theta.size();
    Vec grad(d);
    std::vector<double> plus(static_cast<size_t>(d)), minus(static_cast<size_t>(d));
    parallel_for(static_cast<size_t>(2 * d), ncores, [&](size_t slot) {
        long k = static_cast<long>(slot / 2);
        double h = 1e-4 * (1.0 + std::abs(theta[k]));
        Vec t = theta;
        if (slot % 2 == 0) {
            t[k] += h;
            plus[static_cast<size_t>(k)] = obj(t, warm);
        } else {
            t[k] -= h;
            minus[static_cast<size_t>(k)] = obj(t, warm);
        }
    });
    for (long k = 0; k < d; ++k) {
        double h = 1e-4 * (1.0 + std::abs(theta[k]));
        grad[k] = (plus[static_cast<size_t>(k)] - minus[static_cast<size_t>(k)]) / (2.0 * h);
    }
    return grad;
}

// FD Hessian at the optimum (step 1e-3 (1+|theta|)), symmetrized.
Eigen::MatrixXd fd_hessian(Objective& obj, const Vec& theta, const Vec& warm, double f0,
                           int ncores) {
    const long d = theta.size();
    Vec h(d);
    for (long k = 0; k < d; ++k) h[k] = 1e-3 * (1.0 + std::abs(theta[k]));

    std::vector<std::pair<long, long>> jobs;
    for (long i = 0; i < d; ++i)
        for (long j = i; j < d; ++j) jobs.emplace_back(i, j);
    Eigen::MatrixXd H(d, d);
    std::vector<double> results(jobs.size());
    parallel_for(jobs.size(), ncores, [&](size_t idx) {
        auto [i, j] = jobs[idx];
        if (i == j) {
            Vec tp = theta, tm = theta;
            tp[i] += h[i];
            tm[i] -= h[i];
            results[idx] = (obj(tp, warm) - 2.0 * f0 + obj(tm, warm)) / (h[i] * h[i]);
        } else {
            Vec tpp = theta, tpm = theta, tmp = theta, tmm = theta;
            tpp[i] += h[i]; tpp[j] += h[j];
            tpm[i] += h[i]; tpm[j] -= h[j];
            tmp[i] -= h[i]; tmp[j] += h[j];
            tmm[i] -= h[i]; tmm[j] -= h[j];
            results[idx] =
                (obj(tpp, warm) - obj(tpm, warm) - obj(tmp, warm) + obj(tmm, warm)) /
                (4.0 * h[i] * h[j]);
        }
    });
    for (size_t idx = 0; idx < jobs.size(); ++idx) {
        auto [i, j] = jobs[idx];
        H(i, j) = results[idx];
        H(j, i) = results[idx];
    }
    return H;
}

Eigen::MatrixXd floored_inverse(const Eigen::MatrixXd& H) {
    Eigen::MatrixXd sym = 0.5 * (H + H.transpose());
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(sym);
    Vec vals = es.eigenvalues();
    for (long i = 0; i < vals.size(); ++i) vals[i] = std::max(vals[i], 1e-10);
    return es.eigenvectors() * vals.cwiseInverse().asDiagonal() * es.eigenvectors().transpose();
}

}  // namespace

Vec FitResult::theta_se() const {
    Vec se(theta_cov.rows());
    for (long i = 0; i < se.size(); ++i) se[i] = std::sqrt(theta_cov(i, i));
    return se;
}


FitResult fit_model(const PreparedData& prep, const ModelSpec& spec, int ncores,
                    std::ostream* verbose) {
    ModelContext ctx = make_context(prep, spec);
    Objective obj{ctx};
    const long d = ctx.layout.n_theta();

    Vec theta = make_theta0(ctx);
    Vec warm = Vec::Zero(ctx.layout.n_latent());
    InnerResult inner;
    double f = obj(theta, warm, &inner);
    if (!std::isfinite(f))
        throw NumericError("Laplace objective is not finite at the initial parameters");
    warm = inner.mode;

    Vec g = fd_gradient(obj, theta, warm, ncores);
    Eigen::MatrixXd Hinv = Eigen::MatrixXd::Identity(d, d);
    bool converged = false;
    long outer = 0;
    bool first_update = true;

    while (outer < spec.max_iterations) {
        double gmax = g.lpNorm<Eigen::Infinity>();
        if (verbose) {
            char buf[160];
            std::snprintf(buf, sizeof(buf), "outer %3ld  objective %.8f  |grad| %.3g\n", outer, f,
                          gmax);
            *verbose << buf;
        }
        if (gmax < kOuterTol) {
            converged = true;
            break;
        }
        ++outer;

        Vec p = -(Hinv * g);
        if (!(p.dot(g) < 0.0)) {
            Hinv.setIdentity();
            p = -g;
        }
        double gd = g.dot(p);
        double t = 1.0;
        bool accepted = false;
        InnerResult inner_t;
        double f_new = 0.0;
        Vec theta_new;
        for (int halving = 0; halving < 50; ++halving) {
            theta_new = theta + t * p;
            f_new = obj(theta_new, warm, &inner_t);
            if (std::isfinite(f_new) && f_new <= f + kArmijoC * t * gd) {
                accepted = true;
                break;
            }
            t *= 0.5;
        }
        if (!accepted) {
            bool was_identity = Hinv.isIdentity(1e-12);
            Hinv.setIdentity();
            if (was_identity) break;  // steepest descent stalled too
            continue;
        }

        Vec s = theta_new - theta;
        theta = theta_new;
        f = f_new;
        warm = inner_t.mode;
        Vec g_new = fd_gradient(obj, theta, warm, ncores);
        Vec yk = g_new - g;
        double sy = s.dot(yk);
        if (sy > 1e-12 * s.norm() * yk.norm()) {
            if (first_update) {
                Hinv *= sy / yk.dot(yk);
                first_update = false;
            }
            Eigen::MatrixXd I = Eigen::MatrixXd::Identity(d, d);
            double rho = 1.0 / sy;
            Hinv = (I - rho * s * yk.transpose()) * Hinv * (I - rho * yk * s.transpose()) +
                   rho * s * s.transpose();
        }
        g = g_new;
    }

    FitResult res;
    res.spec = ctx.spec;
    res.covariate_names = prep.covariate_names;
    res.theta_names = ctx.layout.theta_names();
    res.theta_hat = theta;
    res.n_iid = ctx.layout.n_iid;
    res.n_nodes = ctx.layout.n_nodes;
    res.convergence.converged = converged;
    res.convergence.outer_iterations = outer;
    res.convergence.gradient_max = g.lpNorm<Eigen::Infinity>();
    res.convergence.objective = f;
    res.prep_provenance = prepared_provenance(prep);

    // final inner solve at the optimum for the reported mode and joint NLL
    InnerResult final_inner;
    double f_final = obj(theta, warm, &final_inner);
    if (!std::isfinite(f_final) || final_inner.failed)
        throw NumericError("inner optimization failed at the fitted parameters");
    res.latent_mode = final_inner.mode;
    res.nll_at_mode = final_inner.value;

    Eigen::MatrixXd fdH = fd_hessian(obj, theta, final_inner.mode, f_final, ncores);
    res.theta_cov = floored_inverse(fdH);
    res.convergence.inner_iterations = obj.inner_evals.load();
    return res;
}

std::string summarize_fit(const FitResult& fit) {
    std::ostringstream out;
    out << "model: family " << to_string(fit.spec.family) << ", link " << to_string(fit.spec.link)
        << ", field " << (fit.spec.use_field ? "on" : "off") << ", iid "
        << (fit.spec.use_iid ? "on" : "off") << "\n";
    if (!fit.convergence.converged)
        out << "WARNING: optimizer did not converge (gradient max-norm "
            << fmt_double(fit.convergence.gradient_max) << " after "
            << fit.convergence.outer_iterations << " iterations)\n";
    out << "parameter            estimate   std_error\n";
    Vec se = fit.theta_se();
    char buf[160];
    size_t cov = 0;
    for (long k = 0; k < fit.theta_hat.size(); ++k) {
        std::string name = fit.theta_names[static_cast<size_t>(k)];
        if (name.rfind("slope_", 0) == 0) {
            name = "slope (" + fit.covariate_names[cov++] + ")";
        }
        std::snprintf(buf, sizeof(buf), "%-20s %9.5f   %9.5f\n", name.c_str(), fit.theta_hat[k],
                      se[k]);
        out << buf;
    }
    std::snprintf(buf, sizeof(buf), "marginal NLL %.6f, joint NLL at mode %.6f\n",
                  fit.convergence.objective, fit.nll_at_mode);
    out << buf;
    out << "outer iterations " << fit.convergence.outer_iterations << ", inner iterations "
        << fit.convergence.inner_iterations << "\n";
    return out.str();
}

namespace {

json spec_to_json(const ModelSpec& spec) {
    const PriorSpec& pr = spec.priors;
    return json{{"family", to_string(spec.family)},
                {"link", to_string(spec.link)},
                {"use_field", spec.use_field},
                {"use_iid", spec.use_iid},
                {"max_iterations", spec.max_iterations},
                {"priors",
                 {{"mean_intercept", pr.mean_intercept},
                  {"sd_intercept", pr.sd_intercept},
                  {"mean_slope", pr.mean_slope},
                  {"sd_slope", pr.sd_slope},
                  {"rho_min", pr.rho_min},
                  {"rho_prob", pr.rho_prob},
                  {"sigma_max", pr.sigma_max},
                  {"sigma_prob", pr.sigma_prob},
                  {"iid_sd_max", pr.iid_sd_max},
                  {"iid_sd_prob", pr.iid_sd_prob},
                  {"gaussian_tau_shape", pr.gaussian_tau_shape},
                  {"gaussian_tau_rate", pr.gaussian_tau_rate}}}};
}

ModelSpec spec_from_json(const json& j) {
    ModelSpec spec;
    spec.family = family_from_string(j.at("family").get<std::string>());
    spec.link = link_from_string(j.at("link").get<std::string>());
    spec.use_field = j.at("use_field").get<bool>();
    spec.use_iid = j.at("use_iid").get<bool>();
    spec.max_iterations = j.at("max_iterations").get<long>();
    const json& p = j.at("priors");
    PriorSpec& pr = spec.priors;
    pr.mean_intercept = p.at("mean_intercept").get<double>();
    pr.sd_intercept = p.at("sd_intercept").get<double>();
    pr.mean_slope = p.at("mean_slope").get<double>();
    pr.sd_slope = p.at("sd_slope").get<double>();
    pr.rho_min = p.at("rho_min").get<double>();
    pr.rho_prob = p.at("rho_prob").get<double>();
    pr.sigma_max = p.at("sigma_max").get<double>();
    pr.sigma_prob = p.at("sigma_prob").get<double>();
    pr.iid_sd_max = p.at("iid_sd_max").get<double>();
    pr.iid_sd_prob = p.at("iid_sd_prob").get<double>();
    pr.gaussian_tau_shape = p.at("gaussian_tau_shape").get<double>();
    pr.gaussian_tau_rate = p.at("gaussian_tau_rate").get<double>();
    return spec;
}

json fit_to_json(const FitResult& fit, const std::string& provenance) {
    json j;
    j["format"] = "disagg-fit";
    j["version"] = 1;
    j["spec"] = spec_to_json(fit.spec);
    j["covariates"] = fit.covariate_names;
    j["theta_names"] = fit.theta_names;
    j["theta_hat"] = std::vector<double>(fit.theta_hat.data(),
                                         fit.theta_hat.data() + fit.theta_hat.size());
    Vec se = fit.theta_se();
    j["theta_se"] = std::vector<double>(se.data(), se.data() + se.size());
    json cov = json::array();
    for (long i = 0; i < fit.theta_cov.rows(); ++i) {
        json row = json::array();
        for (long k = 0; k < fit.theta_cov.cols(); ++k) row.push_back(fit.theta_cov(i, k));
        cov.push_back(row);
    }
    j["theta_cov"] = cov;
    j["n_iid"] = fit.n_iid;
    j["n_nodes"] = fit.n_nodes;
    j["convergence"] = {{"converged", fit.convergence.converged},
                        {"outer_iterations", fit.convergence.outer_iterations},
                        {"inner_iterations", fit.convergence.inner_iterations},
                        {"gradient_max", fit.convergence.gradient_max},
                        {"objective", fit.convergence.objective}};
    j["nll_at_mode"] = fit.nll_at_mode;
    j["prep_provenance"] = fit.prep_provenance;
    if (!provenance.empty()) j["provenance"] = provenance;
    return j;
}

}  // namespace

std::string fit_provenance(const FitResult& fit) {
    Fnv1a h;
    h.update("fit\n");
    h.update(fit_to_json(fit, "").dump());
    h.update("latent\n");
    h.update(fit.latent_mode.data(), static_cast<size_t>(fit.latent_mode.size()) * sizeof(double));
    return h.hex();
}

void save_fit(const FitResult& fit, const std::filesystem::path& dir) {
    std::filesystem::create_directories(dir);
    {
        std::ofstream out(dir / "fit.json", std::ios::binary);
        if (!out) throw DataError("cannot write " + (dir / "fit.json").string());
        out << fit_to_json(fit, fit_provenance(fit)).dump(1) << "\n";
    }
    {
        std::ofstream out(dir / "latent.bin", std::ios::binary);
        if (!out) throw DataError("cannot write " + (dir / "latent.bin").string());
        out.write(reinterpret_cast<const char*>(fit.latent_mode.data()),
                  static_cast<std::streamsize>(static_cast<size_t>(fit.latent_mode.size()) *
                                               sizeof(double)));
    }
}

FitResult load_fit(const std::filesystem::path& dir) {
    std::ifstream in(dir / "fit.json", std::ios::binary);
    if (!in) throw DataError("cannot open " + (dir / "fit.json").string());
    json j;
    try {
        j = json::parse(in);
    } catch (const json::parse_error& e) {
        throw DataError((dir / "fit.json").string() + ": invalid JSON: " + e.what());
    }
    if (j.value("format", "") != "disagg-fit")
        throw DataError(dir.string() + ": not a fit directory");

    FitResult fit;
    fit.spec = spec_from_json(j.at("spec"));
    fit.covariate_names = j.at("covariates").get<std::vector<std::string>>();
    fit.theta_names = j.at("theta_names").get<std::vector<std::string>>();
    auto th = j.at("theta_hat").get<std::vector<double>>();
    fit.theta_hat = Eigen::Map<const Vec>(th.data(), static_cast<long>(th.size()));
    const json& cov = j.at("theta_cov");
    fit.theta_cov.resize(static_cast<long>(cov.size()), static_cast<long>(cov.size()));
    for (long i = 0; i < fit.theta_cov.rows(); ++i)
        for (long k = 0; k < fit.theta_cov.cols(); ++k)
            fit.theta_cov(i, k) = cov[static_cast<size_t>(i)][static_cast<size_t>(k)].get<double>();
    const json& c = j.at("convergence");
    fit.convergence.converged = c.at("converged").get<bool>();
    fit.convergence.outer_iterations = c.at("outer_iterations").get<long>();
    fit.convergence.inner_iterations = c.at("inner_iterations").get<long>();
    fit.convergence.gradient_max = c.at("gradient_max").get<double>();
    fit.convergence.objective = c.at("objective").get<double>();
    fit.nll_at_mode = j.at("nll_at_mode").get<double>();
    fit.prep_provenance = j.at("prep_provenance").get<std::string>();

    fit.n_iid = j.at("n_iid").get<long>();
    fit.n_nodes = j.at("n_nodes").get<long>();
    const long n_latent = fit.n_iid + fit.n_nodes;
    std::ifstream bin(dir / "latent.bin", std::ios::binary);
    if (!bin) throw DataError("cannot open " + (dir / "latent.bin").string());
    fit.latent_mode.resize(n_latent);
    bin.read(reinterpret_cast<char*>(fit.latent_mode.data()),
             static_cast<std::streamsize>(static_cast<size_t>(n_latent) * sizeof(double)));
    if (bin.gcount() != static_cast<std::streamsize>(static_cast<size_t>(n_latent) * sizeof(double)))
        throw DataError((dir / "latent.bin").string() + ": truncated latent array");

    std::string expect = j.value("provenance", "");
    if (!expect.empty() && expect != fit_provenance(fit))
        throw DataError(dir.string() + ": fit provenance hash mismatch");
    return fit;
}

}  // namespace disagg
