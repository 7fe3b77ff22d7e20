#include "disagg/mcmc.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <optional>
#include <sstream>

#include <Eigen/Dense>

#include "disagg/rng.hpp"
#include "disagg/stats.hpp"
#include "disagg/util.hpp"

#include <json.hpp>

namespace disagg {

using json = nlohmann::ordered_json;

namespace {

constexpr double kNan = std::numeric_limits<double>::quiet_NaN();

struct ChainError {
    std::string message;
};

void run_one_chain(const std::function<double(const Vec&)>& nll, const Vec& center,
                   const RwmOptions& opts, const Eigen::MatrixXd* cov0,
                   const Eigen::MatrixXd* chol0, long chain, Eigen::MatrixXd& samples,
                   double& acceptance, std::vector<long>& events, std::string& error) {
    const long d = center.size();
    Rng rng = Rng::stream(opts.seed, static_cast<uint64_t>(chain));
    const double scale2 = 2.38 * 2.38 / static_cast<double>(d);
    const double scale1 = 2.38 / std::sqrt(static_cast<double>(d));

    Vec x(d), z(d);
    double f = kNan;
    bool ok = false;
    for (int attempt = 0; attempt < 100 && !ok; ++attempt) {
        for (long i = 0; i < d; ++i) z[i] = rng.normal();
        x = center + (chol0 ? Vec(opts.init_scale * (*chol0 * z)) : Vec(opts.init_scale * z));
        f = nll(x);
        ok = std::isfinite(f);
    }
    if (!ok) {
        error = "chain " + std::to_string(chain) +
                ": no finite posterior value near the starting point";
        return;
    }

    // Covariance shrinkage target: the supplied covariance, else isotropic at
    // the initial proposal scale. Refreshes blend the empirical covariance
    // toward it with weight n0/(n0 + n_states), so early refreshes cannot
    // replace a good starting covariance with a rank-starved estimate.
    const Eigen::MatrixXd C0 = cov0 ? *cov0
                                    : Eigen::MatrixXd(Eigen::MatrixXd::Identity(d, d) *
                                                      (opts.init_scale * opts.init_scale));
    const double n0 = 10.0 * static_cast<double>(d);

    Eigen::MatrixXd L =
        chol0 ? Eigen::MatrixXd(scale1 * *chol0)
              : Eigen::MatrixXd(Eigen::MatrixXd::Identity(d, d) * opts.init_scale);
    // Global step multiplier chasing the target acceptance (Robbins-Monro on
    // the log scale); rescues covariance under/over-estimates during warmup.
    double log_lambda = 0.0;

    // Running first/second moments of the visited states (Welford).
    Vec mu = x;
    Eigen::MatrixXd S = Eigen::MatrixXd::Zero(d, d);
    long n_states = 1;

    Vec prop(d);
    long accepted = 0, accepted_warm = 0;
    for (long t = 0; t < opts.n_iterations; ++t) {
        for (long i = 0; i < d; ++i) z[i] = rng.normal();
        prop = x + std::exp(log_lambda) * (L * z);
        double fp = nll(prop);
        double alpha = std::isfinite(fp) ? std::min(1.0, std::exp(f - fp)) : 0.0;
        if (alpha > 0.0 && std::log(rng.uniform_pos()) < f - fp) {
            x = prop;
            f = fp;
            ++accepted;
            if (t < opts.n_warmup) ++accepted_warm;
        }
        samples.row(t) = x.transpose();

        if (t < opts.n_warmup) {
            log_lambda += std::pow(static_cast<double>(t + 1), -0.6) *
                          (alpha - opts.target_acceptance);
            log_lambda = std::clamp(log_lambda, -10.0, 10.0);

            ++n_states;
            Vec delta = x - mu;
            mu += delta / static_cast<double>(n_states);
            S += delta * (x - mu).transpose();

            long next = t + 1;
            if (next < opts.n_warmup && next >= opts.adapt_start &&
                next % opts.refresh_every == 0 && n_states > 2) {
                const double w = static_cast<double>(n_states) /
                                 (static_cast<double>(n_states) + n0);
                Eigen::MatrixXd C =
                    scale2 * (w * (S / static_cast<double>(n_states - 1)) + (1.0 - w) * C0 +
                              1e-10 * Eigen::MatrixXd::Identity(d, d));
                Eigen::LLT<Eigen::MatrixXd> llt(C);
                if (llt.info() == Eigen::Success) {
                    L = llt.matrixL();
                    events.push_back(next);
                }
            }
            if (next == opts.n_warmup &&
                static_cast<double>(accepted_warm) < 0.001 * static_cast<double>(opts.n_warmup)) {
                error = "chain " + std::to_string(chain) +
                        ": warmup acceptance below 0.1%; reduce the initial proposal scale";
                return;
            }
        }
    }
    acceptance = static_cast<double>(accepted) / static_cast<double>(opts.n_iterations);
}

// Standard-normal <-> GMRF map for the field block, caching the LDLT of the
// field precision keyed on (log_sigma, log_rho). With P Q P^T = L D L^T the
// map is w = P^{-1} U^{-1} D^{-1/2} v (U = L^T), so w^T Q w = v^T v and the
// Jacobian determinant cancels the prior's log det Q term exactly.
class FieldTransform {
  public:
    explicit FieldTransform(const ModelContext& ctx) : ctx_(&ctx) {}

    // False when Q is not numerically positive definite at these values.
    bool refresh(double log_sigma, double log_rho) {
        if (have_ && ls_ == log_sigma && lr_ == log_rho) return true;
        have_ = false;
        SparseMat Q =
            spde::precision_matrix(ctx_->prep->lattice, FieldHyper{log_sigma, log_rho});
        ldlt_.compute(Q);
        if (ldlt_.info() != Eigen::Success || (ldlt_.vectorD().array() <= 0.0).any())
            return false;
        ls_ = log_sigma;
        lr_ = log_rho;
        have_ = true;
        return true;
    }

    Vec to_field(const Vec& v) const {
        Vec half = v.array() / ldlt_.vectorD().array().sqrt();
        return ldlt_.permutationPinv() * ldlt_.matrixU().solve(half);
    }

    Vec from_field(const Vec& w) const {
        Vec pw = ldlt_.permutationP() * w;
        Vec upw = ldlt_.matrixU() * pw;
        return upw.array() * ldlt_.vectorD().array().sqrt();
    }

  private:
    const ModelContext* ctx_;
    Eigen::SimplicialLDLT<SparseMat> ldlt_;
    bool have_ = false;
    double ls_ = 0.0, lr_ = 0.0;
};

}  // namespace

ChainSet sample_rwm(const TargetFactory& target, const Vec& center,
                    const std::vector<std::string>& param_names, const RwmOptions& opts,
                    const Eigen::MatrixXd* proposal_cov) {
    if (opts.n_chains < 1) throw UsageError("need at least one chain");
    if (opts.n_iterations < 1) throw UsageError("need at least one iteration");
    if (opts.n_warmup < 0 || opts.n_warmup >= opts.n_iterations)
        throw UsageError("warmup must be shorter than the total iteration count");
    if (center.size() != static_cast<long>(param_names.size()))
        throw InternalError("sample_rwm: name/parameter size mismatch");
    if (!(opts.target_acceptance > 0.0 && opts.target_acceptance < 1.0))
        throw UsageError("target acceptance must lie strictly between 0 and 1");
    if (!(opts.init_scale > 0.0)) throw UsageError("init scale must be positive");

    std::optional<Eigen::MatrixXd> chol0;
    if (proposal_cov) {
        if (proposal_cov->rows() != center.size() || proposal_cov->cols() != center.size())
            throw InternalError("sample_rwm: proposal covariance dimension mismatch");
        Eigen::LLT<Eigen::MatrixXd> llt(*proposal_cov);
        if (llt.info() == Eigen::Success) chol0 = llt.matrixL();
        // not positive definite: fall back to the isotropic default
    }

    ChainSet out;
    out.n_chains = opts.n_chains;
    out.n_iterations = opts.n_iterations;
    out.n_warmup = opts.n_warmup;
    out.seed = opts.seed;
    out.param_names = param_names;
    out.samples.assign(static_cast<size_t>(opts.n_chains),
                       Eigen::MatrixXd::Zero(opts.n_iterations, center.size()));
    out.acceptance_rates.assign(static_cast<size_t>(opts.n_chains), 0.0);
    out.adaptation_events.assign(static_cast<size_t>(opts.n_chains), {});

    std::vector<std::string> errors(static_cast<size_t>(opts.n_chains));
    parallel_for(static_cast<size_t>(opts.n_chains), opts.ncores, [&](size_t c) {
        auto nll = target(static_cast<long>(c));
        run_one_chain(nll, center, opts, chol0 ? proposal_cov : nullptr,
                      chol0 ? &*chol0 : nullptr, static_cast<long>(c), out.samples[c],
                      out.acceptance_rates[c], out.adaptation_events[c], errors[c]);
    });
    for (const auto& e : errors)
        if (!e.empty()) throw NumericError(e);
    return out;
}

ChainSet run_chains(const PreparedData& prep, const FitResult& fit, const RwmOptions& opts) {
    std::string prep_prov = prepared_provenance(prep);
    if (!fit.prep_provenance.empty() && fit.prep_provenance != prep_prov)
        throw DataError("fit was produced from different prepared data (provenance mismatch)");
    ModelContext ctx = make_context(prep, fit.spec);
    const long dt = ctx.layout.n_theta();
    const long nl = ctx.layout.n_latent();
    if (fit.theta_hat.size() != dt || fit.latent_mode.size() != nl)
        throw DataError("fit dimensions do not match the prepared data");

    std::vector<std::string> names = fit.theta_names;
    for (long i = 0; i < ctx.layout.n_iid; ++i) names.push_back("iid_" + std::to_string(i));
    for (long j = 0; j < ctx.layout.n_nodes; ++j) names.push_back("field_" + std::to_string(j));

    // The chains run in a non-centered parameterization: the iid block is
    // u = tau_u^{-1/2} u_raw and the field block is w = T(theta) v with T
    // from FieldTransform, so both raw blocks are standard normal a priori.
    // The latent prior's log determinants cancel against the Jacobian of the
    // map, leaving likelihood + theta prior + ||raw||^2/2 (+ const). This
    // removes the hierarchical funnel (latent scale depending on theta) that
    // makes a random walk in the original coordinates mix pathologically
    // slowly. Recorded samples are mapped back to the original coordinates.
    const ParamLayout& lay = ctx.layout;
    const double inf = std::numeric_limits<double>::infinity();

    Vec center(dt + nl);
    center.head(dt) = fit.theta_hat;
    if (lay.use_iid) {
        const double s = std::exp(0.5 * fit.theta_hat[lay.i_iid_log_tau()]);
        center.segment(dt, lay.n_iid) = s * fit.latent_mode.head(lay.n_iid);
    }
    if (lay.use_field) {
        FieldTransform ft(ctx);
        if (!ft.refresh(fit.theta_hat[lay.i_log_sigma()], fit.theta_hat[lay.i_log_rho()]))
            throw NumericError("field precision at the fitted mode is not positive definite");
        center.tail(lay.n_nodes) = ft.from_field(fit.latent_mode.tail(lay.n_nodes));
    }

    // Initial proposal: Laplace covariance for theta, identity (the raw
    // prior scale) for the latent blocks; warmup adaptation refines it.
    Eigen::MatrixXd cov0 = Eigen::MatrixXd::Identity(dt + nl, dt + nl);
    cov0.topLeftCorner(dt, dt) = fit.theta_cov;

    TargetFactory factory = [&ctx, &lay, dt, nl, inf](long) {
        auto ft = std::make_shared<FieldTransform>(ctx);
        return [&ctx, &lay, dt, nl, inf, ft](const Vec& x) {
            Params p;
            p.theta = x.head(dt);
            p.latent.resize(nl);
            double quad = 0.0;
            if (lay.use_iid) {
                const auto raw = x.segment(dt, lay.n_iid);
                p.latent.head(lay.n_iid) =
                    std::exp(-0.5 * p.theta[lay.i_iid_log_tau()]) * raw;
                quad += 0.5 * raw.squaredNorm();
            }
            if (lay.use_field) {
                if (!ft->refresh(p.theta[lay.i_log_sigma()], p.theta[lay.i_log_rho()]))
                    return inf;
                const Vec raw = x.tail(lay.n_nodes);
                p.latent.tail(lay.n_nodes) = ft->to_field(raw);
                quad += 0.5 * raw.squaredNorm();
            }
            return neg_log_likelihood(ctx, p) + neg_log_theta_prior(ctx, p.theta) + quad;
        };
    };
    ChainSet chains = sample_rwm(factory, center, names, opts, &cov0);

    // Map the recorded states back to the original (u, w) coordinates.
    // Rejected proposals repeat states, so consecutive identical rows are
    // transformed once.
    if (nl > 0) {
        FieldTransform ft(ctx);
        for (auto& S : chains.samples) {
            Vec prev_raw, prev_lat;
            for (long t = 0; t < S.rows(); ++t) {
                Vec raw = S.row(t).transpose();
                if (prev_raw.size() > 0 && (raw.array() == prev_raw.array()).all()) {
                    S.row(t).tail(nl) = prev_lat.transpose();
                    continue;
                }
                Vec lat(nl);
                if (lay.use_iid)
                    lat.head(lay.n_iid) =
                        std::exp(-0.5 * raw[lay.i_iid_log_tau()]) * raw.segment(dt, lay.n_iid);
                if (lay.use_field) {
                    if (!ft.refresh(raw[lay.i_log_sigma()], raw[lay.i_log_rho()]))
                        throw NumericError("recorded state has a non-factorizable field precision");
                    lat.tail(lay.n_nodes) = ft.to_field(raw.tail(lay.n_nodes));
                }
                S.row(t).tail(nl) = lat.transpose();
                prev_raw = std::move(raw);
                prev_lat = std::move(lat);
            }
        }
    }
    chains.fit_provenance = fit_provenance(fit);
    chains.prep_provenance = prep_prov;
    return chains;
}

Diagnostics diagnose(const ChainSet& chains) {
    if (chains.n_chains < 1) throw DataError("diagnostics need at least one chain");
    if (chains.n_kept() < 4) throw DataError("diagnostics need at least four kept draws per chain");

    const long n = chains.n_kept() / 2;  // half-chain length
    const long m = 2 * chains.n_chains;
    const long d = chains.n_params();

    Diagnostics diag;
    diag.param_names = chains.param_names;
    diag.rhat.assign(static_cast<size_t>(d), kNan);
    diag.ess.assign(static_cast<size_t>(d), kNan);

    std::vector<Vec> halves(static_cast<size_t>(m));
    for (long k = 0; k < d; ++k) {
        for (long h = 0; h < m; ++h) {
            long c = h / 2;
            long off = chains.n_warmup + (h % 2) * n;
            halves[static_cast<size_t>(h)] = chains.samples[static_cast<size_t>(c)]
                                                 .col(k)
                                                 .segment(off, n);
        }
        Vec means(m), vars(m);
        for (long h = 0; h < m; ++h) {
            const Vec& v = halves[static_cast<size_t>(h)];
            means[h] = v.mean();
            vars[h] = (v.array() - means[h]).square().sum() / static_cast<double>(n - 1);
        }
        double w = vars.mean();
        double grand = means.mean();
        double b = static_cast<double>(n) * (means.array() - grand).square().sum() /
                   static_cast<double>(m - 1);
        double var_plus =
            (static_cast<double>(n - 1) / static_cast<double>(n)) * w + b / static_cast<double>(n);
        if (!(w > 0.0) || !(var_plus > 0.0)) continue;  // constant draws: NaN sentinel
        diag.rhat[static_cast<size_t>(k)] = std::sqrt(var_plus / w);

        // Combined autocorrelation, truncated at the first non-positive
        // Geyer pair sum.
        auto rho_at = [&](long t) {
            double g = 0.0;
            for (long h = 0; h < m; ++h) {
                const Vec& v = halves[static_cast<size_t>(h)];
                double s = 0.0;
                for (long i = 0; i + t < n; ++i)
                    s += (v[i] - means[h]) * (v[i + t] - means[h]);
                g += s / static_cast<double>(n);
            }
            g /= static_cast<double>(m);
            return 1.0 - (w - g) / var_plus;
        };
        double pair_sum = 0.0;
        for (long t = 0; t + 1 < n; t += 2) {
            double pair = rho_at(t) + rho_at(t + 1);
            if (pair <= 0.0) break;
            pair_sum += pair;
        }
        double tau = std::max(2.0 * pair_sum - 1.0, 1e-3);
        diag.ess[static_cast<size_t>(k)] =
            static_cast<double>(m) * static_cast<double>(n) / tau;
    }
    return diag;
}

bool all_converged(const Diagnostics& diag, double rhat_target) {
    for (double r : diag.rhat)
        if (std::isnan(r) || r >= rhat_target) return false;
    return !diag.rhat.empty();
}

AutoRunResult run_until_converged(const PreparedData& prep, const FitResult& fit, RwmOptions opts,
                                  double rhat_target, long start_iterations, int max_doublings) {
    AutoRunResult res;
    long n_it = start_iterations;
    for (int attempt = 0; attempt <= max_doublings; ++attempt) {
        opts.n_iterations = n_it;
        opts.n_warmup = n_it / 4;
        res.schedule.push_back(n_it);
        res.chains = run_chains(prep, fit, opts);
        res.diagnostics = diagnose(res.chains);
        res.converged = all_converged(res.diagnostics, rhat_target);
        if (res.converged) break;
        n_it *= 2;
    }
    return res;
}

std::vector<CompareRow> compare(const FitResult& fit, const ChainSet& chains) {
    if (!chains.fit_provenance.empty() && chains.fit_provenance != fit_provenance(fit))
        throw DataError("chains were sampled from a different fit (provenance mismatch)");
    const long dt = static_cast<long>(fit.theta_names.size());
    if (chains.n_params() < dt)
        throw DataError("chains have fewer parameters than the fit");
    for (long k = 0; k < dt; ++k)
        if (chains.param_names[static_cast<size_t>(k)] != fit.theta_names[static_cast<size_t>(k)])
            throw DataError("chain parameter order does not match the fit");

    Vec se = fit.theta_se();
    std::vector<CompareRow> rows;
    const long kept = chains.n_kept();
    std::vector<double> pooled(static_cast<size_t>(kept * chains.n_chains));
    for (long k = 0; k < dt; ++k) {
        size_t at = 0;
        for (long c = 0; c < chains.n_chains; ++c)
            for (long t = chains.n_warmup; t < chains.n_iterations; ++t)
                pooled[at++] = chains.samples[static_cast<size_t>(c)](t, k);
        CompareRow row;
        row.name = fit.theta_names[static_cast<size_t>(k)];
        row.laplace_mean = fit.theta_hat[k];
        row.laplace_sd = se[k];
        row.mcmc_mean = mean_of(pooled);
        row.mcmc_sd = sd_of(pooled);
        row.ratio = std::abs(row.laplace_mean - row.mcmc_mean) / row.mcmc_sd;
        rows.push_back(row);
    }
    return rows;
}

std::string comparison_csv(const std::vector<CompareRow>& rows) {
    std::string out = "parameter,laplace_mean,laplace_sd,mcmc_mean,mcmc_sd,abs_diff_over_mcmc_sd\n";
    for (const auto& r : rows) {
        out += r.name + "," + fmt_double(r.laplace_mean) + "," + fmt_double(r.laplace_sd) + "," +
               fmt_double(r.mcmc_mean) + "," + fmt_double(r.mcmc_sd) + "," + fmt_double(r.ratio) +
               "\n";
    }
    return out;
}

std::string comparison_text(const std::vector<CompareRow>& rows) {
    std::ostringstream out;
    out << "posterior comparison (initial states jittered around the optimizer mode):\n";
    char line[160];
    std::snprintf(line, sizeof(line), "%-20s %-22s %-22s %s\n", "parameter", "mcmc mean (sd)",
                  "laplace mean (sd)", "|diff|/mcmc sd");
    out << line;
    auto cell = [](double m, double s) {
        char buf[64];
        std::snprintf(buf, sizeof(buf), "%.4g (%.4g)", m, s);
        return std::string(buf);
    };
    for (const auto& r : rows) {
        std::snprintf(line, sizeof(line), "%-20s %-22s %-22s %.3g\n", r.name.c_str(),
                      cell(r.mcmc_mean, r.mcmc_sd).c_str(),
                      cell(r.laplace_mean, r.laplace_sd).c_str(), r.ratio);
        out << line;
    }
    return out.str();
}

namespace {

std::string chains_csv(const ChainSet& chains) {
    std::string out = "chain,iteration";
    for (const auto& n : chains.param_names) out += "," + n;
    out += "\n";
    for (long c = 0; c < chains.n_chains; ++c) {
        for (long t = 0; t < chains.n_iterations; ++t) {
            out += std::to_string(c) + "," + std::to_string(t);
            for (long k = 0; k < chains.n_params(); ++k)
                out += "," + fmt_double(chains.samples[static_cast<size_t>(c)](t, k));
            out += "\n";
        }
    }
    return out;
}

json chains_meta(const ChainSet& chains, const std::string& provenance) {
    json j;
    j["format"] = "disagg-chains";
    j["version"] = 1;
    j["n_chains"] = chains.n_chains;
    j["n_iterations"] = chains.n_iterations;
    j["n_warmup"] = chains.n_warmup;
    j["seed"] = chains.seed;
    j["param_names"] = chains.param_names;
    j["acceptance_rates"] = chains.acceptance_rates;
    j["adaptation_events"] = chains.adaptation_events;
    j["fit_provenance"] = chains.fit_provenance;
    j["prep_provenance"] = chains.prep_provenance;
    if (!provenance.empty()) j["provenance"] = provenance;
    return j;
}

std::string chains_provenance(const ChainSet& chains, const std::string& csv) {
    Fnv1a h;
    h.update("chains\n");
    h.update(chains_meta(chains, "").dump());
    h.update(csv);
    return h.hex();
}

}  // namespace

void save_chains(const ChainSet& chains, const std::filesystem::path& dir) {
    std::filesystem::create_directories(dir);
    std::string csv = chains_csv(chains);
    {
        std::ofstream out(dir / "chains.csv", std::ios::binary);
        if (!out) throw DataError("cannot write " + (dir / "chains.csv").string());
        out << csv;
    }
    {
        std::ofstream out(dir / "chains.json", std::ios::binary);
        if (!out) throw DataError("cannot write " + (dir / "chains.json").string());
        out << chains_meta(chains, chains_provenance(chains, csv)).dump(1) << "\n";
    }
}

ChainSet load_chains(const std::filesystem::path& dir) {
    std::ifstream jin(dir / "chains.json", std::ios::binary);
    if (!jin) throw DataError("cannot open " + (dir / "chains.json").string());
    json j;
    try {
        j = json::parse(jin);
    } catch (const json::parse_error& e) {
        throw DataError((dir / "chains.json").string() + ": invalid JSON: " + e.what());
    }
    if (j.value("format", "") != "disagg-chains")
        throw DataError(dir.string() + ": not a chains directory");

    ChainSet chains;
    chains.n_chains = j.at("n_chains").get<long>();
    chains.n_iterations = j.at("n_iterations").get<long>();
    chains.n_warmup = j.at("n_warmup").get<long>();
    chains.seed = j.at("seed").get<uint64_t>();
    chains.param_names = j.at("param_names").get<std::vector<std::string>>();
    chains.acceptance_rates = j.at("acceptance_rates").get<std::vector<double>>();
    chains.adaptation_events = j.at("adaptation_events").get<std::vector<std::vector<long>>>();
    chains.fit_provenance = j.at("fit_provenance").get<std::string>();
    chains.prep_provenance = j.at("prep_provenance").get<std::string>();

    std::ifstream cin(dir / "chains.csv", std::ios::binary);
    if (!cin) throw DataError("cannot open " + (dir / "chains.csv").string());
    std::stringstream buf;
    buf << cin.rdbuf();
    std::string csv = buf.str();

    std::string expect = j.value("provenance", "");
    if (!expect.empty() && expect != chains_provenance(chains, csv))
        throw DataError(dir.string() + ": provenance mismatch (artifacts were modified)");

    const long d = chains.n_params();
    chains.samples.assign(static_cast<size_t>(chains.n_chains),
                          Eigen::MatrixXd::Zero(chains.n_iterations, d));
    std::istringstream lines(csv);
    std::string line;
    if (!std::getline(lines, line)) throw DataError("chains.csv: missing header");
    long row = 0;
    const long total = chains.n_chains * chains.n_iterations;
    while (std::getline(lines, line)) {
        if (line.empty()) continue;
        if (row >= total) throw DataError("chains.csv: more rows than the metadata declares");
        std::vector<std::string_view> fields;
        size_t start = 0;
        std::string_view sv(line);
        while (true) {
            size_t comma = sv.find(',', start);
            fields.push_back(sv.substr(start, comma - start));
            if (comma == std::string_view::npos) break;
            start = comma + 1;
        }
        if (static_cast<long>(fields.size()) != d + 2)
            throw DataError("chains.csv: wrong column count at data row " + std::to_string(row));
        long c = parse_long(fields[0], "chains.csv");
        long t = parse_long(fields[1], "chains.csv");
        if (c < 0 || c >= chains.n_chains || t < 0 || t >= chains.n_iterations)
            throw DataError("chains.csv: chain/iteration out of range at row " +
                            std::to_string(row));
        for (long k = 0; k < d; ++k)
            chains.samples[static_cast<size_t>(c)](t, k) =
                parse_double(fields[static_cast<size_t>(k + 2)], "chains.csv");
        ++row;
    }
    if (row != total) throw DataError("chains.csv: fewer rows than the metadata declares");
    return chains;
}

void save_diagnostics(const Diagnostics& diag, const ChainSet& chains,
                      const std::filesystem::path& file) {
    json j;
    j["format"] = "disagg-diagnostics";
    j["version"] = 1;
    j["n_chains"] = chains.n_chains;
    j["n_iterations"] = chains.n_iterations;
    j["n_warmup"] = chains.n_warmup;
    j["acceptance_rates"] = chains.acceptance_rates;
    j["param_names"] = diag.param_names;
    j["rhat"] = diag.rhat;
    j["ess"] = diag.ess;
    std::ofstream out(file, std::ios::binary);
    if (!out) throw DataError("cannot write " + file.string());
    out << j.dump(1) << "\n";
}

}  // namespace disagg
