#include "disagg/simulate.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <queue>

#include "disagg/geoio.hpp"
#include "disagg/rng.hpp"
#include "disagg/stats.hpp"
#include "disagg/util.hpp"

#include <json.hpp>

namespace disagg {

using json = nlohmann::ordered_json;

AggregationMode aggregation_mode_from_string(const std::string& s) {
    if (s == "uniform") return AggregationMode::uniform;
    if (s == "lognormal") return AggregationMode::lognormal;
    throw UsageError("unknown aggregation mode '" + s + "' (expected uniform or lognormal)");
}

std::string to_string(AggregationMode m) {
    return m == AggregationMode::uniform ? "uniform" : "lognormal";
}

namespace {

SimulationConfig validated(SimulationConfig cfg) {
    if (cfg.grid_ncols < 2 || cfg.grid_nrows < 2)
        throw UsageError("simulation grid must be at least 2x2");
    if (!(cfg.cellsize > 0.0)) throw UsageError("cellsize must be positive");
    if (cfg.n_polygons < 1 || cfg.n_polygons > cfg.grid_ncols * cfg.grid_nrows)
        throw UsageError("polygon count must be between 1 and the cell count");
    if (cfg.n_covariates < 0 || cfg.n_covariates > 99)
        throw UsageError("covariate count must be between 0 and 99");
    if (!(cfg.true_sigma > 0.0 && cfg.true_rho > 0.0 && cfg.true_sigma_u > 0.0))
        throw UsageError("true_sigma, true_rho and true_sigma_u must be positive");
    if (!(cfg.gaussian_obs_sigma > 0.0)) throw UsageError("gaussian_obs_sigma must be positive");
    if (cfg.binomial_sample_size < 1) throw UsageError("binomial_sample_size must be positive");
    if (cfg.true_beta.empty()) {
        for (long k = 0; k < cfg.n_covariates; ++k)
            cfg.true_beta.push_back(k % 2 == 0 ? 0.4 : -0.4);
    } else if (static_cast<long>(cfg.true_beta.size()) != cfg.n_covariates) {
        throw UsageError("true_beta length must equal the covariate count");
    }
    return cfg;
}

std::vector<double> box_blur(const std::vector<double>& v, long nrows, long ncols) {
    std::vector<double> out(v.size());
    for (long r = 0; r < nrows; ++r) {
        for (long c = 0; c < ncols; ++c) {
            double s = 0.0;
            int n = 0;
            for (long dr = -1; dr <= 1; ++dr) {
                for (long dc = -1; dc <= 1; ++dc) {
                    long rr = r + dr, cc = c + dc;
                    if (rr < 0 || rr >= nrows || cc < 0 || cc >= ncols) continue;
                    s += v[static_cast<size_t>(rr * ncols + cc)];
                    ++n;
                }
            }
            out[static_cast<size_t>(r * ncols + c)] = s / n;
        }
    }
    return out;
}

std::vector<double> smooth_noise_covariate(long nrows, long ncols, Rng& rng) {
    std::vector<double> v(static_cast<size_t>(nrows * ncols));
    for (double& x : v) x = rng.normal();
    v = box_blur(v, nrows, ncols);
    v = box_blur(v, nrows, ncols);
    double m = mean_of(v), s = sd_of(v);
    for (double& x : v) x = (x - m) / s;
    return v;
}

std::vector<long> pick_sites(long ncells, long n, Rng& rng) {
    std::vector<long> pool(static_cast<size_t>(ncells));
    for (long i = 0; i < ncells; ++i) pool[static_cast<size_t>(i)] = i;
    for (long i = 0; i < n; ++i) {
        long j = i + static_cast<long>(rng.uniform() * static_cast<double>(ncells - i));
        std::swap(pool[static_cast<size_t>(i)], pool[static_cast<size_t>(j)]);
    }
    return {pool.begin(), pool.begin() + n};
}

// Nearest site by squared center distance; ties go to the lowest site index.
std::vector<long> voronoi_assign(const Grid& header, const std::vector<long>& sites) {
    std::vector<Point> centers(sites.size());
    for (size_t s = 0; s < sites.size(); ++s)
        centers[s] = cell_center(header, sites[s] / header.ncols, sites[s] % header.ncols);
    std::vector<long> owner(header.size());
    for (long r = 0; r < header.nrows; ++r) {
        for (long c = 0; c < header.ncols; ++c) {
            Point p = cell_center(header, r, c);
            long best = 0;
            double best_d = std::numeric_limits<double>::infinity();
            for (size_t s = 0; s < centers.size(); ++s) {
                double dx = p.x - centers[s].x, dy = p.y - centers[s].y;
                double d = dx * dx + dy * dy;
                if (d < best_d) {
                    best_d = d;
                    best = static_cast<long>(s);
                }
            }
            owner[static_cast<size_t>(r * header.ncols + c)] = best;
        }
    }
    return owner;
}

// Trace the rectilinear boundary of one 4-connected cell component as closed
// rings on the cell corners. Directions: 0=+x, 1=+y, 2=-x, 3=-y; the interior
// stays on the left, so rings run counter-clockwise. At a corner pinched
// between two diagonal cells the walk prefers the left turn, keeping each
// loop tight.
std::vector<Ring> trace_component(const Grid& header, const std::vector<char>& in_comp) {
    const long nc = header.ncols, nr = header.nrows;
    const long cw = nc + 1;  // corners per row
    auto corner = [cw](long i, long j) { return j * cw + i; };

    std::vector<uint8_t> out_mask(static_cast<size_t>(cw * (nr + 1)), 0);
    long n_edges = 0;
    auto add_edge = [&](long i, long j, int dir) {
        out_mask[static_cast<size_t>(corner(i, j))] |= static_cast<uint8_t>(1 << dir);
        ++n_edges;
    };
    auto inside = [&](long r, long c) {
        return r >= 0 && r < nr && c >= 0 && c < nc &&
               in_comp[static_cast<size_t>(r * nc + c)];
    };
    for (long r = 0; r < nr; ++r) {
        for (long c = 0; c < nc; ++c) {
            if (!in_comp[static_cast<size_t>(r * nc + c)]) continue;
            long js = nr - 1 - r, jn = nr - r;
            if (!inside(r - 1, c)) add_edge(c + 1, jn, 2);  // top, westwards
            if (!inside(r + 1, c)) add_edge(c, js, 0);      // bottom, eastwards
            if (!inside(r, c - 1)) add_edge(c, jn, 3);      // left, southwards
            if (!inside(r, c + 1)) add_edge(c + 1, js, 1);  // right, northwards
        }
    }

    const long di[4] = {1, 0, -1, 0};
    const long dj[4] = {0, 1, 0, -1};
    std::vector<Ring> rings;
    long cursor = 0;
    while (n_edges > 0) {
        while (out_mask[static_cast<size_t>(cursor)] == 0) ++cursor;
        long i = cursor % cw, j = cursor / cw;
        int dir = 0;
        while (!(out_mask[static_cast<size_t>(corner(i, j))] & (1 << dir))) ++dir;

        std::vector<std::pair<long, long>> corners;
        corners.emplace_back(i, j);
        std::vector<int> dirs;
        while (true) {
            out_mask[static_cast<size_t>(corner(i, j))] &=
                static_cast<uint8_t>(~(1 << dir));
            --n_edges;
            dirs.push_back(dir);
            i += di[dir];
            j += dj[dir];
            corners.emplace_back(i, j);
            uint8_t mask = out_mask[static_cast<size_t>(corner(i, j))];
            if (mask == 0) break;
            int next = -1;
            for (int turn : {1, 0, 3}) {  // left, straight, right
                int cand = (dir + turn) % 4;
                if (mask & (1 << cand)) {
                    next = cand;
                    break;
                }
            }
            if (next < 0) break;
            dir = next;
        }

        Ring ring;
        for (size_t k = 0; k < corners.size(); ++k) {
            if (k > 0 && k + 1 < corners.size() && dirs[k] == dirs[k - 1])
                continue;  // merge collinear runs
            ring.push_back({header.xll + static_cast<double>(corners[k].first) * header.cellsize,
                            header.yll + static_cast<double>(corners[k].second) * header.cellsize});
        }
        if (ring.front() != ring.back()) ring.push_back(ring.front());
        rings.push_back(std::move(ring));
    }
    return rings;
}

std::vector<Ring> region_rings(const Grid& header, const std::vector<long>& owner, long poly) {
    const long nc = header.ncols, nr = header.nrows;
    std::vector<char> claimed(static_cast<size_t>(nr * nc), 0);
    std::vector<Ring> rings;
    for (long start = 0; start < nr * nc; ++start) {
        if (owner[static_cast<size_t>(start)] != poly || claimed[static_cast<size_t>(start)])
            continue;
        std::vector<char> comp(static_cast<size_t>(nr * nc), 0);
        std::queue<long> q;
        q.push(start);
        comp[static_cast<size_t>(start)] = 1;
        claimed[static_cast<size_t>(start)] = 1;
        while (!q.empty()) {
            long cell = q.front();
            q.pop();
            long r = cell / nc, c = cell % nc;
            const long nb[4][2] = {{r - 1, c}, {r + 1, c}, {r, c - 1}, {r, c + 1}};
            for (const auto& n : nb) {
                if (n[0] < 0 || n[0] >= nr || n[1] < 0 || n[1] >= nc) continue;
                long id = n[0] * nc + n[1];
                if (claimed[static_cast<size_t>(id)] ||
                    owner[static_cast<size_t>(id)] != poly)
                    continue;
                claimed[static_cast<size_t>(id)] = 1;
                comp[static_cast<size_t>(id)] = 1;
                q.push(id);
            }
        }
        for (Ring& ring : trace_component(header, comp)) rings.push_back(std::move(ring));
    }
    return rings;
}

}  // namespace

std::vector<double> draw_responses(const SimulatedData& sim, uint64_t seed) {
    Rng rng = Rng::stream(seed, 4);
    const size_t n = sim.true_cases.size();
    std::vector<double> y(n);
    for (size_t i = 0; i < n; ++i) {
        switch (sim.cfg.family) {
            case Family::poisson:
                y[i] = static_cast<double>(rng.poisson(sim.true_cases[i]));
                break;
            case Family::gaussian:
                y[i] = sim.true_cases[i] + sim.obs_sigma[i] * rng.normal();
                break;
            case Family::binomial: {
                double p = std::min(std::max(sim.true_polygon_rate[i], 0.0), 1.0);
                y[i] = static_cast<double>(rng.binomial(sim.cfg.binomial_sample_size, p));
                break;
            }
        }
    }
    return y;
}

SimulatedData simulate_dataset(const SimulationConfig& raw_cfg) {
    SimulatedData sim;
    sim.cfg = validated(raw_cfg);
    const SimulationConfig& cfg = sim.cfg;
    const long nr = cfg.grid_nrows, nc = cfg.grid_ncols, ncells = nr * nc;

    Grid header;
    header.ncols = nc;
    header.nrows = nr;
    header.xll = 0.0;
    header.yll = 0.0;
    header.cellsize = cfg.cellsize;
    header.nodata = -9999.0;
    header.values.assign(static_cast<size_t>(ncells), 0.0);

    // Covariates: substreams 10+k.
    for (long k = 0; k < cfg.n_covariates; ++k) {
        Rng rng = Rng::stream(cfg.seed, 10 + static_cast<uint64_t>(k));
        Grid g = header;
        g.values = smooth_noise_covariate(nr, nc, rng);
        char name[32];
        std::snprintf(name, sizeof(name), "cov_%02ld", k);
        sim.covariates.names.emplace_back(name);
        sim.covariates.grids.push_back(std::move(g));
    }

    // Field on a lattice at twice the pixel spacing, drawn exactly and read
    // at the pixel centers.
    PixelTable all_pixels;
    for (long r = 0; r < nr; ++r) {
        for (long c = 0; c < nc; ++c) {
            Point p = cell_center(header, r, c);
            all_pixels.polygon_index.push_back(0);
            all_pixels.x.push_back(p.x);
            all_pixels.y.push_back(p.y);
        }
    }
    LatticeSpec lattice = prepare_ops::build_lattice(all_pixels, 2.0 * cfg.cellsize, 5);
    FieldHyper hyper{std::log(cfg.true_sigma), std::log(cfg.true_rho)};
    SparseMat Q = spde::precision_matrix(lattice, hyper);
    Rng field_rng = Rng::stream(cfg.seed, 1);
    Vec w = spde::sample_gmrf(Q, field_rng);
    sim.true_field = header;
    for (long cell = 0; cell < ncells; ++cell) {
        long idx[4];
        double wt[4];
        int nnz = spde::bilinear_weights(lattice, all_pixels.x[static_cast<size_t>(cell)],
                                         all_pixels.y[static_cast<size_t>(cell)], idx, wt);
        double f = 0.0;
        for (int m = 0; m < nnz; ++m) f += wt[m] * w[idx[m]];
        sim.true_field.values[static_cast<size_t>(cell)] = f;
    }

    // Polygons: seeded Voronoi partition snapped to cell boundaries.
    Rng site_rng = Rng::stream(cfg.seed, 5);
    std::vector<long> sites = pick_sites(ncells, cfg.n_polygons, site_rng);
    std::vector<long> owner = voronoi_assign(header, sites);
    for (long p = 0; p < cfg.n_polygons; ++p) {
        sim.polygons.ids.push_back("sim_" + std::to_string(p));
        sim.polygons.rings.push_back(region_rings(header, owner, p));
    }

    // iid effects and aggregation weights.
    Rng u_rng = Rng::stream(cfg.seed, 2);
    sim.true_u.resize(static_cast<size_t>(cfg.n_polygons));
    for (double& u : sim.true_u) u = cfg.true_sigma_u * u_rng.normal();

    sim.aggregation = header;
    if (cfg.aggregation_mode == AggregationMode::uniform) {
        std::fill(sim.aggregation.values.begin(), sim.aggregation.values.end(), 1.0);
    } else {
        Rng agg_rng = Rng::stream(cfg.seed, 3);
        for (double& a : sim.aggregation.values)
            a = std::exp(cfg.lognormal_mu + cfg.lognormal_sigma * agg_rng.normal());
    }

    // Pixel rates, aggregated per polygon in cell scan order.
    sim.true_cases.assign(static_cast<size_t>(cfg.n_polygons), 0.0);
    sim.true_polygon_rate.assign(static_cast<size_t>(cfg.n_polygons), 0.0);
    std::vector<double> sum_a(static_cast<size_t>(cfg.n_polygons), 0.0);
    std::vector<double> sum_a2(static_cast<size_t>(cfg.n_polygons), 0.0);
    for (long cell = 0; cell < ncells; ++cell) {
        double covpart = 0.0;
        for (long k = 0; k < cfg.n_covariates; ++k)
            covpart += cfg.true_beta[static_cast<size_t>(k)] *
                       sim.covariates.grids[static_cast<size_t>(k)].values[static_cast<size_t>(cell)];
        long p = owner[static_cast<size_t>(cell)];
        double eta = cfg.true_beta0 + covpart + sim.true_field.values[static_cast<size_t>(cell)] +
                     sim.true_u[static_cast<size_t>(p)];
        double rate = link_inverse(cfg.link, eta);
        double a = sim.aggregation.values[static_cast<size_t>(cell)];
        sim.true_cases[static_cast<size_t>(p)] += a * rate;
        sum_a[static_cast<size_t>(p)] += a;
        sum_a2[static_cast<size_t>(p)] += a * a;
    }
    for (long p = 0; p < cfg.n_polygons; ++p) {
        sim.true_polygon_rate[static_cast<size_t>(p)] =
            sum_a[static_cast<size_t>(p)] > 0.0
                ? sim.true_cases[static_cast<size_t>(p)] / sum_a[static_cast<size_t>(p)]
                : 0.0;
    }
    if (cfg.family == Family::gaussian) {
        sim.obs_sigma.resize(static_cast<size_t>(cfg.n_polygons));
        for (long p = 0; p < cfg.n_polygons; ++p)
            sim.obs_sigma[static_cast<size_t>(p)] =
                cfg.gaussian_obs_sigma * std::sqrt(sum_a2[static_cast<size_t>(p)]);
    }

    sim.polygons.responses = draw_responses(sim, cfg.seed);
    if (cfg.family == Family::binomial)
        sim.polygons.sample_sizes.assign(static_cast<size_t>(cfg.n_polygons),
                                         static_cast<double>(cfg.binomial_sample_size));
    return sim;
}

void save_simulation(const SimulatedData& sim, const std::filesystem::path& dir) {
    std::filesystem::create_directories(dir);
    std::filesystem::create_directories(dir / "covariates");
    bool binom = sim.cfg.family == Family::binomial;
    geoio::write_polygons(sim.polygons, dir / "shapes.geojson", "ID", "response",
                          binom ? std::optional<std::string>("sample_size") : std::nullopt);
    for (size_t k = 0; k < sim.covariates.size(); ++k)
        geoio::write_ascii_grid(sim.covariates.grids[k],
                                dir / "covariates" / (sim.covariates.names[k] + ".asc"));
    geoio::write_ascii_grid(sim.aggregation, dir / "aggregation.asc");
    geoio::write_ascii_grid(sim.true_field, dir / "true_field.asc");

    json j;
    j["format"] = "disagg-truth";
    j["version"] = 1;
    json cfg;
    cfg["grid_ncols"] = sim.cfg.grid_ncols;
    cfg["grid_nrows"] = sim.cfg.grid_nrows;
    cfg["cellsize"] = sim.cfg.cellsize;
    cfg["n_polygons"] = sim.cfg.n_polygons;
    cfg["n_covariates"] = sim.cfg.n_covariates;
    cfg["true_beta0"] = sim.cfg.true_beta0;
    cfg["true_beta"] = sim.cfg.true_beta;
    cfg["true_sigma"] = sim.cfg.true_sigma;
    cfg["true_rho"] = sim.cfg.true_rho;
    cfg["true_sigma_u"] = sim.cfg.true_sigma_u;
    cfg["family"] = to_string(sim.cfg.family);
    cfg["link"] = to_string(sim.cfg.link);
    cfg["aggregation_mode"] = to_string(sim.cfg.aggregation_mode);
    cfg["lognormal_mu"] = sim.cfg.lognormal_mu;
    cfg["lognormal_sigma"] = sim.cfg.lognormal_sigma;
    cfg["gaussian_obs_sigma"] = sim.cfg.gaussian_obs_sigma;
    cfg["binomial_sample_size"] = sim.cfg.binomial_sample_size;
    cfg["seed"] = sim.cfg.seed;
    j["config"] = cfg;
    j["true_u"] = sim.true_u;
    j["true_cases"] = sim.true_cases;
    j["true_polygon_rate"] = sim.true_polygon_rate;
    j["responses"] = sim.polygons.responses;
    std::ofstream out(dir / "truth.json", std::ios::binary);
    if (!out) throw DataError("cannot write " + (dir / "truth.json").string());
    out << j.dump(1) << "\n";
}

}  // namespace disagg
