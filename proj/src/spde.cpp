#include "disagg/spde.hpp"

#include <cmath>
#include <vector>

#include <Eigen/SparseCholesky>

#include "disagg/errors.hpp"
#include "disagg/rng.hpp"

namespace disagg {
namespace spde {

SparseMat precision_matrix(const LatticeSpec& lattice, const FieldHyper& hyper) {
    const long nc = lattice.ncols, nr = lattice.nrows;
    if (nc < 1 || nr < 1) throw InternalError("precision_matrix: empty lattice");
    if (!(lattice.spacing > 0.0)) throw InternalError("precision_matrix: non-positive spacing");
    const double sigma = std::exp(hyper.log_sigma);
    const double rho = std::exp(hyper.log_rho);
    if (!std::isfinite(sigma) || !std::isfinite(rho) || sigma <= 0.0 || rho <= 0.0)
        throw NumericError("precision_matrix: non-finite field hyperparameters");

    const double kappa = std::sqrt(8.0) / rho;
    const double tau2 = 1.0 / (4.0 * M_PI * kappa * kappa * sigma * sigma);
    const double h2 = lattice.spacing * lattice.spacing;
    const long n = nc * nr;

    SparseMat G(n, n);
    {
        std::vector<Eigen::Triplet<double>> trip;
        trip.reserve(static_cast<size_t>(5 * n));
        auto node = [nc](long i, long j) { return j * nc + i; };
        for (long j = 0; j < nr; ++j) {
            for (long i = 0; i < nc; ++i) {
                long k = node(i, j);
                int deg = 0;
                const long di[4] = {1, -1, 0, 0};
                const long dj[4] = {0, 0, 1, -1};
                for (int d = 0; d < 4; ++d) {
                    long ii = i + di[d], jj = j + dj[d];
                    if (ii < 0 || ii >= nc || jj < 0 || jj >= nr) continue;
                    ++deg;
                    trip.emplace_back(k, node(ii, jj), -1.0);
                }
                trip.emplace_back(k, k, static_cast<double>(deg));
            }
        }
        G.setFromTriplets(trip.begin(), trip.end());
    }

    SparseMat I(n, n);
    I.setIdentity();
    const double k2 = kappa * kappa;
    SparseMat Q = tau2 * (k2 * k2 * h2 * I + 2.0 * k2 * G + SparseMat(G * G) / h2);
    Q.makeCompressed();
    return Q;
}

int bilinear_weights(const LatticeSpec& lattice, double x, double y, long idx[4], double w[4],
                     bool clamp) {
    const long nc = lattice.ncols, nr = lattice.nrows;
    double fx = (x - lattice.x0) / lattice.spacing;
    double fy = (y - lattice.y0) / lattice.spacing;
    const double slack = 1e-9;
    if (!clamp && (fx < -slack || fx > static_cast<double>(nc - 1) + slack || fy < -slack ||
                   fy > static_cast<double>(nr - 1) + slack))
        throw InternalError("bilinear_weights: point outside the lattice hull");
    fx = std::min(std::max(fx, 0.0), static_cast<double>(nc - 1));
    fy = std::min(std::max(fy, 0.0), static_cast<double>(nr - 1));

    long i0 = std::min(static_cast<long>(std::floor(fx)), nc > 1 ? nc - 2 : 0);
    long j0 = std::min(static_cast<long>(std::floor(fy)), nr > 1 ? nr - 2 : 0);
    double tx = nc > 1 ? fx - static_cast<double>(i0) : 0.0;
    double ty = nr > 1 ? fy - static_cast<double>(j0) : 0.0;

    auto node = [nc](long i, long j) { return j * nc + i; };
    const long cand_idx[4] = {node(i0, j0), nc > 1 ? node(i0 + 1, j0) : 0,
                              nr > 1 ? node(i0, j0 + 1) : 0,
                              (nc > 1 && nr > 1) ? node(i0 + 1, j0 + 1) : 0};
    const double cand_w[4] = {(1.0 - tx) * (1.0 - ty), tx * (1.0 - ty), (1.0 - tx) * ty, tx * ty};
    int n = 0;
    for (int k = 0; k < 4; ++k) {
        if (cand_w[k] == 0.0) continue;
        idx[n] = cand_idx[k];
        w[n] = cand_w[k];
        ++n;
    }
    return n;
}

SparseMat projection_matrix(const LatticeSpec& lattice, const PixelTable& pixels) {
    SparseMat A(static_cast<long>(pixels.size()), lattice.n_nodes());
    std::vector<Eigen::Triplet<double>> trip;
    trip.reserve(pixels.size() * 4);
    long idx[4];
    double w[4];
    for (size_t p = 0; p < pixels.size(); ++p) {
        int n = bilinear_weights(lattice, pixels.x[p], pixels.y[p], idx, w, false);
        for (int k = 0; k < n; ++k) trip.emplace_back(static_cast<long>(p), idx[k], w[k]);
    }
    A.setFromTriplets(trip.begin(), trip.end());
    A.makeCompressed();
    return A;
}

Eigen::VectorXd sample_gmrf(const SparseMat& Q, Rng& rng) {
    Eigen::SimplicialLDLT<SparseMat> ldlt(Q);
    if (ldlt.info() != Eigen::Success || (ldlt.vectorD().array() <= 0.0).any())
        throw NumericError("sample_gmrf: precision matrix is not positive definite");
    Eigen::VectorXd z(Q.rows());
    for (long i = 0; i < z.size(); ++i) z[i] = rng.normal();
    Eigen::VectorXd half = z.array() / ldlt.vectorD().array().sqrt();
    return ldlt.permutationPinv() * ldlt.matrixU().solve(half);
}

}  // namespace spde
}  // namespace disagg
