#pragma once

#include <Eigen/Sparse>

#include "disagg/prepare.hpp"

namespace disagg {

using SparseMat = Eigen::SparseMatrix<double>;

struct FieldHyper {
    double log_sigma = 0.0;  // marginal standard deviation, log scale
    double log_rho = 0.0;    // practical range, log scale
};

class Rng;

namespace spde {

// Mat\'ern (nu = 1) lattice precision:
//   kappa = sqrt(8)/rho,  tau^2 = 1 / (4 pi kappa^2 sigma^2)
//   Q = tau^2 (kappa^4 C + 2 kappa^2 G + G C^{-1} G)
// with C = spacing^2 I (lumped mass) and G the unweighted 5-point graph
// Laplacian of the lattice (stencil truncated at the boundary). Symmetric
// positive definite for any positive spacing/sigma/rho.
SparseMat precision_matrix(const LatticeSpec& lattice, const FieldHyper& hyper);

// Bilinear weights of (x, y) on the four surrounding nodes. `clamp` pins
// coordinates to the hull (constant extrapolation outside); without it a
// point beyond the hull is an internal error. Zero weights are dropped.
// Returns the number of nonzeros written to (idx, w).
int bilinear_weights(const LatticeSpec& lattice, double x, double y, long idx[4], double w[4],
                     bool clamp = false);

// Rows = pixels, cols = lattice nodes; each row is a partition of unity with
// at most 4 nonzeros. Every pixel must lie inside the hull.
SparseMat projection_matrix(const LatticeSpec& lattice, const PixelTable& pixels);

// Exact draw x ~ Normal(0, Q^{-1}) by sparse-LDLT back-substitution.
Eigen::VectorXd sample_gmrf(const SparseMat& Q, Rng& rng);

}  // namespace spde
}  // namespace disagg
