#include <cmath>
#include <vector>

#include <doctest.h>

#include <Eigen/Dense>

#include "disagg/prepare.hpp"
#include "disagg/rng.hpp"
#include "disagg/spde.hpp"

using namespace disagg;

namespace {

LatticeSpec lattice(long ncols, long nrows, double spacing = 1.0) {
    LatticeSpec l;
    l.ncols = ncols;
    l.nrows = nrows;
    l.spacing = spacing;
    return l;
}

// Dense reconstruction of the documented formula, built independently:
// Q = tau^2 (kappa^4 C + 2 kappa^2 G + G C^{-1} G), C = h^2 I, G the
// unweighted 5-point graph Laplacian.
Eigen::MatrixXd dense_precision(const LatticeSpec& lat, double sigma, double rho) {
    const long n = lat.n_nodes();
    const double h = lat.spacing;
    Eigen::MatrixXd G = Eigen::MatrixXd::Zero(n, n);
    auto id = [&](long i, long j) { return j * lat.ncols + i; };
    for (long j = 0; j < lat.nrows; ++j)
        for (long i = 0; i < lat.ncols; ++i) {
            long a = id(i, j);
            auto add = [&](long bi, long bj) {
                if (bi < 0 || bi >= lat.ncols || bj < 0 || bj >= lat.nrows) return;
                long b = id(bi, bj);
                G(a, a) += 1.0;
                G(a, b) -= 1.0;
            };
            add(i - 1, j);
            add(i + 1, j);
            add(i, j - 1);
            add(i, j + 1);
        }
    const double kappa = std::sqrt(8.0) / rho;
    const double tau2 = 1.0 / (4.0 * M_PI * kappa * kappa * sigma * sigma);
    Eigen::MatrixXd C = h * h * Eigen::MatrixXd::Identity(n, n);
    return tau2 * (std::pow(kappa, 4) * C + 2.0 * kappa * kappa * G + G * C.inverse() * G);
}

}  // namespace

TEST_CASE("single-node precision has the closed form tau^2 kappa^4 h^2") {
    for (double sigma : {0.5, 1.0, 2.0})
        for (double rho : {2.0, 8.0})
            for (double h : {1.0, 4.0}) {
                SparseMat Q = spde::precision_matrix(lattice(1, 1, h),
                                                     FieldHyper{std::log(sigma), std::log(rho)});
                REQUIRE(Q.rows() == 1);
                double kappa = std::sqrt(8.0) / rho;
                double tau2 = 1.0 / (4.0 * M_PI * kappa * kappa * sigma * sigma);
                CHECK(Q.coeff(0, 0) ==
                      doctest::Approx(tau2 * std::pow(kappa, 4) * h * h).epsilon(1e-12));
            }
}

TEST_CASE("precision matches a dense reconstruction of the formula") {
    for (auto [nc, nr, h, sigma, rho] :
         {std::tuple{3L, 3L, 1.0, 1.0, 4.0}, std::tuple{4L, 2L, 2.0, 0.7, 9.0},
          std::tuple{5L, 5L, 0.5, 1.5, 2.5}}) {
        LatticeSpec lat = lattice(nc, nr, h);
        SparseMat Q = spde::precision_matrix(lat, FieldHyper{std::log(sigma), std::log(rho)});
        Eigen::MatrixXd D = dense_precision(lat, sigma, rho);
        CHECK((Eigen::MatrixXd(Q) - D).cwiseAbs().maxCoeff() < 1e-10 * D.cwiseAbs().maxCoeff());
        // symmetric positive definite
        CHECK((Eigen::MatrixXd(Q) - Eigen::MatrixXd(Q).transpose()).cwiseAbs().maxCoeff() == 0.0);
        Eigen::MatrixXd Qd(Q);
        Eigen::LLT<Eigen::MatrixXd> llt(Qd);
        CHECK(llt.info() == Eigen::Success);
    }
}

TEST_CASE("precision rejects bad inputs") {
    CHECK_THROWS_AS(spde::precision_matrix(lattice(0, 3), FieldHyper{}), InternalError);
    LatticeSpec bad = lattice(2, 2, -1.0);
    CHECK_THROWS_AS(spde::precision_matrix(bad, FieldHyper{}), InternalError);
    CHECK_THROWS_AS(
        spde::precision_matrix(lattice(2, 2), FieldHyper{std::nan(""), 0.0}), NumericError);
}

TEST_CASE("marginal variance and range calibrate on an interior-padded lattice") {
    // sigma = 1, rho = 5 on 20x20 with 6 pad nodes: the dense inverse gives
    // interior sd near 1 and correlation near 0.13 at lag rho
    const double sigma = 1.0, rho = 5.0;
    LatticeSpec lat = lattice(32, 32, 1.0);
    SparseMat Q = spde::precision_matrix(lat, FieldHyper{std::log(sigma), std::log(rho)});
    Eigen::MatrixXd cov = Eigen::MatrixXd(Q).inverse();
    auto id = [&](long i, long j) { return j * lat.ncols + i; };
    double sd_sum = 0.0;
    long count = 0;
    for (long j = 6; j < 26; ++j)
        for (long i = 6; i < 26; ++i) {
            sd_sum += std::sqrt(cov(id(i, j), id(i, j)));
            ++count;
        }
    double sd = sd_sum / static_cast<double>(count);
    CHECK(sd == doctest::Approx(1.0).epsilon(0.15));

    long a = id(13, 16), b = id(18, 16);  // 5 = rho apart, interior
    double corr = cov(a, b) / std::sqrt(cov(a, a) * cov(b, b));
    CHECK(corr > 0.05);
    CHECK(corr < 0.20);
}

TEST_CASE("range scaling: correlation at fixed distance grows with rho") {
    LatticeSpec lat = lattice(30, 30, 1.0);
    auto corr_at = [&](double rho, long lag) {
        SparseMat Q = spde::precision_matrix(lat, FieldHyper{0.0, std::log(rho)});
        Eigen::MatrixXd cov = Eigen::MatrixXd(Q).inverse();
        long a = 15 * 30 + 12, b = 15 * 30 + 12 + lag;
        return cov(a, b) / std::sqrt(cov(a, a) * cov(b, b));
    };
    CHECK(corr_at(3.0, 4) < corr_at(6.0, 4));
    CHECK(corr_at(6.0, 4) < corr_at(12.0, 4));
}

TEST_CASE("bilinear weights interpolate and sum to one") {
    LatticeSpec lat = lattice(3, 3, 2.0);
    lat.x0 = 1.0;
    lat.y0 = -1.0;
    long idx[4];
    double w[4];

    // exactly on node (1, 1) -> single unit weight
    int n = spde::bilinear_weights(lat, 3.0, 1.0, idx, w);
    REQUIRE(n == 1);
    CHECK(idx[0] == 4);
    CHECK(w[0] == doctest::Approx(1.0));

    // interior point: hand-computed corner weights
    n = spde::bilinear_weights(lat, 1.5, -0.5, idx, w);
    REQUIRE(n == 4);
    double sum = 0.0;
    for (int k = 0; k < n; ++k) sum += w[k];
    CHECK(sum == doctest::Approx(1.0));
    // fractional offsets (0.25, 0.25) from the lower-left node
    for (int k = 0; k < n; ++k) {
        if (idx[k] == 0) CHECK(w[k] == doctest::Approx(0.75 * 0.75));
        if (idx[k] == 1) CHECK(w[k] == doctest::Approx(0.25 * 0.75));
        if (idx[k] == 3) CHECK(w[k] == doctest::Approx(0.75 * 0.25));
        if (idx[k] == 4) CHECK(w[k] == doctest::Approx(0.25 * 0.25));
    }

    // edge midpoint drops the zero column
    n = spde::bilinear_weights(lat, 2.0, -1.0, idx, w);
    REQUIRE(n == 2);

    // outside: clamp pins to the hull, otherwise it is a caller bug
    n = spde::bilinear_weights(lat, -5.0, 0.0, idx, w, true);
    REQUIRE(n >= 1);
    double wx[4];
    long ix[4];
    int m = spde::bilinear_weights(lat, 1.0, 0.0, ix, wx);
    REQUIRE(n == m);
    for (int k = 0; k < n; ++k) {
        CHECK(idx[k] == ix[k]);
        CHECK(w[k] == doctest::Approx(wx[k]));
    }
    CHECK_THROWS_AS(spde::bilinear_weights(lat, -5.0, 0.0, idx, w), InternalError);
}

TEST_CASE("projection rows are a partition of unity with at most 4 entries") {
    PixelTable t;
    Rng rng(5);
    for (int j = 0; j < 60; ++j) {
        t.polygon_index.push_back(0);
        t.x.push_back(rng.uniform() * 7.9 + 0.05);
        t.y.push_back(rng.uniform() * 5.9 + 0.05);
    }
    LatticeSpec lat = lattice(5, 4, 2.0);
    SparseMat A = spde::projection_matrix(lat, t);
    REQUIRE(A.rows() == 60);
    REQUIRE(A.cols() == 20);
    std::vector<long> nnz(static_cast<size_t>(A.rows()), 0);
    for (long c = 0; c < A.outerSize(); ++c)
        for (SparseMat::InnerIterator it(A, c); it; ++it) {
            ++nnz[static_cast<size_t>(it.row())];
            CHECK(it.value() > 0.0);
        }
    for (long r = 0; r < A.rows(); ++r) CHECK(nnz[static_cast<size_t>(r)] <= 4);
    Eigen::VectorXd row_sums = A * Eigen::VectorXd::Ones(A.cols());
    for (long r = 0; r < A.rows(); ++r) CHECK(row_sums[r] == doctest::Approx(1.0));
    // projecting a linear surface reproduces it exactly (bilinear exactness)
    Eigen::VectorXd node_vals(20);
    for (long j = 0; j < 4; ++j)
        for (long i = 0; i < 5; ++i)
            node_vals[j * 5 + i] = 2.0 * (static_cast<double>(i) * 2.0) -
                                   0.5 * (static_cast<double>(j) * 2.0) + 3.0;
    Eigen::VectorXd px = A * node_vals;
    for (long r = 0; r < A.rows(); ++r)
        CHECK(px[r] == doctest::Approx(2.0 * t.x[r] - 0.5 * t.y[r] + 3.0));
}

TEST_CASE("gmrf draws reproduce the precision's covariance") {
    LatticeSpec lat = lattice(6, 6, 1.0);
    SparseMat Q = spde::precision_matrix(lat, FieldHyper{0.0, std::log(4.0)});
    Eigen::MatrixXd cov = Eigen::MatrixXd(Q).inverse();
    Rng rng(99);
    const int n_draws = 4000;
    long a = 2 * 6 + 2, b = 3 * 6 + 3;
    double saa = 0.0, sbb = 0.0, sab = 0.0, ma = 0.0, mb = 0.0;
    for (int s = 0; s < n_draws; ++s) {
        Eigen::VectorXd x = spde::sample_gmrf(Q, rng);
        ma += x[a];
        mb += x[b];
        saa += x[a] * x[a];
        sbb += x[b] * x[b];
        sab += x[a] * x[b];
    }
    ma /= n_draws;
    mb /= n_draws;
    double vaa = saa / n_draws - ma * ma, vbb = sbb / n_draws - mb * mb,
           vab = sab / n_draws - ma * mb;
    CHECK(ma == doctest::Approx(0.0).epsilon(0.05 * std::sqrt(cov(a, a))));
    CHECK(vaa == doctest::Approx(cov(a, a)).epsilon(0.1));
    CHECK(vbb == doctest::Approx(cov(b, b)).epsilon(0.1));
    CHECK(vab == doctest::Approx(cov(a, b)).epsilon(0.25));

    // a non-positive-definite matrix is rejected
    SparseMat bad(2, 2);
    bad.insert(0, 0) = -1.0;
    bad.insert(1, 1) = 1.0;
    bad.makeCompressed();
    CHECK_THROWS_AS(spde::sample_gmrf(bad, rng), NumericError);
}
