// Copyright (c) 2026 The hydra-peft authors
// SPDX-License-Identifier: Apache-2.0

#include <hydra/matrix.hpp>
#include <hydra/rng.hpp>
#include <hydra/svd.hpp>

#include "oracles.hpp"

#include <catch2/catch_amalgamated.hpp>

#include <cmath>

using namespace hydra;

TEST_CASE("matmul identity and projector") {
    Matrix m = Matrix::from_rows({{1, 2}, {3, 4}});
    CHECK(matmul(Matrix::identity(2), m) == m);

    Matrix proj = Matrix::from_rows({{1, 0}, {0, 0}});
    Matrix x = Matrix::from_rows({{5}, {7}});
    Matrix out = matmul(proj, x);
    CHECK(out(0, 0) == 5.0);
    CHECK(out(1, 0) == 0.0);
}

TEST_CASE("matmul matches the triple-loop oracle") {
    Rng rng(11);
    Matrix a = oracles::random_matrix(rng, 3, 4);
    Matrix b = oracles::random_matrix(rng, 4, 2);
    CHECK(max_abs_diff(matmul(a, b), oracles::matmul_naive(a, b)) <= 1e-12);
}

TEST_CASE("gemm transpose flags match the oracle") {
    Rng rng(12);
    Matrix a = oracles::random_matrix(rng, 5, 3);
    Matrix b = oracles::random_matrix(rng, 5, 4);
    CHECK(max_abs_diff(gemm(a, true, b, false),
                       oracles::matmul_naive(oracles::transpose_naive(a), b)) <= 1e-12);
    Matrix c = oracles::random_matrix(rng, 4, 3);
    CHECK(max_abs_diff(gemm(a, true, c, true),
                       oracles::matmul_naive(oracles::transpose_naive(a),
                                             oracles::transpose_naive(c))) <= 1e-12);
    Matrix d = oracles::random_matrix(rng, 3, 5);
    CHECK(max_abs_diff(gemm(d, false, b, false), oracles::matmul_naive(d, b)) <= 1e-12);
    CHECK(max_abs_diff(gemm(d, false, c, true),
                       oracles::matmul_naive(d, oracles::transpose_naive(c))) <= 1e-12);
}

TEST_CASE("matmul rejects mismatched shapes, naming both") {
    Matrix a(3, 4), b(5, 2);
    try {
        matmul(a, b);
        FAIL("expected ShapeError");
    } catch (const ShapeError& e) {
        const std::string msg = e.what();
        CHECK(msg.find("(3, 4)") != std::string::npos);
        CHECK(msg.find("(5, 2)") != std::string::npos);
    }
}

TEST_CASE("matmul associativity on seeded triples") {
    Rng rng(21);
    for (int trial = 0; trial < 20; ++trial) {
        Matrix a = oracles::random_matrix(rng, 4, 6);
        Matrix b = oracles::random_matrix(rng, 6, 3);
        Matrix c = oracles::random_matrix(rng, 3, 5);
        Matrix left = matmul(matmul(a, b), c);
        Matrix right = matmul(a, matmul(b, c));
        const double scale = std::max(1.0, max_abs(left));
        CHECK(max_abs_diff(left, right) / scale <= 1e-9);
    }
}

TEST_CASE("frobenius_norm_sq") {
    CHECK(frobenius_norm_sq(Matrix::identity(3)) == 3.0);
    CHECK(frobenius_norm_sq(Matrix::from_rows({{1, 2}, {3, 4}})) == 30.0);
    Rng rng(5);
    Matrix m = oracles::random_matrix(rng, 5, 5);
    double manual = 0.0;
    for (double v : m.data()) manual += v * v;
    CHECK(std::abs(frobenius_norm_sq(m) - manual) <= 1e-12);
}

TEST_CASE("gaussian: zero sigma, determinism, moments") {
    Rng rng(1);
    Matrix z = gaussian(rng, 3, 3, 0.0);
    CHECK(max_abs(z) == 0.0);

    Rng r1(42), r2(42);
    CHECK(gaussian(r1, 17, 9, 0.5) == gaussian(r2, 17, 9, 0.5));

    Rng r3(42);
    Matrix big = gaussian(r3, 1000, 100, 0.02);
    double mean = 0.0;
    for (double v : big.data()) mean += v;
    mean /= double(big.size());
    double var = 0.0;
    for (double v : big.data()) var += (v - mean) * (v - mean);
    var /= double(big.size());
    CHECK(std::abs(mean) <= 0.001);
    CHECK(std::abs(std::sqrt(var) - 0.02) <= 0.002);

    CHECK_THROWS_AS(gaussian(r3, 2, 2, -1.0), ContractError);
}

TEST_CASE("gaussian replays the documented splitmix64 + Box-Muller stream") {
    // Independent re-derivation of the documented generator.
    auto splitmix = [](std::uint64_t& s) {
        s += 0x9E3779B97F4A7C15ULL;
        std::uint64_t z = s;
        z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
        z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
        return z ^ (z >> 31);
    };
    std::uint64_t state = 7;
    const double sigma = 0.02;
    std::vector<double> expected;
    while (expected.size() < 6) {
        const double u1 = double((splitmix(state) >> 11) + 1) * 0x1.0p-53;
        const double u2 = double(splitmix(state) >> 11) * 0x1.0p-53;
        const double r = std::sqrt(-2.0 * std::log(u1));
        expected.push_back(sigma * r * std::cos(2.0 * 3.14159265358979323846 * u2));
        expected.push_back(sigma * r * std::sin(2.0 * 3.14159265358979323846 * u2));
    }
    Rng rng(7);
    Matrix got = gaussian(rng, 2, 3, sigma);
    for (std::size_t i = 0; i < 6; ++i) CHECK(got.data()[i] == expected[i]);
}

// ----------------------------------------------------------------------------
// SVD
// ----------------------------------------------------------------------------

namespace {

void check_svd_invariants(const Matrix& m, const SvdResult& res, double tol = 1e-8) {
    const std::size_t k = std::min(m.rows(), m.cols());
    REQUIRE(res.s.size() == k);
    // orthonormal columns
    Matrix gram = gemm(res.u, true, res.u, false);
    CHECK(max_abs_diff(gram, Matrix::identity(k)) <= tol);
    // non-increasing singular values
    for (std::size_t i = 0; i + 1 < k; ++i) CHECK(res.s[i] >= res.s[i + 1]);
    for (double s : res.s) CHECK(s >= 0.0);
    // reconstruction
    Matrix us(res.u.rows(), k);
    for (std::size_t i = 0; i < res.u.rows(); ++i)
        for (std::size_t j = 0; j < k; ++j) us(i, j) = res.u(i, j) * res.s[j];
    Matrix rec = matmul(us, res.vt);
    CHECK(max_abs_diff(rec, m) <= tol * std::max(1.0, max_abs(m)));
}

} // namespace

TEST_CASE("svd of a diagonal matrix") {
    Matrix m = Matrix::from_rows({{3, 0}, {0, 1}});
    SvdResult res = svd(m);
    CHECK(res.s[0] == Catch::Approx(3.0).margin(1e-12));
    CHECK(res.s[1] == Catch::Approx(1.0).margin(1e-12));
    // sign convention makes u the positive identity
    CHECK(max_abs_diff(res.u, Matrix::identity(2)) <= 1e-12);
    check_svd_invariants(m, res);
}

TEST_CASE("svd of the zero matrix") {
    Matrix m(4, 3);
    SvdResult res = svd(m);
    for (double s : res.s) CHECK(s == 0.0);
    check_svd_invariants(m, res);
}

TEST_CASE("svd singular values match the Gram eigenvalue oracle") {
    Rng rng(88);
    Matrix m = oracles::random_matrix(rng, 8, 5);
    SvdResult res = svd(m);
    check_svd_invariants(m, res);

    Matrix gram = oracles::matmul_naive(oracles::transpose_naive(m), m);
    auto eig = oracles::symmetric_eigs_power(gram, 5);
    for (std::size_t i = 0; i < 5; ++i) {
        CHECK(std::abs(res.s[i] * res.s[i] - eig.values[i]) <= 1e-6);
    }
}

TEST_CASE("svd property sweep over seeded shapes") {
    Rng rng(3);
    for (int trial = 0; trial < 200; ++trial) {
        const std::size_t rows = 1 + rng.next_below(16);
        const std::size_t cols = 1 + rng.next_below(16);
        Matrix m = oracles::random_matrix(rng, rows, cols, -2.0, 2.0);
        check_svd_invariants(m, svd(m));
    }
}

TEST_CASE("svd handles rank deficiency and wide matrices") {
    Rng rng(9);
    Matrix a = oracles::random_matrix(rng, 6, 2);
    Matrix b = oracles::random_matrix(rng, 2, 6);
    Matrix low_rank = matmul(a, b); // rank <= 2 in a 6x6 frame
    SvdResult res = svd(low_rank);
    check_svd_invariants(low_rank, res);
    CHECK(res.s[2] <= 1e-10 * res.s[0]);

    Matrix wide = oracles::random_matrix(rng, 3, 7);
    check_svd_invariants(wide, svd(wide));
}

TEST_CASE("svd rejects empty and non-finite input") {
    CHECK_THROWS_AS(svd(Matrix(0, 3)), ContractError);
    Matrix bad(2, 2);
    bad(0, 0) = std::numeric_limits<double>::quiet_NaN();
    CHECK_THROWS_AS(svd(bad), ContractError);
}
