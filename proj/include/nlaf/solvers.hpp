#pragma once

#include <cstdint>
#include <optional>
#include <stdexcept>
#include <vector>

#include "nlaf/dense.hpp"

// Plain-arithmetic reference implementations: conjugate gradient, Jacobi-
// preconditioned CG, direct dense oracles for the constructed operations, and a
// seeded SPD problem generator. These are the ground truth everything else is
// checked against, so they stay deliberately boring.

namespace nlaf {

struct not_spd_error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Trajectory over t = 0..T. alpha[k] and beta[k] belong to the step from t=k to
// t=k+1 (beta[k] is the beta_{k+1} of the update equations). After early
// convergence the state is frozen: alpha = 0, beta = 1, x/r/d copied forward.
struct CgTrajectory {
    std::vector<DenseVector> x, r, d;
    std::vector<double> alpha, beta;      // length T
    std::vector<double> rel_residual;     // length T+1, |r_t| / |b|
    std::size_t converged_at = SIZE_MAX;  // first t with |r_t| < 1e-14 |b|
};

CgTrajectory cg_solve(const DenseMatrix& a, const DenseVector& b, const DenseVector& x0,
                      std::size_t steps);
CgTrajectory pcg_jacobi(const DenseMatrix& a, const DenseVector& b, const DenseVector& x0,
                        std::size_t steps);

// Direct oracles for the constructed operations.
enum class OpKind {
    pointwise_add,
    pointwise_sub,
    pointwise_mul,
    pointwise_div,
    column_shift,
    row_shift,
    vector_transpose,
    inner,
    outer,
    matrix_transpose,
    atb,
    ab,
    ab_vec,
};

const char* op_name(OpKind k);
std::optional<OpKind> op_from_name(const std::string& name);

// Inputs are matrices; vectors are passed as n x 1 columns. Output shapes:
// pointwise ops n x 1, inner 1 x 1, column/row shift stacked operands, the rest
// as expected.
DenseMatrix op_oracle(OpKind kind, const std::vector<DenseMatrix>& inputs);

struct ProblemSpec {
    std::size_t n = 4;
    double sigma = 1.2;
    std::uint64_t seed = 0;
};

struct Problem {
    ProblemSpec spec;
    DenseMatrix a;       // SPD: Q diag(lambda) Q^T + diag(exp(sigma z_i))
    DenseVector x_true;  // N(0, I)
    DenseVector b;       // A x_true
};

Problem gen_problem(const ProblemSpec& spec);

// Cholesky factor of an SPD matrix (lower triangular); nullopt if a pivot is
// not strictly positive.
std::optional<DenseMatrix> cholesky(const DenseMatrix& a);

// Orthonormal Q from Householder QR of a seeded Gaussian matrix.
DenseMatrix random_orthonormal(std::size_t n, Rng& rng);

}  // namespace nlaf
