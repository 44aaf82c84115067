#include "nlaf/solvers.hpp"

#include <cmath>
#include <string>

namespace nlaf {

namespace {

constexpr double kStopRel = 1e-14;

void check_system(const DenseMatrix& a, const DenseVector& b, const DenseVector& x0) {
    if (a.rows != a.cols)
        throw std::invalid_argument("cg: matrix not square, " + a.shape_str());
    if (b.size() != a.rows || x0.size() != a.rows)
        throw std::invalid_argument("cg: " + a.shape_str() + " vs b " +
                                    std::to_string(b.size()) + ", x0 " +
                                    std::to_string(x0.size()));
}

void pad_frozen(CgTrajectory& t, std::size_t steps, double bnorm) {
    while (t.alpha.size() < steps) {
        t.x.push_back(t.x.back());
        t.r.push_back(t.r.back());
        t.d.push_back(t.d.back());
        t.alpha.push_back(0.0);
        t.beta.push_back(1.0);
        t.rel_residual.push_back(bnorm > 0.0 ? norm2(t.r.back()) / bnorm : 0.0);
    }
}

}  // namespace

CgTrajectory cg_solve(const DenseMatrix& a, const DenseVector& b, const DenseVector& x0,
                      std::size_t steps) {
    check_system(a, b, x0);
    CgTrajectory t;
    const double bnorm = norm2(b);
    DenseVector x = x0;
    DenseVector r = vec_sub(b, matvec(a, x));
    DenseVector d = r;
    t.x.push_back(x);
    t.r.push_back(r);
    t.d.push_back(d);
    t.rel_residual.push_back(bnorm > 0.0 ? norm2(r) / bnorm : 0.0);
    for (std::size_t k = 0; k < steps; ++k) {
        const double rr = dot(r, r);
        if (norm2(r) < kStopRel * bnorm || rr == 0.0) {
            if (t.converged_at == SIZE_MAX) t.converged_at = k;
            pad_frozen(t, steps, bnorm);
            break;
        }
        const DenseVector ad = matvec(a, d);
        const double dad = dot(d, ad);
        if (!(dad > 0.0))
            throw not_spd_error("cg_solve: d^T A d = " + std::to_string(dad) +
                                " at step " + std::to_string(k));
        const double alpha = rr / dad;
        x = vec_add(x, vec_scale(d, alpha));
        const DenseVector r_next = vec_sub(r, vec_scale(ad, alpha));
        const double beta = dot(r_next, r_next) / rr;
        d = vec_add(r_next, vec_scale(d, beta));
        r = r_next;
        t.alpha.push_back(alpha);
        t.beta.push_back(beta);
        t.x.push_back(x);
        t.r.push_back(r);
        t.d.push_back(d);
        t.rel_residual.push_back(bnorm > 0.0 ? norm2(r) / bnorm : 0.0);
    }
    if (t.converged_at == SIZE_MAX && !t.rel_residual.empty() &&
        t.rel_residual.back() < kStopRel)
        t.converged_at = steps;
    return t;
}

CgTrajectory pcg_jacobi(const DenseMatrix& a, const DenseVector& b, const DenseVector& x0,
                        std::size_t steps) {
    check_system(a, b, x0);
    for (std::size_t i = 0; i < a.rows; ++i)
        if (!(a.at(i, i) > 0.0))
            throw not_spd_error("pcg_jacobi: nonpositive diagonal at " + std::to_string(i));
    CgTrajectory t;
    const double bnorm = norm2(b);
    const std::size_t n = a.rows;
    auto precond = [&](const DenseVector& v) {
        DenseVector z(n);
        for (std::size_t i = 0; i < n; ++i) z[i] = v[i] / a.at(i, i);
        return z;
    };
    DenseVector x = x0;
    DenseVector r = vec_sub(b, matvec(a, x));
    DenseVector z = precond(r);
    DenseVector d = z;
    double rz = dot(r, z);
    t.x.push_back(x);
    t.r.push_back(r);
    t.d.push_back(d);
    t.rel_residual.push_back(bnorm > 0.0 ? norm2(r) / bnorm : 0.0);
    for (std::size_t k = 0; k < steps; ++k) {
        if (norm2(r) < kStopRel * bnorm || rz == 0.0) {
            if (t.converged_at == SIZE_MAX) t.converged_at = k;
            pad_frozen(t, steps, bnorm);
            break;
        }
        const DenseVector ad = matvec(a, d);
        const double dad = dot(d, ad);
        if (!(dad > 0.0))
            throw not_spd_error("pcg_jacobi: d^T A d = " + std::to_string(dad) +
                                " at step " + std::to_string(k));
        const double alpha = rz / dad;
        x = vec_add(x, vec_scale(d, alpha));
        r = vec_sub(r, vec_scale(ad, alpha));
        z = precond(r);
        const double rz_next = dot(r, z);
        const double beta = rz_next / rz;
        d = vec_add(z, vec_scale(d, beta));
        rz = rz_next;
        t.alpha.push_back(alpha);
        t.beta.push_back(beta);
        t.x.push_back(x);
        t.r.push_back(r);
        t.d.push_back(d);
        t.rel_residual.push_back(bnorm > 0.0 ? norm2(r) / bnorm : 0.0);
    }
    return t;
}

const char* op_name(OpKind k) {
    switch (k) {
        case OpKind::pointwise_add: return "pointwise_add";
        case OpKind::pointwise_sub: return "pointwise_sub";
        case OpKind::pointwise_mul: return "pointwise_mul";
        case OpKind::pointwise_div: return "pointwise_div";
        case OpKind::column_shift: return "column_shift";
        case OpKind::row_shift: return "row_shift";
        case OpKind::vector_transpose: return "vector_transpose";
        case OpKind::inner: return "inner";
        case OpKind::outer: return "outer";
        case OpKind::matrix_transpose: return "matrix_transpose";
        case OpKind::atb: return "atb";
        case OpKind::ab: return "ab";
        case OpKind::ab_vec: return "ab_vec";
    }
    return "?";
}

std::optional<OpKind> op_from_name(const std::string& name) {
    for (int k = 0; k <= static_cast<int>(OpKind::ab_vec); ++k) {
        const OpKind kind = static_cast<OpKind>(k);
        if (name == op_name(kind)) return kind;
    }
    return std::nullopt;
}

namespace {

void want_inputs(OpKind kind, const std::vector<DenseMatrix>& in, std::size_t count) {
    if (in.size() != count)
        throw std::invalid_argument(std::string("op_oracle(") + op_name(kind) + "): expected " +
                                    std::to_string(count) + " inputs, got " +
                                    std::to_string(in.size()));
}

DenseMatrix pointwise(OpKind kind, const DenseMatrix& a, const DenseMatrix& b) {
    if (a.rows != b.rows || a.cols != 1 || b.cols != 1)
        throw std::invalid_argument(std::string("op_oracle(") + op_name(kind) +
                                    "): want equal n x 1 inputs, " + a.shape_str() +
                                    " vs " + b.shape_str());
    DenseMatrix out(a.rows, 1);
    for (std::size_t i = 0; i < a.rows; ++i) {
        const double x = a.at(i, 0), y = b.at(i, 0);
        switch (kind) {
            case OpKind::pointwise_add: out.at(i, 0) = x + y; break;
            case OpKind::pointwise_sub: out.at(i, 0) = x - y; break;
            case OpKind::pointwise_mul: out.at(i, 0) = x * y; break;
            case OpKind::pointwise_div:
                if (y == 0.0)
                    throw std::domain_error("op_oracle(pointwise_div): b[" +
                                            std::to_string(i) + "] = 0");
                out.at(i, 0) = x / y;
                break;
            default: break;
        }
    }
    return out;
}

DenseMatrix hstack(const DenseMatrix& a, const DenseMatrix& b) {
    DenseMatrix out(a.rows, a.cols + b.cols);
    for (std::size_t i = 0; i < a.rows; ++i) {
        for (std::size_t j = 0; j < a.cols; ++j) out.at(i, j) = a.at(i, j);
        for (std::size_t j = 0; j < b.cols; ++j) out.at(i, a.cols + j) = b.at(i, j);
    }
    return out;
}

}  // namespace

DenseMatrix op_oracle(OpKind kind, const std::vector<DenseMatrix>& in) {
    switch (kind) {
        case OpKind::pointwise_add:
        case OpKind::pointwise_sub:
        case OpKind::pointwise_mul:
        case OpKind::pointwise_div:
            want_inputs(kind, in, 2);
            return pointwise(kind, in[0], in[1]);
        case OpKind::column_shift:
            // two n x 1 columns, swapped
            want_inputs(kind, in, 2);
            return hstack(in[1], in[0]);
        case OpKind::row_shift: {
            // two 1 x n rows, swapped (stacked output)
            want_inputs(kind, in, 2);
            DenseMatrix out(2, in[0].cols);
            for (std::size_t j = 0; j < in[0].cols; ++j) {
                out.at(0, j) = in[1].at(0, j);
                out.at(1, j) = in[0].at(0, j);
            }
            return out;
        }
        case OpKind::vector_transpose:
            want_inputs(kind, in, 1);
            return transpose(in[0]);
        case OpKind::inner: {
            want_inputs(kind, in, 2);
            DenseMatrix prod = matmul(transpose(in[0]), in[1]);
            if (prod.rows != 1 || prod.cols != 1)
                throw std::invalid_argument("op_oracle(inner): want n x 1 inputs");
            return prod;
        }
        case OpKind::outer:
            want_inputs(kind, in, 2);
            return matmul(in[0], transpose(in[1]));
        case OpKind::matrix_transpose:
            want_inputs(kind, in, 1);
            return transpose(in[0]);
        case OpKind::atb:
            want_inputs(kind, in, 2);
            return matmul(transpose(in[0]), in[1]);
        case OpKind::ab:
        case OpKind::ab_vec:
            want_inputs(kind, in, 2);
            return matmul(in[0], in[1]);
    }
    throw std::invalid_argument("op_oracle: unknown kind");
}

DenseMatrix random_orthonormal(std::size_t n, Rng& rng) {
    // Householder QR of a Gaussian matrix; returns the accumulated Q.
    DenseMatrix m(n, n);
    for (double& v : m.data) v = rng.normal();
    DenseMatrix q = DenseMatrix::identity(n);
    for (std::size_t k = 0; k < n; ++k) {
        // Build the reflector for column k of the current m.
        double norm = 0.0;
        for (std::size_t i = k; i < n; ++i) norm += m.at(i, k) * m.at(i, k);
        norm = std::sqrt(norm);
        if (norm == 0.0) continue;
        DenseVector v(n, 0.0);
        const double alpha = m.at(k, k) >= 0.0 ? -norm : norm;
        v[k] = m.at(k, k) - alpha;
        for (std::size_t i = k + 1; i < n; ++i) v[i] = m.at(i, k);
        const double vv = dot(v, v);
        if (vv == 0.0) continue;
        auto reflect = [&](DenseMatrix& t) {
            // t <- (I - 2 v v^T / v^T v) t
            for (std::size_t j = 0; j < n; ++j) {
                double proj = 0.0;
                for (std::size_t i = k; i < n; ++i) proj += v[i] * t.at(i, j);
                proj *= 2.0 / vv;
                for (std::size_t i = k; i < n; ++i) t.at(i, j) -= proj * v[i];
            }
        };
        reflect(m);
        reflect(q);
    }
    // q now satisfies q * m_original-ish = R; Q of the factorization is q^T.
    return transpose(q);
}

Problem gen_problem(const ProblemSpec& spec) {
    if (spec.n == 0) throw std::invalid_argument("gen_problem: n = 0");
    if (spec.sigma < 0.0) throw std::invalid_argument("gen_problem: sigma < 0");
    Problem p;
    p.spec = spec;
    Rng rng(spec.seed);
    Rng rng_q = rng.split();
    Rng rng_lambda = rng.split();
    Rng rng_diag = rng.split();
    Rng rng_x = rng.split();
    const std::size_t n = spec.n;

    const DenseMatrix q = random_orthonormal(n, rng_q);
    DenseVector lambda(n);
    for (std::size_t i = 0; i < n; ++i) lambda[i] = rng_lambda.uniform(0.1, 1.0);
    // G = Q diag(lambda) Q^T, symmetrized to kill roundoff skew.
    DenseMatrix g(n, n, 0.0);
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < n; ++j) {
            double acc = 0.0;
            for (std::size_t k = 0; k < n; ++k) acc += q.at(i, k) * lambda[k] * q.at(j, k);
            g.at(i, j) = acc;
        }
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = i + 1; j < n; ++j) {
            const double s = 0.5 * (g.at(i, j) + g.at(j, i));
            g.at(i, j) = s;
            g.at(j, i) = s;
        }
    p.a = g;
    for (std::size_t i = 0; i < n; ++i)
        p.a.at(i, i) += std::exp(spec.sigma * rng_diag.normal());

    p.x_true = DenseVector(n);
    fill_normal(p.x_true, rng_x);
    p.b = matvec(p.a, p.x_true);
    return p;
}

std::optional<DenseMatrix> cholesky(const DenseMatrix& a) {
    if (a.rows != a.cols) return std::nullopt;
    const std::size_t n = a.rows;
    DenseMatrix l(n, n, 0.0);
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t j = 0; j <= i; ++j) {
            double acc = a.at(i, j);
            for (std::size_t k = 0; k < j; ++k) acc -= l.at(i, k) * l.at(j, k);
            if (i == j) {
                if (!(acc > 0.0)) return std::nullopt;
                l.at(i, i) = std::sqrt(acc);
            } else {
                l.at(i, j) = acc / l.at(j, j);
            }
        }
    }
    return l;
}

}  // namespace nlaf
