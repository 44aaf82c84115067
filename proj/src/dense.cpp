#include "nlaf/dense.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace nlaf {

namespace {

[[noreturn]] void shape_fail(const char* op, const DenseMatrix& a, const DenseMatrix& b) {
    throw std::invalid_argument(std::string(op) + ": " + a.shape_str() + " vs " + b.shape_str());
}

}  // namespace

DenseMatrix DenseMatrix::identity(std::size_t n) {
    DenseMatrix m(n, n, 0.0);
    for (std::size_t i = 0; i < n; ++i) m.at(i, i) = 1.0;
    return m;
}

std::string DenseMatrix::shape_str() const {
    return std::to_string(rows) + "x" + std::to_string(cols);
}

DenseMatrix matmul(const DenseMatrix& a, const DenseMatrix& b) {
    if (a.cols != b.rows) shape_fail("matmul", a, b);
    DenseMatrix out(a.rows, b.cols, 0.0);
    // i-k-j loop order keeps the inner loop contiguous for row-major data.
    for (std::size_t i = 0; i < a.rows; ++i) {
        const double* arow = &a.data[i * a.cols];
        double* orow = &out.data[i * out.cols];
        for (std::size_t k = 0; k < a.cols; ++k) {
            const double aik = arow[k];
            if (aik == 0.0) continue;
            const double* brow = &b.data[k * b.cols];
            for (std::size_t j = 0; j < b.cols; ++j) orow[j] += aik * brow[j];
        }
    }
    return out;
}

DenseMatrix transpose(const DenseMatrix& a) {
    DenseMatrix out(a.cols, a.rows);
    for (std::size_t i = 0; i < a.rows; ++i)
        for (std::size_t j = 0; j < a.cols; ++j) out.at(j, i) = a.at(i, j);
    return out;
}

DenseMatrix add(const DenseMatrix& a, const DenseMatrix& b) {
    if (a.rows != b.rows || a.cols != b.cols) shape_fail("add", a, b);
    DenseMatrix out = a;
    for (std::size_t i = 0; i < out.data.size(); ++i) out.data[i] += b.data[i];
    return out;
}

DenseMatrix sub(const DenseMatrix& a, const DenseMatrix& b) {
    if (a.rows != b.rows || a.cols != b.cols) shape_fail("sub", a, b);
    DenseMatrix out = a;
    for (std::size_t i = 0; i < out.data.size(); ++i) out.data[i] -= b.data[i];
    return out;
}

DenseMatrix scale(const DenseMatrix& a, double s) {
    DenseMatrix out = a;
    for (double& v : out.data) v *= s;
    return out;
}

DenseVector matvec(const DenseMatrix& a, const DenseVector& x) {
    if (a.cols != x.size())
        throw std::invalid_argument("matvec: " + a.shape_str() + " vs " +
                                    std::to_string(x.size()));
    DenseVector out(a.rows);
    for (std::size_t i = 0; i < a.rows; ++i) {
        double acc = 0.0;
        const double* arow = &a.data[i * a.cols];
        for (std::size_t j = 0; j < a.cols; ++j) acc += arow[j] * x[j];
        out[i] = acc;
    }
    return out;
}

double dot(const DenseVector& a, const DenseVector& b) {
    if (a.size() != b.size())
        throw std::invalid_argument("dot: " + std::to_string(a.size()) + " vs " +
                                    std::to_string(b.size()));
    double acc = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) acc += a[i] * b[i];
    return acc;
}

double norm2(const DenseVector& a) { return std::sqrt(dot(a, a)); }

double frobenius_norm(const DenseMatrix& a) {
    double acc = 0.0;
    for (double v : a.data) acc += v * v;
    return std::sqrt(acc);
}

double max_abs(const DenseMatrix& a) {
    double m = 0.0;
    for (double v : a.data) m = std::max(m, std::abs(v));
    return m;
}

bool all_finite(const DenseMatrix& a) {
    for (double v : a.data)
        if (!std::isfinite(v)) return false;
    return true;
}

DenseMatrix softmax_cols(const DenseMatrix& a) {
    DenseMatrix out(a.rows, a.cols);
    for (std::size_t j = 0; j < a.cols; ++j) {
        double colmax = -HUGE_VAL;
        for (std::size_t i = 0; i < a.rows; ++i) colmax = std::max(colmax, a.at(i, j));
        double denom = 0.0;
        for (std::size_t i = 0; i < a.rows; ++i) {
            const double e = std::exp(a.at(i, j) - colmax);
            out.at(i, j) = e;
            denom += e;
        }
        for (std::size_t i = 0; i < a.rows; ++i) out.at(i, j) /= denom;
    }
    return out;
}

DenseMatrix relu(const DenseMatrix& a) {
    DenseMatrix out = a;
    for (double& v : out.data) v = v > 0.0 ? v : 0.0;
    return out;
}

DenseVector vec_add(const DenseVector& a, const DenseVector& b) {
    if (a.size() != b.size())
        throw std::invalid_argument("vec_add: " + std::to_string(a.size()) + " vs " +
                                    std::to_string(b.size()));
    DenseVector out = a;
    for (std::size_t i = 0; i < out.size(); ++i) out[i] += b[i];
    return out;
}

DenseVector vec_sub(const DenseVector& a, const DenseVector& b) {
    if (a.size() != b.size())
        throw std::invalid_argument("vec_sub: " + std::to_string(a.size()) + " vs " +
                                    std::to_string(b.size()));
    DenseVector out = a;
    for (std::size_t i = 0; i < out.size(); ++i) out[i] -= b[i];
    return out;
}

DenseVector vec_scale(const DenseVector& a, double s) {
    DenseVector out = a;
    for (double& v : out.data) v *= s;
    return out;
}

std::uint64_t Rng::next_u64() {
    // splitmix64 (Steele, Lea, Flood 2014): a counter-based mix, trivially
    // reproducible across platforms.
    state_ += 0x9E3779B97F4A7C15ULL;
    std::uint64_t z = state_;
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
    return z ^ (z >> 31);
}

double Rng::uniform() {
    return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
}

double Rng::uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

double Rng::normal() {
    // Box-Muller without caching: every call consumes exactly two draws, so the
    // stream position is independent of the mix of uniform/normal requests.
    double u1 = uniform();
    while (u1 <= 0.0) u1 = uniform();
    const double u2 = uniform();
    const double r = std::sqrt(-2.0 * std::log(u1));
    return r * std::cos(6.283185307179586476925286766559 * u2);
}

Rng Rng::split() {
    return Rng(next_u64() ^ 0xA5A5A5A55A5A5A5AULL);
}

void fill_uniform(DenseMatrix& m, Rng& rng, double lo, double hi) {
    for (double& v : m.data) v = rng.uniform(lo, hi);
}

void fill_normal(DenseVector& v, Rng& rng) {
    for (double& x : v.data) x = rng.normal();
}

}  // namespace nlaf
