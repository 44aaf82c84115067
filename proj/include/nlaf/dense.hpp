#pragma once

#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

// Minimal dense linear-algebra substrate: row-major f64 matrices, the handful of
// kernels the transformer engine needs, and a deterministic splittable RNG.
// Everything is plain double; no expression templates, no views.

namespace nlaf {

struct DenseMatrix {
    std::size_t rows = 0;
    std::size_t cols = 0;
    std::vector<double> data;  // row-major, rows*cols entries

    DenseMatrix() = default;
    DenseMatrix(std::size_t r, std::size_t c, double fill = 0.0)
        : rows(r), cols(c), data(r * c, fill) {}

    double& at(std::size_t i, std::size_t j) { return data[i * cols + j]; }
    double at(std::size_t i, std::size_t j) const { return data[i * cols + j]; }

    static DenseMatrix identity(std::size_t n);
    std::string shape_str() const;
};

struct DenseVector {
    std::vector<double> data;

    DenseVector() = default;
    explicit DenseVector(std::size_t n, double fill = 0.0) : data(n, fill) {}

    std::size_t size() const { return data.size(); }
    double& operator[](std::size_t i) { return data[i]; }
    double operator[](std::size_t i) const { return data[i]; }
};

// Shape-checked kernels. Mismatches throw std::invalid_argument naming both
// shapes, e.g. "matmul: 3x4 vs 5x6".
DenseMatrix matmul(const DenseMatrix& a, const DenseMatrix& b);
DenseMatrix transpose(const DenseMatrix& a);
DenseMatrix add(const DenseMatrix& a, const DenseMatrix& b);
DenseMatrix sub(const DenseMatrix& a, const DenseMatrix& b);
DenseMatrix scale(const DenseMatrix& a, double s);
DenseVector matvec(const DenseMatrix& a, const DenseVector& x);
double dot(const DenseVector& a, const DenseVector& b);
double norm2(const DenseVector& a);  // Euclidean norm
double frobenius_norm(const DenseMatrix& a);
double max_abs(const DenseMatrix& a);
bool all_finite(const DenseMatrix& a);

// Column-wise softmax: out(i,j) = exp(a(i,j)) / sum_k exp(a(k,j)), computed with
// per-column max subtraction so entries up to +-700 stay finite.
DenseMatrix softmax_cols(const DenseMatrix& a);
DenseMatrix relu(const DenseMatrix& a);

DenseVector vec_add(const DenseVector& a, const DenseVector& b);
DenseVector vec_sub(const DenseVector& a, const DenseVector& b);
DenseVector vec_scale(const DenseVector& a, double s);

// Counter-based splittable generator (splitmix64 core). Identical seeds give
// bit-identical streams; split() derives an independently seeded child.
class Rng {
public:
    static constexpr const char* algorithm = "splitmix64";

    explicit Rng(std::uint64_t seed) : state_(seed) {}

    std::uint64_t next_u64();
    double uniform();                       // [0, 1), 53-bit
    double uniform(double lo, double hi);   // [lo, hi)
    double normal();                        // Box-Muller, two draws per call
    Rng split();

private:
    std::uint64_t state_;
};

void fill_uniform(DenseMatrix& m, Rng& rng, double lo, double hi);
void fill_normal(DenseVector& v, Rng& rng);

}  // namespace nlaf
