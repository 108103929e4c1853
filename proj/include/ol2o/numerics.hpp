#pragma once

// Dense column-major linear algebra, deterministic seeded random streams and
// scalar nonlinearities shared by every other module. All arithmetic is f64
// with fixed accumulation orders so that repeated runs are bit-identical.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstddef>
#include <stdexcept>
#include <string>
#include <vector>

namespace ol2o {

using index_t = std::size_t;

// Thrown when a documented precondition is violated by the caller.
struct contract_error : std::logic_error {
    explicit contract_error(const std::string& what) : std::logic_error(what) {}
};

// Thrown when an iterative routine fails to converge; carries the last estimate.
struct convergence_error : std::runtime_error {
    convergence_error(const std::string& what, double estimate)
        : std::runtime_error(what), last_estimate(estimate) {}
    double last_estimate;
};

inline void require(bool cond, const char* msg) {
    if (!cond) throw contract_error(msg);
}

struct DenseVector {
    std::vector<double> data;

    DenseVector() = default;
    explicit DenseVector(index_t n, double fill = 0.0) : data(n, fill) {}
    DenseVector(std::initializer_list<double> xs) : data(xs) {}

    index_t len() const { return data.size(); }
    double& operator[](index_t i) { return data[i]; }
    double operator[](index_t i) const { return data[i]; }

    bool all_finite() const {
        for (double v : data)
            if (!std::isfinite(v)) return false;
        return true;
    }
};

// Column-major dense matrix; entry (i,j) lives at data[j*rows + i].
struct DenseMatrix {
    index_t rows = 0;
    index_t cols = 0;
    std::vector<double> data;

    DenseMatrix() = default;
    DenseMatrix(index_t r, index_t c, double fill = 0.0)
        : rows(r), cols(c), data(r * c, fill) {}

    double& operator()(index_t i, index_t j) { return data[j * rows + i]; }
    double operator()(index_t i, index_t j) const { return data[j * rows + i]; }

    index_t size() const { return data.size(); }

    static DenseMatrix identity(index_t n) {
        DenseMatrix m(n, n);
        for (index_t i = 0; i < n; ++i) m(i, i) = 1.0;
        return m;
    }

    bool all_finite() const {
        for (double v : data)
            if (!std::isfinite(v)) return false;
        return true;
    }
};

// ---------------------------------------------------------------------------
// Deterministic random stream.
//
// Counter-based generator: draw k of a stream with base seed s is
// splitmix64(s + (k+1)*0x9E3779B97F4A7C15). Gaussians use the Marsaglia polar
// transform on top of the uniform stream; the whole sequence is a pure
// function of the seed.
// ---------------------------------------------------------------------------
class RngStream {
  public:
    static constexpr const char* algorithm_id = "splitmix64+polar-marsaglia/v1";

    explicit RngStream(std::uint64_t seed) : seed_(seed) {}

    std::uint64_t seed() const { return seed_; }
    std::uint64_t draws() const { return counter_; }

    // Streams for parallel workers: worker i uses master_seed + i.
    RngStream derived(std::uint64_t offset) const { return RngStream(seed_ + offset); }

    std::uint64_t next_u64() {
        std::uint64_t z = seed_ + (++counter_) * 0x9E3779B97F4A7C15ull;
        z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
        z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
        return z ^ (z >> 31);
    }

    // Uniform in [0,1), 53-bit resolution.
    double next_unit() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

    double next_uniform(double a, double b) { return a + (b - a) * next_unit(); }

    std::uint64_t next_below(std::uint64_t n) {
        // Modulo bias is < 2^-40 for n < 2^24; acceptable for index sampling.
        return next_u64() % n;
    }

    // Standard normal via the polar method (rejection on the unit disc).
    double next_gaussian() {
        if (has_spare_) {
            has_spare_ = false;
            return spare_;
        }
        double u, v, s;
        do {
            u = 2.0 * next_unit() - 1.0;
            v = 2.0 * next_unit() - 1.0;
            s = u * u + v * v;
        } while (s >= 1.0 || s == 0.0);
        const double f = std::sqrt(-2.0 * std::log(s) / s);
        spare_ = v * f;
        has_spare_ = true;
        return u * f;
    }

  private:
    std::uint64_t seed_;
    std::uint64_t counter_ = 0;
    bool has_spare_ = false;
    double spare_ = 0.0;
};

// i.i.d. N(mean, var) draws; var == 0 yields the constant vector without
// consuming the stream.
inline DenseVector sample_gaussian(RngStream& rng, index_t n, double mean, double var) {
    require(var >= 0.0, "sample_gaussian: var must be >= 0");
    DenseVector out(n);
    if (var == 0.0) {
        for (index_t i = 0; i < n; ++i) out[i] = mean;
        return out;
    }
    const double sd = std::sqrt(var);
    for (index_t i = 0; i < n; ++i) out[i] = mean + sd * rng.next_gaussian();
    return out;
}

// ---------------------------------------------------------------------------
// Kernels. matvec fixes the accumulation order (columns outer, rows inner,
// sequential) as part of its contract; everything else only promises
// per-build determinism.
// ---------------------------------------------------------------------------

// y = A x, accumulated column by column.
inline DenseVector matvec(const DenseMatrix& A, const DenseVector& x) {
    require(A.cols == x.len(), "matvec: A.cols must equal x.len");
    DenseVector y(A.rows, 0.0);
    const double* a = A.data.data();
    for (index_t j = 0; j < A.cols; ++j) {
        const double xj = x[j];
        const double* acol = a + j * A.rows;
        for (index_t i = 0; i < A.rows; ++i) y[i] += acol[i] * xj;
    }
    return y;
}

// y = A^T x (dot of x with each column of A).
inline DenseVector matvec_t(const DenseMatrix& A, const DenseVector& x) {
    require(A.rows == x.len(), "matvec_t: A.rows must equal x.len");
    DenseVector y(A.cols, 0.0);
    const double* a = A.data.data();
    for (index_t j = 0; j < A.cols; ++j) {
        const double* acol = a + j * A.rows;
        double s = 0.0;
        for (index_t i = 0; i < A.rows; ++i) s += acol[i] * x[i];
        y[j] = s;
    }
    return y;
}

// C = alpha * op(A) * op(B) + beta * C, all column-major.
inline void gemm(bool trans_a, bool trans_b, double alpha, const DenseMatrix& A,
                 const DenseMatrix& B, double beta, DenseMatrix& C) {
    const index_t m = trans_a ? A.cols : A.rows;
    const index_t k = trans_a ? A.rows : A.cols;
    const index_t kb = trans_b ? B.cols : B.rows;
    const index_t n = trans_b ? B.rows : B.cols;
    require(k == kb, "gemm: inner dimensions must agree");
    require(C.rows == m && C.cols == n, "gemm: output shape mismatch");

    if (beta == 0.0) {
        std::fill(C.data.begin(), C.data.end(), 0.0);
    } else if (beta != 1.0) {
        for (double& v : C.data) v *= beta;
    }
    const double* a = A.data.data();
    const double* b = B.data.data();
    double* c = C.data.data();

    if (!trans_a && !trans_b) {
        for (index_t j = 0; j < n; ++j) {
            const double* bcol = b + j * k;
            double* ccol = c + j * m;
            for (index_t l = 0; l < k; ++l) {
                const double w = alpha * bcol[l];
                const double* acol = a + l * m;
                for (index_t i = 0; i < m; ++i) ccol[i] += acol[i] * w;
            }
        }
    } else if (trans_a && !trans_b) {
        // C(i,j) = sum_l A(l,i) B(l,j): column dots.
        for (index_t j = 0; j < n; ++j) {
            const double* bcol = b + j * k;
            double* ccol = c + j * m;
            for (index_t i = 0; i < m; ++i) {
                const double* acol = a + i * k;
                double s = 0.0;
                for (index_t l = 0; l < k; ++l) s += acol[l] * bcol[l];
                ccol[i] += alpha * s;
            }
        }
    } else if (!trans_a && trans_b) {
        // C(i,j) = sum_l A(i,l) B(j,l).
        for (index_t l = 0; l < k; ++l) {
            const double* acol = a + l * m;
            const double* brow = b + l * n;
            for (index_t j = 0; j < n; ++j) {
                const double w = alpha * brow[j];
                double* ccol = c + j * m;
                for (index_t i = 0; i < m; ++i) ccol[i] += acol[i] * w;
            }
        }
    } else {
        for (index_t j = 0; j < n; ++j) {
            double* ccol = c + j * m;
            for (index_t i = 0; i < m; ++i) {
                const double* acol = a + i * k;
                double s = 0.0;
                for (index_t l = 0; l < k; ++l) s += acol[l] * b[l * n + j];
                ccol[i] += alpha * s;
            }
        }
    }
}

inline DenseMatrix matmul(const DenseMatrix& A, const DenseMatrix& B) {
    DenseMatrix C(A.rows, B.cols);
    gemm(false, false, 1.0, A, B, 0.0, C);
    return C;
}

inline double dot(const DenseVector& a, const DenseVector& b) {
    require(a.len() == b.len(), "dot: length mismatch");
    double s = 0.0;
    for (index_t i = 0; i < a.len(); ++i) s += a[i] * b[i];
    return s;
}

inline double norm_sq(const DenseVector& a) { return dot(a, a); }
inline double norm2(const DenseVector& a) { return std::sqrt(norm_sq(a)); }

inline void axpy(double alpha, const DenseVector& x, DenseVector& y) {
    require(x.len() == y.len(), "axpy: length mismatch");
    for (index_t i = 0; i < x.len(); ++i) y[i] += alpha * x[i];
}

inline DenseVector vadd(const DenseVector& a, const DenseVector& b) {
    require(a.len() == b.len(), "vadd: length mismatch");
    DenseVector y(a.len());
    for (index_t i = 0; i < a.len(); ++i) y[i] = a[i] + b[i];
    return y;
}

inline DenseVector vsub(const DenseVector& a, const DenseVector& b) {
    require(a.len() == b.len(), "vsub: length mismatch");
    DenseVector y(a.len());
    for (index_t i = 0; i < a.len(); ++i) y[i] = a[i] - b[i];
    return y;
}

inline DenseVector vscale(double alpha, const DenseVector& a) {
    DenseVector y(a.len());
    for (index_t i = 0; i < a.len(); ++i) y[i] = alpha * a[i];
    return y;
}

// Elementwise soft-thresholding, the proximal operator of theta*||.||_1.
inline double soft_threshold(double x, double theta) {
    const double mag = std::fabs(x) - theta;
    if (mag <= 0.0) return 0.0;
    return x > 0.0 ? mag : -mag;
}

inline DenseVector soft_threshold(const DenseVector& x, double theta) {
    require(theta >= 0.0, "soft_threshold: theta must be >= 0");
    DenseVector y(x.len());
    for (index_t i = 0; i < x.len(); ++i) y[i] = soft_threshold(x[i], theta);
    return y;
}

// ---------------------------------------------------------------------------
// Largest eigenvalue of A^T A by power iteration. The start vector comes from
// a reserved seed so the result is a deterministic function of A.
// ---------------------------------------------------------------------------
inline constexpr std::uint64_t kSpectralSeed = 0x512EC7A15EEDull;

inline double spectral_norm_sq(const DenseMatrix& A, double tol = 1e-12,
                               index_t max_iter = 50000) {
    require(tol > 0.0, "spectral_norm_sq: tol must be > 0");
    double frob = 0.0;
    for (double v : A.data) frob += v * v;
    require(frob > 0.0, "spectral_norm_sq: A must be nonzero");

    RngStream rng(kSpectralSeed);
    DenseVector v = sample_gaussian(rng, A.cols, 0.0, 1.0);
    double inv = 1.0 / norm2(v);
    for (index_t i = 0; i < v.len(); ++i) v[i] *= inv;

    double lambda_prev = -1.0;
    for (index_t it = 0; it < max_iter; ++it) {
        DenseVector w = matvec_t(A, matvec(A, v));
        const double lambda = dot(v, w);  // Rayleigh quotient, v is unit
        const double wn = norm2(w);
        if (wn == 0.0) return 0.0;  // v in the null space: lambda_max <= frob anyway
        inv = 1.0 / wn;
        for (index_t i = 0; i < v.len(); ++i) v[i] = w[i] * inv;
        if (it > 0 && std::fabs(lambda - lambda_prev) <= tol * std::fabs(lambda))
            return lambda;
        lambda_prev = lambda;
    }
    throw convergence_error("spectral_norm_sq: power iteration did not converge",
                            lambda_prev);
}

// ---------------------------------------------------------------------------
// Cholesky factorization/solve for small SPD systems (ALISTA weight solve).
// ---------------------------------------------------------------------------
inline bool cholesky_factor(DenseMatrix& G) {
    require(G.rows == G.cols, "cholesky_factor: matrix must be square");
    const index_t n = G.rows;
    for (index_t j = 0; j < n; ++j) {
        double d = G(j, j);
        for (index_t l = 0; l < j; ++l) d -= G(j, l) * G(j, l);
        if (d <= 0.0) return false;
        const double ljj = std::sqrt(d);
        G(j, j) = ljj;
        for (index_t i = j + 1; i < n; ++i) {
            double s = G(i, j);
            for (index_t l = 0; l < j; ++l) s -= G(i, l) * G(j, l);
            G(i, j) = s / ljj;
        }
    }
    return true;
}

// Solves L L^T x = b with L the lower factor from cholesky_factor.
inline DenseVector cholesky_solve(const DenseMatrix& L, const DenseVector& b) {
    const index_t n = L.rows;
    require(b.len() == n, "cholesky_solve: dimension mismatch");
    DenseVector y(n);
    for (index_t i = 0; i < n; ++i) {
        double s = b[i];
        for (index_t j = 0; j < i; ++j) s -= L(i, j) * y[j];
        y[i] = s / L(i, i);
    }
    DenseVector x(n);
    for (index_t ii = n; ii-- > 0;) {
        double s = y[ii];
        for (index_t j = ii + 1; j < n; ++j) s -= L(j, ii) * x[j];
        x[ii] = s / L(ii, ii);
    }
    return x;
}

}  // namespace ol2o
