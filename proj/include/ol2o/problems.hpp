#pragma once

// Generators and objective evaluators for the benchmark testbeds: sparse
// recovery, LASSO, the generalized Rastrigin family and MLP training. All
// generators are pure functions of (seed, config).

#include <fstream>
#include <optional>

#include "autodiff.hpp"
#include "numerics.hpp"

namespace ol2o {

// Thrown on malformed external files (IDX datasets, checkpoints).
struct format_error : std::runtime_error {
    explicit format_error(const std::string& what) : std::runtime_error(what) {}
};

}  // namespace ol2o

namespace ol2o::problems {

// ---------------------------------------------------------------------------
// Sparse recovery: b = A x* + eps, columns of A unit-normalized, x* drawn
// from Ber(0.1) * N(0,1).
// ---------------------------------------------------------------------------

struct SparseSuite {
    DenseMatrix A;
    std::vector<DenseVector> x_star;
    std::vector<DenseVector> b;
    std::optional<double> snr_db;
    index_t resample_count = 0;  // all-zero x* draws that were rejected

    index_t count() const { return x_star.size(); }
    index_t m() const { return A.rows; }
    index_t n() const { return A.cols; }
};

inline void normalize_columns(DenseMatrix& A) {
    for (index_t j = 0; j < A.cols; ++j) {
        double s = 0.0;
        for (index_t i = 0; i < A.rows; ++i) s += A(i, j) * A(i, j);
        const double inv = 1.0 / std::sqrt(s);
        for (index_t i = 0; i < A.rows; ++i) A(i, j) *= inv;
    }
}

// Incoherent mode: A_ij ~ N(0, 1/m), then unit-normalize columns.
// Coherent mode: column j = sqrt(rho) * u_{g(j)} + sqrt(1-rho) * v_j with one
// shared u per group of `group_size` columns, then unit-normalize; pairs
// within a group have coherence concentrating near rho.
inline DenseMatrix gen_measurement_matrix(RngStream& rng, index_t m, index_t n,
                                          bool coherent = false, double rho = 0.9,
                                          index_t group_size = 4) {
    require(m < n, "gen_measurement_matrix: m must be < n");
    DenseMatrix A(m, n);
    if (!coherent) {
        const double sd = 1.0 / std::sqrt(static_cast<double>(m));
        for (index_t j = 0; j < n; ++j)
            for (index_t i = 0; i < m; ++i) A(i, j) = sd * rng.next_gaussian();
    } else {
        require(rho >= 0.0 && rho <= 1.0, "gen_measurement_matrix: rho in [0,1]");
        const double sd = 1.0 / std::sqrt(static_cast<double>(m));
        const index_t groups = (n + group_size - 1) / group_size;
        DenseMatrix U(m, groups);
        for (index_t g = 0; g < groups; ++g)
            for (index_t i = 0; i < m; ++i) U(i, g) = sd * rng.next_gaussian();
        const double wu = std::sqrt(rho);
        const double wv = std::sqrt(1.0 - rho);
        for (index_t j = 0; j < n; ++j) {
            const index_t g = j / group_size;
            for (index_t i = 0; i < m; ++i)
                A(i, j) = wu * U(i, g) + wv * sd * rng.next_gaussian();
        }
    }
    normalize_columns(A);
    return A;
}

namespace detail {

inline DenseVector draw_sparse_signal(RngStream& rng, index_t n, double density) {
    DenseVector x(n, 0.0);
    for (index_t i = 0; i < n; ++i) {
        const bool on = rng.next_unit() < density;
        if (on) x[i] = rng.next_gaussian();
    }
    return x;
}

}  // namespace detail

// Noiseless: b = A x*. Noisy: eps scaled per instance so that
// 10 log10(||A x*||^2 / ||eps||^2) equals snr_db exactly. All-zero x* draws
// are resampled (and counted) so downstream metrics never divide by zero.
inline SparseSuite gen_sparse_instances(RngStream& rng, const DenseMatrix& A,
                                        index_t count,
                                        std::optional<double> snr_db = std::nullopt,
                                        double density = 0.1) {
    require(count >= 1, "gen_sparse_instances: count must be >= 1");
    SparseSuite suite;
    suite.A = A;
    suite.snr_db = snr_db;
    suite.x_star.reserve(count);
    suite.b.reserve(count);
    const index_t n = A.cols;
    for (index_t q = 0; q < count; ++q) {
        DenseVector x = detail::draw_sparse_signal(rng, n, density);
        while (norm_sq(x) == 0.0) {
            ++suite.resample_count;
            x = detail::draw_sparse_signal(rng, n, density);
        }
        DenseVector b = matvec(A, x);
        if (snr_db) {
            DenseVector eps = sample_gaussian(rng, A.rows, 0.0, 1.0);
            const double signal = norm_sq(b);
            const double target_noise = signal / std::pow(10.0, *snr_db / 10.0);
            const double s = std::sqrt(target_noise / norm_sq(eps));
            axpy(s, eps, b);
        }
        suite.x_star.push_back(std::move(x));
        suite.b.push_back(std::move(b));
    }
    return suite;
}

// ---------------------------------------------------------------------------
// LASSO: f(x) = 1/2 ||Ax - b||^2 + lambda ||x||_1.
// ---------------------------------------------------------------------------

struct LassoProblem {
    DenseMatrix A;
    DenseVector b;
    double lambda = 0.005;
};

inline double lasso_value(const DenseMatrix& A, const DenseVector& b, double lambda,
                          const DenseVector& x, DenseVector* subgrad = nullptr) {
    DenseVector r = matvec(A, x);
    for (index_t i = 0; i < r.len(); ++i) r[i] -= b[i];
    double value = 0.5 * norm_sq(r);
    for (index_t i = 0; i < x.len(); ++i) value += lambda * std::fabs(x[i]);
    if (subgrad) {
        *subgrad = matvec_t(A, r);
        for (index_t i = 0; i < x.len(); ++i) {
            const double s = x[i] > 0.0 ? 1.0 : x[i] < 0.0 ? -1.0 : 0.0;
            (*subgrad)[i] += lambda * s;
        }
    }
    return value;
}

inline std::pair<double, DenseVector> lasso_value_and_subgrad(const LassoProblem& p,
                                                              const DenseVector& x) {
    DenseVector g;
    const double v = lasso_value(p.A, p.b, p.lambda, x, &g);
    return {v, std::move(g)};
}

// Records the LASSO objective on a tape as a function of x.
inline ad::TapeVar lasso_record(ad::Tape& tape, const DenseMatrix& A,
                                const DenseVector& b, double lambda, ad::TapeVar x) {
    ad::TapeVar r = ad::sub(ad::matvec(tape.constant(A), x), tape.constant(b));
    ad::TapeVar quad = ad::scale(ad::sum(ad::square(r)), 0.5);
    ad::TapeVar reg = ad::scale(ad::sum(ad::abs(x)), lambda);
    return ad::add(quad, reg);
}

// ---------------------------------------------------------------------------
// Generalized Rastrigin family:
// f(x) = 1/2 ||A x - b||^2 - alpha * c . cos(2 pi x) + alpha n.
// The classic Rastrigin function is A = I, b = 0, c = 1. alpha = 0 with c = 0
// degenerates to the random quadratic family.
// ---------------------------------------------------------------------------

inline constexpr double kTwoPi = 6.283185307179586476925286766559;

struct RastriginInstance {
    DenseMatrix A;
    DenseVector b;
    DenseVector c;
    double alpha = 10.0;

    index_t dim() const { return b.len(); }

    static RastriginInstance classic(index_t n, double alpha = 10.0) {
        RastriginInstance r;
        r.A = DenseMatrix::identity(n);
        r.b = DenseVector(n, 0.0);
        r.c = DenseVector(n, 1.0);
        r.alpha = alpha;
        return r;
    }
};

inline double rastrigin_value(const RastriginInstance& r, const DenseVector& x,
                              DenseVector* grad = nullptr) {
    const index_t n = x.len();
    require(n == r.dim(), "rastrigin_value: dimension mismatch");
    DenseVector res = matvec(r.A, x);
    for (index_t i = 0; i < res.len(); ++i) res[i] -= r.b[i];
    double value = 0.5 * norm_sq(res);
    for (index_t i = 0; i < n; ++i)
        value += r.alpha * (1.0 - r.c[i] * std::cos(kTwoPi * x[i]));
    if (grad) {
        *grad = matvec_t(r.A, res);
        for (index_t i = 0; i < n; ++i)
            (*grad)[i] += kTwoPi * r.alpha * r.c[i] * std::sin(kTwoPi * x[i]);
    }
    return value;
}

inline std::pair<double, DenseVector> rastrigin_value_and_grad(
    const RastriginInstance& r, const DenseVector& x) {
    DenseVector g;
    const double v = rastrigin_value(r, x, &g);
    return {v, std::move(g)};
}

inline ad::TapeVar rastrigin_record(ad::Tape& tape, const RastriginInstance& r,
                                    ad::TapeVar x) {
    ad::TapeVar res = ad::sub(ad::matvec(tape.constant(r.A), x), tape.constant(r.b));
    ad::TapeVar quad = ad::scale(ad::sum(ad::square(res)), 0.5);
    if (r.alpha == 0.0) return quad;
    ad::TapeVar cosx = ad::cos(ad::scale(x, kTwoPi));
    ad::TapeVar osc = ad::scale(ad::sum(ad::mul(tape.constant(r.c), cosx)), -r.alpha);
    ad::TapeVar shift = tape.constant(r.alpha * static_cast<double>(ad::value(x).rows));
    return ad::add(ad::add(quad, osc), shift);
}

inline std::vector<RastriginInstance> gen_rastrigin_suite(RngStream& rng, index_t n,
                                                          index_t count,
                                                          double alpha = 10.0) {
    std::vector<RastriginInstance> out;
    out.reserve(count);
    for (index_t q = 0; q < count; ++q) {
        RastriginInstance r;
        r.A = DenseMatrix(n, n);
        for (double& v : r.A.data) v = rng.next_gaussian();
        r.b = sample_gaussian(rng, n, 0.0, 1.0);
        r.c = sample_gaussian(rng, n, 0.0, 1.0);
        r.alpha = alpha;
        out.push_back(std::move(r));
    }
    return out;
}

// Random quadratics 1/2 ||A x - b||^2: the alpha = 0, c = 0 member of the family.
inline std::vector<RastriginInstance> gen_quadratic_suite(RngStream& rng, index_t n,
                                                          index_t count) {
    std::vector<RastriginInstance> out = gen_rastrigin_suite(rng, n, count, 0.0);
    for (RastriginInstance& r : out) r.c = DenseVector(n, 0.0);
    return out;
}

// ---------------------------------------------------------------------------
// MLP training task: 784 -> 20 -> 10 with sigmoid or relu, softmax
// cross-entropy loss. Parameters live in one flat vector packed as
// [vec(W1); b1; vec(W2); b2], column-major.
// ---------------------------------------------------------------------------

enum class Activation { Sigmoid, Relu };

struct MlpTask {
    static constexpr index_t kIn = 784;
    static constexpr index_t kHidden = 20;
    static constexpr index_t kOut = 10;

    Activation activation = Activation::Sigmoid;
    double init_variance = 0.01;

    static constexpr index_t param_count() {
        return kHidden * kIn + kHidden + kOut * kHidden + kOut;
    }
};

struct MlpBatch {
    DenseMatrix images;       // 784 x B, columns in [0,1]
    std::vector<int> labels;  // size B, values 0..9
};

inline DenseVector mlp_init(const MlpTask& task, RngStream& rng) {
    return sample_gaussian(rng, MlpTask::param_count(), 0.0, task.init_variance);
}

// Cross-entropy of the 784-20-10 network as a tape program of the flat
// parameter vector node.
inline ad::TapeVar mlp_record_loss(ad::Tape& tape, ad::TapeVar params,
                                   const MlpTask& task, const MlpBatch& batch) {
    const index_t B = batch.labels.size();
    require(B >= 1, "mlp_record_loss: batch must be nonempty");
    require(ad::value(params).rows == MlpTask::param_count() &&
                ad::value(params).cols == 1,
            "mlp_record_loss: params length must match the architecture");
    constexpr index_t H = MlpTask::kHidden, In = MlpTask::kIn, Out = MlpTask::kOut;

    index_t at = 0;
    ad::TapeVar W1 = ad::slice(params, at, H, In);
    at += H * In;
    ad::TapeVar b1 = ad::slice(params, at, H, 1);
    at += H;
    ad::TapeVar W2 = ad::slice(params, at, Out, H);
    at += Out * H;
    ad::TapeVar b2 = ad::slice(params, at, Out, 1);

    ad::TapeVar X = tape.constant(batch.images);
    ad::TapeVar ones_row = tape.constant(DenseMatrix(1, B, 1.0));
    ad::TapeVar Z1 = ad::add(ad::matmul(W1, X), ad::matmul(b1, ones_row));
    ad::TapeVar Hout = task.activation == Activation::Sigmoid ? ad::sigmoid(Z1)
                                                              : ad::relu(Z1);
    ad::TapeVar Z2 = ad::add(ad::matmul(W2, Hout), ad::matmul(b2, ones_row));

    // Stable log-sum-exp: subtract the detached columnwise max (constant
    // shifts cancel in the derivative).
    const DenseMatrix& zv = ad::value(Z2);
    DenseMatrix mx(1, B);
    for (index_t j = 0; j < B; ++j) {
        double m = zv(0, j);
        for (index_t i = 1; i < Out; ++i) m = std::max(m, zv(i, j));
        mx(0, j) = m;
    }
    ad::TapeVar M = tape.constant(mx);
    ad::TapeVar Zs = ad::sub(Z2, ad::matmul(tape.constant(DenseMatrix(Out, 1, 1.0)), M));
    ad::TapeVar lse = ad::add(ad::log(ad::colsum(ad::exp(Zs))), M);

    DenseMatrix onehot(Out, B, 0.0);
    for (index_t j = 0; j < B; ++j) {
        require(batch.labels[j] >= 0 && batch.labels[j] < static_cast<int>(Out),
                "mlp_record_loss: label out of range");
        onehot(static_cast<index_t>(batch.labels[j]), j) = 1.0;
    }
    ad::TapeVar picked = ad::sum(ad::mul(Z2, tape.constant(onehot)));
    return ad::scale(ad::sub(ad::sum(lse), picked), 1.0 / static_cast<double>(B));
}

inline std::pair<double, DenseVector> mlp_loss_and_grad(const MlpTask& task,
                                                        const DenseVector& params,
                                                        const MlpBatch& batch) {
    ad::Tape tape;
    ad::TapeVar p = tape.constant(params);
    ad::TapeVar loss = mlp_record_loss(tape, p, task, batch);
    ad::Adjoints adj = ad::backward(loss);
    return {ad::scalar_value(loss), adj.grad_vector(p)};
}

inline double mlp_loss(const MlpTask& task, const DenseVector& params,
                       const MlpBatch& batch) {
    ad::Tape tape;
    ad::TapeVar p = tape.constant(params);
    return ad::scalar_value(mlp_record_loss(tape, p, task, batch));
}

// ---------------------------------------------------------------------------
// Image datasets: the de-facto IDX format if files are present, otherwise a
// deterministic synthetic 10-class substitute so the repo runs offline.
// ---------------------------------------------------------------------------

struct Dataset {
    DenseMatrix images;       // 784 x N
    std::vector<int> labels;  // size N
    bool synthetic = false;

    index_t count() const { return labels.size(); }
};

namespace detail {

inline std::uint32_t read_be32(std::istream& in, const char* what) {
    unsigned char b[4];
    if (!in.read(reinterpret_cast<char*>(b), 4))
        throw format_error(std::string("idx: truncated while reading ") + what);
    return (std::uint32_t(b[0]) << 24) | (std::uint32_t(b[1]) << 16) |
           (std::uint32_t(b[2]) << 8) | std::uint32_t(b[3]);
}

}  // namespace detail

inline DenseMatrix load_idx_images(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw format_error("idx: cannot open " + path);
    const std::uint32_t magic = detail::read_be32(in, "magic");
    if (magic != 0x00000803u)
        throw format_error("idx: bad image magic in " + path);
    const std::uint32_t count = detail::read_be32(in, "count");
    const std::uint32_t rows = detail::read_be32(in, "rows");
    const std::uint32_t cols = detail::read_be32(in, "cols");
    const index_t pixels = static_cast<index_t>(rows) * cols;
    DenseMatrix out(pixels, count);
    std::vector<unsigned char> buf(pixels);
    for (std::uint32_t q = 0; q < count; ++q) {
        if (!in.read(reinterpret_cast<char*>(buf.data()), pixels))
            throw format_error("idx: truncated image payload in " + path);
        for (index_t i = 0; i < pixels; ++i)
            out(i, q) = static_cast<double>(buf[i]) / 255.0;
    }
    return out;
}

inline std::vector<int> load_idx_labels(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw format_error("idx: cannot open " + path);
    const std::uint32_t magic = detail::read_be32(in, "magic");
    if (magic != 0x00000801u)
        throw format_error("idx: bad label magic in " + path);
    const std::uint32_t count = detail::read_be32(in, "count");
    std::vector<unsigned char> buf(count);
    if (count && !in.read(reinterpret_cast<char*>(buf.data()), count))
        throw format_error("idx: truncated label payload in " + path);
    return std::vector<int>(buf.begin(), buf.end());
}

// Class-conditional Gaussian blobs rendered to 28x28; classes are balanced
// round-robin and the whole dataset is a pure function of the seed.
inline Dataset synthetic_digits(RngStream& rng, index_t count) {
    constexpr index_t kSide = 28;
    Dataset ds;
    ds.synthetic = true;
    ds.images = DenseMatrix(kSide * kSide, count);
    ds.labels.resize(count);

    // Three anchor blobs per class, fixed by a class-derived stream.
    double cx[10][3], cy[10][3];
    for (int c = 0; c < 10; ++c) {
        RngStream cls = rng.derived(9000 + c);
        for (int k = 0; k < 3; ++k) {
            cx[c][k] = cls.next_uniform(6.0, 22.0);
            cy[c][k] = cls.next_uniform(6.0, 22.0);
        }
    }
    for (index_t q = 0; q < count; ++q) {
        const int c = static_cast<int>(q % 10);
        ds.labels[q] = c;
        for (int k = 0; k < 3; ++k) {
            const double jx = cx[c][k] + 1.2 * rng.next_gaussian();
            const double jy = cy[c][k] + 1.2 * rng.next_gaussian();
            const double amp = 0.7 + 0.3 * rng.next_unit();
            for (index_t y = 0; y < kSide; ++y) {
                for (index_t x = 0; x < kSide; ++x) {
                    const double dx = static_cast<double>(x) - jx;
                    const double dy = static_cast<double>(y) - jy;
                    ds.images(y * kSide + x, q) +=
                        amp * std::exp(-(dx * dx + dy * dy) / (2.0 * 2.0 * 2.0));
                }
            }
        }
        for (index_t i = 0; i < kSide * kSide; ++i) {
            double v = ds.images(i, q) + 0.02 * rng.next_unit();
            ds.images(i, q) = std::min(1.0, std::max(0.0, v));
        }
    }
    return ds;
}

// Loads the standard IDX pair from `dir` if present, otherwise falls back to
// the synthetic dataset (flagged in the result).
inline Dataset load_digits(const std::string& dir, RngStream& rng,
                           index_t synthetic_count = 4096) {
    const std::string img = dir + "/train-images-idx3-ubyte";
    const std::string lab = dir + "/train-labels-idx1-ubyte";
    std::ifstream probe(img, std::ios::binary);
    if (probe) {
        Dataset ds;
        ds.images = load_idx_images(img);
        ds.labels = load_idx_labels(lab);
        if (ds.images.cols != ds.labels.size())
            throw format_error("idx: image/label count mismatch in " + dir);
        ds.synthetic = false;
        return ds;
    }
    return synthetic_digits(rng, synthetic_count);
}

inline MlpBatch sample_batch(const Dataset& ds, RngStream& rng, index_t batch_size) {
    require(ds.count() > 0, "sample_batch: dataset is empty");
    MlpBatch out;
    out.images = DenseMatrix(ds.images.rows, batch_size);
    out.labels.resize(batch_size);
    for (index_t j = 0; j < batch_size; ++j) {
        const index_t pick = static_cast<index_t>(rng.next_below(ds.count()));
        for (index_t i = 0; i < ds.images.rows; ++i)
            out.images(i, j) = ds.images(i, pick);
        out.labels[j] = ds.labels[pick];
    }
    return out;
}

}  // namespace ol2o::problems
