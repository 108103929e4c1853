#pragma once

// Minimal reverse-mode automatic differentiation over dense arrays.
//
// A Tape is an append-only list of nodes; insertion order is the topological
// order. Forward values are computed eagerly when an op is recorded and
// backward() walks the tape in reverse, producing an adjoint table. Shapes
// are (rows, cols) matrices; vectors are n-by-1, scalars 1-by-1.

#include <algorithm>
#include <functional>

#include "numerics.hpp"

namespace ol2o::ad {

enum class Op {
    Leaf,
    Add,
    Sub,
    Mul,        // elementwise
    Scale,      // constant scalar multiplier
    SMul,       // scalar node times array
    MatMul,
    MatVec,
    Transpose,
    Reshape,
    Slice,      // contiguous column-major range
    Sum,
    Mean,
    ColSum,
    Square,
    Abs,
    Log,
    Exp,
    Tanh,
    Sigmoid,
    Relu,
    Cos,
    SoftThreshold,       // (x, theta), theta a scalar node
    SelectTopKPassthrough  // (x, theta): top-k |entries| per column bypass the threshold
};

struct Node {
    Op op = Op::Leaf;
    int a = -1;
    int b = -1;
    DenseMatrix val;
    double c = 0.0;                 // Scale factor
    index_t offset = 0;             // Slice start
    int k = 0;                      // SelectTopKPassthrough count per column
    std::vector<std::uint8_t> mask; // frozen passthrough support
};

class Tape;

struct TapeVar {
    Tape* tape = nullptr;
    int idx = -1;

    bool valid() const { return tape != nullptr && idx >= 0; }
};

class Tape {
  public:
    int size() const { return static_cast<int>(nodes_.size()); }
    const Node& node(int i) const { return nodes_[i]; }
    Node& node(int i) { return nodes_[i]; }

    void clear() { nodes_.clear(); }
    void reserve(std::size_t n) { nodes_.reserve(n); }

    TapeVar emplace(Node&& n) {
        nodes_.push_back(std::move(n));
        return TapeVar{this, size() - 1};
    }

    TapeVar constant(DenseMatrix m) {
        Node n;
        n.val = std::move(m);
        return emplace(std::move(n));
    }

    TapeVar constant(const DenseVector& v) {
        DenseMatrix m(v.len(), 1);
        m.data = v.data;
        return constant(std::move(m));
    }

    TapeVar constant(double x) {
        DenseMatrix m(1, 1);
        m(0, 0) = x;
        return constant(std::move(m));
    }

  private:
    std::vector<Node> nodes_;
};

inline const DenseMatrix& value(TapeVar v) { return v.tape->node(v.idx).val; }

inline double scalar_value(TapeVar v) {
    const DenseMatrix& m = value(v);
    require(m.size() == 1, "scalar_value: node is not scalar-shaped");
    return m.data[0];
}

inline DenseVector vector_value(TapeVar v) {
    const DenseMatrix& m = value(v);
    require(m.cols == 1, "vector_value: node is not a column vector");
    DenseVector out(m.rows);
    out.data = m.data;
    return out;
}

namespace detail {

inline void check_same_shape(const DenseMatrix& a, const DenseMatrix& b, const char* op) {
    if (a.rows != b.rows || a.cols != b.cols)
        throw contract_error(std::string(op) + ": operand shapes must match");
}

inline TapeVar unary(TapeVar x, Op op, DenseMatrix val) {
    Node n;
    n.op = op;
    n.a = x.idx;
    n.val = std::move(val);
    return x.tape->emplace(std::move(n));
}

}  // namespace detail

inline TapeVar add(TapeVar x, TapeVar y) {
    const DenseMatrix& a = value(x);
    const DenseMatrix& b = value(y);
    detail::check_same_shape(a, b, "add");
    DenseMatrix out(a.rows, a.cols);
    for (index_t i = 0; i < a.size(); ++i) out.data[i] = a.data[i] + b.data[i];
    Node n;
    n.op = Op::Add;
    n.a = x.idx;
    n.b = y.idx;
    n.val = std::move(out);
    return x.tape->emplace(std::move(n));
}

inline TapeVar sub(TapeVar x, TapeVar y) {
    const DenseMatrix& a = value(x);
    const DenseMatrix& b = value(y);
    detail::check_same_shape(a, b, "sub");
    DenseMatrix out(a.rows, a.cols);
    for (index_t i = 0; i < a.size(); ++i) out.data[i] = a.data[i] - b.data[i];
    Node n;
    n.op = Op::Sub;
    n.a = x.idx;
    n.b = y.idx;
    n.val = std::move(out);
    return x.tape->emplace(std::move(n));
}

inline TapeVar mul(TapeVar x, TapeVar y) {
    const DenseMatrix& a = value(x);
    const DenseMatrix& b = value(y);
    detail::check_same_shape(a, b, "mul");
    DenseMatrix out(a.rows, a.cols);
    for (index_t i = 0; i < a.size(); ++i) out.data[i] = a.data[i] * b.data[i];
    Node n;
    n.op = Op::Mul;
    n.a = x.idx;
    n.b = y.idx;
    n.val = std::move(out);
    return x.tape->emplace(std::move(n));
}

inline TapeVar scale(TapeVar x, double c) {
    const DenseMatrix& a = value(x);
    DenseMatrix out(a.rows, a.cols);
    for (index_t i = 0; i < a.size(); ++i) out.data[i] = c * a.data[i];
    Node n;
    n.op = Op::Scale;
    n.a = x.idx;
    n.c = c;
    n.val = std::move(out);
    return x.tape->emplace(std::move(n));
}

inline TapeVar smul(TapeVar s, TapeVar x) {
    require(value(s).size() == 1, "smul: first operand must be scalar-shaped");
    const double sv = value(s).data[0];
    const DenseMatrix& a = value(x);
    DenseMatrix out(a.rows, a.cols);
    for (index_t i = 0; i < a.size(); ++i) out.data[i] = sv * a.data[i];
    Node n;
    n.op = Op::SMul;
    n.a = s.idx;
    n.b = x.idx;
    n.val = std::move(out);
    return s.tape->emplace(std::move(n));
}

inline TapeVar matmul(TapeVar x, TapeVar y) {
    const DenseMatrix& a = value(x);
    const DenseMatrix& b = value(y);
    require(a.cols == b.rows, "matmul: inner dimensions must agree");
    DenseMatrix out(a.rows, b.cols);
    gemm(false, false, 1.0, a, b, 0.0, out);
    Node n;
    n.op = Op::MatMul;
    n.a = x.idx;
    n.b = y.idx;
    n.val = std::move(out);
    return x.tape->emplace(std::move(n));
}

inline TapeVar matvec(TapeVar A, TapeVar x) {
    const DenseMatrix& a = value(A);
    const DenseMatrix& b = value(x);
    require(b.cols == 1, "matvec: x must be a column vector");
    require(a.cols == b.rows, "matvec: A.cols must equal x.len");
    DenseMatrix out(a.rows, 1);
    gemm(false, false, 1.0, a, b, 0.0, out);
    Node n;
    n.op = Op::MatVec;
    n.a = A.idx;
    n.b = x.idx;
    n.val = std::move(out);
    return A.tape->emplace(std::move(n));
}

inline TapeVar transpose(TapeVar x) {
    const DenseMatrix& a = value(x);
    DenseMatrix out(a.cols, a.rows);
    for (index_t j = 0; j < a.cols; ++j)
        for (index_t i = 0; i < a.rows; ++i) out(j, i) = a(i, j);
    return detail::unary(x, Op::Transpose, std::move(out));
}

inline TapeVar reshape(TapeVar x, index_t r, index_t c) {
    const DenseMatrix& a = value(x);
    require(r * c == a.size(), "reshape: element count must be preserved");
    DenseMatrix out(r, c);
    out.data = a.data;
    return detail::unary(x, Op::Reshape, std::move(out));
}

// Copies the contiguous column-major range [offset, offset + r*c) into an
// r-by-c node; the adjoint scatters back into that range.
inline TapeVar slice(TapeVar x, index_t offset, index_t r, index_t c) {
    const DenseMatrix& a = value(x);
    require(offset + r * c <= a.size(), "slice: range out of bounds");
    DenseMatrix out(r, c);
    for (index_t i = 0; i < r * c; ++i) out.data[i] = a.data[offset + i];
    Node n;
    n.op = Op::Slice;
    n.a = x.idx;
    n.offset = offset;
    n.val = std::move(out);
    return x.tape->emplace(std::move(n));
}

inline TapeVar sum(TapeVar x) {
    const DenseMatrix& a = value(x);
    double s = 0.0;
    for (double v : a.data) s += v;
    DenseMatrix out(1, 1);
    out.data[0] = s;
    return detail::unary(x, Op::Sum, std::move(out));
}

inline TapeVar mean(TapeVar x) {
    const DenseMatrix& a = value(x);
    require(a.size() > 0, "mean: operand is empty");
    double s = 0.0;
    for (double v : a.data) s += v;
    DenseMatrix out(1, 1);
    out.data[0] = s / static_cast<double>(a.size());
    return detail::unary(x, Op::Mean, std::move(out));
}

inline TapeVar colsum(TapeVar x) {
    const DenseMatrix& a = value(x);
    DenseMatrix out(1, a.cols);
    for (index_t j = 0; j < a.cols; ++j) {
        double s = 0.0;
        for (index_t i = 0; i < a.rows; ++i) s += a(i, j);
        out(0, j) = s;
    }
    return detail::unary(x, Op::ColSum, std::move(out));
}

#define OL2O_AD_ELEMENTWISE(NAME, OPK, EXPR)                                 \
    inline TapeVar NAME(TapeVar x) {                                        \
        const DenseMatrix& a = value(x);                                    \
        DenseMatrix out(a.rows, a.cols);                                    \
        for (index_t i = 0; i < a.size(); ++i) {                            \
            const double v = a.data[i];                                     \
            (void)v;                                                        \
            out.data[i] = (EXPR);                                           \
        }                                                                   \
        return detail::unary(x, OPK, std::move(out));                       \
    }

OL2O_AD_ELEMENTWISE(square, Op::Square, v * v)
OL2O_AD_ELEMENTWISE(abs, Op::Abs, std::fabs(v))
OL2O_AD_ELEMENTWISE(log, Op::Log, std::log(v))
OL2O_AD_ELEMENTWISE(exp, Op::Exp, std::exp(v))
OL2O_AD_ELEMENTWISE(tanh, Op::Tanh, std::tanh(v))
OL2O_AD_ELEMENTWISE(sigmoid, Op::Sigmoid, 1.0 / (1.0 + std::exp(-v)))
OL2O_AD_ELEMENTWISE(relu, Op::Relu, v > 0.0 ? v : 0.0)
OL2O_AD_ELEMENTWISE(cos, Op::Cos, std::cos(v))

#undef OL2O_AD_ELEMENTWISE

inline TapeVar soft_threshold(TapeVar x, TapeVar theta) {
    require(value(theta).size() == 1, "soft_threshold: theta must be scalar-shaped");
    const double th = value(theta).data[0];
    const DenseMatrix& a = value(x);
    DenseMatrix out(a.rows, a.cols);
    for (index_t i = 0; i < a.size(); ++i) out.data[i] = ol2o::soft_threshold(a.data[i], th);
    Node n;
    n.op = Op::SoftThreshold;
    n.a = x.idx;
    n.b = theta.idx;
    n.val = std::move(out);
    return x.tape->emplace(std::move(n));
}

// Support selection: per column, the k largest-|.| entries of x pass through
// unchanged; the rest are soft-thresholded. The support chosen on forward
// values is frozen for the backward pass (ties break to the lower index).
inline TapeVar select_topk_passthrough(TapeVar x, TapeVar theta, int k) {
    require(value(theta).size() == 1, "select_topk_passthrough: theta must be scalar");
    require(k >= 0, "select_topk_passthrough: k must be >= 0");
    const double th = value(theta).data[0];
    const DenseMatrix& a = value(x);
    const index_t rows = a.rows;
    const int kk = static_cast<int>(std::min<index_t>(static_cast<index_t>(k), rows));
    DenseMatrix out(rows, a.cols);
    std::vector<std::uint8_t> mask(a.size(), 0);
    std::vector<index_t> order(rows);
    for (index_t j = 0; j < a.cols; ++j) {
        const double* col = a.data.data() + j * rows;
        for (index_t i = 0; i < rows; ++i) order[i] = i;
        std::partial_sort(order.begin(), order.begin() + kk, order.end(),
                          [col](index_t p, index_t q) {
                              const double ap = std::fabs(col[p]);
                              const double aq = std::fabs(col[q]);
                              return ap > aq || (ap == aq && p < q);
                          });
        for (int t = 0; t < kk; ++t) mask[j * rows + order[t]] = 1;
        for (index_t i = 0; i < rows; ++i) {
            const index_t at = j * rows + i;
            out.data[at] = mask[at] ? col[i] : ol2o::soft_threshold(col[i], th);
        }
    }
    Node n;
    n.op = Op::SelectTopKPassthrough;
    n.a = x.idx;
    n.b = theta.idx;
    n.k = kk;
    n.mask = std::move(mask);
    n.val = std::move(out);
    return x.tape->emplace(std::move(n));
}

// ---------------------------------------------------------------------------
// Backward pass.
// ---------------------------------------------------------------------------
class Adjoints {
  public:
    explicit Adjoints(int n) : table_(n) {}

    const DenseMatrix& grad(TapeVar v) const {
        DenseMatrix& g = table_[v.idx];
        // Unreached nodes have zero adjoint; materialize lazily.
        if (g.size() == 0) g = DenseMatrix(value(v).rows, value(v).cols, 0.0);
        return g;
    }

    DenseVector grad_vector(TapeVar v) const {
        const DenseMatrix& g = grad(v);
        DenseVector out(g.rows * g.cols);
        out.data = g.data;
        return out;
    }

    double grad_scalar(TapeVar v) const {
        const DenseMatrix& g = grad(v);
        require(g.size() == 1, "grad_scalar: node is not scalar-shaped");
        return g.data[0];
    }

    DenseMatrix& slot(int i) { return table_[i]; }
    bool touched(int i) const { return table_[i].size() != 0; }

  private:
    mutable std::vector<DenseMatrix> table_;
};

namespace detail {

inline DenseMatrix& touch(Adjoints& adj, const Tape& tape, int i) {
    DenseMatrix& g = adj.slot(i);
    if (g.size() == 0) {
        const DenseMatrix& v = tape.node(i).val;
        g = DenseMatrix(v.rows, v.cols, 0.0);
    }
    return g;
}

}  // namespace detail

// Adjoint of every node reachable from `loss`: d loss / d node. Reads the
// frozen tape only, so calling it twice yields identical tables.
inline Adjoints backward(TapeVar loss) {
    Tape& tape = *loss.tape;
    require(value(loss).size() == 1, "backward: loss must be scalar-shaped");
    Adjoints adj(tape.size());
    detail::touch(adj, tape, loss.idx).data[0] = 1.0;

    for (int i = loss.idx; i >= 0; --i) {
        if (!adj.touched(i)) continue;
        const Node& n = tape.node(i);
        if (n.op == Op::Leaf) continue;
        // Parents precede children on the tape, so parent slots never alias g.
        const DenseMatrix& g = adj.slot(i);
        const DenseMatrix& av = tape.node(n.a).val;
        switch (n.op) {
            case Op::Add: {
                DenseMatrix& da = detail::touch(adj, tape, n.a);
                DenseMatrix& db = detail::touch(adj, tape, n.b);
                for (index_t t = 0; t < g.size(); ++t) {
                    da.data[t] += g.data[t];
                    db.data[t] += g.data[t];
                }
                break;
            }
            case Op::Sub: {
                DenseMatrix& da = detail::touch(adj, tape, n.a);
                DenseMatrix& db = detail::touch(adj, tape, n.b);
                for (index_t t = 0; t < g.size(); ++t) {
                    da.data[t] += g.data[t];
                    db.data[t] -= g.data[t];
                }
                break;
            }
            case Op::Mul: {
                const DenseMatrix& bv = tape.node(n.b).val;
                DenseMatrix& da = detail::touch(adj, tape, n.a);
                DenseMatrix& db = detail::touch(adj, tape, n.b);
                for (index_t t = 0; t < g.size(); ++t) {
                    da.data[t] += g.data[t] * bv.data[t];
                    db.data[t] += g.data[t] * av.data[t];
                }
                break;
            }
            case Op::Scale: {
                DenseMatrix& da = detail::touch(adj, tape, n.a);
                for (index_t t = 0; t < g.size(); ++t) da.data[t] += n.c * g.data[t];
                break;
            }
            case Op::SMul: {
                const double sv = tape.node(n.a).val.data[0];
                const DenseMatrix& xv = tape.node(n.b).val;
                DenseMatrix& ds = detail::touch(adj, tape, n.a);
                DenseMatrix& dx = detail::touch(adj, tape, n.b);
                double acc = 0.0;
                for (index_t t = 0; t < g.size(); ++t) {
                    dx.data[t] += sv * g.data[t];
                    acc += g.data[t] * xv.data[t];
                }
                ds.data[0] += acc;
                break;
            }
            case Op::MatMul:
            case Op::MatVec: {
                const DenseMatrix& bv = tape.node(n.b).val;
                gemm(false, true, 1.0, g, bv, 1.0, detail::touch(adj, tape, n.a));
                gemm(true, false, 1.0, av, g, 1.0, detail::touch(adj, tape, n.b));
                break;
            }
            case Op::Transpose: {
                DenseMatrix& da = detail::touch(adj, tape, n.a);
                for (index_t jj = 0; jj < g.cols; ++jj)
                    for (index_t ii = 0; ii < g.rows; ++ii) da(jj, ii) += g(ii, jj);
                break;
            }
            case Op::Reshape: {
                DenseMatrix& da = detail::touch(adj, tape, n.a);
                for (index_t t = 0; t < g.size(); ++t) da.data[t] += g.data[t];
                break;
            }
            case Op::Slice: {
                DenseMatrix& da = detail::touch(adj, tape, n.a);
                for (index_t t = 0; t < g.size(); ++t) da.data[n.offset + t] += g.data[t];
                break;
            }
            case Op::Sum: {
                DenseMatrix& da = detail::touch(adj, tape, n.a);
                const double gg = g.data[0];
                for (index_t t = 0; t < da.size(); ++t) da.data[t] += gg;
                break;
            }
            case Op::Mean: {
                DenseMatrix& da = detail::touch(adj, tape, n.a);
                const double gg = g.data[0] / static_cast<double>(av.size());
                for (index_t t = 0; t < da.size(); ++t) da.data[t] += gg;
                break;
            }
            case Op::ColSum: {
                DenseMatrix& da = detail::touch(adj, tape, n.a);
                for (index_t jj = 0; jj < da.cols; ++jj) {
                    const double gg = g(0, jj);
                    for (index_t ii = 0; ii < da.rows; ++ii) da(ii, jj) += gg;
                }
                break;
            }
            case Op::Square: {
                DenseMatrix& da = detail::touch(adj, tape, n.a);
                for (index_t t = 0; t < g.size(); ++t)
                    da.data[t] += 2.0 * av.data[t] * g.data[t];
                break;
            }
            case Op::Abs: {
                // Subgradient 0 at the kink.
                DenseMatrix& da = detail::touch(adj, tape, n.a);
                for (index_t t = 0; t < g.size(); ++t) {
                    const double x = av.data[t];
                    da.data[t] += (x > 0.0 ? 1.0 : x < 0.0 ? -1.0 : 0.0) * g.data[t];
                }
                break;
            }
            case Op::Log: {
                DenseMatrix& da = detail::touch(adj, tape, n.a);
                for (index_t t = 0; t < g.size(); ++t) da.data[t] += g.data[t] / av.data[t];
                break;
            }
            case Op::Exp: {
                DenseMatrix& da = detail::touch(adj, tape, n.a);
                for (index_t t = 0; t < g.size(); ++t) da.data[t] += n.val.data[t] * g.data[t];
                break;
            }
            case Op::Tanh: {
                DenseMatrix& da = detail::touch(adj, tape, n.a);
                for (index_t t = 0; t < g.size(); ++t) {
                    const double y = n.val.data[t];
                    da.data[t] += (1.0 - y * y) * g.data[t];
                }
                break;
            }
            case Op::Sigmoid: {
                DenseMatrix& da = detail::touch(adj, tape, n.a);
                for (index_t t = 0; t < g.size(); ++t) {
                    const double y = n.val.data[t];
                    da.data[t] += y * (1.0 - y) * g.data[t];
                }
                break;
            }
            case Op::Relu: {
                DenseMatrix& da = detail::touch(adj, tape, n.a);
                for (index_t t = 0; t < g.size(); ++t)
                    da.data[t] += (av.data[t] > 0.0 ? 1.0 : 0.0) * g.data[t];
                break;
            }
            case Op::Cos: {
                DenseMatrix& da = detail::touch(adj, tape, n.a);
                for (index_t t = 0; t < g.size(); ++t)
                    da.data[t] -= std::sin(av.data[t]) * g.data[t];
                break;
            }
            case Op::SoftThreshold: {
                const double th = tape.node(n.b).val.data[0];
                DenseMatrix& da = detail::touch(adj, tape, n.a);
                DenseMatrix& dth = detail::touch(adj, tape, n.b);
                double acc = 0.0;
                for (index_t t = 0; t < g.size(); ++t) {
                    const double x = av.data[t];
                    if (std::fabs(x) > th) {
                        da.data[t] += g.data[t];
                        acc -= (x > 0.0 ? 1.0 : -1.0) * g.data[t];
                    }
                }
                dth.data[0] += acc;
                break;
            }
            case Op::SelectTopKPassthrough: {
                const double th = tape.node(n.b).val.data[0];
                DenseMatrix& da = detail::touch(adj, tape, n.a);
                DenseMatrix& dth = detail::touch(adj, tape, n.b);
                double acc = 0.0;
                for (index_t t = 0; t < g.size(); ++t) {
                    const double x = av.data[t];
                    if (n.mask[t]) {
                        da.data[t] += g.data[t];
                    } else if (std::fabs(x) > th) {
                        da.data[t] += g.data[t];
                        acc -= (x > 0.0 ? 1.0 : -1.0) * g.data[t];
                    }
                }
                dth.data[0] += acc;
                break;
            }
            case Op::Leaf:
                break;
        }
    }
    return adj;
}

// ---------------------------------------------------------------------------
// Gradient checking against central finite differences.
// ---------------------------------------------------------------------------

// Builds the program at `point`, then compares the AD gradient of each input
// against central differences. Returns max_i |g_ad - g_fd| / (1 + |g_fd|).
using Program = std::function<TapeVar(Tape&, const std::vector<TapeVar>&)>;

inline double grad_check(const Program& f, const std::vector<DenseMatrix>& point,
                         double h = 1e-6) {
    Tape tape;
    std::vector<TapeVar> inputs;
    inputs.reserve(point.size());
    for (const DenseMatrix& p : point) inputs.push_back(tape.constant(p));
    TapeVar loss = f(tape, inputs);
    require(value(loss).size() == 1, "grad_check: program must be scalar-valued");
    Adjoints adj = backward(loss);

    auto eval_at = [&](const std::vector<DenseMatrix>& pt) {
        Tape t2;
        std::vector<TapeVar> in2;
        in2.reserve(pt.size());
        for (const DenseMatrix& p : pt) in2.push_back(t2.constant(p));
        return scalar_value(f(t2, in2));
    };

    double worst = 0.0;
    std::vector<DenseMatrix> probe = point;
    for (std::size_t p = 0; p < point.size(); ++p) {
        const DenseMatrix& g_ad = adj.grad(inputs[p]);
        for (index_t t = 0; t < point[p].size(); ++t) {
            const double orig = probe[p].data[t];
            probe[p].data[t] = orig + h;
            const double fp = eval_at(probe);
            probe[p].data[t] = orig - h;
            const double fm = eval_at(probe);
            probe[p].data[t] = orig;
            const double g_fd = (fp - fm) / (2.0 * h);
            const double err = std::fabs(g_ad.data[t] - g_fd) / (1.0 + std::fabs(g_fd));
            if (err > worst) worst = err;
        }
    }
    return worst;
}

}  // namespace ol2o::ad
