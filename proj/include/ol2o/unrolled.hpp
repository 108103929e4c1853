#pragma once

// Model-based L2O: LISTA-family unrolled networks, their analytic (ISTA
// equivalent) initialization, progressive training and the NMSE metric.

#include <limits>
#include <optional>
#include <string>

#include "analytic.hpp"
#include "autodiff.hpp"
#include "numerics.hpp"
#include "optim_util.hpp"
#include "problems.hpp"

namespace ol2o::unrolled {

enum class Variant { Lista, ListaCp, ListaCpss, Alista };

inline const char* variant_name(Variant v) {
    switch (v) {
        case Variant::Lista: return "lista";
        case Variant::ListaCp: return "lista_cp";
        case Variant::ListaCpss: return "lista_cpss";
        case Variant::Alista: return "alista";
    }
    return "?";
}

inline std::optional<Variant> parse_variant(const std::string& s) {
    if (s == "lista") return Variant::Lista;
    if (s == "lista_cp") return Variant::ListaCp;
    if (s == "lista_cpss") return Variant::ListaCpss;
    if (s == "alista") return Variant::Alista;
    return std::nullopt;
}

// Per-layer learnable arrays for one LISTA-family variant. The measurement
// matrix travels with the parameters; coupled variants need it in the layer
// update and ALISTA additionally carries its fixed analytic weight.
struct UnrolledParams {
    Variant variant = Variant::Lista;
    index_t depth = 16;
    DenseMatrix A;  // m x n, fixed

    std::vector<DenseMatrix> We;    // LISTA: n x m per layer
    std::vector<DenseMatrix> S;     // LISTA: n x n per layer
    std::vector<DenseMatrix> W;     // CP/CPSS: n x m per layer
    DenseMatrix alista_W;           // ALISTA: m x n, fixed analytic
    std::vector<double> gamma;      // ALISTA step sizes
    std::vector<double> theta;      // thresholds, >= 0
    std::vector<double> ss_frac;    // CPSS support fractions p^k (else empty)

    index_t m() const { return A.rows; }
    index_t n() const { return A.cols; }

    index_t support_count(index_t layer) const {
        if (ss_frac.empty()) return 0;
        return static_cast<index_t>(ss_frac[layer] * static_cast<double>(n()));
    }

    index_t learnable_count() const {
        index_t c = theta.size();
        for (const DenseMatrix& w : We) c += w.size();
        for (const DenseMatrix& s : S) c += s.size();
        for (const DenseMatrix& w : W) c += w.size();
        c += gamma.size();
        return c;
    }
};

// W minimizing ||W^T A||_F^2 subject to diag(W^T A) = 1, solved column-wise:
// w_j = G^-1 a_j / (a_j^T G^-1 a_j) with G = A A^T. A singular Gram system is
// retried with a 1e-10 ridge (reported through `regularized`).
inline DenseMatrix alista_weight(const DenseMatrix& A, bool* regularized = nullptr) {
    require(A.rows <= A.cols, "alista_weight: expects m <= n");
    const index_t m = A.rows, n = A.cols;
    DenseMatrix G(m, m);
    gemm(false, true, 1.0, A, A, 0.0, G);
    DenseMatrix L = G;
    bool ridge = false;
    if (!cholesky_factor(L)) {
        ridge = true;
        L = G;
        for (index_t i = 0; i < m; ++i) L(i, i) += 1e-10;
        if (!cholesky_factor(L))
            throw convergence_error("alista_weight: Gram system is singular", 0.0);
    }
    if (regularized) *regularized = ridge;

    DenseMatrix W(m, n);
    DenseVector aj(m);
    for (index_t j = 0; j < n; ++j) {
        for (index_t i = 0; i < m; ++i) aj[i] = A(i, j);
        DenseVector gj = cholesky_solve(L, aj);
        const double denom = dot(aj, gj);
        require(denom > 0.0, "alista_weight: degenerate column");
        for (index_t i = 0; i < m; ++i) W(i, j) = gj[i] / denom;
    }
    return W;
}

// Parameters that make the unrolled network reproduce ISTA: W_e = A^T/L,
// S = I - A^T A / L, theta = lambda / L (and the coupled equivalents).
inline UnrolledParams analytic_init(Variant variant, const DenseMatrix& A,
                                    double lambda, index_t depth = 16,
                                    double ss_step = 0.012, double ss_max = 0.12) {
    require(lambda >= 0.0, "analytic_init: lambda must be >= 0");
    UnrolledParams p;
    p.variant = variant;
    p.depth = depth;
    p.A = A;
    const double L = spectral_norm_sq(A);
    const index_t m = A.rows, n = A.cols;

    DenseMatrix AtL(n, m);
    for (index_t j = 0; j < n; ++j)
        for (index_t i = 0; i < m; ++i) AtL(j, i) = A(i, j) / L;

    p.theta.assign(depth, lambda / L);
    switch (variant) {
        case Variant::Lista: {
            DenseMatrix S = DenseMatrix::identity(n);
            gemm(true, false, -1.0 / L, A, A, 1.0, S);
            p.We.assign(depth, AtL);
            p.S.assign(depth, S);
            break;
        }
        case Variant::ListaCp:
            p.W.assign(depth, AtL);
            break;
        case Variant::ListaCpss: {
            p.W.assign(depth, AtL);
            p.ss_frac.resize(depth);
            for (index_t k = 0; k < depth; ++k)
                p.ss_frac[k] = std::min(static_cast<double>(k + 1) * ss_step, ss_max);
            break;
        }
        case Variant::Alista:
            p.alista_W = alista_weight(A);
            p.gamma.assign(depth, 1.0);
            break;
    }
    return p;
}

// ---------------------------------------------------------------------------
// Forward passes. Batched matrices carry one instance per column; x^0 = 0.
// ---------------------------------------------------------------------------

// Applies layer k to X (n x B) given measurements Bm (m x B), no tape.
inline DenseMatrix apply_layer(const UnrolledParams& p, index_t k, const DenseMatrix& X,
                               const DenseMatrix& Bm) {
    const index_t n = p.n(), Bc = X.cols;
    DenseMatrix V(n, Bc);
    switch (p.variant) {
        case Variant::Lista: {
            gemm(false, false, 1.0, p.We[k], Bm, 0.0, V);
            gemm(false, false, 1.0, p.S[k], X, 1.0, V);
            break;
        }
        case Variant::ListaCp:
        case Variant::ListaCpss: {
            DenseMatrix R = Bm;
            gemm(false, false, -1.0, p.A, X, 1.0, R);
            V = X;
            gemm(false, false, 1.0, p.W[k], R, 1.0, V);
            break;
        }
        case Variant::Alista: {
            DenseMatrix R = Bm;
            gemm(false, false, -1.0, p.A, X, 1.0, R);  // R = Bm - A X
            V = X;
            gemm(true, false, p.gamma[k], p.alista_W, R, 1.0, V);
            break;
        }
    }
    const double th = p.theta[k];
    if (p.variant == Variant::ListaCpss) {
        // per-column top-k passthrough, lower index wins ties
        const index_t kk = p.support_count(k);
        DenseMatrix out(n, Bc);
        std::vector<index_t> order(n);
        for (index_t j = 0; j < Bc; ++j) {
            const double* col = V.data.data() + j * n;
            for (index_t i = 0; i < n; ++i) order[i] = i;
            std::partial_sort(order.begin(), order.begin() + kk, order.end(),
                              [col](index_t a, index_t b) {
                                  const double fa = std::fabs(col[a]);
                                  const double fb = std::fabs(col[b]);
                                  return fa > fb || (fa == fb && a < b);
                              });
            std::vector<std::uint8_t> pass(n, 0);
            for (index_t t = 0; t < kk; ++t) pass[order[t]] = 1;
            for (index_t i = 0; i < n; ++i)
                out(i, j) = pass[i] ? col[i] : soft_threshold(col[i], th);
        }
        return out;
    }
    for (double& v : V.data) v = soft_threshold(v, th);
    return V;
}

// Per-layer iterates x^1..x^K for a single measurement vector.
inline std::vector<DenseVector> forward_trajectory(const UnrolledParams& p,
                                                   const DenseVector& b) {
    require(b.len() == p.m(), "forward: measurement dimension mismatch");
    DenseMatrix Bm(p.m(), 1);
    Bm.data = b.data;
    DenseMatrix X(p.n(), 1, 0.0);
    std::vector<DenseVector> out;
    out.reserve(p.depth);
    for (index_t k = 0; k < p.depth; ++k) {
        X = apply_layer(p, k, X, Bm);
        DenseVector xk(p.n());
        xk.data = X.data;
        out.push_back(std::move(xk));
    }
    return out;
}

inline DenseVector forward(const UnrolledParams& p, const DenseVector& b) {
    return forward_trajectory(p, b).back();
}

// Batched per-layer iterates for a whole suite (instances as columns).
inline std::vector<DenseMatrix> forward_batch_trajectory(const UnrolledParams& p,
                                                         const DenseMatrix& Bm,
                                                         index_t depth_limit = 0) {
    const index_t K = depth_limit == 0 ? p.depth : depth_limit;
    DenseMatrix X(p.n(), Bm.cols, 0.0);
    std::vector<DenseMatrix> out;
    out.reserve(K);
    for (index_t k = 0; k < K; ++k) {
        X = apply_layer(p, k, X, Bm);
        out.push_back(X);
    }
    return out;
}

// Final iterate only (no per-layer storage).
inline DenseMatrix forward_to_depth(const UnrolledParams& p, const DenseMatrix& Bm,
                                    index_t depth) {
    DenseMatrix X(p.n(), Bm.cols, 0.0);
    for (index_t k = 0; k < depth; ++k) X = apply_layer(p, k, X, Bm);
    return X;
}

// ---------------------------------------------------------------------------
// NMSE in dB: 10 log10(||xhat - xstar||^2 / ||xstar||^2), clamped at -150.
// ---------------------------------------------------------------------------
inline constexpr double kNmseFloorDb = -150.0;

inline double nmse_db(const DenseVector& xhat, const DenseVector& xstar) {
    require(xhat.len() == xstar.len(), "nmse_db: length mismatch");
    const double denom = norm_sq(xstar);
    require(denom > 0.0, "nmse_db: xstar must be nonzero");
    double err = 0.0;
    for (index_t i = 0; i < xhat.len(); ++i) {
        const double d = xhat[i] - xstar[i];
        err += d * d;
    }
    if (err == 0.0) return kNmseFloorDb;
    return std::max(10.0 * std::log10(err / denom), kNmseFloorDb);
}

// Mean per-instance NMSE (dB) after each layer on a suite.
inline std::vector<double> nmse_per_layer(const UnrolledParams& p,
                                          const problems::SparseSuite& suite,
                                          index_t depth_limit = 0) {
    const index_t Q = suite.count();
    DenseMatrix Bm(p.m(), Q);
    for (index_t q = 0; q < Q; ++q)
        for (index_t i = 0; i < p.m(); ++i) Bm(i, q) = suite.b[q][i];
    std::vector<DenseMatrix> traj = forward_batch_trajectory(p, Bm, depth_limit);
    std::vector<double> out;
    out.reserve(traj.size());
    DenseVector xhat(p.n());
    for (const DenseMatrix& X : traj) {
        double acc = 0.0;
        for (index_t q = 0; q < Q; ++q) {
            for (index_t i = 0; i < p.n(); ++i) xhat[i] = X(i, q);
            acc += nmse_db(xhat, suite.x_star[q]);
        }
        out.push_back(acc / static_cast<double>(Q));
    }
    return out;
}

// ---------------------------------------------------------------------------
// Progressive training.
// ---------------------------------------------------------------------------

enum class TrainLoss { MseVsXstar, LassoObjective };

struct TrainConfig {
    index_t batch = 128;
    double lr = 5e-4;
    index_t steps_per_phase = 2000;
    index_t val_every = 200;
    TrainLoss loss = TrainLoss::MseVsXstar;
    double lasso_lambda = 0.005;  // loss weight for TrainLoss::LassoObjective
    double init_lambda = 0.005;   // analytic-init threshold
    double ss_step = 0.012;
    double ss_max = 0.12;
};

struct TrainLogRow {
    index_t stage = 0;  // 1-based depth being trained
    index_t phase = 0;  // 0 newest-layer, 1..2 joint fine-tune
    index_t step = 0;   // 1-based within phase
    double train_loss = 0.0;
    double val_metric = 0.0;  // NMSE dB for recovery, mean LASSO loss otherwise
};

struct TrainResult {
    UnrolledParams params;
    std::vector<TrainLogRow> log;
};

namespace detail {

using ol2o::detail::adam_update;
using ol2o::detail::Slot;

// Learnable slots of one layer, in a fixed order.
inline std::vector<Slot> layer_slots(UnrolledParams& p, index_t k) {
    std::vector<Slot> out;
    switch (p.variant) {
        case Variant::Lista: {
            Slot we; we.mat = &p.We[k]; out.push_back(std::move(we));
            Slot s; s.mat = &p.S[k]; out.push_back(std::move(s));
            break;
        }
        case Variant::ListaCp:
        case Variant::ListaCpss: {
            Slot w; w.mat = &p.W[k]; out.push_back(std::move(w));
            break;
        }
        case Variant::Alista: {
            Slot g; g.sc = &p.gamma[k]; out.push_back(std::move(g));
            break;
        }
    }
    Slot th; th.sc = &p.theta[k];
    out.push_back(std::move(th));
    return out;
}

// Records layers [from, to) on the tape. One TapeVar per learnable slot, in
// layer_slots order.
struct RecordedLayers {
    ad::TapeVar x_out;
    std::vector<std::vector<ad::TapeVar>> slot_nodes;  // [layer - from][slot]
};

// `Wtconst` is the pre-transposed ALISTA weight (n x m), unused otherwise.
inline RecordedLayers record_layers(ad::Tape& tape, const UnrolledParams& p,
                                    index_t from, index_t to, ad::TapeVar X0,
                                    ad::TapeVar Bnode, ad::TapeVar Aconst,
                                    ad::TapeVar Wtconst) {
    RecordedLayers rec;
    ad::TapeVar X = X0;
    for (index_t k = from; k < to; ++k) {
        std::vector<ad::TapeVar> nodes;
        ad::TapeVar th = tape.constant(p.theta[k]);
        ad::TapeVar V{};
        switch (p.variant) {
            case Variant::Lista: {
                ad::TapeVar we = tape.constant(p.We[k]);
                ad::TapeVar s = tape.constant(p.S[k]);
                nodes = {we, s, th};
                V = ad::add(ad::matmul(we, Bnode), ad::matmul(s, X));
                X = ad::soft_threshold(V, th);
                break;
            }
            case Variant::ListaCp: {
                ad::TapeVar w = tape.constant(p.W[k]);
                nodes = {w, th};
                ad::TapeVar R = ad::sub(Bnode, ad::matmul(Aconst, X));
                V = ad::add(X, ad::matmul(w, R));
                X = ad::soft_threshold(V, th);
                break;
            }
            case Variant::ListaCpss: {
                ad::TapeVar w = tape.constant(p.W[k]);
                nodes = {w, th};
                ad::TapeVar R = ad::sub(Bnode, ad::matmul(Aconst, X));
                V = ad::add(X, ad::matmul(w, R));
                X = ad::select_topk_passthrough(V, th,
                                                static_cast<int>(p.support_count(k)));
                break;
            }
            case Variant::Alista: {
                ad::TapeVar g = tape.constant(p.gamma[k]);
                nodes = {g, th};
                ad::TapeVar R = ad::sub(Bnode, ad::matmul(Aconst, X));
                V = ad::add(X, ad::smul(g, ad::matmul(Wtconst, R)));
                X = ad::soft_threshold(V, th);
                break;
            }
        }
        rec.slot_nodes.push_back(std::move(nodes));
    }
    rec.x_out = X;
    return rec;
}

inline ad::TapeVar record_loss(ad::Tape& tape, const TrainConfig& cfg, ad::TapeVar X,
                               ad::TapeVar Bnode, ad::TapeVar Aconst,
                               ad::TapeVar Xstar, index_t batch) {
    const double inv_b = 1.0 / static_cast<double>(batch);
    if (cfg.loss == TrainLoss::MseVsXstar)
        return ad::scale(ad::sum(ad::square(ad::sub(X, Xstar))), inv_b);
    ad::TapeVar R = ad::sub(ad::matmul(Aconst, X), Bnode);
    ad::TapeVar quad = ad::scale(ad::sum(ad::square(R)), 0.5);
    ad::TapeVar reg = ad::scale(ad::sum(ad::abs(X)), cfg.lasso_lambda);
    return ad::scale(ad::add(quad, reg), inv_b);
}

inline DenseMatrix gather_columns(const std::vector<DenseVector>& vs,
                                  const std::vector<index_t>& idx) {
    DenseMatrix out(vs[0].len(), idx.size());
    for (index_t j = 0; j < idx.size(); ++j)
        for (index_t i = 0; i < out.rows; ++i) out(i, j) = vs[idx[j]][i];
    return out;
}

}  // namespace detail

// Validation metric at a given depth: mean NMSE (dB) for recovery training,
// mean LASSO objective for objective training.
inline double validation_metric(const UnrolledParams& p,
                                const problems::SparseSuite& val,
                                const TrainConfig& cfg, index_t depth) {
    const index_t Q = val.count();
    DenseMatrix Bm(p.m(), Q);
    for (index_t q = 0; q < Q; ++q)
        for (index_t i = 0; i < p.m(); ++i) Bm(i, q) = val.b[q][i];
    const DenseMatrix X = forward_to_depth(p, Bm, depth);
    if (cfg.loss == TrainLoss::MseVsXstar) {
        double acc = 0.0;
        DenseVector xhat(p.n());
        for (index_t q = 0; q < Q; ++q) {
            for (index_t i = 0; i < p.n(); ++i) xhat[i] = X(i, q);
            acc += nmse_db(xhat, val.x_star[q]);
        }
        return acc / static_cast<double>(Q);
    }
    double acc = 0.0;
    DenseVector xq(p.n());
    for (index_t q = 0; q < Q; ++q) {
        for (index_t i = 0; i < p.n(); ++i) xq[i] = X(i, q);
        acc += problems::lasso_value(p.A, val.b[q], cfg.lasso_lambda, xq);
    }
    return acc / static_cast<double>(Q);
}

// Stage k trains layers <= k: the newest layer alone at full rate, then two
// joint fine-tune phases at 0.2x and 0.02x. Thresholds are clamped to >= 0
// after every step. A NaN loss aborts the stage, halves the stage rate and
// retries once; returns the best-on-validation parameters of the final stage.
inline TrainResult train_progressive(Variant variant, const DenseMatrix& A,
                                     const problems::SparseSuite& train,
                                     const problems::SparseSuite& val,
                                     const TrainConfig& cfg, RngStream& rng,
                                     index_t depth = 16) {
    require(cfg.batch >= 1, "train_progressive: batch must be >= 1");
    TrainResult out;
    out.params = analytic_init(variant, A, cfg.init_lambda, depth, cfg.ss_step,
                               cfg.ss_max);
    UnrolledParams& p = out.params;
    const index_t m = p.m(), n = p.n();
    const double phase_mult[3] = {1.0, 0.2, 0.02};

    UnrolledParams best = p;
    double best_metric = std::numeric_limits<double>::infinity();
    bool have_best = false;

    for (index_t stage = 1; stage <= depth; ++stage) {
        UnrolledParams stage_start = p;
        double stage_lr = cfg.lr;
        for (int attempt = 0;; ++attempt) {
            bool nan_abort = false;
            RngStream stage_rng = rng.derived(0x517a6e + stage * 1000003ull +
                                              static_cast<std::uint64_t>(attempt));
            for (int phase = 0; phase < 3 && !nan_abort; ++phase) {
                const index_t first_active = phase == 0 ? stage - 1 : 0;
                const index_t prefix_depth = first_active;

                // Frozen prefix outputs are cached once for the whole phase.
                DenseMatrix prefix_train;
                if (prefix_depth > 0) {
                    DenseMatrix Ball(m, train.count());
                    for (index_t q = 0; q < train.count(); ++q)
                        for (index_t i = 0; i < m; ++i) Ball(i, q) = train.b[q][i];
                    prefix_train = forward_to_depth(p, Ball, prefix_depth);
                }

                std::vector<detail::Slot> slots;
                for (index_t k = first_active; k < stage; ++k) {
                    std::vector<detail::Slot> ls = detail::layer_slots(p, k);
                    for (detail::Slot& slot : ls) {
                        slot.reset_moments();
                        slots.push_back(std::move(slot));
                    }
                }

                const double lr = stage_lr * phase_mult[phase];
                long t_adam = 0;
                for (index_t step = 1; step <= cfg.steps_per_phase; ++step) {
                    std::vector<index_t> idx(cfg.batch);
                    for (index_t j = 0; j < cfg.batch; ++j)
                        idx[j] = static_cast<index_t>(stage_rng.next_below(train.count()));

                    ad::Tape tape;
                    DenseMatrix Bb(m, cfg.batch);
                    for (index_t j = 0; j < cfg.batch; ++j)
                        for (index_t i = 0; i < m; ++i) Bb(i, j) = train.b[idx[j]][i];
                    ad::TapeVar Bnode = tape.constant(Bb);
                    ad::TapeVar Aconst = tape.constant(p.A);
                    ad::TapeVar Wtconst{};
                    if (p.variant == Variant::Alista) {
                        DenseMatrix Wt(n, m);
                        for (index_t j = 0; j < n; ++j)
                            for (index_t i = 0; i < m; ++i) Wt(j, i) = p.alista_W(i, j);
                        Wtconst = tape.constant(std::move(Wt));
                    }
                    DenseMatrix X0m(n, cfg.batch, 0.0);
                    if (prefix_depth > 0)
                        for (index_t j = 0; j < cfg.batch; ++j)
                            for (index_t i = 0; i < n; ++i)
                                X0m(i, j) = prefix_train(i, idx[j]);
                    ad::TapeVar X0 = tape.constant(std::move(X0m));

                    detail::RecordedLayers rec = detail::record_layers(
                        tape, p, first_active, stage, X0, Bnode, Aconst, Wtconst);
                    ad::TapeVar Xstar{};
                    if (cfg.loss == TrainLoss::MseVsXstar)
                        Xstar = tape.constant(detail::gather_columns(train.x_star, idx));
                    else
                        Xstar = X0;  // unused
                    ad::TapeVar loss =
                        detail::record_loss(tape, cfg, rec.x_out, Bnode, Aconst, Xstar,
                                            cfg.batch);
                    const double loss_val = ad::scalar_value(loss);
                    if (!std::isfinite(loss_val)) {
                        nan_abort = true;
                        break;
                    }
                    ad::Adjoints adj = ad::backward(loss);

                    ++t_adam;
                    index_t s_at = 0;
                    for (index_t k = first_active; k < stage; ++k) {
                        const std::vector<ad::TapeVar>& nodes =
                            rec.slot_nodes[k - first_active];
                        for (const ad::TapeVar& node : nodes) {
                            detail::adam_update(slots[s_at], adj.grad(node), lr, t_adam);
                            ++s_at;
                        }
                    }
                    for (index_t k = first_active; k < stage; ++k)
                        p.theta[k] = std::max(p.theta[k], 0.0);

                    if (step % cfg.val_every == 0 || step == cfg.steps_per_phase) {
                        TrainLogRow row;
                        row.stage = stage;
                        row.phase = static_cast<index_t>(phase);
                        row.step = step;
                        row.train_loss = loss_val;
                        row.val_metric = validation_metric(p, val, cfg, stage);
                        out.log.push_back(row);
                        if (stage == depth && row.val_metric < best_metric) {
                            best_metric = row.val_metric;
                            best = p;
                            have_best = true;
                        }
                    }
                }
            }
            if (!nan_abort) break;
            if (attempt >= 1)
                throw std::runtime_error(
                    "train_progressive: NaN loss persisted after halving the rate at "
                    "stage " + std::to_string(stage));
            p = stage_start;
            stage_lr *= 0.5;
        }
    }
    if (have_best) out.params = best;
    return out;
}

}  // namespace ol2o::unrolled
