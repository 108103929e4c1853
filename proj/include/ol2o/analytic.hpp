#pragma once

// Hand-designed baseline optimizers: GD, Adam, RMSProp, Nesterov with
// backtracking line search, ISTA/FISTA proximal gradient and a
// pluggable-denoiser PnP-ADMM, plus the safeguarding wrapper.

#include <functional>

#include "numerics.hpp"
#include "problems.hpp"

namespace ol2o::analytic {

struct AdamHyper {
    double lr = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
};

struct RmsPropHyper {
    double lr = 1e-3;
    double decay = 0.9;
    double eps = 1e-8;
};

// State shared by the first-order methods; each method touches only the
// buffers it needs. Buffers are sized lazily to x.
struct FirstOrderState {
    DenseVector x;
    DenseVector m;       // Adam first moment
    DenseVector v;       // Adam / RMSProp second moment
    DenseVector x_prev;  // NAG
    long t = 0;          // step count
    bool stalled = false;

    explicit FirstOrderState(DenseVector x0) : x(std::move(x0)) {}
};

inline void gd_step(FirstOrderState& s, const DenseVector& grad, double lr) {
    require(lr > 0.0, "gd_step: lr must be > 0");
    require(grad.len() == s.x.len(), "gd_step: gradient dimension mismatch");
    axpy(-lr, grad, s.x);
    ++s.t;
}

inline void adam_step(FirstOrderState& s, const DenseVector& grad,
                      const AdamHyper& h = {}) {
    const index_t n = s.x.len();
    require(grad.len() == n, "adam_step: gradient dimension mismatch");
    if (s.m.len() != n) s.m = DenseVector(n, 0.0);
    if (s.v.len() != n) s.v = DenseVector(n, 0.0);
    ++s.t;
    const double bc1 = 1.0 - std::pow(h.beta1, static_cast<double>(s.t));
    const double bc2 = 1.0 - std::pow(h.beta2, static_cast<double>(s.t));
    for (index_t i = 0; i < n; ++i) {
        s.m[i] = h.beta1 * s.m[i] + (1.0 - h.beta1) * grad[i];
        s.v[i] = h.beta2 * s.v[i] + (1.0 - h.beta2) * grad[i] * grad[i];
        const double mhat = s.m[i] / bc1;
        const double vhat = s.v[i] / bc2;
        s.x[i] -= h.lr * mhat / (std::sqrt(vhat) + h.eps);
    }
}

inline void rmsprop_step(FirstOrderState& s, const DenseVector& grad,
                         const RmsPropHyper& h = {}) {
    const index_t n = s.x.len();
    require(grad.len() == n, "rmsprop_step: gradient dimension mismatch");
    if (s.v.len() != n) s.v = DenseVector(n, 0.0);
    ++s.t;
    for (index_t i = 0; i < n; ++i) {
        s.v[i] = h.decay * s.v[i] + (1.0 - h.decay) * grad[i] * grad[i];
        s.x[i] -= h.lr * grad[i] / (std::sqrt(s.v[i]) + h.eps);
    }
}

using Objective = std::function<double(const DenseVector&)>;
using Gradient = std::function<DenseVector(const DenseVector&)>;

struct LineSearchOpts {
    double init_step = 0.1;
    double armijo_c = 1e-4;
    double shrink = 0.5;
    int max_trials = 50;
};

namespace detail {

// Backtracking Armijo from `point` along -grad; returns the accepted iterate,
// or nullopt when max_trials halvings never achieve sufficient decrease.
inline std::optional<DenseVector> armijo_probe(const Objective& f,
                                               const DenseVector& point,
                                               const DenseVector& grad,
                                               const LineSearchOpts& o) {
    const double fy = f(point);
    const double g2 = norm_sq(grad);
    double step = o.init_step;
    for (int trial = 0; trial < o.max_trials; ++trial) {
        DenseVector cand = point;
        axpy(-step, grad, cand);
        if (f(cand) <= fy - o.armijo_c * step * g2) return cand;
        step *= o.shrink;
    }
    return std::nullopt;
}

}  // namespace detail

// Nesterov extrapolation followed by a backtracking Armijo step from the
// extrapolated point. A failed search leaves x unchanged and sets `stalled`.
inline void nag_line_search_step(FirstOrderState& s, const Objective& f,
                                 const Gradient& grad_fn,
                                 const LineSearchOpts& opts = {}) {
    const index_t n = s.x.len();
    if (s.x_prev.len() != n) s.x_prev = s.x;
    const double k = static_cast<double>(s.t);
    const double mom = k / (k + 3.0);
    DenseVector y = s.x;
    for (index_t i = 0; i < n; ++i) y[i] += mom * (s.x[i] - s.x_prev[i]);

    DenseVector g = grad_fn(y);
    std::optional<DenseVector> next = detail::armijo_probe(f, y, g, opts);
    if (!next) {
        s.stalled = true;
        ++s.t;
        return;
    }
    s.stalled = false;
    s.x_prev = s.x;
    s.x = std::move(*next);
    ++s.t;
}

// Plain gradient descent with the same backtracking search (no extrapolation).
inline void gd_line_search_step(FirstOrderState& s, const Objective& f,
                                const Gradient& grad_fn,
                                const LineSearchOpts& opts = {}) {
    DenseVector g = grad_fn(s.x);
    std::optional<DenseVector> next = detail::armijo_probe(f, s.x, g, opts);
    if (!next) {
        s.stalled = true;
        ++s.t;
        return;
    }
    s.stalled = false;
    s.x = std::move(*next);
    ++s.t;
}

// ---------------------------------------------------------------------------
// Proximal gradient for LASSO. L is the largest eigenvalue of A^T A,
// precomputed once per problem.
// ---------------------------------------------------------------------------
struct ProxState {
    DenseVector x;
    DenseVector y;   // FISTA momentum point
    double t_k = 1.0;
    double L = 1.0;

    ProxState(DenseVector x0, double spectral_bound)
        : x(x0), y(std::move(x0)), L(spectral_bound) {
        require(L > 0.0, "ProxState: L must be > 0");
    }
};

namespace detail {

// eta_{lambda/L}(z - (1/L) A^T (A z - b))
inline DenseVector prox_grad_update(const DenseMatrix& A, const DenseVector& b,
                                    double lambda, double L, const DenseVector& z) {
    DenseVector r = matvec(A, z);
    for (index_t i = 0; i < r.len(); ++i) r[i] -= b[i];
    DenseVector g = matvec_t(A, r);
    DenseVector step = z;
    axpy(-1.0 / L, g, step);
    return soft_threshold(step, lambda / L);
}

}  // namespace detail

inline void ista_step(const problems::LassoProblem& p, ProxState& s) {
    s.x = detail::prox_grad_update(p.A, p.b, p.lambda, s.L, s.x);
    s.y = s.x;
}

inline void fista_step(const problems::LassoProblem& p, ProxState& s) {
    DenseVector x_next = detail::prox_grad_update(p.A, p.b, p.lambda, s.L, s.y);
    const double t_next = 0.5 * (1.0 + std::sqrt(1.0 + 4.0 * s.t_k * s.t_k));
    const double w = (s.t_k - 1.0) / t_next;
    DenseVector y_next = x_next;
    for (index_t i = 0; i < y_next.len(); ++i) y_next[i] += w * (x_next[i] - s.x[i]);
    s.x = std::move(x_next);
    s.y = std::move(y_next);
    s.t_k = t_next;
}

// ---------------------------------------------------------------------------
// PnP-ADMM with a pluggable denoiser H:
//   x+ = H(y - u);  y+ = prox_{alpha f}(x+ + u);  u+ = u + x+ - y+.
// ---------------------------------------------------------------------------
struct AdmmState {
    DenseVector x, y, u;
};

using VectorOp = std::function<DenseVector(const DenseVector&)>;
using ProxOp = std::function<DenseVector(const DenseVector&, double)>;

inline void pnp_admm_step(AdmmState& s, const ProxOp& prox_f, const VectorOp& denoiser,
                          double alpha) {
    DenseVector x_next = denoiser(vsub(s.y, s.u));
    DenseVector xu = vadd(s.u, x_next);
    DenseVector y_next = prox_f(xu, alpha);
    // (u + x+) - y+ so that identity operators cancel exactly in f64.
    DenseVector u_next(s.u.len());
    for (index_t i = 0; i < u_next.len(); ++i) u_next[i] = xu[i] - y_next[i];
    s.x = std::move(x_next);
    s.y = std::move(y_next);
    s.u = std::move(u_next);
}

// Shipped denoisers: identity, soft-threshold and a width-3 median filter.
inline VectorOp identity_denoiser() {
    return [](const DenseVector& v) { return v; };
}

inline VectorOp soft_threshold_denoiser(double theta) {
    return [theta](const DenseVector& v) { return soft_threshold(v, theta); };
}

inline VectorOp median3_denoiser() {
    return [](const DenseVector& v) {
        const index_t n = v.len();
        DenseVector out(n);
        for (index_t i = 0; i < n; ++i) {
            const double a = v[i > 0 ? i - 1 : 0];
            const double b = v[i];
            const double c = v[i + 1 < n ? i + 1 : n - 1];
            out[i] = std::max(std::min(a, b), std::min(std::max(a, b), c));
        }
        return out;
    };
}

// prox of alpha * 1/2 ||. - b||^2: v -> (v + alpha b) / (1 + alpha).
inline ProxOp quadratic_prox(const DenseVector& b) {
    return [b](const DenseVector& v, double alpha) {
        DenseVector out(v.len());
        for (index_t i = 0; i < v.len(); ++i) out[i] = (v[i] + alpha * b[i]) / (1.0 + alpha);
        return out;
    };
}

// Accepts the tentative update only if it does not increase the monitored
// energy; otherwise falls back to the classic step.
inline DenseVector safeguarded_step(const DenseVector& tentative,
                                    const VectorOp& fallback_step,
                                    const Objective& energy,
                                    const DenseVector& current) {
    if (energy(tentative) <= energy(current)) return tentative;
    return fallback_step(current);
}

}  // namespace ol2o::analytic
