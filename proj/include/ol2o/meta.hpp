#pragma once

// Model-free L2O: the coordinatewise LSTM optimizer, its meta-training loop
// with truncated BPTT, and the training tricks (random scaling, convex
// augmentation, smoothed gradient estimators, progressive unrolling,
// imitation warm-up).
//
// One LSTM parameter set is shared by all coordinates; every coordinate keeps
// its own hidden state. Coordinates sit in the columns of the state matrices,
// so one step over n coordinates is a handful of H x n gemms.

#include <functional>
#include <optional>

#include "analytic.hpp"
#include "autodiff.hpp"
#include "numerics.hpp"
#include "optim_util.hpp"
#include "problems.hpp"

namespace ol2o::meta {

// ---------------------------------------------------------------------------
// Gradient preprocessing: (log|g|/p, sign g) for |g| >= e^-p, else (-1, e^p g).
// ---------------------------------------------------------------------------
inline std::pair<double, double> preprocess_grad(double g, double p = 10.0) {
    require(p > 0.0, "preprocess_grad: p must be > 0");
    const double ag = std::fabs(g);
    if (ag >= std::exp(-p))
        return {std::log(ag) / p, g > 0.0 ? 1.0 : -1.0};
    return {-1.0, std::exp(p) * g};
}

// ---------------------------------------------------------------------------
// LSTM optimizer parameters; gate order is input, forget, cell, output.
// ---------------------------------------------------------------------------
struct LstmLayerParams {
    DenseMatrix Wi, Wf, Wg, Wo;  // H x in
    DenseMatrix Ui, Uf, Ug, Uo;  // H x H
    DenseMatrix bi, bf, bg, bo;  // H x 1
};

struct LstmOptimizerParams {
    index_t hidden = 20;
    double kappa = 0.1;         // output scale
    double preprocess_p = 10.0;
    std::vector<LstmLayerParams> layers;  // input size 2 for layer 0, H above
    DenseMatrix w_out;  // 1 x H
    DenseMatrix b_out;  // 1 x 1

    index_t depth() const { return layers.size(); }
};

inline LstmOptimizerParams lstm_init(RngStream& rng, index_t hidden = 20,
                                     index_t depth = 2) {
    LstmOptimizerParams p;
    p.hidden = hidden;
    auto mat = [&](index_t r, index_t c, double sd) {
        DenseMatrix m(r, c);
        for (double& v : m.data) v = sd * rng.next_gaussian();
        return m;
    };
    for (index_t l = 0; l < depth; ++l) {
        const index_t in = l == 0 ? 2 : hidden;
        const double sd_in = 1.0 / std::sqrt(static_cast<double>(in));
        const double sd_h = 1.0 / std::sqrt(static_cast<double>(hidden));
        LstmLayerParams L;
        L.Wi = mat(hidden, in, sd_in);
        L.Wf = mat(hidden, in, sd_in);
        L.Wg = mat(hidden, in, sd_in);
        L.Wo = mat(hidden, in, sd_in);
        L.Ui = mat(hidden, hidden, sd_h);
        L.Uf = mat(hidden, hidden, sd_h);
        L.Ug = mat(hidden, hidden, sd_h);
        L.Uo = mat(hidden, hidden, sd_h);
        L.bi = DenseMatrix(hidden, 1, 0.0);
        L.bf = DenseMatrix(hidden, 1, 1.0);  // open forget gates at start
        L.bg = DenseMatrix(hidden, 1, 0.0);
        L.bo = DenseMatrix(hidden, 1, 0.0);
        p.layers.push_back(std::move(L));
    }
    p.w_out = mat(1, hidden, 1.0 / std::sqrt(static_cast<double>(hidden)));
    p.b_out = DenseMatrix(1, 1, 0.0);
    return p;
}

// Per-coordinate (h, c) pairs for each layer; coordinates are columns.
struct CoordinateStates {
    std::vector<DenseMatrix> h, c;  // H x n each

    static CoordinateStates zeros(const LstmOptimizerParams& p, index_t n) {
        CoordinateStates s;
        for (index_t l = 0; l < p.depth(); ++l) {
            s.h.emplace_back(p.hidden, n, 0.0);
            s.c.emplace_back(p.hidden, n, 0.0);
        }
        return s;
    }

    index_t coords() const { return h.empty() ? 0 : h[0].cols; }
};

// ---------------------------------------------------------------------------
// One LSTM step, recorded on a tape. Parameters and states are tape nodes so
// the same code serves both meta-training (leaves) and plain evaluation
// (constants on a scratch tape).
// ---------------------------------------------------------------------------
struct LstmLayerNodes {
    ad::TapeVar Wi, Wf, Wg, Wo, Ui, Uf, Ug, Uo, bi, bf, bg, bo;
};

struct LstmParamNodes {
    std::vector<LstmLayerNodes> layers;
    ad::TapeVar w_out, b_out;

    std::vector<ad::TapeVar> all() const {
        std::vector<ad::TapeVar> out;
        for (const LstmLayerNodes& l : layers)
            for (ad::TapeVar v : {l.Wi, l.Wf, l.Wg, l.Wo, l.Ui, l.Uf, l.Ug, l.Uo,
                                  l.bi, l.bf, l.bg, l.bo})
                out.push_back(v);
        out.push_back(w_out);
        out.push_back(b_out);
        return out;
    }
};

struct LstmStateNodes {
    std::vector<ad::TapeVar> h, c;
};

inline LstmParamNodes make_param_nodes(ad::Tape& tape, const LstmOptimizerParams& p) {
    LstmParamNodes out;
    for (const LstmLayerParams& l : p.layers) {
        LstmLayerNodes n;
        n.Wi = tape.constant(l.Wi);
        n.Wf = tape.constant(l.Wf);
        n.Wg = tape.constant(l.Wg);
        n.Wo = tape.constant(l.Wo);
        n.Ui = tape.constant(l.Ui);
        n.Uf = tape.constant(l.Uf);
        n.Ug = tape.constant(l.Ug);
        n.Uo = tape.constant(l.Uo);
        n.bi = tape.constant(l.bi);
        n.bf = tape.constant(l.bf);
        n.bg = tape.constant(l.bg);
        n.bo = tape.constant(l.bo);
        out.layers.push_back(n);
    }
    out.w_out = tape.constant(p.w_out);
    out.b_out = tape.constant(p.b_out);
    return out;
}

inline LstmStateNodes make_state_nodes(ad::Tape& tape, const CoordinateStates& s) {
    LstmStateNodes out;
    for (index_t l = 0; l < s.h.size(); ++l) {
        out.h.push_back(tape.constant(s.h[l]));
        out.c.push_back(tape.constant(s.c[l]));
    }
    return out;
}

// input: 2 x n node (preprocessed gradient pair per coordinate). Returns the
// 1 x n update row (already scaled by kappa) and advanced state nodes.
inline std::pair<ad::TapeVar, LstmStateNodes> record_lstm_step(
    ad::Tape& tape, const LstmParamNodes& pn, const LstmStateNodes& sn,
    ad::TapeVar input, double kappa) {
    const index_t n = ad::value(input).cols;
    ad::TapeVar ones_row = tape.constant(DenseMatrix(1, n, 1.0));
    LstmStateNodes next;
    ad::TapeVar x = input;
    for (index_t l = 0; l < pn.layers.size(); ++l) {
        const LstmLayerNodes& L = pn.layers[l];
        auto gate = [&](ad::TapeVar W, ad::TapeVar U, ad::TapeVar b) {
            return ad::add(ad::add(ad::matmul(W, x), ad::matmul(U, sn.h[l])),
                           ad::matmul(b, ones_row));
        };
        ad::TapeVar gi = ad::sigmoid(gate(L.Wi, L.Ui, L.bi));
        ad::TapeVar gf = ad::sigmoid(gate(L.Wf, L.Uf, L.bf));
        ad::TapeVar gg = ad::tanh(gate(L.Wg, L.Ug, L.bg));
        ad::TapeVar go = ad::sigmoid(gate(L.Wo, L.Uo, L.bo));
        ad::TapeVar c_next = ad::add(ad::mul(gf, sn.c[l]), ad::mul(gi, gg));
        ad::TapeVar h_next = ad::mul(go, ad::tanh(c_next));
        next.c.push_back(c_next);
        next.h.push_back(h_next);
        x = h_next;
    }
    ad::TapeVar u = ad::scale(
        ad::add(ad::matmul(pn.w_out, x), ad::matmul(pn.b_out, ones_row)), kappa);
    return {u, next};
}

inline DenseMatrix preprocess_matrix(const DenseVector& grads, double p) {
    DenseMatrix in(2, grads.len());
    for (index_t i = 0; i < grads.len(); ++i) {
        auto [a, b] = preprocess_grad(grads[i], p);
        in(0, i) = a;
        in(1, i) = b;
    }
    return in;
}

// Plain (no backprop) step: feeds each coordinate's preprocessed gradient
// through the shared LSTM with that coordinate's state.
inline std::pair<DenseVector, CoordinateStates> lstm_optimizer_step(
    const LstmOptimizerParams& p, const CoordinateStates& states,
    const DenseVector& grads) {
    require(states.coords() == grads.len(),
            "lstm_optimizer_step: states sized to grads");
    ad::Tape tape;
    LstmParamNodes pn = make_param_nodes(tape, p);
    LstmStateNodes sn = make_state_nodes(tape, states);
    ad::TapeVar input = tape.constant(preprocess_matrix(grads, p.preprocess_p));
    auto [u, next] = record_lstm_step(tape, pn, sn, input, p.kappa);

    DenseVector update(grads.len());
    for (index_t i = 0; i < grads.len(); ++i) update[i] = ad::value(u)(0, i);
    CoordinateStates out;
    for (index_t l = 0; l < p.depth(); ++l) {
        out.h.push_back(ad::value(next.h[l]));
        out.c.push_back(ad::value(next.c[l]));
    }
    return {std::move(update), std::move(out)};
}

// ---------------------------------------------------------------------------
// Optimizees: value, closed-form gradient and a tape-recordable objective.
// ---------------------------------------------------------------------------
struct Optimizee {
    index_t dim = 0;
    std::function<double(const DenseVector&)> value;
    std::function<DenseVector(const DenseVector&)> grad;
    std::function<ad::TapeVar(ad::Tape&, ad::TapeVar)> record;
    // Optional hook, called before each optimization step; used by stochastic
    // objectives (minibatched MLP training) to advance their batch.
    std::function<void(std::uint64_t step)> begin_step;
};

inline Optimizee optimizee_from_rastrigin(const problems::RastriginInstance& inst) {
    Optimizee o;
    o.dim = inst.dim();
    o.value = [inst](const DenseVector& x) { return problems::rastrigin_value(inst, x); };
    o.grad = [inst](const DenseVector& x) {
        return problems::rastrigin_value_and_grad(inst, x).second;
    };
    o.record = [inst](ad::Tape& t, ad::TapeVar x) {
        return problems::rastrigin_record(t, inst, x);
    };
    return o;
}

inline Optimizee optimizee_from_lasso(const DenseMatrix& A, const DenseVector& b,
                                      double lambda) {
    Optimizee o;
    o.dim = A.cols;
    o.value = [A, b, lambda](const DenseVector& x) {
        return problems::lasso_value(A, b, lambda, x);
    };
    o.grad = [A, b, lambda](const DenseVector& x) {
        DenseVector g;
        problems::lasso_value(A, b, lambda, x, &g);
        return g;
    };
    o.record = [A, b, lambda](ad::Tape& t, ad::TapeVar x) {
        return problems::lasso_record(t, A, b, lambda, x);
    };
    return o;
}

// Coordinatewise scale augmentation: f_c(theta) = f(c . theta).
inline Optimizee scaling_wrap(const Optimizee& f, DenseVector c) {
    require(c.len() == f.dim, "scaling_wrap: scale dimension mismatch");
    Optimizee o;
    o.dim = f.dim;
    o.begin_step = f.begin_step;
    auto scaled = [c](const DenseVector& x) {
        DenseVector y(x.len());
        for (index_t i = 0; i < x.len(); ++i) y[i] = c[i] * x[i];
        return y;
    };
    o.value = [f, scaled](const DenseVector& x) { return f.value(scaled(x)); };
    o.grad = [f, scaled, c](const DenseVector& x) {
        DenseVector g = f.grad(scaled(x));
        for (index_t i = 0; i < g.len(); ++i) g[i] *= c[i];
        return g;
    };
    o.record = [f, c](ad::Tape& t, ad::TapeVar x) {
        DenseMatrix cm(c.len(), 1);
        cm.data = c.data;
        return f.record(t, ad::mul(x, t.constant(cm)));
    };
    return o;
}

// The L2O-RNNprop augmentation: c_i = exp(u_i), u_i uniform in [-1, 1],
// resampled on every call (the trainer calls this once per epoch).
inline Optimizee random_scaling_wrap(const Optimizee& f, RngStream& rng) {
    DenseVector c(f.dim);
    for (index_t i = 0; i < f.dim; ++i) c[i] = std::exp(rng.next_uniform(-1.0, 1.0));
    return scaling_wrap(f, std::move(c));
}

// Proximal-style convex term: f(theta) + mu ||theta - anchor||^2.
inline Optimizee convex_augment(const Optimizee& f, double mu, DenseVector anchor) {
    require(mu >= 0.0, "convex_augment: mu must be >= 0");
    Optimizee o;
    o.dim = f.dim;
    o.begin_step = f.begin_step;
    o.value = [f, mu, anchor](const DenseVector& x) {
        double v = f.value(x);
        for (index_t i = 0; i < x.len(); ++i) {
            const double d = x[i] - anchor[i];
            v += mu * d * d;
        }
        return v;
    };
    o.grad = [f, mu, anchor](const DenseVector& x) {
        DenseVector g = f.grad(x);
        for (index_t i = 0; i < x.len(); ++i) g[i] += 2.0 * mu * (x[i] - anchor[i]);
        return g;
    };
    o.record = [f, mu, anchor](ad::Tape& t, ad::TapeVar x) {
        ad::TapeVar base = f.record(t, x);
        if (mu == 0.0) return base;
        ad::TapeVar d = ad::sub(x, t.constant(anchor));
        return ad::add(base, ad::scale(ad::sum(ad::square(d)), mu));
    };
    return o;
}

// Two smoothed estimators with dynamic re-weighting:
//   g_rp = mean of grad f(theta + n_s),
//   g_es = mean of f(theta~) (theta~ - theta) / sigma^2  (score-function form),
// merged by inverse empirical variance of each estimator.
struct EsEstimates {
    DenseVector g_rp, g_es, g_merged;
    double var_rp = 0.0, var_es = 0.0;
};

inline EsEstimates es_estimates(const Optimizee& f, const DenseVector& theta,
                                index_t S, double sigma, RngStream& rng) {
    require(S >= 2, "es_smoothed_grads: S must be >= 2");
    require(sigma > 0.0, "es_smoothed_grads: sigma must be > 0");
    const index_t n = theta.len();
    std::vector<DenseVector> rp(S), es(S);
    for (index_t s = 0; s < S; ++s) {
        DenseVector noise = sample_gaussian(rng, n, 0.0, sigma * sigma);
        rp[s] = f.grad(vadd(theta, noise));
    }
    for (index_t s = 0; s < S; ++s) {
        DenseVector noise = sample_gaussian(rng, n, 0.0, sigma * sigma);
        DenseVector probe = vadd(theta, noise);
        const double fv = f.value(probe);
        es[s] = vscale(fv / (sigma * sigma), noise);
    }
    auto mean_of = [n, S](const std::vector<DenseVector>& xs) {
        DenseVector m(n, 0.0);
        for (const DenseVector& x : xs) axpy(1.0, x, m);
        return vscale(1.0 / static_cast<double>(S), m);
    };
    auto variance_of = [n, S](const std::vector<DenseVector>& xs, const DenseVector& m) {
        double acc = 0.0;
        for (const DenseVector& x : xs)
            for (index_t i = 0; i < n; ++i) {
                const double d = x[i] - m[i];
                acc += d * d;
            }
        return acc / static_cast<double>((S - 1) * S);  // variance of the mean
    };
    EsEstimates out;
    out.g_rp = mean_of(rp);
    out.g_es = mean_of(es);
    out.var_rp = variance_of(rp, out.g_rp);
    out.var_es = variance_of(es, out.g_es);
    if (out.var_rp == 0.0 && out.var_es == 0.0) {
        out.g_merged = vscale(0.5, vadd(out.g_rp, out.g_es));
    } else if (out.var_rp == 0.0) {
        out.g_merged = out.g_rp;
    } else if (out.var_es == 0.0) {
        out.g_merged = out.g_es;
    } else {
        const double w_rp = 1.0 / out.var_rp, w_es = 1.0 / out.var_es;
        out.g_merged = DenseVector(n);
        for (index_t i = 0; i < n; ++i)
            out.g_merged[i] = (out.g_rp[i] * w_rp + out.g_es[i] * w_es) / (w_rp + w_es);
    }
    return out;
}

inline DenseVector es_smoothed_grads(const Optimizee& f, const DenseVector& theta,
                                     index_t S, double sigma, RngStream& rng) {
    return es_estimates(f, theta, S, sigma, rng).g_merged;
}

// ---------------------------------------------------------------------------
// Meta-training.
// ---------------------------------------------------------------------------
struct MetaTrainConfig {
    index_t unroll = 20;     // T (or T_max under progressive unrolling)
    index_t horizon = 1000;  // optimizee steps per epoch
    index_t epochs = 100;
    double meta_lr = 1e-3;
    std::vector<double> weights;  // w_t within a window; empty = all ones

    bool random_scaling = false;
    bool convex_augment = false;
    double convex_mu = 0.05;
    bool progressive_unroll = false;
    index_t unroll_min = 5;
    bool es_smoothing = false;
    index_t es_samples = 4;
    double es_sigma = 1e-2;
    bool imitation_warmup = false;
};

// Linear ramp of the unroll length from unroll_min to unroll over the epochs.
inline index_t progressive_unroll_schedule(index_t epoch, const MetaTrainConfig& cfg) {
    const index_t t_min = cfg.unroll_min, t_max = cfg.unroll;
    if (cfg.epochs <= 1 || epoch + 1 >= cfg.epochs) return t_max;
    const double frac = static_cast<double>(epoch) / static_cast<double>(cfg.epochs - 1);
    const double t = static_cast<double>(t_min) +
                     frac * static_cast<double>(t_max - t_min);
    const index_t out = static_cast<index_t>(t);
    return std::min(std::max(out, t_min), t_max);
}

struct SampledOptimizee {
    Optimizee f;
    DenseVector x0;
};

using OptimizeeSampler = std::function<SampledOptimizee(RngStream&, index_t epoch)>;

struct MetaLogRow {
    index_t epoch = 0;
    index_t window = 0;
    index_t unroll = 0;
    double meta_loss = 0.0;
    bool skipped = false;  // NaN guard fired
};

struct MetaTrainResult {
    LstmOptimizerParams params;
    std::vector<MetaLogRow> log;
};

namespace detail {

using ol2o::detail::adam_update;
using ol2o::detail::Slot;

inline std::vector<Slot> param_slots(LstmOptimizerParams& p) {
    std::vector<Slot> out;
    auto push = [&out](DenseMatrix& m) {
        Slot s;
        s.mat = &m;
        s.reset_moments();
        out.push_back(std::move(s));
    };
    for (LstmLayerParams& l : p.layers) {
        push(l.Wi); push(l.Wf); push(l.Wg); push(l.Wo);
        push(l.Ui); push(l.Uf); push(l.Ug); push(l.Uo);
        push(l.bi); push(l.bf); push(l.bg); push(l.bo);
    }
    push(p.w_out);
    push(p.b_out);
    return out;
}

}  // namespace detail

// One truncated window: records `steps` optimizer steps on a fresh tape and
// returns the meta-loss node plus the carried (detached) values. Gradients
// fed to the LSTM are detached from phi; iterates and states entering the
// window are constants, so nothing reaches back across the truncation.
struct WindowResult {
    double meta_loss = 0.0;
    DenseVector x_out;
    CoordinateStates states_out;
    ad::TapeVar loss_node;
    ad::TapeVar x_in_node;  // entering iterate: a leaf, detached by construction
    LstmParamNodes param_nodes;
};

inline WindowResult run_window(ad::Tape& tape, const LstmOptimizerParams& p,
                               const Optimizee& f, const DenseVector& x_in,
                               const CoordinateStates& s_in, index_t steps,
                               const std::vector<double>& weights,
                               std::uint64_t step_base = 0,
                               RngStream* es_rng = nullptr, index_t es_samples = 0,
                               double es_sigma = 0.0) {
    WindowResult out;
    out.param_nodes = make_param_nodes(tape, p);
    LstmStateNodes sn = make_state_nodes(tape, s_in);
    ad::TapeVar x = tape.constant(x_in);
    out.x_in_node = x;
    ad::TapeVar loss = tape.constant(0.0);
    // The objective is recorded at the iterate each step starts from (the
    // window's first term is the entering iterate), then the step is taken.
    for (index_t t = 0; t < steps; ++t) {
        if (f.begin_step) f.begin_step(step_base + t);
        ad::TapeVar ft = f.record(tape, x);
        const double w = weights.empty()
                             ? 1.0
                             : weights[std::min<index_t>(t, weights.size() - 1)];
        loss = ad::add(loss, ad::scale(ft, w));
        DenseVector g = es_rng ? es_smoothed_grads(f, ad::vector_value(x), es_samples,
                                                   es_sigma, *es_rng)
                               : f.grad(ad::vector_value(x));
        ad::TapeVar input = tape.constant(preprocess_matrix(g, p.preprocess_p));
        auto [u, next] = record_lstm_step(tape, out.param_nodes, sn, input, p.kappa);
        sn = next;
        x = ad::add(x, ad::transpose(u));
    }
    out.loss_node = loss;
    out.meta_loss = ad::scalar_value(loss);
    out.x_out = ad::vector_value(x);
    for (index_t l = 0; l < p.depth(); ++l) {
        out.states_out.h.push_back(ad::value(sn.h[l]));
        out.states_out.c.push_back(ad::value(sn.c[l]));
    }
    return out;
}

// Imitation pre-phase: for one epoch the trajectory is driven by Adam and the
// LSTM output regresses onto the Adam steps (MSE).
inline void imitation_epoch(LstmOptimizerParams& p, std::vector<detail::Slot>& slots,
                            long& adam_t, const MetaTrainConfig& cfg,
                            const SampledOptimizee& sample) {
    const Optimizee& f = sample.f;
    analytic::FirstOrderState opt_state(sample.x0);
    analytic::AdamHyper oh;
    CoordinateStates states = CoordinateStates::zeros(p, f.dim);
    const index_t T = cfg.unroll;
    index_t done = 0;
    while (done < cfg.horizon) {
        const index_t steps = std::min(T, cfg.horizon - done);
        ad::Tape tape;
        LstmParamNodes pn = make_param_nodes(tape, p);
        LstmStateNodes sn = make_state_nodes(tape, states);
        ad::TapeVar loss = tape.constant(0.0);
        for (index_t t = 0; t < steps; ++t) {
            if (f.begin_step) f.begin_step(done + t);
            DenseVector g = f.grad(opt_state.x);
            const DenseVector x_before = opt_state.x;
            analytic::adam_step(opt_state, g, oh);
            DenseVector target(f.dim);
            for (index_t i = 0; i < f.dim; ++i) target[i] = opt_state.x[i] - x_before[i];
            ad::TapeVar input = tape.constant(preprocess_matrix(g, p.preprocess_p));
            auto [u, next] = record_lstm_step(tape, pn, sn, input, p.kappa);
            sn = next;
            DenseMatrix tgt(1, f.dim);
            for (index_t i = 0; i < f.dim; ++i) tgt(0, i) = target[i];
            loss = ad::add(loss,
                           ad::mean(ad::square(ad::sub(u, tape.constant(tgt)))));
        }
        ad::Adjoints adj = ad::backward(loss);
        ++adam_t;
        std::vector<ad::TapeVar> nodes = pn.all();
        for (index_t i = 0; i < nodes.size(); ++i)
            detail::adam_update(slots[i], adj.grad(nodes[i]), cfg.meta_lr, adam_t);
        for (index_t l = 0; l < p.depth(); ++l) {
            states.h[l] = ad::value(sn.h[l]);
            states.c[l] = ad::value(sn.c[l]);
        }
        done += steps;
    }
}

// Truncated-BPTT meta-training: per epoch sample an optimizee (plus tricks),
// run the horizon in windows, and take one Adam step on phi per window.
// Hidden states and iterates carry values across windows; gradients are cut.
inline MetaTrainResult meta_train(const LstmOptimizerParams& init,
                                  const OptimizeeSampler& sampler,
                                  const MetaTrainConfig& cfg, RngStream& rng) {
    require(cfg.unroll >= 1, "meta_train: unroll must be >= 1");
    MetaTrainResult out;
    out.params = init;
    LstmOptimizerParams& p = out.params;
    std::vector<detail::Slot> slots = detail::param_slots(p);
    long adam_t = 0;

    if (cfg.imitation_warmup) {
        SampledOptimizee sample = sampler(rng, 0);
        imitation_epoch(p, slots, adam_t, cfg, sample);
    }

    for (index_t epoch = 0; epoch < cfg.epochs; ++epoch) {
        const index_t T = cfg.progressive_unroll
                              ? progressive_unroll_schedule(epoch, cfg)
                              : cfg.unroll;
        SampledOptimizee sample = sampler(rng, epoch);
        Optimizee f = sample.f;
        if (cfg.random_scaling) f = random_scaling_wrap(f, rng);
        if (cfg.convex_augment) {
            DenseVector anchor = sample_gaussian(rng, f.dim, 0.0, 1.0);
            f = convex_augment(f, cfg.convex_mu, std::move(anchor));
        }
        RngStream es_rng = rng.derived(0xE5 + epoch);

        DenseVector x = sample.x0;
        CoordinateStates states = CoordinateStates::zeros(p, f.dim);
        bool kappa_halved = false;
        index_t done = 0;
        index_t window = 0;
        while (done < cfg.horizon) {
            const index_t steps = std::min(T, cfg.horizon - done);
            ad::Tape tape;
            WindowResult wr = run_window(
                tape, p, f, x, states, steps, cfg.weights, done,
                cfg.es_smoothing ? &es_rng : nullptr, cfg.es_samples, cfg.es_sigma);

            MetaLogRow row;
            row.epoch = epoch;
            row.window = window;
            row.unroll = steps;
            row.meta_loss = wr.meta_loss;
            if (!std::isfinite(wr.meta_loss)) {
                row.skipped = true;
                out.log.push_back(row);
                if (kappa_halved)
                    throw std::runtime_error(
                        "meta_train: meta-loss stayed non-finite after halving kappa "
                        "(epoch " + std::to_string(epoch) + ")");
                p.kappa *= 0.5;
                kappa_halved = true;
            } else {
                out.log.push_back(row);
                ad::Adjoints adj = ad::backward(wr.loss_node);
                ++adam_t;
                std::vector<ad::TapeVar> nodes = wr.param_nodes.all();
                for (index_t i = 0; i < nodes.size(); ++i)
                    detail::adam_update(slots[i], adj.grad(nodes[i]), cfg.meta_lr,
                                        adam_t);
                x = wr.x_out;
                states = wr.states_out;
            }
            done += steps;
            ++window;
        }
    }
    return out;
}

// ---------------------------------------------------------------------------
// Frozen-parameter evaluation: runs the learned optimizer on a set of
// same-dimension optimizees, batching all coordinates of all instances
// through the shared LSTM.
// ---------------------------------------------------------------------------

// Returns per-instance objective values at every step 1..steps.
inline std::vector<std::vector<double>> lstm_optimize(
    const LstmOptimizerParams& p, const std::vector<Optimizee>& fs,
    const std::vector<DenseVector>& x0, index_t steps) {
    require(fs.size() == x0.size(), "lstm_optimize: one start per optimizee");
    const index_t Q = fs.size();
    const index_t dim = Q == 0 ? 0 : fs[0].dim;
    for (const Optimizee& f : fs)
        require(f.dim == dim, "lstm_optimize: optimizee dims must match");

    std::vector<DenseVector> x = x0;
    CoordinateStates states = CoordinateStates::zeros(p, Q * dim);
    std::vector<std::vector<double>> traj(Q);
    DenseVector flat_g(Q * dim);
    for (index_t step = 0; step < steps; ++step) {
        for (index_t q = 0; q < Q; ++q) {
            if (fs[q].begin_step) fs[q].begin_step(step);
            DenseVector g = fs[q].grad(x[q]);
            for (index_t i = 0; i < dim; ++i) flat_g[q * dim + i] = g[i];
        }
        auto [u, next] = lstm_optimizer_step(p, states, flat_g);
        states = std::move(next);
        for (index_t q = 0; q < Q; ++q) {
            for (index_t i = 0; i < dim; ++i) x[q][i] += u[q * dim + i];
            traj[q].push_back(fs[q].value(x[q]));
        }
    }
    return traj;
}

}  // namespace ol2o::meta
