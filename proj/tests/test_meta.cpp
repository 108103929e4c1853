#include <catch2/catch_amalgamated.hpp>

#include <ol2o/meta.hpp>

#include "oracles.hpp"

using namespace ol2o;
namespace mt = ol2o::meta;
namespace pb = ol2o::problems;

namespace {

mt::SampledOptimizee sample_quadratic(RngStream& rng, index_t n) {
    auto suite = pb::gen_quadratic_suite(rng, n, 1);
    mt::SampledOptimizee s;
    s.f = mt::optimizee_from_rastrigin(suite[0]);
    s.x0 = sample_gaussian(rng, n, 0.0, 1.0);
    return s;
}

}  // namespace

TEST_CASE("gradient preprocessing branches", "[meta]") {
    auto [a1, b1] = mt::preprocess_grad(std::exp(-3.0), 10.0);
    CHECK(a1 == Catch::Approx(-0.3).margin(1e-12));
    CHECK(b1 == 1.0);

    auto [a2, b2] = mt::preprocess_grad(0.0, 10.0);
    CHECK(a2 == -1.0);
    CHECK(b2 == 0.0);

    auto [a3, b3] = mt::preprocess_grad(-1.0, 10.0);
    CHECK(a3 == Catch::Approx(0.0).margin(1e-15));
    CHECK(b3 == -1.0);

    CHECK_THROWS_AS(mt::preprocess_grad(1.0, 0.0), contract_error);
}

TEST_CASE("all-zero parameters produce the zero update", "[meta]") {
    RngStream rng(800);
    mt::LstmOptimizerParams p = mt::lstm_init(rng, 8, 2);
    for (mt::LstmLayerParams& l : p.layers) {
        for (DenseMatrix* m : {&l.Wi, &l.Wf, &l.Wg, &l.Wo, &l.Ui, &l.Uf, &l.Ug, &l.Uo,
                               &l.bi, &l.bf, &l.bg, &l.bo})
            std::fill(m->data.begin(), m->data.end(), 0.0);
    }
    std::fill(p.w_out.data.begin(), p.w_out.data.end(), 0.0);
    p.b_out(0, 0) = 0.0;

    mt::CoordinateStates s = mt::CoordinateStates::zeros(p, 5);
    DenseVector g = oracles::random_vector(rng, 5);
    auto [u, s2] = mt::lstm_optimizer_step(p, s, g);
    for (index_t i = 0; i < 5; ++i) CHECK(u[i] == 0.0);
}

TEST_CASE("zero output projection keeps the trajectory constant", "[meta]") {
    RngStream rng(801);
    mt::LstmOptimizerParams p = mt::lstm_init(rng, 8, 2);
    std::fill(p.w_out.data.begin(), p.w_out.data.end(), 0.0);
    p.b_out(0, 0) = 0.0;

    auto suite = pb::gen_quadratic_suite(rng, 4, 1);
    mt::Optimizee f = mt::optimizee_from_rastrigin(suite[0]);
    DenseVector x0 = oracles::random_vector(rng, 4);
    const double f0 = f.value(x0);

    ad::Tape tape;
    mt::WindowResult w = mt::run_window(tape, p, f, x0,
                                        mt::CoordinateStates::zeros(p, 4), 7, {});
    CHECK(w.meta_loss == 7.0 * f0);
    CHECK(w.x_out.data == x0.data);
}

TEST_CASE("window meta-loss starts at the entering iterate", "[meta]") {
    RngStream rng(802);
    mt::LstmOptimizerParams p = mt::lstm_init(rng, 8, 2);
    auto suite = pb::gen_quadratic_suite(rng, 3, 1);
    mt::Optimizee f = mt::optimizee_from_rastrigin(suite[0]);
    DenseVector x0 = oracles::random_vector(rng, 3);

    // w = (1, 0, ..., 0) isolates f(theta_0) regardless of the optimizer.
    std::vector<double> w(6, 0.0);
    w[0] = 1.0;
    ad::Tape tape;
    mt::WindowResult res = mt::run_window(tape, p, f, x0,
                                          mt::CoordinateStates::zeros(p, 3), 6, w);
    CHECK(res.meta_loss == Catch::Approx(f.value(x0)).margin(1e-13));
}

TEST_CASE("annihilating update rule zeroes the tail of the meta-loss", "[meta]") {
    // Hand-built optimizer emitting u_t = -theta_t on f(theta) = theta^2:
    // theta hits 0 after one step, so only f(theta_0) contributes.
    ad::Tape tape;
    ad::TapeVar x = tape.constant(DenseVector{1.7});
    ad::TapeVar loss = tape.constant(0.0);
    for (int t = 0; t < 5; ++t) {
        loss = ad::add(loss, ad::sum(ad::square(x)));
        x = ad::add(x, ad::scale(x, -1.0));
    }
    CHECK(ad::scalar_value(loss) == 1.7 * 1.7);
}

TEST_CASE("coordinate permutation equivariance", "[meta]") {
    RngStream rng(803);
    mt::LstmOptimizerParams p = mt::lstm_init(rng, 10, 2);
    const index_t n = 7;
    mt::CoordinateStates s = mt::CoordinateStates::zeros(p, n);
    for (DenseMatrix& h : s.h)
        for (double& v : h.data) v = 0.3 * rng.next_gaussian();
    for (DenseMatrix& c : s.c)
        for (double& v : c.data) v = 0.3 * rng.next_gaussian();
    DenseVector g = oracles::random_vector(rng, n);

    std::vector<index_t> perm = {3, 0, 6, 1, 5, 2, 4};
    mt::CoordinateStates sp = mt::CoordinateStates::zeros(p, n);
    DenseVector gp(n);
    for (index_t i = 0; i < n; ++i) {
        gp[i] = g[perm[i]];
        for (index_t l = 0; l < p.depth(); ++l)
            for (index_t r = 0; r < p.hidden; ++r) {
                sp.h[l](r, i) = s.h[l](r, perm[i]);
                sp.c[l](r, i) = s.c[l](r, perm[i]);
            }
    }
    auto [u, s2] = mt::lstm_optimizer_step(p, s, g);
    auto [up, sp2] = mt::lstm_optimizer_step(p, sp, gp);
    for (index_t i = 0; i < n; ++i) CHECK(std::fabs(up[i] - u[perm[i]]) <= 1e-12);
    for (index_t l = 0; l < p.depth(); ++l)
        for (index_t r = 0; r < p.hidden; ++r)
            for (index_t i = 0; i < n; ++i)
                CHECK(std::fabs(sp2.h[l](r, i) - s2.h[l](r, perm[i])) <= 1e-12);
}

TEST_CASE("single-coordinate and batched execution agree", "[meta]") {
    RngStream rng(804);
    mt::LstmOptimizerParams p = mt::lstm_init(rng, 10, 2);
    const index_t n = 5;
    mt::CoordinateStates s = mt::CoordinateStates::zeros(p, n);
    for (DenseMatrix& h : s.h)
        for (double& v : h.data) v = 0.2 * rng.next_gaussian();
    DenseVector g = oracles::random_vector(rng, n);
    auto [u, s2] = mt::lstm_optimizer_step(p, s, g);

    for (index_t i = 0; i < n; ++i) {
        mt::CoordinateStates si = mt::CoordinateStates::zeros(p, 1);
        for (index_t l = 0; l < p.depth(); ++l)
            for (index_t r = 0; r < p.hidden; ++r) {
                si.h[l](r, 0) = s.h[l](r, i);
                si.c[l](r, 0) = s.c[l](r, i);
            }
        auto [ui, si2] = mt::lstm_optimizer_step(p, si, DenseVector{g[i]});
        CHECK(std::fabs(ui[0] - u[i]) <= 1e-14);
    }
}

TEST_CASE("meta-gradient matches finite differences on a tiny quadratic", "[meta]") {
    // FD oracle over the same detached semantics: the LSTM inputs are frozen
    // at their base-run values, matching what the tape differentiates.
    RngStream rng(805);
    mt::LstmOptimizerParams p = mt::lstm_init(rng, 5, 2);
    auto suite = pb::gen_quadratic_suite(rng, 2, 1);
    mt::Optimizee f = mt::optimizee_from_rastrigin(suite[0]);
    DenseVector x0 = oracles::random_vector(rng, 2);
    const index_t T = 3;

    // Base run: capture the preprocessed input sequence.
    std::vector<DenseMatrix> inputs;
    {
        ad::Tape tape;
        mt::LstmParamNodes pn = mt::make_param_nodes(tape, p);
        mt::LstmStateNodes sn =
            mt::make_state_nodes(tape, mt::CoordinateStates::zeros(p, 2));
        ad::TapeVar x = tape.constant(x0);
        for (index_t t = 0; t < T; ++t) {
            DenseVector g = f.grad(ad::vector_value(x));
            inputs.push_back(mt::preprocess_matrix(g, p.preprocess_p));
            ad::TapeVar in = tape.constant(inputs.back());
            auto [u, next] = mt::record_lstm_step(tape, pn, sn, in, p.kappa);
            sn = next;
            x = ad::add(x, ad::transpose(u));
        }
    }

    auto flatten = [](const mt::LstmOptimizerParams& q) {
        std::vector<DenseMatrix> out;
        for (const mt::LstmLayerParams& l : q.layers)
            for (const DenseMatrix* m : {&l.Wi, &l.Wf, &l.Wg, &l.Wo, &l.Ui, &l.Uf,
                                         &l.Ug, &l.Uo, &l.bi, &l.bf, &l.bg, &l.bo})
                out.push_back(*m);
        out.push_back(q.w_out);
        out.push_back(q.b_out);
        return out;
    };

    const double kappa = p.kappa;
    const double pp = p.preprocess_p;
    const index_t hidden = p.hidden;
    ad::Program prog = [&, kappa](ad::Tape& tape, const std::vector<ad::TapeVar>& in) {
        mt::LstmParamNodes pn;
        index_t at = 0;
        for (index_t l = 0; l < 2; ++l) {
            mt::LstmLayerNodes ln;
            ln.Wi = in[at++]; ln.Wf = in[at++]; ln.Wg = in[at++]; ln.Wo = in[at++];
            ln.Ui = in[at++]; ln.Uf = in[at++]; ln.Ug = in[at++]; ln.Uo = in[at++];
            ln.bi = in[at++]; ln.bf = in[at++]; ln.bg = in[at++]; ln.bo = in[at++];
            pn.layers.push_back(ln);
        }
        pn.w_out = in[at++];
        pn.b_out = in[at++];
        mt::LstmStateNodes sn;
        for (index_t l = 0; l < 2; ++l) {
            sn.h.push_back(tape.constant(DenseMatrix(hidden, 2, 0.0)));
            sn.c.push_back(tape.constant(DenseMatrix(hidden, 2, 0.0)));
        }
        ad::TapeVar x = tape.constant(x0);
        ad::TapeVar loss = tape.constant(0.0);
        for (index_t t = 0; t < T; ++t) {
            loss = ad::add(loss, f.record(tape, x));
            ad::TapeVar inp = tape.constant(inputs[t]);
            auto [u, next] = mt::record_lstm_step(tape, pn, sn, inp, kappa);
            sn = next;
            x = ad::add(x, ad::transpose(u));
        }
        (void)pp;
        return loss;
    };
    CHECK(ad::grad_check(prog, flatten(p), 1e-6) <= 1e-4);
}

TEST_CASE("windows detach from previous windows structurally", "[meta]") {
    RngStream rng(806);
    mt::LstmOptimizerParams p = mt::lstm_init(rng, 6, 2);
    auto suite = pb::gen_quadratic_suite(rng, 3, 1);
    mt::Optimizee f = mt::optimizee_from_rastrigin(suite[0]);
    DenseVector x0 = oracles::random_vector(rng, 3);
    mt::CoordinateStates s0 = mt::CoordinateStates::zeros(p, 3);

    ad::Tape t1;
    mt::WindowResult w1 = mt::run_window(t1, p, f, x0, s0, 4, {});
    ad::Tape t2;
    mt::WindowResult w2 = mt::run_window(t2, p, f, w1.x_out, w1.states_out, 4, {});

    // The entering iterate of window 2 is a leaf: no parents, so gradients
    // w.r.t. window-1 iterates are structurally zero.
    CHECK(t2.node(w2.x_in_node.idx).op == ad::Op::Leaf);
    CHECK(t2.node(w2.x_in_node.idx).a == -1);

    // And recomputing window 2 from plain carried values gives bit-identical
    // phi gradients whether or not window 1's tape still exists.
    ad::Adjoints a2 = ad::backward(w2.loss_node);
    t1.clear();
    ad::Tape t3;
    mt::WindowResult w3 = mt::run_window(t3, p, f, w1.x_out, w1.states_out, 4, {});
    ad::Adjoints a3 = ad::backward(w3.loss_node);
    std::vector<ad::TapeVar> n2 = w2.param_nodes.all();
    std::vector<ad::TapeVar> n3 = w3.param_nodes.all();
    for (index_t i = 0; i < n2.size(); ++i)
        CHECK(a2.grad(n2[i]).data == a3.grad(n3[i]).data);
}

TEST_CASE("scaling wrap: identity scale and gradient correctness", "[meta]") {
    RngStream rng(807);
    auto suite = pb::gen_rastrigin_suite(rng, 4, 1);
    mt::Optimizee f = mt::optimizee_from_rastrigin(suite[0]);

    mt::Optimizee fid = mt::scaling_wrap(f, DenseVector(4, 1.0));
    for (int t = 0; t < 100; ++t) {
        DenseVector x = oracles::random_vector(rng, 4);
        CHECK(fid.value(x) == f.value(x));
    }

    mt::Optimizee fc = mt::random_scaling_wrap(f, rng);
    for (int t = 0; t < 5; ++t) {
        DenseVector x = oracles::random_vector(rng, 4);
        DenseVector g = fc.grad(x);
        const double h = 1e-6;
        for (index_t i = 0; i < 4; ++i) {
            DenseVector xp = x, xm = x;
            xp[i] += h;
            xm[i] -= h;
            const double fd = (fc.value(xp) - fc.value(xm)) / (2 * h);
            CHECK(std::fabs(g[i] - fd) / (1.0 + std::fabs(fd)) <= 1e-6);
        }
        // tape route agrees too
        ad::Tape tape;
        ad::TapeVar xv = tape.constant(x);
        ad::TapeVar lv = fc.record(tape, xv);
        CHECK(ad::scalar_value(lv) == Catch::Approx(fc.value(x)).margin(1e-12));
    }
}

TEST_CASE("identity scaling leaves a window bit-identical", "[meta]") {
    RngStream rng(808);
    mt::LstmOptimizerParams p = mt::lstm_init(rng, 6, 2);
    auto suite = pb::gen_quadratic_suite(rng, 3, 1);
    mt::Optimizee f = mt::optimizee_from_rastrigin(suite[0]);
    mt::Optimizee fid = mt::scaling_wrap(f, DenseVector(3, 1.0));
    DenseVector x0 = oracles::random_vector(rng, 3);
    mt::CoordinateStates s0 = mt::CoordinateStates::zeros(p, 3);

    ad::Tape t1, t2;
    mt::WindowResult w1 = mt::run_window(t1, p, f, x0, s0, 5, {});
    mt::WindowResult w2 = mt::run_window(t2, p, fid, x0, s0, 5, {});
    CHECK(w1.meta_loss == w2.meta_loss);
    CHECK(w1.x_out.data == w2.x_out.data);
}

TEST_CASE("log-scale distribution is uniform on [-1, 1]", "[meta]") {
    RngStream rng(809);
    auto suite = pb::gen_quadratic_suite(rng, 1, 1);
    mt::Optimizee f = mt::optimizee_from_rastrigin(suite[0]);
    const index_t N = 100000;
    std::vector<double> logs;
    logs.reserve(N);
    for (index_t t = 0; t < N; ++t) {
        mt::Optimizee fc = mt::random_scaling_wrap(f, rng);
        // recover c from the wrapped objective at a probe point: f(cx) with
        // f = 1/2 (a x - b)^2 is invertible given the instance, but reading
        // the scale through value() keeps the check black-box.
        const double v1 = fc.value(DenseVector{1.0});
        const double a = suite[0].A(0, 0), b = suite[0].b[0];
        // v1 = 1/2 (a c - b)^2  ->  c = (b + sqrt(2 v1)) / a or (b - ...)
        const double r = std::sqrt(2.0 * v1);
        const double c1 = (b + r) / a, c2 = (b - r) / a;
        const double c = c1 > 0.0 ? c1 : c2;
        logs.push_back(std::log(c));
    }
    std::sort(logs.begin(), logs.end());
    // Kolmogorov-Smirnov against U(-1, 1), alpha = 0.01.
    double dmax = 0.0;
    for (index_t i = 0; i < N; ++i) {
        const double cdf = (logs[i] + 1.0) / 2.0;
        const double lo = static_cast<double>(i) / N;
        const double hi = static_cast<double>(i + 1) / N;
        dmax = std::max(dmax, std::max(std::fabs(cdf - lo), std::fabs(cdf - hi)));
        CHECK(std::fabs(logs[i]) <= 1.0);
    }
    CHECK(dmax <= 1.63 / std::sqrt(static_cast<double>(N)));
}

TEST_CASE("convex augmentation", "[meta]") {
    RngStream rng(810);
    auto suite = pb::gen_rastrigin_suite(rng, 3, 1);
    mt::Optimizee f = mt::optimizee_from_rastrigin(suite[0]);

    mt::Optimizee same = mt::convex_augment(f, 0.0, DenseVector(3, 0.0));
    DenseVector x = oracles::random_vector(rng, 3);
    CHECK(same.value(x) == f.value(x));

    mt::Optimizee zero;
    zero.dim = 3;
    zero.value = [](const DenseVector&) { return 0.0; };
    zero.grad = [](const DenseVector& x) { return DenseVector(x.len(), 0.0); };
    zero.record = [](ad::Tape& t, ad::TapeVar) { return t.constant(0.0); };
    const double mu = 0.7;
    mt::Optimizee aug = mt::convex_augment(zero, mu, DenseVector(3, 0.0));
    CHECK(aug.value(x) == Catch::Approx(mu * norm_sq(x)).margin(1e-14));
    DenseVector g = aug.grad(x);
    for (index_t i = 0; i < 3; ++i)
        CHECK(g[i] == Catch::Approx(2.0 * mu * x[i]).margin(1e-14));

    mt::Optimizee aug2 = mt::convex_augment(f, 0.3, oracles::random_vector(rng, 3));
    const double h = 1e-6;
    DenseVector g2 = aug2.grad(x);
    for (index_t i = 0; i < 3; ++i) {
        DenseVector xp = x, xm = x;
        xp[i] += h;
        xm[i] -= h;
        const double fd = (aug2.value(xp) - aug2.value(xm)) / (2 * h);
        CHECK(std::fabs(g2[i] - fd) / (1.0 + std::fabs(fd)) <= 1e-6);
    }
    CHECK_THROWS_AS(mt::convex_augment(f, -1.0, x), contract_error);
}

TEST_CASE("smoothed gradient estimators", "[meta]") {
    RngStream rng(811);

    // Linear objective: grad f is constant, so the rp variance is zero and
    // the merge returns g_rp = a exactly.
    DenseVector a = oracles::random_vector(rng, 4);
    mt::Optimizee lin;
    lin.dim = 4;
    lin.value = [a](const DenseVector& x) { return dot(a, x); };
    lin.grad = [a](const DenseVector&) { return a; };
    lin.record = [a](ad::Tape& t, ad::TapeVar x) {
        return ad::sum(ad::mul(x, t.constant(a)));
    };
    DenseVector theta = oracles::random_vector(rng, 4);
    mt::EsEstimates est = mt::es_estimates(lin, theta, 16, 0.5, rng);
    CHECK(est.var_rp == 0.0);
    for (index_t i = 0; i < 4; ++i) {
        CHECK(est.g_rp[i] == a[i]);
        CHECK(est.g_merged[i] == a[i]);
        // es estimator is unbiased: mean within a few standard errors
        const double se = std::sqrt(est.var_es);
        CHECK(std::fabs(est.g_es[i] - a[i]) <= 6.0 * se + 1e-9);
    }

    // sigma -> 0 on a smooth quadratic: g_rp approaches the exact gradient.
    auto suite = pb::gen_quadratic_suite(rng, 4, 1);
    mt::Optimizee quad = mt::optimizee_from_rastrigin(suite[0]);
    DenseVector g_exact = quad.grad(theta);
    mt::EsEstimates est2 = mt::es_estimates(quad, theta, 64, 1e-4, rng);
    for (index_t i = 0; i < 4; ++i)
        CHECK(std::fabs(est2.g_rp[i] - g_exact[i]) <= 1e-3);

    CHECK_THROWS_AS(mt::es_estimates(quad, theta, 1, 0.5, rng), contract_error);
    CHECK_THROWS_AS(mt::es_estimates(quad, theta, 4, 0.0, rng), contract_error);
}

TEST_CASE("merged estimator with equal variances is the plain average", "[meta]") {
    // Constant objective: both estimators have zero variance.
    mt::Optimizee zero;
    zero.dim = 2;
    zero.value = [](const DenseVector&) { return 0.0; };
    zero.grad = [](const DenseVector& x) { return DenseVector(x.len(), 0.0); };
    zero.record = [](ad::Tape& t, ad::TapeVar) { return t.constant(0.0); };
    RngStream rng(812);
    mt::EsEstimates est = mt::es_estimates(zero, DenseVector(2, 1.0), 8, 0.3, rng);
    CHECK(est.var_rp == 0.0);
    CHECK(est.var_es == 0.0);
    for (index_t i = 0; i < 2; ++i)
        CHECK(est.g_merged[i] == 0.5 * (est.g_rp[i] + est.g_es[i]));
}

TEST_CASE("progressive unroll schedule", "[meta]") {
    mt::MetaTrainConfig cfg;
    cfg.unroll_min = 5;
    cfg.unroll = 25;
    cfg.epochs = 11;
    CHECK(mt::progressive_unroll_schedule(0, cfg) == 5);
    CHECK(mt::progressive_unroll_schedule(10, cfg) == 25);
    CHECK(mt::progressive_unroll_schedule(5, cfg) == 15);
}

TEST_CASE("meta training is deterministic and reduces the meta-loss", "[meta]") {
    mt::OptimizeeSampler sampler = [](RngStream& rng, index_t) {
        return sample_quadratic(rng, 3);
    };
    mt::MetaTrainConfig cfg;
    cfg.unroll = 8;
    cfg.horizon = 40;
    cfg.epochs = 30;
    cfg.meta_lr = 3e-3;

    RngStream init_rng(900);
    mt::LstmOptimizerParams init = mt::lstm_init(init_rng, 8, 2);

    RngStream r1(901), r2(901);
    mt::MetaTrainResult a = mt::meta_train(init, sampler, cfg, r1);
    mt::MetaTrainResult b = mt::meta_train(init, sampler, cfg, r2);
    REQUIRE(a.log.size() == b.log.size());
    for (index_t i = 0; i < a.log.size(); ++i)
        CHECK(a.log[i].meta_loss == b.log[i].meta_loss);
    CHECK(a.params.w_out.data == b.params.w_out.data);

    // Averaged first-window losses shrink over training.
    double early = 0.0, late = 0.0;
    index_t n_early = 0, n_late = 0;
    for (const mt::MetaLogRow& row : a.log) {
        if (row.epoch < 5 && row.window == 0) {
            early += row.meta_loss;
            ++n_early;
        }
        if (row.epoch + 5 >= cfg.epochs && row.window == 0) {
            late += row.meta_loss;
            ++n_late;
        }
    }
    CHECK(late / static_cast<double>(n_late) < early / static_cast<double>(n_early));
}

TEST_CASE("meta training with tricks enabled stays finite", "[meta]") {
    mt::OptimizeeSampler sampler = [](RngStream& rng, index_t) {
        return sample_quadratic(rng, 2);
    };
    mt::MetaTrainConfig cfg;
    cfg.unroll = 6;
    cfg.unroll_min = 2;
    cfg.horizon = 18;
    cfg.epochs = 6;
    cfg.random_scaling = true;
    cfg.convex_augment = true;
    cfg.progressive_unroll = true;
    cfg.es_smoothing = true;
    cfg.es_samples = 3;
    cfg.es_sigma = 0.05;
    cfg.imitation_warmup = true;

    RngStream init_rng(902);
    mt::LstmOptimizerParams init = mt::lstm_init(init_rng, 6, 2);
    RngStream rng(903);
    mt::MetaTrainResult r = mt::meta_train(init, sampler, cfg, rng);
    CHECK(r.log.size() > 0);
    for (const mt::MetaLogRow& row : r.log) CHECK_FALSE(row.skipped);
    // progressive schedule: first epoch uses the min unroll
    CHECK(r.log.front().unroll == 2);
}

TEST_CASE("lstm_optimize batches instances and records trajectories", "[meta]") {
    RngStream rng(904);
    mt::LstmOptimizerParams p = mt::lstm_init(rng, 6, 2);
    auto suite = pb::gen_quadratic_suite(rng, 3, 4);
    std::vector<mt::Optimizee> fs;
    std::vector<DenseVector> x0;
    for (const auto& inst : suite) {
        fs.push_back(mt::optimizee_from_rastrigin(inst));
        x0.push_back(oracles::random_vector(rng, 3));
    }
    auto traj = mt::lstm_optimize(p, fs, x0, 10);
    REQUIRE(traj.size() == 4);
    for (const auto& t : traj) {
        REQUIRE(t.size() == 10);
        for (double v : t) CHECK(std::isfinite(v));
    }

    // Batched evaluation equals optimizing each instance alone.
    auto solo = mt::lstm_optimize(p, {fs[1]}, {x0[1]}, 10);
    for (index_t t = 0; t < 10; ++t)
        CHECK(std::fabs(solo[0][t] - traj[1][t]) <= 1e-12);
}
