#include <catch2/catch_amalgamated.hpp>

#include <ol2o/problems.hpp>

#include <cstdio>
#include <fstream>

#include "oracles.hpp"

using namespace ol2o;
namespace pb = ol2o::problems;

TEST_CASE("measurement matrix columns are unit norm", "[problems]") {
    RngStream rng(100);
    DenseMatrix A = pb::gen_measurement_matrix(rng, 256, 512);
    for (index_t j = 0; j < A.cols; ++j) {
        double s = 0.0;
        for (index_t i = 0; i < A.rows; ++i) s += A(i, j) * A(i, j);
        CHECK(std::fabs(std::sqrt(s) - 1.0) <= 1e-12);
    }
    RngStream rng2(100);
    DenseMatrix B = pb::gen_measurement_matrix(rng2, 256, 512);
    CHECK(A.data == B.data);
}

TEST_CASE("coherent mode produces a coherent Gram matrix", "[problems]") {
    RngStream rng(101);
    DenseMatrix A = pb::gen_measurement_matrix(rng, 64, 128, true, 0.9);
    DenseMatrix G(128, 128);
    gemm(true, false, 1.0, A, A, 0.0, G);
    double max_off = 0.0;
    for (index_t j = 0; j < 128; ++j)
        for (index_t i = 0; i < 128; ++i)
            if (i != j) max_off = std::max(max_off, std::fabs(G(i, j)));
    CHECK(max_off >= 0.85);

    // Incoherent Gaussian matrices stay far below that.
    RngStream rng2(101);
    DenseMatrix Ai = pb::gen_measurement_matrix(rng2, 64, 128, false);
    gemm(true, false, 1.0, Ai, Ai, 0.0, G);
    double max_off_inc = 0.0;
    for (index_t j = 0; j < 128; ++j)
        for (index_t i = 0; i < 128; ++i)
            if (i != j) max_off_inc = std::max(max_off_inc, std::fabs(G(i, j)));
    CHECK(max_off_inc < 0.7);
}

TEST_CASE("sparse instances: counts, determinism, snr", "[problems]") {
    RngStream rng(200);
    DenseMatrix A = pb::gen_measurement_matrix(rng, 16, 32);
    RngStream gen(201);
    pb::SparseSuite s = pb::gen_sparse_instances(gen, A, 64, 20.0);
    REQUIRE(s.count() == 64);
    for (index_t q = 0; q < s.count(); ++q) {
        DenseVector ax = matvec(A, s.x_star[q]);
        DenseVector eps = vsub(s.b[q], ax);
        const double snr = 10.0 * std::log10(norm_sq(ax) / norm_sq(eps));
        CHECK(std::fabs(snr - 20.0) <= 1e-9);
    }
    RngStream gen2(201);
    pb::SparseSuite s2 = pb::gen_sparse_instances(gen2, A, 64, 20.0);
    for (index_t q = 0; q < 64; ++q) {
        CHECK(s.x_star[q].data == s2.x_star[q].data);
        CHECK(s.b[q].data == s2.b[q].data);
    }
}

TEST_CASE("sparse signal nonzero rate is 10 percent", "[problems]") {
    // Signal statistics do not depend on A, so a thin matrix keeps this fast
    // while still counting over 51,200 x 512 entries.
    RngStream rng(300);
    DenseMatrix A = pb::gen_measurement_matrix(rng, 4, 512);
    RngStream gen(301);
    pb::SparseSuite s = pb::gen_sparse_instances(gen, A, 51200);
    std::size_t nonzeros = 0;
    for (const DenseVector& x : s.x_star)
        for (double v : x.data)
            if (v != 0.0) ++nonzeros;
    const double rate = static_cast<double>(nonzeros) / (51200.0 * 512.0);
    CHECK(std::fabs(rate - 0.100) <= 0.002);
}

TEST_CASE("lasso value and subgradient", "[problems]") {
    RngStream rng(400);
    pb::LassoProblem p;
    p.A = pb::gen_measurement_matrix(rng, 6, 12);
    p.b = oracles::random_vector(rng, 6);
    p.lambda = 0.005;

    auto [v0, g0] = pb::lasso_value_and_subgrad(p, DenseVector(12, 0.0));
    CHECK(v0 == Catch::Approx(0.5 * norm_sq(p.b)).margin(1e-14));
    DenseVector atb = matvec_t(p.A, p.b);
    for (index_t i = 0; i < 12; ++i) CHECK(g0[i] == Catch::Approx(-atb[i]).margin(1e-14));

    pb::LassoProblem one;
    one.A = DenseMatrix(1, 1);
    one.A(0, 0) = 1.0;
    one.b = DenseVector{1.0};
    one.lambda = 0.5;
    auto [v1, g1] = pb::lasso_value_and_subgrad(one, DenseVector{0.5});
    CHECK(v1 == Catch::Approx(0.375).margin(1e-15));
}

TEST_CASE("lasso subgradient agrees with autodiff away from kinks", "[problems]") {
    RngStream rng(401);
    pb::LassoProblem p;
    p.A = pb::gen_measurement_matrix(rng, 5, 10);
    p.b = oracles::random_vector(rng, 5);
    DenseVector x(10);
    for (double& v : x.data) {
        do {
            v = rng.next_uniform(-1.0, 1.0);
        } while (std::fabs(v) < 1e-4);
    }
    auto [val, sub] = pb::lasso_value_and_subgrad(p, x);

    ad::Tape tape;
    ad::TapeVar xv = tape.constant(x);
    ad::TapeVar loss = pb::lasso_record(tape, p.A, p.b, p.lambda, xv);
    CHECK(ad::scalar_value(loss) == Catch::Approx(val).margin(1e-12));
    ad::Adjoints adj = ad::backward(loss);
    DenseVector g = adj.grad_vector(xv);
    for (index_t i = 0; i < 10; ++i) CHECK(std::fabs(g[i] - sub[i]) <= 1e-10);
}

TEST_CASE("rastrigin values, gradients and the classic special case", "[problems]") {
    pb::RastriginInstance classic2 = pb::RastriginInstance::classic(2);
    auto [v, g] = pb::rastrigin_value_and_grad(classic2, DenseVector(2, 0.0));
    CHECK(v == Catch::Approx(0.0).margin(1e-14));
    CHECK(std::fabs(g[0]) <= 1e-14);
    CHECK(std::fabs(g[1]) <= 1e-14);

    pb::RastriginInstance classic1 = pb::RastriginInstance::classic(1);
    auto [v1, g1] = pb::rastrigin_value_and_grad(classic1, DenseVector{0.5});
    CHECK(v1 == Catch::Approx(20.125).margin(1e-12));

    RngStream rng(500);
    auto suite = pb::gen_rastrigin_suite(rng, 4, 3);
    for (const auto& inst : suite) {
        DenseVector x = oracles::random_vector(rng, 4);
        auto [val, grad] = pb::rastrigin_value_and_grad(inst, x);
        const double h = 1e-6;
        for (index_t i = 0; i < 4; ++i) {
            DenseVector xp = x, xm = x;
            xp[i] += h;
            xm[i] -= h;
            const double fd =
                (pb::rastrigin_value(inst, xp) - pb::rastrigin_value(inst, xm)) / (2 * h);
            CHECK(std::fabs(grad[i] - fd) / (1.0 + std::fabs(fd)) <= 1e-6);
        }
    }
}

TEST_CASE("rastrigin family special case matches classic formula", "[problems]") {
    pb::RastriginInstance fam = pb::RastriginInstance::classic(5);
    RngStream rng(501);
    for (int t = 0; t < 1000; ++t) {
        DenseVector x = oracles::random_vector(rng, 5, 2.0);
        double direct = 0.0;
        for (index_t i = 0; i < 5; ++i)
            direct += 0.5 * x[i] * x[i] - 10.0 * std::cos(pb::kTwoPi * x[i]) + 10.0;
        CHECK(std::fabs(pb::rastrigin_value(fam, x) - direct) <= 1e-12);
    }
}

TEST_CASE("rastrigin suite generation is deterministic", "[problems]") {
    RngStream a(502), b(502);
    auto s1 = pb::gen_rastrigin_suite(a, 2, 10);
    auto s2 = pb::gen_rastrigin_suite(b, 2, 10);
    for (index_t q = 0; q < 10; ++q) {
        CHECK(s1[q].A.data == s2[q].A.data);
        CHECK(s1[q].b.data == s2[q].b.data);
        CHECK(s1[q].c.data == s2[q].c.data);
    }
    RngStream c(503);
    auto quad = pb::gen_quadratic_suite(c, 3, 2);
    CHECK(quad[0].alpha == 0.0);
    for (double v : quad[0].c.data) CHECK(v == 0.0);
}

TEST_CASE("rastrigin record on tape matches direct evaluation", "[problems]") {
    RngStream rng(504);
    auto suite = pb::gen_rastrigin_suite(rng, 3, 1);
    DenseVector x = oracles::random_vector(rng, 3);
    ad::Tape tape;
    ad::TapeVar xv = tape.constant(x);
    ad::TapeVar loss = pb::rastrigin_record(tape, suite[0], xv);
    auto [val, grad] = pb::rastrigin_value_and_grad(suite[0], x);
    CHECK(ad::scalar_value(loss) == Catch::Approx(val).margin(1e-12));
    ad::Adjoints adj = ad::backward(loss);
    DenseVector g = adj.grad_vector(xv);
    for (index_t i = 0; i < 3; ++i) CHECK(g[i] == Catch::Approx(grad[i]).margin(1e-10));
}

TEST_CASE("mlp loss at zero and random parameters", "[problems]") {
    pb::MlpTask task;
    RngStream rng(600);
    pb::Dataset ds = pb::synthetic_digits(rng, 100);
    CHECK(ds.synthetic);
    pb::MlpBatch batch = pb::sample_batch(ds, rng, 20);

    DenseVector zero(pb::MlpTask::param_count(), 0.0);
    CHECK(pb::mlp_loss(task, zero, batch) == Catch::Approx(std::log(10.0)).margin(1e-12));

    DenseVector params = pb::mlp_init(task, rng);
    const double loss = pb::mlp_loss(task, params, batch);
    CHECK(std::fabs(loss - std::log(10.0)) <= 0.3);

    CHECK_THROWS_AS(pb::mlp_loss_and_grad(task, params, pb::MlpBatch{}), contract_error);
}

TEST_CASE("mlp gradient matches finite differences", "[problems]") {
    pb::MlpTask task;
    RngStream rng(601);
    pb::Dataset ds = pb::synthetic_digits(rng, 16);
    pb::MlpBatch batch = pb::sample_batch(ds, rng, 4);
    DenseVector params = pb::mlp_init(task, rng);
    auto [loss, grad] = pb::mlp_loss_and_grad(task, params, batch);
    CHECK(std::isfinite(loss));

    RngStream pick(602);
    const double h = 1e-6;
    for (int t = 0; t < 60; ++t) {
        const index_t i = static_cast<index_t>(pick.next_below(params.len()));
        DenseVector pp = params, pm = params;
        pp[i] += h;
        pm[i] -= h;
        const double fd =
            (pb::mlp_loss(task, pp, batch) - pb::mlp_loss(task, pm, batch)) / (2 * h);
        CHECK(std::fabs(grad[i] - fd) / (1.0 + std::fabs(fd)) <= 1e-5);
    }

    pb::MlpTask relu_task;
    relu_task.activation = pb::Activation::Relu;
    auto [rl, rg] = pb::mlp_loss_and_grad(relu_task, params, batch);
    CHECK(std::isfinite(rl));
    CHECK(rg.len() == params.len());
}

TEST_CASE("idx reader round trip and error paths", "[problems]") {
    const std::string img_path = "/tmp/ol2o_test-images-idx3-ubyte";
    const std::string lab_path = "/tmp/ol2o_test-labels-idx1-ubyte";
    {
        std::ofstream img(img_path, std::ios::binary);
        auto be32 = [&](std::uint32_t v) {
            char b[4] = {char(v >> 24), char(v >> 16), char(v >> 8), char(v)};
            img.write(b, 4);
        };
        be32(0x00000803u);
        be32(2);  // count
        be32(2);  // rows
        be32(2);  // cols
        const unsigned char px[8] = {0, 51, 102, 153, 204, 255, 0, 255};
        img.write(reinterpret_cast<const char*>(px), 8);
    }
    {
        std::ofstream lab(lab_path, std::ios::binary);
        auto be32 = [&](std::uint32_t v) {
            char b[4] = {char(v >> 24), char(v >> 16), char(v >> 8), char(v)};
            lab.write(b, 4);
        };
        be32(0x00000801u);
        be32(2);
        const unsigned char ls[2] = {3, 7};
        lab.write(reinterpret_cast<const char*>(ls), 2);
    }
    DenseMatrix imgs = pb::load_idx_images(img_path);
    REQUIRE(imgs.rows == 4);
    REQUIRE(imgs.cols == 2);
    CHECK(imgs(1, 0) == Catch::Approx(51.0 / 255.0));
    CHECK(imgs(3, 1) == Catch::Approx(1.0));
    std::vector<int> labels = pb::load_idx_labels(lab_path);
    CHECK(labels == std::vector<int>{3, 7});

    CHECK_THROWS_AS(pb::load_idx_images(lab_path), format_error);
    CHECK_THROWS_AS(pb::load_idx_labels(img_path), format_error);
    std::remove(img_path.c_str());
    std::remove(lab_path.c_str());
}
