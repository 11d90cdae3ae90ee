#include <gtest/gtest.h>

#include <functional>

#include "linear_oracle.hpp"

using namespace ntku;

namespace {

Jacobian jac(DenseMatrix m) {
    const std::size_t n = m.rows();
    return {std::move(m), n, 1, "full"};
}

std::string stage_of(const std::function<void()>& fn) {
    try {
        fn();
    } catch (const Error& e) {
        if (e.code() != ErrorCode::SingularBeyondPolicy) return "other";
        const std::string what = e.what();
        if (what.find("stage rr") != std::string::npos) return "rr";
        if (what.find("stage schur") != std::string::npos) return "schur";
        return "unlabelled";
    }
    return "none";
}

struct Trained {
    Model init, full;
    Dataset data;
    ParamMask mask;
};

Trained small_setup() {
    Trained t;
    t.data = split_forget(gen_blobs(3, 8, 4, 6.0, 21), {0});
    ModelSpec s;
    s.layer_sizes = {12};
    s.input_dim = 4;
    s.num_classes = 3;
    t.init = init_model(s, 21, {0.5, 0.02});
    calibrate_normalization(t.init, t.data.subset(TagFilter::Train).inputs);
    t.mask = select_params(t.init, {MaskKind::NormAffine, {}});
    TrainConfig cfg;
    cfg.optimizer = Optimizer::SgdMomentum;
    cfg.learning_rate = 0.2;
    cfg.epochs = 20;
    cfg.batch_size = 8;
    cfg.seed = 21;
    cfg.mask = t.mask;
    t.full = finetune(t.init, t.data, cfg).model;
    return t;
}

}  // namespace

TEST(ComputeM, TwoParameterExample) {
    const DenseMatrix k_rr{{1}}, k_rf{{1}}, k_ff{{2}};
    const RetainSolver rr(k_rr, k_rf, {});
    const auto m = compute_M(k_ff, k_rf, rr, {});
    EXPECT_EQ(m.m, (DenseMatrix{{1}}));
    EXPECT_EQ(m.jitter_used, 0.0);
}

TEST(ComputeM, EmptyForgetSet) {
    const DenseMatrix k_rr = DenseMatrix::identity(2), k_rf(2, 0), k_ff(0, 0);
    const RetainSolver rr(k_rr, k_rf, {});
    EXPECT_EQ(compute_M(k_ff, k_rf, rr, {}).m.size(), 0u);
}

TEST(ComputeM, DecoupledBlocksGiveInverseOfForgetKernel) {
    const DenseMatrix k_rr{{2, 0.5}, {0.5, 1}}, k_rf(2, 2), k_ff{{4, 1}, {1, 3}};
    const RetainSolver rr(k_rr, k_rf, {});
    const auto m = compute_M(k_ff, k_rf, rr, {});
    const oracle::Mat inv = oracle::to_eigen(k_ff).inverse();
    EXPECT_LE((oracle::to_eigen(m.m) - inv).norm(), 1e-14 * inv.norm());
}

TEST(ComputeM, MatchesEigenSchurInverseAndIsSymmetric) {
    std::mt19937_64 g(31);
    for (int trial = 0; trial < 20; ++trial) {
        const auto jr = oracle::random_matrix(g, oracle::uniform_int(g, 1, 10), 30);
        const auto jf = oracle::random_matrix(g, oracle::uniform_int(g, 1, 6), 30);
        const auto k = kernel_blocks(jac(jr), jac(jf));
        const RetainSolver rr(k.rr.matrix, k.rf.matrix, {});
        const auto m = compute_M(k.ff.matrix, k.rf.matrix, rr, {});
        const oracle::Mat krr = oracle::to_eigen(k.rr.matrix), krf = oracle::to_eigen(k.rf.matrix);
        const oracle::Mat s = oracle::to_eigen(k.ff.matrix) - krf.transpose() * krr.ldlt().solve(krf);
        const oracle::Mat expect = s.inverse();
        const oracle::Mat got = oracle::to_eigen(m.m);
        EXPECT_LE((got - expect).norm(), 1e-8 * expect.norm());
        EXPECT_LE((got - got.transpose()).norm(), 1e-8 * got.norm());
    }
}

TEST(ComputeV, Examples) {
    const DenseMatrix k_rr{{1}}, k_rf{{1}};
    const RetainSolver rr(k_rr, k_rf, {});
    EXPECT_EQ(compute_V({{1.0}, {0.0}}, k_rf, rr), (std::vector<double>{1.0}));
    EXPECT_EQ(compute_V({{0.0}, {0.0}}, k_rf, rr), (std::vector<double>{0.0}));
    EXPECT_EQ(compute_V({{0.0}, {2.5}}, k_rf, rr), (std::vector<double>{-2.5}));
    EXPECT_THROW((void)compute_V({{0.0, 1.0}, {2.5}}, k_rf, rr), Error);
}

TEST(ProjectForget, TwoParameterExample) {
    const DenseMatrix jr{{1, 0}}, jf{{1, 1}};
    const RetainSolver rr(gram(jr), gram(jr, jf), {});
    EXPECT_EQ(project_forget(jr, jf, rr), (DenseMatrix{{0}, {1}}));
}

TEST(ProjectForget, RetainDirectionsProjectToZero) {
    std::mt19937_64 g(33);
    const auto jr = oracle::random_matrix(g, 6, 20);
    const RetainSolver rr(gram(jr), gram(jr, jr), {});
    const auto p = project_forget(jr, jr, rr);
    for (double v : p.values()) EXPECT_NEAR(v, 0.0, 1e-10);
}

TEST(ProjectForget, EmptyRetainSetIsIdentityProjector) {
    std::mt19937_64 g(35);
    const auto jf = oracle::random_matrix(g, 3, 5);
    const DenseMatrix jr(0, 5);
    const RetainSolver rr(gram(jr), gram(jr, jf), {});
    EXPECT_EQ(project_forget(jr, jf, rr), transpose(jf));
}

TEST(ProjectForget, OrthogonalToRetainRows) {
    std::mt19937_64 g(37);
    for (int trial = 0; trial < 50; ++trial) {
        const std::size_t d = oracle::uniform_int(g, 4, 50);
        const auto jr = oracle::random_matrix(g, oracle::uniform_int(g, 1, d / 2), d);
        const auto jf = oracle::random_matrix(g, oracle::uniform_int(g, 1, 6), d);
        const RetainSolver rr(gram(jr), gram(jr, jf), {});
        ASSERT_EQ(rr.jitter_used(), 0.0);
        const oracle::Mat pj = oracle::to_eigen(project_forget(jr, jf, rr));
        const double lhs = (oracle::to_eigen(jr) * pj).norm();
        EXPECT_LE(lhs, 1e-8 * frobenius_norm(jr) * frobenius_norm(jf));
    }
}

TEST(Projector, MaterializedIsIdempotentAndSymmetric) {
    std::mt19937_64 g(39);
    for (int trial = 0; trial < 50; ++trial) {
        const std::size_t d = oracle::uniform_int(g, 4, 50);
        const auto jr = oracle::random_matrix(g, oracle::uniform_int(g, 1, d / 2), d);
        const PsdFactor f = factor_psd(gram(jr));
        const oracle::Mat p = oracle::Mat::Identity(d, d) -
                              oracle::to_eigen(jr).transpose() * oracle::to_eigen(f.solve(jr));
        EXPECT_LE((p * p - p).norm(), 1e-8);
        EXPECT_LE((p - p.transpose()).norm(), 1e-10);
    }
}

TEST(ScrubUpdate, TwoParameterExampleEndToEnd) {
    // θ₀ = 0, θ = [1, -1] interpolates both samples; residuals at θ₀ are the targets.
    const Jacobian jr = jac({{1, 0}}), jf = jac({{1, 1}});
    const auto rep = scrub_update(jr, jf, {{1.0}, {0.0}}, {});
    ASSERT_EQ(rep.delta.size(), 2u);
    EXPECT_NEAR(rep.delta[0], 0.0, 1e-12);
    EXPECT_NEAR(rep.delta[1], 1.0, 1e-12);
    const std::vector<double> theta{1.0, -1.0};
    EXPECT_NEAR(theta[0] + rep.delta[0], 1.0, 1e-12);
    EXPECT_NEAR(theta[1] + rep.delta[1], 0.0, 1e-12);
    EXPECT_EQ(rep.jitter_rr, 0.0);
    EXPECT_EQ(rep.jitter_schur, 0.0);
    EXPECT_NEAR(rep.schur_min_eig_estimate, 1.0, 1e-12);
    EXPECT_NEAR(rep.v_norm, 1.0, 1e-15);
    EXPECT_NEAR(rep.m_norm, 1.0, 1e-15);
    EXPECT_NEAR(rep.delta_norm, 1.0, 1e-12);
}

TEST(ScrubUpdate, EmptyForgetSetIsZeroDelta) {
    const auto rep = scrub_update(jac({{1, 0}}), jac(DenseMatrix(0, 2)), {{1.0}, {}}, {});
    EXPECT_EQ(rep.delta, (std::vector<double>{0.0, 0.0}));
}

TEST(ScrubUpdate, ReportsFailingStage) {
    const JitterPolicy tight{1e-8, 10.0, 1e-6};
    EXPECT_EQ(stage_of([&] { const RetainSolver rr(DenseMatrix{{-1}}, DenseMatrix{{1}}, tight); }), "rr");
    // Forget row inside the retain span: the Schur complement is zero.
    EXPECT_EQ(stage_of([&] { (void)scrub_update(jac({{1, 0}}), jac({{2, 0}}), {{0}, {1}}, tight); }),
              "schur");
}

TEST(Scrub, LinearOracleEquivalence) {
    std::mt19937_64 g(41);
    for (int trial = 0; trial < 100; ++trial) {
        ASSERT_LE(oracle::scrub_relative_error(g), 1e-6) << trial;
    }
}

TEST(Scrub, NeverTouchesParametersOutsideTheMask) {
    const Trained t = small_setup();
    const ScrubResult r = scrub(t.full, t.init, t.data, t.mask);
    std::vector<bool> in(t.full.params.size(), false);
    for (auto i : t.mask.indices) in[i] = true;
    std::size_t changed = 0;
    for (std::size_t i = 0; i < in.size(); ++i) {
        if (!in[i]) {
            EXPECT_EQ(r.model.params.values()[i], t.full.params.values()[i]);
        } else {
            changed += r.model.params.values()[i] != t.full.params.values()[i];
        }
    }
    EXPECT_GT(changed, 0u);
    EXPECT_EQ(r.model.buffers, t.full.buffers);
    EXPECT_EQ(r.report.d_masked, t.mask.size());
    EXPECT_EQ(r.report.retain_rows, t.data.count(TagFilter::Retain) * 3);
    EXPECT_EQ(r.report.memory_bytes, memory_estimate(16, 8, 3, t.mask.size()));
}

TEST(Scrub, EmptyForgetSetLeavesModelUnchanged) {
    Trained t = small_setup();
    for (auto& tag : t.data.tags)
        if (tag == SplitTag::Forget) tag = SplitTag::Retain;
    const ScrubResult r = scrub(t.full, t.init, t.data, t.mask);
    EXPECT_EQ(r.model.params, t.full.params);
}

TEST(Scrub, ResidualPointSwitch) {
    const Trained t = small_setup();
    ScrubOptions o;
    o.residuals_at = ResidualPoint::Final;
    const ScrubResult a = scrub(t.full, t.init, t.data, t.mask);
    const ScrubResult b = scrub(t.full, t.init, t.data, t.mask, o);
    EXPECT_EQ(a.report.residuals_at, "initialization");
    EXPECT_EQ(b.report.residuals_at, "final");
    EXPECT_NE(a.report.delta, b.report.delta);
}

TEST(Scrub, BlockSizeDoesNotChangeBits) {
    const Trained t = small_setup();
    ScrubOptions one, many;
    one.block_size = 1;
    many.block_size = 1000;
    many.threads = 3;
    EXPECT_EQ(scrub(t.full, t.init, t.data, t.mask, one).report.delta,
              scrub(t.full, t.init, t.data, t.mask, many).report.delta);
}

TEST(Scrub, BudgetAndLayoutChecks) {
    const Trained t = small_setup();
    ScrubOptions o;
    o.memory_budget = 100;
    try {
        (void)scrub(t.full, t.init, t.data, t.mask, o);
        FAIL();
    } catch (const Error& e) {
        EXPECT_EQ(e.code(), ErrorCode::BudgetExceeded);
    }
    const Model other = oracle::linear_model(4, 3);
    EXPECT_THROW((void)scrub(t.full, other, t.data, t.mask), Error);
}

TEST(ScrubReport, TextRoundTripIsExact) {
    const Trained t = small_setup();
    const ScrubResult r = scrub(t.full, t.init, t.data, t.mask);
    const std::string text = scrub_report_to_text(r.report);
    const ScrubReport back = scrub_report_from_text(text);
    EXPECT_EQ(back.delta, r.report.delta);
    EXPECT_EQ(back.jitter_rr, r.report.jitter_rr);
    EXPECT_EQ(back.schur_min_eig_estimate, r.report.schur_min_eig_estimate);
    EXPECT_EQ(back.memory_bytes, r.report.memory_bytes);
    EXPECT_EQ(back.mask_name, "norm_affine");
    EXPECT_EQ(scrub_report_to_text(back), text);
    EXPECT_THROW((void)scrub_report_from_text("mask = x\n"), Error);
}
