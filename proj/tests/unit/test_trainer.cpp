#include <gtest/gtest.h>

#include "oracles.hpp"

using namespace ntku;

namespace {

struct Fixture {
    Model init, full;
    Dataset data;
    ParamMask mask;
    TrainConfig cfg;
};

TrainConfig momentum_cfg(const ParamMask& mask, std::uint64_t seed) {
    TrainConfig cfg;
    cfg.optimizer = Optimizer::SgdMomentum;
    cfg.learning_rate = 0.2;
    cfg.epochs = 30;
    cfg.batch_size = 8;
    cfg.seed = seed;
    cfg.mask = mask;
    return cfg;
}

Fixture small_setup(std::uint64_t seed = 5) {
    Fixture s;
    s.data = split_forget(gen_blobs(3, 10, 4, 6.0, seed), {0});
    ModelSpec spec;
    spec.layer_sizes = {16};
    spec.input_dim = 4;
    spec.num_classes = 3;
    s.init = init_model(spec, seed, {0.5, 0.02});
    calibrate_normalization(s.init, s.data.subset(TagFilter::Train).inputs);
    s.mask = select_params(s.init, {MaskKind::NormAffine, {}});
    s.cfg = momentum_cfg(s.mask, seed);
    s.full = finetune(s.init, s.data, s.cfg).model;
    return s;
}

std::vector<double> values(const Model& m) {
    return {m.params.values().begin(), m.params.values().end()};
}

ExperimentConfig default_config() {
    return load_config(std::filesystem::path(NTKU_SOURCE_DIR) / "configs" / "blobs_default.json", false);
}

}  // namespace

TEST(Finetune, ZeroEpochsLeavesModelUnchanged) {
    const Fixture s = small_setup();
    TrainConfig cfg = s.cfg;
    cfg.epochs = 0;
    const TrainResult r = finetune(s.init, s.data, cfg);
    EXPECT_EQ(r.model.params, s.init.params);
    EXPECT_TRUE(r.history.records.empty());
}

TEST(Finetune, FullBatchSgdStepMatchesHandGradient) {
    // Linear model, MSE: grad = (1/n) sum_s (W x_s - y_s) x_sᵀ.
    Model m = oracle::linear_model(3, 2);
    m.params.assign(std::vector<double>{0.1, -0.2, 0.3, 0.05, 0.4, -0.1});
    const DenseMatrix x{{1, 2, -1}, {0.5, -1, 2}, {-2, 0.25, 1}, {1, 1, 1}};
    const auto data = oracle::make_dataset(x, {0, 1, 1, 0}, std::vector<SplitTag>(4, SplitTag::Retain), 2);
    TrainConfig cfg;
    cfg.learning_rate = 0.1;
    cfg.epochs = 1;
    cfg.batch_size = 4;
    cfg.mask = ParamMask::full(6);
    const auto theta = values(m);
    std::vector<double> expect = theta;
    for (std::size_t s = 0; s < 4; ++s) {
        for (std::size_t k = 0; k < 2; ++k) {
            double f = 0.0;
            for (std::size_t i = 0; i < 3; ++i) f += theta[k * 3 + i] * x(s, i);
            const double r = f - (data.labels[s] == k ? 1.0 : 0.0);
            for (std::size_t i = 0; i < 3; ++i) expect[k * 3 + i] -= 0.1 * r * x(s, i) / 4.0;
        }
    }
    const auto got = values(finetune(m, data, cfg).model);
    for (std::size_t i = 0; i < 6; ++i) EXPECT_NEAR(got[i], expect[i], 1e-12) << i;
}

TEST(Finetune, MomentumAccumulatesVelocity) {
    Model m = oracle::linear_model(2, 2);
    m.params.assign(std::vector<double>{0.3, -0.1, 0.2, 0.4});
    const DenseMatrix x{{1, -1}, {0.5, 2}};
    const auto data = oracle::make_dataset(x, {0, 1}, std::vector<SplitTag>(2, SplitTag::Retain), 2);
    TrainConfig sgd;
    sgd.learning_rate = 0.05;
    sgd.epochs = 1;
    sgd.batch_size = 2;
    sgd.mask = ParamMask::full(4);
    const DenseMatrix targets = data.targets();
    auto grad = [&](const Model& mm) { return loss_gradient(mm, x, targets, Loss::MseOnehot, sgd.mask); };
    const auto g0 = grad(m);
    Model step1 = m;
    for (std::size_t i = 0; i < 4; ++i) step1.params.values()[i] -= 0.05 * g0[i];
    const auto g1 = grad(step1);
    TrainConfig mom = sgd;
    mom.optimizer = Optimizer::SgdMomentum;
    mom.momentum = 0.9;
    mom.epochs = 2;
    const auto got = values(finetune(m, data, mom).model);
    for (std::size_t i = 0; i < 4; ++i) {
        const double expect = values(step1)[i] - 0.05 * (0.9 * g0[i] + g1[i]);
        EXPECT_NEAR(got[i], expect, 1e-12) << i;
    }
}

TEST(Finetune, SeededRunsAreBitwiseReproducible) {
    const Fixture a = small_setup(9), b = small_setup(9);
    EXPECT_EQ(a.full.params, b.full.params);
    const Fixture c = small_setup(10);
    EXPECT_NE(a.full.params, c.full.params);
}

TEST(Finetune, OnlyMaskedParametersMove) {
    const Fixture s = small_setup();
    std::vector<bool> in(s.init.params.size(), false);
    for (auto i : s.mask.indices) in[i] = true;
    const auto before = values(s.init), after = values(s.full);
    std::size_t moved = 0;
    for (std::size_t i = 0; i < before.size(); ++i) {
        if (!in[i]) {
            EXPECT_EQ(before[i], after[i]) << i;
        } else {
            moved += before[i] != after[i];
        }
    }
    EXPECT_GT(moved, 0u);
}

TEST(Finetune, HistoryHasOneRowPerEpoch) {
    const Fixture s = small_setup();
    const TrainResult r = finetune(s.init, s.data, s.cfg);
    ASSERT_EQ(r.history.records.size(), s.cfg.epochs);
    const std::string csv = r.history.to_csv();
    EXPECT_TRUE(csv.starts_with("epoch,loss,retain_acc,forget_acc\n"));
    EXPECT_EQ(static_cast<std::size_t>(std::count(csv.begin(), csv.end(), '\n')), s.cfg.epochs + 1);
    EXPECT_EQ(r.history.records.back().epoch, s.cfg.epochs);
    EXPECT_LT(r.history.records.back().loss, r.history.records.front().loss);
}

TEST(Finetune, DivergenceIsNonFinite) {
    Model m = oracle::linear_model(2, 2);
    m.params.assign(std::vector<double>{1, 0, 0, 1});
    const auto data = oracle::make_dataset(DenseMatrix{{1, 2}, {2, 1}}, {1, 0}, {SplitTag::Retain, SplitTag::Retain}, 2);
    TrainConfig cfg;
    cfg.learning_rate = 1e200;
    cfg.epochs = 5;
    cfg.mask = ParamMask::full(4);
    try {
        (void)finetune(m, data, cfg);
        FAIL();
    } catch (const Error& e) {
        EXPECT_EQ(e.code(), ErrorCode::NonFinite);
    }
}

TEST(TrainConfig, InvalidSettingsRejected) {
    const Fixture s = small_setup();
    auto code = [&](auto edit) {
        TrainConfig cfg = s.cfg;
        edit(cfg);
        try {
            (void)finetune(s.init, s.data, cfg);
        } catch (const Error& e) {
            return e.code();
        }
        return ErrorCode::Io;
    };
    EXPECT_EQ(code([](TrainConfig& c) { c.learning_rate = 0.0; }), ErrorCode::InvalidConfig);
    EXPECT_EQ(code([](TrainConfig& c) { c.learning_rate = -1.0; }), ErrorCode::InvalidConfig);
    EXPECT_EQ(code([](TrainConfig& c) { c.batch_size = 0; }), ErrorCode::InvalidConfig);
    EXPECT_EQ(code([](TrainConfig& c) { c.momentum = 1.0; }), ErrorCode::InvalidConfig);
    EXPECT_EQ(code([](TrainConfig& c) { c.mask.indices.push_back(1u << 30); }), ErrorCode::InvalidStrategy);
    EXPECT_THROW((void)loss_from_string("hinge"), Error);
    EXPECT_THROW((void)optimizer_from_string("adam"), Error);
}

TEST(LossGradient, MatchesFiniteDifferences) {
    std::mt19937_64 g(51);
    ModelSpec mlp;
    mlp.layer_sizes = {5, 4};
    mlp.input_dim = 3;
    mlp.num_classes = 3;
    ModelSpec cnn;
    cnn.architecture = Architecture::CnnBn;
    cnn.input_dim = 2 * 16;
    cnn.in_channels = 2;
    cnn.out_channels = 4;
    cnn.groups = 2;
    cnn.num_classes = 3;
    ModelSpec attn;
    attn.architecture = Architecture::AttnPrompt;
    attn.seq_len = 3;
    attn.input_dim = 6;
    attn.embed_dim = 4;
    attn.prompt_length = 2;
    attn.num_classes = 3;
    for (const ModelSpec& spec : {mlp, cnn, attn}) {
        Model m = init_model(spec, 3, {1.0, 0.3});
        const auto x = oracle::random_matrix(g, 5, spec.input_dim);
        calibrate_normalization(m, x);
        const auto data = oracle::make_dataset(x, {0, 1, 2, 1, 0}, std::vector<SplitTag>(5, SplitTag::Retain), 3);
        const DenseMatrix y = data.targets();
        const ParamMask mask = ParamMask::full(m.params.size());
        for (Loss loss : {Loss::MseOnehot, Loss::CrossEntropy}) {
            const auto grad = loss_gradient(m, x, y, loss, mask);
            for (std::size_t i = 0; i < m.params.size(); ++i) {
                Model p = m, q = m;
                const double h = 1e-5 * std::max(1.0, std::abs(m.params.values()[i]));
                p.params.values()[i] += h;
                q.params.values()[i] -= h;
                const double fd = (mean_loss(p, x, y, loss) - mean_loss(q, x, y, loss)) / (2 * h);
                EXPECT_NEAR(grad[i], fd, 1e-6 * std::max(1.0, std::abs(fd)))
                    << to_string(spec.architecture) << " " << to_string(loss) << " " << i;
            }
        }
    }
}

TEST(SampleLoss, ClosedForms) {
    std::vector<double> d(2);
    const std::vector<double> f{2.0, 0.0}, y{0.0, 1.0};
    EXPECT_DOUBLE_EQ(sample_loss(Loss::MseOnehot, f, y, d, 1.0), 2.5);
    EXPECT_EQ(d, (std::vector<double>{2.0, -1.0}));
    const double ce = sample_loss(Loss::CrossEntropy, f, y, d, 1.0);
    EXPECT_NEAR(ce, std::log(std::exp(2.0) + 1.0), 1e-15);
    EXPECT_NEAR(d[0] + d[1], 0.0, 1e-15);
}

TEST(Retrain, EmptyForgetSetEqualsFinetune) {
    Fixture s = small_setup();
    const Dataset all_retain = split_forget(gen_blobs(3, 10, 4, 6.0, 5), {0});
    Dataset d = all_retain;
    for (auto& t : d.tags)
        if (t == SplitTag::Forget) t = SplitTag::Retain;
    const TrainResult a = finetune(s.init, d, s.cfg);
    const TrainResult b = retrain(s.init, d, s.cfg);
    EXPECT_EQ(a.model.params, b.model.params);
}

TEST(Retrain, NeverFitsForgetSamples) {
    const Fixture s = small_setup();
    const Model r = retrain(s.init, s.data, s.cfg).model;
    EXPECT_EQ(accuracy(r, s.data, TagFilter::Forget), 0.0);
    EXPECT_GE(accuracy(r, s.data, TagFilter::Retain), 0.95);
}

TEST(BlobDefaults, TrainingAccuracyAndRetrainReference) {
    // Measured regression fixture: default config, seed 1.
    const ExperimentConfig c = default_config();
    const Dataset data = experiment_data(c, 1);
    const Model init = experiment_init(c, data, 1);
    const TrainConfig cfg = c.train.with(select_params(init, c.mask_strategy), 1);
    const Model full = finetune(init, data, cfg).model;
    EXPECT_GE(accuracy(full, data, TagFilter::Train), 0.95);
    const Model gold = retrain(init, data, cfg).model;
    EXPECT_EQ(accuracy(gold, data, TagFilter::Forget), 0.0);
    EXPECT_GE(accuracy(gold, data, TagFilter::Retain), 0.95);
}

TEST(MaxLoss, ZeroEpochsAndEmptyForgetAreNoOps) {
    const Fixture s = small_setup();
    TrainConfig cfg = s.cfg;
    cfg.epochs = 0;
    EXPECT_EQ(max_loss_unlearn(s.full, s.data, cfg).params, s.full.params);
    Dataset d = s.data;
    for (auto& t : d.tags)
        if (t == SplitTag::Forget) t = SplitTag::Retain;
    EXPECT_EQ(max_loss_unlearn(s.full, d, s.cfg).params, s.full.params);
}

TEST(MaxLoss, FirstStepIncreasesForgetLoss) {
    const Fixture s = small_setup();
    const Dataset forget = s.data.subset(TagFilter::Forget);
    ASSERT_GT(accuracy(s.full, s.data, TagFilter::Forget), 0.0);
    TrainConfig cfg = s.cfg;
    cfg.optimizer = Optimizer::Sgd;
    cfg.epochs = 1;
    cfg.batch_size = forget.size();
    cfg.learning_rate = 1e-3;
    const Model stepped = max_loss_unlearn(s.full, s.data, cfg);
    const auto u0 = values(s.full), u1 = values(stepped);
    std::vector<double> dir(u0.size());
    for (std::size_t i = 0; i < dir.size(); ++i) dir[i] = u1[i] - u0[i];
    const double eps = 1e-3;
    Model p = s.full, q = s.full;
    for (std::size_t i = 0; i < dir.size(); ++i) {
        p.params.values()[i] += eps * dir[i];
        q.params.values()[i] -= eps * dir[i];
    }
    const DenseMatrix y = forget.targets();
    const double slope = (mean_loss(p, forget.inputs, y, cfg.loss) - mean_loss(q, forget.inputs, y, cfg.loss)) / (2 * eps);
    EXPECT_GT(slope, 0.0);
}

TEST(MaxLoss, DrivesForgetAccuracyToZero) {
    const Fixture s = small_setup();
    TrainConfig cfg = s.cfg;
    cfg.epochs = 50;
    const Model m = max_loss_unlearn(s.full, s.data, cfg);
    EXPECT_EQ(accuracy(m, s.data, TagFilter::Forget), 0.0);
}

TEST(RandomLabel, RelabelIsSeededAndCoversClasses) {
    const auto a = random_relabel(600, 3, 4), b = random_relabel(600, 3, 4), c = random_relabel(600, 3, 5);
    EXPECT_EQ(a, b);
    EXPECT_NE(a, c);
    std::vector<std::size_t> counts(3);
    for (auto l : a) ++counts.at(l);
    for (auto n : counts) EXPECT_NEAR(static_cast<double>(n), 200.0, 50.0);
    EXPECT_THROW((void)random_relabel(3, 1, 0), Error);
}

TEST(RandomLabel, ZeroEpochsNoOpAndSeededRun) {
    const Fixture s = small_setup();
    TrainConfig cfg = s.cfg;
    cfg.epochs = 0;
    EXPECT_EQ(random_label_unlearn(s.full, s.data, 3, cfg).params, s.full.params);
    const Model a = random_label_unlearn(s.full, s.data, 3, s.cfg);
    const Model b = random_label_unlearn(s.full, s.data, 3, s.cfg);
    EXPECT_EQ(a.params, b.params);
    EXPECT_NE(a.params, s.full.params);
}

TEST(Baselines, OnlyMaskedParametersMove) {
    const Fixture s = small_setup();
    std::vector<bool> in(s.init.params.size(), false);
    for (auto i : s.mask.indices) in[i] = true;
    const auto base = values(s.full);
    for (const Model& m : {max_loss_unlearn(s.full, s.data, s.cfg), random_label_unlearn(s.full, s.data, 3, s.cfg)}) {
        const auto v = values(m);
        for (std::size_t i = 0; i < v.size(); ++i)
            if (!in[i]) EXPECT_EQ(v[i], base[i]) << i;
    }
}

TEST(Relearn, AlreadyBelowThresholdIsZero) {
    const Fixture s = small_setup();
    const RelearnResult r = relearn_epochs(s.full, s.data, s.cfg, 10.0, 100);
    ASSERT_TRUE(r.epochs.has_value());
    EXPECT_EQ(*r.epochs, 0u);
    EXPECT_EQ(r.render(), "0");
}

TEST(Relearn, NeverConvergingOverflowsCap) {
    const Fixture s = small_setup();
    TrainConfig cfg = s.cfg;
    cfg.learning_rate = 1e-12;
    const Model scrambled = max_loss_unlearn(s.full, s.data, s.cfg);
    const RelearnResult r = relearn_epochs(scrambled, s.data, cfg, 0.05, 100);
    EXPECT_TRUE(r.overflow());
    EXPECT_EQ(r.render(), ">100");
    EXPECT_GE(r.final_loss, 0.05);
}

TEST(Relearn, CountsEpochsUntilLossDropsBelowThreshold) {
    const Fixture s = small_setup();
    const Model scrambled = max_loss_unlearn(s.full, s.data, s.cfg);
    const RelearnResult r = relearn_epochs(scrambled, s.data, s.cfg, 0.05, 100);
    ASSERT_TRUE(r.epochs.has_value());
    EXPECT_GE(*r.epochs, 1u);
    EXPECT_LT(r.final_loss, 0.05);
    // One epoch fewer must not be enough.
    TrainConfig cap = s.cfg;
    if (*r.epochs > 1) {
        const RelearnResult shorter = relearn_epochs(scrambled, s.data, cap, 0.05, *r.epochs - 1);
        EXPECT_TRUE(shorter.overflow());
    }
}

TEST(Relearn, InvalidArguments) {
    const Fixture s = small_setup();
    EXPECT_THROW((void)relearn_epochs(s.full, s.data, s.cfg, 0.0, 10), Error);
    EXPECT_THROW((void)relearn_epochs(s.full, s.data, s.cfg, 0.05, 0), Error);
    Dataset d = s.data;
    for (auto& t : d.tags)
        if (t == SplitTag::Forget) t = SplitTag::Retain;
    try {
        (void)relearn_epochs(s.full, d, s.cfg);
        FAIL();
    } catch (const Error& e) {
        EXPECT_EQ(e.code(), ErrorCode::EmptySplit);
    }
}

TEST(LinearProbe, OnlyHeadChanges) {
    const Fixture s = small_setup();
    TrainConfig cfg = s.cfg;
    cfg.learning_rate = 1e-2;
    cfg.epochs = 5;
    const Model p = linear_probe(s.full, s.data, cfg).model;
    const ParamMask head = select_params(s.full, {MaskKind::HeadOnly, {}});
    std::vector<bool> in(s.full.params.size(), false);
    for (auto i : head.indices) in[i] = true;
    const auto a = values(s.full), b = values(p);
    std::size_t moved = 0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        if (!in[i]) {
            EXPECT_EQ(a[i], b[i]) << i;
        } else {
            moved += a[i] != b[i];
        }
    }
    EXPECT_GT(moved, 0u);
    EXPECT_EQ(p.buffers, s.full.buffers);
}
