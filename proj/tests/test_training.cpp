#include <gtest/gtest.h>

#include <filesystem>
#include <map>

#include "epban/training.hpp"

namespace epban {
namespace {

namespace fs = std::filesystem;

template <class M>
std::map<std::string, std::vector<float>> snapshot(const M& m) {
    std::map<std::string, std::vector<float>> out;
    for (const auto& [n, t] : m.named_parameters()) out[n].assign(t.values().begin(), t.values().end());
    return out;
}

using Params = std::vector<std::pair<std::string, Tensor<double>>>;

Tensor<double> param_with_grad(std::vector<double> values, std::vector<double> grad) {
    auto p = Tensor<double>::from({values.size()}, values, true);
    sum(mul(p, Tensor<double>::from({grad.size()}, grad))).backward();
    return p;
}

TEST(Adam, ZeroGradientIsFixedPoint) {
    auto p = param_with_grad({1.0, -2.0, 3.0}, {0.0, 0.0, 0.0});
    AdamState s;
    for (int i = 0; i < 5; ++i) adam_step(Params{{"p", p}}, s, 0.1);
    EXPECT_EQ(p.values()[0], 1.0);
    EXPECT_EQ(p.values()[1], -2.0);
    EXPECT_EQ(p.values()[2], 3.0);
}

TEST(Adam, FirstStepClosedForm) {
    const std::vector<double> g{0.5, -3.0, 1e-3, 2e-9};
    auto p = param_with_grad({0.0, 0.0, 0.0, 0.0}, g);
    AdamState s;
    const double lr = 0.01, eps = 1e-8;
    adam_step(Params{{"p", p}}, s, lr);
    for (std::size_t i = 0; i < g.size(); ++i) {
        // Bias correction makes m_hat = g and v_hat = g^2 on step one.
        const double expect = -lr * g[i] / (std::abs(g[i]) + eps);
        EXPECT_NEAR(p.values()[i], expect, 1e-15) << i;
    }
    EXPECT_EQ(s.steps.at("p"), 1);
}

TEST(Adam, SecondStepMatchesRecurrence) {
    auto p = Tensor<double>::from({1}, {1.0}, true);
    AdamState s;
    double m = 0, v = 0, x = 1.0;
    const double lr = 0.05;
    for (int k = 1; k <= 3; ++k) {
        p.zero_grad();
        sum(square(p)).backward();
        const double g = 2 * x;
        m = 0.9 * m + 0.1 * g;
        v = 0.999 * v + 0.001 * g * g;
        x -= lr * (m / (1 - std::pow(0.9, k))) / (std::sqrt(v / (1 - std::pow(0.999, k))) + 1e-8);
        adam_step(Params{{"p", p}}, s, lr);
        EXPECT_NEAR(p.values()[0], x, 1e-14);
    }
}

TEST(Adam, Deterministic) {
    auto run = [] {
        auto p = Tensor<double>::from({3}, {0.3, -0.1, 0.7}, true);
        AdamState s;
        for (int i = 0; i < 20; ++i) {
            p.zero_grad();
            sum(mul(sigmoid(p), p)).backward();
            adam_step(Params{{"p", p}}, s, 0.01);
        }
        return std::vector<double>(p.values().begin(), p.values().end());
    };
    EXPECT_EQ(run(), run());
}

TEST(Adam, NonFiniteGradientAbortsWithName) {
    auto good = param_with_grad({1.0}, {1.0});
    auto bad = param_with_grad({1.0, 2.0}, {0.0, std::nan("")});
    AdamState s;
    try {
        adam_step(Params{{"good", good}, {"layer.bad", bad}}, s, 0.1);
        FAIL() << "expected NonFiniteError";
    } catch (const NonFiniteError& e) {
        EXPECT_NE(std::string(e.what()).find("layer.bad"), std::string::npos);
    }
    EXPECT_EQ(good.values()[0], 1.0);  // nothing applied
}

TEST(Adam, SkipsFrozenAndTreatsMissingGradAsZero) {
    auto frozen = Tensor<double>::from({1}, {4.0}, false);
    auto no_grad = Tensor<double>::from({1}, {5.0}, true);
    AdamState s;
    adam_step(Params{{"f", frozen}, {"n", no_grad}}, s, 0.1);
    EXPECT_EQ(frozen.values()[0], 4.0);
    EXPECT_EQ(no_grad.values()[0], 5.0);
    EXPECT_FALSE(s.steps.count("f"));
    EXPECT_EQ(s.steps.at("n"), 1);
}

TEST(Dihedral, GroupOfEight) {
    const Image img = generate_hr(0, 8, 1);
    std::vector<std::vector<float>> seen;
    for (unsigned k = 0; k < 8; ++k) {
        const Image t = dihedral(img, k);
        for (const auto& s : seen) EXPECT_NE(s, t.values) << k;
        seen.push_back(t.values);
    }
    EXPECT_EQ(dihedral(dihedral(img, 4), 4).values, img.values);  // transpose
    EXPECT_EQ(dihedral(dihedral(img, 3), 3).values, img.values);  // 180 degree turn
    EXPECT_EQ(dihedral(img, 1).at(0, 2, 0), img.at(0, 2, 7));
    EXPECT_THROW(dihedral(Image(4, 6), 4), ShapeError);
}

TEST(ShuffledOrder, DeterministicPermutation) {
    const auto a = shuffled_order(50, 3), b = shuffled_order(50, 3), c = shuffled_order(50, 4);
    EXPECT_EQ(a, b);
    EXPECT_NE(a, c);
    auto sorted = a;
    std::sort(sorted.begin(), sorted.end());
    for (std::size_t i = 0; i < sorted.size(); ++i) EXPECT_EQ(sorted[i], i);
}

TEST(LogCsv, Format) {
    LogRow r{3, "2", "val"};
    r.loss = 0.25;
    r.plcc = -0.5;
    EXPECT_EQ(format_log_row(r), "3,2,val,0.250000,,,,-0.500000,");
    EXPECT_EQ(std::string(kLogHeader), "epoch,stage,split,loss,psnr,ssim,metric_score,plcc,srcc");
}

QualitySet tiny_quality_set(std::uint64_t seed, std::size_t refs) {
    QualitySet set;
    std::mt19937_64 rng(seed);
    for (std::size_t r = 0; r < refs; ++r) {
        const Image hr = generate_hr(r, 16, seed);
        for (std::size_t v = 0; v < 4; ++v) {
            Image sr = quantize_8bit(degrade(hr, sample_recipe(v, 4, rng)));
            set.mos.push_back(oracle_mos(sr, hr));
            set.sr.push_back(std::move(sr));
            set.hr.push_back(hr);
            set.ids.push_back("pair" + std::to_string(set.ids.size()));
        }
    }
    return set;
}

class MetricTraining : public ::testing::Test {
protected:
    QualitySet train = tiny_quality_set(1, 3), val = tiny_quality_set(2, 1);
    PbanConfig pcfg{8, 1e-8, 0.2};
    TrainConfig cfg;
    double mean_mos() const { return std::accumulate(train.mos.begin(), train.mos.end(), 0.0) / train.size(); }
};

TEST_F(MetricTraining, ZeroEpochsReturnsInitialization) {
    cfg.epochs_stage1 = cfg.epochs_stage2 = 0;
    const auto res = train_metric(train, val, pcfg, cfg);
    EXPECT_EQ(snapshot(res.model), snapshot(init_metric(pcfg, cfg.seed, mean_mos())));
    EXPECT_EQ(res.best_epoch, 0u);
    ASSERT_EQ(res.log.size(), 1u);
    EXPECT_EQ(res.log[0].stage, "init");
}

TEST_F(MetricTraining, StemFrozenInStageOneOnly) {
    const auto init = snapshot(init_metric(pcfg, cfg.seed, mean_mos()));
    cfg.keep_best = false;
    for (std::size_t epochs : {1u, 2u}) {
        cfg.epochs_stage1 = epochs;
        cfg.epochs_stage2 = 0;
        const auto after = snapshot(train_metric(train, val, pcfg, cfg).model);
        for (const auto& [n, v] : after)
            if (PbanModel<float>::is_stem(n)) EXPECT_EQ(v, init.at(n)) << n << " after " << epochs;
        EXPECT_NE(after.at("fuse1.weight"), init.at("fuse1.weight"));
        EXPECT_NE(after.at("branch_sr.conv1.weight"), init.at("branch_sr.conv1.weight"));
    }
    cfg.epochs_stage1 = 1;
    cfg.epochs_stage2 = 1;
    const auto both = snapshot(train_metric(train, val, pcfg, cfg).model);
    EXPECT_NE(both.at("stem.conv.weight"), init.at("stem.conv.weight"));
}

TEST_F(MetricTraining, BestValidationModelIsReturned) {
    cfg.epochs_stage1 = 3;
    cfg.epochs_stage2 = 1;
    const auto res = train_metric(train, val, pcfg, cfg);
    double best = -2.0;
    for (const auto& r : res.log)
        if (r.split == "val" && r.plcc) best = std::max(best, *r.plcc);
    ASSERT_TRUE(res.best_plcc.has_value());
    EXPECT_EQ(*res.best_plcc, best);
    EXPECT_EQ(*validation_row(res.model, val, 0, "x").plcc, best);
    std::size_t rows = 0;
    for (const auto& r : res.log) rows += r.split == "train";
    EXPECT_EQ(rows, 4u);
}

TEST_F(MetricTraining, Reproducible) {
    cfg.epochs_stage1 = 1;
    cfg.epochs_stage2 = 1;
    const auto a = train_metric(train, val, pcfg, cfg), b = train_metric(train, val, pcfg, cfg);
    EXPECT_EQ(snapshot(a.model), snapshot(b.model));
    ASSERT_EQ(a.log.size(), b.log.size());
    for (std::size_t i = 0; i < a.log.size(); ++i) EXPECT_EQ(format_log_row(a.log[i]), format_log_row(b.log[i]));
}

TEST_F(MetricTraining, Validation) {
    cfg.learning_rate = 0.0;
    EXPECT_THROW(train_metric(train, val, pcfg, cfg), ValidationError);
    cfg = {};
    cfg.batch_size = 0;
    EXPECT_THROW(train_metric(train, val, pcfg, cfg), ValidationError);
    EXPECT_THROW(train_metric(QualitySet{}, val, pcfg, TrainConfig{}), ValidationError);
}

TEST(QualitySetLoading, ErrorsNameTheRecord) {
    const auto dir = fs::temp_directory_path() / "epban_training_load";
    fs::remove_all(dir);
    const auto rows = build_dataset({3, 2, 16, 5}, dir.string());
    EXPECT_EQ(load_quality_set(rows, dir.string(), Split::train).size(), 2u);
    EXPECT_EQ(load_references(rows, dir.string(), Split::val).size(), 1u);
    fs::remove(dir / rows[1].sr_path);
    try {
        load_quality_set(rows, dir.string(), Split::train);
        FAIL() << "expected failure";
    } catch (const std::runtime_error& e) {
        EXPECT_NE(std::string(e.what()).find(rows[1].sr_path), std::string::npos);
        EXPECT_NE(std::string(e.what()).find("record 2"), std::string::npos);
    }
    std::vector<ScoredPair> only_train(rows.begin(), rows.begin() + 2);
    EXPECT_THROW(load_quality_set(only_train, dir.string(), Split::test), ValidationError);
    fs::remove_all(dir);
}

// ---------------------------------------------------------------- tiny SR

TEST(TinySr, DoublesResolutionAndStartsNearBicubic) {
    const auto m = init_tiny_sr(3);
    const Image hr = generate_hr(0, 16, 3);
    const SrSet set = make_sr_set({hr});
    EXPECT_EQ(set.lr[0].height, 8u);
    const auto out = super_resolve(m, set);
    ASSERT_EQ(out[0].height, 16u);
    EXPECT_EQ(out[0].width, 16u);
    EXPECT_GT(psnr(out[0], set.up[0]), 25.0);

    const Image* lr = &set.lr[0];
    auto y1 = tiny_sr_forward(m, to_batch<float>({lr}));
    EXPECT_EQ(y1.shape(), (Shape{1, 3, 16, 16}));
    EXPECT_THROW(tiny_sr_forward(m, to_batch<float>({lr}), to_batch<float>({lr})), ShapeError);
}

TEST(TinySr, CheckpointRoundTripIsBitwise) {
    const auto m = init_tiny_sr(4);
    const auto back = decode_tiny_sr<float>(encode_tiny_sr(m));
    EXPECT_EQ(snapshot(back), snapshot(m));
    const SrSet set = make_sr_set({generate_hr(1, 16, 4)});
    EXPECT_EQ(super_resolve(back, set)[0].values, super_resolve(m, set)[0].values);
    EXPECT_THROW(decode_pban<float>(encode_tiny_sr(m)), CheckpointError);
}

class SrOptimization : public ::testing::Test {
protected:
    void SetUp() override {
        std::vector<Image> refs;
        for (std::size_t i = 0; i < 4; ++i) refs.push_back(generate_hr(i, 16, 8));
        train = make_sr_set({refs[0], refs[1], refs[2]});
        val = make_sr_set({refs[3]});
        metric = PbanModel<float>::initialized({8, 1e-8, 0.2}, 5);
        metric.freeze();
        cfg.epochs = 2;
        cfg.pretrain_epochs = 2;
        cfg.learning_rate = 1e-3;
    }
    SrSet train, val;
    PbanModel<float> metric{PbanConfig{}};
    SrConfig cfg;
};

TEST_F(SrOptimization, MetricUnchangedAndStartUntouched) {
    const auto before = snapshot(metric);
    const auto start = init_tiny_sr(2);
    const auto start_before = snapshot(start);
    const auto res = optimize_sr(start, train, val, metric, cfg);
    EXPECT_EQ(snapshot(metric), before);
    EXPECT_EQ(snapshot(start), start_before);
    EXPECT_NE(snapshot(res.model), start_before);
    EXPECT_TRUE(metric.is_frozen());
}

TEST_F(SrOptimization, LogShape) {
    const auto res = optimize_sr(init_tiny_sr(2), train, val, metric, cfg);
    ASSERT_EQ(res.log.size(), 5u);
    EXPECT_EQ(format_log_row(res.log[0]).substr(0, 9), "0,sr,val,");
    EXPECT_TRUE(res.log[0].psnr && res.log[0].ssim && res.log[0].metric_score);
    EXPECT_EQ(res.log[1].split, "train");
    EXPECT_TRUE(res.log[1].loss.has_value());
    EXPECT_EQ(*res.log[4].psnr, res.final.psnr);
    EXPECT_EQ(*res.log[0].metric_score, res.initial.metric_score);
}

TEST_F(SrOptimization, Reproducible) {
    const auto a = optimize_sr(init_tiny_sr(2), train, val, metric, cfg);
    const auto b = optimize_sr(init_tiny_sr(2), train, val, metric, cfg);
    EXPECT_EQ(snapshot(a.model), snapshot(b.model));
    const auto p = pretrain_sr(train, val, metric, cfg), q = pretrain_sr(train, val, metric, cfg);
    EXPECT_EQ(snapshot(p.model), snapshot(q.model));
    EXPECT_EQ(p.log[0].stage, "pretrain");
}

TEST_F(SrOptimization, Contracts) {
    auto live = PbanModel<float>::initialized({8, 1e-8, 0.2}, 5);
    EXPECT_THROW(optimize_sr(init_tiny_sr(2), train, val, live, cfg), ContractError);
    cfg.denominator = Denominator::literal;
    cfg.weights = {0.5, 0.5};
    try {
        optimize_sr(init_tiny_sr(2), train, val, metric, cfg);
        FAIL() << "expected refusal";
    } catch (const ValidationError& e) {
        EXPECT_NE(std::string(e.what()).find("gradcheck --no-stopgrad"), std::string::npos);
    }
    cfg.weights = {0.7, 0.3};
    EXPECT_NO_THROW(optimize_sr(init_tiny_sr(2), train, val, metric, cfg));
}

// With beta = 0 the combined loss is the SSIM loss divided by a per-step
// constant, so its gradient points the same way as the pure SSIM loss.
TEST_F(SrOptimization, DistortionOnlyWeightsFollowSsimDirection) {
    cfg.weights = {1.0, 0.0};
    const auto m = init_tiny_sr(6);
    const std::vector<std::size_t> items{0, 1, 2};
    auto flat_grad = [&] {
        std::vector<double> g;
        for (const auto& [n, t] : m.named_parameters())
            for (float v : t.grad()) g.push_back(v);
        m.zero_grad();
        return g;
    };
    m.zero_grad();
    auto obj = sr_objective(m, train, items, metric, cfg);
    obj.loss.backward();
    const auto gc = flat_grad();
    Tensor<float> hr;
    distortion_loss(sr_forward_items(m, train, items, &hr), hr, cfg.ssim).backward();
    const auto gs = flat_grad();
    double dot = 0, na = 0, nb = 0;
    for (std::size_t i = 0; i < gc.size(); ++i) {
        dot += gc[i] * gs[i];
        na += gc[i] * gc[i];
        nb += gs[i] * gs[i];
    }
    EXPECT_GT(dot / std::sqrt(na * nb), 1.0 - 1e-6);

    // One full-batch step: Adam's first update lr*g/(|g|+eps) ignores the
    // per-step denominator wherever |g| is well above eps.
    cfg.epochs = 1;
    cfg.batch_size = train.size();
    const auto combined = optimize_sr(m, train, val, metric, cfg);
    const auto pure = optimize_sr(m, train, val, metric, cfg, {}, SrObjective::ssim_only);
    auto flat = [](const TinySrModel<float>& x) {
        std::vector<double> v;
        for (const auto& [n, t] : x.named_parameters())
            for (float f : t.values()) v.push_back(f);
        return v;
    };
    const auto pc = flat(combined.model), pp = flat(pure.model);
    sr_objective(m, train, {0, 1, 2}, metric, cfg).loss.backward();
    const auto g_full = flat_grad();
    std::size_t compared = 0;
    for (std::size_t i = 0; i < pc.size(); ++i) {
        if (std::abs(g_full[i]) < 1e-5) continue;
        EXPECT_NEAR(pc[i], pp[i], 2e-6) << i;
        ++compared;
    }
    EXPECT_GT(compared, pc.size() / 2);
}

}  // namespace
}  // namespace epban
