#include <gtest/gtest.h>

#include <cmath>

#include "epban/gradcheck.hpp"
#include "epban/losses.hpp"
#include "test_util.hpp"

namespace epban {
namespace {

using test::random_tensor;
using T64 = Tensor<double>;

PbanModel<double> frozen_metric(std::uint64_t seed = 3) {
    auto m = PbanModel<double>::initialized({8, 1e-8, 0.2}, seed);
    m.freeze();
    return m;
}

struct Pair {
    T64 sr, hr;
};

Pair images(std::uint64_t seed) {
    auto hr = random_tensor({1, 3, 16, 16}, seed, 0, 1, false);
    auto sr = random_tensor({1, 3, 16, 16}, seed + 100, 0, 1);
    return {sr, hr};
}

std::vector<double> grad_of(const T64& loss, T64& x) {
    x.zero_grad();
    loss.backward();
    return {x.grad().begin(), x.grad().end()};
}

TEST(QualityRegression, ClosedForm) {
    auto q = T64::from({1}, {3.0}, true);
    EXPECT_EQ(quality_regression_loss(q, 3.0).item(), 0.0);
    auto l = quality_regression_loss(q, 1.0);
    EXPECT_EQ(l.item(), 4.0);
    l.backward();
    EXPECT_NEAR(q.grad()[0], 4.0, 1e-12);
    const double h = 1e-6;
    const double fd = ((3.0 + h - 1) * (3.0 + h - 1) - (3.0 - h - 1) * (3.0 - h - 1)) / (2 * h);
    EXPECT_NEAR(q.grad()[0], fd, 1e-6);
}

TEST(QualityRegression, BatchMean) {
    auto q = T64::from({3, 1}, {1.0, 2.0, 5.0}, true);
    const std::vector<double> mos{1.0, 4.0, 2.0};
    EXPECT_DOUBLE_EQ(quality_regression_loss(q, std::span<const double>(mos)).item(), (0 + 4 + 9) / 3.0);
    const auto r = gradcheck("l2", [&](auto& in) { return quality_regression_loss(in[0], std::span<const double>(mos)); }, {q});
    EXPECT_LT(r.max_rel_error, 1e-6);
}

TEST(QualityRegression, Validation) {
    auto q = T64::from({1}, {3.0}, true);
    EXPECT_THROW(quality_regression_loss(q, std::nan("")), ValidationError);
    EXPECT_THROW(quality_regression_loss(q, INFINITY), ValidationError);
    const std::vector<double> two{1, 2};
    EXPECT_THROW(quality_regression_loss(q, std::span<const double>(two)), ShapeError);
}

TEST(LossWeights, Validation) {
    EXPECT_THROW((LossWeights{0, 0}).validate(), ValidationError);
    EXPECT_THROW((LossWeights{-1, 2}).validate(), ValidationError);
    EXPECT_NO_THROW((LossWeights{1, 0}).validate());
}

TEST(CombinedLoss, LiteralEqualWeightsHasNoGradient) {
    const auto metric = frozen_metric();
    auto [sr, hr] = images(1);
    auto out = combined_loss(sr, hr, metric, {}, {0.5, 0.5}, Denominator::literal);
    EXPECT_NEAR(out.loss.item(), 0.5, 1e-12);
    const auto g = grad_of(out.loss, sr);
    double m = 0;
    for (double v : g) m = std::max(m, std::abs(v));
    EXPECT_LT(m, 1e-9);
}

TEST(CombinedLoss, StopGradientMatchesTwoPassOracle) {
    const auto metric = frozen_metric();
    auto [sr, hr] = images(2);
    const LossWeights w{0.3, 0.7};
    auto out = combined_loss(sr, hr, metric, {}, w);
    const auto g = grad_of(out.loss, sr);
    const auto gd = grad_of(distortion_loss(sr, hr, SsimConfig{}), sr);
    const auto gp = grad_of(perceptual_loss(sr, hr, metric), sr);
    const double den = std::abs(out.distortion.item() + out.perceptual.item()) + 1e-6;
    EXPECT_DOUBLE_EQ(out.denominator, den);
    for (std::size_t i = 0; i < g.size(); ++i) EXPECT_NEAR(g[i], (w.alpha * gd[i] + w.beta * gp[i]) / den, 1e-6);
}

TEST(CombinedLoss, DistortionOnlyParallelToSsim) {
    const auto metric = frozen_metric();
    auto [sr, hr] = images(3);
    const auto g = grad_of(combined_loss(sr, hr, metric, {}, {1, 0}).loss, sr);
    const auto gs = grad_of(neg(ssim(sr, hr)), sr);
    double dot = 0, na = 0, nb = 0;
    for (std::size_t i = 0; i < g.size(); ++i) {
        dot += g[i] * gs[i];
        na += g[i] * g[i];
        nb += gs[i] * gs[i];
    }
    EXPECT_GT(dot / std::sqrt(na * nb), 1 - 1e-6);
}

TEST(CombinedLoss, Homogeneous) {
    const auto metric = frozen_metric();
    auto [sr, hr] = images(4);
    const auto g1 = grad_of(combined_loss(sr, hr, metric, {}, {0.25, 0.5}).loss, sr);
    for (double c : {2.0, 4.0, 0.5}) {
        const auto gc = grad_of(combined_loss(sr, hr, metric, {}, {0.25 * c, 0.5 * c}).loss, sr);
        for (std::size_t i = 0; i < g1.size(); ++i) EXPECT_EQ(gc[i], c * g1[i]);
    }
}

TEST(CombinedLoss, MetricUnchangedAndDenominatorPositive) {
    const auto metric = frozen_metric();
    std::vector<std::vector<double>> before;
    for (auto& [n, t] : metric.named_parameters()) before.emplace_back(t.values().begin(), t.values().end());
    for (std::uint64_t s = 0; s < 3; ++s) {
        auto [sr, hr] = images(10 + s);
        auto out = combined_loss(sr, hr, metric, {}, {0.5, 0.5});
        EXPECT_GE(out.denominator, kDenominatorEps);
        out.loss.backward();
    }
    std::size_t i = 0;
    for (auto& [n, t] : metric.named_parameters()) {
        EXPECT_FALSE(t.has_grad()) << n;
        EXPECT_EQ(std::vector<double>(t.values().begin(), t.values().end()), before[i++]) << n;
    }
}

TEST(CombinedLoss, TrainableMetricRejected) {
    auto metric = PbanModel<double>::initialized({8, 1e-8, 0.2}, 5);
    auto [sr, hr] = images(5);
    EXPECT_THROW(combined_loss(sr, hr, metric, {}, {0.5, 0.5}), ContractError);
}

}  // namespace
}  // namespace epban
