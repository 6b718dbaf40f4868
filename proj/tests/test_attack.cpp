#include <gtest/gtest.h>

#include <cmath>

#include "oracles/oracles.hpp"
#include "patchforge/attack/patch_attack.hpp"
#include "patchforge/error.hpp"
#include "patchforge/model/dataset.hpp"

using namespace patchforge;
using namespace patchforge::attack;
using diff::Shape;
using model::Dataset;

namespace {

constexpr std::size_t kEdge = 8;
constexpr std::size_t kIn = 3 * kEdge * kEdge;

// predicts class 1 iff the mean pixel exceeds 0.5
model::Network<float> mean_stub() {
    std::vector<double> w1(kIn, 1.0 / kIn);
    return oracles::linear_net(3, kEdge, kEdge, {std::vector<double>(kIn, 0.0), w1}, {0.0, -0.5}).cast<float>();
}

model::Network<float> random_linear(std::uint64_t seed) {
    Rng rng(seed);
    std::vector<std::vector<double>> w(2, std::vector<double>(kIn));
    for (auto& row : w)
        for (auto& v : row) v = rng.uniform(-1.0, 1.0);
    return oracles::linear_net(3, kEdge, kEdge, w, {0.1, -0.1}).cast<float>();
}

Dataset dark_images(std::size_t n, std::uint64_t seed) {
    Rng rng(seed);
    Dataset d;
    d.num_classes = 2;
    d.images = oracles::uniform({n, 3, kEdge, kEdge}, 0.0, 0.4, rng).cast<float>();
    d.labels.assign(n, 0);
    for (std::size_t i = 0; i < n; ++i) d.ids.push_back(i);
    return d;
}

EotBatch<float> full_cover(const Dataset& d, std::size_t copies) {
    EotBatch<float> b;
    std::vector<std::size_t> idx(copies, 0);
    b.images = d.gather(idx);
    b.specs.assign(copies, TransformSpec{0.0, 1.0, 0, 0});
    b.sources = idx;
    return b;
}

double target_probability(const model::Network<float>& net, const Tensor<float>& patch, const EotBatch<float>& b) {
    diff::Graph<float> g;
    auto x = geometry::apply_patch_opaque(g.leaf(b.images), g.leaf(patch), std::span(b.specs).first(1));
    return model::predict(net, x.value()).probabilities[1];
}

AttackOptConfig small_config() {
    AttackOptConfig c;
    c.iterations = 20;
    c.images_per_step = 4;
    c.support = TransformSupport{0.0, 0.5, 1.0, geometry::LocationStrategy::random};
    c.seed = 13;
    return c;
}

}  // namespace

TEST(EotStep, LinearModelTargetProbabilityRises) {
    const auto d = dark_images(1, 1);
    const auto b = full_cover(d, 1);
    for (std::uint64_t seed = 0; seed < 10; ++seed) {
        const auto net = random_linear(seed);
        Rng rng(seed);
        auto patch = initialize_patch(3, 16, 0.4, 0.6, rng);
        const double before = target_probability(net, patch, b);
        eot_step(patch, net, b, 1, 50.0, StepRule::sign);
        EXPECT_GT(target_probability(net, patch, b), before) << seed;
    }
}

TEST(EotStep, IdenticalBatchEqualsSingleSample) {
    const auto d = dark_images(1, 2);
    const auto net = random_linear(3);
    Rng rng(4);
    const auto init = initialize_patch(3, 16, 0.4, 0.6, rng);
    for (auto rule : {StepRule::sign, StepRule::sgd}) {
        auto one = init, four = init;
        const double l1 = eot_step(one, net, full_cover(d, 1), 1, 0.5, rule);
        const double l4 = eot_step(four, net, full_cover(d, 4), 1, 0.5, rule);
        EXPECT_NEAR(l1, l4, 1e-6);
        for (std::size_t i = 0; i < one.size(); ++i) EXPECT_NEAR(one[i], four[i], 1e-6);
    }
}

TEST(EotStep, ZeroRateLeavesPatch) {
    const auto d = dark_images(1, 5);
    Rng rng(6);
    const auto init = initialize_patch(3, 16, 0.4, 0.6, rng);
    auto p = init;
    eot_step(p, random_linear(7), full_cover(d, 2), 1, 0.0, StepRule::sgd);
    EXPECT_EQ(p, init);
}

TEST(EotStep, PixelsStayInUnitRange) {
    const auto d = dark_images(1, 8);
    Rng rng(9);
    auto p = initialize_patch(3, 16, 0.4, 0.6, rng);
    for (int k = 0; k < 5; ++k) {
        eot_step(p, random_linear(10), full_cover(d, 1), 1, 1000.0, StepRule::sgd);
        for (float v : p.values()) ASSERT_TRUE(v >= 0.0f && v <= 1.0f);
    }
}

TEST(Optimize, ZeroIterationsReturnsInitialization) {
    const auto d = dark_images(20, 11);
    const auto pool = make_pool(d, 1);
    auto c = small_config();
    c.iterations = 0;
    const auto p = optimize_patch(random_linear(12), pool, 1, c);
    Rng rng(c.seed);
    Rng init = rng.fork(0);
    EXPECT_EQ(p.pixels, initialize_patch(3, c.patch_edge, c.init_lo, c.init_hi, init));
    EXPECT_TRUE(p.loss_curve.empty());
}

TEST(Optimize, SameSeedSamePatch) {
    const auto d = dark_images(20, 14);
    const auto pool = make_pool(d, 1);
    const auto net = random_linear(15);
    const auto a = optimize_patch(net, pool, 1, small_config());
    const auto b = optimize_patch(net, pool, 1, small_config());
    EXPECT_EQ(a.pixels, b.pixels);
    EXPECT_EQ(a.loss_curve, b.loss_curve);
    EXPECT_EQ(a.loss_curve.size(), 20u);
    for (float v : a.pixels.values()) EXPECT_TRUE(v >= 0.0f && v <= 1.0f);
}

TEST(Optimize, TargetOutOfRangeRejected) {
    const auto d = dark_images(5, 16);
    EXPECT_THROW(optimize_patch(random_linear(1), make_pool(d, 1), 2, small_config()), ConfigError);
}

TEST(Evaluate, WhitePatchOnStubAlwaysSucceeds) {
    const auto d = dark_images(40, 17);
    const Tensor<float> white(Shape{3, 16, 16}, 1.0f);
    const TransformSupport full{0.0, 1.0, 1.0, geometry::LocationStrategy::random};
    EvalOptions o;
    o.samples_per_image = 3;
    const auto r = evaluate_attack(white, nullptr, mean_stub(), d, 1, full, o, 5);
    EXPECT_EQ(r.trials, 120u);
    EXPECT_EQ(r.successes, 120u);
    EXPECT_EQ(r.success_rate, 1.0);
}

TEST(Evaluate, ZeroMaskGivesCleanRate) {
    Rng rng(18);
    Dataset d;
    d.num_classes = 2;
    d.images = oracles::uniform({60, 3, kEdge, kEdge}, 0.0, 1.0, rng).cast<float>();
    d.labels.assign(60, 0);
    for (std::size_t i = 0; i < 60; ++i) d.ids.push_back(i);
    const auto net = random_linear(19);
    const auto clean = model::classify(net, d.images);
    std::size_t hits = 0;
    for (int c : clean) hits += c == 1;
    const Tensor<float> mask(Shape{1, 16, 16}, 0.0f);
    const Tensor<float> patch(Shape{3, 16, 16}, 1.0f);
    EvalOptions o;
    o.samples_per_image = 2;
    const auto r = evaluate_attack(patch, &mask, net, d, 1, TransformSupport{0.0, 0.5, 0.8}, o, 3);
    EXPECT_EQ(r.successes, 2 * hits);
    EXPECT_DOUBLE_EQ(r.success_rate, static_cast<double>(hits) / 60.0);
}

TEST(Evaluate, ZeroSamplesAndEmptySetRejected) {
    const auto d = dark_images(10, 20);
    const Tensor<float> patch(Shape{3, 16, 16}, 0.5f);
    EvalOptions o;
    o.samples_per_image = 0;
    EXPECT_THROW(evaluate_attack(patch, nullptr, mean_stub(), d, 1, TransformSupport{}, o, 1), ConfigError);
    o.samples_per_image = 1;
    EXPECT_THROW(evaluate_attack(patch, nullptr, mean_stub(), d, 0, TransformSupport{}, o, 1), ConfigError);
}

TEST(Evaluate, WilsonBracketsRate) {
    const auto w = wilson95(30, 100);
    EXPECT_LT(w.low, 0.3);
    EXPECT_GT(w.high, 0.3);
    EXPECT_NEAR(w.low, 0.2189, 1e-3);
    EXPECT_NEAR(w.high, 0.3958, 1e-3);
}

TEST(Evaluate, StratifiedBinsCoverAxis) {
    const auto d = dark_images(8, 21);
    EvalOptions o;
    o.samples_per_image = 10;
    o.strata = Strata{StrataAxis::scale, 5};
    const TransformSupport s{0.0, 0.2, 0.7};
    const auto r = evaluate_attack(Tensor<float>(Shape{3, 16, 16}, 0.5f), nullptr, mean_stub(), d, 1, s, o, 2);
    ASSERT_EQ(r.log.size(), 80u);
    for (const auto& t : r.log) {
        ASSERT_GE(t.bin, 0);
        const double lo = 0.2 + 0.1 * t.bin;
        EXPECT_GE(t.spec.scale, lo - 1e-12);
        EXPECT_LE(t.spec.scale, lo + 0.1 + 1e-12);
    }
}
