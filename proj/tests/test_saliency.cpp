#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>

#include "oracles/oracles.hpp"
#include "patchforge/saliency/placement.hpp"
#include "patchforge/saliency/saliency.hpp"

using namespace patchforge;
using namespace patchforge::saliency;
using diff::Shape;
using diff::Tensor;

namespace {

constexpr std::size_t C = 3, H = 6, W = 5;

std::vector<std::vector<double>> random_weights(std::size_t classes, Rng& rng) {
    std::vector<std::vector<double>> w(classes, std::vector<double>(C * H * W));
    for (auto& row : w)
        for (auto& v : row) v = rng.uniform(-2.0, 2.0);
    return w;
}

SaliencyMap random_map(std::size_t h, std::size_t w, Rng& rng) {
    SaliencyMap m{h, w, std::vector<double>(h * w)};
    for (auto& v : m.values) v = rng.uniform();
    return m;
}

double box(const SaliencyMap& m, Placement p, std::size_t e) {
    double s = 0;
    for (std::size_t i = p.row; i < p.row + e; ++i)
        for (std::size_t j = p.col; j < p.col + e; ++j) s += m.at(i, j);
    return s;
}

}  // namespace

TEST(Saliency, LinearModelIsAbsWeight) {
    Rng rng(1);
    for (int k = 0; k < 10; ++k) {
        const auto w = random_weights(4, rng);
        const auto net = oracles::linear_net(C, H, W, w, {0.1, 0.2, 0.3, 0.4});
        const auto img = oracles::uniform({1, C, H, W}, 0, 1, rng);
        const int label = k % 4;
        const auto m = compute_saliency(net, img, label);
        ASSERT_EQ(m.values.size(), H * W);
        for (std::size_t i = 0; i < H * W; ++i) {
            double expect = 0;
            for (std::size_t c = 0; c < C; ++c) expect = std::max(expect, std::abs(w[label][c * H * W + i]));
            EXPECT_NEAR(m.values[i], expect, 1e-10);
        }
    }
}

TEST(Saliency, ZeroWeightsZeroMap) {
    const auto net = oracles::linear_net(C, H, W, std::vector<std::vector<double>>(2, std::vector<double>(C * H * W)),
                                         {1.0, -1.0});
    Rng rng(2);
    const auto m = compute_saliency(net, oracles::uniform({1, C, H, W}, 0, 1, rng), 1);
    for (double v : m.values) EXPECT_EQ(v, 0.0);
}

TEST(Saliency, LogitShiftInvariant) {
    auto net = oracles::tiny_net(3);
    Rng rng(4);
    const auto img = oracles::uniform({1, 3, 8, 8}, 0, 1, rng);
    const auto before = compute_saliency(net, img, 2);
    for (auto& b : net.mutable_parameters().back().values()) b += 7.5;
    const auto after = compute_saliency(net, img, 2);
    EXPECT_EQ(before.values, after.values);
    for (double v : before.values) EXPECT_TRUE(std::isfinite(v) && v >= 0.0);
}

TEST(Placement, SingleHotPixelIsCovered) {
    Rng rng(5);
    for (int k = 0; k < 50; ++k) {
        SaliencyMap m{8, 8, std::vector<double>(64, 0.01)};
        const std::size_t r = rng.below(8), c = rng.below(8);
        m.values[r * 8 + c] = 5.0;
        const std::size_t e = 1 + rng.below(4);
        const auto p = select_location(m, e, PlacementRule::max, rng);
        EXPECT_TRUE(r >= p.row && r < p.row + e && c >= p.col && c < p.col + e);
    }
}

TEST(Placement, UniformMapTiesToOrigin) {
    SaliencyMap m{8, 8, std::vector<double>(64, 0.3)};
    Rng rng(6);
    for (auto rule : {PlacementRule::max, PlacementRule::min}) {
        const auto p = select_location(m, 3, rule, rng);
        EXPECT_EQ(p.row, 0u);
        EXPECT_EQ(p.col, 0u);
    }
}

TEST(Placement, MatchesBruteForce) {
    Rng rng(7);
    for (int k = 0; k < 50; ++k) {
        const auto m = random_map(8, 8, rng);
        for (std::size_t e = 1; e <= 8; ++e)
            for (bool mx : {true, false}) {
                const auto got = select_location(m, e, mx ? PlacementRule::max : PlacementRule::min, rng);
                const auto want = oracles::brute_force_placement(m, e, mx);
                EXPECT_EQ(got.row, want.row) << k << " e=" << e;
                EXPECT_EQ(got.col, want.col) << k << " e=" << e;
            }
    }
}

TEST(Placement, OrderingAndBounds) {
    Rng rng(8);
    for (int k = 0; k < 50; ++k) {
        const auto m = random_map(10, 12, rng);
        const std::size_t e = 1 + rng.below(10);
        const auto hi = select_location(m, e, PlacementRule::max, rng);
        const auto lo = select_location(m, e, PlacementRule::min, rng);
        const auto rnd = select_location(m, e, PlacementRule::random, rng);
        for (auto p : {hi, lo, rnd}) {
            EXPECT_LE(p.row + e, 10u);
            EXPECT_LE(p.col + e, 12u);
        }
        EXPECT_GE(box(m, hi, e) + 1e-9, box(m, rnd, e));
        EXPECT_GE(box(m, rnd, e) + 1e-9, box(m, lo, e));
    }
}

TEST(Placement, IntegralBoxSumsAreExact) {
    Rng rng(9);
    const auto m = random_map(7, 9, rng);
    const IntegralImage ii(m);
    for (std::size_t r = 0; r < 7; ++r)
        for (std::size_t c = 0; c < 9; ++c)
            for (std::size_t h = 1; r + h <= 7; ++h)
                for (std::size_t w = 1; c + w <= 9; ++w) {
                    std::int64_t s = 0;
                    for (std::size_t i = r; i < r + h; ++i)
                        for (std::size_t j = c; j < c + w; ++j) s += ii.quantized(i, j);
                    ASSERT_EQ(ii.box_sum(r, c, h, w), s);
                }
}
