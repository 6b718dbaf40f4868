#pragma once

#include <cstddef>
#include <cstdint>
#include <utility>
#include <vector>

#include "patchforge/rng.hpp"

namespace patchforge::saliency {

// Per-pixel nonnegative importance, row-major H x W.
struct SaliencyMap {
    std::size_t height = 0;
    std::size_t width = 0;
    std::vector<double> values;
    std::size_t image_id = 0;
    int label = 0;

    double at(std::size_t r, std::size_t c) const { return values[r * width + c]; }
};

enum class PlacementRule { min, max, random };

struct Placement {
    std::size_t row = 0;
    std::size_t col = 0;
};

// Summed-area table over saliency quantized to 2^-k units so that box sums are
// exact integers. Every box sum is then order-independent, which makes the
// max/min search reproducible and checkable against brute force.
class IntegralImage {
public:
    explicit IntegralImage(const SaliencyMap& map);

    // Sum over rows [r, r + h) and cols [c, c + w), in quantized units.
    std::int64_t box_sum(std::size_t r, std::size_t c, std::size_t h, std::size_t w) const;
    double quantum() const { return quantum_; }
    std::int64_t quantized(std::size_t r, std::size_t c) const { return cells_[r * width_ + c]; }

private:
    std::size_t height_, width_;
    double quantum_;
    std::vector<std::int64_t> cells_;
    std::vector<std::int64_t> table_;  // (H+1) x (W+1)
};

// Top-left placement of an extent x extent footprint. max/min pick the
// extremal box sum, ties broken by the smallest (row, col); random is uniform
// over valid placements.
Placement select_location(const SaliencyMap& map, std::size_t extent, PlacementRule rule, Rng& rng);

}  // namespace patchforge::saliency
