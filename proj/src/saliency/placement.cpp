#include "patchforge/saliency/placement.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "patchforge/error.hpp"

namespace patchforge::saliency {

IntegralImage::IntegralImage(const SaliencyMap& map)
    : height_(map.height), width_(map.width), quantum_(1.0), cells_(map.values.size()),
      table_((map.height + 1) * (map.width + 1), 0) {
    if (map.values.size() != map.height * map.width) throw ShapeError("saliency map size does not match extent");
    double peak = 0.0;
    for (double v : map.values) {
        if (!std::isfinite(v) || v < 0.0) throw NumericError("saliency values must be finite and nonnegative");
        peak = std::max(peak, v);
    }
    // Largest power-of-two quantum keeping each cell below 2^40, so the sum of
    // up to 2^22 cells stays inside int64.
    if (peak > 0.0) quantum_ = std::ldexp(1.0, std::ilogb(peak) + 1 - 40);
    for (std::size_t i = 0; i < cells_.size(); ++i)
        cells_[i] = static_cast<std::int64_t>(std::llround(map.values[i] / quantum_));
    const std::size_t stride = width_ + 1;
    for (std::size_t r = 0; r < height_; ++r) {
        std::int64_t row_sum = 0;
        for (std::size_t c = 0; c < width_; ++c) {
            row_sum += cells_[r * width_ + c];
            table_[(r + 1) * stride + c + 1] = table_[r * stride + c + 1] + row_sum;
        }
    }
}

std::int64_t IntegralImage::box_sum(std::size_t r, std::size_t c, std::size_t h, std::size_t w) const {
    const std::size_t stride = width_ + 1;
    return table_[(r + h) * stride + c + w] - table_[r * stride + c + w] - table_[(r + h) * stride + c] +
           table_[r * stride + c];
}

Placement select_location(const SaliencyMap& map, std::size_t extent, PlacementRule rule, Rng& rng) {
    if (extent == 0 || extent > map.height || extent > map.width) {
        throw ConfigError("footprint extent " + std::to_string(extent) + " does not fit a " +
                          std::to_string(map.height) + "x" + std::to_string(map.width) + " map");
    }
    const std::size_t rows = map.height - extent + 1, cols = map.width - extent + 1;
    if (rule == PlacementRule::random) {
        const std::uint64_t k = rng.below(rows * cols);
        return {static_cast<std::size_t>(k / cols), static_cast<std::size_t>(k % cols)};
    }
    const IntegralImage ii(map);
    Placement best;
    std::int64_t best_sum = ii.box_sum(0, 0, extent, extent);
    for (std::size_t r = 0; r < rows; ++r) {
        for (std::size_t c = 0; c < cols; ++c) {
            const std::int64_t s = ii.box_sum(r, c, extent, extent);
            if ((rule == PlacementRule::max && s > best_sum) || (rule == PlacementRule::min && s < best_sum)) {
                best_sum = s;
                best = {r, c};
            }
        }
    }
    return best;
}

}  // namespace patchforge::saliency
