#pragma once

#include <cstddef>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "patchforge/diff/graph.hpp"
#include "patchforge/diff/ops.hpp"
#include "patchforge/rng.hpp"
#include "patchforge/saliency/placement.hpp"

namespace patchforge::geometry {

enum class LocationStrategy { random, saliency_min, saliency_max, fixed };

std::string to_string(LocationStrategy s);
LocationStrategy parse_location(const std::string& s);

// Compact uniform support over rotation, scale and placement. Scale is the
// patch edge as a fraction of the image edge.
struct TransformSupport {
    double theta_max = 0.0;
    double scale_lo = 0.5;
    double scale_hi = 0.5;
    LocationStrategy location = LocationStrategy::random;
    std::size_t fixed_row = 0;
    std::size_t fixed_col = 0;

    void validate() const;

    // Rotation and scale ranges of `inner` lie within this support.
    bool contains(const TransformSupport& inner) const;

    nlohmann::json to_json() const;
    static TransformSupport from_json(const nlohmann::json& j);

    bool operator==(const TransformSupport&) const = default;
};

// One concrete transform: rotation (radians), scale fraction and the integer
// top-left corner of the footprint's bounding box.
struct TransformSpec {
    double theta = 0.0;
    double scale = 0.5;
    std::size_t row = 0;
    std::size_t col = 0;

    nlohmann::json to_json() const;
    bool operator==(const TransformSpec&) const = default;
};

// True when the spec's rotation and scale come from `support`.
bool within(const TransformSupport& support, const TransformSpec& spec);

// Prints a warning to stderr and returns false when train is not a subset of test.
bool check_constrained(const TransformSupport& train, const TransformSupport& test);

// Side length in pixels of the axis-aligned box enclosing the rotated patch.
std::size_t footprint_extent(double theta, double scale, std::size_t image_edge);

// theta ~ U[-theta_max, theta_max], s ~ U[scale_lo, scale_hi], then a placement
// per the location strategy. Saliency strategies need the image's map.
TransformSpec sample_transform(const TransformSupport& support, std::size_t image_height, std::size_t image_width,
                               Rng& rng, const saliency::SaliencyMap* map = nullptr);

// Placement step of sample_transform for an already drawn rotation and scale.
TransformSpec place_transform(const TransformSupport& support, double theta, double scale, std::size_t image_height,
                              std::size_t image_width, Rng& rng, const saliency::SaliencyMap* map = nullptr);

// Inverse-mapped affine resample of a P x P patch onto an H x W canvas, one
// batch entry per spec. Taps outside the patch clamp to its edge.
diff::SampleGrid build_grid(std::span<const TransformSpec> specs, std::size_t patch_edge, std::size_t height,
                            std::size_t width);

// N x 1 x H x W tensor of 0/1: 1 where the grid tap is valid.
template <typename S>
diff::Tensor<S> footprint_mask(const diff::SampleGrid& grid);

template <typename S>
struct Warped {
    diff::Var<S> canvas;           // N x C x H x W
    diff::Tensor<S> footprint;     // N x 1 x H x W, binary
    diff::SampleGrid grid;
};

// Warps a C x P x P patch (or mask) under each spec. Differentiable w.r.t. the patch.
template <typename S>
Warped<S> warp_patch(const diff::Var<S>& patch, std::span<const TransformSpec> specs, std::size_t height,
                     std::size_t width);

// x' = image with footprint pixels replaced by the warped patch.
// image: N x C x H x W (one spec per batch entry).
template <typename S>
diff::Var<S> apply_patch_opaque(const diff::Var<S>& image, const diff::Var<S>& patch,
                                std::span<const TransformSpec> specs);

}  // namespace patchforge::geometry
