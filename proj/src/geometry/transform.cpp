#include "patchforge/geometry/transform.hpp"

#include <algorithm>
#include <cmath>
#include <iostream>
#include <numbers>

#include "patchforge/error.hpp"

namespace patchforge::geometry {

namespace {

constexpr double kSnap = 1e-9;

double snap(double v) {
    const double r = std::round(v);
    return std::abs(v - r) < kSnap ? r : v;
}

}  // namespace

std::string to_string(LocationStrategy s) {
    switch (s) {
        case LocationStrategy::random: return "random";
        case LocationStrategy::saliency_min: return "min";
        case LocationStrategy::saliency_max: return "max";
        case LocationStrategy::fixed: return "fixed";
    }
    return "?";
}

LocationStrategy parse_location(const std::string& s) {
    if (s == "random") return LocationStrategy::random;
    if (s == "min" || s == "saliency_min") return LocationStrategy::saliency_min;
    if (s == "max" || s == "saliency_max") return LocationStrategy::saliency_max;
    if (s == "fixed") return LocationStrategy::fixed;
    throw ConfigError("unknown location strategy '" + s + "'");
}

void TransformSupport::validate() const {
    if (!(theta_max >= 0.0 && theta_max <= std::numbers::pi))
        throw ConfigError("theta_max must lie in [0, pi], got " + std::to_string(theta_max));
    if (!(scale_lo > 0.0 && scale_lo <= scale_hi && scale_hi <= 1.0))
        throw ConfigError("scale range must satisfy 0 < lo <= hi <= 1, got [" + std::to_string(scale_lo) + ", " +
                          std::to_string(scale_hi) + "]");
}

bool TransformSupport::contains(const TransformSupport& inner) const {
    constexpr double eps = 1e-12;
    return inner.theta_max <= theta_max + eps && inner.scale_lo >= scale_lo - eps && inner.scale_hi <= scale_hi + eps;
}

nlohmann::json TransformSupport::to_json() const {
    nlohmann::json j{{"theta_max", theta_max},
                     {"scale_lo", scale_lo},
                     {"scale_hi", scale_hi},
                     {"location", to_string(location)}};
    if (location == LocationStrategy::fixed) {
        j["fixed_row"] = fixed_row;
        j["fixed_col"] = fixed_col;
    }
    return j;
}

TransformSupport TransformSupport::from_json(const nlohmann::json& j) {
    TransformSupport s;
    s.theta_max = j.value("theta_max", s.theta_max);
    s.scale_lo = j.value("scale_lo", s.scale_lo);
    s.scale_hi = j.value("scale_hi", s.scale_hi);
    s.location = parse_location(j.value("location", std::string("random")));
    s.fixed_row = j.value("fixed_row", std::size_t{0});
    s.fixed_col = j.value("fixed_col", std::size_t{0});
    s.validate();
    return s;
}

nlohmann::json TransformSpec::to_json() const {
    return {{"theta", theta}, {"scale", scale}, {"row", row}, {"col", col}};
}

bool within(const TransformSupport& support, const TransformSpec& spec) {
    constexpr double eps = 1e-12;
    return std::abs(spec.theta) <= support.theta_max + eps && spec.scale >= support.scale_lo - eps &&
           spec.scale <= support.scale_hi + eps;
}

bool check_constrained(const TransformSupport& train, const TransformSupport& test) {
    if (test.contains(train)) return true;
    std::cerr << "warning: train support " << train.to_json().dump() << " is not contained in test support "
              << test.to_json().dump() << "\n";
    return false;
}

std::size_t footprint_extent(double theta, double scale, std::size_t image_edge) {
    const double edge = scale * static_cast<double>(image_edge);
    const double span = edge * (std::abs(std::cos(theta)) + std::abs(std::sin(theta)));
    return std::max<std::size_t>(1, static_cast<std::size_t>(std::ceil(span - kSnap)));
}

TransformSpec sample_transform(const TransformSupport& support, std::size_t image_height, std::size_t image_width,
                               Rng& rng, const saliency::SaliencyMap* map) {
    support.validate();
    const double theta = support.theta_max > 0.0 ? rng.uniform(-support.theta_max, support.theta_max) : 0.0;
    const double scale =
        support.scale_hi > support.scale_lo ? rng.uniform(support.scale_lo, support.scale_hi) : support.scale_lo;
    return place_transform(support, theta, scale, image_height, image_width, rng, map);
}

TransformSpec place_transform(const TransformSupport& support, double theta, double scale, std::size_t image_height,
                              std::size_t image_width, Rng& rng, const saliency::SaliencyMap* map) {
    TransformSpec t;
    t.theta = theta;
    t.scale = scale;
    const std::size_t edge = std::min(image_height, image_width);
    const std::size_t extent = footprint_extent(t.theta, t.scale, edge);
    if (extent > image_height || extent > image_width) {
        throw ConfigError("no valid placement: scale " + std::to_string(t.scale) + " at rotation " +
                          std::to_string(t.theta) + " needs a " + std::to_string(extent) + " pixel footprint");
    }
    switch (support.location) {
        case LocationStrategy::random:
            t.row = static_cast<std::size_t>(rng.below(image_height - extent + 1));
            t.col = static_cast<std::size_t>(rng.below(image_width - extent + 1));
            break;
        case LocationStrategy::fixed:
            if (support.fixed_row + extent > image_height || support.fixed_col + extent > image_width)
                throw ConfigError("fixed placement does not fit scale " + std::to_string(t.scale));
            t.row = support.fixed_row;
            t.col = support.fixed_col;
            break;
        case LocationStrategy::saliency_min:
        case LocationStrategy::saliency_max: {
            if (!map) throw ConfigError("saliency placement requires a saliency map");
            if (map->height != image_height || map->width != image_width)
                throw ShapeError("saliency map extent does not match the image");
            const auto rule = support.location == LocationStrategy::saliency_max ? saliency::PlacementRule::max
                                                                                 : saliency::PlacementRule::min;
            const auto p = saliency::select_location(*map, extent, rule, rng);
            t.row = p.row;
            t.col = p.col;
            break;
        }
    }
    return t;
}

diff::SampleGrid build_grid(std::span<const TransformSpec> specs, std::size_t patch_edge, std::size_t height,
                            std::size_t width) {
    if (patch_edge == 0) throw ShapeError("patch edge must be positive");
    diff::SampleGrid grid;
    grid.batch = specs.size();
    grid.height = height;
    grid.width = width;
    grid.src_height = patch_edge;
    grid.src_width = patch_edge;
    grid.taps.resize(specs.size() * height * width);
    const double pe = static_cast<double>(patch_edge);
    const std::size_t image_edge = std::min(height, width);
    for (std::size_t n = 0; n < specs.size(); ++n) {
        const auto& t = specs[n];
        const std::size_t extent = footprint_extent(t.theta, t.scale, image_edge);
        if (t.row + extent > height || t.col + extent > width) {
            throw ShapeError("footprint of " + std::to_string(extent) + " pixels at (" + std::to_string(t.row) + ", " +
                             std::to_string(t.col) + ") leaves the " + std::to_string(height) + "x" +
                             std::to_string(width) + " canvas");
        }
        const double edge = t.scale * static_cast<double>(image_edge);
        const double ratio = pe / edge;
        const double ct = std::cos(t.theta), st = std::sin(t.theta);
        const double cy = static_cast<double>(t.row) + static_cast<double>(extent) / 2.0;
        const double cx = static_cast<double>(t.col) + static_cast<double>(extent) / 2.0;
        for (std::size_t i = t.row; i < t.row + extent; ++i) {
            for (std::size_t j = t.col; j < t.col + extent; ++j) {
                const double dy = static_cast<double>(i) + 0.5 - cy;
                const double dx = static_cast<double>(j) + 0.5 - cx;
                const double px = (ct * dx + st * dy) * ratio + pe / 2.0;
                const double py = (-st * dx + ct * dy) * ratio + pe / 2.0;
                if (!(px >= 0.0 && px < pe && py >= 0.0 && py < pe)) continue;
                const double sx = std::clamp(snap(px - 0.5), 0.0, pe - 1.0);
                const double sy = std::clamp(snap(py - 0.5), 0.0, pe - 1.0);
                auto& tap = grid.taps[(n * height + i) * width + j];
                tap.x0 = static_cast<std::int32_t>(std::floor(sx));
                tap.y0 = static_cast<std::int32_t>(std::floor(sy));
                tap.fx = sx - tap.x0;
                tap.fy = sy - tap.y0;
                tap.valid = true;
            }
        }
    }
    return grid;
}

template <typename S>
diff::Tensor<S> footprint_mask(const diff::SampleGrid& grid) {
    diff::Tensor<S> m(diff::Shape{grid.batch, 1, grid.height, grid.width});
    for (std::size_t i = 0; i < grid.taps.size(); ++i) m[i] = grid.taps[i].valid ? S(1) : S(0);
    return m;
}

template <typename S>
Warped<S> warp_patch(const diff::Var<S>& patch, std::span<const TransformSpec> specs, std::size_t height,
                     std::size_t width) {
    const auto& ps = patch.shape();
    if (ps.size() != 3 || ps[1] != ps[2]) throw ShapeError("patch must be C x P x P, got " + diff::shape_str(ps));
    Warped<S> w;
    w.grid = build_grid(specs, ps[1], height, width);
    w.footprint = footprint_mask<S>(w.grid);
    w.canvas = diff::bilinear_sample(patch, w.grid);
    return w;
}

template <typename S>
diff::Var<S> apply_patch_opaque(const diff::Var<S>& image, const diff::Var<S>& patch,
                                std::span<const TransformSpec> specs) {
    const auto& is = image.shape();
    if (is.size() != 4 || is[0] != specs.size())
        throw ShapeError("apply_patch_opaque: need one spec per image, image shape " + diff::shape_str(is));
    if (patch.shape().size() != 3 || patch.shape()[0] != is[1])
        throw ShapeError("apply_patch_opaque: patch channels do not match image");
    auto w = warp_patch(patch, specs, is[2], is[3]);
    auto mask = image.graph().leaf(std::move(w.footprint));
    return diff::lerp(image, w.canvas, mask);
}

template diff::Tensor<float> footprint_mask(const diff::SampleGrid&);
template diff::Tensor<double> footprint_mask(const diff::SampleGrid&);
template Warped<float> warp_patch(const diff::Var<float>&, std::span<const TransformSpec>, std::size_t, std::size_t);
template Warped<double> warp_patch(const diff::Var<double>&, std::span<const TransformSpec>, std::size_t, std::size_t);
template diff::Var<float> apply_patch_opaque(const diff::Var<float>&, const diff::Var<float>&,
                                             std::span<const TransformSpec>);
template diff::Var<double> apply_patch_opaque(const diff::Var<double>&, const diff::Var<double>&,
                                              std::span<const TransformSpec>);

}  // namespace patchforge::geometry
