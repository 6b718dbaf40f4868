#include "oracles.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>
#include <numbers>

#include "patchforge/attack/patch_attack.hpp"
#include "patchforge/diff/gradcheck.hpp"
#include "patchforge/diff/ops.hpp"
#include "patchforge/geometry/transform.hpp"
#include "patchforge/transparency/transparency.hpp"

namespace patchforge::oracles {

using diff::Graph;
using diff::Shape;
using diff::Var;

Tensor<double> uniform(const Shape& shape, double lo, double hi, Rng& rng) {
    Tensor<double> t(shape);
    for (auto& v : t.values()) v = rng.uniform(lo, hi);
    return t;
}

double kink_margin(const Graph<double>& g) {
    double m = std::numeric_limits<double>::infinity();
    for (std::size_t id = 0; id < g.size(); ++id) {
        const auto& op = g.op(id);
        if (op == "relu") {
            for (double v : g.value(g.inputs(id)[0]).values()) m = std::min(m, std::abs(v));
        } else if (op == "clamp_st") {
            for (double v : g.value(g.inputs(id)[0]).values()) m = std::min({m, std::abs(v), std::abs(v - 1.0)});
        } else if (op == "maxpool2") {
            const auto& x = g.value(g.inputs(id)[0]);
            const std::size_t n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
            for (std::size_t b = 0; b < n; ++b)
                for (std::size_t ch = 0; ch < c; ++ch)
                    for (std::size_t i = 0; i + 1 < h; i += 2)
                        for (std::size_t j = 0; j + 1 < w; j += 2) {
                            double v[4] = {x.at(b, ch, i, j), x.at(b, ch, i, j + 1), x.at(b, ch, i + 1, j),
                                           x.at(b, ch, i + 1, j + 1)};
                            std::sort(v, v + 4);
                            m = std::min(m, v[3] - v[2]);
                        }
        }
    }
    return m;
}

model::Network<double> tiny_net(std::uint64_t seed, std::size_t num_classes) {
    model::Architecture a;
    a.channels = 3;
    a.height = 8;
    a.width = 8;
    a.num_classes = num_classes;
    a.layers = {{model::LayerKind::conv, 2, 3, 1},
                {model::LayerKind::relu},
                {model::LayerKind::maxpool},
                {model::LayerKind::dense, num_classes}};
    return model::Network<double>::initialize(a, seed);
}

model::Network<double> linear_net(std::size_t channels, std::size_t height, std::size_t width,
                                  const std::vector<std::vector<double>>& weights, const std::vector<double>& bias) {
    model::Architecture a;
    a.channels = channels;
    a.height = height;
    a.width = width;
    a.num_classes = weights.size();
    a.layers = {{model::LayerKind::dense, weights.size()}};
    const std::size_t in = channels * height * width;
    Tensor<double> w(Shape{weights.size(), in});
    for (std::size_t k = 0; k < weights.size(); ++k)
        for (std::size_t i = 0; i < in; ++i) w[k * in + i] = weights[k].at(i);
    return model::Network<double>(a, {w, Tensor<double>(Shape{bias.size()}, bias)});
}

namespace {

using Fn = diff::ScalarFn<double>;

// sum(v * R) for a fixed random R, so every output entry carries a distinct weight.
Var<double> weighted(Graph<double>& g, const Var<double>& v, std::uint64_t seed) {
    Rng rng(seed);
    return diff::sum(diff::mul(v, g.leaf(uniform(v.shape(), -1.0, 1.0, rng))));
}

struct Probe {
    Fn f;
    Tensor<double> point;
};

// Case builder: given a per-seed rng, returns the function and the point.
using Builder = std::function<Probe(Rng&)>;

GradCase run_case(const std::string& name, const Builder& build, std::size_t seeds, std::uint64_t base_seed) {
    constexpr double step = 1e-5;
    constexpr double min_margin = 1e-3;
    GradCase out{name, 0.0, 0, 0};
    for (std::size_t s = 0; s < seeds; ++s) {
        Rng rng(derive_seed(base_seed, hash_string(name) + s));
        for (int attempt = 0;; ++attempt) {
            auto p = build(rng);
            double margin;
            {
                Graph<double> g;
                auto x = g.leaf(p.point, false);
                p.f(g, x);
                margin = kink_margin(g);
            }
            if (margin < min_margin && attempt < 100) {
                ++out.redraws;
                continue;
            }
            const auto r = diff::grad_check<double>(p.f, p.point, step);
            out.max_error = std::max(out.max_error, r.max_relative_error);
            if (!r.nan_coordinates.empty()) out.max_error = std::numeric_limits<double>::infinity();
            break;
        }
        ++out.seeds;
    }
    return out;
}

geometry::TransformSpec random_spec(Rng& rng, double scale_lo, double scale_hi, std::size_t h, std::size_t w) {
    const geometry::TransformSupport s{std::numbers::pi, scale_lo, scale_hi, geometry::LocationStrategy::random};
    return geometry::sample_transform(s, h, w, rng);
}

attack::EotBatch<double> tiny_batch(Rng& rng, std::size_t n) {
    attack::EotBatch<double> b;
    b.images = uniform({n, 3, 8, 8}, 0.0, 1.0, rng);
    for (std::size_t i = 0; i < n; ++i) {
        b.specs.push_back(random_spec(rng, 0.5, 0.5, 8, 8));
        b.sources.push_back(i);
    }
    return b;
}

}  // namespace

std::vector<GradCase> gradient_suite(std::size_t seeds, std::uint64_t base_seed) {
    std::vector<std::pair<std::string, Builder>> cases;
    auto add = [&](std::string name, Builder b) { cases.emplace_back(std::move(name), std::move(b)); };

    add("conv2d/x", [](Rng& rng) {
        auto w = uniform({4, 3, 3, 3}, -1, 1, rng);
        auto b = uniform({4}, -1, 1, rng);
        auto ws = rng.next();
        return Probe{[=](Graph<double>& g, const Var<double>& x) {
                         return weighted(g, diff::conv2d(x, g.leaf(w), g.leaf(b), 1), ws);
                     },
                     uniform({2, 3, 5, 5}, -1, 1, rng)};
    });
    add("conv2d/weight", [](Rng& rng) {
        auto x = uniform({2, 3, 5, 5}, -1, 1, rng);
        auto b = uniform({4}, -1, 1, rng);
        auto ws = rng.next();
        return Probe{[=](Graph<double>& g, const Var<double>& w) {
                         return weighted(g, diff::conv2d(g.leaf(x), w, g.leaf(b), 0), ws);
                     },
                     uniform({4, 3, 3, 3}, -1, 1, rng)};
    });
    add("conv2d/bias", [](Rng& rng) {
        auto x = uniform({2, 3, 5, 5}, -1, 1, rng);
        auto w = uniform({4, 3, 3, 3}, -1, 1, rng);
        auto ws = rng.next();
        return Probe{[=](Graph<double>& g, const Var<double>& b) {
                         return weighted(g, diff::conv2d(g.leaf(x), g.leaf(w), b, 1), ws);
                     },
                     uniform({4}, -1, 1, rng)};
    });
    add("dense/x", [](Rng& rng) {
        auto w = uniform({5, 12}, -1, 1, rng);
        auto b = uniform({5}, -1, 1, rng);
        auto ws = rng.next();
        return Probe{[=](Graph<double>& g, const Var<double>& x) {
                         return weighted(g, diff::dense(x, g.leaf(w), g.leaf(b)), ws);
                     },
                     uniform({3, 3, 2, 2}, -1, 1, rng)};
    });
    add("dense/weight", [](Rng& rng) {
        auto x = uniform({3, 12}, -1, 1, rng);
        auto b = uniform({5}, -1, 1, rng);
        auto ws = rng.next();
        return Probe{[=](Graph<double>& g, const Var<double>& w) {
                         return weighted(g, diff::dense(g.leaf(x), w, g.leaf(b)), ws);
                     },
                     uniform({5, 12}, -1, 1, rng)};
    });
    add("dense/bias", [](Rng& rng) {
        auto x = uniform({3, 12}, -1, 1, rng);
        auto w = uniform({5, 12}, -1, 1, rng);
        auto ws = rng.next();
        return Probe{[=](Graph<double>& g, const Var<double>& b) {
                         return weighted(g, diff::dense(g.leaf(x), g.leaf(w), b), ws);
                     },
                     uniform({5}, -1, 1, rng)};
    });
    add("relu", [](Rng& rng) {
        auto ws = rng.next();
        return Probe{[=](Graph<double>& g, const Var<double>& x) { return weighted(g, diff::relu(x), ws); },
                     uniform({2, 3, 4, 4}, -1, 1, rng)};
    });
    add("maxpool2", [](Rng& rng) {
        auto ws = rng.next();
        return Probe{[=](Graph<double>& g, const Var<double>& x) { return weighted(g, diff::maxpool2(x), ws); },
                     uniform({2, 2, 6, 4}, -1, 1, rng)};
    });
    add("sum", [](Rng& rng) {
        return Probe{[](Graph<double>&, const Var<double>& x) { return diff::sum(diff::square(x)); },
                     uniform({3, 4}, -1, 1, rng)};
    });
    add("mean", [](Rng& rng) {
        return Probe{[](Graph<double>&, const Var<double>& x) { return diff::mean(diff::square(x)); },
                     uniform({3, 4}, -1, 1, rng)};
    });
    add("add", [](Rng& rng) {
        auto b = uniform({3, 4}, -1, 1, rng);
        auto ws = rng.next();
        return Probe{[=](Graph<double>& g, const Var<double>& a) { return weighted(g, diff::add(a, g.leaf(b)), ws); },
                     uniform({3, 4}, -1, 1, rng)};
    });
    add("mul", [](Rng& rng) {
        auto b = uniform({3, 4}, -1, 1, rng);
        auto ws = rng.next();
        return Probe{[=](Graph<double>& g, const Var<double>& a) { return weighted(g, diff::mul(a, g.leaf(b)), ws); },
                     uniform({3, 4}, -1, 1, rng)};
    });
    add("scale", [](Rng& rng) {
        const double k = rng.uniform(-3, 3);
        auto ws = rng.next();
        return Probe{[=](Graph<double>& g, const Var<double>& x) { return weighted(g, diff::scale(x, k), ws); },
                     uniform({3, 4}, -1, 1, rng)};
    });
    add("square", [](Rng& rng) {
        auto ws = rng.next();
        return Probe{[=](Graph<double>& g, const Var<double>& x) { return weighted(g, diff::square(x), ws); },
                     uniform({3, 4}, -2, 2, rng)};
    });
    // clamp_st passes gradients straight through inside the band beyond the
    // interval on purpose; that region is not a derivative and is not probed.
    add("clamp_st/inside", [](Rng& rng) {
        auto ws = rng.next();
        return Probe{[=](Graph<double>& g, const Var<double>& x) {
                         return weighted(g, diff::clamp_st(x, 0.0, 1.0, 0.05), ws);
                     },
                     uniform({3, 4}, 0.0, 1.0, rng)};
    });
    add("clamp_st/beyond_band", [](Rng& rng) {
        auto ws = rng.next();
        auto p = uniform({3, 4}, 1.1, 2.0, rng);
        for (std::size_t i = 0; i < p.size(); i += 2) p[i] = -p[i] + 1.0;  // below -0.05 too
        return Probe{[=](Graph<double>& g, const Var<double>& x) {
                         return weighted(g, diff::clamp_st(x, 0.0, 1.0, 0.05), ws);
                     },
                     p};
    });
    add("softmax_cross_entropy", [](Rng& rng) {
        std::vector<int> t{static_cast<int>(rng.below(5)), static_cast<int>(rng.below(5)), static_cast<int>(rng.below(5))};
        return Probe{[=](Graph<double>&, const Var<double>& x) { return diff::softmax_cross_entropy(x, t); },
                     uniform({3, 5}, -3, 3, rng)};
    });
    add("pick", [](Rng& rng) {
        std::vector<int> t{static_cast<int>(rng.below(5)), static_cast<int>(rng.below(5))};
        return Probe{[=](Graph<double>&, const Var<double>& x) { return diff::sum(diff::square(diff::pick(x, t))); },
                     uniform({2, 5}, -1, 1, rng)};
    });
    add("bilinear_sample", [](Rng& rng) {
        std::vector<geometry::TransformSpec> specs{random_spec(rng, 0.3, 0.6, 9, 11), random_spec(rng, 0.3, 0.6, 9, 11)};
        const auto grid = geometry::build_grid(specs, 5, 9, 11);
        auto ws = rng.next();
        return Probe{[=](Graph<double>& g, const Var<double>& src) {
                         return weighted(g, diff::bilinear_sample(src, grid), ws);
                     },
                     uniform({3, 5, 5}, 0, 1, rng)};
    });
    for (int which = 0; which < 3; ++which) {
        const char* names[] = {"lerp/x", "lerp/p", "lerp/m"};
        add(names[which], [which](Rng& rng) {
            auto x = uniform({2, 3, 4, 4}, 0, 1, rng);
            auto p = uniform({2, 3, 4, 4}, 0, 1, rng);
            auto m = uniform({2, 1, 4, 4}, 0, 1, rng);
            auto ws = rng.next();
            Tensor<double> point = which == 0 ? x : which == 1 ? p : m;
            return Probe{[=](Graph<double>& g, const Var<double>& v) {
                             auto X = which == 0 ? v : g.leaf(x);
                             auto P = which == 1 ? v : g.leaf(p);
                             auto M = which == 2 ? v : g.leaf(m);
                             return weighted(g, diff::lerp(X, P, M), ws);
                         },
                         point};
        });
    }
    add("warp_patch", [](Rng& rng) {
        std::vector<geometry::TransformSpec> specs{random_spec(rng, 0.3, 0.6, 10, 10), random_spec(rng, 0.3, 0.6, 10, 10)};
        auto ws = rng.next();
        return Probe{[=](Graph<double>& g, const Var<double>& patch) {
                         return weighted(g, geometry::warp_patch(patch, specs, 10, 10).canvas, ws);
                     },
                     uniform({3, 4, 4}, 0, 1, rng)};
    });
    add("blend_apply/mask", [](Rng& rng) {
        auto image = uniform({2, 3, 10, 10}, 0, 1, rng);
        auto patch = uniform({3, 4, 4}, 0, 1, rng);
        std::vector<geometry::TransformSpec> specs{random_spec(rng, 0.3, 0.6, 10, 10), random_spec(rng, 0.3, 0.6, 10, 10)};
        auto ws = rng.next();
        return Probe{[=](Graph<double>& g, const Var<double>& mask) {
                         return weighted(g, transparency::blend_apply(g.leaf(image), g.leaf(patch), mask, specs), ws);
                     },
                     uniform({1, 4, 4}, 0, 1, rng)};
    });
    add("po_squared", [](Rng& rng) {
        return Probe{[](Graph<double>&, const Var<double>& m) { return diff::square(transparency::obtrusiveness(m)); },
                     uniform({1, 4, 4}, 0, 1, rng)};
    });
    add("attack_loss/patch", [](Rng& rng) {
        const auto net = tiny_net(rng.next());
        const auto batch = tiny_batch(rng, 2);
        const int target = static_cast<int>(rng.below(3));
        return Probe{[=](Graph<double>&, const Var<double>& patch) {
                         return attack::attack_loss<double>(net, patch, nullptr, batch, target);
                     },
                     uniform({3, 4, 4}, 0.1, 0.9, rng)};
    });
    for (int which = 0; which < 2; ++which) {
        add(which == 0 ? "joint_loss/patch" : "joint_loss/mask", [which](Rng& rng) {
            const auto net = tiny_net(rng.next());
            const auto batch = tiny_batch(rng, 2);
            const int target = static_cast<int>(rng.below(3));
            const double gamma = rng.uniform(0.1, 2.0);
            auto patch = uniform({3, 4, 4}, 0.1, 0.9, rng);
            auto mask = uniform({1, 4, 4}, 0.1, 0.9, rng);
            return Probe{[=](Graph<double>& g, const Var<double>& v) {
                             auto P = which == 0 ? v : g.leaf(patch);
                             auto M = which == 1 ? v : g.leaf(mask);
                             return transparency::transparent_loss<double>(net, P, M, batch, target, gamma).total;
                         },
                         which == 0 ? patch : mask};
        });
    }

    std::vector<GradCase> out;
    for (const auto& [name, build] : cases) out.push_back(run_case(name, build, seeds, base_seed));
    return out;
}

// ------------------------------------------------------------------ blending

namespace {

struct Tally {
    InvariantCase c;
    void check(bool ok, const std::string& what) {
        ++c.cases;
        if (!ok) {
            if (c.failures == 0) c.first_failure = what;
            ++c.failures;
        }
    }
};

struct Scene {
    Tensor<double> image;
    Tensor<double> patch;
    std::vector<geometry::TransformSpec> specs;
    std::size_t h, w, p;
};

Scene random_scene(Rng& rng) {
    Scene s;
    s.h = 8 + rng.below(9);
    s.w = 8 + rng.below(9);
    s.p = 2 + rng.below(7);
    s.image = uniform({2, 3, s.h, s.w}, 0, 1, rng);
    s.patch = uniform({3, s.p, s.p}, 0, 1, rng);
    for (int i = 0; i < 2; ++i) {
        const bool upright = rng.uniform(0, 1) < 0.3;
        const geometry::TransformSupport sup{upright ? 0.0 : std::numbers::pi, 0.1, upright ? 1.0 : 0.7,
                                             geometry::LocationStrategy::random};
        s.specs.push_back(geometry::sample_transform(sup, s.h, s.w, rng));
    }
    return s;
}

Tensor<double> blend(const Scene& s, const Tensor<double>& mask) {
    Graph<double> g;
    return transparency::blend_apply(g.leaf(s.image), g.leaf(s.patch), g.leaf(mask), s.specs).value();
}

Tensor<double> opaque(const Scene& s, const Tensor<double>& image) {
    Graph<double> g;
    return geometry::apply_patch_opaque(g.leaf(image), g.leaf(s.patch), s.specs).value();
}

}  // namespace

std::vector<InvariantCase> blend_suite(std::size_t cases, std::uint64_t base_seed) {
    Tally bounds{{"po_bounds"}}, exact{{"po_extremes_exact"}}, linear{{"po_mean_linearity"}},
        ones{{"mask_one_equals_opaque"}}, zeros{{"mask_zero_identity"}}, convex{{"convexity"}},
        locality{{"locality_outside_footprint"}}, midpoint{{"gray_white_midpoint"}}, idem{{"opaque_idempotent"}};
    for (std::size_t k = 0; k < cases; ++k) {
        Rng rng(derive_seed(base_seed, k));
        const std::string tag = "case " + std::to_string(k);

        // obtrusiveness
        const std::size_t p = 1 + rng.below(8);
        auto m1 = uniform({1, p, p}, 0, 1, rng);
        auto m2 = uniform({1, p, p}, 0, 1, rng);
        const double po1 = transparency::patch_obtrusiveness(m1);
        const auto [lo, hi] = std::minmax_element(m1.values().begin(), m1.values().end());
        bounds.check(po1 >= 0.0 && po1 <= 1.0 && po1 >= *lo && po1 <= *hi, tag);
        exact.check(transparency::patch_obtrusiveness(Tensor<double>({1, p, p}, 1.0)) == 1.0 &&
                        transparency::patch_obtrusiveness(Tensor<double>({1, p, p}, 0.0)) == 0.0,
                    tag);
        const double a = rng.uniform(0, 1), b = 1.0 - a;
        Tensor<double> mix({1, p, p});
        for (std::size_t i = 0; i < mix.size(); ++i) mix[i] = a * m1[i] + b * m2[i];
        const double dev = std::abs(transparency::patch_obtrusiveness(mix) -
                                    (a * po1 + b * transparency::patch_obtrusiveness(m2)));
        linear.c.worst = std::max(linear.c.worst, dev);
        linear.check(dev <= 1e-12, tag);

        // blending
        const auto s = random_scene(rng);
        const auto fp = geometry::footprint_mask<double>(geometry::build_grid(s.specs, s.p, s.h, s.w));
        ones.check(blend(s, Tensor<double>({1, s.p, s.p}, 1.0)) == opaque(s, s.image), tag);
        zeros.check(blend(s, Tensor<double>({1, s.p, s.p}, 0.0)) == s.image, tag);

        const auto mask = uniform({1, s.p, s.p}, 0, 1, rng);
        const auto out = blend(s, mask);
        Tensor<double> warped;
        {
            Graph<double> g;
            warped = geometry::warp_patch(g.leaf(s.patch), s.specs, s.h, s.w).canvas.value();
        }
        bool hull = true, local = true;
        const std::size_t plane = s.h * s.w;
        for (std::size_t i = 0; i < out.size(); ++i) {
            const std::size_t n = i / (3 * plane), pix = i % plane;
            const bool inside = fp[n * plane + pix] != 0.0;
            if (inside) {
                hull = hull && out[i] >= std::min(s.image[i], warped[i]) && out[i] <= std::max(s.image[i], warped[i]);
            } else {
                local = local && out[i] == s.image[i];
            }
        }
        const auto op = opaque(s, s.image);
        for (std::size_t i = 0; i < op.size(); ++i) {
            const std::size_t n = i / (3 * plane), pix = i % plane;
            if (fp[n * plane + pix] == 0.0) local = local && op[i] == s.image[i];
        }
        convex.check(hull, tag);
        locality.check(local, tag);

        // constant gray image, white patch, M = 0.5
        Scene gray = s;
        const double level = rng.uniform(0, 1);
        gray.image.fill(level);
        gray.patch.fill(1.0);
        const auto mid = blend(gray, Tensor<double>({1, s.p, s.p}, 0.5));
        bool mids = true;
        for (std::size_t i = 0; i < mid.size(); ++i) {
            const std::size_t n = i / (3 * plane), pix = i % plane;
            const double want = fp[n * plane + pix] != 0.0 ? 0.5 * (1.0 + level) : level;
            mids = mids && mid[i] == want;
        }
        midpoint.check(mids, tag);
        idem.check(opaque(s, op) == op, tag);
    }
    return {bounds.c, exact.c, linear.c, ones.c, zeros.c, convex.c, locality.c, midpoint.c, idem.c};
}

saliency::Placement brute_force_placement(const saliency::SaliencyMap& map, std::size_t extent, bool max) {
    saliency::Placement best;
    double best_sum = max ? -std::numeric_limits<double>::infinity() : std::numeric_limits<double>::infinity();
    for (std::size_t r = 0; r + extent <= map.height; ++r) {
        for (std::size_t c = 0; c + extent <= map.width; ++c) {
            long double s = 0;
            for (std::size_t i = 0; i < extent; ++i)
                for (std::size_t j = 0; j < extent; ++j) s += map.at(r + i, c + j);
            const double v = static_cast<double>(s);
            // strict comparison keeps the first (smallest row, then col) on ties
            if (max ? v > best_sum : v < best_sum) {
                best_sum = v;
                best = {r, c};
            }
        }
    }
    return best;
}

}  // namespace patchforge::oracles
