#include "patchforge/attack/patch_attack.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <sstream>

#include "patchforge/diff/ops.hpp"
#include "patchforge/error.hpp"

namespace patchforge::attack {

namespace {

// Straight-through band for the [0,1] clamp inside the loss.
constexpr double kClampBand = 0.05;
constexpr std::size_t kEvalChunk = 256;

template <typename S>
diff::Var<S> clamp_unit(const diff::Var<S>& v) {
    return diff::clamp_st(v, S(0), S(1), S(kClampBand));
}

int argmax_row(const Tensor<float>& logits, std::size_t row) {
    const std::size_t c = logits.dim(1);
    std::size_t best = 0;
    for (std::size_t k = 1; k < c; ++k)
        if (logits[row * c + k] > logits[row * c + best]) best = k;
    return static_cast<int>(best);
}

}  // namespace

void AttackOptConfig::validate() const {
    if (learning_rate < 0.0 || !std::isfinite(learning_rate)) throw ConfigError("learning rate must be finite and >= 0");
    if (images_per_step == 0 || transforms_per_image == 0) throw ConfigError("EoT batch counts must be positive");
    if (patch_edge == 0) throw ConfigError("patch edge must be positive");
    if (!(init_lo >= 0.0 && init_lo <= init_hi && init_hi <= 1.0)) throw ConfigError("patch init range must lie in [0,1]");
    support.validate();
}

nlohmann::json AttackOptConfig::to_json() const {
    return {{"iterations", iterations},
            {"learning_rate", learning_rate},
            {"step_rule", to_string(step_rule)},
            {"images_per_step", images_per_step},
            {"transforms_per_image", transforms_per_image},
            {"seed", seed},
            {"support", support.to_json()},
            {"patch_edge", patch_edge},
            {"init_lo", init_lo},
            {"init_hi", init_hi}};
}

AttackOptConfig AttackOptConfig::from_json(const nlohmann::json& j) {
    AttackOptConfig c;
    try {
        c.iterations = j.value("iterations", c.iterations);
        c.learning_rate = j.value("learning_rate", c.learning_rate);
        c.step_rule = parse_step_rule(j.value("step_rule", to_string(c.step_rule)));
        c.images_per_step = j.value("images_per_step", c.images_per_step);
        c.transforms_per_image = j.value("transforms_per_image", c.transforms_per_image);
        c.seed = j.value("seed", c.seed);
        if (j.contains("support")) c.support = TransformSupport::from_json(j.at("support"));
        c.patch_edge = j.value("patch_edge", c.patch_edge);
        c.init_lo = j.value("init_lo", c.init_lo);
        c.init_hi = j.value("init_hi", c.init_hi);
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError(std::string("attack config: ") + e.what());
    }
    c.validate();
    return c;
}

ImagePool make_pool(const model::Dataset& data, int target, const std::vector<saliency::SaliencyMap>* maps) {
    if (maps && maps->size() != data.size()) throw ShapeError("one saliency map per pool image is required");
    ImagePool pool;
    pool.data = &data;
    pool.indices = data.indices_excluding(target);
    pool.saliency = maps;
    if (pool.indices.empty()) throw ConfigError("image pool is empty after excluding target " + std::to_string(target));
    return pool;
}

EotBatch<float> draw_batch(const ImagePool& pool, const TransformSupport& support, std::size_t images,
                           std::size_t transforms_per_image, Rng& rng) {
    if (!pool.data || pool.indices.empty()) throw ConfigError("draw_batch: empty image pool");
    const auto& data = *pool.data;
    EotBatch<float> b;
    b.sources.reserve(images * transforms_per_image);
    for (std::size_t i = 0; i < images; ++i) {
        const std::size_t src = pool.indices[rng.below(pool.indices.size())];
        for (std::size_t k = 0; k < transforms_per_image; ++k) {
            auto spec = geometry::sample_transform(support, data.height(), data.width(), rng, pool.map_for(src));
            if (!geometry::within(support, spec)) throw Error("sampled transform escaped the train support");
            b.specs.push_back(spec);
            b.sources.push_back(src);
        }
    }
    b.images = data.gather(b.sources);
    return b;
}

template <typename S>
diff::Var<S> attack_loss(const model::Network<S>& net, const diff::Var<S>& patch, const diff::Var<S>* mask,
                         const EotBatch<S>& batch, int target) {
    auto& g = patch.graph();
    const std::size_t h = batch.images.dim(2), w = batch.images.dim(3);
    auto x = g.leaf(batch.images);
    auto warped = geometry::warp_patch(clamp_unit(patch), batch.specs, h, w);
    diff::Var<S> alpha;
    if (mask) {
        const auto& ms = mask->shape();
        const auto& ps = patch.shape();
        if (ms.size() != 3 || ms[0] != 1 || ms[1] != ps[1] || ms[2] != ps[2])
            throw ShapeError("mask must be 1 x " + std::to_string(ps[1]) + " x " + std::to_string(ps[2]) + ", got " +
                             diff::shape_str(ms));
        alpha = geometry::warp_patch(clamp_unit(*mask), batch.specs, h, w).canvas;
    } else {
        alpha = g.leaf(std::move(warped.footprint));
    }
    auto attacked = diff::lerp(x, warped.canvas, alpha);
    std::vector<int> targets(batch.specs.size(), target);
    return diff::softmax_cross_entropy(net.forward(attacked), targets);
}

template diff::Var<float> attack_loss(const model::Network<float>&, const diff::Var<float>&, const diff::Var<float>*,
                                      const EotBatch<float>&, int);
template diff::Var<double> attack_loss(const model::Network<double>&, const diff::Var<double>&,
                                       const diff::Var<double>*, const EotBatch<double>&, int);

void project_unit(Tensor<float>& t) {
    for (auto& v : t.values()) v = std::clamp(v, 0.0f, 1.0f);
}

std::string to_string(StepRule r) { return r == StepRule::sign ? "sign" : "sgd"; }

StepRule parse_step_rule(const std::string& s) {
    if (s == "sign") return StepRule::sign;
    if (s == "sgd") return StepRule::sgd;
    throw ConfigError("unknown step rule '" + s + "' (expected sign or sgd)");
}

void apply_step(Tensor<float>& t, const Tensor<float>& grad, double learning_rate, StepRule rule) {
    if (grad.shape() != t.shape()) throw ShapeError("step: gradient shape does not match parameter");
    if (rule == StepRule::sign) {
        const float step = static_cast<float>(learning_rate / 255.0);
        for (std::size_t i = 0; i < t.size(); ++i) {
            if (grad[i] > 0.0f) t[i] -= step;
            else if (grad[i] < 0.0f) t[i] += step;
        }
    } else {
        const float lr = static_cast<float>(learning_rate);
        for (std::size_t i = 0; i < t.size(); ++i) t[i] -= lr * grad[i];
    }
    project_unit(t);
}

double eot_step(Tensor<float>& patch, const model::Network<float>& net, const EotBatch<float>& batch, int target,
                double learning_rate, StepRule rule, std::size_t iteration) {
    diff::Graph<float> g;
    auto p = g.leaf(patch, true);
    diff::Var<float> loss;
    try {
        loss = attack_loss<float>(net, p, nullptr, batch, target);
    } catch (const NumericError& e) {
        std::ostringstream os;
        os << "attack loss is not finite at iteration " << iteration << " (lr " << learning_rate << "): " << e.what();
        throw NumericError(os.str());
    }
    const double value = loss.value().item();
    g.backward(loss);
    const auto grad = p.grad();
    if (!grad.all_finite()) {
        std::ostringstream os;
        os << "patch gradient is not finite at iteration " << iteration << " (lr " << learning_rate << ")";
        throw NumericError(os.str());
    }
    apply_step(patch, grad, learning_rate, rule);
    return value;
}

double eot_step(Tensor<float>& patch, const model::Network<float>& net, const ImagePool& pool,
                const TransformSupport& support, int target, const AttackOptConfig& config, Rng& rng,
                std::size_t iteration) {
    const auto batch = draw_batch(pool, support, config.images_per_step, config.transforms_per_image, rng);
    return eot_step(patch, net, batch, target, config.learning_rate, config.step_rule, iteration);
}

Tensor<float> initialize_patch(std::size_t channels, std::size_t edge, double lo, double hi, Rng& rng) {
    Tensor<float> t(diff::Shape{channels, edge, edge});
    for (auto& v : t.values()) v = static_cast<float>(rng.uniform(lo, hi));
    return t;
}

double smoothed(std::span<const double> values, std::size_t window, bool at_end) {
    if (values.empty()) return 0.0;
    const std::size_t n = std::min(window, values.size());
    const auto first = at_end ? values.end() - static_cast<std::ptrdiff_t>(n) : values.begin();
    double s = 0.0;
    for (auto it = first; it != first + static_cast<std::ptrdiff_t>(n); ++it) s += *it;
    return s / static_cast<double>(n);
}

Patch optimize_patch(const model::Network<float>& net, const ImagePool& pool, int target,
                     const AttackOptConfig& config) {
    config.validate();
    if (target < 0 || static_cast<std::size_t>(target) >= net.num_classes())
        throw ConfigError("target " + std::to_string(target) + " out of range");
    Rng rng(config.seed);
    Rng init_rng = rng.fork(0);
    Rng batch_rng = rng.fork(1);
    Patch out;
    out.target = target;
    out.config = config;
    out.pixels = initialize_patch(net.architecture().channels, config.patch_edge, config.init_lo, config.init_hi,
                                  init_rng);
    out.loss_curve.reserve(config.iterations);
    for (std::size_t it = 0; it < config.iterations; ++it)
        out.loss_curve.push_back(eot_step(out.pixels, net, pool, config.support, target, config, batch_rng, it));
    out.improved = smoothed(out.loss_curve, 25, true) <= smoothed(out.loss_curve, 25, false);
    return out;
}

// ---------------------------------------------------------------- evaluation

WilsonInterval wilson95(std::size_t successes, std::size_t trials) {
    if (trials == 0) return {0.0, 1.0};
    constexpr double z = 1.959963984540054;
    const double n = static_cast<double>(trials);
    const double p = static_cast<double>(successes) / n;
    const double z2 = z * z;
    const double centre = (p + z2 / (2 * n)) / (1 + z2 / n);
    const double half = z * std::sqrt(p * (1 - p) / n + z2 / (4 * n * n)) / (1 + z2 / n);
    return {std::max(0.0, centre - half), std::min(1.0, centre + half)};
}

std::vector<std::size_t> eval_indices(const model::Dataset& test, int target, std::size_t max_images) {
    auto idx = test.indices_excluding(target);
    if (idx.size() > max_images) idx.resize(max_images);
    return idx;
}

namespace {

TransformSpec eval_sample(const TransformSupport& support, const std::optional<Strata>& strata, std::size_t j,
                          std::size_t h, std::size_t w, Rng& rng, const saliency::SaliencyMap* map, int& bin) {
    if (!strata) {
        bin = -1;
        return geometry::sample_transform(support, h, w, rng, map);
    }
    const std::size_t k = strata->bins;
    bin = static_cast<int>(j % k);
    const double u = (static_cast<double>(bin) + rng.uniform()) / static_cast<double>(k);
    double theta, scale;
    if (strata->axis == StrataAxis::scale) {
        theta = support.theta_max > 0.0 ? rng.uniform(-support.theta_max, support.theta_max) : 0.0;
        scale = support.scale_lo + (support.scale_hi - support.scale_lo) * u;
    } else {
        theta = -support.theta_max + 2.0 * support.theta_max * u;
        scale = support.scale_hi > support.scale_lo ? rng.uniform(support.scale_lo, support.scale_hi)
                                                    : support.scale_lo;
    }
    return geometry::place_transform(support, theta, scale, h, w, rng, map);
}

}  // namespace

EvalResult evaluate_attack(const Tensor<float>& patch, const Tensor<float>* mask, const model::Network<float>& net,
                           const model::Dataset& test, int target, const TransformSupport& test_support,
                           const EvalOptions& options, std::uint64_t seed,
                           const std::vector<saliency::SaliencyMap>* maps) {
    if (options.samples_per_image == 0) throw ConfigError("evaluate_attack: need at least one transform sample");
    if (options.strata && options.strata->bins == 0) throw ConfigError("evaluate_attack: strata need bins");
    test_support.validate();
    if (maps && maps->size() != test.size()) throw ShapeError("one saliency map per test image is required");
    EvalResult r;
    r.target = target;
    const auto indices = eval_indices(test, target, options.max_images);
    if (indices.empty()) throw ConfigError("evaluate_attack: empty test set");
    const std::size_t h = test.height(), w = test.width();

    for (std::size_t idx : indices) {
        r.image_ids.push_back(test.ids[idx]);
        Rng rng(derive_seed(seed, test.ids[idx]));
        const auto* map = maps ? &(*maps)[idx] : nullptr;
        for (std::size_t j = 0; j < options.samples_per_image; ++j) {
            TrialLog t;
            t.image_id = test.ids[idx];
            t.index = idx;
            t.spec = eval_sample(test_support, options.strata, j, h, w, rng, map, t.bin);
            r.log.push_back(t);
        }
    }

    for (std::size_t start = 0; start < r.log.size(); start += kEvalChunk) {
        const std::size_t len = std::min(kEvalChunk, r.log.size() - start);
        EotBatch<float> b;
        for (std::size_t k = start; k < start + len; ++k) {
            b.sources.push_back(r.log[k].index);
            b.specs.push_back(r.log[k].spec);
        }
        b.images = test.gather(b.sources);
        diff::Graph<float> g;
        auto x = g.leaf(b.images);
        auto warped = geometry::warp_patch(g.leaf(patch), b.specs, h, w);
        diff::Var<float> alpha = mask ? geometry::warp_patch(g.leaf(*mask), b.specs, h, w).canvas
                                      : g.leaf(std::move(warped.footprint));
        const auto logits = net.logits(diff::lerp(x, warped.canvas, alpha).value());
        for (std::size_t k = 0; k < len; ++k) {
            auto& t = r.log[start + k];
            t.predicted = argmax_row(logits, k);
            if (t.predicted == target) ++r.successes;
        }
    }
    r.trials = r.log.size();
    r.success_rate = static_cast<double>(r.successes) / static_cast<double>(r.trials);
    const auto ci = wilson95(r.successes, r.trials);
    r.ci_low = ci.low;
    r.ci_high = ci.high;
    return r;
}

}  // namespace patchforge::attack
