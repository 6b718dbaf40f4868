#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <string>
#include <span>
#include <vector>

#include <json.hpp>

#include "patchforge/diff/graph.hpp"
#include "patchforge/diff/tensor.hpp"
#include "patchforge/geometry/transform.hpp"
#include "patchforge/model/dataset.hpp"
#include "patchforge/model/network.hpp"
#include "patchforge/rng.hpp"
#include "patchforge/saliency/placement.hpp"

namespace patchforge::attack {

using diff::Tensor;
using geometry::TransformSpec;
using geometry::TransformSupport;

inline constexpr std::size_t kCanonicalPatchEdge = 16;

// sign: every pixel moves learning_rate / 255 against its gradient sign, i.e.
// the rate is in 8-bit pixel units. sgd: p -= learning_rate * grad on [0,1].
enum class StepRule { sign, sgd };

std::string to_string(StepRule r);
StepRule parse_step_rule(const std::string& s);

struct AttackOptConfig {
    std::size_t iterations = 300;
    double learning_rate = 5.0;
    StepRule step_rule = StepRule::sign;
    std::size_t images_per_step = 16;
    std::size_t transforms_per_image = 1;
    std::uint64_t seed = 0;
    TransformSupport support{0.0, 0.4, 0.5, geometry::LocationStrategy::random};
    std::size_t patch_edge = kCanonicalPatchEdge;
    double init_lo = 0.4;
    double init_hi = 0.6;

    void validate() const;
    nlohmann::json to_json() const;
    static AttackOptConfig from_json(const nlohmann::json& j);
};

struct Patch {
    Tensor<float> pixels;  // 3 x P x P in [0,1]
    int target = 0;
    AttackOptConfig config;
    std::vector<double> loss_curve;
    // Smoothed loss (window 25) at the end is not above the smoothed loss at the start.
    bool improved = true;
};

// Images an attack may draw from: samples whose true label differs from the
// target, plus per-sample saliency maps when a saliency strategy is used.
struct ImagePool {
    const model::Dataset* data = nullptr;
    std::vector<std::size_t> indices;
    const std::vector<saliency::SaliencyMap>* saliency = nullptr;  // indexed like data

    const saliency::SaliencyMap* map_for(std::size_t index) const {
        return saliency ? &(*saliency)[index] : nullptr;
    }
};

ImagePool make_pool(const model::Dataset& data, int target, const std::vector<saliency::SaliencyMap>* maps = nullptr);

// One EoT minibatch: every image repeated once per sampled transform.
template <typename S>
struct EotBatch {
    Tensor<S> images;                  // N x C x H x W
    std::vector<TransformSpec> specs;  // N
    std::vector<std::size_t> sources;  // dataset index per entry
};

EotBatch<float> draw_batch(const ImagePool& pool, const TransformSupport& support, std::size_t images,
                           std::size_t transforms_per_image, Rng& rng);

// Mean cross-entropy toward `target` of the model on the attacked batch. With a
// mask, the warped mask blends patch and image; without one the patch is opaque.
template <typename S>
diff::Var<S> attack_loss(const model::Network<S>& net, const diff::Var<S>& patch, const diff::Var<S>* mask,
                         const EotBatch<S>& batch, int target);

// One descent step followed by projection onto [0,1].
void apply_step(Tensor<float>& t, const Tensor<float>& grad, double learning_rate, StepRule rule);

// Projected descent step on the patch; returns the pre-step loss.
double eot_step(Tensor<float>& patch, const model::Network<float>& net, const EotBatch<float>& batch, int target,
                double learning_rate, StepRule rule, std::size_t iteration = 0);

// Draws a batch from the pool under `support` and takes one step.
double eot_step(Tensor<float>& patch, const model::Network<float>& net, const ImagePool& pool,
                const TransformSupport& support, int target, const AttackOptConfig& config, Rng& rng,
                std::size_t iteration = 0);

Tensor<float> initialize_patch(std::size_t channels, std::size_t edge, double lo, double hi, Rng& rng);

void project_unit(Tensor<float>& t);

Patch optimize_patch(const model::Network<float>& net, const ImagePool& pool, int target,
                     const AttackOptConfig& config);

// Mean of `values` over a trailing/leading window.
double smoothed(std::span<const double> values, std::size_t window, bool at_end);

// ---------------------------------------------------------------- evaluation

enum class StrataAxis { scale, angle };

// Stratified test sampling: the j-th sample for an image is drawn uniformly
// inside bin (j mod bins) of the axis range. Still uniform over the support
// when samples_per_image is a multiple of bins.
struct Strata {
    StrataAxis axis = StrataAxis::scale;
    std::size_t bins = 10;
};

struct EvalOptions {
    std::size_t samples_per_image = 1;
    std::optional<Strata> strata;
    std::size_t max_images = 256;
};

struct TrialLog {
    std::size_t image_id = 0;  // dataset provenance id
    std::size_t index = 0;     // position in the evaluated dataset
    TransformSpec spec;
    int predicted = 0;
    int bin = -1;
};

struct EvalResult {
    std::size_t trials = 0;
    std::size_t successes = 0;
    double success_rate = 0.0;
    double ci_low = 0.0;
    double ci_high = 0.0;
    int target = 0;
    std::vector<std::size_t> image_ids;
    std::vector<TrialLog> log;
};

struct WilsonInterval {
    double low = 0.0;
    double high = 0.0;
};

WilsonInterval wilson95(std::size_t successes, std::size_t trials);

// Held-out evaluation images: the first max_images samples whose label differs from target.
std::vector<std::size_t> eval_indices(const model::Dataset& test, int target, std::size_t max_images);

// Fraction of (image, transform) trials whose top-1 prediction is `target`.
// Each image's transforms come from its own substream of `seed`, so results do
// not depend on evaluation order.
EvalResult evaluate_attack(const Tensor<float>& patch, const Tensor<float>* mask, const model::Network<float>& net,
                           const model::Dataset& test, int target, const TransformSupport& test_support,
                           const EvalOptions& options, std::uint64_t seed,
                           const std::vector<saliency::SaliencyMap>* maps = nullptr);

}  // namespace patchforge::attack
