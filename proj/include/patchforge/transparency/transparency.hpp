#pragma once

#include <cstddef>
#include <filesystem>
#include <span>
#include <vector>

#include <json.hpp>

#include "patchforge/attack/patch_attack.hpp"
#include "patchforge/diff/graph.hpp"
#include "patchforge/diff/tensor.hpp"

namespace patchforge::transparency {

using attack::AttackOptConfig;
using attack::EotBatch;
using diff::Tensor;
using diff::Var;

// PO(M): mean of the mask entries.
double patch_obtrusiveness(const Tensor<float>& mask);
double patch_obtrusiveness(const Tensor<double>& mask);

template <typename S>
Var<S> obtrusiveness(const Var<S>& mask);

// x' = t(M) * t(p) + (1 - t(M)) * x, with the same specs for patch and mask.
// image: N x C x H x W, patch: C x P x P, mask: 1 x P x P.
template <typename S>
Var<S> blend_apply(const Var<S>& image, const Var<S>& patch, const Var<S>& mask,
                   std::span<const geometry::TransformSpec> specs);

template <typename S>
struct JointLoss {
    Var<S> total;   // target + gamma * po
    Var<S> target;  // mean cross-entropy toward the target label
    Var<S> po;      // PO(M)^2 on the canonical mask
};

template <typename S>
JointLoss<S> joint_loss(const model::Network<S>& net, const Var<S>& attacked, int target, const Var<S>& mask,
                        double gamma);

// Full pipeline loss for one EoT batch: blend then joint_loss.
template <typename S>
JointLoss<S> transparent_loss(const model::Network<S>& net, const Var<S>& patch, const Var<S>& mask,
                              const EotBatch<S>& batch, int target, double gamma);

struct GammaSchedule {
    double initial = 0.01;
    double decay = 0.5;
    double floor = 1e-3;
    double threshold = 0.1;
    std::size_t patience = 5;

    double gamma = 0.01;
    std::size_t stage = 0;
    std::size_t counter = 0;

    static GammaSchedule make(double initial, double decay = 0.5, double floor = 1e-3, double threshold = 0.1,
                              std::size_t patience = 5);
    void validate() const;
    nlohmann::json to_json() const;
    static GammaSchedule from_json(const nlohmann::json& j);
};

// Counts iterations with loss below threshold (reset otherwise). After
// `patience` of them gamma drops to max(gamma * decay, floor) and the counter
// resets. Returns true when gamma actually decreased.
bool gamma_step(GammaSchedule& schedule, double target_loss);

struct TransparentConfig {
    AttackOptConfig attack;  // iterations default to 1200 here
    GammaSchedule schedule;
    double mask_init = 0.9;

    TransparentConfig();
    void validate() const;
    nlohmann::json to_json() const;
    static TransparentConfig from_json(const nlohmann::json& j);
};

struct TransparentResult {
    attack::Patch patch;
    Tensor<float> mask;  // 1 x P x P
    double po = 1.0;
    std::vector<double> target_trace;
    std::vector<double> po_trace;     // PO(M)^2 per iteration
    std::vector<double> gamma_trace;  // gamma used at each iteration
    std::vector<std::size_t> decays;  // iterations whose gamma_step lowered gamma
    bool converged = true;            // smoothed final target loss <= 1
};

TransparentResult optimize_transparent(const model::Network<float>& net, const attack::ImagePool& pool, int target,
                                       const TransparentConfig& config);

// Iterations in `decays` followed, within `after` iterations, by a target loss
// above the largest loss of the `before` iterations leading up to the decay.
std::vector<bool> spikes_after_decays(std::span<const double> target_trace, std::span<const std::size_t> decays,
                                      std::size_t before = 5, std::size_t after = 3);

// ---------------------------------------------------------------- controls

struct ControlSpec {
    AttackOptConfig config;      // opaque, 500 iterations, scaled support
    double po = 1.0;             // semi-transparent PO being matched
    double semi_scale = 0.45;    // nominal scale of the semi-transparent patch
    double control_scale = 0.45; // semi_scale * sqrt(po)
};

// Footprint area fraction times PO. Scale is an edge fraction of min(H, W).
double image_relative_opacity(double scale, double po, std::size_t height, std::size_t width);

// Opaque control whose image-relative opacity equals the semi-transparent
// patch's: every scale of the semi support is multiplied by sqrt(po).
ControlSpec make_opacity_matched_control(double po, const geometry::TransformSupport& semi_support,
                                         const AttackOptConfig& base, std::size_t image_edge,
                                         std::size_t iterations = 500);

// |sqrt(control footprint) - sqrt(semi footprint * po)| <= 1 pixel, using the
// rounded pixel side of each footprint at the nominal scale.
bool opacity_matched(double semi_scale, double po, double control_scale, std::size_t image_edge);

// ---------------------------------------------------------------- artifacts

inline constexpr int kTransparentSchemaVersion = 1;

struct TransparentArtifact {
    attack::Patch patch;
    Tensor<float> mask;
    double po = 1.0;
    GammaSchedule schedule;
    double mask_init = 0.9;
};

// Writes <stem>.png (patch), <stem>_mask.png (grayscale mask) and <stem>.json.
std::vector<std::filesystem::path> save_transparent(const std::filesystem::path& stem, const TransparentResult& result,
                                                    const TransparentConfig& config);
TransparentArtifact load_transparent(const std::filesystem::path& sidecar);

}  // namespace patchforge::transparency
