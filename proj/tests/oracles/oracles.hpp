#pragma once

// Independent checks shared by the unit tests and the acceptance binary.

#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

#include "patchforge/diff/graph.hpp"
#include "patchforge/model/network.hpp"
#include "patchforge/rng.hpp"
#include "patchforge/saliency/placement.hpp"

namespace patchforge::oracles {

using diff::Tensor;

Tensor<double> uniform(const diff::Shape& shape, double lo, double hi, Rng& rng);

// Smallest distance from the evaluation point to a kink of any relu, maxpool
// window or clamp recorded on the graph. Finite differences are only
// meaningful when this exceeds the probe step by a wide margin.
double kink_margin(const diff::Graph<double>& g);

// Tiny conv net on 3 x 8 x 8 inputs: conv(3->2, k3) relu maxpool dense(3).
model::Network<double> tiny_net(std::uint64_t seed, std::size_t num_classes = 3);

// Linear classifier on C x H x W: logit_k = <w_k, x> + b_k.
model::Network<double> linear_net(std::size_t channels, std::size_t height, std::size_t width,
                                  const std::vector<std::vector<double>>& weights, const std::vector<double>& bias);

struct GradCase {
    std::string name;
    double max_error = 0.0;  // worst relative error over all seeds
    std::size_t seeds = 0;
    std::size_t redraws = 0;  // points rejected for lying near a kink
};

// Every differentiable op plus the opaque and joint attack losses, checked
// against central differences in double precision with step 1e-5.
std::vector<GradCase> gradient_suite(std::size_t seeds, std::uint64_t base_seed = 1);

struct InvariantCase {
    std::string name;
    std::size_t cases = 0;
    std::size_t failures = 0;
    double worst = 0.0;  // worst deviation for tolerance-based checks
    std::string first_failure;
};

// Obtrusiveness bounds and linearity, blending identities, convexity and
// locality over randomized cases.
std::vector<InvariantCase> blend_suite(std::size_t cases, std::uint64_t base_seed = 1);

// Brute-force box-sum search with the lexicographic tie rule. max=false is min.
saliency::Placement brute_force_placement(const saliency::SaliencyMap& map, std::size_t extent, bool max);

}  // namespace patchforge::oracles
