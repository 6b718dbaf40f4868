#pragma once

#include <cstddef>
#include <span>
#include <vector>

#include "patchforge/diff/tensor.hpp"
#include "patchforge/model/dataset.hpp"
#include "patchforge/model/network.hpp"
#include "patchforge/saliency/placement.hpp"

namespace patchforge::saliency {

// |d score(label) / d image| reduced by max over channels, where score is the
// pre-softmax logit of `label`. image: 1 x C x H x W or C x H x W.
template <typename S>
SaliencyMap compute_saliency(const model::Network<S>& net, const diff::Tensor<S>& image, int label,
                             std::size_t image_id = 0);

// One map per sample of `data`, using each sample's true label.
std::vector<SaliencyMap> compute_saliency_all(const model::Network<float>& net, const model::Dataset& data);

}  // namespace patchforge::saliency
