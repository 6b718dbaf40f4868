#pragma once

#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

#include <json.hpp>

#include "patchforge/diff/graph.hpp"
#include "patchforge/diff/tensor.hpp"

namespace patchforge::model {

using diff::Shape;
using diff::Tensor;
using diff::Var;

enum class LayerKind { conv, relu, maxpool, dense };

struct LayerSpec {
    LayerKind kind = LayerKind::relu;
    std::size_t out = 0;     // conv output channels / dense output features
    std::size_t kernel = 0;  // conv only
    std::size_t pad = 0;     // conv only

    bool operator==(const LayerSpec&) const = default;
};

struct Architecture {
    std::size_t channels = 3;
    std::size_t height = 32;
    std::size_t width = 32;
    std::size_t num_classes = 10;
    std::vector<LayerSpec> layers;

    // Shapes of the learnable tensors in forward order (weight, bias per layer).
    std::vector<Shape> parameter_shapes() const;
    Shape input_shape() const { return {channels, height, width}; }

    nlohmann::json to_json() const;
    static Architecture from_json(const nlohmann::json& j);

    bool operator==(const Architecture&) const = default;
};

// conv(3->8)-relu-pool, conv(8->16)-relu-pool, dense(64)-relu, dense(classes)
Architecture desk_architecture(std::size_t num_classes = 10, std::size_t image_size = 32);

struct TrainingInfo {
    std::size_t epochs = 0;
    double learning_rate = 0.0;
    std::size_t batch_size = 0;
    double momentum = 0.0;
    std::uint64_t seed = 0;
    double final_loss = 0.0;
    double train_accuracy = 0.0;
    double test_accuracy = 0.0;

    nlohmann::json to_json() const;
    static TrainingInfo from_json(const nlohmann::json& j);
};

// Feed-forward classifier with explicit parameter tensors. Parameters are
// copied into each graph as leaves, so forward passes never mutate them.
template <typename S>
class Network {
public:
    Network(Architecture arch, std::vector<Tensor<S>> params);

    // He-uniform weights, zero biases.
    static Network initialize(Architecture arch, std::uint64_t seed);

    const Architecture& architecture() const { return arch_; }
    std::size_t num_classes() const { return arch_.num_classes; }
    const std::vector<Tensor<S>>& parameters() const { return params_; }
    std::vector<Tensor<S>>& mutable_parameters() { return params_; }

    // Records the forward pass for an N x C x H x W input. When param_vars is
    // given, parameter leaves require gradients and are returned through it.
    Var<S> forward(const Var<S>& input, std::vector<Var<S>>* param_vars = nullptr) const;

    // Logits for a batch, evaluated in chunks without keeping a graph.
    Tensor<S> logits(const Tensor<S>& batch) const;

    // FNV-1a over the raw parameter bytes.
    std::uint64_t checksum() const;

    template <typename T>
    Network<T> cast() const {
        std::vector<Tensor<T>> p;
        p.reserve(params_.size());
        for (const auto& t : params_) p.push_back(t.template cast<T>());
        Network<T> out(arch_, std::move(p));
        out.info = info;
        return out;
    }

    TrainingInfo info;

private:
    void check_input(const Shape& shape) const;

    Architecture arch_;
    std::vector<Tensor<S>> params_;
};

struct Prediction {
    int label = 0;
    std::vector<double> probabilities;
};

// Classifies a single 1 x C x H x W (or C x H x W) image.
template <typename S>
Prediction predict(const Network<S>& net, const Tensor<S>& image);

// Top-1 labels for an N x C x H x W batch.
template <typename S>
std::vector<int> classify(const Network<S>& net, const Tensor<S>& batch);

extern template class Network<float>;
extern template class Network<double>;

}  // namespace patchforge::model
