#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <string>

#include "patchforge/error.hpp"
#include "patchforge/model/dataset.hpp"
#include "patchforge/model/network.hpp"

namespace patchforge::model {

struct TrainConfig {
    std::size_t epochs = 10;
    double learning_rate = 0.02;
    std::size_t batch_size = 32;
    double momentum = 0.9;
    std::uint64_t seed = 1;
    // When set, the model is saved here after every completed epoch.
    std::optional<std::filesystem::path> checkpoint;

    void validate() const;
};

class TrainingDiverged : public NumericError {
public:
    TrainingDiverged(const std::string& what, std::size_t last_good_epoch, std::string checkpoint)
        : NumericError(what), last_good_epoch_(last_good_epoch), checkpoint_(std::move(checkpoint)) {}

    std::size_t last_good_epoch() const { return last_good_epoch_; }
    const std::string& checkpoint() const { return checkpoint_; }

private:
    std::size_t last_good_epoch_;
    std::string checkpoint_;
};

using EpochCallback = std::function<void(std::size_t epoch, double mean_loss, double train_accuracy)>;

// Mini-batch SGD with momentum on softmax cross-entropy. Deterministic given
// the config seed. Held-out accuracy on `test` is recorded in the returned
// network's info.
Network<float> train_classifier(const Architecture& arch, const Dataset& train, const Dataset& test,
                                const TrainConfig& config, const EpochCallback& on_epoch = {});

double accuracy(const Network<float>& net, const Dataset& data);

}  // namespace patchforge::model
