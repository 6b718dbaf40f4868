#include "patchforge/model/train.hpp"

#include <cmath>
#include <numeric>

#include "patchforge/diff/ops.hpp"
#include "patchforge/model/serialize.hpp"
#include "patchforge/rng.hpp"

namespace patchforge::model {

void TrainConfig::validate() const {
    if (!(learning_rate > 0.0)) throw ConfigError("train: learning rate must be positive");
    if (batch_size == 0) throw ConfigError("train: batch size must be positive");
    if (momentum < 0.0 || momentum >= 1.0) throw ConfigError("train: momentum must be in [0,1)");
}

double accuracy(const Network<float>& net, const Dataset& data) {
    if (data.size() == 0) return 0.0;
    const auto labels = classify(net, data.images);
    std::size_t hits = 0;
    for (std::size_t i = 0; i < labels.size(); ++i) hits += labels[i] == data.labels[i] ? 1 : 0;
    return static_cast<double>(hits) / static_cast<double>(data.size());
}

Network<float> train_classifier(const Architecture& arch, const Dataset& train, const Dataset& test,
                                const TrainConfig& config, const EpochCallback& on_epoch) {
    config.validate();
    if (train.size() == 0) throw ConfigError("train: empty training set");
    if (train.num_classes != arch.num_classes) throw ConfigError("train: dataset/architecture class count mismatch");

    auto net = Network<float>::initialize(arch, derive_seed(config.seed, 0));
    Rng shuffle_rng(derive_seed(config.seed, 1));
    std::vector<diff::Tensor<float>> velocity;
    for (const auto& p : net.parameters()) velocity.emplace_back(p.shape());

    std::vector<std::size_t> order(train.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    Network<float> last_good = net;
    double mean_loss = 0.0;
    const float lr = static_cast<float>(config.learning_rate);
    const float mom = static_cast<float>(config.momentum);

    for (std::size_t epoch = 0; epoch < config.epochs; ++epoch) {
        for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[shuffle_rng.below(i)]);
        double loss_sum = 0.0;
        std::size_t batches = 0;
        for (std::size_t start = 0; start < order.size(); start += config.batch_size) {
            const std::size_t len = std::min(config.batch_size, order.size() - start);
            std::span<const std::size_t> idx(order.data() + start, len);
            std::vector<int> targets;
            for (std::size_t k : idx) targets.push_back(train.labels[k]);

            double loss_value = std::nan("");
            std::vector<diff::Tensor<float>> grads;
            try {
                diff::Graph<float> g;
                auto x = g.leaf(train.gather(idx));
                std::vector<diff::Var<float>> params;
                auto logits = net.forward(x, &params);
                auto loss = diff::softmax_cross_entropy(logits, targets);
                loss_value = loss.value().item();
                g.backward(loss);
                for (const auto& p : params) grads.push_back(p.grad());
            } catch (const NumericError&) {
                loss_value = std::nan("");
            }
            if (!std::isfinite(loss_value)) {
                std::string where = config.checkpoint ? config.checkpoint->string() : std::string("in-memory");
                throw TrainingDiverged("training diverged at epoch " + std::to_string(epoch + 1) + ", batch " +
                                           std::to_string(batches) + " (loss is not finite, lr=" +
                                           std::to_string(config.learning_rate) + "); last good checkpoint: epoch " +
                                           std::to_string(epoch) + " (" + where + ")",
                                       epoch, where);
            }
            auto& params = net.mutable_parameters();
            for (std::size_t p = 0; p < params.size(); ++p) {
                auto& v = velocity[p];
                for (std::size_t q = 0; q < v.size(); ++q) {
                    v[q] = mom * v[q] + grads[p][q];
                    params[p][q] -= lr * v[q];
                }
            }
            loss_sum += loss_value;
            ++batches;
        }
        mean_loss = loss_sum / static_cast<double>(std::max<std::size_t>(batches, 1));
        last_good = net;
        if (config.checkpoint) save_model(net, *config.checkpoint);
        if (on_epoch) on_epoch(epoch + 1, mean_loss, -1.0);
    }

    net.info.epochs = config.epochs;
    net.info.learning_rate = config.learning_rate;
    net.info.batch_size = config.batch_size;
    net.info.momentum = config.momentum;
    net.info.seed = config.seed;
    net.info.final_loss = mean_loss;
    net.info.train_accuracy = accuracy(net, train);
    net.info.test_accuracy = test.size() ? accuracy(net, test) : 0.0;
    return net;
}

}  // namespace patchforge::model
