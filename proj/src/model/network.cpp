#include "patchforge/model/network.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>

#include "patchforge/diff/ops.hpp"
#include "patchforge/error.hpp"
#include "patchforge/rng.hpp"

namespace patchforge::model {

namespace {

const char* kind_name(LayerKind k) {
    switch (k) {
        case LayerKind::conv: return "conv";
        case LayerKind::relu: return "relu";
        case LayerKind::maxpool: return "maxpool";
        case LayerKind::dense: return "dense";
    }
    return "?";
}

LayerKind kind_from(const std::string& s) {
    if (s == "conv") return LayerKind::conv;
    if (s == "relu") return LayerKind::relu;
    if (s == "maxpool") return LayerKind::maxpool;
    if (s == "dense") return LayerKind::dense;
    throw FormatError("unknown layer kind '" + s + "'");
}

constexpr std::size_t kInferenceChunk = 64;

}  // namespace

std::vector<Shape> Architecture::parameter_shapes() const {
    if (channels == 0 || height == 0 || width == 0 || num_classes == 0) {
        throw ConfigError("architecture: zero input extent or class count");
    }
    std::vector<Shape> shapes;
    std::size_t c = channels, h = height, w = width;
    bool flat = false;
    std::size_t features = 0;
    for (const auto& l : layers) {
        switch (l.kind) {
            case LayerKind::conv:
                if (flat) throw ConfigError("architecture: conv after dense");
                if (l.out == 0 || l.kernel == 0 || h + 2 * l.pad < l.kernel || w + 2 * l.pad < l.kernel)
                    throw ConfigError("architecture: invalid conv layer");
                shapes.push_back({l.out, c, l.kernel, l.kernel});
                shapes.push_back({l.out});
                c = l.out;
                h = h + 2 * l.pad - l.kernel + 1;
                w = w + 2 * l.pad - l.kernel + 1;
                break;
            case LayerKind::maxpool:
                if (flat || h % 2 || w % 2) throw ConfigError("architecture: maxpool needs even spatial extent");
                h /= 2;
                w /= 2;
                break;
            case LayerKind::relu:
                break;
            case LayerKind::dense: {
                const std::size_t in = flat ? features : c * h * w;
                if (l.out == 0) throw ConfigError("architecture: dense layer with zero outputs");
                shapes.push_back({l.out, in});
                shapes.push_back({l.out});
                flat = true;
                features = l.out;
                break;
            }
        }
    }
    if (!flat || features != num_classes) {
        throw ConfigError("architecture: final layer must be dense with num_classes outputs");
    }
    return shapes;
}

nlohmann::json Architecture::to_json() const {
    nlohmann::json layers_json = nlohmann::json::array();
    for (const auto& l : layers) {
        nlohmann::json lj{{"kind", kind_name(l.kind)}};
        if (l.kind == LayerKind::conv || l.kind == LayerKind::dense) lj["out"] = l.out;
        if (l.kind == LayerKind::conv) {
            lj["kernel"] = l.kernel;
            lj["pad"] = l.pad;
        }
        layers_json.push_back(lj);
    }
    return {{"input", {channels, height, width}}, {"num_classes", num_classes}, {"layers", layers_json}};
}

Architecture Architecture::from_json(const nlohmann::json& j) {
    Architecture a;
    try {
        const auto in = j.at("input").get<std::vector<std::size_t>>();
        if (in.size() != 3) throw FormatError("architecture input must have 3 extents");
        a.channels = in[0];
        a.height = in[1];
        a.width = in[2];
        a.num_classes = j.at("num_classes").get<std::size_t>();
        for (const auto& lj : j.at("layers")) {
            LayerSpec l;
            l.kind = kind_from(lj.at("kind").get<std::string>());
            l.out = lj.value("out", std::size_t{0});
            l.kernel = lj.value("kernel", std::size_t{0});
            l.pad = lj.value("pad", std::size_t{0});
            a.layers.push_back(l);
        }
    } catch (const nlohmann::json::exception& e) {
        throw FormatError(std::string("architecture json: ") + e.what());
    }
    a.parameter_shapes();
    return a;
}

Architecture desk_architecture(std::size_t num_classes, std::size_t image_size) {
    Architecture a;
    a.channels = 3;
    a.height = image_size;
    a.width = image_size;
    a.num_classes = num_classes;
    a.layers = {
        {LayerKind::conv, 8, 3, 1},  {LayerKind::relu},    {LayerKind::maxpool},
        {LayerKind::conv, 16, 3, 1}, {LayerKind::relu},    {LayerKind::maxpool},
        {LayerKind::dense, 64},      {LayerKind::relu},    {LayerKind::dense, num_classes},
    };
    return a;
}

nlohmann::json TrainingInfo::to_json() const {
    return {{"epochs", epochs},
            {"learning_rate", learning_rate},
            {"batch_size", batch_size},
            {"momentum", momentum},
            {"seed", seed},
            {"final_loss", final_loss},
            {"train_accuracy", train_accuracy},
            {"test_accuracy", test_accuracy}};
}

TrainingInfo TrainingInfo::from_json(const nlohmann::json& j) {
    TrainingInfo t;
    t.epochs = j.value("epochs", std::size_t{0});
    t.learning_rate = j.value("learning_rate", 0.0);
    t.batch_size = j.value("batch_size", std::size_t{0});
    t.momentum = j.value("momentum", 0.0);
    t.seed = j.value("seed", std::uint64_t{0});
    t.final_loss = j.value("final_loss", 0.0);
    t.train_accuracy = j.value("train_accuracy", 0.0);
    t.test_accuracy = j.value("test_accuracy", 0.0);
    return t;
}

template <typename S>
Network<S>::Network(Architecture arch, std::vector<Tensor<S>> params)
    : arch_(std::move(arch)), params_(std::move(params)) {
    const auto shapes = arch_.parameter_shapes();
    if (shapes.size() != params_.size()) {
        throw ShapeError("network: expected " + std::to_string(shapes.size()) + " parameter tensors, got " +
                         std::to_string(params_.size()));
    }
    for (std::size_t i = 0; i < shapes.size(); ++i) {
        if (params_[i].shape() != shapes[i]) {
            throw ShapeError("network: parameter " + std::to_string(i) + " has shape " +
                             diff::shape_str(params_[i].shape()) + ", expected " + diff::shape_str(shapes[i]));
        }
    }
}

template <typename S>
Network<S> Network<S>::initialize(Architecture arch, std::uint64_t seed) {
    Rng rng(seed);
    std::vector<Tensor<S>> params;
    for (const auto& shape : arch.parameter_shapes()) {
        Tensor<S> t(shape);
        if (shape.size() > 1) {
            const std::size_t fan_in = t.size() / shape[0];
            const double bound = std::sqrt(6.0 / static_cast<double>(fan_in));
            for (auto& v : t.values()) v = static_cast<S>(rng.uniform(-bound, bound));
        }
        params.push_back(std::move(t));
    }
    return Network(std::move(arch), std::move(params));
}

template <typename S>
void Network<S>::check_input(const Shape& shape) const {
    if (shape.size() != 4 || shape[1] != arch_.channels || shape[2] != arch_.height || shape[3] != arch_.width) {
        throw ShapeError("network expects N x " + std::to_string(arch_.channels) + " x " +
                         std::to_string(arch_.height) + " x " + std::to_string(arch_.width) + " input, got " +
                         diff::shape_str(shape));
    }
}

template <typename S>
Var<S> Network<S>::forward(const Var<S>& input, std::vector<Var<S>>* param_vars) const {
    check_input(input.shape());
    auto& g = input.graph();
    std::vector<Var<S>> p;
    p.reserve(params_.size());
    for (const auto& t : params_) p.push_back(g.leaf(t, param_vars != nullptr));
    Var<S> h = input;
    std::size_t next = 0;
    for (const auto& l : arch_.layers) {
        switch (l.kind) {
            case LayerKind::conv:
                h = diff::conv2d(h, p[next], p[next + 1], l.pad);
                next += 2;
                break;
            case LayerKind::relu:
                h = diff::relu(h);
                break;
            case LayerKind::maxpool:
                h = diff::maxpool2(h);
                break;
            case LayerKind::dense:
                h = diff::dense(h, p[next], p[next + 1]);
                next += 2;
                break;
        }
    }
    if (param_vars) *param_vars = std::move(p);
    return h;
}

template <typename S>
Tensor<S> Network<S>::logits(const Tensor<S>& batch) const {
    check_input(batch.shape());
    const std::size_t n = batch.dim(0);
    const std::size_t per = batch.size() / std::max<std::size_t>(n, 1);
    Tensor<S> out(Shape{n, arch_.num_classes});
    for (std::size_t start = 0; start < n; start += kInferenceChunk) {
        const std::size_t len = std::min(kInferenceChunk, n - start);
        std::vector<S> chunk(batch.data() + start * per, batch.data() + (start + len) * per);
        diff::Graph<S> g;
        auto x = g.leaf(Tensor<S>(Shape{len, arch_.channels, arch_.height, arch_.width}, std::move(chunk)));
        const auto& z = forward(x).value();
        std::copy(z.data(), z.data() + z.size(), out.data() + start * arch_.num_classes);
    }
    return out;
}

template <typename S>
std::uint64_t Network<S>::checksum() const {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (const auto& t : params_) {
        const auto* bytes = reinterpret_cast<const unsigned char*>(t.data());
        for (std::size_t i = 0; i < t.size() * sizeof(S); ++i) {
            h ^= bytes[i];
            h *= 0x100000001b3ULL;
        }
    }
    return h;
}

template <typename S>
Prediction predict(const Network<S>& net, const Tensor<S>& image) {
    const auto& a = net.architecture();
    Tensor<S> batch = image.rank() == 3 ? image.reshaped({1, image.dim(0), image.dim(1), image.dim(2)}) : image;
    if (batch.rank() != 4 || batch.dim(0) != 1) {
        throw ShapeError("predict expects a single " + diff::shape_str(a.input_shape()) + " image, got " +
                         diff::shape_str(image.shape()));
    }
    const auto probs = diff::softmax(net.logits(batch));
    Prediction p;
    p.probabilities.assign(probs.values().begin(), probs.values().end());
    p.label = static_cast<int>(std::max_element(p.probabilities.begin(), p.probabilities.end()) -
                               p.probabilities.begin());
    return p;
}

template <typename S>
std::vector<int> classify(const Network<S>& net, const Tensor<S>& batch) {
    const auto z = net.logits(batch);
    const std::size_t n = z.dim(0), c = z.dim(1);
    std::vector<int> labels(n);
    for (std::size_t b = 0; b < n; ++b) {
        const S* row = z.data() + b * c;
        labels[b] = static_cast<int>(std::max_element(row, row + c) - row);
    }
    return labels;
}

template class Network<float>;
template class Network<double>;
template Prediction predict(const Network<float>&, const Tensor<float>&);
template Prediction predict(const Network<double>&, const Tensor<double>&);
template std::vector<int> classify(const Network<float>&, const Tensor<float>&);
template std::vector<int> classify(const Network<double>&, const Tensor<double>&);

}  // namespace patchforge::model
