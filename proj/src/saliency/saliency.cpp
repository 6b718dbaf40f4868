#include "patchforge/saliency/saliency.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "patchforge/diff/ops.hpp"
#include "patchforge/error.hpp"

namespace patchforge::saliency {

namespace {

constexpr std::size_t kChunk = 64;

// Gradients of the summed per-sample scores; samples do not interact, so each
// image's slice is its own score gradient.
template <typename S>
std::vector<SaliencyMap> maps_for_batch(const model::Network<S>& net, diff::Tensor<S> batch, std::span<const int> labels,
                                        std::span<const std::size_t> ids) {
    for (int l : labels)
        if (l < 0 || static_cast<std::size_t>(l) >= net.num_classes())
            throw ConfigError("saliency: label " + std::to_string(l) + " out of range");
    const std::size_t n = batch.dim(0), c = batch.dim(1), h = batch.dim(2), w = batch.dim(3);
    diff::Graph<S> g;
    auto x = g.leaf(std::move(batch), true);
    auto scores = diff::pick(net.forward(x), labels);
    g.backward(diff::sum(scores));
    const auto grad = x.grad();
    std::vector<SaliencyMap> maps(n);
    for (std::size_t b = 0; b < n; ++b) {
        auto& m = maps[b];
        m.height = h;
        m.width = w;
        m.values.assign(h * w, 0.0);
        m.image_id = ids[b];
        m.label = labels[b];
        for (std::size_t ch = 0; ch < c; ++ch)
            for (std::size_t q = 0; q < h * w; ++q)
                m.values[q] = std::max(m.values[q], std::abs(static_cast<double>(grad[(b * c + ch) * h * w + q])));
    }
    return maps;
}

}  // namespace

template <typename S>
SaliencyMap compute_saliency(const model::Network<S>& net, const diff::Tensor<S>& image, int label,
                             std::size_t image_id) {
    diff::Tensor<S> batch =
        image.rank() == 3 ? image.reshaped({1, image.dim(0), image.dim(1), image.dim(2)}) : image;
    if (batch.rank() != 4 || batch.dim(0) != 1)
        throw ShapeError("compute_saliency expects one image, got " + diff::shape_str(image.shape()));
    const int labels[1] = {label};
    const std::size_t ids[1] = {image_id};
    return maps_for_batch(net, std::move(batch), labels, ids).front();
}

std::vector<SaliencyMap> compute_saliency_all(const model::Network<float>& net, const model::Dataset& data) {
    std::vector<SaliencyMap> out;
    out.reserve(data.size());
    for (std::size_t start = 0; start < data.size(); start += kChunk) {
        const std::size_t len = std::min(kChunk, data.size() - start);
        std::vector<std::size_t> idx(len);
        std::iota(idx.begin(), idx.end(), start);
        auto maps = maps_for_batch(net, data.gather(idx), std::span<const int>(data.labels).subspan(start, len),
                                   std::span<const std::size_t>(data.ids).subspan(start, len));
        for (auto& m : maps) out.push_back(std::move(m));
    }
    return out;
}

template SaliencyMap compute_saliency(const model::Network<float>&, const diff::Tensor<float>&, int, std::size_t);
template SaliencyMap compute_saliency(const model::Network<double>&, const diff::Tensor<double>&, int, std::size_t);

}  // namespace patchforge::saliency
