#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <vector>

#include "patchforge/diff/graph.hpp"
#include "patchforge/diff/tensor.hpp"

namespace patchforge::diff {

// 2-d convolution, stride 1, symmetric zero padding.
// x: N x C x H x W, weight: O x C x K x K, bias: O  ->  N x O x H' x W'
template <typename S>
Var<S> conv2d(const Var<S>& x, const Var<S>& weight, const Var<S>& bias, std::size_t pad);

// Fully connected layer over the flattened trailing dims of x.
// x: N x ..., weight: O x I, bias: O  ->  N x O
template <typename S>
Var<S> dense(const Var<S>& x, const Var<S>& weight, const Var<S>& bias);

// Subgradient 0 at the kink.
template <typename S>
Var<S> relu(const Var<S>& x);

// 2x2 max pooling with stride 2 over N x C x H x W; ties route the gradient to
// the first maximum in row-major window order.
template <typename S>
Var<S> maxpool2(const Var<S>& x);

template <typename S>
Var<S> sum(const Var<S>& x);

template <typename S>
Var<S> mean(const Var<S>& x);

template <typename S>
Var<S> add(const Var<S>& a, const Var<S>& b);

template <typename S>
Var<S> mul(const Var<S>& a, const Var<S>& b);

template <typename S>
Var<S> scale(const Var<S>& x, S factor);

template <typename S>
Var<S> square(const Var<S>& x);

// Forward clamps to [lo, hi]. Backward passes the gradient through unchanged
// while the input lies within `band` of the interval and blocks it beyond.
template <typename S>
Var<S> clamp_st(const Var<S>& x, S lo, S hi, S band);

// Mean over the batch of -log softmax(logits)[target]. logits: N x C.
template <typename S>
Var<S> softmax_cross_entropy(const Var<S>& logits, std::span<const int> targets);

// out[n] = x[n, index[n]]. x: N x C.
template <typename S>
Var<S> pick(const Var<S>& x, std::span<const int> index);

// Precomputed source taps for bilinear_sample. Coordinates are in source
// pixel-center units and already clamped to the source extent.
struct SampleGrid {
    struct Tap {
        std::int32_t y0 = 0;
        std::int32_t x0 = 0;
        double fy = 0.0;
        double fx = 0.0;
        bool valid = false;
    };

    std::size_t batch = 0;
    std::size_t height = 0;
    std::size_t width = 0;
    std::size_t src_height = 0;
    std::size_t src_width = 0;
    std::vector<Tap> taps;  // batch * height * width

    const Tap& tap(std::size_t n, std::size_t i, std::size_t j) const {
        return taps[(n * height + i) * width + j];
    }
};

// Resamples src (C x h x w) into N x C x H x W; invalid taps produce 0.
// Differentiable with respect to src only.
template <typename S>
Var<S> bilinear_sample(const Var<S>& src, const SampleGrid& grid);

// m * p + (1 - m) * x with the mask broadcast over channels.
// x, p: N x C x H x W, m: N x 1 x H x W.
template <typename S>
Var<S> lerp(const Var<S>& x, const Var<S>& p, const Var<S>& m);

// Row-wise softmax of an N x C tensor (no graph).
template <typename S>
Tensor<S> softmax(const Tensor<S>& logits);

}  // namespace patchforge::diff
