#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include "patchforge/error.hpp"

namespace patchforge::diff {

using Shape = std::vector<std::size_t>;

inline std::size_t numel(const Shape& shape) {
    return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

inline std::string shape_str(const Shape& shape) {
    std::string s = "[";
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) s += "x";
        s += std::to_string(shape[i]);
    }
    return s + "]";
}

// Dense row-major array. Rank 0 is a scalar holding one value.
template <typename S>
class Tensor {
public:
    using value_type = S;

    Tensor() : shape_{}, data_(1, S(0)) {}
    explicit Tensor(Shape shape, S fill = S(0)) : shape_(std::move(shape)), data_(numel(shape_), fill) {}
    Tensor(Shape shape, std::vector<S> data) : shape_(std::move(shape)), data_(std::move(data)) {
        if (data_.size() != numel(shape_)) {
            throw ShapeError("tensor data length " + std::to_string(data_.size()) +
                             " does not match shape " + shape_str(shape_));
        }
    }

    static Tensor scalar(S v) { return Tensor(Shape{}, std::vector<S>{v}); }

    const Shape& shape() const { return shape_; }
    std::size_t rank() const { return shape_.size(); }
    std::size_t dim(std::size_t i) const { return shape_.at(i); }
    std::size_t size() const { return data_.size(); }

    std::span<S> values() { return data_; }
    std::span<const S> values() const { return data_; }
    S* data() { return data_.data(); }
    const S* data() const { return data_.data(); }

    S& operator[](std::size_t i) { return data_[i]; }
    const S& operator[](std::size_t i) const { return data_[i]; }

    S item() const {
        if (data_.size() != 1) throw ShapeError("item() on tensor of shape " + shape_str(shape_));
        return data_[0];
    }

    // 4-d accessor for N x C x H x W layouts.
    S& at(std::size_t n, std::size_t c, std::size_t h, std::size_t w) {
        return data_[((n * shape_[1] + c) * shape_[2] + h) * shape_[3] + w];
    }
    const S& at(std::size_t n, std::size_t c, std::size_t h, std::size_t w) const {
        return data_[((n * shape_[1] + c) * shape_[2] + h) * shape_[3] + w];
    }

    void fill(S v) { std::fill(data_.begin(), data_.end(), v); }

    Tensor reshaped(Shape shape) const {
        if (numel(shape) != data_.size()) {
            throw ShapeError("cannot reshape " + shape_str(shape_) + " to " + shape_str(shape));
        }
        return Tensor(std::move(shape), data_);
    }

    template <typename T>
    Tensor<T> cast() const {
        std::vector<T> out(data_.begin(), data_.end());
        return Tensor<T>(shape_, std::move(out));
    }

    bool all_finite() const {
        return std::all_of(data_.begin(), data_.end(), [](S v) { return std::isfinite(v); });
    }

    bool operator==(const Tensor& other) const = default;

private:
    Shape shape_;
    std::vector<S> data_;
};

}  // namespace patchforge::diff
