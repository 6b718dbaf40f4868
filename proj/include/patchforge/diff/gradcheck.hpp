#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <vector>

#include "patchforge/diff/graph.hpp"
#include "patchforge/diff/tensor.hpp"

namespace patchforge::diff {

struct GradCheckResult {
    double max_relative_error = 0.0;
    std::size_t worst_index = 0;
    std::vector<double> analytic;
    std::vector<double> numeric;
    // Coordinates where f(point +- step) was NaN; excluded from the maximum.
    std::vector<std::size_t> nan_coordinates;
};

// Builds a scalar loss on `g` from the leaf holding the evaluation point.
template <typename S>
using ScalarFn = std::function<Var<S>(Graph<S>& g, const Var<S>& input)>;

// Compares reverse-mode gradients of f at `point` against central differences.
// Relative error per coordinate is |analytic - numeric| / max(1e-8, |numeric|).
template <typename S>
GradCheckResult grad_check(const ScalarFn<S>& f, const Tensor<S>& point, S step) {
    if (!(step > S(0))) throw Error("grad_check: step must be positive");
    GradCheckResult result;
    {
        Graph<S> g;
        auto x = g.leaf(point, true);
        auto loss = f(g, x);
        g.backward(loss);
        const auto grad = x.grad();
        result.analytic.assign(grad.values().begin(), grad.values().end());
    }
    auto eval = [&](const Tensor<S>& p) -> double {
        Graph<S> g;
        auto x = g.leaf(p, false);
        try {
            return static_cast<double>(f(g, x).value().item());
        } catch (const NumericError&) {
            return std::nan("");
        }
    };
    result.numeric.resize(point.size());
    Tensor<S> probe = point;
    for (std::size_t i = 0; i < point.size(); ++i) {
        probe[i] = point[i] + step;
        const double up = eval(probe);
        probe[i] = point[i] - step;
        const double down = eval(probe);
        probe[i] = point[i];
        if (std::isnan(up) || std::isnan(down)) {
            result.numeric[i] = std::nan("");
            result.nan_coordinates.push_back(i);
            continue;
        }
        const double numeric = (up - down) / (2.0 * static_cast<double>(step));
        result.numeric[i] = numeric;
        const double err = std::abs(result.analytic[i] - numeric) / std::max(1e-8, std::abs(numeric));
        if (err > result.max_relative_error) {
            result.max_relative_error = err;
            result.worst_index = i;
        }
    }
    return result;
}

}  // namespace patchforge::diff
