#pragma once

#include <cstddef>
#include <deque>
#include <functional>
#include <string>
#include <string_view>
#include <vector>

#include "patchforge/diff/tensor.hpp"
#include "patchforge/error.hpp"

namespace patchforge::diff {

template <typename S>
class Graph;

// Handle to a value recorded on a Graph. Cheap to copy; only valid while
// the owning graph is alive.
template <typename S>
class Var {
public:
    Var() = default;
    Var(Graph<S>* graph, std::size_t id) : graph_(graph), id_(id) {}

    Graph<S>& graph() const { return *graph_; }
    std::size_t id() const { return id_; }
    bool valid() const { return graph_ != nullptr; }

    const Tensor<S>& value() const { return graph_->value(id_); }
    const Shape& shape() const { return value().shape(); }
    bool requires_grad() const { return graph_->requires_grad(id_); }

    // Accumulated gradient; a zero tensor if backward never reached this node.
    Tensor<S> grad() const { return graph_->grad(id_); }

private:
    Graph<S>* graph_ = nullptr;
    std::size_t id_ = 0;
};

// Append-only tape. Nodes are stored in creation order, which is a
// topological order because an op can only consume existing nodes.
template <typename S>
class Graph {
public:
    // Receives the graph and the id of the node whose output gradient is
    // ready; accumulates into the input gradients via grad_sink().
    using BackwardFn = std::function<void(Graph&, std::size_t)>;

    Graph() = default;
    Graph(const Graph&) = delete;
    Graph& operator=(const Graph&) = delete;

    Var<S> leaf(Tensor<S> value, bool requires_grad = false) {
        if (!value.all_finite()) throw NumericError("leaf tensor contains NaN or Inf");
        Node& n = nodes_.emplace_back();
        n.op = "leaf";
        n.value = std::move(value);
        n.requires_grad = requires_grad;
        n.is_leaf = true;
        return Var<S>(this, nodes_.size() - 1);
    }

    Var<S> record(std::string_view op, Tensor<S> value, const std::vector<Var<S>>& inputs,
                  BackwardFn backward) {
        if (!value.all_finite()) {
            throw NumericError(std::string(op) + " produced a non-finite value");
        }
        bool needs = false;
        std::vector<std::size_t> ids;
        ids.reserve(inputs.size());
        for (const auto& in : inputs) {
            if (&in.graph() != this) throw Error(std::string(op) + ": input belongs to another graph");
            needs = needs || nodes_[in.id()].requires_grad;
            ids.push_back(in.id());
        }
        Node& n = nodes_.emplace_back();
        n.op = std::string(op);
        n.value = std::move(value);
        n.inputs = std::move(ids);
        n.requires_grad = needs;
        if (needs) n.backward = std::move(backward);
        return Var<S>(this, nodes_.size() - 1);
    }

    void backward(const Var<S>& loss) {
        if (&loss.graph() != this) throw Error("backward: loss belongs to another graph");
        if (loss.value().size() != 1) {
            throw ShapeError("backward: loss must be scalar, got shape " + shape_str(loss.shape()));
        }
        for (auto& n : nodes_) {
            if (!n.is_leaf) n.grad_ready = false;
        }
        Tensor<S>* seed = grad_sink(loss.id());
        if (!seed) return;
        (*seed)[0] += S(1);
        for (std::size_t id = loss.id() + 1; id-- > 0;) {
            Node& n = nodes_[id];
            if (n.is_leaf || !n.grad_ready || !n.backward) continue;
            n.backward(*this, id);
        }
    }

    void zero_grad() {
        for (auto& n : nodes_) n.grad_ready = false;
    }

    const Tensor<S>& value(std::size_t id) const { return nodes_.at(id).value; }
    bool requires_grad(std::size_t id) const { return nodes_.at(id).requires_grad; }
    const std::string& op(std::size_t id) const { return nodes_.at(id).op; }
    const std::vector<std::size_t>& inputs(std::size_t id) const { return nodes_.at(id).inputs; }
    std::size_t size() const { return nodes_.size(); }

    Tensor<S> grad(std::size_t id) const {
        const Node& n = nodes_.at(id);
        if (!n.grad_ready) return Tensor<S>(n.value.shape());
        return n.grad;
    }

    // Gradient buffer of node `id`, zero-initialized on first touch since the
    // last backward; nullptr when the node does not require a gradient.
    Tensor<S>* grad_sink(std::size_t id) {
        Node& n = nodes_[id];
        if (!n.requires_grad) return nullptr;
        if (!n.grad_ready) {
            if (n.grad.shape() != n.value.shape()) {
                n.grad = Tensor<S>(n.value.shape());
            } else {
                n.grad.fill(S(0));
            }
            n.grad_ready = true;
        }
        return &n.grad;
    }

    const Tensor<S>& out_grad(std::size_t id) const { return nodes_[id].grad; }

private:
    struct Node {
        std::string op;
        Tensor<S> value;
        Tensor<S> grad;
        bool grad_ready = false;
        bool requires_grad = false;
        bool is_leaf = false;
        std::vector<std::size_t> inputs;
        BackwardFn backward;
    };

    std::deque<Node> nodes_;
};

}  // namespace patchforge::diff
