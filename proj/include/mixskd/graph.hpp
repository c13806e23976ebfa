#pragma once

#include <functional>
#include <utility>
#include <vector>

#include "mixskd/tensor.hpp"

namespace mixskd {

// Handle to a node on a Graph's tape.
struct Var {
    int id = -1;
    bool valid() const { return id >= 0; }
};

// Reverse-mode tape. Nodes are appended in evaluation order, so the record
// is topologically sorted by construction and backward() is a single reverse
// sweep. Tensors on the tape are never mutated in place; every op produces a
// fresh node.
//
// backward() accumulates additively into each node's persistent grad buffer:
// running it twice on the same tape doubles the grads exactly. Each sweep
// propagates through scratch buffers so earlier accumulations cannot leak
// into later sweeps.
template <typename Real>
class Graph {
public:
    using GradStore = std::vector<Tensor<Real>>;
    using BackwardFn = std::function<void(Graph&, GradStore&)>;

    Var leaf(Tensor<Real> value, bool requires_grad) {
        return push(std::move(value), requires_grad, nullptr);
    }

    Var constant(Tensor<Real> value) { return leaf(std::move(value), false); }

    Var make(Tensor<Real> value, bool requires_grad, BackwardFn backward) {
        return push(std::move(value), requires_grad, requires_grad ? std::move(backward) : nullptr);
    }

    const Tensor<Real>& value(Var v) const { return nodes_[check(v)].value; }

    bool requires_grad(Var v) const { return nodes_[check(v)].requires_grad; }

    // Accumulated gradient; lazily materialized as zeros.
    const Tensor<Real>& grad(Var v) {
        Node& n = nodes_[check(v)];
        if (n.grad.shape != n.value.shape) n.grad = Tensor<Real>::zeros(n.value.shape);
        return n.grad;
    }

    std::size_t size() const { return nodes_.size(); }

    void backward(Var loss) {
        Node& root = nodes_[check(loss)];
        if (root.value.numel() != 1)
            throw InvalidShapeError("backward: loss must be scalar, got " + root.value.shape_str());
        GradStore scratch(nodes_.size());
        scratch[static_cast<std::size_t>(loss.id)] = Tensor<Real>::full(root.value.shape, Real(1));
        for (int i = loss.id; i >= 0; --i) {
            Node& n = nodes_[static_cast<std::size_t>(i)];
            if (!n.requires_grad || !n.backward) continue;
            Tensor<Real>& g = scratch[static_cast<std::size_t>(i)];
            if (g.data.empty()) continue;  // no gradient reached this node
            n.backward(*this, scratch);
        }
        for (std::size_t i = 0; i < nodes_.size(); ++i) {
            Node& n = nodes_[i];
            if (!n.requires_grad || scratch[i].data.empty()) continue;
            if (n.grad.shape != n.value.shape) n.grad = Tensor<Real>::zeros(n.value.shape);
            n.grad.add_(scratch[i]);
        }
    }

    // Scratch-gradient accessor used from backward closures; allocates zeros
    // for the node's shape on first touch.
    Tensor<Real>& scratch_grad(GradStore& store, Var v) {
        Tensor<Real>& g = store[static_cast<std::size_t>(check(v))];
        if (g.data.empty()) g = Tensor<Real>::zeros(nodes_[static_cast<std::size_t>(v.id)].value.shape);
        return g;
    }

    const Tensor<Real>& upstream(GradStore& store, Var v) const {
        return store[static_cast<std::size_t>(check(v))];
    }

private:
    struct Node {
        Tensor<Real> value;
        Tensor<Real> grad;  // persistent accumulator
        bool requires_grad = false;
        BackwardFn backward;
    };

    Var push(Tensor<Real> value, bool requires_grad, BackwardFn backward) {
        nodes_.push_back(Node{std::move(value), {}, requires_grad, std::move(backward)});
        return Var{static_cast<int>(nodes_.size()) - 1};
    }

    std::size_t check(Var v) const {
        if (!v.valid() || static_cast<std::size_t>(v.id) >= nodes_.size())
            throw InvalidShapeError("dangling Var handle");
        return static_cast<std::size_t>(v.id);
    }

    std::vector<Node> nodes_;
};

}  // namespace mixskd
