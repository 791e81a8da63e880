#pragma once

#include <functional>
#include <stdexcept>
#include <utility>
#include <vector>

#include "dpdepth/core/tensor.hpp"

namespace dpdepth {

class Graph;

/// Handle to a node owned by a Graph.
struct Value {
    int id = -1;
    bool valid() const { return id >= 0; }
};

/// Eager reverse-mode tape. Ops compute their forward result immediately and
/// register a backward closure; creation order is a topological order, so
/// backward() just walks the node list in reverse. Single-threaded, fixed
/// iteration order everywhere: results are bit-reproducible.
class Graph {
public:
    using BackFn = std::function<void(Graph&, Value self)>;

    Value constant(Tensor t) { return push(std::move(t), false, nullptr); }

    /// Leaf whose gradient is wanted (parameter or probed input).
    Value leaf(Tensor t) { return push(std::move(t), true, nullptr); }

    /// Register an op result. `needs` should be true iff any parent needs a
    /// gradient; `back` may be null for constant subgraphs.
    Value make(Tensor out, bool needs, BackFn back) {
        return push(std::move(out), needs, needs ? std::move(back) : nullptr);
    }

    const Tensor& val(Value v) const { return nodes_[check(v)].value; }
    Tensor& grad(Value v) { return nodes_[check(v)].grad; }
    bool needs_grad(Value v) const { return nodes_[check(v)].needs; }

    /// Accumulates d(root)/d(leaf) into every grad tensor. `root` must hold a
    /// single element.
    void backward(Value root) {
        Node& r = nodes_[check(root)];
        if (r.value.numel() != 1)
            throw std::invalid_argument("backward: root must be scalar, got shape " + r.value.shape_str());
        if (!r.needs) return;
        r.grad.data[0] = 1.0;
        for (size_t i = nodes_.size(); i-- > 0;) {
            Node& n = nodes_[i];
            if (n.needs && n.back) n.back(*this, Value{static_cast<int>(i)});
        }
    }

    size_t size() const { return nodes_.size(); }

private:
    struct Node {
        Tensor value;
        Tensor grad;  // allocated (zeros) only when needs
        bool needs = false;
        BackFn back;
    };

    Value push(Tensor t, bool needs, BackFn back) {
        Node n;
        n.needs = needs;
        if (needs) n.grad = Tensor::zeros(t.shape);
        n.value = std::move(t);
        n.back = std::move(back);
        nodes_.push_back(std::move(n));
        return Value{static_cast<int>(nodes_.size()) - 1};
    }

    size_t check(Value v) const {
        if (!v.valid() || static_cast<size_t>(v.id) >= nodes_.size())
            throw std::invalid_argument("graph: dangling value handle");
        return static_cast<size_t>(v.id);
    }

    std::vector<Node> nodes_;
};

}  // namespace dpdepth
