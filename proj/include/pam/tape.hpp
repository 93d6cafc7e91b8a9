#pragma once

#include <functional>
#include <stdexcept>
#include <utility>
#include <vector>

#include "pam/tensor.hpp"

namespace pam {

struct VarId {
    int32_t idx = -1;
    bool valid() const { return idx >= 0; }
};

/// Reverse-mode tape over tensor-level operations. Each op appends one node
/// holding the output value plus a closure that, given the node's output
/// gradient, accumulates into its inputs' gradients. Creation order is a
/// topological order, so backward() is a single reverse sweep visiting each
/// node exactly once. Single-writer: one forward pass builds one tape.
template <typename T>
class Tape {
  public:
    using BackwardFn = std::function<void(Tape&, VarId self)>;

    explicit Tape(bool recording = true) : recording_(recording) {}

    bool recording() const { return recording_; }

    VarId leaf(Tensor<T> value, bool requires_grad) {
        nodes_.push_back(Node{std::move(value), Tensor<T>{}, requires_grad && recording_, nullptr});
        return VarId{static_cast<int32_t>(nodes_.size()) - 1};
    }

    VarId constant(Tensor<T> value) { return leaf(std::move(value), false); }

    /// Appends an op output. `requires_grad` should be the OR over inputs;
    /// the closure is dropped when recording is off or nothing upstream
    /// needs gradients.
    VarId push(Tensor<T> value, bool requires_grad, BackwardFn back) {
        const bool req = requires_grad && recording_;
        nodes_.push_back(Node{std::move(value), Tensor<T>{}, req, req ? std::move(back) : nullptr});
        return VarId{static_cast<int32_t>(nodes_.size()) - 1};
    }

    const Tensor<T>& val(VarId v) const { return at(v).value; }

    bool requires_grad(VarId v) const { return at(v).requires_grad; }

    /// Gradient buffer, allocated as zeros on first touch.
    Tensor<T>& grad(VarId v) {
        Node& n = at(v);
        if (!n.grad.defined()) n.grad = Tensor<T>::zeros(n.value.shape);
        return n.grad;
    }

    bool grad_touched(VarId v) const { return at(v).grad.defined(); }

    /// Seeds d(loss)/d(loss) = 1 and sweeps the tape in reverse. The loss
    /// must be scalar.
    void backward(VarId loss) {
        if (!recording_) throw std::logic_error("backward: tape was not recording");
        if (val(loss).numel() != 1) {
            throw std::invalid_argument("backward: loss must be scalar, got shape " +
                                        shape_string(val(loss).shape));
        }
        grad(loss)[0] = T(1);
        for (int32_t i = loss.idx; i >= 0; --i) {
            Node& n = nodes_[static_cast<size_t>(i)];
            if (n.back && n.grad.defined()) n.back(*this, VarId{i});
        }
    }

    size_t size() const { return nodes_.size(); }

  private:
    struct Node {
        Tensor<T> value;
        Tensor<T> grad;
        bool requires_grad = false;
        BackwardFn back;
    };

    Node& at(VarId v) {
        if (!v.valid() || v.idx >= static_cast<int32_t>(nodes_.size())) {
            throw std::out_of_range("tape: invalid var id");
        }
        return nodes_[static_cast<size_t>(v.idx)];
    }
    const Node& at(VarId v) const { return const_cast<Tape*>(this)->at(v); }

    std::vector<Node> nodes_;
    bool recording_;
};

}  // namespace pam
