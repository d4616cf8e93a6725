#pragma once

#include <functional>
#include <vector>

#include "pivm/nn/tensor.hpp"

namespace pivm::nn {

/// Reverse-mode differentiation over a fixed operator set.
///
/// Every op appends a node holding its output. A recording tape also stores
/// a backward closure per node; backward() walks nodes in reverse creation
/// order, so gradients of shared inputs accumulate correctly. A tape can be
/// differentiated once; clear() resets it for the next step.
template <class T>
class Tape {
public:
    using Id = int;

    explicit Tape(bool record = true) : record_(record) {}
    // Backward closures refer to the tape by address.
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    bool recording() const { return record_; }
    std::size_t size() const { return nodes_.size(); }

    /// Leaf node (network input or parameter).
    Id leaf(Tensor<T> value);

    const Tensor<T>& value(Id id) const { return nodes_.at(static_cast<std::size_t>(id)).value; }
    /// Gradient after backward(); a zero tensor for nodes the output does not depend on.
    const Tensor<T>& grad(Id id);

    /// 3x3 convolution, zero padding 1, stride 1 or 2. weight (Cout, Cin, 9), bias (Cout, 1, 1).
    Id conv3x3(Id x, Id weight, Id bias, int stride);
    /// Group normalization with per-channel affine (gamma, beta of shape (C, 1, 1)).
    Id group_norm(Id x, Id gamma, Id beta, int groups, T eps = T(1e-5));
    Id silu(Id x);
    Id relu(Id x);
    Id add(Id a, Id b);
    /// x (C, H, W) plus a per-channel bias tensor (C, 1, 1).
    Id add_channel_bias(Id x, Id bias);
    /// Channel concatenation.
    Id concat(Id a, Id b);
    /// Nearest-neighbour 2x upsampling.
    Id upsample2x(Id x);
    /// 2x2 average pooling.
    Id avg_pool2x(Id x);
    /// weight (Out, In, 1) times x (In, 1, 1) plus bias (Out, 1, 1).
    Id linear(Id x, Id weight, Id bias);

    void backward(Id output, const Tensor<T>& output_grad);
    void clear();

private:
    struct Node {
        Tensor<T> value;
        Tensor<T> grad;
        std::function<void()> back;
    };

    Id push(Tensor<T> value, std::function<void()> back);
    Tensor<T>& grad_ref(Id id);

    std::vector<Node> nodes_;
    bool record_;
    bool consumed_ = false;
};

extern template class Tape<float>;
extern template class Tape<double>;

}  // namespace pivm::nn
