#pragma once

#include <cstddef>
#include <string>
#include <vector>

#include "pivm/error.hpp"

namespace pivm::nn {

/// Dense channel-major (C, H, W) tensor. Parameters reuse the layout:
/// conv kernels are (Cout, Cin, 9), biases (C, 1, 1), linear maps (Out, In, 1).
template <class T>
struct Tensor {
    int c = 0;
    int h = 0;
    int w = 0;
    std::vector<T> data;

    Tensor() = default;
    Tensor(int c_, int h_, int w_, T fill = T{})
        : c(c_), h(h_), w(w_), data(static_cast<std::size_t>(c_) * h_ * w_, fill) {}

    std::size_t numel() const { return data.size(); }
    std::size_t plane() const { return static_cast<std::size_t>(h) * w; }
    bool same_shape(const Tensor& o) const { return c == o.c && h == o.h && w == o.w; }
    std::string shape_string() const {
        return "(" + std::to_string(c) + "," + std::to_string(h) + "," + std::to_string(w) + ")";
    }

    T* channel(int k) { return data.data() + static_cast<std::size_t>(k) * plane(); }
    const T* channel(int k) const { return data.data() + static_cast<std::size_t>(k) * plane(); }

    friend bool operator==(const Tensor&, const Tensor&) = default;
};

template <class To, class From>
Tensor<To> cast(const Tensor<From>& t) {
    Tensor<To> out(t.c, t.h, t.w);
    for (std::size_t i = 0; i < t.numel(); ++i) out.data[i] = static_cast<To>(t.data[i]);
    return out;
}

}  // namespace pivm::nn
