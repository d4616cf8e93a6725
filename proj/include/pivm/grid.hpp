#pragma once

#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

#include "pivm/error.hpp"

namespace pivm {

/// Row-major 2D grid. The tag keeps semantically different images (HU
/// intensities, priors, variations, network-unit fields) from mixing.
template <class T, class Tag>
struct Grid {
    using value_type = T;

    int width = 0;
    int height = 0;
    std::vector<T> data;

    Grid() = default;
    Grid(int w, int h, T fill = T{})
        : width(w), height(h), data(static_cast<std::size_t>(w) * static_cast<std::size_t>(h), fill) {}

    std::size_t size() const { return data.size(); }
    bool empty() const { return data.empty(); }

    T& at(int x, int y) { return data[static_cast<std::size_t>(y) * width + x]; }
    const T& at(int x, int y) const { return data[static_cast<std::size_t>(y) * width + x]; }

    T& operator[](std::size_t i) { return data[i]; }
    const T& operator[](std::size_t i) const { return data[i]; }

    template <class U, class V>
    bool same_shape(const Grid<U, V>& other) const {
        return width == other.width && height == other.height;
    }

    friend bool operator==(const Grid&, const Grid&) = default;
};

struct HuTag {};
struct LabelTag {};
struct PriorTag {};
struct VariationTag {};
struct FieldTag {};

/// CT intensities in Hounsfield units.
using HuImage = Grid<float, HuTag>;
/// Organ class IDs, 0 = background.
using LabelMap = Grid<std::uint16_t, LabelTag>;
/// Organ-mean intensity image; background is 0 HU.
using PriorMap = Grid<float, PriorTag>;
/// Residual image minus prior, in HU.
using VariationMap = Grid<float, VariationTag>;
/// Dimensionless map in network units (noisy samples, noise, conditioning).
using Field = Grid<float, FieldTag>;

template <class A, class B>
void require_same_shape(const A& a, const B& b, const std::string& what) {
    require(a.same_shape(b), ErrorKind::shape,
            what + ": dimension mismatch (" + std::to_string(a.width) + "x" + std::to_string(a.height) +
                " vs " + std::to_string(b.width) + "x" + std::to_string(b.height) + ")");
}

/// Reinterprets a grid's storage under a different tag.
template <class ToGrid, class T, class Tag>
ToGrid retag(Grid<T, Tag> g) {
    ToGrid out;
    out.width = g.width;
    out.height = g.height;
    out.data = std::move(g.data);
    return out;
}

}  // namespace pivm
