#pragma once

#include <array>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "pivm/nn/tape.hpp"

namespace pivm::nn {

/// Encoder-decoder with two stride-2 downsampling stages, a bottleneck, two
/// nearest-neighbour upsampling stages and channel-concatenated skips. Every
/// hidden conv is followed by group norm and SiLU. The timestep embedding, if
/// enabled, is projected to bottleneck width and added after the second
/// downsampling block. The final conv takes the last decoder features
/// concatenated with the network input.
struct UNetConfig {
    int in_channels = 3;
    int out_channels = 1;
    std::array<int, 3> widths{16, 32, 64};
    int groups = 4;
    bool time_embedding = true;
    int time_dim = 16;

    void validate() const;
    /// Canonical text used for the architecture hash in checkpoints.
    std::string describe() const;
};

template <class T>
struct ParamSet {
    std::vector<std::string> names;
    std::vector<Tensor<T>> tensors;

    std::size_t size() const { return tensors.size(); }
    std::size_t count() const;
    ParamSet zeros_like() const;
    /// this += other, elementwise; `other` may be empty (no-op).
    void accumulate(const ParamSet& other);
};

template <class T>
ParamSet<T> init_params(const UNetConfig& config, std::uint64_t seed);

/// Sinusoidal embedding: sin(t * f_i) then cos(t * f_i), f_i = 10000^(-i / (dim/2)).
template <class T>
Tensor<T> timestep_embedding(int t, int dim);

template <class T>
struct UNetGraph {
    typename Tape<T>::Id input = -1;
    typename Tape<T>::Id output = -1;
    std::vector<typename Tape<T>::Id> params;
};

/// Records the network on `tape`. Input spatial size must be divisible by 4.
template <class T>
UNetGraph<T> build_unet(Tape<T>& tape, const UNetConfig& config, const ParamSet<T>& params, Tensor<T> input,
                        std::optional<int> timestep);

/// Gradients of every parameter after tape.backward(); unused ones are zero.
template <class T>
ParamSet<T> collect_grads(Tape<T>& tape, const UNetGraph<T>& graph, const ParamSet<T>& params);

extern template struct ParamSet<float>;
extern template struct ParamSet<double>;

}  // namespace pivm::nn
