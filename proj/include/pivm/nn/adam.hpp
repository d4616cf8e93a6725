#pragma once

#include <cstdint>
#include <vector>

#include "pivm/nn/unet.hpp"

namespace pivm::nn {

struct AdamHyper {
    double lr = 1e-4;
    double beta1 = 0.9;
    double beta2 = 0.99;
    double eps = 1e-8;
    /// Learning rate halves every this many epochs; 0 disables the decay.
    int halving_epochs = 20;

    double lr_at(int epoch) const;
};

struct AdamState {
    AdamHyper hyper;
    std::vector<std::vector<float>> m;
    std::vector<std::vector<float>> v;
    std::int64_t step = 0;
};

AdamState make_adam(const ParamSet<float>& params, const AdamHyper& hyper);

/// Bias-corrected Adam update at learning rate hyper.lr_at(epoch).
/// Non-finite gradients raise ErrorKind::divergence before anything changes.
void adam_step(ParamSet<float>& params, const ParamSet<float>& grads, AdamState& state, int epoch);

}  // namespace pivm::nn
