#pragma once

#include <functional>
#include <optional>

#include "pivm/grid.hpp"
#include "pivm/nn/unet.hpp"

namespace pivm {

/// Conditioning channels fed to the denoiser next to the noisy map, in this
/// order: label (class id / n_classes), prior (optional), previous slice
/// (optional; present exactly when the model was trained in volume mode).
struct Conditioning {
    Field label;
    std::optional<Field> prior;
    std::optional<Field> previous;

    int channels() const { return 1 + (prior ? 1 : 0) + (previous ? 1 : 0); }
    /// Throws ErrorKind::shape unless every channel is w x h and finite.
    void validate(int w, int h) const;
};

/// Output of a recorded forward pass. `backward` maps dLoss/dOutput to
/// parameter gradients; models without parameters return an empty set.
struct Recorded {
    Field output;
    std::function<nn::ParamSet<float>(const Field& output_grad)> backward;
};

/// Noise predictor eps(x_t, t, cond).
class EpsModel {
public:
    virtual ~EpsModel() = default;
    virtual Field predict(const Field& noisy, int t, const Conditioning& cond) const = 0;
    virtual Recorded record(const Field& noisy, int t, const Conditioning& cond) const = 0;
};

}  // namespace pivm
