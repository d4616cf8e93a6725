#pragma once

#include <span>
#include <string>
#include <vector>

#include "pivm/grid.hpp"
#include "pivm/model.hpp"
#include "pivm/rng.hpp"

namespace pivm::diffusion {

/// variation: diffuse x - I (PIVM). full_image: diffuse x itself with label-only
/// conditioning (the CDDPM baseline).
enum class Mode { variation, full_image };

Mode parse_mode(const std::string& s);
const char* to_string(Mode m);

/// Tables are indexed by step t = 0..T; entry 0 holds the t = 0 convention
/// (beta = 0, alpha_bar = 1).
struct NoiseSchedule {
    int T = 0;
    std::vector<double> beta;
    std::vector<double> alpha;
    std::vector<double> alpha_bar;
    std::vector<double> sqrt_alpha_bar;
    std::vector<double> sqrt_one_minus_alpha_bar;
    /// beta_t * (1 - alpha_bar_{t-1}) / (1 - alpha_bar_t)
    std::vector<double> posterior_variance;
};

NoiseSchedule linear_schedule(int T, double beta_start = 1e-4, double beta_end = 0.02);

/// x_t = sqrt(abar_t) x0 + sqrt(1 - abar_t) eps, for 0 <= t <= T.
Field forward_sample(const Field& x0, int t, const Field& eps, const NoiseSchedule& s);

/// One ancestral step; `z` is required for t > 1 and ignored at t = 1.
Field reverse_step(const Field& x_t, int t, const Field& eps_hat, const NoiseSchedule& s, const Field* z);

Field standard_normal_field(int w, int h, StreamKey key);

struct TrainingExample {
    Field target;  // clean signal in network units
    Conditioning cond;
};

struct LossResult {
    double loss = 0.0;
    nn::ParamSet<float> grads;  // empty for parameter-free models
};

/// Mean over batch and pixels of (eps - eps_hat)^2 with t ~ U{1..T} and eps ~ N(0, I)
/// drawn from key.child(i) for example i; gradients are summed in example order,
/// so the result is independent of `threads`.
LossResult training_loss(const EpsModel& model, std::span<const TrainingExample> batch, const NoiseSchedule& s,
                         StreamKey key, int threads = 1);

struct SampleOptions {
    /// Standard deviation of x_T.
    double initial_noise_scale = 1.0;
    /// If set, each step clamps the implied clean estimate
    /// x0 = (x_t - sqrt(1 - abar_t) eps_hat) / sqrt(abar_t) to [lo, hi] and
    /// re-derives eps_hat from it before the reverse step. Unclamped
    /// estimates leave the step unchanged.
    bool clip_x0 = false;
    double clip_lo = -1.0;
    double clip_hi = 1.0;
};

/// Ancestral sampling from x_T ~ N(0, I) down to step 1. Returns the clean
/// signal in network units; see SignalCodec::decode for HU.
Field sample(const EpsModel& model, const Conditioning& cond, const NoiseSchedule& s, StreamKey key,
             const SampleOptions& options = {});

/// eps_hat consistent with clamping its implied x0 estimate to [lo, hi].
Field clip_eps(const Field& x_t, int t, const Field& eps_hat, const NoiseSchedule& s, double lo, double hi);

/// Mapping between HU images and network-unit signals for each mode.
struct SignalCodec {
    Mode mode = Mode::variation;
    double variation_scale = 150.0;
    double image_scale = 400.0;

    /// variation: (x - prior) / variation_scale; full_image: x / image_scale.
    Field encode(const HuImage& image, const PriorMap& prior) const;
    /// Inverse of encode.
    HuImage decode(const Field& signal, const PriorMap& prior) const;
};

struct ConditioningSpec {
    Mode mode = Mode::variation;
    int n_classes = 9;             // label channel = class id / n_classes
    double image_scale = 400.0;    // prior and previous-slice channels = HU / image_scale
    bool previous_slice = false;   // volume mode
};

/// The prior channel is present only in variation mode. In volume mode a null
/// `previous` yields an all-zero previous-slice channel.
Conditioning make_conditioning(const ConditioningSpec& spec, const LabelMap& labels, const PriorMap& prior,
                               const HuImage* previous);

}  // namespace pivm::diffusion
