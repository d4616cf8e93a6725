#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <vector>

#include "pivm/grid.hpp"

namespace pivm::metrics {

struct SsimConfig {
    int window = 11;
    bool gaussian = true;  // false: uniform weights
    double sigma = 1.5;
    double k1 = 0.01;
    double k2 = 0.03;
    double dynamic_range = 2000.0;  // HU

    void validate() const;
};

/// Mean local SSIM over all windows that lie fully inside the image.
double ssim(const HuImage& a, const HuImage& b, const SsimConfig& config = {});

/// Fixed random conv feature stack for the FD-r score: three stages of
/// 3x3 conv + ReLU + 2x2 average pool (widths 16, 32, 64), then global
/// average pooling. Input HU are clamped to the display window [lo, hi] and
/// mapped linearly to [-1, 1].
class FeatureExtractor {
public:
    static constexpr int kDim = 64;

    explicit FeatureExtractor(std::uint64_t seed = 0x5eedf00dULL, double window_lo = -200.0, double window_hi = 300.0);

    /// Image sides must be multiples of 8.
    std::vector<double> features(const HuImage& image) const;

private:
    struct Stage {
        int cin, cout;
        std::vector<float> weight;  // (cout, cin, 9)
    };
    std::vector<Stage> stages_;
    double window_lo_;
    double window_hi_;
};

struct FrechetOptions {
    /// When a set has no more samples than dimensions, covariances are shrunk
    /// toward their scaled identity with this weight instead of failing.
    bool allow_shrinkage = true;
    double shrinkage = 0.1;
};

/// ||mu_a - mu_b||^2 + tr(Sa + Sb - 2 (Sa Sb)^{1/2}) with unbiased covariances.
double frechet_distance(std::span<const std::vector<double>> a, std::span<const std::vector<double>> b,
                        const FrechetOptions& options = {});

struct MaskTag {};
using Mask = Grid<std::uint8_t, MaskTag>;

Mask mask_of(const LabelMap& labels, int k);

/// 2|P & G| / (|P| + |G|); 1 when both are empty.
double dice(const LabelMap& pred, const LabelMap& gt, int k);
/// |P & G| / |P | G|; 1 when both are empty.
double iou(const LabelMap& pred, const LabelMap& gt, int k);
/// Means over foreground classes 1..n_classes-1 present in pred or gt; 1 if none.
double mean_dice(const LabelMap& pred, const LabelMap& gt, int n_classes);
double miou(const LabelMap& pred, const LabelMap& gt, int n_classes);

/// Mask pixels with at least one 4-neighbour outside the mask (image border counts as outside).
std::vector<std::pair<int, int>> boundary(const Mask& m);

/// Symmetric Hausdorff distance between mask boundaries in pixels; nullopt
/// (reported as "undefined-metric") if either mask is empty.
std::optional<double> hausdorff(const Mask& pred, const Mask& gt);
/// Mean of the two directed mean boundary distances; nullopt if either mask is empty.
std::optional<double> avg_surface_distance(const Mask& pred, const Mask& gt);

}  // namespace pivm::metrics
