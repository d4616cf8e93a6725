#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <vector>

#include "pivm/grid.hpp"
#include "pivm/phantom.hpp"

namespace pivm::priors {

inline constexpr double kDefaultClipLo = -200.0;
inline constexpr double kDefaultClipHi = 300.0;
inline constexpr double kDefaultVariationScale = 150.0;

/// Dataset-global organ means. Class 0 (background) is pinned to 0 HU.
struct OrganMeanTable {
    double clip_lo = kDefaultClipLo;
    double clip_hi = kDefaultClipHi;
    std::vector<double> means;          // indexed by class id
    std::vector<std::uint64_t> counts;  // pixels that contributed to means[k]

    int n_classes() const { return static_cast<int>(means.size()); }
    bool present(int k) const;
    /// Throws ErrorKind::config for an absent class.
    double mean(int k) const;
};

/// Streaming accumulator for organ means. Sums are kept per class in double
/// precision; merging adds counts and sums, so partial results computed on
/// separate shards combine deterministically when merged in a fixed order.
class MeanAccumulator {
public:
    MeanAccumulator(double clip_lo, double clip_hi);

    void add(const HuImage& image, const LabelMap& labels);
    void merge(const MeanAccumulator& other);
    OrganMeanTable finish() const;

private:
    double lo_, hi_;
    std::vector<double> sums_;
    std::vector<std::uint64_t> counts_;
};

/// Clipping applies only to the accumulated values; the images are read-only.
OrganMeanTable compute_organ_means(std::span<const phantom::SlicePair> dataset, double clip_lo = kDefaultClipLo,
                                   double clip_hi = kDefaultClipHi, int threads = 1);

PriorMap build_prior_map(const LabelMap& labels, const OrganMeanTable& table);

VariationMap variation(const HuImage& image, const PriorMap& prior);
HuImage reconstruct(const PriorMap& prior, const VariationMap& v);

Field normalize_variation(const VariationMap& v, double scale = kDefaultVariationScale);
VariationMap denormalize_variation(const Field& f, double scale = kDefaultVariationScale);

void write_table(const std::filesystem::path& dir, const OrganMeanTable& table);
OrganMeanTable read_table(const std::filesystem::path& dir);

}  // namespace pivm::priors
