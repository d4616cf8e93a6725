#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "pivm/grid.hpp"
#include "pivm/rng.hpp"

namespace pivm::phantom {

struct PhantomConfig {
    int image_size = 64;
    int n_organs = 8;
    double organ_mean_lo = -150.0;
    double organ_mean_hi = 250.0;
    double organ_texture_sd = 20.0;
    double background_hu = -80.0;
    double air_hu = -1000.0;
    double slice_drift = 0.03;
    std::uint64_t seed = 0;

    /// Throws ErrorKind::config when a field is out of range.
    void validate() const;
};

/// Per-class true mean intensities drawn from the config seed; index 0 is unused.
std::vector<double> true_means(const PhantomConfig& config);

struct SlicePair {
    HuImage image;
    LabelMap labels;
};

SlicePair gen_slice(const PhantomConfig& config, StreamKey key);

/// Slice 0 of gen_volume(config, n, key) equals gen_slice(config, key).
std::vector<SlicePair> gen_volume(const PhantomConfig& config, int n_slices, StreamKey key);

enum class Split { train, test };

const char* to_string(Split split);

struct SliceRecord {
    int volume = 0;
    int slice = 1;  // 1-based within its volume
    Split split = Split::train;
    StreamKey key;  // stream of the volume that produced the slice
};

struct PhantomDataset {
    PhantomConfig config;
    std::vector<SlicePair> slices;
    std::vector<SliceRecord> manifest;

    std::vector<int> volume_ids(Split split) const;
    /// Indices into `slices` of one volume, in slice order.
    std::vector<std::size_t> volume_slices(int volume) const;
    std::vector<std::size_t> split_slices(Split split) const;
};

PhantomDataset make_dataset(const PhantomConfig& config, int n_volumes, int slices_per_volume,
                            double split_fraction, StreamKey key);

/// Body-ellipse membership, shared by the generator and analysis code.
bool inside_body(int x, int y, int image_size);

}  // namespace pivm::phantom
