#pragma once

#include <vector>

#include "pivm/diffusion.hpp"

namespace pivm::volume {

struct VolumeRequest {
    std::vector<LabelMap> labels;  // s^(1..N)
    std::vector<PriorMap> priors;  // I^(1..N)
    StreamKey key;                 // slice i (0-based) samples with key.child(i)
    /// Scale x_T of slice i >= 2 by the standard deviation of the previous
    /// generated signal inside the body; off by default.
    bool noise_scale = false;
};

struct VolumeSettings {
    diffusion::SignalCodec codec;
    diffusion::ConditioningSpec conditioning;  // previous_slice must be set
    diffusion::SampleOptions sampling;
};

/// Stream used for 2D image `index` and for slice `index` of a volume.
StreamKey sample_key(StreamKey key, std::size_t index);

/// Slice 1 is conditioned on a zero previous-slice channel, slice t >= 2 on
/// the generated slice t - 1. Each slice is decoded to HU with the codec.
std::vector<HuImage> generate_volume(const EpsModel& model, const VolumeRequest& request,
                                     const diffusion::NoiseSchedule& schedule, const VolumeSettings& settings);

enum class Plane { coronal, sagittal };

Plane parse_plane(const std::string& s);

/// coronal: out(x, j) = volume[j](x, index), a fixed row across slices.
/// sagittal: out(y, j) = volume[j](index, y), a fixed column across slices.
HuImage reslice(const std::vector<HuImage>& volume, Plane plane, int index);

}  // namespace pivm::volume
