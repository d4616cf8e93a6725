#pragma once

#include <filesystem>
#include <functional>
#include <span>
#include <vector>

#include "pivm/denoiser.hpp"
#include "pivm/phantom.hpp"
#include "pivm/priors.hpp"

namespace pivm::pipeline {

/// Dataset directory: images.tns (N x H x W float32 HU), labels.tns
/// (N x H x W uint16) and manifest.txt (header record with the phantom
/// config and `extra`, then one record per slice).
void write_dataset(const std::filesystem::path& dir, const phantom::PhantomDataset& ds,
                   const storage::Record& extra = {});
phantom::PhantomDataset read_dataset(const std::filesystem::path& dir);

/// Merges organ ids 1..n_organs into 1..target with k -> ceil(k * target / n_organs).
LabelMap coarsen_labels(const LabelMap& labels, int n_organs, int target);

struct GeneratorConfig {
    diffusion::Mode mode = diffusion::Mode::variation;
    int n_organs = 8;       // organ classes in the data
    int label_organs = 8;   // organ classes seen by the generator
    bool volume = false;    // previous-slice conditioning channel
    int T = 200;
    double beta_start = 5e-4;
    double beta_end = 0.1;
    bool clip_x0 = true;
    double clip_lo = priors::kDefaultClipLo;  // prior-construction window
    double clip_hi = priors::kDefaultClipHi;
    double variation_scale = priors::kDefaultVariationScale;
    double image_scale = 400.0;
    denoiser::TrainConfig train;

    void validate() const;
};

/// A trained denoiser with everything needed to synthesize slices.
struct Generator {
    GeneratorConfig config;
    priors::OrganMeanTable table;  // at label_organs granularity
    diffusion::NoiseSchedule schedule;
    denoiser::TrainState state;
    double x0_lo = -1.0;  // clamp range for clean estimates, from the training targets
    double x0_hi = 1.0;

    diffusion::SignalCodec codec() const;
    diffusion::ConditioningSpec conditioning() const;
    diffusion::SampleOptions sampling() const;

    LabelMap condition_labels(const LabelMap& labels) const;
    PriorMap prior(const LabelMap& labels) const;

    /// One slice for the given (full-granularity) label map. Volume-mode
    /// generators take the previous slice in HU, or nullptr for a zero channel.
    HuImage generate(const LabelMap& labels, StreamKey key, const HuImage* previous = nullptr) const;
    /// Sequential slices; requires a volume-mode generator.
    std::vector<HuImage> generate_volume(const std::vector<LabelMap>& labels, StreamKey key,
                                         bool noise_scale = false) const;
};

/// Encoded training examples for the dataset's train split. In volume mode
/// each slice is paired with its ground-truth predecessor (zero channel for
/// slice 1).
std::vector<diffusion::TrainingExample> make_examples(const phantom::PhantomDataset& ds, const Generator& g);

/// Organ means over the train split at the generator's label granularity.
priors::OrganMeanTable train_table(const phantom::PhantomDataset& ds, const GeneratorConfig& config);

/// Untrained generator: table from the train split unless `table` is given.
Generator prepare_generator(const phantom::PhantomDataset& ds, const GeneratorConfig& config,
                            const priors::OrganMeanTable* table = nullptr);

/// Trains `g` to g.config.train.epochs, calling `on_epoch` after each epoch.
void train_generator(Generator& g, const phantom::PhantomDataset& ds,
                     const std::function<void(const Generator&)>& on_epoch = {});

/// Checkpoint plus priors/ subdirectory; `extra` entries join the generator record.
void save_generator(const std::filesystem::path& dir, const Generator& g, const storage::Record& extra = {});
Generator load_generator(const std::filesystem::path& dir);

/// Synthetic labeled slices: label maps of `source` with images generated
/// from sample_key(key, i) for slice i.
std::vector<phantom::SlicePair> synthesize(const Generator& g, std::span<const phantom::SlicePair> source,
                                           StreamKey key, int threads = 1);

}  // namespace pivm::pipeline
