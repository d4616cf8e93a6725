#pragma once

#include <span>
#include <string>
#include <vector>

#include "pivm/config.hpp"
#include "pivm/metrics.hpp"
#include "pivm/pipeline.hpp"
#include "pivm/segdown.hpp"

namespace pivm::experiments {

phantom::PhantomConfig phantom_config(const config::RunConfig& cfg);
/// Dataset from the phantom.* keys, volumes drawn from {run.seed, "dataset"}.
phantom::PhantomDataset make_dataset(const config::RunConfig& cfg);
pipeline::GeneratorConfig generator_config(const config::RunConfig& cfg);
segdown::SegConfig seg_config(const config::RunConfig& cfg);

/// Test-split volume ids, at most `limit` of them (all if limit <= 0).
std::vector<int> test_volumes(const phantom::PhantomDataset& ds, int limit);

struct VolumeFidelity {
    int volume = 0;
    double ssim = 0.0;  // mean over slices of ssim(generated, ground truth)
    double fd = 0.0;    // FD-r between generated and real slices of the volume
    std::vector<HuImage> generated;
};

/// Regenerates every slice of each volume from its labels. Slice i of
/// volume v uses sample_key(key.child(v), i), so different generators see
/// the same noise.
std::vector<VolumeFidelity> fidelity(const pipeline::Generator& g, const phantom::PhantomDataset& ds,
                                     std::span<const int> volumes, StreamKey key,
                                     const metrics::FeatureExtractor& fx, int threads = 1);

std::string fidelity_csv(std::span<const std::string> methods,
                         std::span<const std::vector<VolumeFidelity>> results);

struct NamedGenerator {
    std::string name;
    const pipeline::Generator* generator;
};

struct SegSetup {
    segdown::SegConfig config;
    int budget = 500;       // slices per source
    int eval_volumes = 5;   // held-out volumes, 0 = all
    StreamKey key;          // synthesis streams
    int threads = 1;
};

/// Original source, then for each generator its generated and combined
/// sources. Generated slices reuse the label maps of the original slices.
std::vector<segdown::ExperimentResult> segmentation(const phantom::PhantomDataset& ds,
                                                    std::span<const NamedGenerator> generators, const SegSetup& setup);

struct Continuity {
    double adjacent = 0.0;  // mean MAE of slices i and i+1
    double permuted = 0.0;  // same, after shuffling the slice order
};

/// Per-volume continuity; the shuffle is drawn from `key`.
Continuity continuity(const std::vector<HuImage>& volume, StreamKey key);

struct PairedTest {
    std::size_t n = 0;
    double mean_diff = 0.0;  // mean of (b - a)
    double t = 0.0;
    double critical = 0.0;   // one-sided 95% Student t quantile, n - 1 dof
    bool significant = false;
};

/// One-sided paired t-test of mean(b) > mean(a).
PairedTest paired_greater(std::span<const double> a, std::span<const double> b);

}  // namespace pivm::experiments
