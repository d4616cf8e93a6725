#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "pivm/nn/adam.hpp"
#include "pivm/nn/unet.hpp"
#include "pivm/phantom.hpp"

namespace pivm::segdown {

struct SegConfig {
    int n_classes = 9;
    int epochs = 10;
    int batch_size = 8;
    nn::AdamHyper adam{1e-3, 0.9, 0.99, 1e-8, 20};
    std::uint64_t seed = 0;
    int threads = 1;
    double input_scale = 400.0;  // network input = HU / input_scale

    void validate() const;
};

/// Same encoder-decoder as the denoiser, one input channel, one logit
/// channel per class, no time embedding.
struct Segmenter {
    nn::UNetConfig config;
    nn::ParamSet<float> params;
    double input_scale = 400.0;
};

nn::UNetConfig segmenter_config(int n_classes);
Segmenter init_segmenter(const SegConfig& config);

nn::Tensor<float> logits(const Segmenter& seg, const HuImage& image);

/// Per-pixel argmax over classes; ties go to the lower class id.
LabelMap argmax(const nn::Tensor<float>& logits);
LabelMap predict(const Segmenter& seg, const HuImage& image);

struct CrossEntropy {
    double loss = 0.0;            // mean over pixels
    nn::Tensor<float> grad;       // d loss / d logits, scaled by `weight`
};

/// Softmax cross-entropy against `labels`; the gradient is multiplied by `weight`.
CrossEntropy cross_entropy(const nn::Tensor<float>& logits, const LabelMap& labels, double weight = 1.0);

/// Adam on mean per-pixel cross-entropy. Batches are shuffled per epoch from
/// (seed, epoch); gradients are summed in sample order. `epoch_losses`, if
/// given, receives the mean loss of each epoch.
Segmenter train_segmenter(std::span<const phantom::SlicePair> data, const SegConfig& config,
                          std::vector<double>* epoch_losses = nullptr);

/// Averages over evaluation slices. Dice and mIoU use metrics::mean_dice and
/// metrics::miou. HD and ASD are averaged over (slice, class) pairs where the
/// class is in the ground truth; a class missing from the prediction makes
/// that pair undefined and is counted instead.
struct SegScores {
    double dice = 0.0;
    double miou = 0.0;
    std::optional<double> hd;
    std::optional<double> asd;
    int undefined_pairs = 0;
    int defined_pairs = 0;
};

SegScores evaluate(const Segmenter& seg, std::span<const phantom::SlicePair> eval, int n_classes);

enum class Source { original, generated, combined };

Source parse_source(const std::string& s);
const char* to_string(Source s);

struct SegExperiment {
    Source source = Source::original;
    std::string method = "real";  // generator label in reports, e.g. pivm or cddpm
    SegConfig config;
};

struct ExperimentData {
    std::vector<phantom::SlicePair> original;   // real training slices
    std::vector<phantom::SlicePair> generated;  // synthetic slices with their conditioning labels
    std::vector<phantom::SlicePair> eval;       // held-out real slices
    std::vector<int> original_volumes;
    std::vector<int> generated_volumes;         // volumes whose labels conditioned the synthesis
    std::vector<int> eval_volumes;
};

struct ExperimentResult {
    Source source;
    std::string method;
    std::size_t train_slices = 0;
    SegScores scores;
};

/// Trains on the slices selected by the source (combined = original followed
/// by generated) and evaluates on data.eval. Fails with ErrorKind::config if
/// evaluation volumes overlap training volumes or generated slices are needed
/// but absent.
ExperimentResult run_experiment(const SegExperiment& experiment, const ExperimentData& data);

/// CSV with header method,source,metric,value; undefined cells read "undefined-metric".
std::string report_csv(std::span<const ExperimentResult> results);

}  // namespace pivm::segdown
