#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <span>
#include <vector>

#include "pivm/diffusion.hpp"
#include "pivm/nn/adam.hpp"
#include "pivm/nn/unet.hpp"
#include "pivm/storage.hpp"

namespace pivm::denoiser {

/// U-Net noise predictor. Input channels: noisy map, then the conditioning
/// channels in Conditioning order.
class Denoiser final : public EpsModel {
public:
    Denoiser(nn::UNetConfig config, nn::ParamSet<float> params);
    static Denoiser initialize(const nn::UNetConfig& config, std::uint64_t seed);

    const nn::UNetConfig& config() const { return config_; }
    const nn::ParamSet<float>& params() const { return params_; }
    nn::ParamSet<float>& params() { return params_; }

    Field predict(const Field& noisy, int t, const Conditioning& cond) const override;
    Recorded record(const Field& noisy, int t, const Conditioning& cond) const override;

private:
    nn::Tensor<float> assemble(const Field& noisy, const Conditioning& cond) const;

    nn::UNetConfig config_;
    nn::ParamSet<float> params_;
};

/// Config for a denoiser taking 1 + `conditioning_channels` inputs.
nn::UNetConfig denoiser_config(int conditioning_channels);

struct TrainConfig {
    int epochs = 30;
    int batch_size = 16;
    nn::AdamHyper adam;
    std::uint64_t seed = 0;
    int threads = 1;
};

struct EpochLog {
    int epoch = 0;  // 1-based
    double mean_loss = 0.0;
    double lr = 0.0;
};

struct TrainState {
    Denoiser model;
    nn::AdamState adam;
    int epochs_done = 0;
    std::vector<EpochLog> log;
};

TrainState start_training(const nn::UNetConfig& config, const TrainConfig& train);

/// Runs epochs until `state.epochs_done` reaches `until_epoch` (capped at
/// train.epochs). Each epoch shuffles the data with a stream derived from
/// (seed, epoch); step k of epoch e draws its noise from (seed, e, k), so a
/// resumed run continues exactly where an uninterrupted one would.
/// `on_epoch` runs after every epoch, e.g. to write a checkpoint.
void train_until(TrainState& state, std::span<const diffusion::TrainingExample> data,
                 const diffusion::NoiseSchedule& schedule, const TrainConfig& train, int until_epoch,
                 const std::function<void(const TrainState&)>& on_epoch = {});

TrainState train(std::span<const diffusion::TrainingExample> data, const diffusion::NoiseSchedule& schedule,
                 const nn::UNetConfig& config, const TrainConfig& train);

std::string log_csv(const std::vector<EpochLog>& log);

/// Checkpoint directory: one TensorFile per parameter and per Adam moment,
/// manifest.txt (architecture, hash, epoch, optimizer state, losses, then
/// `extra` as a second record) and log.csv.
void save_checkpoint(const std::filesystem::path& dir, const TrainState& state, const storage::Record& extra = {});

struct Checkpoint {
    TrainState state;
    storage::Record extra;
};

/// Rejects missing files, architecture-hash mismatches and shape mismatches
/// with ErrorKind::corruption.
Checkpoint load_checkpoint(const std::filesystem::path& dir);

}  // namespace pivm::denoiser
