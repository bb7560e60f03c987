#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "stal/model.hpp"
#include "stal/skeleton.hpp"

namespace stal {

struct TrainConfig {
  std::size_t epochs = 100;
  double learning_rate = 1e-4;
  std::size_t batch_size = 32;
  double sigma = 0.1;
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.999;
  double adam_epsilon = 1e-8;
  std::uint64_t seed = 0;
  std::size_t checkpoint_every = 0;  // 0: final checkpoint only
  double grad_clip = 10.0;           // global L2 norm; 0 disables
  double val_fraction = 0.2;
  std::size_t stride = 1;

  void validate() const;
};

struct EpochStats {
  std::size_t epoch = 0;  // 1-based
  double train_mse = 0.0;
  std::optional<double> val_mse;
  double seconds = 0.0;
};

struct TrainReport {
  std::vector<EpochStats> epochs;
  std::optional<double> initial_val_mse;
  std::vector<std::string> train_clips;
  std::vector<std::string> val_clips;
  std::vector<std::string> skipped_clips;  // shorter than the window
  std::filesystem::path final_checkpoint;
};

struct AdamState {
  std::vector<std::vector<double>> m;
  std::vector<std::vector<double>> v;
};

/// mean((pred - target)^2).
Tensor mse_loss(const Tensor& pred, const Tensor& target);

/// One bias-corrected Adam update (t >= 1) from the gradients currently held
/// by the parameters. Throws a numeric error naming the first parameter with a
/// non-finite gradient; nothing is updated in that case.
void adam_step(ModelParams& params, AdamState& state, const TrainConfig& config, std::size_t t);

/// Scales all gradients so their global L2 norm is at most max_norm. Returns
/// the norm before clipping.
double clip_gradients(ModelParams& params, double max_norm);

struct ClipSplit {
  std::vector<std::size_t> train;
  std::vector<std::size_t> validation;
};

/// Holds out ceil(fraction * n) clips, those with the smallest FNV-1a hash of
/// clip_id (ties by id). Never holds out every clip.
ClipSplit split_clips(const std::vector<PoseSequence>& clips, double fraction);

/// Denoising MSE of the model on `clean` windows with seeded noise added.
double denoising_mse(const ModelParams& params, const WindowBatch& clean, const std::vector<Tensor>& basis,
                     double sigma, std::uint64_t seed, std::size_t batch_size = 256);
/// The same harness with the identity map as the denoiser (output = noisy input).
double identity_mse(const WindowBatch& clean, double sigma, std::uint64_t seed);

/// Normalized clips whose length is at least `window`, windowed and concatenated.
WindowBatch build_windows(const std::vector<PoseSequence>& clips, const std::vector<std::size_t>& which,
                          std::size_t window, std::size_t stride, std::vector<std::string>* skipped = nullptr);

struct TrainOptions {
  std::filesystem::path checkpoint;  // final checkpoint; periodic ones get a .epochN suffix
  std::filesystem::path telemetry;   // epoch,train_mse,val_mse,seconds
  std::function<void(const EpochStats&)> on_epoch;
};

/// Seed streams used by train(); derive_seed(seed, {stream, epoch, batch}).
enum SeedStream : std::uint64_t { kShuffleStream = 1, kNoiseStream = 2, kValidationStream = 3 };

/// Denoising pre-training. Per epoch: shuffle the training windows, then per
/// mini-batch add fresh noise, reconstruct, MSE against the clean windows,
/// backward, clip and take an Adam step.
std::pair<ModelParams, TrainReport> train(const std::vector<PoseSequence>& data, const SkeletonGraph& graph,
                                          const ModelConfig& model_config, const TrainConfig& config,
                                          const TrainOptions& options = {});

struct GradcheckResult {
  double max_rel_error = 0.0;
  std::string worst_parameter;
  std::size_t checked = 0;
};

/// Every parameter element of a randomly initialised model (attention and bias
/// terms included) against central differences of the MSE loss on a path graph.
GradcheckResult model_gradcheck(const ModelConfig& config, std::size_t batch, std::uint64_t seed, double h = 1e-5);

}  // namespace stal
