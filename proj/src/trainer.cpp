#include "stal/trainer.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <fstream>
#include <numeric>
#include <random>

#include "stal/csv.hpp"
#include "stal/error.hpp"
#include "stal/seed.hpp"

namespace stal {

void TrainConfig::validate() const {
  if (epochs < 1) throw config_error("train.epochs must be >= 1");
  if (!(learning_rate > 0.0) || !std::isfinite(learning_rate)) throw config_error("train.lr must be > 0");
  if (batch_size < 1) throw config_error("train.batch_size must be >= 1");
  if (!(sigma >= 0.0) || !std::isfinite(sigma)) throw config_error("train.sigma must be >= 0");
  if (!(adam_beta1 >= 0.0 && adam_beta1 < 1.0)) throw config_error("train.beta1 must be in [0, 1)");
  if (!(adam_beta2 >= 0.0 && adam_beta2 < 1.0)) throw config_error("train.beta2 must be in [0, 1)");
  if (!(adam_epsilon > 0.0)) throw config_error("train.epsilon must be > 0");
  if (!(grad_clip >= 0.0)) throw config_error("train.grad_clip must be >= 0");
  if (!(val_fraction >= 0.0 && val_fraction < 1.0)) throw config_error("train.val_fraction must be in [0, 1)");
  if (stride < 1) throw config_error("train.stride must be >= 1");
}

Tensor mse_loss(const Tensor& pred, const Tensor& target) {
  if (pred.shape() != target.shape()) {
    throw config_error("mse_loss: shape mismatch " + shape_str(pred.shape()) + " vs " + shape_str(target.shape()));
  }
  Tensor d = sub(pred, target);
  return mean(mul(d, d));
}

void adam_step(ModelParams& params, AdamState& state, const TrainConfig& config, std::size_t t) {
  if (t < 1) throw config_error("adam_step: step index starts at 1");
  auto named = params.named();
  if (state.m.size() != named.size()) {
    state.m.assign(named.size(), {});
    state.v.assign(named.size(), {});
    for (std::size_t i = 0; i < named.size(); ++i) {
      state.m[i].assign(named[i].tensor.size(), 0.0);
      state.v[i].assign(named[i].tensor.size(), 0.0);
    }
  }
  for (const auto& [name, tensor] : named) {
    if (!tensor.has_grad()) continue;
    for (double g : tensor.grad()) {
      if (!std::isfinite(g)) throw numeric_error("non-finite gradient in parameter '" + name + "'");
    }
  }
  const double b1 = config.adam_beta1, b2 = config.adam_beta2;
  const double c1 = 1.0 - std::pow(b1, static_cast<double>(t));
  const double c2 = 1.0 - std::pow(b2, static_cast<double>(t));
  for (std::size_t i = 0; i < named.size(); ++i) {
    Tensor& p = named[i].tensor;
    if (!p.has_grad()) continue;
    auto g = p.grad();
    auto theta = p.mutable_data();
    auto& m = state.m[i];
    auto& v = state.v[i];
    for (std::size_t e = 0; e < theta.size(); ++e) {
      m[e] = b1 * m[e] + (1.0 - b1) * g[e];
      v[e] = b2 * v[e] + (1.0 - b2) * g[e] * g[e];
      const double mhat = m[e] / c1;
      const double vhat = v[e] / c2;
      theta[e] -= config.learning_rate * mhat / (std::sqrt(vhat) + config.adam_epsilon);
    }
  }
}

double clip_gradients(ModelParams& params, double max_norm) {
  auto named = params.named();
  double sq = 0.0;
  for (const auto& t : named)
    if (t.tensor.has_grad())
      for (double g : t.tensor.grad()) sq += g * g;
  const double norm = std::sqrt(sq);
  if (max_norm > 0.0 && norm > max_norm) {
    const double f = max_norm / norm;
    for (auto& t : named)
      if (t.tensor.has_grad())
        for (double& g : t.tensor.mutable_grad()) g *= f;
  }
  return norm;
}

ClipSplit split_clips(const std::vector<PoseSequence>& clips, double fraction) {
  const std::size_t n = clips.size();
  std::size_t n_val = static_cast<std::size_t>(std::ceil(fraction * static_cast<double>(n) - 1e-12));
  n_val = std::min(n_val, n > 0 ? n - 1 : 0);
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  auto key = [&](std::size_t i) {
    const auto& id = clips[i].clip_id;
    return std::make_pair(fnv1a(id.data(), id.size()), id);
  };
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return key(a) < key(b); });
  ClipSplit s;
  s.validation.assign(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(n_val));
  s.train.assign(order.begin() + static_cast<std::ptrdiff_t>(n_val), order.end());
  std::sort(s.validation.begin(), s.validation.end());
  std::sort(s.train.begin(), s.train.end());
  return s;
}

WindowBatch build_windows(const std::vector<PoseSequence>& clips, const std::vector<std::size_t>& which,
                          std::size_t window, std::size_t stride, std::vector<std::string>* skipped) {
  std::vector<WindowBatch> parts;
  for (std::size_t i : which) {
    if (clips[i].num_frames() < window) {
      if (skipped) skipped->push_back(clips[i].clip_id);
      continue;
    }
    parts.push_back(partition_windows(normalize_poses(clips[i]), window, stride));
  }
  if (parts.empty()) return WindowBatch{Tensor(), {}, window};
  return concat_batches(parts);
}

double denoising_mse(const ModelParams& params, const WindowBatch& clean, const std::vector<Tensor>& basis,
                     double sigma, std::uint64_t seed, std::size_t batch_size) {
  if (clean.size() == 0) throw data_error("denoising_mse: no windows");
  NoGradGuard no_grad;
  const WindowBatch noisy = add_gaussian_noise(clean, sigma, seed);
  double total = 0.0;
  for (std::size_t begin = 0; begin < clean.size(); begin += batch_size) {
    const std::size_t end = std::min(clean.size(), begin + batch_size);
    Tensor x = slice(noisy.windows, 0, begin, end);
    Tensor y = slice(clean.windows, 0, begin, end);
    Tensor r = forward(params, x, basis).reconstruction;
    total += mse_loss(r, y).item() * static_cast<double>(end - begin);
  }
  return total / static_cast<double>(clean.size());
}

double identity_mse(const WindowBatch& clean, double sigma, std::uint64_t seed) {
  if (clean.size() == 0) throw data_error("identity_mse: no windows");
  NoGradGuard no_grad;
  const WindowBatch noisy = add_gaussian_noise(clean, sigma, seed);
  return mse_loss(noisy.windows, clean.windows).item();
}

std::pair<ModelParams, TrainReport> train(const std::vector<PoseSequence>& data, const SkeletonGraph& graph,
                                          const ModelConfig& model_config, const TrainConfig& config,
                                          const TrainOptions& options) {
  model_config.validate();
  config.validate();
  if (data.empty()) throw data_error("train: no clips");
  if (graph.num_joints != model_config.num_joints) {
    throw config_error("skeleton has " + std::to_string(graph.num_joints) + " joints, model expects " +
                       std::to_string(model_config.num_joints));
  }
  for (const auto& clip : data) {
    if (clip.num_joints != model_config.num_joints || clip.channels != model_config.in_channels) {
      throw data_error(clip.clip_id + ": pose layout does not match the model (" + std::to_string(clip.num_joints) +
                       " joints x " + std::to_string(clip.channels) + " channels)");
    }
  }

  TrainReport report;
  const ClipSplit split = split_clips(data, config.val_fraction);
  for (std::size_t i : split.train) report.train_clips.push_back(data[i].clip_id);
  for (std::size_t i : split.validation) report.val_clips.push_back(data[i].clip_id);

  const std::size_t W = model_config.window_size;
  const WindowBatch train_windows = build_windows(data, split.train, W, config.stride, &report.skipped_clips);
  const WindowBatch val_windows = build_windows(data, split.validation, W, config.stride, &report.skipped_clips);
  if (train_windows.size() == 0) throw data_error("train: no training clip is at least " + std::to_string(W) + " frames");

  const auto basis = chebyshev_basis(scaled_laplacian(graph), model_config.cheb_k);
  ModelParams params = init_params(model_config);
  AdamState adam;
  const std::uint64_t val_seed = derive_seed(config.seed, {kValidationStream});
  if (val_windows.size() > 0) report.initial_val_mse = denoising_mse(params, val_windows, basis, config.sigma, val_seed);

  std::ofstream telemetry;
  if (!options.telemetry.empty()) {
    telemetry.open(options.telemetry);
    if (!telemetry) throw data_error("cannot write " + options.telemetry.string());
    telemetry << "epoch,train_mse,val_mse,seconds\n";
  }

  std::size_t step = 0;
  for (std::size_t epoch = 1; epoch <= config.epochs; ++epoch) {
    const auto t0 = std::chrono::steady_clock::now();
    const WindowBatch shuffled = shuffle_windows(train_windows, derive_seed(config.seed, {kShuffleStream, epoch}));
    double loss_sum = 0.0;
    std::size_t batch_index = 0;
    for (std::size_t begin = 0; begin < shuffled.size(); begin += config.batch_size, ++batch_index) {
      const std::size_t end = std::min(shuffled.size(), begin + config.batch_size);
      WindowBatch clean;
      {
        NoGradGuard no_grad;
        clean.windows = slice(shuffled.windows, 0, begin, end);
      }
      clean.window_size = W;
      clean.origins.assign(shuffled.origins.begin() + static_cast<std::ptrdiff_t>(begin),
                           shuffled.origins.begin() + static_cast<std::ptrdiff_t>(end));
      const WindowBatch noisy =
          add_gaussian_noise(clean, config.sigma, derive_seed(config.seed, {kNoiseStream, epoch, batch_index}));

      params.zero_grad();
      Tensor loss = mse_loss(forward(params, noisy.windows, basis).reconstruction, clean.windows);
      const double value = loss.item();
      if (!std::isfinite(value)) {
        throw numeric_error("non-finite loss at epoch " + std::to_string(epoch) + ", batch starting with window " +
                            clean.origins.front().clip_id + "@" + std::to_string(clean.origins.front().start_frame));
      }
      loss.backward();
      clip_gradients(params, config.grad_clip);
      adam_step(params, adam, config, ++step);
      loss_sum += value * static_cast<double>(end - begin);
    }

    EpochStats stats;
    stats.epoch = epoch;
    stats.train_mse = loss_sum / static_cast<double>(shuffled.size());
    if (val_windows.size() > 0) stats.val_mse = denoising_mse(params, val_windows, basis, config.sigma, val_seed);
    stats.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    report.epochs.push_back(stats);
    if (telemetry.is_open()) {
      telemetry << epoch << ',' << csv::format_double(stats.train_mse) << ','
                << (stats.val_mse ? csv::format_double(*stats.val_mse) : "") << ','
                << csv::format_double(stats.seconds) << '\n';
      telemetry.flush();
    }
    if (options.on_epoch) options.on_epoch(stats);
    if (!options.checkpoint.empty() && config.checkpoint_every > 0 && epoch % config.checkpoint_every == 0 &&
        epoch != config.epochs) {
      std::filesystem::path p = options.checkpoint;
      p += ".epoch" + std::to_string(epoch);
      save_params(params, p);
    }
  }
  if (!options.checkpoint.empty()) {
    save_params(params, options.checkpoint);
    report.final_checkpoint = options.checkpoint;
  }
  return {std::move(params), std::move(report)};
}

GradcheckResult model_gradcheck(const ModelConfig& config, std::size_t batch, std::uint64_t seed, double h) {
  config.validate();
  if (batch < 1) throw config_error("gradcheck batch must be >= 1");
  ModelParams params = init_params(config);
  std::mt19937_64 rng(derive_seed(seed, {0x6c}));
  std::uniform_real_distribution<double> u(-0.5, 0.5);
  for (auto& t : params.named())
    for (double& v : t.tensor.mutable_data()) v = u(rng);

  std::vector<std::pair<std::size_t, std::size_t>> edges;
  for (std::size_t j = 0; j + 1 < config.num_joints; ++j) edges.push_back({j, j + 1});
  const auto basis = chebyshev_basis(scaled_laplacian(make_graph(config.num_joints, edges)), config.cheb_k);

  const Shape shape{batch, config.window_size, config.num_joints, config.in_channels};
  std::vector<double> xv(shape_size(shape)), yv(shape_size(shape));
  for (double& v : xv) v = u(rng);
  for (double& v : yv) v = u(rng);
  const Tensor x(shape, xv), y(shape, yv);

  auto loss_of = [&] { return mse_loss(forward(params, x, basis).reconstruction, y); };
  params.zero_grad();
  loss_of().backward();

  GradcheckResult result;
  NoGradGuard no_grad;
  for (auto& [name, tensor] : params.named()) {
    std::vector<double> analytic(tensor.size(), 0.0);
    if (tensor.has_grad()) std::copy(tensor.grad().begin(), tensor.grad().end(), analytic.begin());
    auto values = tensor.mutable_data();
    for (std::size_t i = 0; i < values.size(); ++i) {
      const double orig = values[i];
      values[i] = orig + h;
      const double fp = loss_of().item();
      values[i] = orig - h;
      const double fm = loss_of().item();
      values[i] = orig;
      const double numeric = (fp - fm) / (2.0 * h);
      const double err = relative_error(analytic[i], numeric);
      ++result.checked;
      if (err > result.max_rel_error || result.worst_parameter.empty()) {
        result.max_rel_error = std::max(err, result.max_rel_error);
        result.worst_parameter = name + "[" + std::to_string(i) + "]";
      }
    }
  }
  return result;
}

}  // namespace stal
