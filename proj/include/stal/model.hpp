#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "stal/skeleton.hpp"
#include "stal/tensor.hpp"

namespace stal {

struct ModelConfig {
  std::size_t num_blocks = 3;
  std::size_t embed_dim = 64;   // per-joint channel width of every block output
  std::size_t cheb_k = 7;       // Chebyshev terms T_0 .. T_{K-1}
  std::size_t window_size = 7;
  std::size_t num_joints = kMpiiJoints;
  std::size_t in_channels = 2;
  std::uint64_t seed = 0;

  void validate() const;
  bool operator==(const ModelConfig&) const = default;
};

/// One attention-based spatio-temporal graph convolution block.
///
/// Spatial attention over joints (J×J) and temporal attention over frames
/// (W×W) use the bilinear score
///   S = V · sigmoid((x·a)·M·(x·c)ᵀ + b),  normalised row-wise by softmax,
/// where `a` contracts the other axis, `c` contracts channels and `M` maps
/// channels to the target axis.
struct BlockParams {
  Tensor sa_time;     // [W, 1]
  Tensor sa_mix;      // [C_in, W]
  Tensor sa_channel;  // [C_in, 1]
  Tensor sa_bias;     // [J, J]
  Tensor sa_score;    // [J, J]
  Tensor ta_joint;    // [J, 1]
  Tensor ta_mix;      // [C_in, J]
  Tensor ta_channel;  // [C_in, 1]
  Tensor ta_bias;     // [W, W]
  Tensor ta_score;    // [W, W]
  Tensor theta;       // [K, C_in, D] Chebyshev coefficients
  Tensor tconv;       // [3, D, D] taps for frames t-1, t, t+1
  Tensor tconv_bias;  // [D]
  Tensor res_weight;  // [C_in, D]
  Tensor res_bias;    // [D]
};

struct NamedTensor {
  std::string name;
  Tensor tensor;
};

struct ModelParams {
  static constexpr std::uint32_t kFormatVersion = 1;

  ModelConfig config;
  std::uint32_t format_version = kFormatVersion;
  std::vector<BlockParams> blocks;
  Tensor head_weight;  // [D, C]
  Tensor head_bias;    // [C]

  /// Every learnable tensor in the fixed checkpoint order. The tensors are
  /// shared handles: mutating them mutates the model.
  std::vector<NamedTensor> named() const;
  std::size_t parameter_count() const;
  ModelParams clone() const;
  void set_requires_grad(bool on);
  void zero_grad();
};

/// Glorot-uniform weights, zero biases, zero attention scores (uniform initial
/// attention). Deterministic per config.seed.
ModelParams init_params(const ModelConfig& config);

/// Throws unless the model was built for this many joints/channels/frames.
void require_compatible(const ModelConfig& config, std::size_t num_joints, std::size_t channels,
                        std::size_t window_size);

/// Largest eigenvalue of a symmetric n×n matrix by power iteration.
double largest_eigenvalue(const std::vector<double>& symmetric, std::size_t n, double tolerance = 1e-10,
                          std::size_t max_iterations = 10000);

/// L = I - D^{-1/2} A D^{-1/2}.
Tensor normalized_laplacian(const SkeletonGraph& graph);
/// 2 L / lambda_max - I; spectrum in [-1, 1].
Tensor scaled_laplacian(const SkeletonGraph& graph);

/// T_0 = I, T_1 = L̃, T_k = 2 L̃ T_{k-1} - T_{k-2}.
std::vector<Tensor> chebyshev_basis(const Tensor& scaled_laplacian, std::size_t k);

/// Σ_k (T_k ⊙ attention) x Θ_k over the joint axis. x: [B, W, J, C_in],
/// theta: [K, C_in, C_out], attention: [B, J, J] or null.
Tensor cheb_conv(const Tensor& x, const std::vector<Tensor>& basis, const Tensor& theta, const Tensor* attention);

Tensor spatial_attention(const Tensor& x, const BlockParams& block);
Tensor temporal_attention(const Tensor& x, const BlockParams& block);
/// Frame t' of the result is Σ_t attention[b, t', t] · frame t.
Tensor apply_temporal_attention(const Tensor& x, const Tensor& attention);
/// Kernel-3, zero-padded convolution along the window axis, per joint.
Tensor temporal_conv(const Tensor& x, const Tensor& kernel, const Tensor& bias);

struct ForwardOptions {
  bool use_attention = true;
  bool keep_attention = false;  // record attention maps in the result
};

struct ForwardResult {
  Tensor embedding;       // [B, W, J, D], output of the last block
  Tensor reconstruction;  // [B, W, J, C], FC head applied per (frame, joint)
  std::vector<Tensor> spatial_attention;
  std::vector<Tensor> temporal_attention;
};

Tensor block_forward(const BlockParams& block, const Tensor& x, const std::vector<Tensor>& basis,
                     const ForwardOptions& options, ForwardResult* record = nullptr);

ForwardResult forward(const ModelParams& params, const Tensor& windows, const std::vector<Tensor>& basis,
                      const ForwardOptions& options = {});
ForwardResult forward(const ModelParams& params, const WindowBatch& batch, const SkeletonGraph& graph,
                      const ForwardOptions& options = {});

/// Binary checkpoint: "STALCKPT", u32 format version, u32 ×6 config fields
/// (blocks, embed_dim, cheb_k, window, joints, channels), u64 seed, u32 tensor
/// count, then per tensor u32 name length + name, u32 rank, u64 extents and
/// little-endian float64 values, in ModelParams::named() order.
std::string serialize_params(const ModelParams& params);
ModelParams deserialize_params(const std::string& bytes, const std::string& source = "checkpoint");
void save_params(const ModelParams& params, const std::filesystem::path& path);
ModelParams load_params(const std::filesystem::path& path);

}  // namespace stal
