#include "stal/model.hpp"

#include <cmath>
#include <random>

#include "stal/error.hpp"
#include "stal/seed.hpp"

namespace stal {
namespace {

Tensor glorot(Shape shape, std::size_t fan_in, std::size_t fan_out, std::uint64_t seed) {
  const double bound = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> dist(-bound, bound);
  std::vector<double> v(shape_size(shape));
  for (double& x : v) x = dist(rng);
  return Tensor(std::move(shape), std::move(v));
}

}  // namespace

void ModelConfig::validate() const {
  if (num_blocks == 0) throw config_error("model.blocks must be >= 1");
  if (embed_dim == 0) throw config_error("model.embed_dim must be >= 1");
  if (cheb_k == 0) throw config_error("model.cheb_k must be >= 1");
  if (window_size < 3) throw config_error("model.window must be >= 3");
  if (num_joints < 2) throw config_error("model needs at least 2 joints");
  if (in_channels == 0) throw config_error("model needs at least 1 input channel");
}

std::vector<NamedTensor> ModelParams::named() const {
  std::vector<NamedTensor> out;
  for (std::size_t i = 0; i < blocks.size(); ++i) {
    const BlockParams& b = blocks[i];
    const std::string p = "block" + std::to_string(i) + ".";
    out.push_back({p + "sa_time", b.sa_time});
    out.push_back({p + "sa_mix", b.sa_mix});
    out.push_back({p + "sa_channel", b.sa_channel});
    out.push_back({p + "sa_bias", b.sa_bias});
    out.push_back({p + "sa_score", b.sa_score});
    out.push_back({p + "ta_joint", b.ta_joint});
    out.push_back({p + "ta_mix", b.ta_mix});
    out.push_back({p + "ta_channel", b.ta_channel});
    out.push_back({p + "ta_bias", b.ta_bias});
    out.push_back({p + "ta_score", b.ta_score});
    out.push_back({p + "theta", b.theta});
    out.push_back({p + "tconv", b.tconv});
    out.push_back({p + "tconv_bias", b.tconv_bias});
    out.push_back({p + "res_weight", b.res_weight});
    out.push_back({p + "res_bias", b.res_bias});
  }
  out.push_back({"head.weight", head_weight});
  out.push_back({"head.bias", head_bias});
  return out;
}

std::size_t ModelParams::parameter_count() const {
  std::size_t n = 0;
  for (const auto& t : named()) n += t.tensor.size();
  return n;
}

ModelParams ModelParams::clone() const {
  ModelParams out;
  out.config = config;
  out.format_version = format_version;
  for (const BlockParams& b : blocks) {
    out.blocks.push_back({b.sa_time.clone(), b.sa_mix.clone(), b.sa_channel.clone(), b.sa_bias.clone(),
                          b.sa_score.clone(), b.ta_joint.clone(), b.ta_mix.clone(), b.ta_channel.clone(),
                          b.ta_bias.clone(), b.ta_score.clone(), b.theta.clone(), b.tconv.clone(),
                          b.tconv_bias.clone(), b.res_weight.clone(), b.res_bias.clone()});
  }
  out.head_weight = head_weight.clone();
  out.head_bias = head_bias.clone();
  return out;
}

void ModelParams::set_requires_grad(bool on) {
  for (auto& t : named()) t.tensor.set_requires_grad(on);
}

void ModelParams::zero_grad() {
  for (auto& t : named()) t.tensor.zero_grad();
}

ModelParams init_params(const ModelConfig& config) {
  config.validate();
  const std::size_t W = config.window_size, J = config.num_joints, D = config.embed_dim, K = config.cheb_k;
  ModelParams p;
  p.config = config;
  std::uint64_t stream = 0;
  auto next = [&] { return derive_seed(config.seed, {0x1417, stream++}); };
  for (std::size_t i = 0; i < config.num_blocks; ++i) {
    const std::size_t C = i == 0 ? config.in_channels : D;
    BlockParams b;
    b.sa_time = glorot({W, 1}, W, 1, next());
    b.sa_mix = glorot({C, W}, C, W, next());
    b.sa_channel = glorot({C, 1}, C, 1, next());
    b.sa_bias = Tensor({J, J});
    b.sa_score = Tensor({J, J});
    b.ta_joint = glorot({J, 1}, J, 1, next());
    b.ta_mix = glorot({C, J}, C, J, next());
    b.ta_channel = glorot({C, 1}, C, 1, next());
    b.ta_bias = Tensor({W, W});
    b.ta_score = Tensor({W, W});
    b.theta = glorot({K, C, D}, K * C, D, next());
    b.tconv = glorot({3, D, D}, 3 * D, D, next());
    b.tconv_bias = Tensor({D});
    b.res_weight = glorot({C, D}, C, D, next());
    b.res_bias = Tensor({D});
    p.blocks.push_back(std::move(b));
  }
  p.head_weight = glorot({D, config.in_channels}, D, config.in_channels, next());
  p.head_bias = Tensor({config.in_channels});
  p.set_requires_grad(true);
  return p;
}

void require_compatible(const ModelConfig& config, std::size_t num_joints, std::size_t channels,
                        std::size_t window_size) {
  if (config.num_joints != num_joints) {
    throw config_error("model expects " + std::to_string(config.num_joints) + " joints, data has " +
                       std::to_string(num_joints));
  }
  if (config.in_channels != channels) {
    throw config_error("model expects " + std::to_string(config.in_channels) + " channels, data has " +
                       std::to_string(channels));
  }
  if (config.window_size != window_size) {
    throw config_error("model expects window " + std::to_string(config.window_size) + ", data has " +
                       std::to_string(window_size));
  }
}

double largest_eigenvalue(const std::vector<double>& a, std::size_t n, double tolerance,
                          std::size_t max_iterations) {
  if (a.size() != n * n || n == 0) throw config_error("largest_eigenvalue: matrix is not n x n");
  // Alternating, non-uniform start so it is not orthogonal to the top
  // eigenvector of the (bipartite) skeleton Laplacians we care about.
  std::vector<double> v(n), w(n);
  for (std::size_t i = 0; i < n; ++i) v[i] = (i % 2 ? -1.0 : 1.0) * (1.0 + 0.1 * static_cast<double>(i));
  auto normalize = [&](std::vector<double>& x) {
    double s = 0.0;
    for (double e : x) s += e * e;
    s = std::sqrt(s);
    if (!(s > 0.0)) return false;
    for (double& e : x) e /= s;
    return true;
  };
  normalize(v);
  double lambda = 0.0;
  for (std::size_t it = 0; it < max_iterations; ++it) {
    for (std::size_t i = 0; i < n; ++i) {
      double s = 0.0;
      for (std::size_t j = 0; j < n; ++j) s += a[i * n + j] * v[j];
      w[i] = s;
    }
    double rq = 0.0;
    for (std::size_t i = 0; i < n; ++i) rq += v[i] * w[i];
    if (!normalize(w)) return 0.0;
    const bool done = it > 0 && std::abs(rq - lambda) <= tolerance * std::max(1.0, std::abs(rq));
    lambda = rq;
    v.swap(w);
    if (done) return lambda;
  }
  return lambda;
}

Tensor normalized_laplacian(const SkeletonGraph& graph) {
  const std::size_t J = graph.num_joints;
  std::vector<double> deg(J, 0.0);
  for (std::size_t i = 0; i < J; ++i)
    for (std::size_t j = 0; j < J; ++j) deg[i] += graph.adj(i, j);
  for (std::size_t i = 0; i < J; ++i) {
    if (deg[i] == 0.0) throw config_error("skeleton joint " + std::to_string(i) + " has no edges");
  }
  std::vector<double> L(J * J);
  for (std::size_t i = 0; i < J; ++i)
    for (std::size_t j = 0; j < J; ++j)
      L[i * J + j] = (i == j ? 1.0 : 0.0) - graph.adj(i, j) / std::sqrt(deg[i] * deg[j]);
  return Tensor({J, J}, std::move(L));
}

Tensor scaled_laplacian(const SkeletonGraph& graph) {
  Tensor L = normalized_laplacian(graph);
  const std::size_t J = graph.num_joints;
  std::vector<double> v(L.data().begin(), L.data().end());
  const double lambda = largest_eigenvalue(v, J);
  if (!(lambda > 0.0)) throw numeric_error("laplacian has no positive eigenvalue");
  for (std::size_t i = 0; i < J; ++i)
    for (std::size_t j = 0; j < J; ++j) v[i * J + j] = 2.0 * v[i * J + j] / lambda - (i == j ? 1.0 : 0.0);
  return Tensor({J, J}, std::move(v));
}

std::vector<Tensor> chebyshev_basis(const Tensor& lap, std::size_t k) {
  if (lap.rank() != 2 || lap.dim(0) != lap.dim(1)) throw config_error("chebyshev_basis: expected a square matrix");
  if (k == 0) throw config_error("chebyshev_basis: K must be >= 1");
  NoGradGuard no_grad;
  const std::size_t J = lap.dim(0);
  std::vector<Tensor> out;
  Tensor eye({J, J});
  for (std::size_t i = 0; i < J; ++i) eye.mutable_data()[i * J + i] = 1.0;
  out.push_back(eye);
  if (k > 1) out.push_back(lap.detach());
  for (std::size_t i = 2; i < k; ++i) out.push_back(sub(scale(matmul(lap, out[i - 1]), 2.0), out[i - 2]).detach());
  return out;
}

Tensor cheb_conv(const Tensor& x, const std::vector<Tensor>& basis, const Tensor& theta, const Tensor* attention) {
  if (x.rank() != 4) throw config_error("cheb_conv: expected [B, W, J, C] input, got " + shape_str(x.shape()));
  const std::size_t B = x.dim(0), W = x.dim(1), J = x.dim(2), C = x.dim(3);
  const std::size_t K = basis.size();
  if (theta.rank() != 3 || theta.dim(0) != K || theta.dim(1) != C) {
    throw config_error("cheb_conv: theta " + shape_str(theta.shape()) + " does not match K=" + std::to_string(K) +
                       ", C=" + std::to_string(C));
  }
  const std::size_t D = theta.dim(2);
  // u[b,w,j*K+k,:] = x[b,w,j,:]·theta_k, then y[b,w,i,:] = sum_{j,k} m[b,i,j*K+k] u[b,w,j*K+k,:]
  // with m[b,i,j*K+k] = T_k[i,j] (* S_b[i,j]).
  Tensor u = reshape(linear(x, reshape(transpose(theta, {1, 0, 2}), {C, K * D})), {B, W, J * K, D});
  std::vector<double> stack(J * J * K);
  for (std::size_t k = 0; k < K; ++k) {
    if (basis[k].rank() != 2 || basis[k].dim(0) != J || basis[k].dim(1) != J) {
      throw config_error("cheb_conv: basis term " + std::to_string(k) + " is not " + std::to_string(J) + "x" +
                         std::to_string(J));
    }
    auto t = basis[k].data();
    for (std::size_t i = 0; i < J; ++i)
      for (std::size_t j = 0; j < J; ++j) stack[(i * J + j) * K + k] = t[i * J + j];
  }
  Tensor m = repeat_leading(Tensor({J, J * K}, std::move(stack)), B);
  if (attention) {
    Tensor spread = reshape(linear(reshape(*attention, {B, J, J, 1}), Tensor({1, K}, 1.0)), {B, J, J * K});
    m = mul(m, spread);
  }
  return matmul_shared(m, u);
}

Tensor spatial_attention(const Tensor& x, const BlockParams& p) {
  const std::size_t B = x.dim(0), W = x.dim(1), J = x.dim(2), C = x.dim(3);
  Tensor pooled = matmul(repeat_leading(reshape(p.sa_time, {1, W}), B), reshape(x, {B, W, J * C}));
  Tensor lhs = linear(reshape(pooled, {B, J, C}), p.sa_mix);
  Tensor rhs = reshape(linear(x, p.sa_channel), {B, W, J});
  Tensor s = sigmoid(add(matmul(lhs, rhs), repeat_leading(p.sa_bias, B)));
  return softmax(matmul(repeat_leading(p.sa_score, B), s), 2);
}

Tensor temporal_attention(const Tensor& x, const BlockParams& p) {
  const std::size_t B = x.dim(0), W = x.dim(1), J = x.dim(2), C = x.dim(3);
  Tensor pooled = matmul(repeat_leading(reshape(p.ta_joint, {1, J}), B * W), reshape(x, {B * W, J, C}));
  Tensor lhs = linear(reshape(pooled, {B, W, C}), p.ta_mix);
  Tensor rhs = transpose(reshape(linear(x, p.ta_channel), {B, W, J}), {0, 2, 1});
  Tensor e = sigmoid(add(matmul(lhs, rhs), repeat_leading(p.ta_bias, B)));
  return softmax(matmul(repeat_leading(p.ta_score, B), e), 2);
}

Tensor apply_temporal_attention(const Tensor& x, const Tensor& attention) {
  const std::size_t B = x.dim(0), W = x.dim(1), J = x.dim(2), C = x.dim(3);
  return reshape(matmul(attention, reshape(x, {B, W, J * C})), {B, W, J, C});
}

Tensor temporal_conv(const Tensor& x, const Tensor& kernel, const Tensor& bias) {
  const std::size_t D = x.dim(3);
  if (kernel.rank() != 3 || kernel.dim(0) != 3 || kernel.dim(1) != D) {
    throw config_error("temporal_conv: kernel " + shape_str(kernel.shape()) + " does not match D=" + std::to_string(D));
  }
  return linear(time_taps(x, 3), reshape(kernel, {3 * D, kernel.dim(2)}), bias);
}

Tensor block_forward(const BlockParams& p, const Tensor& x, const std::vector<Tensor>& basis,
                     const ForwardOptions& options, ForwardResult* record) {
  Tensor g;
  if (options.use_attention) {
    Tensor s = spatial_attention(x, p);
    Tensor e = temporal_attention(x, p);
    if (record && options.keep_attention) {
      record->spatial_attention.push_back(s);
      record->temporal_attention.push_back(e);
    }
    g = cheb_conv(apply_temporal_attention(x, e), basis, p.theta, &s);
  } else {
    g = cheb_conv(x, basis, p.theta, nullptr);
  }
  return add(relu(temporal_conv(g, p.tconv, p.tconv_bias)), linear(x, p.res_weight, p.res_bias));
}

ForwardResult forward(const ModelParams& params, const Tensor& windows, const std::vector<Tensor>& basis,
                      const ForwardOptions& options) {
  const ModelConfig& cfg = params.config;
  if (windows.rank() != 4) throw config_error("forward: expected [B, W, J, C] windows, got " + shape_str(windows.shape()));
  require_compatible(cfg, windows.dim(2), windows.dim(3), windows.dim(1));
  if (basis.size() != cfg.cheb_k) throw config_error("forward: Chebyshev basis size differs from model K");
  ForwardResult r;
  Tensor h = windows;
  for (const BlockParams& b : params.blocks) h = block_forward(b, h, basis, options, &r);
  r.embedding = h;
  r.reconstruction = linear(h, params.head_weight, params.head_bias);
  check_finite(r.reconstruction, "model output");
  return r;
}

ForwardResult forward(const ModelParams& params, const WindowBatch& batch, const SkeletonGraph& graph,
                      const ForwardOptions& options) {
  if (graph.num_joints != params.config.num_joints) {
    throw config_error("model expects " + std::to_string(params.config.num_joints) + " joints, skeleton has " +
                       std::to_string(graph.num_joints));
  }
  return forward(params, batch.windows, chebyshev_basis(scaled_laplacian(graph), params.config.cheb_k), options);
}

}  // namespace stal
