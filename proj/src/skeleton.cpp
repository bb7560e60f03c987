#include "stal/skeleton.hpp"

#include <cmath>
#include <queue>
#include <random>

#include "stal/error.hpp"

namespace stal {

void DemarcationSet::validate(std::size_t num_frames) const {
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels[i].frame >= num_frames) {
      throw data_error("demarcation '" + labels[i].name + "' at frame " + std::to_string(labels[i].frame) +
                       " outside clip of " + std::to_string(num_frames) + " frames");
    }
    if (i > 0 && labels[i].frame <= labels[i - 1].frame) {
      throw data_error("demarcation frames must be strictly increasing ('" + labels[i - 1].name + "' " +
                       std::to_string(labels[i - 1].frame) + " then '" + labels[i].name + "' " +
                       std::to_string(labels[i].frame) + ")");
    }
  }
}

bool DemarcationSet::is_dsv_layout() const {
  if (labels.size() != kDsvDemarcationNames.size()) return false;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels[i].name != kDsvDemarcationNames[i]) return false;
  }
  return true;
}

void PoseSequence::validate() const {
  if (num_joints == 0 || channels == 0) throw data_error(clip_id + ": joints and channels must be positive");
  if (coords.empty() || coords.size() % (num_joints * channels) != 0) {
    throw data_error(clip_id + ": coordinate buffer does not hold whole frames");
  }
  if (!(fps > 0.0) || !std::isfinite(fps)) throw data_error(clip_id + ": fps must be positive");
  for (std::size_t i = 0; i < coords.size(); ++i) {
    if (!std::isfinite(coords[i])) {
      const std::size_t per_frame = num_joints * channels;
      throw data_error(clip_id + ": non-finite coordinate at frame " + std::to_string(i / per_frame) + ", joint " +
                       std::to_string((i % per_frame) / channels));
    }
  }
  if (demarcations) demarcations->validate(num_frames());
}

bool SkeletonGraph::is_connected() const {
  if (num_joints == 0) return false;
  std::vector<bool> seen(num_joints, false);
  std::queue<std::size_t> q;
  q.push(0);
  seen[0] = true;
  std::size_t reached = 1;
  while (!q.empty()) {
    const std::size_t u = q.front();
    q.pop();
    for (std::size_t v = 0; v < num_joints; ++v) {
      if (adj(u, v) != 0.0 && !seen[v]) {
        seen[v] = true;
        ++reached;
        q.push(v);
      }
    }
  }
  return reached == num_joints;
}

SkeletonGraph make_graph(std::size_t num_joints, std::vector<std::pair<std::size_t, std::size_t>> edges) {
  if (num_joints < 2) throw config_error("skeleton graph needs at least 2 joints");
  SkeletonGraph g;
  g.num_joints = num_joints;
  g.adjacency.assign(num_joints * num_joints, 0.0);
  for (const auto& [a, b] : edges) {
    if (a >= num_joints || b >= num_joints || a == b) {
      throw config_error("invalid skeleton edge (" + std::to_string(a) + ", " + std::to_string(b) + ")");
    }
    g.adjacency[a * num_joints + b] = 1.0;
    g.adjacency[b * num_joints + a] = 1.0;
  }
  g.edges = std::move(edges);
  for (std::size_t j = 0; j < num_joints; ++j) g.joint_names.push_back("j" + std::to_string(j));
  return g;
}

SkeletonGraph build_mpii_skeleton() {
  SkeletonGraph g = make_graph(kMpiiJoints, {{0, 1},
                                             {1, 2},
                                             {2, 6},
                                             {6, 3},
                                             {3, 4},
                                             {4, 5},
                                             {6, 7},
                                             {7, 8},
                                             {8, 9},
                                             {7, 12},
                                             {12, 11},
                                             {11, 10},
                                             {7, 13},
                                             {13, 14},
                                             {14, 15}});
  g.joint_names = {"r_ankle",    "r_knee",   "r_hip",      "l_hip",       "l_knee",  "l_ankle",
                   "pelvis",     "thorax",   "upper_neck", "head_top",    "r_wrist", "r_elbow",
                   "r_shoulder", "l_shoulder", "l_elbow",  "l_wrist"};
  return g;
}

PoseSequence normalize_poses(const PoseSequence& seq) {
  seq.validate();
  const std::size_t points = seq.num_frames() * seq.num_joints;
  const std::size_t C = seq.channels;
  std::vector<double> centroid(C, 0.0);
  for (std::size_t p = 0; p < points; ++p)
    for (std::size_t c = 0; c < C; ++c) centroid[c] += seq.coords[p * C + c];
  for (double& v : centroid) v /= static_cast<double>(points);

  double sq = 0.0;
  for (std::size_t p = 0; p < points; ++p) {
    for (std::size_t c = 0; c < C; ++c) {
      const double d = seq.coords[p * C + c] - centroid[c];
      sq += d * d;
    }
  }
  const double radius = std::sqrt(sq / static_cast<double>(points));
  if (!(radius > 1e-12)) throw data_error(seq.clip_id + ": zero spatial extent, cannot normalize");

  PoseSequence out = seq;
  for (std::size_t p = 0; p < points; ++p)
    for (std::size_t c = 0; c < C; ++c) out.coords[p * C + c] = (seq.coords[p * C + c] - centroid[c]) / radius;
  return out;
}

WindowBatch partition_windows(const PoseSequence& seq, std::size_t window_size, std::size_t stride) {
  if (window_size == 0) throw config_error("window size must be positive");
  if (stride == 0) throw config_error("stride must be positive");
  const std::size_t F = seq.num_frames();
  if (F < window_size) {
    throw data_error(seq.clip_id + ": clip shorter than window (" + std::to_string(F) + " < " +
                     std::to_string(window_size) + " frames)");
  }
  const std::size_t count = (F - window_size) / stride + 1;
  const std::size_t frame_len = seq.num_joints * seq.channels;
  const std::size_t window_len = window_size * frame_len;
  std::vector<double> data(count * window_len);
  WindowBatch batch;
  batch.window_size = window_size;
  for (std::size_t b = 0; b < count; ++b) {
    const std::size_t start = b * stride;
    std::copy_n(seq.coords.begin() + static_cast<std::ptrdiff_t>(start * frame_len), window_len,
                data.begin() + static_cast<std::ptrdiff_t>(b * window_len));
    batch.origins.push_back({seq.clip_id, start});
  }
  batch.windows = Tensor({count, window_size, seq.num_joints, seq.channels}, std::move(data));
  return batch;
}

WindowBatch add_gaussian_noise(const WindowBatch& batch, double sigma, std::uint64_t seed) {
  if (!(sigma >= 0.0) || !std::isfinite(sigma)) throw config_error("noise sigma must be a finite value >= 0");
  WindowBatch out;
  out.origins = batch.origins;
  out.window_size = batch.window_size;
  std::vector<double> values(batch.windows.data().begin(), batch.windows.data().end());
  if (sigma > 0.0) {
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> noise(0.0, sigma);
    for (double& v : values) v += noise(rng);
  }
  out.windows = Tensor(batch.windows.shape(), std::move(values));
  return out;
}

WindowBatch select_windows(const WindowBatch& batch, std::span<const std::size_t> indices) {
  if (indices.empty()) throw config_error("select_windows: empty selection");
  const Shape& s = batch.windows.shape();
  const std::size_t len = shape_size(s) / s[0];
  std::vector<double> data(indices.size() * len);
  WindowBatch out;
  out.window_size = batch.window_size;
  const double* src = batch.windows.data().data();
  for (std::size_t i = 0; i < indices.size(); ++i) {
    if (indices[i] >= batch.size()) throw config_error("select_windows: index out of range");
    std::copy_n(src + indices[i] * len, len, data.begin() + static_cast<std::ptrdiff_t>(i * len));
    out.origins.push_back(batch.origins[indices[i]]);
  }
  Shape shape = s;
  shape[0] = indices.size();
  out.windows = Tensor(std::move(shape), std::move(data));
  return out;
}

WindowBatch shuffle_windows(const WindowBatch& batch, std::uint64_t seed) {
  std::vector<std::size_t> order(batch.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  std::mt19937_64 rng(seed);
  for (std::size_t i = order.size(); i-- > 1;) {
    const std::size_t j = static_cast<std::size_t>(rng() % (i + 1));
    std::swap(order[i], order[j]);
  }
  return select_windows(batch, order);
}

WindowBatch concat_batches(const std::vector<WindowBatch>& batches) {
  if (batches.empty()) throw config_error("concat_batches: no batches");
  std::vector<Tensor> parts;
  WindowBatch out;
  out.window_size = batches.front().window_size;
  for (const auto& b : batches) {
    if (b.window_size != out.window_size) throw config_error("concat_batches: window sizes differ");
    parts.push_back(b.windows);
    out.origins.insert(out.origins.end(), b.origins.begin(), b.origins.end());
  }
  NoGradGuard no_grad;
  out.windows = parts.size() == 1 ? parts.front() : concat(parts, 0);
  return out;
}

}  // namespace stal
