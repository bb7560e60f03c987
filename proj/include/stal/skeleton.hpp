#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "stal/tensor.hpp"

namespace stal {

inline constexpr std::size_t kMpiiJoints = 16;
inline constexpr std::array<std::string_view, 5> kDsvDemarcationNames{"start", "m1", "m2", "m3", "end"};

struct Demarcation {
  std::string name;
  std::size_t frame = 0;
};

/// Annotated boundary frames, strictly increasing.
struct DemarcationSet {
  std::vector<Demarcation> labels;

  std::size_t size() const { return labels.size(); }
  /// Throws a data error unless frames are strictly increasing and < num_frames.
  void validate(std::size_t num_frames) const;
  bool is_dsv_layout() const;
};

/// One clip: F frames of J joints with C coordinates each, row-major F×J×C.
struct PoseSequence {
  std::string clip_id;
  double fps = 60.0;
  std::size_t num_joints = kMpiiJoints;
  std::size_t channels = 2;
  std::vector<double> coords;
  std::optional<DemarcationSet> demarcations;

  std::size_t num_frames() const { return coords.size() / (num_joints * channels); }
  double& at(std::size_t frame, std::size_t joint, std::size_t c) {
    return coords[(frame * num_joints + joint) * channels + c];
  }
  double at(std::size_t frame, std::size_t joint, std::size_t c) const {
    return coords[(frame * num_joints + joint) * channels + c];
  }
  /// F >= 1, consistent sizes, finite coordinates, fps > 0, valid demarcations.
  void validate() const;
};

struct SkeletonGraph {
  std::size_t num_joints = 0;
  std::vector<std::pair<std::size_t, std::size_t>> edges;
  std::vector<double> adjacency;  // J×J, symmetric 0/1, zero diagonal
  std::vector<std::string> joint_names;

  double adj(std::size_t i, std::size_t j) const { return adjacency[i * num_joints + j]; }
  bool is_connected() const;
};

/// Undirected graph from an edge list; rejects self loops and out-of-range joints.
SkeletonGraph make_graph(std::size_t num_joints, std::vector<std::pair<std::size_t, std::size_t>> edges);

/// MPII 16-joint layout: 0 r_ankle, 1 r_knee, 2 r_hip, 3 l_hip, 4 l_knee,
/// 5 l_ankle, 6 pelvis, 7 thorax, 8 upper_neck, 9 head_top, 10 r_wrist,
/// 11 r_elbow, 12 r_shoulder, 13 l_shoulder, 14 l_elbow, 15 l_wrist.
SkeletonGraph build_mpii_skeleton();

struct WindowOrigin {
  std::string clip_id;
  std::size_t start_frame = 0;
};

/// B windows of W consecutive frames, tensor shape [B, W, J, C].
struct WindowBatch {
  Tensor windows;
  std::vector<WindowOrigin> origins;
  std::size_t window_size = 0;

  std::size_t size() const { return origins.size(); }
};

enum class PoseFormat { dsv_annotation, generic_keypoints };

PoseFormat parse_pose_format(std::string_view name);
std::string_view pose_format_name(PoseFormat format);

struct LoadOptions {
  std::size_t num_joints = kMpiiJoints;
  double fps = 60.0;
};

/// Canonical pose CSV (`frame,joint,x,y,valid`, frame-major, joint-minor).
/// Invalid joints are filled by linear interpolation between the nearest valid
/// frames of the same joint (nearest value at the clip ends). With
/// dsv_annotation the sibling annotation file is required and must list
/// start,m1,m2,m3,end; generic_keypoints attaches it only when present.
PoseSequence load_pose_file(const std::filesystem::path& path, PoseFormat format, const LoadOptions& options = {});

/// All `*.csv` pose files in a directory (annotation files excluded), sorted by name.
std::vector<PoseSequence> load_pose_directory(const std::filesystem::path& dir, PoseFormat format,
                                              const LoadOptions& options = {});

/// `clip.csv` -> `clip.annot.csv`.
std::filesystem::path annotation_path_for(const std::filesystem::path& pose_file);
bool is_annotation_file(const std::filesystem::path& path);

/// Writes the canonical CSV with shortest round-trip decimal values (all joints valid).
void save_pose_file(const PoseSequence& seq, const std::filesystem::path& path);
void save_annotation_file(const DemarcationSet& set, const std::filesystem::path& path);
DemarcationSet load_annotation_file(const std::filesystem::path& path);

/// Subtracts the clip centroid and divides by the clip's RMS joint distance
/// from it, so the result has RMS radius 1.
PoseSequence normalize_poses(const PoseSequence& seq);

/// floor((F - W) / stride) + 1 windows starting at 0, stride, 2*stride, ...
WindowBatch partition_windows(const PoseSequence& seq, std::size_t window_size, std::size_t stride = 1);

/// Adds i.i.d. N(0, sigma^2) to every coordinate; the input is not modified.
WindowBatch add_gaussian_noise(const WindowBatch& batch, double sigma, std::uint64_t seed);

/// Seeded Fisher-Yates permutation of the windows and their origins.
WindowBatch shuffle_windows(const WindowBatch& batch, std::uint64_t seed);

WindowBatch select_windows(const WindowBatch& batch, std::span<const std::size_t> indices);
WindowBatch concat_batches(const std::vector<WindowBatch>& batches);

}  // namespace stal
