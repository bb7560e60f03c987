#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <random>
#include <string>
#include <string_view>
#include <vector>

#include "stal/skeleton.hpp"

namespace stal {

enum class MotionKind { stationary, oscillation, rotation, drift };
std::string_view motion_kind_name(MotionKind kind);

/// One motion regime. Every regime starts from the final pose of the previous
/// one (the rest pose for the first), so trajectories are continuous.
///   oscillation: joint j moves along x by amplitude * (sin(w t + phi_j) - sin phi_j),
///                w = 2 pi frequency / fps, t = frames since the regime began
///   rotation:    rigid rotation about the pose centroid by angular_velocity * t
///   drift:       translation by (vx, vy) * t
struct RegimeSpec {
  std::size_t duration = 1;
  MotionKind kind = MotionKind::stationary;
  double frequency_hz = 0.0;
  double amplitude = 0.0;
  double angular_velocity = 0.0;  // rad / frame
  double vx = 0.0, vy = 0.0;      // per frame
  std::vector<double> phase_offsets;  // per joint; empty means all zero

  static RegimeSpec stationary(std::size_t duration);
  static RegimeSpec oscillation(std::size_t duration, double frequency_hz, double amplitude);
  static RegimeSpec rotation(std::size_t duration, double angular_velocity);
  static RegimeSpec drift(std::size_t duration, double vx, double vy);

  void validate(std::size_t num_joints) const;
};

/// Hand-authored standing pose in MPII joint order, metres, y up.
const std::array<std::array<double, 2>, kMpiiJoints>& rest_pose();

struct SyntheticClip {
  PoseSequence sequence;
  std::vector<std::size_t> planted_transitions;  // cumulative regime boundaries
  std::uint64_t seed = 0;
  std::vector<RegimeSpec> specs;
};

struct ClipOptions {
  double jitter_sigma = 0.0;
  double fps = 60.0;
  std::size_t min_frames = 7;  // usually the model window
  std::string clip_id = "synth";
};

/// Demarcations are named t1, t2, ... at the planted transitions.
SyntheticClip generate_clip(const std::vector<RegimeSpec>& specs, const SkeletonGraph& skeleton, std::uint64_t seed,
                            const ClipOptions& options = {});

struct SamplerConfig {
  std::size_t min_regimes = 2, max_regimes = 4;
  std::size_t min_duration = 30, max_duration = 120;
  double jitter_sigma = 0.005;
  double fps = 60.0;
  /// Adjacent regimes must differ in RMS per-frame joint speed by at least
  /// this multiple of jitter_sigma (0 disables the check).
  double min_speed_contrast = 0.0;

  void validate() const;
};

/// Random regime list: counts and durations uniform in the configured ranges,
/// adjacent regimes of different kinds.
std::vector<RegimeSpec> sample_regimes(const SamplerConfig& config, std::mt19937_64& rng);

/// RMS over frames t >= 1 and joints of |p_t - p_{t-1}| for one regime run
/// from the rest pose without jitter.
double regime_rms_speed(const RegimeSpec& spec, double fps = 60.0);

/// Clip i is generated from derive_seed(seed, {i}) and named synth_NNN.
std::vector<SyntheticClip> generate_corpus(std::size_t n_clips, const SamplerConfig& config, std::uint64_t seed);

/// Canonical pose CSV plus annotation CSV per clip.
void write_corpus(const std::vector<SyntheticClip>& corpus, const std::filesystem::path& dir);

/// Independent brute-force scan of the curvature criterion on a raw series:
/// window b is reported when Delta^2 S_b == 0 and Delta^2 S_{b-1} * Delta^2
/// S_{b+1} < 0, a zero run between opposite signs reports its first window, and
/// an adjacent strict sign change reports the interpolated crossing. Positions
/// outside [2, B-3] are dropped. For cross-checking the detector only.
std::vector<double> curvature_oracle(const std::vector<double>& series);

}  // namespace stal
