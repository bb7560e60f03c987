#pragma once

#include <cstddef>
#include <filesystem>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "stal/model.hpp"
#include "stal/skeleton.hpp"

namespace stal {

struct EmbedOptions {
  bool post_head = false;  // embed with the reconstruction head applied
  std::size_t batch_size = 256;
};

/// Per-window embeddings of one clip in serial order, shape [B, W, J, D]
/// (D = C when post_head).
struct SequenceEmbedding {
  std::string clip_id;
  double fps = 60.0;
  std::size_t window_size = 0;
  std::vector<std::size_t> window_origins;
  Tensor embeddings;
};

/// Normalizes the clip, windows it at stride 1 and runs the block stack.
SequenceEmbedding embed_sequence(const ModelParams& params, const PoseSequence& seq, const SkeletonGraph& graph,
                                 const EmbedOptions& options = {});

/// S_b = ||Z_b||_2 over every (frame, joint, channel) entry of window b.
struct AdmSeries {
  std::string clip_id;
  double fps = 60.0;
  std::size_t window_size = 0;
  std::vector<std::size_t> window_origins;
  std::vector<double> values;

  std::size_t size() const { return values.size(); }
  /// Window centre in frames; fractional indices interpolate the origins.
  double frame_at(double window_index) const;
};

AdmSeries compute_adm(const SequenceEmbedding& embedding);
/// The same reduction on a bare [B, ...] tensor.
std::vector<double> window_norms(const Tensor& embeddings);

/// Delta^2 S_b = S_{b+1} - 2 S_b + S_{b-1}; entry i belongs to window b = i + 1.
std::vector<double> second_difference(const std::vector<double>& values);

enum class TransitionKind { inflection, maximum, minimum };
std::string_view transition_kind_name(TransitionKind kind);
TransitionKind parse_transition_kind(std::string_view name);

struct TransitionPoint {
  double window_index = 0.0;  // fractional at a zero crossing between windows
  double frame = 0.0;
  TransitionKind kind = TransitionKind::inflection;
  double strength = 0.0;
};

struct DetectorConfig {
  std::size_t smoothing = 5;  // odd moving-average length; 1 disables
  double min_strength = 0.0;
  bool extrema = true;  // also report maxima / minima of S

  void validate() const;
};

/// Centered moving average with reflect padding (x[-i] = x[i]).
std::vector<double> moving_average(const std::vector<double>& values, std::size_t length);

/// One sign change of a sequence: nonzero entries `left` < `right` of
/// opposite sign with only exact zeros (or nothing) between them.
struct SignChange {
  std::size_t left = 0;
  std::size_t right = 0;
  double left_value = 0.0;
  double right_value = 0.0;

  /// |right_value - left_value| / (right - left).
  double slope() const;
};
std::vector<SignChange> sign_changes(const std::vector<double>& values);

/// Inflections are the sign changes of Delta^2 S: an adjacent change sits at
/// the interpolated zero crossing, a run of exact zeros at its first index.
/// Extrema are the sign changes of the first difference, placed at the first
/// window after the rising (or falling) side. Strength is the slope of the
/// change. Only positions in [2, B-3] are reported, sorted by window index.
std::vector<TransitionPoint> detect_transitions(const AdmSeries& adm, const DetectorConfig& config = {});

struct AdmCurveRow {
  std::size_t window = 0;
  double frame = 0.0;
  double adm = 0.0;
  std::optional<double> curvature;
  std::optional<TransitionKind> kind;
  std::optional<double> strength;
};

/// `window,frame,adm,curvature,kind,strength`, one row per window. A
/// transition is written on the row of the window whose index is nearest to
/// it (ties to the earlier window); a later transition on the same row wins
/// only if it is stronger.
void export_adm_curve(const AdmSeries& adm, const std::vector<TransitionPoint>& transitions,
                      const std::filesystem::path& path);
std::vector<AdmCurveRow> read_adm_curve(const std::filesystem::path& path);

}  // namespace stal
