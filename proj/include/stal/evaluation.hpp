#pragma once

#include <cstddef>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "stal/adm.hpp"
#include "stal/model.hpp"
#include "stal/skeleton.hpp"

namespace stal {

struct EvalConfig {
  double match_tolerance = 5.0;  // frames
  std::optional<double> fps_override;
  bool per_label = false;

  void validate() const;
};

struct ScoredPrediction {
  double frame = 0.0;
  double strength = 0.0;
  std::optional<std::size_t> truth;  // index into ClipMatching::truths when matched
};

struct ClipMatching {
  std::string clip_id;
  double fps = 60.0;
  std::vector<ScoredPrediction> predictions;
  std::vector<Demarcation> truths;

  std::size_t true_positives() const;
};

/// Greedy one-to-one matching: predictions in descending strength (ties to the
/// earlier frame) each take the nearest unmatched truth within the tolerance,
/// ties to the earlier truth.
ClipMatching match_transitions(const std::vector<TransitionPoint>& predicted, const DemarcationSet& truth,
                               const EvalConfig& config);

/// Area under the monotone-envelope PR curve of the pooled predictions, in
/// percent. With a label, only truths of that name count; predictions matched
/// to other labels are left out of the ranking. Absent without truths.
std::optional<double> average_precision(const std::vector<ClipMatching>& clips,
                                        const std::optional<std::string>& label = std::nullopt);

/// Mean |frame_pred - frame_truth| * 1000 / fps over matched pairs; absent
/// when nothing matched.
std::optional<double> localization_latency(const std::vector<ClipMatching>& clips,
                                           const std::optional<std::string>& label = std::nullopt);

struct ReportRow {
  std::string partition;
  std::string label;  // "all" for the partition summary
  std::optional<double> ap;
  std::optional<double> latency_ms;
  std::size_t tp = 0, fp = 0, fn = 0;
};

/// Summary row (mAP over labels when per_label, else pooled AP) followed by
/// one row per label in first-seen order when per_label.
std::vector<ReportRow> score_partition(const std::string& name, const std::vector<ClipMatching>& clips,
                                       const EvalConfig& config);

struct EvalPartition {
  std::string name;
  std::vector<PoseSequence> clips;
};

struct EvalOptions {
  EvalConfig eval;
  DetectorConfig detector;
  EmbedOptions embed;
};

struct EvalReport {
  std::vector<ReportRow> rows;
  std::vector<ClipMatching> matchings;  // every scored clip, partition order
  std::vector<std::string> skipped;     // unannotated or too short
};

/// Embed, ADM, detect and match every annotated clip. Inflections are the
/// predictions; extrema are not scored. With several partitions an "Avg"
/// partition averages their summary rows.
EvalReport run_eval(const std::vector<EvalPartition>& partitions, const ModelParams& params,
                    const SkeletonGraph& graph, const EvalOptions& options = {});

/// `partition,label,ap,latency_ms,tp,fp,fn`; absent values are empty.
std::string eval_report_csv(const EvalReport& report);
void write_eval_report(const EvalReport& report, const std::filesystem::path& path);
/// mAP (%) and latency (ms) per partition as columns.
std::string eval_report_table(const EvalReport& report);

}  // namespace stal
