#include "stal/evaluation.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>

#include "stal/csv.hpp"
#include "stal/error.hpp"
#include "stal/parallel.hpp"

namespace stal {

void EvalConfig::validate() const {
  if (!std::isfinite(match_tolerance) || match_tolerance < 0.0) throw config_error("eval.tolerance must be >= 0");
  if (fps_override && !(*fps_override > 0.0 && std::isfinite(*fps_override))) {
    throw config_error("eval.fps_override must be positive");
  }
}

std::size_t ClipMatching::true_positives() const {
  return static_cast<std::size_t>(
      std::count_if(predictions.begin(), predictions.end(), [](const ScoredPrediction& p) { return p.truth; }));
}

ClipMatching match_transitions(const std::vector<TransitionPoint>& predicted, const DemarcationSet& truth,
                               const EvalConfig& config) {
  config.validate();
  ClipMatching m;
  m.truths = truth.labels;
  for (const auto& p : predicted) m.predictions.push_back({p.frame, p.strength, std::nullopt});

  std::vector<std::size_t> order(m.predictions.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    const auto &pa = m.predictions[a], &pb = m.predictions[b];
    if (pa.strength != pb.strength) return pa.strength > pb.strength;
    return pa.frame < pb.frame;
  });

  std::vector<bool> taken(m.truths.size(), false);
  for (std::size_t i : order) {
    ScoredPrediction& p = m.predictions[i];
    std::optional<std::size_t> best;
    double best_dist = 0.0;
    for (std::size_t t = 0; t < m.truths.size(); ++t) {
      if (taken[t]) continue;
      const double dist = std::abs(p.frame - static_cast<double>(m.truths[t].frame));
      if (dist > config.match_tolerance) continue;
      const bool earlier_tie = best && dist == best_dist && m.truths[t].frame < m.truths[*best].frame;
      if (!best || dist < best_dist || earlier_tie) {
        best = t;
        best_dist = dist;
      }
    }
    if (best) {
      taken[*best] = true;
      p.truth = best;
    }
  }
  return m;
}

namespace {

bool counts_for(const ClipMatching& c, const ScoredPrediction& p, const std::optional<std::string>& label) {
  return !label || !p.truth || c.truths[*p.truth].name == *label;
}

std::size_t truth_count(const std::vector<ClipMatching>& clips, const std::optional<std::string>& label) {
  std::size_t n = 0;
  for (const auto& c : clips)
    for (const auto& t : c.truths) n += (!label || t.name == *label);
  return n;
}

}  // namespace

std::optional<double> average_precision(const std::vector<ClipMatching>& clips,
                                        const std::optional<std::string>& label) {
  const std::size_t total = truth_count(clips, label);
  if (total == 0) return std::nullopt;

  struct Ranked {
    double strength;
    bool tp;
  };
  std::vector<Ranked> ranked;
  for (const auto& c : clips)
    for (const auto& p : c.predictions)
      if (counts_for(c, p, label)) ranked.push_back({p.strength, p.truth.has_value()});
  std::stable_sort(ranked.begin(), ranked.end(),
                   [](const Ranked& a, const Ranked& b) { return a.strength > b.strength; });

  std::vector<double> precision(ranked.size());
  std::size_t tp = 0;
  for (std::size_t i = 0; i < ranked.size(); ++i) {
    tp += ranked[i].tp;
    precision[i] = static_cast<double>(tp) / static_cast<double>(i + 1);
  }
  for (std::size_t i = ranked.size(); i-- > 1;) precision[i - 1] = std::max(precision[i - 1], precision[i]);

  double ap = 0.0;
  for (std::size_t i = 0; i < ranked.size(); ++i)
    if (ranked[i].tp) ap += precision[i] / static_cast<double>(total);
  return 100.0 * ap;
}

std::optional<double> localization_latency(const std::vector<ClipMatching>& clips,
                                           const std::optional<std::string>& label) {
  double sum = 0.0;
  std::size_t n = 0;
  for (const auto& c : clips) {
    for (const auto& p : c.predictions) {
      if (!p.truth || !counts_for(c, p, label)) continue;
      sum += std::abs(p.frame - static_cast<double>(c.truths[*p.truth].frame)) * 1000.0 / c.fps;
      ++n;
    }
  }
  if (n == 0) return std::nullopt;
  return sum / static_cast<double>(n);
}

std::vector<ReportRow> score_partition(const std::string& name, const std::vector<ClipMatching>& clips,
                                       const EvalConfig& config) {
  std::vector<std::string> labels;
  for (const auto& c : clips)
    for (const auto& t : c.truths)
      if (std::find(labels.begin(), labels.end(), t.name) == labels.end()) labels.push_back(t.name);

  ReportRow all{name, "all", std::nullopt, localization_latency(clips), 0, 0, 0};
  for (const auto& c : clips) {
    const std::size_t tp = c.true_positives();
    all.tp += tp;
    all.fp += c.predictions.size() - tp;
    all.fn += c.truths.size() - tp;
  }

  std::vector<ReportRow> rows{all};
  if (!config.per_label) {
    rows[0].ap = average_precision(clips);
    return rows;
  }
  double ap_sum = 0.0;
  for (const auto& label : labels) {
    ReportRow r{name, label, average_precision(clips, label), localization_latency(clips, label), 0, 0, 0};
    for (const auto& c : clips) {
      for (const auto& p : c.predictions) {
        if (!p.truth) ++r.fp;
        else if (c.truths[*p.truth].name == label) ++r.tp;
      }
    }
    r.fn = truth_count(clips, label) - r.tp;
    ap_sum += *r.ap;
    rows.push_back(r);
  }
  if (!labels.empty()) rows[0].ap = ap_sum / static_cast<double>(labels.size());
  return rows;
}

namespace {

std::optional<double> mean_present(const std::vector<std::optional<double>>& values) {
  double sum = 0.0;
  std::size_t n = 0;
  for (const auto& v : values)
    if (v) {
      sum += *v;
      ++n;
    }
  if (n == 0) return std::nullopt;
  return sum / static_cast<double>(n);
}

}  // namespace

EvalReport run_eval(const std::vector<EvalPartition>& partitions, const ModelParams& params,
                    const SkeletonGraph& graph, const EvalOptions& options) {
  options.eval.validate();
  options.detector.validate();
  if (partitions.empty()) throw config_error("run_eval: no partitions");

  EvalReport report;
  std::vector<std::vector<ReportRow>> per_partition;
  for (const EvalPartition& part : partitions) {
    const std::size_t n = part.clips.size();
    std::vector<std::optional<ClipMatching>> results(n);
    std::vector<std::string> why(n);
    for (std::size_t i = 0; i < n; ++i) {
      const PoseSequence& clip = part.clips[i];
      if (!clip.demarcations) why[i] = clip.clip_id + " (unannotated)";
      else if (clip.num_frames() < params.config.window_size + 4) why[i] = clip.clip_id + " (too short)";
    }
    parallel_for(n, 1, [&](std::size_t lo, std::size_t hi) {
      for (std::size_t i = lo; i < hi; ++i) {
        if (!why[i].empty()) continue;
        const PoseSequence& clip = part.clips[i];
        const AdmSeries adm = compute_adm(embed_sequence(params, clip, graph, options.embed));
        std::vector<TransitionPoint> inflections;
        for (const auto& t : detect_transitions(adm, options.detector))
          if (t.kind == TransitionKind::inflection) inflections.push_back(t);
        ClipMatching m = match_transitions(inflections, *clip.demarcations, options.eval);
        m.clip_id = clip.clip_id;
        m.fps = options.eval.fps_override.value_or(clip.fps);
        results[i] = std::move(m);
      }
    });
    std::vector<ClipMatching> scored;
    for (std::size_t i = 0; i < n; ++i) {
      if (results[i]) scored.push_back(std::move(*results[i]));
      else report.skipped.push_back(why[i]);
    }
    per_partition.push_back(score_partition(part.name, scored, options.eval));
    for (auto& r : per_partition.back()) report.rows.push_back(r);
    for (auto& m : scored) report.matchings.push_back(std::move(m));
  }

  if (partitions.size() > 1) {
    std::vector<std::string> labels;
    for (const auto& rows : per_partition)
      for (const auto& r : rows)
        if (std::find(labels.begin(), labels.end(), r.label) == labels.end()) labels.push_back(r.label);
    for (const auto& label : labels) {
      ReportRow avg{"Avg", label, std::nullopt, std::nullopt, 0, 0, 0};
      std::vector<std::optional<double>> aps, lats;
      for (const auto& rows : per_partition) {
        for (const auto& r : rows) {
          if (r.label != label) continue;
          aps.push_back(r.ap);
          lats.push_back(r.latency_ms);
          avg.tp += r.tp;
          avg.fp += r.fp;
          avg.fn += r.fn;
        }
      }
      avg.ap = mean_present(aps);
      avg.latency_ms = mean_present(lats);
      report.rows.push_back(avg);
    }
  }
  return report;
}

std::string eval_report_csv(const EvalReport& report) {
  std::ostringstream os;
  os << "partition,label,ap,latency_ms,tp,fp,fn\n";
  for (const auto& r : report.rows) {
    os << r.partition << ',' << r.label << ',' << (r.ap ? csv::format_double(*r.ap) : "") << ','
       << (r.latency_ms ? csv::format_double(*r.latency_ms) : "") << ',' << r.tp << ',' << r.fp << ',' << r.fn
       << '\n';
  }
  return os.str();
}

void write_eval_report(const EvalReport& report, const std::filesystem::path& path) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw data_error("cannot write eval report to " + path.string());
  f << eval_report_csv(report);
  if (!f) throw data_error("failed writing eval report to " + path.string());
}

std::string eval_report_table(const EvalReport& report) {
  std::vector<const ReportRow*> summary;
  for (const auto& r : report.rows)
    if (r.label == "all") summary.push_back(&r);
  auto cell = [](const std::optional<double>& v) {
    if (!v) return std::string("-");
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.2f", *v);
    return std::string(buf);
  };
  char buf[64];
  std::ostringstream os;
  std::snprintf(buf, sizeof buf, "%-16s", "");
  os << buf;
  for (const auto* r : summary) {
    std::snprintf(buf, sizeof buf, "%10s", r->partition.c_str());
    os << buf;
  }
  os << '\n';
  auto line = [&](const char* name, auto get) {
    std::snprintf(buf, sizeof buf, "%-16s", name);
    os << buf;
    for (const auto* r : summary) {
      std::snprintf(buf, sizeof buf, "%10s", get(*r).c_str());
      os << buf;
    }
    os << '\n';
  };
  line("mAP (%)", [&](const ReportRow& r) { return cell(r.ap); });
  line("Latency (ms)", [&](const ReportRow& r) { return cell(r.latency_ms); });
  line("TP/FP/FN", [](const ReportRow& r) {
    return std::to_string(r.tp) + "/" + std::to_string(r.fp) + "/" + std::to_string(r.fn);
  });
  return os.str();
}

}  // namespace stal
