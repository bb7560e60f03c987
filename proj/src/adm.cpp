#include "stal/adm.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <sstream>

#include "stal/csv.hpp"
#include "stal/error.hpp"

namespace stal {

SequenceEmbedding embed_sequence(const ModelParams& params, const PoseSequence& seq, const SkeletonGraph& graph,
                                 const EmbedOptions& options) {
  const ModelConfig& cfg = params.config;
  const std::size_t W = cfg.window_size;
  if (seq.num_frames() < W) {
    throw data_error("clip '" + seq.clip_id + "' has " + std::to_string(seq.num_frames()) +
                     " frames, shorter than the window of " + std::to_string(W));
  }
  require_compatible(cfg, seq.num_joints, seq.channels, W);
  if (options.batch_size == 0) throw config_error("embed_sequence: batch size must be >= 1");

  const WindowBatch batch = partition_windows(normalize_poses(seq), W, 1);
  const auto basis = chebyshev_basis(scaled_laplacian(graph), cfg.cheb_k);

  NoGradGuard no_grad;
  std::vector<Tensor> parts;
  for (std::size_t lo = 0; lo < batch.size(); lo += options.batch_size) {
    const std::size_t hi = std::min(batch.size(), lo + options.batch_size);
    const ForwardResult r = forward(params, slice(batch.windows, 0, lo, hi), basis);
    parts.push_back(options.post_head ? r.reconstruction : r.embedding);
  }

  SequenceEmbedding out;
  out.clip_id = seq.clip_id;
  out.fps = seq.fps;
  out.window_size = W;
  for (const auto& o : batch.origins) out.window_origins.push_back(o.start_frame);
  out.embeddings = parts.size() == 1 ? parts[0] : concat(parts, 0);
  return out;
}

double AdmSeries::frame_at(double window_index) const {
  if (window_origins.empty()) throw data_error("AdmSeries: no windows");
  const double last = static_cast<double>(window_origins.size() - 1);
  const double x = std::clamp(window_index, 0.0, last);
  const auto i = static_cast<std::size_t>(std::floor(x));
  double origin = static_cast<double>(window_origins[i]);
  if (i + 1 < window_origins.size()) {
    origin += (x - static_cast<double>(i)) *
              (static_cast<double>(window_origins[i + 1]) - static_cast<double>(window_origins[i]));
  }
  return origin + (static_cast<double>(window_size) - 1.0) / 2.0;
}

std::vector<double> window_norms(const Tensor& embeddings) {
  if (embeddings.rank() == 0 || embeddings.dim(0) == 0) throw data_error("compute_adm: empty embedding list");
  const std::size_t B = embeddings.dim(0);
  const std::size_t per = embeddings.size() / B;
  const auto z = embeddings.data();
  std::vector<double> s(B);
  for (std::size_t b = 0; b < B; ++b) {
    double acc = 0.0;
    for (std::size_t i = 0; i < per; ++i) acc += z[b * per + i] * z[b * per + i];
    s[b] = std::sqrt(acc);
  }
  return s;
}

AdmSeries compute_adm(const SequenceEmbedding& embedding) {
  AdmSeries adm;
  adm.clip_id = embedding.clip_id;
  adm.fps = embedding.fps;
  adm.window_size = embedding.window_size;
  adm.window_origins = embedding.window_origins;
  adm.values = window_norms(embedding.embeddings);
  if (adm.window_origins.size() != adm.values.size()) throw data_error("compute_adm: origin count differs from B");
  return adm;
}

std::vector<double> second_difference(const std::vector<double>& s) {
  if (s.size() < 3) throw data_error("second_difference: need >= 3 windows, got " + std::to_string(s.size()));
  std::vector<double> c(s.size() - 2);
  for (std::size_t b = 1; b + 1 < s.size(); ++b) c[b - 1] = s[b + 1] - 2.0 * s[b] + s[b - 1];
  return c;
}

std::string_view transition_kind_name(TransitionKind kind) {
  switch (kind) {
    case TransitionKind::inflection: return "inflection";
    case TransitionKind::maximum: return "maximum";
    case TransitionKind::minimum: return "minimum";
  }
  return "?";
}

TransitionKind parse_transition_kind(std::string_view name) {
  if (name == "inflection") return TransitionKind::inflection;
  if (name == "maximum") return TransitionKind::maximum;
  if (name == "minimum") return TransitionKind::minimum;
  throw data_error("unknown transition kind '" + std::string(name) + "'");
}

void DetectorConfig::validate() const {
  if (smoothing == 0 || smoothing % 2 == 0) {
    throw config_error("detect.smoothing must be an odd length >= 1, got " + std::to_string(smoothing));
  }
  if (!std::isfinite(min_strength) || min_strength < 0.0) throw config_error("detect.min_strength must be >= 0");
}

std::vector<double> moving_average(const std::vector<double>& x, std::size_t length) {
  if (length == 0 || length % 2 == 0) {
    throw config_error("moving_average: length must be odd, got " + std::to_string(length));
  }
  const std::size_t n = x.size();
  if (length == 1 || n == 0) return x;
  const long long half = static_cast<long long>(length / 2);
  const long long period = 2 * (static_cast<long long>(n) - 1);
  auto reflect = [&](long long i) -> std::size_t {
    if (period == 0) return 0;
    i %= period;
    if (i < 0) i += period;
    return static_cast<std::size_t>(i < static_cast<long long>(n) ? i : period - i);
  };
  std::vector<double> out(n);
  for (std::size_t b = 0; b < n; ++b) {
    double acc = 0.0;
    for (long long o = -half; o <= half; ++o) acc += x[reflect(static_cast<long long>(b) + o)];
    out[b] = acc / static_cast<double>(length);
  }
  return out;
}

double SignChange::slope() const {
  return std::abs(right_value - left_value) / static_cast<double>(right - left);
}

std::vector<SignChange> sign_changes(const std::vector<double>& v) {
  std::vector<SignChange> out;
  std::optional<std::size_t> prev;  // last nonzero entry
  for (std::size_t i = 0; i < v.size(); ++i) {
    if (v[i] == 0.0) continue;
    if (prev && (v[*prev] < 0.0) != (v[i] < 0.0)) out.push_back({*prev, i, v[*prev], v[i]});
    prev = i;
  }
  return out;
}

std::vector<TransitionPoint> detect_transitions(const AdmSeries& adm, const DetectorConfig& config) {
  config.validate();
  const std::size_t B = adm.size();
  if (B < 5) throw data_error("detect_transitions: need >= 5 windows, got " + std::to_string(B));
  const std::vector<double> s = moving_average(adm.values, config.smoothing);
  const double lo = 2.0, hi = static_cast<double>(B - 3);

  std::vector<TransitionPoint> out;
  auto emit = [&](double index, TransitionKind kind, double strength) {
    if (index < lo || index > hi || strength < config.min_strength) return;
    out.push_back({index, adm.frame_at(index), kind, strength});
  };

  // c[i] is Delta^2 at window i + 1.
  const std::vector<double> c = second_difference(s);
  for (const SignChange& sc : sign_changes(c)) {
    double index;
    if (sc.right == sc.left + 1) {
      index = static_cast<double>(sc.left) + 1.0 + sc.left_value / (sc.left_value - sc.right_value);
    } else {
      index = static_cast<double>(sc.left) + 2.0;
    }
    emit(index, TransitionKind::inflection, sc.slope());
  }

  if (config.extrema) {
    // d[i] = s[i+1] - s[i]; the extremum is window left + 1.
    std::vector<double> d(B - 1);
    for (std::size_t i = 0; i + 1 < B; ++i) d[i] = s[i + 1] - s[i];
    for (const SignChange& sc : sign_changes(d)) {
      emit(static_cast<double>(sc.left) + 1.0,
           sc.left_value > 0.0 ? TransitionKind::maximum : TransitionKind::minimum, sc.slope());
    }
  }

  std::stable_sort(out.begin(), out.end(), [](const TransitionPoint& a, const TransitionPoint& b) {
    return a.window_index < b.window_index;
  });
  return out;
}

void export_adm_curve(const AdmSeries& adm, const std::vector<TransitionPoint>& transitions,
                      const std::filesystem::path& path) {
  const std::size_t B = adm.size();
  const std::vector<double> c = B >= 3 ? second_difference(adm.values) : std::vector<double>{};
  std::map<std::size_t, const TransitionPoint*> at_row;
  for (const TransitionPoint& t : transitions) {
    const double r = std::ceil(t.window_index - 0.5);
    if (r < 0.0 || r >= static_cast<double>(B)) throw data_error("export_adm_curve: transition outside the series");
    const auto row = static_cast<std::size_t>(r);
    auto [it, fresh] = at_row.emplace(row, &t);
    if (!fresh && t.strength > it->second->strength) it->second = &t;
  }

  std::ostringstream os;
  os << "window,frame,adm,curvature,kind,strength\n";
  for (std::size_t b = 0; b < B; ++b) {
    os << b << ',' << csv::format_double(adm.frame_at(static_cast<double>(b))) << ','
       << csv::format_double(adm.values[b]) << ',';
    if (b >= 1 && b + 1 < B) os << csv::format_double(c[b - 1]);
    os << ',';
    if (auto it = at_row.find(b); it != at_row.end()) {
      os << transition_kind_name(it->second->kind) << ',' << csv::format_double(it->second->strength);
    } else {
      os << ',';
    }
    os << '\n';
  }
  std::ofstream f(path, std::ios::binary);
  if (!f) throw data_error("cannot write ADM curve to " + path.string());
  f << os.str();
  if (!f) throw data_error("failed writing ADM curve to " + path.string());
}

std::vector<AdmCurveRow> read_adm_curve(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw data_error("cannot read ADM curve " + path.string());
  std::string line;
  if (!std::getline(f, line) || csv::split(line).size() != 6) {
    throw data_error(path.string() + ": missing ADM curve header");
  }
  std::vector<AdmCurveRow> rows;
  std::size_t lineno = 1;
  while (std::getline(f, line)) {
    ++lineno;
    if (line.empty() || line == "\r") continue;
    const auto cols = csv::split(line);
    const std::string ctx = path.string() + ":" + std::to_string(lineno);
    if (cols.size() != 6) throw data_error(ctx + ": expected 6 columns");
    AdmCurveRow r;
    const long long w = csv::parse_int(cols[0], ctx);
    if (w < 0) throw data_error(ctx + ": negative window");
    r.window = static_cast<std::size_t>(w);
    r.frame = csv::parse_double(cols[1], ctx);
    r.adm = csv::parse_double(cols[2], ctx);
    if (!cols[3].empty()) r.curvature = csv::parse_double(cols[3], ctx);
    if (!cols[4].empty()) {
      r.kind = parse_transition_kind(cols[4]);
      r.strength = csv::parse_double(cols[5], ctx);
    }
    rows.push_back(r);
  }
  return rows;
}

}  // namespace stal
