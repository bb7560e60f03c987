#include "stal/synth.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numbers>

#include "stal/error.hpp"
#include "stal/seed.hpp"

namespace stal {

namespace {

using Pose = std::vector<std::array<double, 2>>;

Pose pose_at(const RegimeSpec& r, const Pose& base, double t, double fps) {
  Pose p = base;
  switch (r.kind) {
    case MotionKind::stationary:
      break;
    case MotionKind::oscillation: {
      const double w = 2.0 * std::numbers::pi * r.frequency_hz / fps;
      for (std::size_t j = 0; j < p.size(); ++j) {
        const double phi = r.phase_offsets.empty() ? 0.0 : r.phase_offsets[j];
        p[j][0] += r.amplitude * (std::sin(w * t + phi) - std::sin(phi));
      }
      break;
    }
    case MotionKind::rotation: {
      double cx = 0.0, cy = 0.0;
      for (const auto& q : base) {
        cx += q[0];
        cy += q[1];
      }
      cx /= static_cast<double>(base.size());
      cy /= static_cast<double>(base.size());
      const double c = std::cos(r.angular_velocity * t), s = std::sin(r.angular_velocity * t);
      for (std::size_t j = 0; j < p.size(); ++j) {
        const double dx = base[j][0] - cx, dy = base[j][1] - cy;
        p[j] = {cx + c * dx - s * dy, cy + s * dx + c * dy};
      }
      break;
    }
    case MotionKind::drift:
      for (auto& q : p) {
        q[0] += r.vx * t;
        q[1] += r.vy * t;
      }
      break;
  }
  return p;
}

Pose rest() {
  const auto& r = rest_pose();
  return Pose(r.begin(), r.end());
}

}  // namespace

std::string_view motion_kind_name(MotionKind kind) {
  switch (kind) {
    case MotionKind::stationary: return "stationary";
    case MotionKind::oscillation: return "oscillation";
    case MotionKind::rotation: return "rotation";
    case MotionKind::drift: return "drift";
  }
  return "?";
}

RegimeSpec RegimeSpec::stationary(std::size_t duration) {
  RegimeSpec r;
  r.duration = duration;
  return r;
}

RegimeSpec RegimeSpec::oscillation(std::size_t duration, double frequency_hz, double amplitude) {
  RegimeSpec r;
  r.duration = duration;
  r.kind = MotionKind::oscillation;
  r.frequency_hz = frequency_hz;
  r.amplitude = amplitude;
  return r;
}

RegimeSpec RegimeSpec::rotation(std::size_t duration, double angular_velocity) {
  RegimeSpec r;
  r.duration = duration;
  r.kind = MotionKind::rotation;
  r.angular_velocity = angular_velocity;
  return r;
}

RegimeSpec RegimeSpec::drift(std::size_t duration, double vx, double vy) {
  RegimeSpec r;
  r.duration = duration;
  r.kind = MotionKind::drift;
  r.vx = vx;
  r.vy = vy;
  return r;
}

void RegimeSpec::validate(std::size_t num_joints) const {
  if (duration == 0) throw config_error("regime duration must be >= 1 frame");
  for (double v : {frequency_hz, amplitude, angular_velocity, vx, vy}) {
    if (!std::isfinite(v)) throw config_error("regime parameters must be finite");
  }
  if (!phase_offsets.empty() && phase_offsets.size() != num_joints) {
    throw config_error("regime phase offsets: expected one per joint");
  }
  for (double v : phase_offsets) {
    if (!std::isfinite(v)) throw config_error("regime phase offsets must be finite");
  }
}

const std::array<std::array<double, 2>, kMpiiJoints>& rest_pose() {
  static const std::array<std::array<double, 2>, kMpiiJoints> pose{{
      {-0.12, -0.9},   // r_ankle
      {-0.12, -0.45},  // r_knee
      {-0.1, 0.0},     // r_hip
      {0.1, 0.0},      // l_hip
      {0.12, -0.45},   // l_knee
      {0.12, -0.9},    // l_ankle
      {0.0, 0.0},      // pelvis
      {0.0, 0.5},      // thorax
      {0.0, 0.65},     // upper_neck
      {0.0, 0.85},     // head_top
      {-0.27, -0.05},  // r_wrist
      {-0.25, 0.2},    // r_elbow
      {-0.2, 0.5},     // r_shoulder
      {0.2, 0.5},      // l_shoulder
      {0.25, 0.2},     // l_elbow
      {0.27, -0.05},   // l_wrist
  }};
  return pose;
}

SyntheticClip generate_clip(const std::vector<RegimeSpec>& specs, const SkeletonGraph& skeleton, std::uint64_t seed,
                            const ClipOptions& options) {
  if (skeleton.num_joints != kMpiiJoints) {
    throw config_error("generate_clip: the rest pose is defined for the 16-joint MPII skeleton");
  }
  if (specs.empty()) throw config_error("generate_clip: need at least one regime");
  if (!(options.fps > 0.0)) throw config_error("generate_clip: fps must be positive");
  if (!(options.jitter_sigma >= 0.0) || !std::isfinite(options.jitter_sigma)) {
    throw config_error("generate_clip: jitter must be >= 0");
  }
  std::size_t total = 0;
  for (const auto& r : specs) {
    r.validate(kMpiiJoints);
    total += r.duration;
  }
  if (total < options.min_frames) {
    throw config_error("generate_clip: " + std::to_string(total) + " frames is shorter than the window of " +
                       std::to_string(options.min_frames));
  }

  SyntheticClip clip;
  clip.seed = seed;
  clip.specs = specs;
  PoseSequence& seq = clip.sequence;
  seq.clip_id = options.clip_id;
  seq.fps = options.fps;
  seq.num_joints = kMpiiJoints;
  seq.channels = 2;
  seq.coords.reserve(total * kMpiiJoints * 2);

  Pose base = rest();
  std::size_t frame = 0;
  for (std::size_t i = 0; i < specs.size(); ++i) {
    if (i > 0) clip.planted_transitions.push_back(frame);
    for (std::size_t t = 0; t < specs[i].duration; ++t) {
      for (const auto& q : pose_at(specs[i], base, static_cast<double>(t), options.fps)) {
        seq.coords.push_back(q[0]);
        seq.coords.push_back(q[1]);
      }
    }
    base = pose_at(specs[i], base, static_cast<double>(specs[i].duration), options.fps);
    frame += specs[i].duration;
  }

  if (options.jitter_sigma > 0.0) {
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> noise(0.0, options.jitter_sigma);
    for (double& v : seq.coords) v += noise(rng);
  }

  DemarcationSet d;
  for (std::size_t i = 0; i < clip.planted_transitions.size(); ++i) {
    d.labels.push_back({"t" + std::to_string(i + 1), clip.planted_transitions[i]});
  }
  seq.demarcations = d;
  seq.validate();
  return clip;
}

void SamplerConfig::validate() const {
  if (min_regimes == 0 || min_regimes > max_regimes) throw config_error("sampler: invalid regime count range");
  if (min_duration == 0 || min_duration > max_duration) throw config_error("sampler: invalid duration range");
  if (!(jitter_sigma >= 0.0) || !std::isfinite(jitter_sigma)) throw config_error("sampler: jitter must be >= 0");
  if (!(fps > 0.0)) throw config_error("sampler: fps must be positive");
  if (!(min_speed_contrast >= 0.0)) throw config_error("sampler: speed contrast must be >= 0");
}

double regime_rms_speed(const RegimeSpec& spec, double fps) {
  Pose prev = rest();
  double acc = 0.0;
  std::size_t n = 0;
  for (std::size_t t = 1; t < spec.duration; ++t) {
    const Pose p = pose_at(spec, rest(), static_cast<double>(t), fps);
    for (std::size_t j = 0; j < p.size(); ++j) {
      const double dx = p[j][0] - prev[j][0], dy = p[j][1] - prev[j][1];
      acc += dx * dx + dy * dy;
      ++n;
    }
    prev = p;
  }
  return n == 0 ? 0.0 : std::sqrt(acc / static_cast<double>(n));
}

std::vector<RegimeSpec> sample_regimes(const SamplerConfig& config, std::mt19937_64& rng) {
  config.validate();
  auto uniform = [&](double lo, double hi) { return std::uniform_real_distribution<double>(lo, hi)(rng); };
  auto pick = [&](std::size_t lo, std::size_t hi) { return std::uniform_int_distribution<std::size_t>(lo, hi)(rng); };

  for (int attempt = 0; attempt < 1000; ++attempt) {
    std::vector<RegimeSpec> specs;
    const std::size_t n = pick(config.min_regimes, config.max_regimes);
    int prev_kind = -1;
    for (std::size_t i = 0; i < n; ++i) {
      int kind;
      do kind = static_cast<int>(pick(0, 3));
      while (kind == prev_kind);
      prev_kind = kind;
      const std::size_t dur = pick(config.min_duration, config.max_duration);
      RegimeSpec r;
      switch (static_cast<MotionKind>(kind)) {
        case MotionKind::stationary:
          r = RegimeSpec::stationary(dur);
          break;
        case MotionKind::oscillation:
          r = RegimeSpec::oscillation(dur, uniform(1.0, 3.0), uniform(0.1, 0.3));
          r.phase_offsets.resize(kMpiiJoints);
          for (double& p : r.phase_offsets) p = uniform(0.0, 2.0 * std::numbers::pi);
          break;
        case MotionKind::rotation:
          r = RegimeSpec::rotation(dur, (pick(0, 1) ? 1.0 : -1.0) * uniform(0.01, 0.03));
          break;
        case MotionKind::drift: {
          const double speed = uniform(0.005, 0.02), angle = uniform(0.0, 2.0 * std::numbers::pi);
          r = RegimeSpec::drift(dur, speed * std::cos(angle), speed * std::sin(angle));
          break;
        }
      }
      specs.push_back(std::move(r));
    }
    bool ok = true;
    if (config.min_speed_contrast > 0.0) {
      for (std::size_t i = 1; i < specs.size() && ok; ++i) {
        ok = std::abs(regime_rms_speed(specs[i], config.fps) - regime_rms_speed(specs[i - 1], config.fps)) >=
             config.min_speed_contrast * config.jitter_sigma;
      }
    }
    if (ok) return specs;
  }
  throw config_error("sampler: speed contrast unattainable with this jitter");
}

std::vector<SyntheticClip> generate_corpus(std::size_t n_clips, const SamplerConfig& config, std::uint64_t seed) {
  if (n_clips == 0) throw config_error("generate_corpus: need at least one clip");
  config.validate();
  const SkeletonGraph skeleton = build_mpii_skeleton();
  std::vector<SyntheticClip> corpus;
  for (std::size_t i = 0; i < n_clips; ++i) {
    const std::uint64_t clip_seed = derive_seed(seed, {i});
    std::mt19937_64 rng(derive_seed(clip_seed, {1}));
    ClipOptions opt;
    opt.jitter_sigma = config.jitter_sigma;
    opt.fps = config.fps;
    opt.min_frames = 1;
    char name[32];
    std::snprintf(name, sizeof name, "synth_%03zu", i);
    opt.clip_id = name;
    corpus.push_back(generate_clip(sample_regimes(config, rng), skeleton, derive_seed(clip_seed, {2}), opt));
  }
  return corpus;
}

void write_corpus(const std::vector<SyntheticClip>& corpus, const std::filesystem::path& dir) {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) throw data_error("cannot create " + dir.string() + ": " + ec.message());
  for (const auto& c : corpus) {
    const auto pose = dir / (c.sequence.clip_id + ".csv");
    save_pose_file(c.sequence, pose);
    save_annotation_file(*c.sequence.demarcations, annotation_path_for(pose));
  }
}

std::vector<double> curvature_oracle(const std::vector<double>& s) {
  const std::size_t B = s.size();
  if (B < 5) throw data_error("curvature_oracle: need >= 5 values");
  auto d2 = [&](std::size_t b) { return s[b + 1] - 2.0 * s[b] + s[b - 1]; };
  std::vector<double> found;
  for (std::size_t b = 2; b + 3 <= B; ++b) {
    if (d2(b) != 0.0 || d2(b - 1) == 0.0) continue;
    std::size_t r = b + 1;
    while (r + 1 < B && d2(r) == 0.0) ++r;
    if (r + 1 < B && d2(b - 1) * d2(r) < 0.0) found.push_back(static_cast<double>(b));
  }
  for (std::size_t b = 1; b + 2 < B; ++b) {
    const double u = d2(b), v = d2(b + 1);
    if (u * v < 0.0) {
      const double x = static_cast<double>(b) + u / (u - v);
      if (x >= 2.0 && x <= static_cast<double>(B - 3)) found.push_back(x);
    }
  }
  std::sort(found.begin(), found.end());
  return found;
}

}  // namespace stal
