#include "stal/config.hpp"

#include <charconv>
#include <fstream>
#include <functional>
#include <sstream>

#include "stal/csv.hpp"
#include "stal/error.hpp"

namespace stal {

namespace {

std::string trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return std::string(s.substr(b, e - b + 1));
}

std::uint64_t to_u64(std::string_view v, std::string_view key) {
  std::uint64_t out = 0;
  const auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc() || p != v.data() + v.size() || v.empty()) {
    throw config_error(std::string(key) + ": expected a non-negative integer, got '" + std::string(v) + "'");
  }
  return out;
}

double to_double(std::string_view v, std::string_view key) {
  try {
    return csv::parse_double(v, std::string(key));
  } catch (const Error& e) {
    throw config_error(e.what());
  }
}

bool to_bool(std::string_view v, std::string_view key) {
  if (v == "true" || v == "1" || v == "on") return true;
  if (v == "false" || v == "0" || v == "off") return false;
  throw config_error(std::string(key) + ": expected true or false, got '" + std::string(v) + "'");
}

std::string str(double v) { return csv::format_double(v); }
std::string str(std::uint64_t v) { return std::to_string(v); }
std::string str(bool v) { return v ? "true" : "false"; }

struct Field {
  const char* key;
  std::function<void(RunConfig&, std::string_view)> set;
  std::function<std::string(const RunConfig&)> get;
};

#define STAL_SIZE(name, member)                                                           \
  Field{name, [](RunConfig& c, std::string_view v) { c.member = to_u64(v, name); },       \
        [](const RunConfig& c) { return str(static_cast<std::uint64_t>(c.member)); }}
#define STAL_DOUBLE(name, member)                                                         \
  Field{name, [](RunConfig& c, std::string_view v) { c.member = to_double(v, name); },    \
        [](const RunConfig& c) { return str(c.member); }}
#define STAL_BOOL(name, member)                                                           \
  Field{name, [](RunConfig& c, std::string_view v) { c.member = to_bool(v, name); },      \
        [](const RunConfig& c) { return str(c.member); }}

const std::vector<Field>& fields() {
  static const std::vector<Field> table{
      STAL_SIZE("model.blocks", model.num_blocks),
      STAL_SIZE("model.embed_dim", model.embed_dim),
      STAL_SIZE("model.cheb_k", model.cheb_k),
      STAL_SIZE("model.window", model.window_size),
      STAL_SIZE("model.joints", model.num_joints),
      STAL_SIZE("model.channels", model.in_channels),
      STAL_SIZE("model.seed", model.seed),
      STAL_SIZE("train.epochs", train.epochs),
      STAL_DOUBLE("train.lr", train.learning_rate),
      STAL_SIZE("train.batch_size", train.batch_size),
      STAL_DOUBLE("train.sigma", train.sigma),
      STAL_DOUBLE("train.beta1", train.adam_beta1),
      STAL_DOUBLE("train.beta2", train.adam_beta2),
      STAL_DOUBLE("train.epsilon", train.adam_epsilon),
      STAL_SIZE("train.seed", train.seed),
      STAL_SIZE("train.checkpoint_every", train.checkpoint_every),
      STAL_DOUBLE("train.grad_clip", train.grad_clip),
      STAL_DOUBLE("train.val_fraction", train.val_fraction),
      STAL_SIZE("train.stride", train.stride),
      STAL_DOUBLE("eval.tolerance", eval.match_tolerance),
      STAL_BOOL("eval.per_label", eval.per_label),
      Field{"eval.fps_override",
            [](RunConfig& c, std::string_view v) {
              if (v.empty() || v == "none") c.eval.fps_override.reset();
              else c.eval.fps_override = to_double(v, "eval.fps_override");
            },
            [](const RunConfig& c) { return c.eval.fps_override ? str(*c.eval.fps_override) : "none"; }},
      STAL_SIZE("detect.smoothing", detect.smoothing),
      STAL_DOUBLE("detect.min_strength", detect.min_strength),
      STAL_BOOL("detect.extrema", detect.extrema),
      STAL_BOOL("detect.use_head", embed.post_head),
      STAL_SIZE("detect.batch_size", embed.batch_size),
      STAL_DOUBLE("data.fps", data_fps),
      Field{"data.format",
            [](RunConfig& c, std::string_view v) {
              try {
                c.data_format = parse_pose_format(v);
              } catch (const Error& e) {
                throw config_error(e.what());
              }
            },
            [](const RunConfig& c) { return std::string(pose_format_name(c.data_format)); }},
      STAL_SIZE("synth.clips", synth_clips),
      STAL_SIZE("synth.seed", synth_seed),
      STAL_SIZE("synth.min_regimes", synth.min_regimes),
      STAL_SIZE("synth.max_regimes", synth.max_regimes),
      STAL_SIZE("synth.min_duration", synth.min_duration),
      STAL_SIZE("synth.max_duration", synth.max_duration),
      STAL_DOUBLE("synth.jitter", synth.jitter_sigma),
      STAL_DOUBLE("synth.fps", synth.fps),
      STAL_DOUBLE("synth.speed_contrast", synth.min_speed_contrast),
      STAL_SIZE("gradcheck.batch", gradcheck_batch),
      STAL_DOUBLE("gradcheck.threshold", gradcheck_threshold),
  };
  return table;
}

#undef STAL_SIZE
#undef STAL_DOUBLE
#undef STAL_BOOL

}  // namespace

void RunConfig::set(std::string_view key, std::string_view value) {
  for (const Field& f : fields()) {
    if (key == f.key) {
      f.set(*this, value);
      return;
    }
  }
  throw config_error("unknown config key '" + std::string(key) + "'");
}

void RunConfig::merge_text(std::string_view text, const std::string& source) {
  std::size_t lineno = 0;
  std::size_t pos = 0;
  while (pos <= text.size()) {
    const std::size_t nl = std::min(text.find('\n', pos), text.size());
    std::string_view line = text.substr(pos, nl - pos);
    pos = nl + 1;
    ++lineno;
    if (const auto hash = line.find('#'); hash != std::string_view::npos) line = line.substr(0, hash);
    const std::string t = trim(line);
    if (t.empty()) continue;
    const auto eq = t.find('=');
    if (eq == std::string::npos) {
      throw config_error(source + ":" + std::to_string(lineno) + ": expected 'section.key = value'");
    }
    try {
      set(trim(std::string_view(t).substr(0, eq)), trim(std::string_view(t).substr(eq + 1)));
    } catch (const Error& e) {
      throw config_error(source + ":" + std::to_string(lineno) + ": " + e.what());
    }
  }
}

void RunConfig::merge_file(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw config_error("cannot read config file " + path.string());
  std::ostringstream ss;
  ss << f.rdbuf();
  merge_text(ss.str(), path.string());
}

void RunConfig::validate() const {
  model.validate();
  train.validate();
  eval.validate();
  detect.validate();
  if (embed.batch_size == 0) throw config_error("detect.batch_size must be >= 1");
  if (!(data_fps > 0.0) || !std::isfinite(data_fps)) throw config_error("data.fps must be positive");
  synth.validate();
  if (synth_clips == 0) throw config_error("synth.clips must be >= 1");
  if (gradcheck_batch == 0) throw config_error("gradcheck.batch must be >= 1");
  if (!(gradcheck_threshold > 0.0)) throw config_error("gradcheck.threshold must be > 0");
}

std::string RunConfig::echo() const {
  std::string out;
  for (const Field& f : fields()) out += std::string(f.key) + " = " + f.get(*this) + "\n";
  return out;
}

std::vector<std::string> RunConfig::keys() {
  std::vector<std::string> out;
  for (const Field& f : fields()) out.emplace_back(f.key);
  return out;
}

}  // namespace stal
