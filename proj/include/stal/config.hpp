#pragma once

#include <filesystem>
#include <string>
#include <string_view>
#include <vector>

#include "stal/adm.hpp"
#include "stal/evaluation.hpp"
#include "stal/model.hpp"
#include "stal/skeleton.hpp"
#include "stal/synth.hpp"
#include "stal/trainer.hpp"

namespace stal {

/// Everything a command can be configured with. Text form: one
/// `section.key = value` per line, `#` starts a comment.
struct RunConfig {
  ModelConfig model;
  TrainConfig train;
  EvalConfig eval;
  DetectorConfig detect;
  EmbedOptions embed;
  double data_fps = 60.0;
  PoseFormat data_format = PoseFormat::generic_keypoints;
  SamplerConfig synth;
  std::size_t synth_clips = 20;
  std::uint64_t synth_seed = 0;
  std::size_t gradcheck_batch = 2;
  double gradcheck_threshold = 1e-5;

  /// Throws a config error for unknown keys or unparsable values.
  void set(std::string_view key, std::string_view value);
  /// Applies every line of a config text in order.
  void merge_text(std::string_view text, const std::string& source = "config");
  void merge_file(const std::filesystem::path& path);
  void validate() const;

  /// Every key with its current value, in a form merge_text reads back.
  std::string echo() const;
  static std::vector<std::string> keys();
};

}  // namespace stal
