#include <algorithm>
#include <cmath>
#include <fstream>
#include <sstream>

#include "stal/csv.hpp"
#include "stal/error.hpp"
#include "stal/skeleton.hpp"

namespace stal {
namespace {

namespace fs = std::filesystem;

constexpr std::string_view kPoseHeader = "frame,joint,x,y,valid";
constexpr std::string_view kAnnotationHeader = "name,frame";
constexpr std::string_view kAnnotationSuffix = ".annot.csv";

std::vector<std::string> read_lines(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw data_error("cannot open " + path.string());
  std::vector<std::string> lines;
  std::string line;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.find_first_not_of(" \t") == std::string::npos) continue;
    lines.push_back(line);
  }
  return lines;
}

void expect_header(const std::vector<std::string>& lines, std::string_view header, const fs::path& path) {
  if (lines.empty()) throw data_error(path.string() + ": empty file");
  auto fields = csv::split(lines.front());
  auto want = csv::split(header);
  if (fields != want) {
    throw data_error(path.string() + ": expected header '" + std::string(header) + "', got '" + lines.front() + "'");
  }
}

struct PoseRow {
  long long frame;
  long long joint;
  double x;
  double y;
  bool valid;
};

// Linear interpolation of invalid samples from the nearest valid frames of the
// same joint; constant extrapolation at the ends.
void fill_invalid(PoseSequence& seq, const std::vector<std::uint8_t>& valid) {
  const std::size_t F = seq.num_frames();
  const std::size_t J = seq.num_joints;
  for (std::size_t j = 0; j < J; ++j) {
    std::vector<std::size_t> good;
    for (std::size_t f = 0; f < F; ++f)
      if (valid[f * J + j]) good.push_back(f);
    if (good.empty()) {
      throw data_error(seq.clip_id + ": joint " + std::to_string(j) + " is invalid in every frame");
    }
    if (good.size() == F) continue;
    std::size_t k = 0;
    for (std::size_t f = 0; f < F; ++f) {
      if (valid[f * J + j]) continue;
      while (k < good.size() && good[k] < f) ++k;
      for (std::size_t c = 0; c < seq.channels; ++c) {
        if (k == 0) {
          seq.at(f, j, c) = seq.at(good.front(), j, c);
        } else if (k == good.size()) {
          seq.at(f, j, c) = seq.at(good.back(), j, c);
        } else {
          const std::size_t lo = good[k - 1];
          const std::size_t hi = good[k];
          const double t = static_cast<double>(f - lo) / static_cast<double>(hi - lo);
          seq.at(f, j, c) = (1.0 - t) * seq.at(lo, j, c) + t * seq.at(hi, j, c);
        }
      }
    }
  }
}

}  // namespace

PoseFormat parse_pose_format(std::string_view name) {
  if (name == "dsv-annotation") return PoseFormat::dsv_annotation;
  if (name == "generic-keypoints") return PoseFormat::generic_keypoints;
  throw config_error("unknown pose format '" + std::string(name) + "' (dsv-annotation | generic-keypoints)");
}

std::string_view pose_format_name(PoseFormat format) {
  return format == PoseFormat::dsv_annotation ? "dsv-annotation" : "generic-keypoints";
}

fs::path annotation_path_for(const fs::path& pose_file) {
  fs::path p = pose_file;
  p.replace_filename(pose_file.stem().string() + std::string(kAnnotationSuffix));
  return p;
}

bool is_annotation_file(const fs::path& path) {
  const std::string name = path.filename().string();
  return name.size() >= kAnnotationSuffix.size() &&
         name.compare(name.size() - kAnnotationSuffix.size(), kAnnotationSuffix.size(), kAnnotationSuffix) == 0;
}

DemarcationSet load_annotation_file(const fs::path& path) {
  const auto lines = read_lines(path);
  expect_header(lines, kAnnotationHeader, path);
  DemarcationSet set;
  for (std::size_t r = 1; r < lines.size(); ++r) {
    const std::string where = path.string() + " row " + std::to_string(r);
    auto f = csv::split(lines[r]);
    if (f.size() != 2 || f[0].empty()) throw data_error(where + ": expected 'name,frame'");
    const long long frame = csv::parse_int(f[1], where);
    if (frame < 0) throw data_error(where + ": negative frame index");
    set.labels.push_back({std::string(f[0]), static_cast<std::size_t>(frame)});
  }
  return set;
}

void save_annotation_file(const DemarcationSet& set, const fs::path& path) {
  std::ofstream out(path);
  if (!out) throw data_error("cannot write " + path.string());
  out << kAnnotationHeader << '\n';
  for (const auto& d : set.labels) out << d.name << ',' << d.frame << '\n';
  if (!out) throw data_error("failed writing " + path.string());
}

PoseSequence load_pose_file(const fs::path& path, PoseFormat format, const LoadOptions& options) {
  if (options.num_joints == 0) throw config_error("configured joint count must be positive");
  const auto lines = read_lines(path);
  expect_header(lines, kPoseHeader, path);

  std::vector<PoseRow> rows;
  rows.reserve(lines.size() - 1);
  for (std::size_t r = 1; r < lines.size(); ++r) {
    const std::string where = path.string() + " row " + std::to_string(r);
    auto f = csv::split(lines[r]);
    if (f.size() != 5) throw data_error(where + ": expected 5 fields, got " + std::to_string(f.size()));
    PoseRow row{csv::parse_int(f[0], where), csv::parse_int(f[1], where), csv::parse_double(f[2], where),
                csv::parse_double(f[3], where), false};
    const long long valid = csv::parse_int(f[4], where);
    if (valid != 0 && valid != 1) throw data_error(where + ": valid must be 0 or 1");
    row.valid = valid == 1;
    if (row.valid && (!std::isfinite(row.x) || !std::isfinite(row.y))) {
      throw data_error(where + ": non-finite coordinate at frame " + std::to_string(row.frame) + ", joint " +
                       std::to_string(row.joint));
    }
    rows.push_back(row);
  }
  if (rows.empty()) throw data_error(path.string() + ": no pose rows");

  std::size_t first_frame_joints = 0;
  while (first_frame_joints < rows.size() && rows[first_frame_joints].frame == rows.front().frame) ++first_frame_joints;
  if (first_frame_joints != options.num_joints) {
    throw data_error(path.string() + ": joint-count mismatch (frame 0 has " + std::to_string(first_frame_joints) +
                     " joints, skeleton expects " + std::to_string(options.num_joints) + ")");
  }
  const std::size_t J = options.num_joints;
  if (rows.size() % J != 0) {
    throw data_error(path.string() + ": joint-count mismatch (" + std::to_string(rows.size()) +
                     " rows is not a multiple of " + std::to_string(J) + ")");
  }

  PoseSequence seq;
  seq.clip_id = path.stem().string();
  seq.fps = options.fps;
  seq.num_joints = J;
  seq.channels = 2;
  seq.coords.resize(rows.size() * 2);
  std::vector<std::uint8_t> valid(rows.size());
  for (std::size_t r = 0; r < rows.size(); ++r) {
    const auto& row = rows[r];
    if (row.frame != static_cast<long long>(r / J) || row.joint != static_cast<long long>(r % J)) {
      throw data_error(path.string() + " row " + std::to_string(r + 1) + ": expected frame " + std::to_string(r / J) +
                       ", joint " + std::to_string(r % J) + " (rows must be frame-major, joint-minor)");
    }
    seq.coords[r * 2] = row.valid ? row.x : 0.0;
    seq.coords[r * 2 + 1] = row.valid ? row.y : 0.0;
    valid[r] = row.valid ? 1 : 0;
  }
  fill_invalid(seq, valid);

  const fs::path annot = annotation_path_for(path);
  if (format == PoseFormat::dsv_annotation || fs::exists(annot)) {
    if (!fs::exists(annot)) throw data_error(path.string() + ": missing annotation file " + annot.string());
    DemarcationSet set = load_annotation_file(annot);
    if (format == PoseFormat::dsv_annotation && !set.is_dsv_layout()) {
      throw data_error(annot.string() + ": expected exactly the rows start,m1,m2,m3,end");
    }
    seq.demarcations = std::move(set);
  }
  seq.validate();
  return seq;
}

std::vector<PoseSequence> load_pose_directory(const fs::path& dir, PoseFormat format, const LoadOptions& options) {
  if (!fs::is_directory(dir)) throw data_error(dir.string() + " is not a directory");
  std::vector<fs::path> files;
  for (const auto& entry : fs::directory_iterator(dir)) {
    if (entry.is_regular_file() && entry.path().extension() == ".csv" && !is_annotation_file(entry.path())) {
      files.push_back(entry.path());
    }
  }
  std::sort(files.begin(), files.end());
  if (files.empty()) throw data_error(dir.string() + ": no pose files (*.csv)");
  std::vector<PoseSequence> out;
  for (const auto& f : files) out.push_back(load_pose_file(f, format, options));
  return out;
}

void save_pose_file(const PoseSequence& seq, const fs::path& path) {
  seq.validate();
  if (seq.channels != 2) throw config_error("canonical pose files hold 2D coordinates");
  std::ostringstream os;
  os << kPoseHeader << '\n';
  for (std::size_t f = 0; f < seq.num_frames(); ++f) {
    for (std::size_t j = 0; j < seq.num_joints; ++j) {
      os << f << ',' << j << ',' << csv::format_double(seq.at(f, j, 0)) << ',' << csv::format_double(seq.at(f, j, 1))
         << ",1\n";
    }
  }
  std::ofstream out(path);
  if (!out) throw data_error("cannot write " + path.string());
  out << os.str();
  if (!out) throw data_error("failed writing " + path.string());
}

}  // namespace stal
