#include <bit>
#include <cstring>
#include <fstream>
#include <sstream>

#include "stal/error.hpp"
#include "stal/model.hpp"

namespace stal {
namespace {

constexpr char kMagic[8] = {'S', 'T', 'A', 'L', 'C', 'K', 'P', 'T'};

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

template <class T>
void put(std::string& out, T v) {
  char buf[sizeof(T)];
  std::memcpy(buf, &v, sizeof(T));
  out.append(buf, sizeof(T));
}

class Reader {
 public:
  Reader(const std::string& bytes, const std::string& source) : bytes_(bytes), source_(source) {}

  template <class T>
  T get(const char* what) {
    need(sizeof(T), what);
    T v;
    std::memcpy(&v, bytes_.data() + pos_, sizeof(T));
    pos_ += sizeof(T);
    return v;
  }

  std::string get_string(std::size_t n, const char* what) {
    need(n, what);
    std::string s = bytes_.substr(pos_, n);
    pos_ += n;
    return s;
  }

  bool at_end() const { return pos_ == bytes_.size(); }

 private:
  void need(std::size_t n, const char* what) {
    if (bytes_.size() - pos_ < n) throw data_error(source_ + ": truncated checkpoint (reading " + what + ")");
  }

  const std::string& bytes_;
  const std::string& source_;
  std::size_t pos_ = 0;
};

}  // namespace

std::string serialize_params(const ModelParams& params) {
  std::string out(kMagic, sizeof(kMagic));
  put<std::uint32_t>(out, params.format_version);
  const ModelConfig& c = params.config;
  for (std::size_t v : {c.num_blocks, c.embed_dim, c.cheb_k, c.window_size, c.num_joints, c.in_channels}) {
    put<std::uint32_t>(out, static_cast<std::uint32_t>(v));
  }
  put<std::uint64_t>(out, c.seed);
  const auto named = params.named();
  put<std::uint32_t>(out, static_cast<std::uint32_t>(named.size()));
  for (const auto& [name, t] : named) {
    put<std::uint32_t>(out, static_cast<std::uint32_t>(name.size()));
    out += name;
    put<std::uint32_t>(out, static_cast<std::uint32_t>(t.rank()));
    for (std::size_t d : t.shape()) put<std::uint64_t>(out, d);
    for (double v : t.data()) put<double>(out, v);
  }
  return out;
}

ModelParams deserialize_params(const std::string& bytes, const std::string& source) {
  if (bytes.size() < sizeof(kMagic) || std::memcmp(bytes.data(), kMagic, sizeof(kMagic)) != 0) {
    throw data_error(source + ": not a checkpoint (bad magic)");
  }
  Reader r(bytes, source);
  r.get_string(sizeof(kMagic), "magic");
  const auto version = r.get<std::uint32_t>("format version");
  if (version != ModelParams::kFormatVersion) {
    throw data_error(source + ": unsupported checkpoint format version " + std::to_string(version) + " (expected " +
                     std::to_string(ModelParams::kFormatVersion) + ")");
  }
  ModelConfig c;
  c.num_blocks = r.get<std::uint32_t>("config");
  c.embed_dim = r.get<std::uint32_t>("config");
  c.cheb_k = r.get<std::uint32_t>("config");
  c.window_size = r.get<std::uint32_t>("config");
  c.num_joints = r.get<std::uint32_t>("config");
  c.in_channels = r.get<std::uint32_t>("config");
  c.seed = r.get<std::uint64_t>("config");
  try {
    c.validate();
  } catch (const Error& e) {
    throw data_error(source + ": invalid embedded config: " + e.what());
  }

  // The embedded config fixes the expected layout; the stored tensors must agree.
  ModelParams params = init_params(c);
  auto expected = params.named();
  const auto count = r.get<std::uint32_t>("tensor count");
  if (count != expected.size()) {
    throw data_error(source + ": checkpoint holds " + std::to_string(count) + " tensors, embedded config implies " +
                     std::to_string(expected.size()));
  }
  for (auto& [name, t] : expected) {
    const auto len = r.get<std::uint32_t>("tensor name");
    const std::string got = r.get_string(len, "tensor name");
    if (got != name) throw data_error(source + ": expected tensor '" + name + "', found '" + got + "'");
    const auto rank = r.get<std::uint32_t>("tensor rank");
    Shape shape;
    for (std::uint32_t i = 0; i < rank; ++i) shape.push_back(r.get<std::uint64_t>("tensor extents"));
    if (shape != t.shape()) {
      throw data_error(source + ": tensor '" + name + "' has shape " + shape_str(shape) +
                       ", embedded config implies " + shape_str(t.shape()));
    }
    auto dst = t.mutable_data();
    for (double& v : dst) v = r.get<double>("tensor values");
  }
  if (!r.at_end()) throw data_error(source + ": trailing bytes after checkpoint");
  return params;
}

void save_params(const ModelParams& params, const std::filesystem::path& path) {
  const std::string bytes = serialize_params(params);
  std::ofstream out(path, std::ios::binary);
  if (!out) throw data_error("cannot write " + path.string());
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw data_error("failed writing " + path.string());
}

ModelParams load_params(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw data_error("cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return deserialize_params(ss.str(), path.string());
}

}  // namespace stal
