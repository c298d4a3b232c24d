#include "mixar/io.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <sstream>

namespace mixar::io {

static_assert(std::endian::native == std::endian::little, "array files assume a little-endian host");

namespace {

constexpr char kMagic[8] = {'M', 'X', 'A', 'R', 'R', 'A', 'Y', '1'};
constexpr std::uint8_t kFloat64 = 1;

template <typename T>
void put(std::ostream& os, T v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T get(std::istream& is) {
  T v{};
  is.read(reinterpret_cast<char*>(&v), sizeof(T));
  if (!is) throw IoError("truncated array file");
  return v;
}

}  // namespace

void write_arrays(const std::filesystem::path& path, const ArrayMap& arrays) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError("cannot open " + path.string() + " for writing");
  os.write(kMagic, sizeof(kMagic));
  put<std::uint32_t>(os, static_cast<std::uint32_t>(arrays.size()));
  for (const auto& [name, m] : arrays) {
    put<std::uint32_t>(os, static_cast<std::uint32_t>(name.size()));
    os.write(name.data(), static_cast<std::streamsize>(name.size()));
    put<std::uint8_t>(os, kFloat64);
    put<std::uint32_t>(os, 2);
    put<std::uint64_t>(os, static_cast<std::uint64_t>(m.rows()));
    put<std::uint64_t>(os, static_cast<std::uint64_t>(m.cols()));
    os.write(reinterpret_cast<const char*>(m.data()), static_cast<std::streamsize>(m.size() * sizeof(double)));
  }
  if (!os) throw IoError("write failed: " + path.string());
}

ArrayMap read_arrays(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open " + path.string());
  char magic[8];
  is.read(magic, sizeof(magic));
  if (!is || std::memcmp(magic, kMagic, sizeof(kMagic)) != 0) throw IoError("bad array file magic: " + path.string());
  const auto count = get<std::uint32_t>(is);
  ArrayMap out;
  for (std::uint32_t i = 0; i < count; ++i) {
    const auto len = get<std::uint32_t>(is);
    std::string name(len, '\0');
    is.read(name.data(), len);
    if (get<std::uint8_t>(is) != kFloat64) throw IoError("unsupported dtype for " + name);
    const auto ndim = get<std::uint32_t>(is);
    std::vector<std::uint64_t> dims(ndim);
    for (auto& d : dims) d = get<std::uint64_t>(is);
    Index rows = 1, cols = 1;
    if (ndim == 1) {
      cols = static_cast<Index>(dims[0]);
    } else if (ndim == 2) {
      rows = static_cast<Index>(dims[0]);
      cols = static_cast<Index>(dims[1]);
    } else {
      throw IoError("only 1-D and 2-D arrays are supported: " + name);
    }
    Matrix m(rows, cols);
    is.read(reinterpret_cast<char*>(m.data()), static_cast<std::streamsize>(m.size() * sizeof(double)));
    if (!is) throw IoError("truncated payload for " + name);
    out.emplace(std::move(name), std::move(m));
  }
  return out;
}

void save_checkpoint(const std::filesystem::path& dir, const Checkpoint& ckpt) {
  std::filesystem::create_directories(dir);
  write_text(dir / "manifest.json", ckpt.manifest.dump(2) + "\n");
  write_arrays(dir / "arrays.bin", ckpt.arrays);
}

Checkpoint load_checkpoint(const std::filesystem::path& dir) {
  if (!std::filesystem::exists(dir / "manifest.json") || !std::filesystem::exists(dir / "arrays.bin")) {
    throw DependencyError("missing checkpoint at " + dir.string());
  }
  Checkpoint c;
  c.manifest = Json::parse(read_text(dir / "manifest.json"));
  c.arrays = read_arrays(dir / "arrays.bin");
  return c;
}

ArrayMap export_parameters(const nn::NamedParameters& params, const std::string& prefix) {
  ArrayMap out;
  for (const auto& [name, p] : params) out[prefix + name] = p->value;
  return out;
}

void import_parameters(const nn::NamedParameters& params, const ArrayMap& arrays, const std::string& prefix) {
  for (const auto& [name, p] : params) {
    auto it = arrays.find(prefix + name);
    if (it == arrays.end()) throw IoError("checkpoint is missing array " + prefix + name);
    if (it->second.rows() != p->value.rows() || it->second.cols() != p->value.cols()) {
      throw IoError("shape mismatch for array " + prefix + name);
    }
    p->value = it->second;
    p->zero_grad();
  }
}

void write_text(const std::filesystem::path& path, const std::string& text) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError("cannot open " + path.string() + " for writing");
  os << text;
}

std::string read_text(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open " + path.string());
  std::ostringstream ss;
  ss << is.rdbuf();
  return ss.str();
}

void append_jsonl(const std::filesystem::path& path, const Json& record) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream os(path, std::ios::app);
  if (!os) throw IoError("cannot open " + path.string());
  os << record.dump() << "\n";
}

std::vector<Json> read_jsonl(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw IoError("cannot open " + path.string());
  std::vector<Json> out;
  std::string line;
  while (std::getline(is, line)) {
    if (!line.empty()) out.push_back(Json::parse(line));
  }
  return out;
}

void write_ppm(const std::filesystem::path& path, std::span<const double> chw, int channels, int height, int width) {
  require(channels == 1 || channels == 3, "write_ppm: 1 or 3 channels");
  require(static_cast<int>(chw.size()) == channels * height * width, "write_ppm: size mismatch");
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError("cannot open " + path.string());
  os << "P6\n" << width << " " << height << "\n255\n";
  const int plane = height * width;
  for (int i = 0; i < plane; ++i) {
    for (int c = 0; c < 3; ++c) {
      const double v = chw[static_cast<std::size_t>((channels == 3 ? c : 0) * plane + i)];
      const auto byte = static_cast<unsigned char>(std::lround(std::clamp(v, 0.0, 1.0) * 255.0));
      os.put(static_cast<char>(byte));
    }
  }
}

std::vector<double> read_ppm(const std::filesystem::path& path, int& height, int& width) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open " + path.string());
  std::string magic;
  int maxval = 0;
  is >> magic >> width >> height >> maxval;
  is.get();
  if (magic != "P6" || maxval != 255) throw IoError("unsupported image file " + path.string());
  const int plane = height * width;
  std::vector<double> chw(static_cast<std::size_t>(3 * plane));
  for (int i = 0; i < plane; ++i) {
    for (int c = 0; c < 3; ++c) {
      chw[static_cast<std::size_t>(c * plane + i)] = static_cast<unsigned char>(is.get()) / 255.0;
    }
  }
  if (!is) throw IoError("truncated image " + path.string());
  return chw;
}

}  // namespace mixar::io
