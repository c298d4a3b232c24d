#pragma once

#include "mixar/common.hpp"
#include "mixar/nn/tape.hpp"

#include <json.hpp>

#include <filesystem>
#include <map>
#include <span>
#include <string>
#include <vector>

namespace mixar::io {

using Json = nlohmann::json;

// Array file layout (little-endian):
//   magic    8 bytes  "MXARRAY1"
//   count    u32
//   then `count` records of
//     name_len u32, name bytes (UTF-8, no terminator)
//     dtype    u8   (1 = float64)
//     ndim     u32
//     dims     u64 × ndim
//     payload  float64 × prod(dims), row-major
// Matrices are stored with ndim = 2.
using ArrayMap = std::map<std::string, Matrix>;

void write_arrays(const std::filesystem::path& path, const ArrayMap& arrays);
ArrayMap read_arrays(const std::filesystem::path& path);

/// A checkpoint directory: `manifest.json` + `arrays.bin`.
struct Checkpoint {
  Json manifest;
  ArrayMap arrays;
};

void save_checkpoint(const std::filesystem::path& dir, const Checkpoint& ckpt);
Checkpoint load_checkpoint(const std::filesystem::path& dir);

ArrayMap export_parameters(const nn::NamedParameters& params, const std::string& prefix = "");
/// Copies arrays into parameters; every parameter must be present with a
/// matching shape.
void import_parameters(const nn::NamedParameters& params, const ArrayMap& arrays, const std::string& prefix = "");

void write_text(const std::filesystem::path& path, const std::string& text);
std::string read_text(const std::filesystem::path& path);
void append_jsonl(const std::filesystem::path& path, const Json& record);
std::vector<Json> read_jsonl(const std::filesystem::path& path);

/// Binary PPM (P6), 8-bit. `chw` holds channels×height×width values in [0,1].
void write_ppm(const std::filesystem::path& path, std::span<const double> chw, int channels, int height, int width);
/// Reads a P6 file back as CHW values in [0,1].
std::vector<double> read_ppm(const std::filesystem::path& path, int& height, int& width);

}  // namespace mixar::io
