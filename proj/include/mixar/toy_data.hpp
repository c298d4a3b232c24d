#pragma once

#include "mixar/common.hpp"

#include <cstdint>
#include <filesystem>
#include <span>
#include <vector>

namespace mixar {

/// Raster images stored one per row, each flattened channel-major (C×H×W).
struct ImageBatch {
  int channels = 3;
  int height = 16;
  int width = 16;
  Matrix pixels;            // batch × (C·H·W), values in [0,1]
  std::vector<int> labels;  // one per row

  Index size() const { return pixels.rows(); }
  Index pixels_per_image() const { return static_cast<Index>(channels) * height * width; }
  ImageBatch rows(std::span<const int> which) const;
};

struct DatasetSpec {
  int n_classes = 8;
  int images_per_class = 64;
  int image_size = 16;
  std::uint64_t seed = 1;
  double noise_std = 0.02;

  void validate() const;
  std::int64_t total() const { return static_cast<std::int64_t>(n_classes) * images_per_class; }
};

/// Class of sample `index`; samples cycle through the classes.
int sample_label(const DatasetSpec& spec, std::int64_t index);

/// Renders one image (C·H·W values). Pure in (spec, index).
std::vector<double> render_sample(const DatasetSpec& spec, std::int64_t index);

ImageBatch generate_dataset(const DatasetSpec& spec);

/// 90/10 split decided by a hash of the sample index.
bool is_validation_index(std::int64_t index);

struct DatasetSplit {
  ImageBatch train;
  ImageBatch val;
};
DatasetSplit split_dataset(const ImageBatch& all);

/// Writes one PPM per sample plus `manifest.tsv` (path, label, split).
void materialize_dataset(const ImageBatch& data, const std::filesystem::path& dir);

}  // namespace mixar
