#include "mixar/toy_data.hpp"

#include "mixar/io.hpp"
#include "mixar/rng.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <sstream>

namespace mixar {
namespace {

constexpr int kChannels = 3;

struct Rgb {
  double r, g, b;
};

Rgb hsv_to_rgb(double hue_deg, double sat, double val) {
  const double c = val * sat;
  const double hp = std::fmod(hue_deg, 360.0) / 60.0;
  const double x = c * (1.0 - std::abs(std::fmod(hp, 2.0) - 1.0));
  double r = 0, g = 0, b = 0;
  switch (static_cast<int>(hp)) {
    case 0: r = c, g = x; break;
    case 1: r = x, g = c; break;
    case 2: g = c, b = x; break;
    case 3: g = x, b = c; break;
    case 4: r = x, b = c; break;
    default: r = c, b = x; break;
  }
  const double m = val - c;
  return {r + m, g + m, b + m};
}

enum class Shape { Ellipse, Rectangle, Triangle, Diamond };

// Signed inside test in the object's local frame, coordinates scaled so the
// shape spans roughly [-1, 1].
bool inside(Shape shape, double u, double v) {
  switch (shape) {
    case Shape::Ellipse: return u * u + v * v <= 1.0;
    case Shape::Rectangle: return std::abs(u) <= 0.9 && std::abs(v) <= 0.75;
    case Shape::Triangle: return v <= 0.8 && v >= -1.0 + 0.0 && std::abs(u) <= 0.5 * (0.8 - v) * 1.1;
    case Shape::Diamond: return std::abs(u) + std::abs(v) <= 1.1;
  }
  return false;
}

}  // namespace

ImageBatch ImageBatch::rows(std::span<const int> which) const {
  ImageBatch out;
  out.channels = channels;
  out.height = height;
  out.width = width;
  out.pixels.resize(static_cast<Index>(which.size()), pixels.cols());
  for (std::size_t i = 0; i < which.size(); ++i) {
    out.pixels.row(static_cast<Index>(i)) = pixels.row(which[i]);
    out.labels.push_back(labels[static_cast<std::size_t>(which[i])]);
  }
  return out;
}

void DatasetSpec::validate() const {
  if (n_classes <= 0) throw ConfigError("dataset: n_classes must be positive");
  if (images_per_class < 0) throw ConfigError("dataset: images_per_class must be non-negative");
  if (image_size < 4 || image_size > 32) throw ConfigError("dataset: image_size must be in [4, 32]");
  if (noise_std < 0.0) throw ConfigError("dataset: noise_std must be non-negative");
}

int sample_label(const DatasetSpec& spec, std::int64_t index) {
  return static_cast<int>(index % spec.n_classes);
}

std::vector<double> render_sample(const DatasetSpec& spec, std::int64_t index) {
  const int size = spec.image_size;
  const int label = sample_label(spec, index);
  Rng rng(mix_seed(spec.seed, static_cast<std::uint64_t>(index)));

  // Class family: shape × hue × stripe frequency.
  const auto shape = static_cast<Shape>(label % 4);
  const double hue = 360.0 * label / spec.n_classes;
  const double stripe_period = ((label / 4) % 2 == 0) ? 8.0 : 4.0;
  const Rgb color = hsv_to_rgb(hue + rng.uniform(-6.0, 6.0), 0.85, 0.95);

  const double s = size / 16.0;
  const double cx = (size - 1) / 2.0 + rng.uniform(-2.0, 2.0) * s;
  const double cy = (size - 1) / 2.0 + rng.uniform(-2.0, 2.0) * s;
  const double radius = rng.uniform(4.0, 6.0) * s;
  const double stretch = rng.uniform(0.85, 1.15);
  const double stripe_angle = rng.uniform(0.0, std::numbers::pi);
  const double phase = rng.uniform(0.0, 2.0 * std::numbers::pi);
  const double background = rng.uniform(0.05, 0.2);
  const double sa = std::sin(stripe_angle), ca = std::cos(stripe_angle);

  const int plane = size * size;
  std::vector<double> chw(static_cast<std::size_t>(kChannels * plane));
  for (int y = 0; y < size; ++y) {
    for (int x = 0; x < size; ++x) {
      const double u = (x - cx) / (radius * stretch);
      const double v = (y - cy) / (radius / stretch);
      double px[3] = {background, background, background};
      if (inside(shape, u, v)) {
        const double w = x * ca + y * sa;
        const double stripe = 0.7 + 0.3 * std::sin(2.0 * std::numbers::pi * w / stripe_period + phase);
        px[0] = color.r * stripe;
        px[1] = color.g * stripe;
        px[2] = color.b * stripe;
      }
      for (int c = 0; c < kChannels; ++c) {
        const double noisy = px[c] + spec.noise_std * rng.normal();
        chw[static_cast<std::size_t>(c * plane + y * size + x)] = std::clamp(noisy, 0.0, 1.0);
      }
    }
  }
  return chw;
}

ImageBatch generate_dataset(const DatasetSpec& spec) {
  spec.validate();
  ImageBatch out;
  out.channels = kChannels;
  out.height = spec.image_size;
  out.width = spec.image_size;
  const std::int64_t n = spec.total();
  out.pixels.resize(n, out.pixels_per_image());
  out.labels.resize(static_cast<std::size_t>(n));
  for (std::int64_t i = 0; i < n; ++i) {
    const auto chw = render_sample(spec, i);
    out.pixels.row(i) = Eigen::Map<const RowVector>(chw.data(), static_cast<Index>(chw.size()));
    out.labels[static_cast<std::size_t>(i)] = sample_label(spec, i);
  }
  return out;
}

bool is_validation_index(std::int64_t index) {
  return splitmix64(static_cast<std::uint64_t>(index) ^ 0x5EEDF00Dull) % 10 == 0;
}

DatasetSplit split_dataset(const ImageBatch& all) {
  std::vector<int> train, val;
  for (Index i = 0; i < all.size(); ++i) {
    (is_validation_index(i) ? val : train).push_back(static_cast<int>(i));
  }
  return {all.rows(train), all.rows(val)};
}

void materialize_dataset(const ImageBatch& data, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  std::ostringstream manifest;
  manifest << "path\tlabel\tsplit\n";
  for (Index i = 0; i < data.size(); ++i) {
    std::ostringstream name;
    name << "img_" << i << ".ppm";
    const RowVector row = data.pixels.row(i);
    io::write_ppm(dir / name.str(), std::span<const double>(row.data(), static_cast<std::size_t>(row.size())),
                  data.channels, data.height, data.width);
    manifest << name.str() << "\t" << data.labels[static_cast<std::size_t>(i)] << "\t"
             << (is_validation_index(i) ? "val" : "train") << "\n";
  }
  io::write_text(dir / "manifest.tsv", manifest.str());
}

}  // namespace mixar
