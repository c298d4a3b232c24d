#pragma once

#include "mixar/backbone.hpp"
#include "mixar/diffusion_head.hpp"
#include "mixar/masking.hpp"
#include "mixar/toy_data.hpp"

#include <filesystem>
#include <string>
#include <vector>

namespace mixar {

struct ProbeConfig {
  int hidden = 64;
  int epochs = 40;
  int batch_size = 32;
  double lr = 2e-3;
  std::uint64_t seed = 0;
};

/// Small image classifier trained on real toy images. Its hidden layer
/// provides the features for the Fréchet surrogate.
class ProbeClassifier {
 public:
  ProbeClassifier(Index input_dim, int n_classes, const ProbeConfig& cfg);

  /// Returns the per-epoch mean cross-entropy.
  std::vector<double> fit(const ImageBatch& images);
  Matrix features(const ImageBatch& images);
  std::vector<int> predict(const ImageBatch& images);
  /// Fraction of images whose predicted class equals their label.
  double accuracy(const ImageBatch& images);

  nn::NamedParameters parameters();

 private:
  nn::Var hidden(nn::Tape& t, const Matrix& pixels);

  ProbeConfig cfg_;
  int n_classes_;
  nn::Linear fc1_, fc2_;
};

/// Fréchet distance between Gaussians fit to two feature sets (rows are
/// samples): |mu1 - mu2|^2 + tr(S1 + S2 - 2 (S1 S2)^{1/2}).
double frechet_surrogate(const Matrix& real, const Matrix& generated);

struct CostReport {
  std::string variant;
  Index n_tokens = 0;
  Index n_cls_tokens = 0;
  Index continuous_tokens = 0;
  Index guidance_tokens = 0;     // extra discrete tokens carried next to the continuous ones
  Index sequence_tokens = 0;     // continuous + discrete tokens involved, class tokens excluded
  Index tokens_with_cls = 0;
  Index self_attention_length = 0;
  std::int64_t attention_pairs_analytic = 0;
  std::int64_t attention_pairs_measured = 0;
  Index parameters_analytic = 0;
  Index parameters_measured = 0;
  double seconds_per_train_step = 0.0;
  double seconds_per_image = 0.0;
  std::size_t peak_tape_bytes = 0;

  bool exact() const {
    return attention_pairs_analytic == attention_pairs_measured && parameters_analytic == parameters_measured;
  }
  io::Json to_json() const;
  std::string to_text() const;
};

/// Token saving of DC-Mix (sequence plus class tokens) relative to the
/// prefix variant's continuous + discrete sequence: (2N - (N + n_cls)) / 2N.
double dc_mix_token_reduction(Index n_tokens, Index n_cls_tokens);

struct ProfileOptions {
  bool measure_time = true;
  int decode_steps = 8;
  int sample_steps = 100;
  int head_width = 256;
  int head_blocks = 3;
  std::uint64_t seed = 0;
};

/// Analytic costs of a variant cross-checked against an instantiated model:
/// parameters are counted and attention pairs are recorded during a forward
/// pass. Throws ContractError when the two disagree.
CostReport profile_variant(const BackboneConfig& dims, const ProfileOptions& opts = {});

/// Line chart of one or more series, drawn as a PPM. Series share the axes.
void write_line_plot(const std::filesystem::path& path, const std::vector<std::vector<double>>& series,
                     int width = 320, int height = 200);

/// Tiles images into a grid (row-major, `cols` per row) upscaled by `zoom`.
void write_image_grid(const std::filesystem::path& path, const ImageBatch& images, int cols, int zoom = 2);

}  // namespace mixar
