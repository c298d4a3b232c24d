#pragma once

#include "mixar/io.hpp"
#include "mixar/nn/layers.hpp"
#include "mixar/toy_data.hpp"

#include <filesystem>
#include <span>
#include <vector>

namespace mixar {

/// Continuous latent tokens for a batch of images: `tokens` holds
/// batch·N rows of width d_c, grid flattened row-major per image.
struct ContinuousSequence {
  int grid_h = 0;
  int grid_w = 0;
  Matrix tokens;

  Index n_tokens() const { return static_cast<Index>(grid_h) * grid_w; }
  Index batch() const { return n_tokens() == 0 ? 0 : tokens.rows() / n_tokens(); }
};

/// Codebook indices for a batch of images (batch·N entries).
struct DiscreteSequence {
  int grid_h = 0;
  int grid_w = 0;
  std::vector<int> indices;

  Index n_tokens() const { return static_cast<Index>(grid_h) * grid_w; }
  Index batch() const { return n_tokens() == 0 ? 0 : static_cast<Index>(indices.size()) / n_tokens(); }
};

/// Nearest codeword under squared Euclidean distance, lowest index on ties.
std::vector<int> quantize(const Matrix& latents, const Matrix& codebook);

/// Fraction of codewords selected at least once.
double codebook_usage(std::span<const int> indices, Index vocab);

struct TokenizerConfig {
  int image_size = 16;
  int channels = 3;
  int patch = 4;  // downsampling factor; grid = image_size / patch
  int hidden = 128;
  int continuous_width = 8;  // d_c
  int code_width = 8;        // d_d
  int vocab = 64;            // V
  double beta_kl = 1e-4;
  double beta_commit = 0.25;

  int grid() const { return image_size / patch; }
  Index patch_dim() const { return static_cast<Index>(channels) * patch * patch; }
  void validate() const;
  io::Json to_json() const;
  static TokenizerConfig from_json(const io::Json& j);
};

/// Splits images into per-patch rows: (batch·N)×(C·p·p), grid row-major.
Matrix images_to_patches(const ImageBatch& images, int patch);
/// Inverse of images_to_patches.
Matrix patches_to_images(const Matrix& patches, int channels, int image_size, int patch);

/// Patch-MLP encoder/decoder pair shared by both tokenizers.
struct PatchCodec {
  nn::Linear enc1, enc2, enc3;
  nn::Linear dec1, dec2, dec3;

  PatchCodec() = default;
  PatchCodec(Index patch_dim, Index hidden, Index enc_out, Index latent, Rng& rng);

  nn::Var encode(nn::Tape& t, nn::Var patches);
  nn::Var decode(nn::Tape& t, nn::Var latents);
  void collect(nn::NamedParameters& out, const std::string& prefix);
};

/// Gaussian-posterior autoencoder producing continuous tokens.
class ContinuousTokenizer {
 public:
  explicit ContinuousTokenizer(const TokenizerConfig& cfg, std::uint64_t seed = 0);

  /// Posterior-mean latents.
  ContinuousSequence encode(const ImageBatch& images) const;
  ImageBatch decode(const ContinuousSequence& seq) const;

  struct Loss {
    nn::Var total;
    double reconstruction = 0.0;
    double kl = 0.0;
  };
  /// Reconstruction MSE + beta_kl·KL. With `sample_posterior`, latents are
  /// drawn by reparameterization from `rng`.
  Loss loss(nn::Tape& t, const Matrix& patches, bool sample_posterior, Rng& rng);

  const TokenizerConfig& config() const { return cfg_; }
  nn::NamedParameters parameters();
  io::Checkpoint to_checkpoint(const io::Json& extra = {});
  static ContinuousTokenizer from_checkpoint(const io::Checkpoint& ckpt);

 private:
  TokenizerConfig cfg_;
  mutable PatchCodec codec_;
};

/// Vector-quantized autoencoder producing discrete tokens.
class VqTokenizer {
 public:
  explicit VqTokenizer(const TokenizerConfig& cfg, std::uint64_t seed = 0);

  DiscreteSequence encode(const ImageBatch& images) const;
  ImageBatch decode(const DiscreteSequence& seq) const;
  /// Pre-quantization encoder output for patches.
  Matrix encode_patches(const Matrix& patches) const;

  const Matrix& codebook() const { return codebook_.value; }
  Matrix lookup(std::span<const int> indices) const;

  struct Loss {
    nn::Var total;
    nn::Var encoded;    // z_e
    nn::Var quantized;  // straight-through output fed to the decoder
    std::vector<int> indices;
    double reconstruction = 0.0;
  };
  /// Reconstruction + codebook + beta_commit·commitment, straight-through.
  Loss loss(nn::Tape& t, const Matrix& patches);

  /// Decoder-only reconstruction loss from explicit latents.
  nn::Var reconstruction_from(nn::Tape& t, nn::Var latents, const Matrix& patches);

  void set_codeword(Index k, const RowVector& v) { codebook_.value.row(k) = v; }
  const TokenizerConfig& config() const { return cfg_; }
  nn::NamedParameters parameters();
  io::Checkpoint to_checkpoint(const io::Json& extra = {});
  static VqTokenizer from_checkpoint(const io::Checkpoint& ckpt);

 private:
  TokenizerConfig cfg_;
  mutable PatchCodec codec_;
  nn::Parameter codebook_;
};

struct TokenizerTrainConfig {
  int epochs = 40;
  int batch_size = 32;
  double lr = 2e-3;
  std::uint64_t seed = 0;
  bool sample_posterior = true;
};

struct TokenizerHistory {
  std::vector<double> continuous_loss;  // per epoch, mean total
  std::vector<double> vq_loss;
  std::vector<double> codebook_usage;
};

struct TrainedTokenizers {
  ContinuousTokenizer continuous;
  VqTokenizer vq;
  TokenizerHistory history;
};

/// Trains both tokenizers on `images`. Throws NumericalError on divergence.
TrainedTokenizers train_tokenizers(const ImageBatch& images, const TokenizerConfig& cfg,
                                   const TokenizerTrainConfig& train);

}  // namespace mixar
