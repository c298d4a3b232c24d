#include "mixar/tokenizers.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace mixar {

std::vector<int> quantize(const Matrix& latents, const Matrix& codebook) {
  require(codebook.rows() > 0, "quantize: empty codebook");
  require(latents.cols() == codebook.cols(), "quantize: latent width differs from codeword width");
  std::vector<int> out(static_cast<std::size_t>(latents.rows()));
  for (Index r = 0; r < latents.rows(); ++r) {
    int best = 0;
    double best_d = std::numeric_limits<double>::infinity();
    for (Index k = 0; k < codebook.rows(); ++k) {
      double d = 0.0;
      for (Index c = 0; c < latents.cols(); ++c) {
        const double diff = latents(r, c) - codebook(k, c);
        d += diff * diff;
      }
      if (d < best_d) {
        best_d = d;
        best = static_cast<int>(k);
      }
    }
    out[static_cast<std::size_t>(r)] = best;
  }
  return out;
}

double codebook_usage(std::span<const int> indices, Index vocab) {
  std::vector<bool> used(static_cast<std::size_t>(vocab), false);
  for (int i : indices) used[static_cast<std::size_t>(i)] = true;
  return static_cast<double>(std::count(used.begin(), used.end(), true)) / static_cast<double>(vocab);
}

void TokenizerConfig::validate() const {
  if (image_size <= 0 || patch <= 0 || image_size % patch != 0) {
    throw ConfigError("tokenizer: patch must divide image_size");
  }
  if (hidden <= 0 || continuous_width <= 0 || code_width <= 0 || vocab <= 0 || channels <= 0) {
    throw ConfigError("tokenizer: widths must be positive");
  }
  if (beta_kl < 0.0 || beta_commit < 0.0) throw ConfigError("tokenizer: loss weights must be non-negative");
}

io::Json TokenizerConfig::to_json() const {
  return {{"image_size", image_size}, {"channels", channels},       {"patch", patch},
          {"hidden", hidden},         {"d_c", continuous_width},     {"d_d", code_width},
          {"vocab", vocab},           {"beta_kl", beta_kl},          {"beta_commit", beta_commit}};
}

TokenizerConfig TokenizerConfig::from_json(const io::Json& j) {
  TokenizerConfig c;
  c.image_size = j.at("image_size");
  c.channels = j.at("channels");
  c.patch = j.at("patch");
  c.hidden = j.at("hidden");
  c.continuous_width = j.at("d_c");
  c.code_width = j.at("d_d");
  c.vocab = j.at("vocab");
  c.beta_kl = j.at("beta_kl");
  c.beta_commit = j.at("beta_commit");
  return c;
}

Matrix images_to_patches(const ImageBatch& images, int patch) {
  const int size = images.height;
  require(images.width == size && size % patch == 0, "images_to_patches: image size not divisible by patch");
  const int grid = size / patch;
  const int plane = size * size;
  const Index n = static_cast<Index>(grid) * grid;
  Matrix out(images.size() * n, static_cast<Index>(images.channels) * patch * patch);
  for (Index b = 0; b < images.size(); ++b) {
    for (int gy = 0; gy < grid; ++gy) {
      for (int gx = 0; gx < grid; ++gx) {
        const Index row = b * n + gy * grid + gx;
        Index col = 0;
        for (int c = 0; c < images.channels; ++c) {
          for (int py = 0; py < patch; ++py) {
            for (int px = 0; px < patch; ++px) {
              out(row, col++) = images.pixels(b, c * plane + (gy * patch + py) * size + gx * patch + px);
            }
          }
        }
      }
    }
  }
  return out;
}

Matrix patches_to_images(const Matrix& patches, int channels, int image_size, int patch) {
  const int grid = image_size / patch;
  const Index n = static_cast<Index>(grid) * grid;
  require(patches.rows() % n == 0, "patches_to_images: row count not a multiple of grid size");
  require(patches.cols() == static_cast<Index>(channels) * patch * patch, "patches_to_images: patch width");
  const Index batch = patches.rows() / n;
  const int plane = image_size * image_size;
  Matrix out(batch, static_cast<Index>(channels) * plane);
  for (Index b = 0; b < batch; ++b) {
    for (int gy = 0; gy < grid; ++gy) {
      for (int gx = 0; gx < grid; ++gx) {
        const Index row = b * n + gy * grid + gx;
        Index col = 0;
        for (int c = 0; c < channels; ++c) {
          for (int py = 0; py < patch; ++py) {
            for (int px = 0; px < patch; ++px) {
              out(b, c * plane + (gy * patch + py) * image_size + gx * patch + px) = patches(row, col++);
            }
          }
        }
      }
    }
  }
  return out;
}

PatchCodec::PatchCodec(Index patch_dim, Index hidden, Index enc_out, Index latent, Rng& rng)
    : enc1(patch_dim, hidden, rng),
      enc2(hidden, hidden, rng),
      enc3(hidden, enc_out, rng),
      dec1(latent, hidden, rng),
      dec2(hidden, hidden, rng),
      dec3(hidden, patch_dim, rng) {}

nn::Var PatchCodec::encode(nn::Tape& t, nn::Var patches) {
  return enc3(t, nn::gelu(enc2(t, nn::gelu(enc1(t, patches)))));
}

nn::Var PatchCodec::decode(nn::Tape& t, nn::Var latents) {
  return dec3(t, nn::gelu(dec2(t, nn::gelu(dec1(t, latents)))));
}

void PatchCodec::collect(nn::NamedParameters& out, const std::string& prefix) {
  enc1.collect(out, prefix + "enc1.");
  enc2.collect(out, prefix + "enc2.");
  enc3.collect(out, prefix + "enc3.");
  dec1.collect(out, prefix + "dec1.");
  dec2.collect(out, prefix + "dec2.");
  dec3.collect(out, prefix + "dec3.");
}

namespace {

void check_images(const ImageBatch& images, const TokenizerConfig& cfg) {
  require(images.channels == cfg.channels && images.height == cfg.image_size && images.width == cfg.image_size,
          "tokenizer: image shape does not match the trained configuration");
}

ImageBatch to_images(const Matrix& patches, const TokenizerConfig& cfg) {
  ImageBatch out;
  out.channels = cfg.channels;
  out.height = cfg.image_size;
  out.width = cfg.image_size;
  out.pixels = patches_to_images(patches, cfg.channels, cfg.image_size, cfg.patch).cwiseMax(0.0).cwiseMin(1.0);
  out.labels.assign(static_cast<std::size_t>(out.pixels.rows()), -1);
  return out;
}

}  // namespace

ContinuousTokenizer::ContinuousTokenizer(const TokenizerConfig& cfg, std::uint64_t seed) : cfg_(cfg) {
  cfg_.validate();
  Rng rng(mix_seed(seed, 0xC0));
  codec_ = PatchCodec(cfg_.patch_dim(), cfg_.hidden, 2 * cfg_.continuous_width, cfg_.continuous_width, rng);
}

ContinuousSequence ContinuousTokenizer::encode(const ImageBatch& images) const {
  check_images(images, cfg_);
  nn::Tape t(false);
  nn::Var h = codec_.encode(t, t.constant(images_to_patches(images, cfg_.patch)));
  return {cfg_.grid(), cfg_.grid(), h.value().leftCols(cfg_.continuous_width)};
}

ImageBatch ContinuousTokenizer::decode(const ContinuousSequence& seq) const {
  require(seq.tokens.cols() == cfg_.continuous_width, "decode_continuous: token width mismatch");
  require(seq.grid_h == cfg_.grid() && seq.grid_w == cfg_.grid(), "decode_continuous: grid mismatch");
  nn::Tape t(false);
  nn::Var out = codec_.decode(t, t.constant(seq.tokens));
  return to_images(out.value(), cfg_);
}

ContinuousTokenizer::Loss ContinuousTokenizer::loss(nn::Tape& t, const Matrix& patches, bool sample_posterior,
                                                    Rng& rng) {
  nn::Var h = codec_.encode(t, t.constant(patches));
  nn::Var mu = nn::slice_cols(h, 0, cfg_.continuous_width);
  nn::Var logvar = nn::slice_cols(h, cfg_.continuous_width, cfg_.continuous_width);
  nn::Var z = mu;
  if (sample_posterior) {
    Matrix eps(mu.rows(), mu.cols());
    for (Index i = 0; i < eps.size(); ++i) eps.data()[i] = rng.normal();
    z = nn::add(mu, nn::mul(nn::exp(nn::scale(logvar, 0.5)), t.constant(std::move(eps))));
  }
  nn::Var recon = nn::mean_squared_error(codec_.decode(t, z), t.constant(patches));
  nn::Var kl = nn::gaussian_kl(mu, logvar);
  Loss out;
  out.total = cfg_.beta_kl > 0.0 ? nn::add(recon, nn::scale(kl, cfg_.beta_kl)) : recon;
  out.reconstruction = recon.scalar();
  out.kl = kl.scalar();
  return out;
}

nn::NamedParameters ContinuousTokenizer::parameters() {
  nn::NamedParameters out;
  codec_.collect(out, "codec.");
  return out;
}

io::Checkpoint ContinuousTokenizer::to_checkpoint(const io::Json& extra) {
  io::Checkpoint c;
  c.manifest = extra;
  c.manifest["kind"] = "continuous_tokenizer";
  c.manifest["config"] = cfg_.to_json();
  c.arrays = io::export_parameters(parameters());
  return c;
}

ContinuousTokenizer ContinuousTokenizer::from_checkpoint(const io::Checkpoint& ckpt) {
  if (ckpt.manifest.value("kind", "") != "continuous_tokenizer") throw IoError("not a continuous tokenizer checkpoint");
  ContinuousTokenizer tok(TokenizerConfig::from_json(ckpt.manifest.at("config")));
  io::import_parameters(tok.parameters(), ckpt.arrays);
  return tok;
}

VqTokenizer::VqTokenizer(const TokenizerConfig& cfg, std::uint64_t seed) : cfg_(cfg) {
  cfg_.validate();
  Rng rng(mix_seed(seed, 0xD1));
  codec_ = PatchCodec(cfg_.patch_dim(), cfg_.hidden, cfg_.code_width, cfg_.code_width, rng);
  codebook_ = nn::Parameter(nn::normal_init(cfg_.vocab, cfg_.code_width, 1.0, rng));
}

Matrix VqTokenizer::encode_patches(const Matrix& patches) const {
  nn::Tape t(false);
  return codec_.encode(t, t.constant(patches)).value();
}

DiscreteSequence VqTokenizer::encode(const ImageBatch& images) const {
  check_images(images, cfg_);
  return {cfg_.grid(), cfg_.grid(), quantize(encode_patches(images_to_patches(images, cfg_.patch)), codebook_.value)};
}

Matrix VqTokenizer::lookup(std::span<const int> indices) const {
  Matrix out(static_cast<Index>(indices.size()), cfg_.code_width);
  for (std::size_t i = 0; i < indices.size(); ++i) {
    require(indices[i] >= 0 && indices[i] < cfg_.vocab, "codebook lookup: index out of range");
    out.row(static_cast<Index>(i)) = codebook_.value.row(indices[i]);
  }
  return out;
}

ImageBatch VqTokenizer::decode(const DiscreteSequence& seq) const {
  nn::Tape t(false);
  return to_images(codec_.decode(t, t.constant(lookup(seq.indices))).value(), cfg_);
}

VqTokenizer::Loss VqTokenizer::loss(nn::Tape& t, const Matrix& patches) {
  Loss out;
  out.encoded = codec_.encode(t, t.constant(patches));
  out.indices = quantize(out.encoded.value(), codebook_.value);
  nn::Var codes = nn::gather_rows(t.param(codebook_), out.indices);
  out.quantized = nn::straight_through(out.encoded, codes);
  nn::Var recon = nn::mean_squared_error(codec_.decode(t, out.quantized), t.constant(patches));
  nn::Var codebook_term = nn::mean_squared_error(codes, nn::stop_gradient(out.encoded));
  nn::Var commit = nn::mean_squared_error(out.encoded, nn::stop_gradient(codes));
  out.total = nn::add(nn::add(recon, codebook_term), nn::scale(commit, cfg_.beta_commit));
  out.reconstruction = recon.scalar();
  return out;
}

nn::Var VqTokenizer::reconstruction_from(nn::Tape& t, nn::Var latents, const Matrix& patches) {
  return nn::mean_squared_error(codec_.decode(t, latents), t.constant(patches));
}

nn::NamedParameters VqTokenizer::parameters() {
  nn::NamedParameters out;
  codec_.collect(out, "codec.");
  out.emplace_back("codebook", &codebook_);
  return out;
}

io::Checkpoint VqTokenizer::to_checkpoint(const io::Json& extra) {
  io::Checkpoint c;
  c.manifest = extra;
  c.manifest["kind"] = "vq_tokenizer";
  c.manifest["config"] = cfg_.to_json();
  c.arrays = io::export_parameters(parameters());
  return c;
}

VqTokenizer VqTokenizer::from_checkpoint(const io::Checkpoint& ckpt) {
  if (ckpt.manifest.value("kind", "") != "vq_tokenizer") throw IoError("not a VQ tokenizer checkpoint");
  VqTokenizer tok(TokenizerConfig::from_json(ckpt.manifest.at("config")));
  io::import_parameters(tok.parameters(), ckpt.arrays);
  return tok;
}

TrainedTokenizers train_tokenizers(const ImageBatch& images, const TokenizerConfig& cfg,
                                   const TokenizerTrainConfig& train) {
  require(images.size() > 0, "train_tokenizers: dataset is empty");
  if (train.epochs <= 0 || train.batch_size <= 0 || train.lr <= 0.0) {
    throw ConfigError("tokenizer training: epochs, batch_size and lr must be positive");
  }
  check_images(images, cfg);
  TrainedTokenizers out{ContinuousTokenizer(cfg, train.seed), VqTokenizer(cfg, train.seed), {}};
  Rng rng(mix_seed(train.seed, 0x7E));

  const Matrix all_patches = images_to_patches(images, cfg.patch);
  const Index n_patch = cfg.grid() * cfg.grid();
  const Index n_images = images.size();
  const auto batches_per_epoch = (n_images + train.batch_size - 1) / train.batch_size;
  const std::int64_t total_steps = batches_per_epoch * train.epochs;

  // Seed the codebook from encoder outputs so every codeword starts in-distribution.
  {
    Matrix z = out.vq.encode_patches(all_patches);
    for (Index k = 0; k < cfg.vocab; ++k) {
      RowVector row = z.row(static_cast<Index>(rng.below(static_cast<std::uint64_t>(z.rows()))));
      for (Index c = 0; c < row.size(); ++c) row(c) += 0.01 * rng.normal();
      out.vq.set_codeword(k, row);
    }
  }

  nn::Adam opt_c(out.continuous.parameters(), {.lr = train.lr});
  nn::Adam opt_v(out.vq.parameters(), {.lr = train.lr});
  std::vector<int> order(static_cast<std::size_t>(n_images));
  std::iota(order.begin(), order.end(), 0);
  std::int64_t step = 0;

  for (int epoch = 0; epoch < train.epochs; ++epoch) {
    rng.shuffle(std::span<int>(order));
    double sum_c = 0.0, sum_v = 0.0;
    std::vector<int> epoch_indices;
    Matrix last_encoded;
    for (Index start = 0; start < n_images; start += train.batch_size) {
      const Index end = std::min<Index>(n_images, start + train.batch_size);
      Matrix patches((end - start) * n_patch, all_patches.cols());
      for (Index i = start; i < end; ++i) {
        patches.middleRows((i - start) * n_patch, n_patch) =
            all_patches.middleRows(order[static_cast<std::size_t>(i)] * n_patch, n_patch);
      }
      const double lr = nn::warmup_cosine_lr(train.lr, step, total_steps, 0.05);

      {
        nn::Tape t;
        auto l = out.continuous.loss(t, patches, train.sample_posterior, rng);
        if (!std::isfinite(l.total.scalar())) {
          throw NumericalError("continuous tokenizer diverged at epoch " + std::to_string(epoch));
        }
        opt_c.zero_grad();
        t.backward(l.total);
        opt_c.step(lr);
        sum_c += l.total.scalar() * static_cast<double>(end - start);
      }
      {
        nn::Tape t;
        auto l = out.vq.loss(t, patches);
        if (!std::isfinite(l.total.scalar())) {
          throw NumericalError("VQ tokenizer diverged at epoch " + std::to_string(epoch));
        }
        opt_v.zero_grad();
        t.backward(l.total);
        opt_v.step(lr);
        sum_v += l.total.scalar() * static_cast<double>(end - start);
        epoch_indices.insert(epoch_indices.end(), l.indices.begin(), l.indices.end());
        last_encoded = l.encoded.value();
      }
      ++step;
    }
    out.history.continuous_loss.push_back(sum_c / static_cast<double>(n_images));
    out.history.vq_loss.push_back(sum_v / static_cast<double>(n_images));
    out.history.codebook_usage.push_back(codebook_usage(epoch_indices, cfg.vocab));

    // Dead codewords are re-seeded from encoder outputs of the last batch.
    if (epoch + 1 < train.epochs) {
      std::vector<bool> used(static_cast<std::size_t>(cfg.vocab), false);
      for (int i : epoch_indices) used[static_cast<std::size_t>(i)] = true;
      for (Index k = 0; k < cfg.vocab; ++k) {
        if (used[static_cast<std::size_t>(k)]) continue;
        out.vq.set_codeword(k, last_encoded.row(static_cast<Index>(rng.below(static_cast<std::uint64_t>(last_encoded.rows())))));
      }
    }
  }
  return out;
}

}  // namespace mixar
