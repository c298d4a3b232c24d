#pragma once

#include "mixar/backbone.hpp"
#include "mixar/diffusion_head.hpp"
#include "mixar/discrete_generator.hpp"
#include "mixar/tokenizers.hpp"

#include <cstdint>
#include <functional>
#include <span>
#include <vector>

namespace mixar {

/// Both token views of a set of images, aligned row by row.
struct TokenizedDataset {
  Index n_tokens = 0;
  Matrix continuous;          // (n·N)×d_c, raw tokenizer latents
  std::vector<int> discrete;  // n·N
  std::vector<int> labels;    // n

  Index size() const { return static_cast<Index>(labels.size()); }
  TokenizedDataset rows(std::span<const int> which) const;
};

TokenizedDataset tokenize_dataset(const ImageBatch& images, const ContinuousTokenizer& continuous,
                                  const VqTokenizer& vq);

/// Per-dimension affine map bringing tokenizer latents to zero mean and unit
/// variance before noising.
struct LatentNormalization {
  RowVector mean;
  RowVector scale;

  static LatentNormalization fit(const Matrix& tokens);
  Matrix apply(const Matrix& tokens) const;
  Matrix invert(const Matrix& normalized) const;
};

struct MixarConfig {
  BackboneConfig backbone;
  DenoiserConfig head;
  int train_steps = 1000;
  int sample_steps = 100;

  /// Head widths follow the backbone.
  void sync();
  void validate() const;
  io::Json to_json() const;
  static MixarConfig from_json(const io::Json& j);
};

/// Backbone + diffusion head + schedule, with an optional EMA copy of the
/// trainable weights.
class MixarModel {
 public:
  MixarModel(const MixarConfig& cfg, const Matrix& codebook, std::uint64_t seed = 0);

  const MixarConfig& config() const { return cfg_; }
  GuidanceVariant variant() const { return cfg_.backbone.variant; }
  Backbone& backbone() { return backbone_; }
  DenoiserHead& head() { return head_; }
  const DiffusionSchedule& schedule() const { return schedule_; }
  void set_sample_steps(int steps);

  const LatentNormalization& normalization() const { return norm_; }
  void set_normalization(LatentNormalization n) { norm_ = std::move(n); }

  nn::NamedParameters parameters();
  /// Trainable parameters only (what the optimizer and EMA track).
  nn::NamedParameters trainable_parameters();

  bool has_ema() const { return !ema_.empty(); }
  const std::vector<Matrix>& ema_values() const { return ema_; }
  void set_ema_values(std::vector<Matrix> values) { ema_ = std::move(values); }
  /// Exchanges live and EMA weights; a second call restores them.
  void swap_ema();

  io::Checkpoint to_checkpoint(const io::Json& extra = {});
  static MixarModel from_checkpoint(const io::Checkpoint& ckpt);

 private:
  MixarConfig cfg_;
  Backbone backbone_;
  DenoiserHead head_;
  DiffusionSchedule schedule_;
  LatentNormalization norm_;
  std::vector<Matrix> ema_;
};

/// Swaps EMA weights in for the lifetime of the scope (no-op without EMA).
class EmaScope {
 public:
  EmaScope(MixarModel& m, bool enabled) : model_(m), active_(enabled && m.has_ema()) {
    if (active_) model_.swap_ema();
  }
  ~EmaScope() {
    if (active_) model_.swap_ema();
  }
  EmaScope(const EmaScope&) = delete;
  EmaScope& operator=(const EmaScope&) = delete;

 private:
  MixarModel& model_;
  bool active_;
};

struct TrainSeeds {
  std::uint64_t data = 1;       // batch order, class dropout
  std::uint64_t masking = 2;
  std::uint64_t diffusion = 3;  // timesteps and noise
  std::uint64_t ti_mix = 4;     // rho draws and generator sampling
};

struct TrainConfig {
  int epochs = 200;
  int batch_size = 32;
  double lr = 1e-3;
  double warmup = 0.05;
  double ema_decay = 0.999;
  double weight_decay = 0.0;
  double grad_clip = 1.0;
  MaskRatioConfig mask{0.7, 1.0};
  TiMixConfig ti_mix;
  double class_dropout = 0.0;
  int diffusion_repeats = 4;
  double generator_temperature = 1.0;
  int eval_every = 10;
  TrainSeeds seeds;

  void validate() const;
  io::Json to_json() const;
  static TrainConfig from_json(const io::Json& j);
};

io::Json ti_mix_to_json(const TiMixConfig& c);
TiMixConfig ti_mix_from_json(const io::Json& j);

/// Denoising loss restricted to masked rows of `z`.
nn::Var masked_diffusion_loss(nn::Tape& t, DenoiserHead& head, nn::Var z, const Matrix& targets,
                              std::span<const std::uint8_t> mask, const DiffusionSchedule& s, Rng& rng, int repeats);

struct EpochRecord {
  int epoch = 0;  // 1-based count of completed epochs
  double train_loss = 0.0;
  double lambda = 1.0;
  double lr = 0.0;
};

using EpochHook = std::function<void(const EpochRecord&, MixarModel&)>;

struct TrainResult {
  std::vector<EpochRecord> epochs;
  std::int64_t generator_calls = 0;
  std::int64_t steps = 0;
  double seconds_per_step = 0.0;
};

/// Trains (or continues training) `model` on `data`. The generator is needed
/// only when guided training uses lambda < 1. `hook` runs after every
/// `eval_every` epochs and after the last one.
TrainResult train_mixar(MixarModel& model, const TokenizedDataset& data, DiscreteGenerator* generator,
                        const TrainConfig& cfg, const EpochHook& hook = {});

struct HeldOutConfig {
  MaskRatioConfig mask{0.7, 1.0};
  int repeats = 8;
  int batch_size = 64;
  double generator_temperature = 1.0;
  std::uint64_t seed = 99;
  bool use_ema = true;
};

/// Deterministic per-sequence masks for held-out evaluation (n·N flags).
std::vector<std::uint8_t> evaluation_masks(Index n, Index n_tokens, const HeldOutConfig& cfg);

/// Generator infill at the masked positions of `masks`, ground truth elsewhere.
std::vector<int> generated_guidance(DiscreteGenerator& generator, const TokenizedDataset& data,
                                    std::span<const std::uint8_t> masks, const HeldOutConfig& cfg);

/// Mean masked-position diffusion loss with the given guidance. Timesteps and
/// noise depend only on cfg.seed, so two calls differing only in guidance
/// are paired.
double held_out_loss(MixarModel& model, const TokenizedDataset& data, std::span<const int> guidance,
                     std::span<const std::uint8_t> masks, const HeldOutConfig& cfg);

struct GapResult {
  double loss_ground_truth = 0.0;
  double loss_generated = 0.0;
  double gap() const { return loss_generated - loss_ground_truth; }
};

GapResult train_eval_gap(MixarModel& model, const TokenizedDataset& data, DiscreteGenerator& generator,
                         const HeldOutConfig& cfg);

struct GenerationConfig {
  GenerateOptions discrete;
  int steps = 8;
  ScheduleShape shape = ScheduleShape::Cosine;
  double temperature = 1.0;
  double guidance_scale = 1.0;
  double x0_clip = 5.0;  // in normalized latent units
  int batch_size = 64;
  bool use_ema = true;

  io::Json to_json() const;
  static GenerationConfig from_json(const io::Json& j);
};

struct GeneratedBatch {
  ImageBatch images;
  Matrix tokens;                       // (n·N)×d_c raw latents
  std::vector<int> guidance;           // n·N, empty for the baseline
  std::vector<Provenance> provenance;  // n·N after decoding
  std::int64_t head_evaluations = 0;
};

/// Full pipeline: discrete generation, guided continuous decoding, tokenizer
/// decode. Output depends only on the inputs and `seed`.
GeneratedBatch generate_images(DiscreteGenerator* generator, MixarModel& model, const ContinuousTokenizer& decoder,
                               std::span<const int> classes, const GenerationConfig& cfg, std::uint64_t seed);

}  // namespace mixar
