#pragma once

#include "mixar/io.hpp"
#include "mixar/masking.hpp"
#include "mixar/nn/layers.hpp"

#include <cstdint>
#include <span>
#include <vector>

namespace mixar {

struct DiscreteGeneratorConfig {
  int vocab = 64;     // V; index V is the mask token
  int n_tokens = 16;  // N
  int n_classes = 8;
  int n_cls_tokens = 4;
  int width = 128;
  int depth = 4;
  int heads = 4;
  int mlp_ratio = 4;

  void validate() const;
  io::Json to_json() const;
  static DiscreteGeneratorConfig from_json(const io::Json& j);
};

/// Bidirectional masked-token transformer over codebook indices, conditioned
/// on a class through prepended class tokens.
class DiscreteGenerator {
 public:
  explicit DiscreteGenerator(const DiscreteGeneratorConfig& cfg, std::uint64_t seed = 0);

  int mask_token() const { return cfg_.vocab; }
  const DiscreteGeneratorConfig& config() const { return cfg_; }

  /// Logits (batch·N)×V for token sequences (entries in [0, V], V = mask).
  nn::Var logits(nn::Tape& t, std::span<const int> tokens, std::span<const int> classes);

  nn::NamedParameters parameters();
  io::Checkpoint to_checkpoint(const io::Json& extra = {});
  static DiscreteGenerator from_checkpoint(const io::Checkpoint& ckpt);

  std::int64_t forward_calls() const { return forward_calls_; }

 private:
  DiscreteGeneratorConfig cfg_;
  nn::Parameter token_embed_;  // (V+1)×width
  nn::Parameter class_embed_;  // classes×width
  nn::Parameter cls_pos_;      // n_cls×width
  nn::Parameter pos_;          // N×width
  std::vector<nn::TransformerBlock> blocks_;
  nn::LayerNorm final_norm_;
  nn::Linear head_;
  std::int64_t forward_calls_ = 0;
};

/// Position i holds the mask token where the mask is set, x_d^i otherwise.
/// `tokens` and `mask` are batch·N long.
std::vector<int> mask_discrete_sequence(std::span<const int> tokens, std::span<const std::uint8_t> mask,
                                        int mask_token);

struct DiscreteStepResult {
  nn::Var loss;
  std::vector<std::uint8_t> mask;  // batch·N
};

/// Masked cross-entropy over masked positions only. A fresh mask with
/// ratio ~ p(r) is drawn per sequence.
DiscreteStepResult discrete_loss(nn::Tape& t, DiscreteGenerator& model, std::span<const int> tokens,
                                 std::span<const int> classes, const MaskRatioConfig& ratio, Rng& rng);

/// Categorical draw from softmax(logits / temperature); temperature <= 0
/// selects the argmax (lowest index on ties).
int sample_categorical(const Eigen::Ref<const RowVector>& logits, double temperature, Rng& rng);

/// Records which flat positions (b·N + i) were committed at each step.
struct DecodeTrace {
  std::vector<std::vector<int>> committed;
};

struct GenerateOptions {
  int steps = 8;
  double temperature = 1.0;
  ScheduleShape shape = ScheduleShape::Cosine;
};

/// Iterative parallel decoding from an all-masked sequence. At each step a
/// token is sampled for every still-masked position, then a uniformly random
/// subset of the scheduled size is committed.
std::vector<int> generate_discrete(DiscreteGenerator& model, std::span<const int> classes,
                                   const GenerateOptions& opts, Rng& rng, DecodeTrace* trace = nullptr);

/// One forward pass; masked positions are sampled, the rest are copied.
/// Every sequence must contain at least one mask token.
std::vector<int> infill_discrete(DiscreteGenerator& model, std::span<const int> masked_tokens,
                                 std::span<const int> classes, double temperature, Rng& rng);

struct DiscreteTrainConfig {
  int epochs = 60;
  int batch_size = 32;
  double lr = 1e-3;
  double warmup = 0.05;
  MaskRatioConfig ratio{0.1, 1.0};
  std::uint64_t seed = 0;
};

/// Trains on token sequences (n·N entries) with per-sequence labels.
/// Returns the per-epoch mean loss.
std::vector<double> train_discrete(DiscreteGenerator& model, std::span<const int> tokens, std::span<const int> labels,
                                   const DiscreteTrainConfig& cfg);

}  // namespace mixar
