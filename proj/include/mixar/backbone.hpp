#pragma once

#include "mixar/io.hpp"
#include "mixar/mixture.hpp"
#include "mixar/nn/layers.hpp"

#include <cstdint>
#include <span>
#include <string>
#include <vector>

namespace mixar {

enum class GuidanceVariant { DcMix, DcSa, DcCa, MarBaseline };

std::string variant_name(GuidanceVariant v);
GuidanceVariant parse_variant(const std::string& name);
/// Variants that consume discrete guidance.
inline bool uses_guidance(GuidanceVariant v) { return v != GuidanceVariant::MarBaseline; }

struct BackboneConfig {
  GuidanceVariant variant = GuidanceVariant::DcMix;
  int n_tokens = 16;     // N
  int token_width = 8;   // d_c
  int code_width = 8;    // d_d
  int vocab = 64;        // V
  int n_classes = 8;     // class id n_classes is the null class
  int n_cls_tokens = 4;
  int width = 128;       // d_b
  int depth = 6;         // L
  int heads = 4;
  int mlp_ratio = 4;

  void validate() const;
  io::Json to_json() const;
  static BackboneConfig from_json(const io::Json& j);
};

/// Exact trainable-scalar count of the assembled variant, derived from the
/// layer construction (the frozen codebook is not counted).
Index count_parameters(const BackboneConfig& cfg);

/// Per-sequence attention score pairs summed over layers, from the formulas:
///   DC-Mix / MAR  (N + n_cls)^2 · L
///   DC-SA         (2N + n_cls)^2 · L
///   DC-CA         [(N + n_cls)^2 + (N + n_cls) · N] · L
std::int64_t expected_attention_pairs(const BackboneConfig& cfg);

/// Length of the self-attended sequence for one image.
Index self_attention_length(const BackboneConfig& cfg);

struct BackboneInput {
  Index batch = 0;
  const Matrix* continuous = nullptr;  // (batch·N)×d_c, values at masked positions are ignored
  std::span<const std::uint8_t> mask;  // batch·N, 1 = masked
  std::span<const int> guidance;       // batch·N discrete indices; empty for the MAR baseline
  std::span<const Provenance> guidance_source;  // optional, DC-Mix provenance bookkeeping
  std::span<const int> classes;        // batch class ids (n_classes = null class)
};

struct BackboneOutput {
  nn::Var z;                           // (batch·N)×d_b, one row per continuous position
  std::int64_t self_pairs = 0;         // per sequence, all layers
  std::int64_t cross_pairs = 0;        // per sequence, all layers
  std::vector<Provenance> provenance;  // DC-Mix only

  std::int64_t attention_pairs() const { return self_pairs + cross_pairs; }
};

/// Transformer over guidance-bearing sequences. Supports DC-Mix (mask token
/// replaced by a projected codeword), DC-SA (discrete prefix), DC-CA (one
/// cross-attention sub-block per layer) and the plain MAR baseline.
class Backbone {
 public:
  /// `codebook` (V×d_d) is required for DC-Mix and stored frozen.
  Backbone(const BackboneConfig& cfg, const Matrix& codebook, std::uint64_t seed = 0);

  const BackboneConfig& config() const { return cfg_; }

  BackboneOutput forward(nn::Tape& t, const BackboneInput& in);

  /// Width-d_b embedding of continuous tokens (no positional term).
  nn::Var embed_continuous(nn::Tape& t, const Matrix& tokens);
  /// Width-d_b embedding of guidance indices (no positional term).
  nn::Var embed_discrete(nn::Tape& t, std::span<const int> indices);
  /// Embeddings with the positional term of each row's grid position added.
  /// Rows are batch·N in sequence order.
  nn::Var embed_tokens(nn::Tape& t, const Matrix& tokens);
  nn::Var embed_tokens(nn::Tape& t, std::span<const int> indices);

  Embedders embedders();

  nn::NamedParameters parameters();
  Index parameter_count();
  io::ArrayMap export_arrays();
  void import_arrays(const io::ArrayMap& arrays);

 private:
  BackboneConfig cfg_;
  nn::Linear cont_proj_;
  nn::Parameter pos_;          // N×d_b
  nn::Parameter class_embed_;  // (classes+1)×d_b
  nn::Parameter cls_pos_;      // n_cls×d_b
  // DC-Mix
  nn::Parameter codebook_;     // V×d_d, frozen
  nn::Linear disc_proj_;
  // MAR / DC-SA / DC-CA
  nn::Parameter mask_token_;   // 1×d_b
  // DC-SA / DC-CA
  nn::Parameter disc_table_;   // V×d_b
  nn::Parameter disc_pos_;     // N×d_b
  std::vector<nn::TransformerBlock> blocks_;
  nn::LayerNorm final_norm_;
};

}  // namespace mixar
