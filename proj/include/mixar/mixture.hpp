#pragma once

#include "mixar/nn/tape.hpp"
#include "mixar/rng.hpp"

#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <vector>

namespace mixar {

enum class Provenance : std::uint8_t { Continuous = 0, DiscreteGt = 1, DiscreteGen = 2 };

/// Backbone-width sequence in which masked positions carry discrete
/// guidance and unmasked positions carry continuous tokens.
struct MixedSequence {
  nn::Var embeddings;                // (batch·N)×d_b
  std::vector<Provenance> provenance;  // batch·N
  std::vector<std::uint8_t> mask;      // batch·N
};

/// Maps continuous token rows and discrete indices to backbone width.
struct Embedders {
  std::function<nn::Var(nn::Tape&, const Matrix&)> continuous;
  std::function<nn::Var(nn::Tape&, std::span<const int>)> discrete;
};

/// Row i takes embed_d(guidance[i]) where mask[i] is set and embed_c of
/// continuous row i otherwise. `guidance_source` (optional) tells whether each
/// guidance token is ground truth or generated; default is ground truth.
MixedSequence dc_mix(nn::Tape& t, const Matrix& continuous, std::span<const int> guidance,
                     std::span<const std::uint8_t> mask, const Embedders& embed,
                     std::span<const Provenance> guidance_source = {});

struct TiMixResult {
  std::vector<int> tokens;
  std::vector<Provenance> source;  // DiscreteGt or DiscreteGen per position
};

/// Blends ground-truth and generated guidance: a masked position keeps the
/// ground-truth token when rho < lambda (rho ~ U(0,1) per position) and takes
/// the generated one otherwise. Unmasked positions are always ground truth;
/// `generated` must agree with `truth` there.
TiMixResult ti_mix(std::span<const int> truth, std::span<const int> generated, std::span<const std::uint8_t> mask,
                   double lambda, Rng& rng);

enum class LambdaDecay { Linear, Cosine };
LambdaDecay parse_lambda_decay(const std::string& name);

struct TiMixConfig {
  double lambda_start = 1.0;
  double lambda_end = 0.0;
  LambdaDecay decay = LambdaDecay::Linear;
  int start_epoch = 0;

  void validate() const;
  bool always_ground_truth() const { return lambda_start >= 1.0 && lambda_end >= 1.0; }
};

/// Ground-truth guidance ratio for `epoch`: held at lambda_start until
/// start_epoch, then decays monotonically to lambda_end at total_epochs.
double lambda_schedule(int epoch, int total_epochs, const TiMixConfig& cfg);

}  // namespace mixar
