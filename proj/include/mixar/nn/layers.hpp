#pragma once

#include "mixar/nn/ops.hpp"
#include "mixar/rng.hpp"

#include <cstdint>
#include <string>
#include <vector>

namespace mixar::nn {

Matrix xavier_uniform(Index fan_in, Index fan_out, Rng& rng);
Matrix normal_init(Index rows, Index cols, double stddev, Rng& rng);

struct Linear {
  Parameter weight;  // in×out
  Parameter bias;    // 1×out
  bool has_bias = true;

  Linear() = default;
  Linear(Index in, Index out, Rng& rng, bool with_bias = true);

  Var operator()(Tape& t, Var x);
  void collect(NamedParameters& out, const std::string& prefix);
  Index in_features() const { return weight.value.rows(); }
  Index out_features() const { return weight.value.cols(); }
};

struct LayerNorm {
  Parameter gamma;
  Parameter beta;

  LayerNorm() = default;
  explicit LayerNorm(Index width);

  Var operator()(Tape& t, Var x);
  void collect(NamedParameters& out, const std::string& prefix);
};

/// Two-layer perceptron with GELU.
struct Mlp {
  Linear fc1;
  Linear fc2;

  Mlp() = default;
  Mlp(Index in, Index hidden, Index out, Rng& rng);

  Var operator()(Tape& t, Var x);
  void collect(NamedParameters& out, const std::string& prefix);
};

/// Multi-head attention with separate query/key/value/output projections.
struct MultiHeadAttention {
  Linear wq, wk, wv, wo;
  int heads = 1;

  MultiHeadAttention() = default;
  MultiHeadAttention(Index width, int heads, Rng& rng);

  /// `x` attends to `memory` (self-attention when both are the same var).
  Var operator()(Tape& t, Var x, Var memory, Index batch, std::int64_t* pair_count);
  void collect(NamedParameters& out, const std::string& prefix);
};

/// Pre-norm transformer block; optionally followed by a cross-attention
/// sub-block over an external memory.
struct TransformerBlock {
  LayerNorm norm1;
  MultiHeadAttention attn;
  bool has_cross = false;
  LayerNorm norm_cross;
  MultiHeadAttention cross;
  LayerNorm norm2;
  Mlp mlp;

  TransformerBlock() = default;
  TransformerBlock(Index width, int heads, Index mlp_ratio, bool with_cross, Rng& rng);

  Var operator()(Tape& t, Var x, Index batch, Var memory, std::int64_t* self_pairs, std::int64_t* cross_pairs);
  void collect(NamedParameters& out, const std::string& prefix);
};

/// Adam with decoupled weight decay.
class Adam {
 public:
  struct Options {
    double lr = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.95;
    double eps = 1e-8;
    double weight_decay = 0.0;
    double grad_clip = 0.0;  // global-norm clip, 0 disables
  };

  Adam(NamedParameters params, Options opts);

  void zero_grad();
  /// Applies one update at the given learning rate; returns the pre-clip
  /// global gradient norm.
  double step(double lr);
  std::int64_t steps() const { return t_; }

 private:
  NamedParameters params_;
  Options opts_;
  std::vector<Matrix> m_, v_;
  std::int64_t t_ = 0;
};

/// Linear warmup followed by cosine decay to zero.
double warmup_cosine_lr(double base_lr, std::int64_t step, std::int64_t total_steps, double warmup_fraction);

/// Exponential moving average of parameter values.
class Ema {
 public:
  Ema(const NamedParameters& params, double decay);

  void update();
  /// Swap EMA and live values; calling twice restores the live weights.
  void swap();
  double decay() const { return decay_; }
  const std::vector<Matrix>& shadow() const { return shadow_; }
  void load_shadow(std::vector<Matrix> values);

 private:
  NamedParameters params_;
  std::vector<Matrix> shadow_;
  double decay_;
};

}  // namespace mixar::nn
