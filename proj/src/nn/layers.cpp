#include "mixar/nn/layers.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

namespace mixar::nn {

Matrix xavier_uniform(Index fan_in, Index fan_out, Rng& rng) {
  const double a = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
  Matrix m(fan_in, fan_out);
  for (Index i = 0; i < m.size(); ++i) m.data()[i] = rng.uniform(-a, a);
  return m;
}

Matrix normal_init(Index rows, Index cols, double stddev, Rng& rng) {
  Matrix m(rows, cols);
  for (Index i = 0; i < m.size(); ++i) m.data()[i] = stddev * rng.normal();
  return m;
}

Linear::Linear(Index in, Index out, Rng& rng, bool with_bias)
    : weight(xavier_uniform(in, out, rng)), bias(Matrix::Zero(1, out)), has_bias(with_bias) {}

Var Linear::operator()(Tape& t, Var x) {
  return linear(x, t.param(weight), has_bias ? t.param(bias) : Var{});
}

void Linear::collect(NamedParameters& out, const std::string& prefix) {
  out.emplace_back(prefix + "weight", &weight);
  if (has_bias) out.emplace_back(prefix + "bias", &bias);
}

LayerNorm::LayerNorm(Index width) : gamma(Matrix::Ones(1, width)), beta(Matrix::Zero(1, width)) {}

Var LayerNorm::operator()(Tape& t, Var x) { return layer_norm(x, t.param(gamma), t.param(beta)); }

void LayerNorm::collect(NamedParameters& out, const std::string& prefix) {
  out.emplace_back(prefix + "gamma", &gamma);
  out.emplace_back(prefix + "beta", &beta);
}

Mlp::Mlp(Index in, Index hidden, Index out, Rng& rng) : fc1(in, hidden, rng), fc2(hidden, out, rng) {}

Var Mlp::operator()(Tape& t, Var x) { return fc2(t, gelu(fc1(t, x))); }

void Mlp::collect(NamedParameters& out, const std::string& prefix) {
  fc1.collect(out, prefix + "fc1.");
  fc2.collect(out, prefix + "fc2.");
}

MultiHeadAttention::MultiHeadAttention(Index width, int n_heads, Rng& rng)
    : wq(width, width, rng), wk(width, width, rng), wv(width, width, rng), wo(width, width, rng), heads(n_heads) {
  require(n_heads > 0 && width % n_heads == 0, "attention heads must divide width");
}

Var MultiHeadAttention::operator()(Tape& t, Var x, Var memory, Index batch, std::int64_t* pair_count) {
  Var q = wq(t, x);
  Var k = wk(t, memory);
  Var v = wv(t, memory);
  return wo(t, attention(q, k, v, batch, heads, pair_count));
}

void MultiHeadAttention::collect(NamedParameters& out, const std::string& prefix) {
  wq.collect(out, prefix + "q.");
  wk.collect(out, prefix + "k.");
  wv.collect(out, prefix + "v.");
  wo.collect(out, prefix + "o.");
}

TransformerBlock::TransformerBlock(Index width, int n_heads, Index mlp_ratio, bool with_cross, Rng& rng)
    : norm1(width), attn(width, n_heads, rng), has_cross(with_cross), norm2(width), mlp(width, width * mlp_ratio, width, rng) {
  if (has_cross) {
    norm_cross = LayerNorm(width);
    cross = MultiHeadAttention(width, n_heads, rng);
  }
}

Var TransformerBlock::operator()(Tape& t, Var x, Index batch, Var memory, std::int64_t* self_pairs,
                                 std::int64_t* cross_pairs) {
  Var h = norm1(t, x);
  x = add(x, attn(t, h, h, batch, self_pairs));
  if (has_cross) {
    require(memory.valid(), "cross-attention block needs a memory sequence");
    x = add(x, cross(t, norm_cross(t, x), memory, batch, cross_pairs));
  }
  return add(x, mlp(t, norm2(t, x)));
}

void TransformerBlock::collect(NamedParameters& out, const std::string& prefix) {
  norm1.collect(out, prefix + "norm1.");
  attn.collect(out, prefix + "attn.");
  if (has_cross) {
    norm_cross.collect(out, prefix + "norm_cross.");
    cross.collect(out, prefix + "cross.");
  }
  norm2.collect(out, prefix + "norm2.");
  mlp.collect(out, prefix + "mlp.");
}

Adam::Adam(NamedParameters params, Options opts) : params_(std::move(params)), opts_(opts) {
  for (auto& [name, p] : params_) {
    m_.push_back(Matrix::Zero(p->value.rows(), p->value.cols()));
    v_.push_back(Matrix::Zero(p->value.rows(), p->value.cols()));
    if (p->grad.size() != p->value.size()) p->zero_grad();
  }
}

void Adam::zero_grad() {
  for (auto& [name, p] : params_) p->zero_grad();
}

double Adam::step(double lr) {
  double sq = 0.0;
  for (auto& [name, p] : params_) {
    if (p->trainable) sq += p->grad.squaredNorm();
  }
  const double norm = std::sqrt(sq);
  require_finite(norm, "gradient norm");
  const double clip = (opts_.grad_clip > 0.0 && norm > opts_.grad_clip) ? opts_.grad_clip / norm : 1.0;
  ++t_;
  const double bc1 = 1.0 - std::pow(opts_.beta1, static_cast<double>(t_));
  const double bc2 = 1.0 - std::pow(opts_.beta2, static_cast<double>(t_));
  for (std::size_t i = 0; i < params_.size(); ++i) {
    Parameter& p = *params_[i].second;
    if (!p.trainable) continue;
    Matrix g = p.grad * clip;
    m_[i] = opts_.beta1 * m_[i] + (1.0 - opts_.beta1) * g;
    v_[i] = opts_.beta2 * v_[i] + (1.0 - opts_.beta2) * g.cwiseAbs2();
    if (opts_.weight_decay > 0.0) p.value *= (1.0 - lr * opts_.weight_decay);
    p.value.array() -= lr * (m_[i].array() / bc1) / ((v_[i].array() / bc2).sqrt() + opts_.eps);
  }
  return norm;
}

double warmup_cosine_lr(double base_lr, std::int64_t step, std::int64_t total_steps, double warmup_fraction) {
  if (total_steps <= 0) return base_lr;
  const auto warmup = static_cast<std::int64_t>(std::ceil(warmup_fraction * static_cast<double>(total_steps)));
  if (step < warmup) return base_lr * static_cast<double>(step + 1) / static_cast<double>(warmup);
  const double progress =
      static_cast<double>(step - warmup) / static_cast<double>(std::max<std::int64_t>(1, total_steps - warmup));
  return 0.5 * base_lr * (1.0 + std::cos(std::numbers::pi * std::min(1.0, progress)));
}

Ema::Ema(const NamedParameters& params, double decay) : params_(params), decay_(decay) {
  for (auto& [name, p] : params_) shadow_.push_back(p->value);
}

void Ema::update() {
  for (std::size_t i = 0; i < params_.size(); ++i) {
    shadow_[i] = decay_ * shadow_[i] + (1.0 - decay_) * params_[i].second->value;
  }
}

void Ema::swap() {
  for (std::size_t i = 0; i < params_.size(); ++i) std::swap(shadow_[i], params_[i].second->value);
}

void Ema::load_shadow(std::vector<Matrix> values) {
  require(values.size() == shadow_.size(), "EMA shadow size mismatch");
  shadow_ = std::move(values);
}

}  // namespace mixar::nn
