#pragma once

#include "mixar/io.hpp"
#include "mixar/nn/layers.hpp"

#include <cstdint>
#include <span>
#include <string>
#include <vector>

namespace mixar {

/// Discrete-time noising schedule. alpha_bar[0] = 1 (clean) and
/// alpha_bar[T] is close to zero.
struct DiffusionSchedule {
  std::string name = "cosine";
  int train_steps = 1000;
  int sample_steps = 100;
  std::vector<double> alpha_bar;  // train_steps + 1 entries

  static DiffusionSchedule cosine(int train_steps, int sample_steps);
  static DiffusionSchedule from_json(const io::Json& j);
  io::Json to_json() const;

  double signal(int t) const;  // sqrt(alpha_bar_t)
  double noise(int t) const;   // sqrt(1 - alpha_bar_t)
  /// Evenly spaced subset of [1, T] used for ancestral sampling, ascending.
  std::vector<int> sampling_timesteps() const;
};

/// x_t = sqrt(abar_t)·x0 + sqrt(1 − abar_t)·eps, row r at timestep t[r].
Matrix forward_noising(const Matrix& x0, std::span<const int> t, const Matrix& eps, const DiffusionSchedule& s);

struct DenoiserConfig {
  int token_width = 8;    // d_c
  int cond_width = 128;   // d_b
  int width = 256;
  int blocks = 3;
  int freq_dim = 64;

  void validate() const;
  io::Json to_json() const;
  static DenoiserConfig from_json(const io::Json& j);
};

/// Sinusoidal embedding of integer timesteps, one row per entry.
Matrix timestep_embedding(std::span<const int> t, int dim);

/// Residual MLP predicting the noise of x_t, modulated (shift, scale, gate)
/// by the timestep and the backbone conditioning vector z.
class DenoiserHead {
 public:
  explicit DenoiserHead(const DenoiserConfig& cfg, std::uint64_t seed = 0);

  const DenoiserConfig& config() const { return cfg_; }

  nn::Var predict(nn::Tape& t, nn::Var x_t, std::span<const int> steps, nn::Var z);

  std::int64_t evaluations() const { return evaluations_; }
  nn::NamedParameters parameters();

 private:
  struct ResBlock {
    nn::Linear fc1, fc2, modulation;
  };

  DenoiserConfig cfg_;
  nn::Linear time1_, time2_;
  nn::Linear cond_proj_;
  nn::Linear input_proj_;
  std::vector<ResBlock> blocks_;
  nn::Linear final_modulation_;
  nn::Linear output_;
  std::int64_t evaluations_ = 0;
};

/// Per-row denoising loss ||eps − eps_hat(x_t | t, z)||², averaged over
/// rows. Each conditioning row is repeated `repeats` times with independent
/// (t, eps); t is uniform on [1, T].
nn::Var denoise_loss(nn::Tape& t, DenoiserHead& head, nn::Var z, const Matrix& x0, const DiffusionSchedule& s,
                     Rng& rng, int repeats = 1);

struct SampleOptions {
  double guidance_scale = 1.0;
  double temperature = 1.0;
  double x0_clip = 0.0;  // clamp of the clean-token estimate, 0 disables
};

/// Ancestral sampling over the respaced schedule. With guidance_scale != 1,
/// `z_null` must be given and eps_hat = eps_null + s·(eps_cond − eps_null).
Matrix sample_tokens(DenoiserHead& head, const Matrix& z_cond, const Matrix* z_null, const DiffusionSchedule& s,
                     const SampleOptions& opts, Rng& rng);

}  // namespace mixar
