#include "mixar/diffusion_head.hpp"

#include "mixar/nn/ops.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

namespace mixar {

DiffusionSchedule DiffusionSchedule::cosine(int train_steps, int sample_steps) {
  if (train_steps < 1 || sample_steps < 1 || sample_steps > train_steps) {
    throw ConfigError("diffusion schedule: need 1 <= sample_steps <= train_steps");
  }
  DiffusionSchedule s;
  s.name = "cosine";
  s.train_steps = train_steps;
  s.sample_steps = sample_steps;
  constexpr double offset = 0.008;
  auto f = [&](int t) {
    const double c = std::cos((static_cast<double>(t) / train_steps + offset) / (1.0 + offset) * std::numbers::pi / 2.0);
    return c * c;
  };
  s.alpha_bar.resize(static_cast<std::size_t>(train_steps) + 1);
  s.alpha_bar[0] = 1.0;
  for (int t = 1; t <= train_steps; ++t) {
    // per-step beta clipped to 0.999 so alpha_bar stays strictly positive
    const double beta = std::min(1.0 - f(t) / f(t - 1), 0.999);
    s.alpha_bar[static_cast<std::size_t>(t)] = s.alpha_bar[static_cast<std::size_t>(t) - 1] * (1.0 - beta);
  }
  return s;
}

DiffusionSchedule DiffusionSchedule::from_json(const io::Json& j) {
  const std::string name = j.at("name");
  if (name != "cosine") throw ConfigError("unknown diffusion schedule '" + name + "'");
  return cosine(j.at("train_steps"), j.at("sample_steps"));
}

io::Json DiffusionSchedule::to_json() const {
  return {{"name", name}, {"train_steps", train_steps}, {"sample_steps", sample_steps}};
}

double DiffusionSchedule::signal(int t) const { return std::sqrt(alpha_bar[static_cast<std::size_t>(t)]); }
double DiffusionSchedule::noise(int t) const { return std::sqrt(1.0 - alpha_bar[static_cast<std::size_t>(t)]); }

std::vector<int> DiffusionSchedule::sampling_timesteps() const {
  std::vector<int> out;
  for (int k = 1; k <= sample_steps; ++k) {
    out.push_back(static_cast<int>(std::lround(static_cast<double>(k) * train_steps / sample_steps)));
  }
  return out;
}

Matrix forward_noising(const Matrix& x0, std::span<const int> t, const Matrix& eps, const DiffusionSchedule& s) {
  require(x0.rows() == eps.rows() && x0.cols() == eps.cols(), "forward_noising: x0/eps shape mismatch");
  require(static_cast<Index>(t.size()) == x0.rows(), "forward_noising: one timestep per row");
  Matrix out(x0.rows(), x0.cols());
  for (Index r = 0; r < x0.rows(); ++r) {
    const int step = t[static_cast<std::size_t>(r)];
    require(step >= 0 && step <= s.train_steps, "forward_noising: timestep out of range");
    out.row(r) = s.signal(step) * x0.row(r) + s.noise(step) * eps.row(r);
  }
  return out;
}

void DenoiserConfig::validate() const {
  if (token_width <= 0 || cond_width <= 0 || width <= 0 || blocks < 0 || freq_dim <= 0 || freq_dim % 2 != 0) {
    throw ConfigError("denoiser: widths must be positive (freq_dim even)");
  }
}

io::Json DenoiserConfig::to_json() const {
  return {{"d_c", token_width}, {"cond_width", cond_width}, {"width", width}, {"blocks", blocks}, {"freq_dim", freq_dim}};
}

DenoiserConfig DenoiserConfig::from_json(const io::Json& j) {
  DenoiserConfig c;
  c.token_width = j.at("d_c");
  c.cond_width = j.at("cond_width");
  c.width = j.at("width");
  c.blocks = j.at("blocks");
  c.freq_dim = j.at("freq_dim");
  return c;
}

Matrix timestep_embedding(std::span<const int> t, int dim) {
  const int half = dim / 2;
  Matrix out(static_cast<Index>(t.size()), dim);
  for (std::size_t r = 0; r < t.size(); ++r) {
    for (int i = 0; i < half; ++i) {
      const double freq = std::exp(-std::log(10000.0) * i / half);
      const double arg = t[r] * freq;
      out(static_cast<Index>(r), i) = std::cos(arg);
      out(static_cast<Index>(r), half + i) = std::sin(arg);
    }
  }
  return out;
}

DenoiserHead::DenoiserHead(const DenoiserConfig& cfg, std::uint64_t seed) : cfg_(cfg) {
  cfg_.validate();
  Rng rng(mix_seed(seed, 0xDF));
  const Index w = cfg_.width;
  time1_ = nn::Linear(cfg_.freq_dim, w, rng);
  time2_ = nn::Linear(w, w, rng);
  cond_proj_ = nn::Linear(cfg_.cond_width, w, rng);
  input_proj_ = nn::Linear(cfg_.token_width, w, rng);
  for (int b = 0; b < cfg_.blocks; ++b) {
    ResBlock blk{nn::Linear(w, w, rng), nn::Linear(w, w, rng), nn::Linear(w, 3 * w, rng)};
    blk.modulation.weight.value.setZero();
    blocks_.push_back(std::move(blk));
  }
  final_modulation_ = nn::Linear(w, 2 * w, rng);
  final_modulation_.weight.value.setZero();
  output_ = nn::Linear(w, cfg_.token_width, rng);
  output_.weight.value.setZero();
}

nn::Var DenoiserHead::predict(nn::Tape& t, nn::Var x_t, std::span<const int> steps, nn::Var z) {
  require(x_t.cols() == cfg_.token_width && z.cols() == cfg_.cond_width, "denoiser: input width mismatch");
  require(x_t.rows() == z.rows() && static_cast<Index>(steps.size()) == x_t.rows(), "denoiser: row count mismatch");
  ++evaluations_;
  const Index w = cfg_.width;
  nn::Var ones = t.constant(Matrix::Ones(1, w));
  nn::Var zeros = t.constant(Matrix::Zero(1, w));

  nn::Var temb = time2_(t, nn::silu(time1_(t, t.constant(timestep_embedding(steps, cfg_.freq_dim)))));
  nn::Var cond = nn::silu(nn::add(temb, cond_proj_(t, z)));
  nn::Var x = input_proj_(t, x_t);
  for (auto& blk : blocks_) {
    nn::Var mod = blk.modulation(t, cond);
    nn::Var shift = nn::slice_cols(mod, 0, w);
    nn::Var scl = nn::slice_cols(mod, w, w);
    nn::Var gate = nn::slice_cols(mod, 2 * w, w);
    nn::Var h = nn::layer_norm(x, ones, zeros);
    h = nn::add(nn::mul(h, nn::add_scalar(scl, 1.0)), shift);
    h = blk.fc2(t, nn::silu(blk.fc1(t, h)));
    x = nn::add(x, nn::mul(gate, h));
  }
  nn::Var mod = final_modulation_(t, cond);
  nn::Var h = nn::layer_norm(x, ones, zeros);
  h = nn::add(nn::mul(h, nn::add_scalar(nn::slice_cols(mod, w, w), 1.0)), nn::slice_cols(mod, 0, w));
  return output_(t, h);
}

nn::NamedParameters DenoiserHead::parameters() {
  nn::NamedParameters out;
  time1_.collect(out, "time1.");
  time2_.collect(out, "time2.");
  cond_proj_.collect(out, "cond_proj.");
  input_proj_.collect(out, "input_proj.");
  for (std::size_t b = 0; b < blocks_.size(); ++b) {
    const std::string p = "blocks." + std::to_string(b) + ".";
    blocks_[b].fc1.collect(out, p + "fc1.");
    blocks_[b].fc2.collect(out, p + "fc2.");
    blocks_[b].modulation.collect(out, p + "modulation.");
  }
  final_modulation_.collect(out, "final_modulation.");
  output_.collect(out, "output.");
  return out;
}

nn::Var denoise_loss(nn::Tape& t, DenoiserHead& head, nn::Var z, const Matrix& x0, const DiffusionSchedule& s,
                     Rng& rng, int repeats) {
  require(repeats >= 1, "denoise_loss: repeats must be positive");
  require(z.rows() == x0.rows(), "denoise_loss: one target per conditioning row");
  const Index rows = x0.rows() * repeats;
  std::vector<int> src(static_cast<std::size_t>(rows));
  std::vector<int> steps(static_cast<std::size_t>(rows));
  Matrix x0_rep(rows, x0.cols());
  Matrix eps(rows, x0.cols());
  for (Index r = 0; r < rows; ++r) {
    const auto i = static_cast<std::size_t>(r);
    src[i] = static_cast<int>(r % x0.rows());
    steps[i] = 1 + static_cast<int>(rng.below(static_cast<std::uint64_t>(s.train_steps)));
    x0_rep.row(r) = x0.row(src[i]);
    for (Index c = 0; c < eps.cols(); ++c) eps(r, c) = rng.normal();
  }
  nn::Var z_rep = repeats == 1 ? z : nn::gather_rows(z, src);
  nn::Var x_t = t.constant(forward_noising(x0_rep, steps, eps, s));
  nn::Var pred = head.predict(t, x_t, steps, z_rep);
  nn::Var loss = nn::row_squared_error(pred, t.constant(std::move(eps)));
  require_finite(loss.scalar(), "denoising loss");
  return loss;
}

Matrix sample_tokens(DenoiserHead& head, const Matrix& z_cond, const Matrix* z_null, const DiffusionSchedule& s,
                     const SampleOptions& opts, Rng& rng) {
  const bool guided = opts.guidance_scale != 1.0;
  require(!guided || (z_null != nullptr && z_null->rows() == z_cond.rows()), "sample_tokens: guidance needs z_null");
  const Index rows = z_cond.rows();
  const Index width = head.config().token_width;
  auto gaussian = [&](Index r, Index c) {
    Matrix m(r, c);
    for (Index i = 0; i < m.size(); ++i) m.data()[i] = rng.normal();
    return m;
  };
  Matrix x = gaussian(rows, width);
  const std::vector<int> taus = s.sampling_timesteps();
  for (int k = static_cast<int>(taus.size()) - 1; k >= 0; --k) {
    const int tau = taus[static_cast<std::size_t>(k)];
    const double ab = s.alpha_bar[static_cast<std::size_t>(tau)];
    const double ab_prev = k > 0 ? s.alpha_bar[static_cast<std::size_t>(taus[static_cast<std::size_t>(k) - 1])] : 1.0;
    const double alpha = ab / ab_prev;
    const double beta = 1.0 - alpha;
    const std::vector<int> steps(static_cast<std::size_t>(rows), tau);

    nn::Tape t(false);
    Matrix eps = head.predict(t, t.constant(x), steps, t.constant(z_cond)).value();
    if (guided) {
      Matrix eps_null = head.predict(t, t.constant(x), steps, t.constant(*z_null)).value();
      eps = eps_null + opts.guidance_scale * (eps - eps_null);
    }
    Matrix x0_hat = (x - std::sqrt(1.0 - ab) * eps) / std::sqrt(ab);
    if (opts.x0_clip > 0.0) x0_hat = x0_hat.cwiseMax(-opts.x0_clip).cwiseMin(opts.x0_clip);
    Matrix mean = (std::sqrt(ab_prev) * beta / (1.0 - ab)) * x0_hat + (std::sqrt(alpha) * (1.0 - ab_prev) / (1.0 - ab)) * x;
    if (k > 0) {
      const double var = beta * (1.0 - ab_prev) / (1.0 - ab);
      mean += (opts.temperature * std::sqrt(var)) * gaussian(rows, width);
    }
    x = std::move(mean);
  }
  return x;
}

}  // namespace mixar
