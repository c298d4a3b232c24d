#include "mixar/mixture.hpp"

#include "mixar/nn/ops.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

namespace mixar {

MixedSequence dc_mix(nn::Tape& t, const Matrix& continuous, std::span<const int> guidance,
                     std::span<const std::uint8_t> mask, const Embedders& embed,
                     std::span<const Provenance> guidance_source) {
  const auto n = static_cast<Index>(mask.size());
  require(continuous.rows() == n && static_cast<Index>(guidance.size()) == n, "dc_mix: sequence lengths differ");
  require(guidance_source.empty() || static_cast<Index>(guidance_source.size()) == n, "dc_mix: provenance length");
  nn::Var cont = embed.continuous(t, continuous);
  nn::Var disc = embed.discrete(t, guidance);
  require(cont.rows() == n && disc.rows() == n && cont.cols() == disc.cols(), "dc_mix: embedder output shape");

  MixedSequence out;
  out.mask.assign(mask.begin(), mask.end());
  out.provenance.resize(static_cast<std::size_t>(n));
  std::vector<int> pick(static_cast<std::size_t>(n));
  for (Index i = 0; i < n; ++i) {
    const auto s = static_cast<std::size_t>(i);
    if (mask[s] != 0) {
      pick[s] = static_cast<int>(n + i);
      out.provenance[s] = guidance_source.empty() ? Provenance::DiscreteGt : guidance_source[s];
      require(out.provenance[s] != Provenance::Continuous, "dc_mix: masked position tagged continuous");
    } else {
      pick[s] = static_cast<int>(i);
      out.provenance[s] = Provenance::Continuous;
    }
  }
  out.embeddings = nn::gather_rows(nn::concat_rows({cont, disc}), pick);
  return out;
}

TiMixResult ti_mix(std::span<const int> truth, std::span<const int> generated, std::span<const std::uint8_t> mask,
                   double lambda, Rng& rng) {
  require(truth.size() == generated.size() && truth.size() == mask.size(), "ti_mix: sequence lengths differ");
  require(lambda >= 0.0 && lambda <= 1.0, "ti_mix: lambda must lie in [0, 1]");
  TiMixResult out;
  out.tokens.assign(truth.begin(), truth.end());
  out.source.assign(truth.size(), Provenance::DiscreteGt);
  for (std::size_t i = 0; i < truth.size(); ++i) {
    if (mask[i] == 0) {
      require(generated[i] == truth[i], "ti_mix: generated sequence differs from ground truth at an unmasked position");
      continue;
    }
    const double rho = rng.uniform();
    if (rho >= lambda) {
      out.tokens[i] = generated[i];
      out.source[i] = Provenance::DiscreteGen;
    }
  }
  return out;
}

LambdaDecay parse_lambda_decay(const std::string& name) {
  if (name == "linear") return LambdaDecay::Linear;
  if (name == "cosine") return LambdaDecay::Cosine;
  throw ConfigError("unknown lambda decay '" + name + "' (expected linear|cosine)");
}

void TiMixConfig::validate() const {
  if (!(lambda_end >= 0.0 && lambda_end <= lambda_start && lambda_start <= 1.0)) {
    throw ConfigError("ti-mix: need 0 <= lambda_end <= lambda_start <= 1");
  }
  if (start_epoch < 0) throw ConfigError("ti-mix: start epoch must be non-negative");
}

double lambda_schedule(int epoch, int total_epochs, const TiMixConfig& cfg) {
  require(epoch >= 0 && epoch <= total_epochs, "lambda_schedule: epoch out of range");
  if (epoch < cfg.start_epoch) return cfg.lambda_start;
  if (epoch >= total_epochs) return cfg.lambda_end;
  const double span = static_cast<double>(total_epochs - cfg.start_epoch);
  const double progress = std::clamp(static_cast<double>(epoch - cfg.start_epoch) / span, 0.0, 1.0);
  const double w = cfg.decay == LambdaDecay::Linear ? 1.0 - progress : 0.5 * (1.0 + std::cos(std::numbers::pi * progress));
  return cfg.lambda_end + (cfg.lambda_start - cfg.lambda_end) * w;
}

}  // namespace mixar
