#include "mixar/masking.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <numeric>

namespace mixar {

void MaskRatioConfig::validate() const {
  if (!(min > 0.0 && min <= max && max <= 1.0)) {
    throw ConfigError("mask ratio bounds must satisfy 0 < min <= max <= 1");
  }
}

double sample_mask_ratio(Rng& rng, const MaskRatioConfig& cfg) {
  cfg.validate();
  if (cfg.min == cfg.max) return cfg.min;
  return rng.uniform(cfg.min, cfg.max);
}

Index masked_count(Index n, double ratio) {
  return static_cast<Index>(std::ceil(ratio * static_cast<double>(n) - 1e-9));
}

MaskSpec build_mask(Index n, double ratio, Rng& rng) {
  require(n >= 1, "build_mask: need at least one position");
  require(ratio > 0.0 && ratio <= 1.0, "build_mask: ratio must be in (0, 1]");
  const Index k = std::clamp<Index>(masked_count(n, ratio), 1, n);
  std::vector<int> perm(static_cast<std::size_t>(n));
  std::iota(perm.begin(), perm.end(), 0);
  // Partial Fisher-Yates: the first k entries are a uniform k-subset.
  for (Index i = 0; i < k; ++i) {
    const auto j = i + static_cast<Index>(rng.below(static_cast<std::uint64_t>(n - i)));
    std::swap(perm[static_cast<std::size_t>(i)], perm[static_cast<std::size_t>(j)]);
  }
  MaskSpec m;
  m.ratio = ratio;
  m.mask.assign(static_cast<std::size_t>(n), 0);
  m.masked_positions.assign(perm.begin(), perm.begin() + k);
  for (int p : m.masked_positions) m.mask[static_cast<std::size_t>(p)] = 1;
  return m;
}

MaskSpec mask_from_flags(std::span<const std::uint8_t> flags) {
  MaskSpec m;
  m.mask.assign(flags.begin(), flags.end());
  for (std::size_t i = 0; i < flags.size(); ++i) {
    if (flags[i] != 0) {
      m.mask[i] = 1;
      m.masked_positions.push_back(static_cast<int>(i));
    }
  }
  m.ratio = flags.empty() ? 0.0 : static_cast<double>(m.masked_positions.size()) / static_cast<double>(flags.size());
  return m;
}

ScheduleShape parse_schedule_shape(const std::string& name) {
  if (name == "cosine") return ScheduleShape::Cosine;
  if (name == "linear") return ScheduleShape::Linear;
  throw ConfigError("unknown schedule shape '" + name + "' (expected cosine|linear)");
}

DecodeSchedule build_decode_schedule(int n_masked, int steps, ScheduleShape shape) {
  require(steps >= 1 && steps <= n_masked, "decode schedule: need 1 <= steps <= n_masked");
  DecodeSchedule s;
  int remaining = n_masked;
  for (int t = 1; t <= steps; ++t) {
    const double frac = static_cast<double>(t) / steps;
    const double keep = shape == ScheduleShape::Cosine ? std::cos(0.5 * std::numbers::pi * frac) : 1.0 - frac;
    int next = static_cast<int>(std::floor(n_masked * keep + 1e-9));
    // Leave at least one position for every later step, commit at least one now.
    next = std::clamp(next, steps - t, remaining - 1);
    if (t == steps) next = 0;
    s.counts.push_back(remaining - next);
    remaining = next;
  }
  return s;
}

}  // namespace mixar
