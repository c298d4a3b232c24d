#pragma once

#include "mixar/common.hpp"
#include "mixar/rng.hpp"

#include <cstdint>
#include <span>
#include <string>
#include <vector>

namespace mixar {

struct MaskRatioConfig {
  double min = 0.7;
  double max = 1.0;

  void validate() const;
};

/// Uniform draw on [min, max].
double sample_mask_ratio(Rng& rng, const MaskRatioConfig& cfg);

/// ceil(r·n), computed with a small tolerance so that products such as
/// 0.7·10 that land just above an integer are not rounded up.
Index masked_count(Index n, double ratio);

/// Binary mask over N positions with exactly ceil(r·N) ones.
struct MaskSpec {
  std::vector<std::uint8_t> mask;       // 1 = masked
  double ratio = 1.0;
  std::vector<int> masked_positions;    // k_1 … k_N', in selection order

  Index size() const { return static_cast<Index>(mask.size()); }
  Index popcount() const { return static_cast<Index>(masked_positions.size()); }
  bool masked(Index i) const { return mask[static_cast<std::size_t>(i)] != 0; }
};

MaskSpec build_mask(Index n, double ratio, Rng& rng);
/// Mask from explicit flags (ratio recorded as popcount / n).
MaskSpec mask_from_flags(std::span<const std::uint8_t> flags);

enum class ScheduleShape { Cosine, Linear };
ScheduleShape parse_schedule_shape(const std::string& name);

struct DecodeSchedule {
  std::vector<int> counts;  // positions committed at each step

  int steps() const { return static_cast<int>(counts.size()); }
};

/// Splits `n_masked` positions into `steps` non-empty chunks. The cosine
/// shape keeps cos(pi/2·t/T) of the positions masked after step t, so early
/// steps commit fewer tokens than late ones.
DecodeSchedule build_decode_schedule(int n_masked, int steps, ScheduleShape shape);

}  // namespace mixar
