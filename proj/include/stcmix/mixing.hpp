// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <array>
#include <optional>
#include <string>
#include <vector>

#include "stcmix/rng.hpp"
#include "stcmix/tensor.hpp"

namespace stcmix {

/// Half-open 4-D box over (channel, time, height, width).
struct MaskBox {
  std::array<long long, 4> lo{};
  std::array<long long, 4> hi{};

  long long volume() const {
    long long v = 1;
    for (int i = 0; i < 4; ++i) v *= std::max(0LL, hi[i] - lo[i]);
    return v;
  }
  bool empty() const { return volume() == 0; }
  bool contains(long long c, long long t, long long h, long long w) const {
    return c >= lo[0] && c < hi[0] && t >= lo[1] && t < hi[1] && h >= lo[2] && h < hi[2] &&
           w >= lo[3] && w < hi[3];
  }
};

/// Result of a mixing operator. `lambdas[i]` is the fraction of the primary
/// operand retained in sample i's label mix (per-sample for mixup, one shared
/// value for the cutmix family); the mixed label is
/// lambda * y_i + (1 - lambda) * y_partner[i].
struct MixOutcome {
  Tensor mixed;
  std::vector<double> lambdas;
  std::vector<size_t> partner;
  std::optional<MaskBox> mask_box;

  double lambda() const { return lambdas.at(0); }
};

enum class MixOperator { None, Mixup, TemporalCutmix, StCutmix, VideoMix };

const char* mix_operator_name(MixOperator op);
MixOperator parse_mix_operator(const std::string& name);

/// Identity outcome: mixed == x, lambda == 1, partner == identity.
MixOutcome no_mix(const Tensor& x);

/// Per-sample lambda_i ~ Beta(alpha, alpha) and a random partner permutation;
/// mixed_i = lambda_i * x_i + (1 - lambda_i) * x_partner[i]. lambda 1 and 0
/// degenerate to bitwise copies of the respective operand.
MixOutcome mixup_batch(const Tensor& x, double alpha, Rng& rng,
                       std::optional<double> forced_lambda = {});

/// One lambda ~ Beta(alpha, alpha) per batch; a contiguous run of
/// round((1 - lambda) * T) frames at a uniform start is swapped whole-frame
/// with the partner's frames. Reported lambda is the retained-frame fraction.
MixOutcome temporal_cutmix(const Tensor& x, double alpha, Rng& rng,
                           std::optional<double> forced_lambda = {});

/// Random (t, h, w) sub-cuboid with per-dimension extents scaled by
/// cbrt(1 - lambda), uniform random center, clipped at borders; all channels.
/// lambda is recomputed from the clipped volume.
MixOutcome st_cutmix(const Tensor& x, double alpha, Rng& rng,
                     std::optional<double> forced_lambda = {});

/// Spatial box with sides scaled by sqrt(1 - lambda), applied identically to
/// every frame and channel (clipwise consistent); lambda recomputed from the
/// clipped area.
MixOutcome videomix(const Tensor& x, double alpha, Rng& rng,
                    std::optional<double> forced_lambda = {});

// Deterministic cores behind the samplers; tests drive these with exact boxes.
MixOutcome mixup_apply(const Tensor& x, const std::vector<size_t>& partner,
                       const std::vector<double>& lambdas);
MixOutcome temporal_cutmix_apply(const Tensor& x, const std::vector<size_t>& partner,
                                 size_t start, size_t length);
MixOutcome st_cutmix_apply(const Tensor& x, const std::vector<size_t>& partner,
                           const MaskBox& box); // box channel span ignored (full)
MixOutcome videomix_apply(const Tensor& x, const std::vector<size_t>& partner,
                          const MaskBox& box); // box channel/time spans ignored (full)

/// Feature-space cutmix between two hidden video tesseracts (B,c,t,h,w),
/// pairing g1_i with g2_partner[i]:
///   1. a spatial source patch in g2 with sides scaled by sqrt(1 - u),
///      u ~ Beta(alpha, alpha), full time and channel extent, uniform random
///      center, clipped;
///   2. a destination 4-D box in g1 with extents (min(c2,c1), min(t2,t1),
///      min(hs,h1), min(ws,w1)), uniform random center per dimension, clipped
///      to g1's bounds;
///   3. the source patch re-cropped to the clipped destination extents,
///      center-aligned within the source availability;
///   4. the destination box overwritten with the partner's source patch;
///   5. lambda = (g1 volume - box volume) / g1 volume.
/// A box that clips to zero volume yields the identity with lambda 1.
MixOutcome cmmc_mix(const Tensor& g1, const Tensor& g2, double alpha, Rng& rng,
                    std::optional<double> forced_lambda = {});

/// Deterministic CMMC core: overwrite dst_box of g1 with g2[partner]'s patch
/// anchored at src_lo. Box extents must fit both tensors.
MixOutcome cmmc_apply(const Tensor& g1, const Tensor& g2,
                      const std::vector<size_t>& partner, const MaskBox& dst_box,
                      const std::array<long long, 4>& src_lo);

/// Zeroes the box region of a (B,c,t,h,w) tensor for every sample: the
/// backward complement of cmmc_apply, since replaced cells carry no gradient
/// back into g1.
void zero_box(Tensor& grad, const MaskBox& box);

/// Uniform (k, l) over eligible blocks {1..n1} x {1..n2} subject to k <= l;
/// resamples k a bounded number of times when no feasible l exists.
std::pair<size_t, size_t> sample_layer_pair(size_t n1, size_t n2, Rng& rng);

} // namespace stcmix
