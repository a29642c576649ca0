// SPDX-License-Identifier: Apache-2.0

#include "stcmix/mixing.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <stdexcept>

namespace stcmix {

const char* mix_operator_name(MixOperator op) {
  switch (op) {
    case MixOperator::None: return "none";
    case MixOperator::Mixup: return "mixup";
    case MixOperator::TemporalCutmix: return "t_cutmix";
    case MixOperator::StCutmix: return "st_cutmix";
    case MixOperator::VideoMix: return "videomix";
  }
  return "unknown";
}

MixOperator parse_mix_operator(const std::string& name) {
  if (name == "none") return MixOperator::None;
  if (name == "mixup") return MixOperator::Mixup;
  if (name == "t_cutmix") return MixOperator::TemporalCutmix;
  if (name == "st_cutmix") return MixOperator::StCutmix;
  if (name == "videomix") return MixOperator::VideoMix;
  throw std::invalid_argument("unknown mixing operator: " + name);
}

namespace {

void require_batch(const Tensor& x, const char* op) {
  if (x.rank() != 5)
    throw std::invalid_argument(std::string(op) + ": expected (B,C,T,H,W), got " +
                                x.shape_str());
  if (x.dim(0) < 2)
    throw std::invalid_argument(std::string(op) + ": batch size must be >= 2");
}

std::vector<size_t> identity_partner(size_t n) {
  std::vector<size_t> p(n);
  for (size_t i = 0; i < n; ++i) p[i] = i;
  return p;
}

// Round-half-away-from-zero extent, clamped to [0, limit].
long long scaled_extent(double limit, double fraction) {
  const long long e = std::llround(limit * fraction);
  return std::clamp(e, 0LL, static_cast<long long>(limit));
}

// Half-open [lo, hi) span of extent e centered near u, clipped to [0, n).
std::pair<long long, long long> centered_span(double u, long long e, long long n) {
  long long lo = std::llround(u - static_cast<double>(e) / 2.0);
  long long hi = lo + e;
  lo = std::max(0LL, lo);
  hi = std::min(n, hi);
  if (hi < lo) hi = lo;
  return {lo, hi};
}

// Retained fraction from exact integer volumes; a single division so that
// constant-operand means reproduce it bitwise.
double retained_fraction(long long zero_volume, long long total_volume) {
  return static_cast<double>(total_volume - zero_volume) /
         static_cast<double>(total_volume);
}

} // namespace

MixOutcome no_mix(const Tensor& x) {
  MixOutcome out;
  out.mixed = x;
  out.lambdas.assign(x.dim(0), 1.0);
  out.partner = identity_partner(x.dim(0));
  return out;
}

// ---- mixup ----

MixOutcome mixup_apply(const Tensor& x, const std::vector<size_t>& partner,
                       const std::vector<double>& lambdas) {
  const size_t b = x.dim(0);
  const size_t sample = x.size() / b;
  if (partner.size() != b || lambdas.size() != b)
    throw std::invalid_argument("mixup_apply: per-sample partner and lambda required");
  MixOutcome out;
  out.mixed = Tensor(x.shape());
  out.lambdas = lambdas;
  out.partner = partner;
  for (size_t i = 0; i < b; ++i) {
    const double lam = lambdas[i];
    const double* self = x.data() + i * sample;
    const double* other = x.data() + partner[i] * sample;
    double* dst = out.mixed.data() + i * sample;
    if (lam == 1.0) {
      std::memcpy(dst, self, sample * sizeof(double));
    } else if (lam == 0.0) {
      std::memcpy(dst, other, sample * sizeof(double));
    } else {
      for (size_t j = 0; j < sample; ++j) dst[j] = lam * self[j] + (1.0 - lam) * other[j];
    }
  }
  return out;
}

MixOutcome mixup_batch(const Tensor& x, double alpha, Rng& rng,
                       std::optional<double> forced_lambda) {
  require_batch(x, "mixup_batch");
  const size_t b = x.dim(0);
  std::vector<size_t> partner = rng.permutation(b);
  std::vector<double> lambdas(b);
  for (size_t i = 0; i < b; ++i)
    lambdas[i] = forced_lambda ? *forced_lambda : beta_sample(alpha, rng);
  return mixup_apply(x, partner, lambdas);
}

// ---- temporal cutmix ----

MixOutcome temporal_cutmix_apply(const Tensor& x, const std::vector<size_t>& partner,
                                 size_t start, size_t length) {
  const size_t b = x.dim(0), c = x.dim(1), t = x.dim(2), h = x.dim(3), w = x.dim(4);
  if (start + length > t)
    throw std::invalid_argument("temporal_cutmix_apply: frame interval out of range");
  MixOutcome out;
  out.mixed = x;
  out.partner = partner;
  const long long frame_cells = static_cast<long long>(h * w);
  out.lambdas.assign(
      b, retained_fraction(static_cast<long long>(length) * frame_cells,
                           static_cast<long long>(t) * frame_cells));
  MaskBox box;
  box.lo = {0, static_cast<long long>(start), 0, 0};
  box.hi = {static_cast<long long>(c), static_cast<long long>(start + length),
            static_cast<long long>(h), static_cast<long long>(w)};
  out.mask_box = box;
  if (length == 0) return out;
  const size_t hw = h * w;
  for (size_t i = 0; i < b; ++i) {
    const size_t src = partner[i];
    for (size_t ch = 0; ch < c; ++ch) {
      double* dst_p = out.mixed.data() + ((i * c + ch) * t + start) * hw;
      const double* src_p = x.data() + ((src * c + ch) * t + start) * hw;
      std::memcpy(dst_p, src_p, length * hw * sizeof(double));
    }
  }
  return out;
}

MixOutcome temporal_cutmix(const Tensor& x, double alpha, Rng& rng,
                           std::optional<double> forced_lambda) {
  require_batch(x, "temporal_cutmix");
  const size_t t = x.dim(2);
  std::vector<size_t> partner = rng.permutation(x.dim(0));
  const double lam = forced_lambda ? *forced_lambda : beta_sample(alpha, rng);
  const size_t length =
      static_cast<size_t>(scaled_extent(static_cast<double>(t), 1.0 - lam));
  const size_t start = rng.uniform_index(t - length + 1);
  return temporal_cutmix_apply(x, partner, start, length);
}

// ---- generic box replacement over (c,t,h,w) of a (B,c,t,h,w) tensor ----

namespace {

// Overwrites box of `mixed` (per sample) with the partner's values taken at
// src_lo. Assumes extents fit both tensors.
void replace_box(Tensor& mixed, const Tensor& src_tensor,
                 const std::vector<size_t>& partner, const MaskBox& dst_box,
                 const std::array<long long, 4>& src_lo) {
  const size_t b = mixed.dim(0);
  std::array<size_t, 4> ext{};
  for (int i = 0; i < 4; ++i) ext[i] = static_cast<size_t>(dst_box.hi[i] - dst_box.lo[i]);
  for (size_t i = 0; i < b; ++i) {
    const std::array<size_t, 5> dlo = {i, static_cast<size_t>(dst_box.lo[0]),
                                       static_cast<size_t>(dst_box.lo[1]),
                                       static_cast<size_t>(dst_box.lo[2]),
                                       static_cast<size_t>(dst_box.lo[3])};
    const std::array<size_t, 5> slo = {partner[i], static_cast<size_t>(src_lo[0]),
                                       static_cast<size_t>(src_lo[1]),
                                       static_cast<size_t>(src_lo[2]),
                                       static_cast<size_t>(src_lo[3])};
    const std::array<size_t, 5> extents = {1, ext[0], ext[1], ext[2], ext[3]};
    copy_region(mixed, dlo, src_tensor, slo, extents);
  }
}

} // namespace

MixOutcome st_cutmix_apply(const Tensor& x, const std::vector<size_t>& partner,
                           const MaskBox& box) {
  const size_t b = x.dim(0), c = x.dim(1), t = x.dim(2), h = x.dim(3), w = x.dim(4);
  MixOutcome out;
  out.mixed = x;
  out.partner = partner;
  MaskBox full = box;
  full.lo[0] = 0;
  full.hi[0] = static_cast<long long>(c);
  out.mask_box = full;
  // Channel extent is always full, so lambda tracks the (t,h,w) cuboid.
  const long long cuboid = std::max(0LL, full.hi[1] - full.lo[1]) *
                           std::max(0LL, full.hi[2] - full.lo[2]) *
                           std::max(0LL, full.hi[3] - full.lo[3]);
  out.lambdas.assign(b, retained_fraction(cuboid, static_cast<long long>(t * h * w)));
  if (cuboid > 0)
    replace_box(out.mixed, x, partner, full, {0, full.lo[1], full.lo[2], full.lo[3]});
  return out;
}

MixOutcome st_cutmix(const Tensor& x, double alpha, Rng& rng,
                     std::optional<double> forced_lambda) {
  require_batch(x, "st_cutmix");
  const size_t t = x.dim(2), h = x.dim(3), w = x.dim(4);
  std::vector<size_t> partner = rng.permutation(x.dim(0));
  const double lam = forced_lambda ? *forced_lambda : beta_sample(alpha, rng);
  const double frac = std::cbrt(1.0 - lam);
  const long long et = scaled_extent(static_cast<double>(t), frac);
  const long long eh = scaled_extent(static_cast<double>(h), frac);
  const long long ew = scaled_extent(static_cast<double>(w), frac);
  MaskBox box;
  const auto ts = centered_span(rng.uniform(0.0, static_cast<double>(t)), et,
                                static_cast<long long>(t));
  const auto hs = centered_span(rng.uniform(0.0, static_cast<double>(h)), eh,
                                static_cast<long long>(h));
  const auto ws = centered_span(rng.uniform(0.0, static_cast<double>(w)), ew,
                                static_cast<long long>(w));
  box.lo = {0, ts.first, hs.first, ws.first};
  box.hi = {0, ts.second, hs.second, ws.second};
  return st_cutmix_apply(x, partner, box);
}

MixOutcome videomix_apply(const Tensor& x, const std::vector<size_t>& partner,
                          const MaskBox& box) {
  const size_t b = x.dim(0), c = x.dim(1), t = x.dim(2), h = x.dim(3), w = x.dim(4);
  MixOutcome out;
  out.mixed = x;
  out.partner = partner;
  MaskBox full = box;
  full.lo[0] = 0;
  full.hi[0] = static_cast<long long>(c);
  full.lo[1] = 0;
  full.hi[1] = static_cast<long long>(t);
  out.mask_box = full;
  const long long area = std::max(0LL, full.hi[2] - full.lo[2]) *
                         std::max(0LL, full.hi[3] - full.lo[3]);
  out.lambdas.assign(b, retained_fraction(area, static_cast<long long>(h * w)));
  if (area > 0) replace_box(out.mixed, x, partner, full, {0, 0, full.lo[2], full.lo[3]});
  return out;
}

MixOutcome videomix(const Tensor& x, double alpha, Rng& rng,
                    std::optional<double> forced_lambda) {
  require_batch(x, "videomix");
  const size_t h = x.dim(3), w = x.dim(4);
  std::vector<size_t> partner = rng.permutation(x.dim(0));
  const double lam = forced_lambda ? *forced_lambda : beta_sample(alpha, rng);
  const double frac = std::sqrt(1.0 - lam);
  const long long eh = scaled_extent(static_cast<double>(h), frac);
  const long long ew = scaled_extent(static_cast<double>(w), frac);
  MaskBox box;
  const auto hs = centered_span(rng.uniform(0.0, static_cast<double>(h)), eh,
                                static_cast<long long>(h));
  const auto ws = centered_span(rng.uniform(0.0, static_cast<double>(w)), ew,
                                static_cast<long long>(w));
  box.lo = {0, 0, hs.first, ws.first};
  box.hi = {0, 0, hs.second, ws.second};
  return videomix_apply(x, partner, box);
}

// ---- cross-modal manifold cutmix ----

MixOutcome cmmc_apply(const Tensor& g1, const Tensor& g2,
                      const std::vector<size_t>& partner, const MaskBox& dst_box,
                      const std::array<long long, 4>& src_lo) {
  if (g1.rank() != 5 || g2.rank() != 5)
    throw std::invalid_argument("cmmc_apply: expected rank-5 feature tensors");
  if (g1.dim(0) != g2.dim(0))
    throw std::invalid_argument("cmmc_apply: batch size mismatch");
  const size_t b = g1.dim(0);
  MixOutcome out;
  out.mixed = g1;
  out.partner = partner;
  const long long total = static_cast<long long>(g1.size() / b);
  const long long vol = dst_box.volume();
  out.lambdas.assign(b, retained_fraction(vol, total));
  if (vol == 0) return out; // degenerate clipping: identity, lambda = 1
  for (int i = 0; i < 4; ++i) {
    const long long ext = dst_box.hi[i] - dst_box.lo[i];
    if (dst_box.lo[i] < 0 || dst_box.hi[i] > static_cast<long long>(g1.dim(i + 1)))
      throw std::out_of_range("cmmc_apply: destination box exceeds g1 bounds");
    if (src_lo[i] < 0 || src_lo[i] + ext > static_cast<long long>(g2.dim(i + 1)))
      throw std::out_of_range("cmmc_apply: source patch exceeds g2 bounds");
  }
  out.mask_box = dst_box;
  replace_box(out.mixed, g2, partner, dst_box, src_lo);
  return out;
}

MixOutcome cmmc_mix(const Tensor& g1, const Tensor& g2, double alpha, Rng& rng,
                    std::optional<double> forced_lambda) {
  if (g1.rank() != 5 || g2.rank() != 5)
    throw std::invalid_argument("cmmc_mix: expected rank-5 feature tensors");
  if (g1.dim(0) != g2.dim(0))
    throw std::invalid_argument("cmmc_mix: batch size mismatch");
  if (g1.dim(0) < 2) throw std::invalid_argument("cmmc_mix: batch size must be >= 2");

  const long long c1 = g1.dim(1), t1 = g1.dim(2), h1 = g1.dim(3), w1 = g1.dim(4);
  const long long c2 = g2.dim(1), t2 = g2.dim(2), h2 = g2.dim(3), w2 = g2.dim(4);

  std::vector<size_t> partner = rng.permutation(g1.dim(0));

  // Source patch in g2: spatial crop with sides scaled by sqrt(1 - u); time
  // and channel extents stay full to preserve what the donor encoder built.
  const double u = forced_lambda ? *forced_lambda : beta_sample(alpha, rng);
  const double side = std::sqrt(1.0 - u);
  const long long src_h_ext = scaled_extent(static_cast<double>(h2), side);
  const long long src_w_ext = scaled_extent(static_cast<double>(w2), side);
  const double src_hc = rng.uniform(0.0, static_cast<double>(h2));
  const double src_wc = rng.uniform(0.0, static_cast<double>(w2));
  const auto src_h = centered_span(src_hc, src_h_ext, h2);
  const auto src_w = centered_span(src_wc, src_w_ext, w2);

  // Destination box in g1: source extents capped by g1, random center per
  // dimension, clipped at g1's bounds.
  const std::array<long long, 4> want = {std::min(c2, c1), std::min(t2, t1),
                                         std::min(src_h.second - src_h.first, h1),
                                         std::min(src_w.second - src_w.first, w1)};
  const std::array<long long, 4> dims1 = {c1, t1, h1, w1};
  MaskBox dst;
  for (int i = 0; i < 4; ++i) {
    const auto span =
        centered_span(rng.uniform(0.0, static_cast<double>(dims1[i])), want[i], dims1[i]);
    dst.lo[i] = span.first;
    dst.hi[i] = span.second;
  }

  // Re-crop the source to the clipped destination extents, centered within
  // what survived the source clipping.
  const std::array<long long, 4> dims2 = {c2, t2, h2, w2};
  const std::array<long long, 4> avail_lo = {0, 0, src_h.first, src_w.first};
  const std::array<long long, 4> avail_hi = {c2, t2, src_h.second, src_w.second};
  std::array<long long, 4> src_anchor{};
  for (int i = 0; i < 4; ++i) {
    const long long ext = dst.hi[i] - dst.lo[i];
    const long long center2 = (avail_lo[i] + avail_hi[i]) / 2;
    long long lo = center2 - ext / 2;
    lo = std::clamp(lo, avail_lo[i], std::max(avail_lo[i], avail_hi[i] - ext));
    lo = std::clamp(lo, 0LL, std::max(0LL, dims2[i] - ext));
    src_anchor[i] = lo;
  }
  return cmmc_apply(g1, g2, partner, dst, src_anchor);
}

void zero_box(Tensor& grad, const MaskBox& box) {
  if (grad.rank() != 5) throw std::invalid_argument("zero_box: expected (B,c,t,h,w)");
  const size_t b = grad.dim(0);
  const size_t c_dim = grad.dim(1), t_dim = grad.dim(2), h_dim = grad.dim(3),
               w_dim = grad.dim(4);
  for (int i = 0; i < 4; ++i) {
    const size_t extent = grad.dim(i + 1);
    if (box.lo[i] < 0 || box.hi[i] > static_cast<long long>(extent))
      throw std::out_of_range("zero_box: box exceeds tensor bounds");
  }
  for (size_t i = 0; i < b; ++i)
    for (long long c = box.lo[0]; c < box.hi[0]; ++c)
      for (long long t = box.lo[1]; t < box.hi[1]; ++t)
        for (long long y = box.lo[2]; y < box.hi[2]; ++y) {
          double* row =
              grad.data() + (((i * c_dim + c) * t_dim + t) * h_dim + y) * w_dim + box.lo[3];
          for (long long x = box.lo[3]; x < box.hi[3]; ++x) *row++ = 0.0;
        }
}

std::pair<size_t, size_t> sample_layer_pair(size_t n1, size_t n2, Rng& rng) {
  if (n1 == 0 || n2 == 0)
    throw std::invalid_argument("sample_layer_pair: empty eligible layer set");
  for (int attempt = 0; attempt < 64; ++attempt) {
    const size_t k = 1 + rng.uniform_index(n1);
    if (k > n2) continue; // no feasible l >= k in the other stack
    const size_t l = k + rng.uniform_index(n2 - k + 1);
    return {k, l};
  }
  throw std::runtime_error("sample_layer_pair: no feasible (k, l) pair; layer sets "
                           "are incompatible");
}

} // namespace stcmix
