// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace stcmix {

struct GradCheckEntry {
  std::string component;
  double max_rel_err = 0.0;
};

/// Central-finite-difference verification (h = 1e-5) of every hand-derived
/// backward path: each layer kind, both contrastive losses, and the full
/// encoder-through-mix composite. Relative error uses
/// |a - f| / max(|a|, |f|, 1e-6).
std::vector<GradCheckEntry> gradcheck_all(uint64_t seed);

} // namespace stcmix
