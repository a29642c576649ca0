// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <vector>

namespace stcmix {

// Counter-style splitmix64 generator. The std engines are portable but the
// std distributions are not; every sampler here is spelled out, so a seed
// pins the exact output sequence for a given build.
class Rng {
public:
  explicit Rng(uint64_t seed) : state_(seed) {}

  uint64_t next_u64();
  double uniform();                  // [0, 1)
  double uniform(double lo, double hi);
  size_t uniform_index(size_t n);    // {0, ..., n-1}, n >= 1
  double normal();
  double gamma(double shape);        // Gamma(shape, 1), shape > 0
  std::vector<size_t> permutation(size_t n);

private:
  uint64_t state_;
  bool has_spare_ = false;
  double spare_ = 0.0;
};

/// Beta(alpha, alpha) draw via the ratio of two gamma variates
/// (Marsaglia-Tsang under the hood). Throws on alpha <= 0.
double beta_sample(double alpha, Rng& rng);

// Deterministic seed fan-out for independent substreams.
uint64_t mix_seed(uint64_t a, uint64_t b);
uint64_t mix_seed(uint64_t a, uint64_t b, uint64_t c);

} // namespace stcmix
