// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <vector>

#include "stcmix/tensor.hpp"

namespace stcmix {

/// Fixed-capacity FIFO of L2-normalized key embeddings; enqueueing past
/// capacity evicts the oldest entries.
class MoCoQueue {
public:
  explicit MoCoQueue(size_t capacity) : capacity_(capacity) {}

  void enqueue(const Tensor& keys); // (B, D) or (D,), unit-norm rows
  Tensor as_matrix() const;         // (size, D), oldest first
  size_t size() const { return rows_.size(); }
  size_t capacity() const { return capacity_; }
  size_t dim() const { return dim_; }
  void clear();

private:
  size_t capacity_;
  size_t dim_ = 0;
  std::vector<std::vector<double>> rows_; // oldest first
};

struct ContrastiveResult {
  double loss = 0.0;
  Tensor logits;              // (B, 1+Q) for info_nce, (B, B+Q) for imix
  double pretext_accuracy = 0.0;
  Tensor grad_query;          // d loss / d query embeddings; key branch detached
};

/// MoCo-style InfoNCE: per row the positive is the own key at column 0 and
/// the negatives are the queue entries. Gradient is returned w.r.t. z only.
ContrastiveResult info_nce(const Tensor& z, const Tensor& z_key, const MoCoQueue& queue,
                           double tau);

/// i-mix (N+1)-way discrimination: key columns are the whole batch followed
/// by the queue; loss_i = lambda_i * CE(target = i) +
/// (1 - lambda_i) * CE(target = partner[i]). Partner targets always index
/// batch-key columns. Scalar-lambda convenience overload broadcasts.
ContrastiveResult imix_loss(const Tensor& z_mix, const Tensor& z_key,
                            const MoCoQueue& queue, double tau,
                            const std::vector<size_t>& partner,
                            const std::vector<double>& lambdas);
ContrastiveResult imix_loss(const Tensor& z_mix, const Tensor& z_key,
                            const MoCoQueue& queue, double tau,
                            const std::vector<size_t>& partner, double lambda);

} // namespace stcmix
