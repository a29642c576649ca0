// SPDX-License-Identifier: Apache-2.0

#include "stcmix/contrastive.hpp"

#include <cmath>
#include <stdexcept>
#include <string>

namespace stcmix {

namespace {

// Loss preconditions only need rows to be normalized to working precision;
// gradient checks nudge inputs off the unit sphere by ~1e-5, which must pass.
constexpr double kNormSlack = 1e-3;

void require_unit_rows(const Tensor& rows, const char* what) {
  const size_t b = rows.dim(0), d = rows.dim(1);
  for (size_t i = 0; i < b; ++i) {
    double ss = 0.0;
    const double* r = rows.data() + i * d;
    for (size_t j = 0; j < d; ++j) ss += r[j] * r[j];
    if (std::abs(std::sqrt(ss) - 1.0) > kNormSlack)
      throw std::domain_error(std::string(what) + ": row " + std::to_string(i) +
                              " is not L2-normalized");
  }
}

void require_pair(const Tensor& z, const Tensor& z_key, double tau, const char* op) {
  if (z.rank() != 2 || z_key.rank() != 2)
    throw std::invalid_argument(std::string(op) + ": embeddings must be (B, D)");
  if (!z.same_shape(z_key))
    throw std::invalid_argument(std::string(op) + ": query/key shape mismatch " +
                                z.shape_str() + " vs " + z_key.shape_str());
  if (!(tau > 0.0))
    throw std::invalid_argument(std::string(op) + ": temperature must be > 0");
  require_unit_rows(z, op);
  require_unit_rows(z_key, op);
}

} // namespace

void MoCoQueue::enqueue(const Tensor& keys) {
  if (keys.rank() != 1 && keys.rank() != 2)
    throw std::invalid_argument("MoCoQueue::enqueue: expected (D,) or (B, D)");
  const size_t b = keys.rank() == 2 ? keys.dim(0) : 1;
  const size_t d = keys.rank() == 2 ? keys.dim(1) : keys.dim(0);
  if (dim_ == 0) dim_ = d;
  if (d != dim_)
    throw std::invalid_argument("MoCoQueue::enqueue: dimension " + std::to_string(d) +
                                " does not match stored entries of dimension " +
                                std::to_string(dim_));
  for (size_t i = 0; i < b; ++i) {
    const double* row = keys.data() + i * d;
    double ss = 0.0;
    for (size_t j = 0; j < d; ++j) ss += row[j] * row[j];
    if (std::abs(std::sqrt(ss) - 1.0) > kNormSlack)
      throw std::domain_error("MoCoQueue::enqueue: row " + std::to_string(i) +
                              " is not L2-normalized");
    rows_.emplace_back(row, row + d);
    if (rows_.size() > capacity_) rows_.erase(rows_.begin());
  }
}

Tensor MoCoQueue::as_matrix() const {
  if (rows_.empty()) throw std::logic_error("MoCoQueue::as_matrix: queue is empty");
  Tensor out({rows_.size(), dim_});
  for (size_t i = 0; i < rows_.size(); ++i)
    for (size_t j = 0; j < dim_; ++j) out[i * dim_ + j] = rows_[i][j];
  return out;
}

void MoCoQueue::clear() {
  rows_.clear();
  dim_ = 0;
}

namespace {

// Shared core: logits_i = [z_i . key_col_j] / tau over the given key columns,
// loss_i = sum_w weights[w][i] * CE(logits_i, targets[w][i]), averaged over
// rows. Returns loss/logits/accuracy and d loss / d z.
ContrastiveResult discriminate(const Tensor& z, const Tensor& key_cols, double tau,
                               const std::vector<const std::vector<size_t>*>& targets,
                               const std::vector<const std::vector<double>*>& weights,
                               const std::vector<size_t>& positive_index) {
  const size_t b = z.dim(0), d = z.dim(1), k = key_cols.dim(0);
  ContrastiveResult res;
  res.logits = Tensor({b, k});
  Tensor dlogits({b, k});
  size_t correct = 0;

  for (size_t i = 0; i < b; ++i) {
    const double* zi = z.data() + i * d;
    double* row = res.logits.data() + i * k;
    for (size_t j = 0; j < k; ++j) {
      const double* cj = key_cols.data() + j * d;
      double dot = 0.0;
      for (size_t t = 0; t < d; ++t) dot += zi[t] * cj[t];
      row[j] = dot / tau;
    }
    double mx = row[0];
    size_t argmax = 0;
    for (size_t j = 1; j < k; ++j)
      if (row[j] > mx) {
        mx = row[j];
        argmax = j;
      }
    double zsum = 0.0;
    for (size_t j = 0; j < k; ++j) zsum += std::exp(row[j] - mx);
    const double logz = std::log(zsum);

    double* dl = dlogits.data() + i * k;
    double wsum = 0.0;
    for (size_t w = 0; w < targets.size(); ++w) {
      const double wt = (*weights[w])[i];
      const size_t tgt = (*targets[w])[i];
      if (tgt >= k)
        throw std::out_of_range("contrastive loss: target column out of range");
      res.loss += wt * (logz - (row[tgt] - mx));
      dl[tgt] -= wt;
      wsum += wt;
    }
    const double bsz = static_cast<double>(b);
    for (size_t j = 0; j < k; ++j)
      dl[j] = (dl[j] + wsum * (std::exp(row[j] - mx) / zsum)) / bsz;
    if (argmax == positive_index[i]) ++correct;
  }
  res.loss /= static_cast<double>(b);
  res.pretext_accuracy = static_cast<double>(correct) / static_cast<double>(b);

  // Chain rule through the similarity: d logits_ij / d z_i = key_col_j / tau.
  res.grad_query = Tensor({b, d});
  for (size_t i = 0; i < b; ++i) {
    const double* dl = dlogits.data() + i * k;
    double* gz = res.grad_query.data() + i * d;
    for (size_t j = 0; j < k; ++j) {
      const double g = dl[j] / tau;
      if (g == 0.0) continue;
      const double* cj = key_cols.data() + j * d;
      for (size_t t = 0; t < d; ++t) gz[t] += g * cj[t];
    }
  }
  return res;
}

} // namespace

ContrastiveResult info_nce(const Tensor& z, const Tensor& z_key, const MoCoQueue& queue,
                           double tau) {
  require_pair(z, z_key, tau, "info_nce");
  const size_t b = z.dim(0), d = z.dim(1);
  const size_t q = queue.size();
  if (q > 0 && queue.dim() != d)
    throw std::invalid_argument("info_nce: queue dimension mismatch");
  const Tensor queue_mat = q > 0 ? queue.as_matrix() : Tensor();

  const size_t k = 1 + q; // own key at column 0, then the queue
  ContrastiveResult res;
  res.logits = Tensor({b, k});
  res.grad_query = Tensor({b, d});
  size_t correct = 0;

  for (size_t i = 0; i < b; ++i) {
    const double* zi = z.data() + i * d;
    double* row = res.logits.data() + i * k;
    {
      const double* ki = z_key.data() + i * d;
      double dot = 0.0;
      for (size_t t = 0; t < d; ++t) dot += zi[t] * ki[t];
      row[0] = dot / tau;
    }
    for (size_t j = 0; j < q; ++j) {
      const double* cj = queue_mat.data() + j * d;
      double dot = 0.0;
      for (size_t t = 0; t < d; ++t) dot += zi[t] * cj[t];
      row[1 + j] = dot / tau;
    }
    double mx = row[0];
    size_t argmax = 0;
    for (size_t j = 1; j < k; ++j)
      if (row[j] > mx) {
        mx = row[j];
        argmax = j;
      }
    double zsum = 0.0;
    for (size_t j = 0; j < k; ++j) zsum += std::exp(row[j] - mx);
    res.loss += std::log(zsum) - (row[0] - mx);
    if (argmax == 0) ++correct;

    double* gz = res.grad_query.data() + i * d;
    const double scale = 1.0 / (tau * static_cast<double>(b));
    for (size_t j = 0; j < k; ++j) {
      const double p = std::exp(row[j] - mx) / zsum;
      const double g = (p - (j == 0 ? 1.0 : 0.0)) * scale;
      const double* cj = j == 0 ? z_key.data() + i * d : queue_mat.data() + (j - 1) * d;
      for (size_t t = 0; t < d; ++t) gz[t] += g * cj[t];
    }
  }
  res.loss /= static_cast<double>(b);
  res.pretext_accuracy = static_cast<double>(correct) / static_cast<double>(b);
  return res;
}

ContrastiveResult imix_loss(const Tensor& z_mix, const Tensor& z_key,
                            const MoCoQueue& queue, double tau,
                            const std::vector<size_t>& partner,
                            const std::vector<double>& lambdas) {
  require_pair(z_mix, z_key, tau, "imix_loss");
  const size_t b = z_mix.dim(0), d = z_mix.dim(1);
  if (partner.size() != b || lambdas.size() != b)
    throw std::invalid_argument("imix_loss: partner/lambda size must equal batch size");
  {
    std::vector<bool> seen(b, false);
    for (size_t p : partner) {
      if (p >= b || seen[p])
        throw std::invalid_argument("imix_loss: partner is not a permutation");
      seen[p] = true;
    }
  }
  if (queue.size() > 0 && queue.dim() != d)
    throw std::invalid_argument("imix_loss: queue dimension mismatch");

  // Key columns: the batch keys (partner targets index these), then the queue.
  Tensor cols({b + queue.size(), d});
  for (size_t i = 0; i < b * d; ++i) cols[i] = z_key[i];
  if (queue.size() > 0) {
    const Tensor qm = queue.as_matrix();
    for (size_t i = 0; i < qm.size(); ++i) cols[b * d + i] = qm[i];
  }

  std::vector<size_t> own(b);
  for (size_t i = 0; i < b; ++i) own[i] = i;
  std::vector<double> anti(b);
  for (size_t i = 0; i < b; ++i) anti[i] = 1.0 - lambdas[i];
  return discriminate(z_mix, cols, tau, {&own, &partner}, {&lambdas, &anti}, own);
}

ContrastiveResult imix_loss(const Tensor& z_mix, const Tensor& z_key,
                            const MoCoQueue& queue, double tau,
                            const std::vector<size_t>& partner, double lambda) {
  return imix_loss(z_mix, z_key, queue, tau, partner,
                   std::vector<double>(z_mix.dim(0), lambda));
}

} // namespace stcmix
