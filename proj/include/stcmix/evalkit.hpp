// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <map>
#include <vector>

#include "stcmix/encoder.hpp"
#include "stcmix/tensor.hpp"

namespace stcmix {

struct FeatureTable {
  Tensor features;              // (num_clips, D)
  std::vector<size_t> labels;
  std::vector<size_t> clip_ids;
};

/// Backbone features (projection head stripped): partial forward through all
/// layers below the encoder's head boundary, no augmentation.
FeatureTable extract_features(EncoderStack& encoder, const std::vector<Tensor>& clips,
                              const std::vector<size_t>& labels,
                              const std::vector<size_t>& clip_ids);

/// Trains a single linear layer on frozen features with SGD momentum and
/// returns top-1 test accuracy. Throws std::domain_error when the training
/// labels contain a single class.
double linear_probe(const FeatureTable& train, const FeatureTable& test, size_t epochs,
                    double lr, uint64_t seed);

/// Full fine-tune in place: backbone plus a fresh linear head, head at `lr`
/// and backbone at lr/10. The passed encoder's backbone weights are updated;
/// clone first to keep the original. epochs == 0 evaluates the untrained head.
double finetune(EncoderStack& encoder, const std::vector<Tensor>& train_clips,
                const std::vector<size_t>& train_labels,
                const std::vector<Tensor>& test_clips,
                const std::vector<size_t>& test_labels, size_t epochs, double lr,
                uint64_t seed);

struct RetrievalReport {
  std::map<size_t, double> r_at; // k -> recall
};

/// Cosine nearest-neighbor retrieval: rows are L2-normalized, exact top-k,
/// similarity ties broken toward the lower clip id. R@k is the fraction of
/// queries with at least one same-class gallery item among the top k.
RetrievalReport knn_retrieval(const FeatureTable& gallery, const FeatureTable& queries,
                              const std::vector<size_t>& ks);

} // namespace stcmix
