// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "stcmix/rng.hpp"
#include "stcmix/tensor.hpp"

namespace stcmix {

/// A labeled moving-shape clip. class_id = shape_kind * 4 + direction, so the
/// label is determined jointly by appearance and motion; the derived second
/// modality carries the motion half of that signal.
struct SynthClip {
  Tensor video;        // (3, T, H, W), values in [0, 1]
  size_t class_id = 0;
  size_t clip_id = 0;
  int dx = 0, dy = 0;  // motion in pixels per frame
  size_t shape_kind = 0;
  double speed = 1.0;
};

struct CorpusSpec {
  size_t num_classes = 8;      // 2 shapes x 4 directions
  size_t clips_per_class = 40;
  size_t frames = 8, height = 16, width = 16;
  double noise = 0.02;
  uint64_t seed = 7;
  double train_fraction = 0.75;
};

struct Corpus {
  CorpusSpec spec;
  std::vector<SynthClip> train, test;

  uint64_t split_hash() const; // digest of (clip_id -> split) membership
};

/// Deterministic per seed; every class keeps equal clip counts in each split.
Corpus generate_corpus(const CorpusSpec& spec);

/// Frame-difference modality (2, T, H, W): channels 0/1 hold the signed x/y
/// spatial gradients of the frame-to-frame gray difference, rescaled so that
/// 0.5 means no motion. Neighbors wrap toroidally, matching the corpus
/// motion model. The last frame repeats the penultimate difference.
Tensor derive_second_modality(const Tensor& video);

struct AugmentParams {
  size_t max_shift = 2;    // clip-consistent toroidal translation, per axis
  double flip_prob = 0.5;  // horizontal flip
  double jitter = 0.2;     // multiplicative brightness jitter half-range
};

/// Clip-consistent view augmentation for a (C, T, H, W) clip. With
/// flow_like=true the horizontal flip also inverts channel 0 around 0.5 so a
/// flipped motion field stays a valid motion field, and jitter scales around
/// 0.5 instead of 0.
Tensor augment_view(const Tensor& clip, const AugmentParams& params, Rng& rng,
                    bool flow_like = false);

// Export/import: index.json plus one tensor blob per clip.
void export_corpus(const Corpus& corpus, const std::string& dir);
Corpus import_corpus(const std::string& dir);

} // namespace stcmix
