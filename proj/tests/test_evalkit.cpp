// SPDX-License-Identifier: Apache-2.0

#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <vector>

#include "stcmix/evalkit.hpp"
#include "stcmix/synthdata.hpp"

using namespace stcmix;

TEST_SUITE_BEGIN("evalkit");

namespace {

EncoderStack tiny_encoder(uint64_t seed = 3) {
  EncoderArch arch;
  arch.in_channels = 3;
  arch.frames = 4;
  arch.height = 8;
  arch.width = 8;
  arch.base_channels = 4;
  arch.embed_dim = 16;
  return EncoderStack::make_default(arch, seed, "m1");
}

Corpus tiny_corpus() {
  CorpusSpec spec;
  spec.clips_per_class = 4;
  spec.frames = 4;
  spec.height = 8;
  spec.width = 8;
  spec.seed = 55;
  return generate_corpus(spec);
}

std::vector<Tensor> videos_of(const std::vector<SynthClip>& clips) {
  std::vector<Tensor> out;
  for (const auto& c : clips) out.push_back(c.video);
  return out;
}

std::vector<size_t> labels_of(const std::vector<SynthClip>& clips) {
  std::vector<size_t> out;
  for (const auto& c : clips) out.push_back(c.class_id);
  return out;
}

std::vector<size_t> ids_of(const std::vector<SynthClip>& clips) {
  std::vector<size_t> out;
  for (const auto& c : clips) out.push_back(c.clip_id);
  return out;
}

FeatureTable table_from(const Tensor& features, std::vector<size_t> labels) {
  FeatureTable t;
  t.features = features;
  t.labels = labels;
  for (size_t i = 0; i < labels.size(); ++i) t.clip_ids.push_back(i);
  return t;
}

Tensor angles_to_features(const std::vector<double>& degrees) {
  Tensor f({degrees.size(), 2});
  for (size_t i = 0; i < degrees.size(); ++i) {
    const double rad = degrees[i] * 3.14159265358979323846 / 180.0;
    f[i * 2 + 0] = std::cos(rad);
    f[i * 2 + 1] = std::sin(rad);
  }
  return f;
}

} // namespace

TEST_CASE("feature extraction") {
  EncoderStack enc = tiny_encoder();
  const Corpus corpus = tiny_corpus();
  std::vector<Tensor> clips = videos_of(corpus.train);
  clips[1] = clips[0]; // plant an exact duplicate
  const FeatureTable table =
      extract_features(enc, clips, labels_of(corpus.train), ids_of(corpus.train));

  CHECK(table.features.dim(0) == clips.size());
  CHECK(table.features.dim(1) == enc.arch().backbone_width());

  // identical clips produce identical rows
  const size_t d = table.features.dim(1);
  for (size_t j = 0; j < d; ++j)
    CHECK(table.features[0 * d + j] == table.features[1 * d + j]);

  // extraction is exactly the backbone partial forward on the centered batch
  Tensor one({1, 3, 4, 8, 8});
  std::copy(clips[2].data(), clips[2].data() + clips[2].size(), one.data());
  const Tensor direct =
      enc.partial_forward(center_input(one), 0, enc.head_start(), false);
  for (size_t j = 0; j < d; ++j) CHECK(table.features[2 * d + j] == direct[j]);
}

TEST_CASE("linear probe") {
  SUBCASE("one-hot class indicators are perfectly separable") {
    const size_t n = 64, classes = 8;
    Tensor feats({n, classes});
    std::vector<size_t> labels(n);
    for (size_t i = 0; i < n; ++i) {
      labels[i] = i % classes;
      feats[i * classes + labels[i]] = 1.0;
    }
    const FeatureTable train = table_from(feats, labels);
    CHECK(linear_probe(train, train, 50, 0.5, 1) == 1.0);
  }
  SUBCASE("shuffled labels sit at chance level") {
    Rng rng(2);
    const size_t n = 160, classes = 8, d = 16;
    Tensor feats = Tensor::randn({n, d}, rng);
    std::vector<size_t> labels(n);
    for (size_t i = 0; i < n; ++i) labels[i] = i % classes;
    // random-label control: training labels shuffled independently of features
    std::vector<size_t> shuffled = labels;
    const auto perm = rng.permutation(n);
    for (size_t i = 0; i < n; ++i) shuffled[i] = labels[perm[i]];
    Tensor test_feats = Tensor::randn({80, d}, rng);
    std::vector<size_t> test_labels(80);
    for (size_t i = 0; i < 80; ++i) test_labels[i] = i % classes;
    const double control = linear_probe(table_from(feats, shuffled),
                                        table_from(test_feats, test_labels), 60, 0.1, 3);
    CHECK(control == doctest::Approx(1.0 / 8.0).epsilon(0.8)); // 0.125 +- 0.1
  }
  SUBCASE("single-class training set is degenerate") {
    Tensor feats({4, 2});
    const FeatureTable t = table_from(feats, {3, 3, 3, 3});
    CHECK_THROWS_AS(linear_probe(t, t, 1, 0.1, 1), std::domain_error);
  }
  SUBCASE("probe is deterministic given the seed") {
    const Corpus corpus = tiny_corpus();
    EncoderStack enc = tiny_encoder();
    const FeatureTable train = extract_features(enc, videos_of(corpus.train),
                                                labels_of(corpus.train),
                                                ids_of(corpus.train));
    const FeatureTable test = extract_features(enc, videos_of(corpus.test),
                                               labels_of(corpus.test),
                                               ids_of(corpus.test));
    CHECK(linear_probe(train, test, 20, 0.1, 9) ==
          linear_probe(train, test, 20, 0.1, 9));
  }
}

TEST_CASE("finetune") {
  const Corpus corpus = tiny_corpus();
  const auto train_clips = videos_of(corpus.train);
  const auto train_labels = labels_of(corpus.train);
  const auto test_clips = videos_of(corpus.test);
  const auto test_labels = labels_of(corpus.test);

  SUBCASE("zero epochs equals an untrained-head linear probe") {
    EncoderStack enc = tiny_encoder(11);
    const FeatureTable tr = extract_features(enc, train_clips, train_labels,
                                             ids_of(corpus.train));
    const FeatureTable te = extract_features(enc, test_clips, test_labels,
                                             ids_of(corpus.test));
    const double probe_acc = linear_probe(tr, te, 0, 0.01, 77);
    EncoderStack ft_enc = enc.clone();
    const double ft_acc = finetune(ft_enc, train_clips, train_labels, test_clips,
                                   test_labels, 0, 0.01, 77);
    CHECK(probe_acc == ft_acc);
    CHECK(ft_enc.param_digest() == enc.param_digest()); // no steps, no movement
  }
  SUBCASE("one epoch moves the backbone weights") {
    EncoderStack enc = tiny_encoder(12);
    const uint64_t before = enc.param_digest();
    finetune(enc, train_clips, train_labels, test_clips, test_labels, 1, 0.01, 77);
    CHECK(enc.param_digest() != before);
  }
  SUBCASE("finetune matches or beats the probe, median of three seeds") {
    std::vector<double> diffs;
    for (uint64_t seed : {21ull, 22ull, 23ull}) {
      EncoderStack enc = tiny_encoder(seed);
      const FeatureTable tr = extract_features(enc, train_clips, train_labels,
                                               ids_of(corpus.train));
      const FeatureTable te = extract_features(enc, test_clips, test_labels,
                                               ids_of(corpus.test));
      const double probe_acc = linear_probe(tr, te, 40, 0.1, seed);
      const double ft_acc = finetune(enc, train_clips, train_labels, test_clips,
                                     test_labels, 40, 0.1, seed);
      diffs.push_back(ft_acc - probe_acc);
    }
    std::sort(diffs.begin(), diffs.end());
    CHECK(diffs[1] >= 0.0);
  }
}

TEST_CASE("knn retrieval") {
  SUBCASE("exact duplicates give perfect R@1") {
    Rng rng(41);
    const Tensor feats = Tensor::randn({10, 6}, rng);
    std::vector<size_t> labels;
    for (size_t i = 0; i < 10; ++i) labels.push_back(i % 5);
    const FeatureTable gallery = table_from(feats, labels);
    const RetrievalReport rep = knn_retrieval(gallery, gallery, {1});
    CHECK(rep.r_at.at(1) == 1.0);
  }
  SUBCASE("k equal to the gallery size with every class present") {
    Rng rng(42);
    const FeatureTable gallery =
        table_from(Tensor::randn({8, 4}, rng), {0, 1, 2, 3, 0, 1, 2, 3});
    const FeatureTable queries =
        table_from(Tensor::randn({5, 4}, rng), {0, 1, 2, 3, 0});
    CHECK(knn_retrieval(gallery, queries, {8}).r_at.at(8) == 1.0);
  }
  SUBCASE("six-point hand enumeration") {
    // gallery angles/labels: 0:A 10:B 20:A 90:B 100:A 180:B
    const FeatureTable gallery =
        table_from(angles_to_features({0, 10, 20, 90, 100, 180}), {0, 1, 0, 1, 0, 1});
    // queries: 4 deg (A) -> nn g0 hit; 94 deg (B) -> nn g3 hit;
    //          130 deg (B) -> nn g4 (A) miss at 1, g3 (B) inside top 5
    const FeatureTable queries = table_from(angles_to_features({4, 94, 130}), {0, 1, 1});
    const RetrievalReport rep = knn_retrieval(gallery, queries, {1, 5});
    CHECK(rep.r_at.at(1) == doctest::Approx(2.0 / 3.0));
    CHECK(rep.r_at.at(5) == 1.0);
  }
  SUBCASE("ties break toward the lower clip id") {
    FeatureTable gallery;
    gallery.features = Tensor({2, 2}, {1.0, 0.0, 1.0, 0.0}); // identical gallery rows
    gallery.labels = {1, 0};
    gallery.clip_ids = {10, 3}; // the later row has the smaller id
    FeatureTable query;
    query.features = Tensor({1, 2}, {1.0, 0.0});
    query.labels = {0};
    query.clip_ids = {0};
    CHECK(knn_retrieval(gallery, query, {1}).r_at.at(1) == 1.0); // id 3 wins the tie
  }
  SUBCASE("monotone in k and invariant to positive rescaling") {
    Rng rng(43);
    const Tensor feats = Tensor::randn({24, 8}, rng);
    std::vector<size_t> labels;
    for (size_t i = 0; i < 24; ++i) labels.push_back(i % 4);
    const FeatureTable gallery = table_from(feats, labels);
    const FeatureTable queries = table_from(Tensor::randn({9, 8}, rng), {0, 1, 2, 3, 0, 1, 2, 3, 0});
    const RetrievalReport rep = knn_retrieval(gallery, queries, {1, 5, 10, 20});
    CHECK(rep.r_at.at(1) <= rep.r_at.at(5));
    CHECK(rep.r_at.at(5) <= rep.r_at.at(10));
    CHECK(rep.r_at.at(10) <= rep.r_at.at(20));
    CHECK(rep.r_at.at(20) <= 1.0);

    for (const double scale : {4.0, 0.5}) {
      FeatureTable g2 = gallery;
      g2.features.scale_(scale);
      FeatureTable q2 = queries;
      q2.features.scale_(scale);
      const RetrievalReport rep2 = knn_retrieval(g2, q2, {1, 5, 10, 20});
      for (const auto& [k, r] : rep.r_at) CHECK(rep2.r_at.at(k) == r);
    }
  }
  SUBCASE("oversized k is a parameter error") {
    Rng rng(44);
    const FeatureTable gallery = table_from(Tensor::randn({4, 3}, rng), {0, 1, 0, 1});
    CHECK_THROWS_AS(knn_retrieval(gallery, gallery, {5}), std::invalid_argument);
  }
}

TEST_SUITE_END();
