// SPDX-License-Identifier: Apache-2.0

#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <map>
#include <stdexcept>

#include "stcmix/evalkit.hpp"
#include "stcmix/synthdata.hpp"

using namespace stcmix;

TEST_SUITE_BEGIN("synthdata");

namespace {

CorpusSpec small_spec() {
  CorpusSpec spec;
  spec.clips_per_class = 8;
  spec.seed = 21;
  return spec;
}

} // namespace

TEST_CASE("corpus generation is deterministic and balanced") {
  const CorpusSpec spec = small_spec();
  const Corpus a = generate_corpus(spec);
  const Corpus b = generate_corpus(spec);

  CHECK(a.train.size() == 48); // 8 classes x 6
  CHECK(a.test.size() == 16);  // 8 classes x 2
  CHECK(a.split_hash() == b.split_hash());
  REQUIRE(a.train.size() == b.train.size());
  for (size_t i = 0; i < a.train.size(); ++i) {
    CHECK(a.train[i].clip_id == b.train[i].clip_id);
    CHECK(a.train[i].video.bitwise_equal(b.train[i].video));
  }

  std::map<size_t, size_t> train_counts, test_counts;
  for (const auto& c : a.train) ++train_counts[c.class_id];
  for (const auto& c : a.test) ++test_counts[c.class_id];
  for (size_t cls = 0; cls < 8; ++cls) {
    CHECK(train_counts[cls] == 6);
    CHECK(test_counts[cls] == 2);
  }

  // disjoint and exhaustive splits
  std::map<size_t, int> seen;
  for (const auto& c : a.train) ++seen[c.clip_id];
  for (const auto& c : a.test) ++seen[c.clip_id];
  CHECK(seen.size() == 64);
  for (const auto& [id, n] : seen) CHECK(n == 1);

  // pixel range and label structure
  for (const auto& c : a.train) {
    CHECK(c.class_id == c.shape_kind * 4 + [&] {
      const int dirs[4][2] = {{1, 0}, {-1, 0}, {0, 1}, {0, -1}};
      for (size_t d = 0; d < 4; ++d)
        if (dirs[d][0] == c.dx && dirs[d][1] == c.dy) return d;
      return size_t{99};
    }());
    for (size_t i = 0; i < c.video.size(); ++i) {
      CHECK(c.video[i] >= 0.0);
      CHECK(c.video[i] <= 1.0);
    }
  }

  CHECK(generate_corpus(spec).split_hash() != [] {
    CorpusSpec other = small_spec();
    other.seed = 22;
    return generate_corpus(other).split_hash();
  }());
}

TEST_CASE("degenerate corpus parameters are rejected") {
  CorpusSpec spec = small_spec();
  spec.height = 7;
  CHECK_THROWS_AS(generate_corpus(spec), std::invalid_argument);
  spec = small_spec();
  spec.clips_per_class = 1;
  CHECK_THROWS_AS(generate_corpus(spec), std::invalid_argument);
}

TEST_CASE("derived modality") {
  SUBCASE("static clip maps to the 0.5 rest point") {
    Tensor still({3, 4, 8, 8});
    for (size_t i = 0; i < still.size(); ++i) still[i] = 0.3;
    const Tensor flow = derive_second_modality(still);
    CHECK(flow.shape() == Shape{2, 4, 8, 8});
    for (size_t i = 0; i < flow.size(); ++i) CHECK(flow[i] == 0.5);
  }
  SUBCASE("x-motion concentrates in channel 0 at the moving edges") {
    // hand-built clip: 5x5 square, intensity 1, marching +x one pixel per frame
    const size_t t_len = 4, h = 16, w = 16;
    Tensor clip({3, t_len, h, w});
    const long long cy = 8;
    for (size_t t = 0; t < t_len; ++t) {
      const long long cx = 5 + static_cast<long long>(t);
      for (long long v = -2; v <= 2; ++v)
        for (long long u = -2; u <= 2; ++u)
          for (size_t ch = 0; ch < 3; ++ch)
            clip.at({ch, t, static_cast<size_t>(cy + v), static_cast<size_t>(cx + u)}) =
                1.0;
    }
    const Tensor flow = derive_second_modality(clip);
    double dev0 = 0.0, dev1 = 0.0;
    size_t count0 = 0, count1 = 0;
    for (size_t t = 0; t < t_len; ++t)
      for (size_t y = 0; y < h; ++y)
        for (size_t x = 0; x < w; ++x) {
          const double d0 = std::abs(flow.at({0, t, y, x}) - 0.5);
          const double d1 = std::abs(flow.at({1, t, y, x}) - 0.5);
          dev0 += d0;
          dev1 += d1;
          if (d0 > 1e-12) {
            ++count0;
            // activation sits inside the square's row band
            CHECK(std::abs(static_cast<long long>(y) - cy) <= 3);
          }
          if (d1 > 1e-12) ++count1;
        }
    CHECK(dev0 > 2.0 * dev1);  // x-gradient dominates
    CHECK(count1 < count0);    // channel 1 stays near 0.5 almost everywhere
    for (size_t i = 0; i < flow.size(); ++i) {
      CHECK(flow[i] >= 0.0);
      CHECK(flow[i] <= 1.0);
    }
  }
  SUBCASE("fewer than two frames is a parameter error") {
    CHECK_THROWS_AS(derive_second_modality(Tensor({3, 1, 8, 8})),
                    std::invalid_argument);
  }
}

TEST_CASE("view augmentation") {
  const Corpus corpus = generate_corpus(small_spec());
  const Tensor& clip = corpus.train.front().video;

  SUBCASE("no-op parameters give the bitwise identity") {
    AugmentParams p;
    p.max_shift = 0;
    p.flip_prob = 0.0;
    p.jitter = 0.0;
    Rng rng(31);
    CHECK(augment_view(clip, p, rng).bitwise_equal(clip));
  }
  SUBCASE("forced flip applied twice is the identity") {
    AugmentParams p;
    p.max_shift = 0;
    p.flip_prob = 1.0;
    p.jitter = 0.0;
    Rng r1(32), r2(33);
    const Tensor once = augment_view(clip, p, r1);
    const Tensor twice = augment_view(once, p, r2);
    CHECK(twice.bitwise_equal(clip));

    // the flow-like flip also re-encodes channel 0, which rounds once more
    const Tensor flow = derive_second_modality(clip);
    Rng r3(34), r4(35);
    const Tensor f_once = augment_view(flow, p, r3, /*flow_like=*/true);
    const Tensor f_twice = augment_view(f_once, p, r4, /*flow_like=*/true);
    double worst = 0.0;
    for (size_t i = 0; i < flow.size(); ++i)
      worst = std::max(worst, std::abs(f_twice[i] - flow[i]));
    CHECK(worst <= 1.5e-16);
  }
  SUBCASE("the shift is constant across every frame of a view") {
    // single bright pixel lets us read the offset off each frame
    const size_t t_len = 6, h = 12, w = 12;
    Tensor dot({1, t_len, h, w});
    for (size_t t = 0; t < t_len; ++t) dot.at({0, t, 5, 7}) = 1.0;
    AugmentParams p;
    p.max_shift = 3;
    p.flip_prob = 0.0;
    p.jitter = 0.0;
    for (uint64_t seed = 0; seed < 20; ++seed) {
      Rng rng(seed);
      const Tensor view = augment_view(dot, p, rng);
      long long fy = -1, fx = -1;
      for (size_t t = 0; t < t_len; ++t) {
        long long py = -1, px = -1;
        for (size_t y = 0; y < h; ++y)
          for (size_t x = 0; x < w; ++x)
            if (view.at({0, t, y, x}) == 1.0) {
              py = static_cast<long long>(y);
              px = static_cast<long long>(x);
            }
        REQUIRE(py >= 0);
        if (t == 0) {
          fy = py;
          fx = px;
        } else {
          CHECK(py == fy);
          CHECK(px == fx);
        }
      }
    }
  }
  SUBCASE("values stay in range under jitter") {
    AugmentParams p; // defaults: shift 2, flip 0.5, jitter 0.2
    Rng rng(36);
    for (int i = 0; i < 10; ++i) {
      const Tensor view = augment_view(clip, p, rng);
      for (size_t j = 0; j < view.size(); ++j) {
        CHECK(view[j] >= 0.0);
        CHECK(view[j] <= 1.0);
      }
    }
  }
}

TEST_CASE("modality alignment under geometric transforms") {
  const Corpus corpus = generate_corpus(small_spec());

  SUBCASE("toroidal shifts commute with derivation bitwise") {
    AugmentParams p;
    p.max_shift = 3;
    p.flip_prob = 0.0;
    p.jitter = 0.0;
    for (size_t ci = 0; ci < 4; ++ci) {
      const Tensor& clip = corpus.train[ci].video;
      Rng ra(40 + ci), rb(40 + ci); // same transform draws on both paths
      const Tensor path_a = derive_second_modality(augment_view(clip, p, ra));
      const Tensor path_b =
          augment_view(derive_second_modality(clip), p, rb, /*flow_like=*/true);
      CHECK(path_a.bitwise_equal(path_b));
    }
  }
  SUBCASE("flips commute up to one rounding of the encoding") {
    AugmentParams p;
    p.max_shift = 2;
    p.flip_prob = 1.0;
    p.jitter = 0.0;
    for (size_t ci = 0; ci < 4; ++ci) {
      const Tensor& clip = corpus.train[ci].video;
      Rng ra(50 + ci), rb(50 + ci);
      const Tensor path_a = derive_second_modality(augment_view(clip, p, ra));
      const Tensor path_b =
          augment_view(derive_second_modality(clip), p, rb, /*flow_like=*/true);
      REQUIRE(path_a.same_shape(path_b));
      double worst = 0.0;
      for (size_t i = 0; i < path_a.size(); ++i)
        worst = std::max(worst, std::abs(path_a[i] - path_b[i]));
      CHECK(worst <= 1e-15);
    }
  }
}

TEST_CASE("oracle motion features are linearly separable to 100%") {
  const Corpus corpus = generate_corpus(small_spec());
  auto oracle_features = [](const std::vector<SynthClip>& clips) {
    FeatureTable t;
    t.features = Tensor({clips.size(), 4});
    for (size_t i = 0; i < clips.size(); ++i) {
      t.features[i * 4 + 0] = static_cast<double>(clips[i].dx);
      t.features[i * 4 + 1] = static_cast<double>(clips[i].dy);
      t.features[i * 4 + 2] = clips[i].shape_kind == 0 ? -1.0 : 1.0;
      t.features[i * 4 + 3] = clips[i].speed;
      t.labels.push_back(clips[i].class_id);
      t.clip_ids.push_back(clips[i].clip_id);
    }
    return t;
  };
  const double acc = linear_probe(oracle_features(corpus.train),
                                  oracle_features(corpus.test), 300, 0.3, 7);
  CHECK(acc == 1.0);
}

TEST_CASE("corpus export/import round trip") {
  namespace fs = std::filesystem;
  const auto dir = fs::temp_directory_path() / "stcmix_corpus_test";
  fs::remove_all(dir);
  CorpusSpec spec = small_spec();
  spec.clips_per_class = 4;
  const Corpus corpus = generate_corpus(spec);
  export_corpus(corpus, dir.string());
  const Corpus back = import_corpus(dir.string());
  CHECK(back.split_hash() == corpus.split_hash());
  REQUIRE(back.train.size() == corpus.train.size());
  REQUIRE(back.test.size() == corpus.test.size());
  for (size_t i = 0; i < corpus.train.size(); ++i) {
    CHECK(back.train[i].video.bitwise_equal(corpus.train[i].video));
    CHECK(back.train[i].class_id == corpus.train[i].class_id);
    CHECK(back.train[i].dx == corpus.train[i].dx);
  }
  fs::remove_all(dir);
}

TEST_SUITE_END();
