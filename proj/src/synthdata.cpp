// SPDX-License-Identifier: Apache-2.0

#include "stcmix/synthdata.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <stdexcept>

#include <nlohmann/json.hpp>

namespace stcmix {

namespace fs = std::filesystem;
using json = nlohmann::json;

namespace {

constexpr int kDirections[4][2] = {{1, 0}, {-1, 0}, {0, 1}, {0, -1}}; // (dx, dy)

double clamp01(double v) { return std::clamp(v, 0.0, 1.0); }

size_t wrap(long long v, size_t n) {
  const long long m = static_cast<long long>(n);
  long long r = v % m;
  if (r < 0) r += m;
  return static_cast<size_t>(r);
}

// Shape stencils on a 5x5 footprint around the center.
bool shape_hit(size_t kind, int u, int v) {
  if (kind == 0) return std::abs(u) <= 2 && std::abs(v) <= 2;        // filled square
  return (std::abs(u) <= 2 && v == 0) || (u == 0 && std::abs(v) <= 2); // plus sign
}

SynthClip render_clip(const CorpusSpec& spec, size_t class_id, size_t clip_id) {
  SynthClip clip;
  clip.class_id = class_id;
  clip.clip_id = clip_id;
  clip.shape_kind = class_id / 4;
  clip.dx = kDirections[class_id % 4][0];
  clip.dy = kDirections[class_id % 4][1];
  clip.speed = 1.0;

  Rng rng(mix_seed(spec.seed, 0xC11Full, clip_id));
  const size_t t_len = spec.frames, h = spec.height, w = spec.width;
  const long long x0 = static_cast<long long>(rng.uniform_index(w));
  const long long y0 = static_cast<long long>(rng.uniform_index(h));
  double color[3];
  for (double& c : color) c = rng.uniform(0.4, 1.0);

  clip.video = Tensor({3, t_len, h, w});
  for (size_t t = 0; t < t_len; ++t) {
    const long long cx = x0 + static_cast<long long>(t) * clip.dx;
    const long long cy = y0 + static_cast<long long>(t) * clip.dy;
    for (int v = -2; v <= 2; ++v) {
      for (int u = -2; u <= 2; ++u) {
        if (!shape_hit(clip.shape_kind, u, v)) continue;
        const size_t px = wrap(cx + u, w);
        const size_t py = wrap(cy + v, h);
        for (size_t c = 0; c < 3; ++c) clip.video.at({c, t, py, px}) = color[c];
      }
    }
  }
  if (spec.noise > 0.0) {
    for (size_t i = 0; i < clip.video.size(); ++i)
      clip.video[i] = clamp01(clip.video[i] + rng.normal() * spec.noise);
  }
  return clip;
}

} // namespace

uint64_t Corpus::split_hash() const {
  uint64_t h = 0xcbf29ce484222325ull;
  auto feed = [&h](uint64_t v) {
    for (int i = 0; i < 8; ++i) {
      h ^= (v >> (8 * i)) & 0xff;
      h *= 0x100000001b3ull;
    }
  };
  for (const SynthClip& c : train) {
    feed(c.clip_id);
    feed(1);
  }
  for (const SynthClip& c : test) {
    feed(c.clip_id);
    feed(2);
  }
  return h;
}

Corpus generate_corpus(const CorpusSpec& spec) {
  if (spec.num_classes < 2 || spec.num_classes > 8)
    throw std::invalid_argument("generate_corpus: num_classes must be in [2, 8]");
  if (spec.clips_per_class < 2)
    throw std::invalid_argument("generate_corpus: need at least 2 clips per class");
  if (spec.height < 8 || spec.width < 8)
    throw std::invalid_argument("generate_corpus: frame size must be at least 8x8");
  if (spec.frames < 2)
    throw std::invalid_argument("generate_corpus: need at least 2 frames");
  if (!(spec.train_fraction > 0.0 && spec.train_fraction < 1.0))
    throw std::invalid_argument("generate_corpus: train_fraction must be in (0, 1)");

  Corpus corpus;
  corpus.spec = spec;
  const size_t per_class_train = static_cast<size_t>(
      std::llround(spec.train_fraction * static_cast<double>(spec.clips_per_class)));
  if (per_class_train == 0 || per_class_train == spec.clips_per_class)
    throw std::invalid_argument("generate_corpus: split leaves an empty side");

  for (size_t cls = 0; cls < spec.num_classes; ++cls) {
    Rng split_rng(mix_seed(spec.seed, 0x5917ull, cls));
    const std::vector<size_t> order = split_rng.permutation(spec.clips_per_class);
    for (size_t j = 0; j < spec.clips_per_class; ++j) {
      const size_t clip_id = cls * spec.clips_per_class + order[j];
      SynthClip clip = render_clip(spec, cls, clip_id);
      (j < per_class_train ? corpus.train : corpus.test).push_back(std::move(clip));
    }
  }
  auto by_id = [](const SynthClip& a, const SynthClip& b) { return a.clip_id < b.clip_id; };
  std::sort(corpus.train.begin(), corpus.train.end(), by_id);
  std::sort(corpus.test.begin(), corpus.test.end(), by_id);
  return corpus;
}

Tensor derive_second_modality(const Tensor& video) {
  if (video.rank() != 4 || video.dim(0) != 3)
    throw std::invalid_argument("derive_second_modality: expected (3, T, H, W)");
  const size_t t_len = video.dim(1), h = video.dim(2), w = video.dim(3);
  if (t_len < 2)
    throw std::invalid_argument("derive_second_modality: need at least 2 frames");

  // Gray frame-to-frame differences; the last frame repeats the previous one.
  Tensor diff({t_len, h, w});
  for (size_t t = 0; t + 1 < t_len; ++t)
    for (size_t y = 0; y < h; ++y)
      for (size_t x = 0; x < w; ++x) {
        const double g0 = (video.at({0, t, y, x}) + video.at({1, t, y, x}) +
                           video.at({2, t, y, x})) /
                          3.0;
        const double g1 = (video.at({0, t + 1, y, x}) + video.at({1, t + 1, y, x}) +
                           video.at({2, t + 1, y, x})) /
                          3.0;
        diff.at({t, y, x}) = g1 - g0;
      }
  for (size_t y = 0; y < h; ++y)
    for (size_t x = 0; x < w; ++x)
      diff.at({t_len - 1, y, x}) = diff.at({t_len - 2, y, x});

  Tensor out({2, t_len, h, w});
  for (size_t t = 0; t < t_len; ++t)
    for (size_t y = 0; y < h; ++y)
      for (size_t x = 0; x < w; ++x) {
        const double gx =
            (diff.at({t, y, wrap(static_cast<long long>(x) + 1, w)}) -
             diff.at({t, y, wrap(static_cast<long long>(x) - 1, w)})) *
            0.5;
        const double gy =
            (diff.at({t, wrap(static_cast<long long>(y) + 1, h), x}) -
             diff.at({t, wrap(static_cast<long long>(y) - 1, h), x})) *
            0.5;
        out.at({0, t, y, x}) = clamp01(0.5 + 0.5 * gx);
        out.at({1, t, y, x}) = clamp01(0.5 + 0.5 * gy);
      }
  return out;
}

Tensor augment_view(const Tensor& clip, const AugmentParams& params, Rng& rng,
                    bool flow_like) {
  if (clip.rank() != 4)
    throw std::invalid_argument("augment_view: expected (C, T, H, W)");
  const size_t c = clip.dim(0), t_len = clip.dim(1), h = clip.dim(2), w = clip.dim(3);
  if (params.max_shift >= h || params.max_shift >= w)
    throw std::invalid_argument("augment_view: shift exceeds frame size");

  // Fixed draw order keeps seeded views reproducible regardless of options.
  const long long ms = static_cast<long long>(params.max_shift);
  const long long sy = static_cast<long long>(rng.uniform_index(2 * params.max_shift + 1)) - ms;
  const long long sx = static_cast<long long>(rng.uniform_index(2 * params.max_shift + 1)) - ms;
  const bool flip = rng.uniform() < params.flip_prob;
  // Per-channel gains: scalar brightness alone would leave each clip's color
  // ratio intact, an instance shortcut the pretext task could exploit.
  std::vector<double> gain(c);
  for (size_t ch = 0; ch < c; ++ch)
    gain[ch] = 1.0 + rng.uniform(-params.jitter, params.jitter);

  Tensor out(clip.shape());
  for (size_t ch = 0; ch < c; ++ch) {
    const bool jittered = gain[ch] != 1.0;
    for (size_t t = 0; t < t_len; ++t)
      for (size_t y = 0; y < h; ++y)
        for (size_t x = 0; x < w; ++x) {
          const size_t dst_x = flip ? w - 1 - x : x;
          double v = clip.at({ch, t, wrap(static_cast<long long>(y) + sy, h),
                              wrap(static_cast<long long>(x) + sx, w)});
          if (flow_like && flip && ch == 0) v = 1.0 - v; // mirror the x-motion
          if (jittered)
            v = clamp01(flow_like ? 0.5 + gain[ch] * (v - 0.5) : gain[ch] * v);
          out.at({ch, t, y, dst_x}) = v;
        }
  }
  return out;
}

// ---- export / import ----

void export_corpus(const Corpus& corpus, const std::string& dir) {
  fs::create_directories(dir);
  json index;
  index["format"] = "stcmix-corpus-v1";
  index["spec"] = {{"num_classes", corpus.spec.num_classes},
                   {"clips_per_class", corpus.spec.clips_per_class},
                   {"frames", corpus.spec.frames},
                   {"height", corpus.spec.height},
                   {"width", corpus.spec.width},
                   {"noise", corpus.spec.noise},
                   {"seed", corpus.spec.seed},
                   {"train_fraction", corpus.spec.train_fraction}};
  json clips = json::array();
  auto dump = [&](const std::vector<SynthClip>& set, const char* split) {
    for (const SynthClip& c : set) {
      const std::string file = "clip" + std::to_string(c.clip_id) + ".ndt";
      save_tensor((fs::path(dir) / file).string(), c.video);
      clips.push_back({{"clip_id", c.clip_id},
                       {"class_id", c.class_id},
                       {"split", split},
                       {"file", file},
                       {"dx", c.dx},
                       {"dy", c.dy},
                       {"shape_kind", c.shape_kind},
                       {"speed", c.speed}});
    }
  };
  dump(corpus.train, "train");
  dump(corpus.test, "test");
  index["clips"] = clips;
  std::ofstream os(fs::path(dir) / "index.json");
  if (!os) throw std::runtime_error("export_corpus: cannot write index in " + dir);
  os << index.dump(2) << "\n";
}

Corpus import_corpus(const std::string& dir) {
  std::ifstream is(fs::path(dir) / "index.json");
  if (!is) throw std::runtime_error("import_corpus: missing index.json in " + dir);
  json index = json::parse(is);
  if (index.value("format", "") != "stcmix-corpus-v1")
    throw std::runtime_error("import_corpus: unrecognized corpus format in " + dir);
  Corpus corpus;
  const json& s = index.at("spec");
  corpus.spec.num_classes = s.at("num_classes").get<size_t>();
  corpus.spec.clips_per_class = s.at("clips_per_class").get<size_t>();
  corpus.spec.frames = s.at("frames").get<size_t>();
  corpus.spec.height = s.at("height").get<size_t>();
  corpus.spec.width = s.at("width").get<size_t>();
  corpus.spec.noise = s.at("noise").get<double>();
  corpus.spec.seed = s.at("seed").get<uint64_t>();
  corpus.spec.train_fraction = s.at("train_fraction").get<double>();
  for (const json& c : index.at("clips")) {
    SynthClip clip;
    clip.clip_id = c.at("clip_id").get<size_t>();
    clip.class_id = c.at("class_id").get<size_t>();
    clip.dx = c.at("dx").get<int>();
    clip.dy = c.at("dy").get<int>();
    clip.shape_kind = c.at("shape_kind").get<size_t>();
    clip.speed = c.at("speed").get<double>();
    clip.video = load_tensor((fs::path(dir) / c.at("file").get<std::string>()).string());
    (c.at("split").get<std::string>() == "train" ? corpus.train : corpus.test)
        .push_back(std::move(clip));
  }
  return corpus;
}

} // namespace stcmix
