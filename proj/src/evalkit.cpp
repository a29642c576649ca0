// SPDX-License-Identifier: Apache-2.0

#include "stcmix/evalkit.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <set>
#include <stdexcept>

#include "stcmix/rng.hpp"

namespace stcmix {

namespace {

// Stack (C,T,H,W) clips into batches and run a partial forward.
Tensor forward_clips(EncoderStack& enc, const std::vector<Tensor>& clips, size_t to_layer,
                     size_t batch_size = 32) {
  if (clips.empty()) throw std::invalid_argument("forward_clips: no clips");
  const Tensor& proto = clips.front();
  const size_t sample = proto.size();
  Tensor out;
  size_t done = 0;
  std::vector<double> rows;
  size_t dim = 0;
  while (done < clips.size()) {
    const size_t count = std::min(batch_size, clips.size() - done);
    Tensor batch({count, proto.dim(0), proto.dim(1), proto.dim(2), proto.dim(3)});
    for (size_t i = 0; i < count; ++i)
      std::copy(clips[done + i].data(), clips[done + i].data() + sample,
                batch.data() + i * sample);
    Tensor feats = enc.partial_forward(center_input(batch), 0, to_layer, /*cache=*/false);
    dim = feats.dim(1);
    rows.insert(rows.end(), feats.data(), feats.data() + feats.size());
    done += count;
  }
  return Tensor({clips.size(), dim}, std::move(rows));
}

size_t num_classes_of(const std::vector<size_t>& labels) {
  std::set<size_t> classes(labels.begin(), labels.end());
  if (classes.size() < 2)
    throw std::domain_error("probe: training labels contain a single class");
  size_t mx = 0;
  for (size_t c : classes) mx = std::max(mx, c);
  return mx + 1;
}

double evaluate_head(Layer& head, const Tensor& features,
                     const std::vector<size_t>& labels) {
  Tensor logits = head.forward(features, /*cache=*/false);
  const size_t b = logits.dim(0), k = logits.dim(1);
  size_t correct = 0;
  for (size_t i = 0; i < b; ++i) {
    const double* row = logits.data() + i * k;
    size_t argmax = 0;
    for (size_t j = 1; j < k; ++j)
      if (row[j] > row[argmax]) argmax = j;
    if (argmax == labels[i]) ++correct;
  }
  return static_cast<double>(correct) / static_cast<double>(b);
}

} // namespace

FeatureTable extract_features(EncoderStack& encoder, const std::vector<Tensor>& clips,
                              const std::vector<size_t>& labels,
                              const std::vector<size_t>& clip_ids) {
  if (clips.size() != labels.size() || clips.size() != clip_ids.size())
    throw std::invalid_argument("extract_features: clips/labels/ids length mismatch");
  if (encoder.head_start() == 0 || encoder.head_start() >= encoder.num_layers())
    throw std::invalid_argument("extract_features: encoder has no head boundary");
  FeatureTable table;
  table.features = forward_clips(encoder, clips, encoder.head_start());
  table.labels = labels;
  table.clip_ids = clip_ids;
  return table;
}

double linear_probe(const FeatureTable& train, const FeatureTable& test, size_t epochs,
                    double lr, uint64_t seed) {
  if (train.features.dim(1) != test.features.dim(1))
    throw std::invalid_argument("linear_probe: feature dimension mismatch");
  const size_t classes = num_classes_of(train.labels);
  const size_t n = train.features.dim(0), d = train.features.dim(1);

  // Rows are L2-normalized so the probe's learning rate is scale-free.
  const Tensor train_feats = l2_normalize(train.features);
  const Tensor test_feats = l2_normalize(test.features);

  Rng init(mix_seed(seed, 0x9E4D));
  auto head = make_linear(d, classes, init);
  OptimizerConfig ocfg;
  ocfg.kind = OptKind::SgdMomentum;
  ocfg.lr = lr;
  ocfg.momentum = 0.9;
  Optimizer opt(ocfg);

  const size_t batch = std::min<size_t>(64, n);
  Rng order_rng(mix_seed(seed, 0x0D0E));
  for (size_t epoch = 0; epoch < epochs; ++epoch) {
    const std::vector<size_t> order = order_rng.permutation(n);
    for (size_t b = 0; b + batch <= n; b += batch) {
      Tensor x({batch, d});
      std::vector<size_t> y(batch);
      for (size_t i = 0; i < batch; ++i) {
        const size_t src = order[b + i];
        std::copy(train_feats.data() + src * d, train_feats.data() + (src + 1) * d,
                  x.data() + i * d);
        y[i] = train.labels[src];
      }
      Tensor logits = head->forward(x, /*cache=*/true);
      const CrossEntropyResult ce = softmax_cross_entropy(logits, y);
      for (Tensor* g : head->grads()) g->fill(0.0);
      head->backward(ce.grad);
      opt.step(head->params(), head->grads());
    }
  }
  return evaluate_head(*head, test_feats, test.labels);
}

double finetune(EncoderStack& encoder, const std::vector<Tensor>& train_clips,
                const std::vector<size_t>& train_labels,
                const std::vector<Tensor>& test_clips,
                const std::vector<size_t>& test_labels, size_t epochs, double lr,
                uint64_t seed) {
  if (train_clips.size() != train_labels.size())
    throw std::invalid_argument("finetune: clips/labels length mismatch");
  const size_t classes = num_classes_of(train_labels);
  EncoderStack& model = encoder;
  if (model.frozen())
    throw std::logic_error("finetune: encoder is marked frozen");
  const size_t backbone_end = model.head_start();
  const size_t d = model.arch().backbone_width();

  Rng init(mix_seed(seed, 0x9E4D));
  auto head = make_linear(d, classes, init);
  auto feat_norm = make_l2norm(); // same scale-free head input as the probe
  OptimizerConfig head_cfg;
  head_cfg.kind = OptKind::SgdMomentum;
  head_cfg.lr = lr;
  head_cfg.momentum = 0.9;
  Optimizer head_opt(head_cfg);
  OptimizerConfig body_cfg = head_cfg;
  body_cfg.lr = lr / 10.0; // gentler on the pretrained backbone
  Optimizer body_opt(body_cfg);

  const Tensor& proto = train_clips.front();
  const size_t sample = proto.size();
  const size_t n = train_clips.size();
  const size_t batch = std::min<size_t>(16, n);
  Rng order_rng(mix_seed(seed, 0x0D0E));
  // Only backbone layers train; the projection head stays out of the path.
  std::vector<Tensor*> body_params, body_grads;
  {
    auto all_params = model.parameters();
    auto all_grads = model.gradients();
    const auto names = model.parameter_names();
    for (size_t i = 0; i < names.size(); ++i) {
      const size_t layer_idx = std::stoul(names[i].substr(5));
      if (layer_idx < backbone_end) {
        body_params.push_back(all_params[i]);
        body_grads.push_back(all_grads[i]);
      }
    }
  }

  for (size_t epoch = 0; epoch < epochs; ++epoch) {
    const std::vector<size_t> order = order_rng.permutation(n);
    for (size_t b = 0; b + batch <= n; b += batch) {
      Tensor x({batch, proto.dim(0), proto.dim(1), proto.dim(2), proto.dim(3)});
      std::vector<size_t> y(batch);
      for (size_t i = 0; i < batch; ++i) {
        const size_t src = order[b + i];
        std::copy(train_clips[src].data(), train_clips[src].data() + sample,
                  x.data() + i * sample);
        y[i] = train_labels[src];
      }
      Tensor feats = model.partial_forward(center_input(x), 0, backbone_end);
      Tensor normed = feat_norm->forward(feats, /*cache=*/true);
      Tensor logits = head->forward(normed, /*cache=*/true);
      const CrossEntropyResult ce = softmax_cross_entropy(logits, y);
      for (Tensor* g : head->grads()) g->fill(0.0);
      model.zero_grads();
      Tensor dnormed = head->backward(ce.grad);
      Tensor dfeats = feat_norm->backward(dnormed);
      model.backward_range(dfeats, 0, backbone_end);
      head_opt.step(head->params(), head->grads());
      body_opt.step(body_params, body_grads);
    }
  }

  const Tensor test_feats = l2_normalize(forward_clips(model, test_clips, backbone_end));
  return evaluate_head(*head, test_feats, test_labels);
}

RetrievalReport knn_retrieval(const FeatureTable& gallery, const FeatureTable& queries,
                              const std::vector<size_t>& ks) {
  if (gallery.features.dim(0) == 0)
    throw std::invalid_argument("knn_retrieval: empty gallery");
  if (gallery.features.dim(1) != queries.features.dim(1))
    throw std::invalid_argument("knn_retrieval: feature dimension mismatch");
  const size_t g = gallery.features.dim(0);
  for (size_t k : ks)
    if (k == 0 || k > g)
      throw std::invalid_argument("knn_retrieval: k must be in [1, gallery size]");

  const Tensor gal = l2_normalize(gallery.features);
  const Tensor qry = l2_normalize(queries.features);
  const size_t q = qry.dim(0), d = qry.dim(1);
  const size_t max_k = *std::max_element(ks.begin(), ks.end());

  RetrievalReport report;
  std::vector<size_t> hits(ks.size(), 0);
  std::vector<std::pair<double, size_t>> scored(g); // (-sim, clip_id index proxy)
  for (size_t i = 0; i < q; ++i) {
    const double* qi = qry.data() + i * d;
    for (size_t j = 0; j < g; ++j) {
      const double* gj = gal.data() + j * d;
      double dot = 0.0;
      for (size_t t = 0; t < d; ++t) dot += qi[t] * gj[t];
      scored[j] = {dot, j};
    }
    std::partial_sort(scored.begin(), scored.begin() + max_k, scored.end(),
                      [&](const auto& a, const auto& b) {
                        if (a.first != b.first) return a.first > b.first;
                        return gallery.clip_ids[a.second] < gallery.clip_ids[b.second];
                      });
    for (size_t ki = 0; ki < ks.size(); ++ki) {
      bool hit = false;
      for (size_t j = 0; j < ks[ki] && !hit; ++j)
        hit = gallery.labels[scored[j].second] == queries.labels[i];
      if (hit) ++hits[ki];
    }
  }
  for (size_t ki = 0; ki < ks.size(); ++ki)
    report.r_at[ks[ki]] = static_cast<double>(hits[ki]) / static_cast<double>(q);
  return report;
}

} // namespace stcmix
