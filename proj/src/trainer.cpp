// SPDX-License-Identifier: Apache-2.0

#include "stcmix/trainer.hpp"

#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <stdexcept>

namespace stcmix {

namespace fs = std::filesystem;

namespace {

// Substream tags for per-batch seed fan-out.
constexpr uint64_t kOrderStream = 0xA1;
constexpr uint64_t kAugQueryStream = 0xA2;
constexpr uint64_t kAugKeyStream = 0xA3;
constexpr uint64_t kAugCrossStream = 0xA4;
constexpr uint64_t kMixStream = 0xA5;
constexpr uint64_t kLayerStream = 0xA6;
constexpr uint64_t kStageStream = 0x57A6E;

std::string format_g17(double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}


MixOutcome apply_input_operator(MixOperator op, const Tensor& x, double alpha, Rng& rng,
                                std::optional<double> forced_lambda) {
  switch (op) {
    case MixOperator::None: return no_mix(x);
    case MixOperator::Mixup: return mixup_batch(x, alpha, rng, forced_lambda);
    case MixOperator::TemporalCutmix: return temporal_cutmix(x, alpha, rng, forced_lambda);
    case MixOperator::StCutmix: return st_cutmix(x, alpha, rng, forced_lambda);
    case MixOperator::VideoMix: return videomix(x, alpha, rng, forced_lambda);
  }
  throw std::invalid_argument("apply_input_operator: unknown operator");
}

} // namespace

void StageConfig::validate() const {
  if (trained_modality != 1 && trained_modality != 2)
    throw std::invalid_argument("StageConfig: trained_modality must be 1 or 2");
  if (batch_size < 2) throw std::invalid_argument("StageConfig: batch_size must be >= 2");
  if (kind == StageKind::Cmmc) {
    if (!frozen_modality)
      throw std::invalid_argument("StageConfig: cmmc stage needs a frozen modality");
    if (*frozen_modality == trained_modality)
      throw std::invalid_argument(
          "StageConfig: trained and frozen modalities must differ");
    if (*frozen_modality != 1 && *frozen_modality != 2)
      throw std::invalid_argument("StageConfig: frozen_modality must be 1 or 2");
  } else if (frozen_modality) {
    throw std::invalid_argument("StageConfig: mixup stage cannot freeze a modality");
  }
  if (!(alpha > 0.0)) throw std::invalid_argument("StageConfig: alpha must be > 0");
}

TrainSchedule default_schedule(uint64_t master_seed, size_t epochs_mixup,
                               size_t epochs_cmmc, size_t batch_size, MixOperator op,
                               double alpha, const std::string& checkpoint_dir,
                               const std::string& metrics_path) {
  TrainSchedule sched;
  sched.checkpoint_dir = checkpoint_dir;
  sched.metrics_path = metrics_path;
  auto stage = [&](StageKind kind, int trained, std::optional<int> frozen,
                   size_t epochs) {
    StageConfig st;
    st.kind = kind;
    st.trained_modality = trained;
    st.frozen_modality = frozen;
    st.epochs = epochs;
    st.batch_size = batch_size;
    st.op = op;
    st.alpha = alpha;
    st.seed = mix_seed(master_seed, kStageStream, sched.stages.size());
    sched.stages.push_back(st);
  };
  stage(StageKind::MixupPretrain, 1, {}, epochs_mixup);
  stage(StageKind::MixupPretrain, 2, {}, epochs_mixup);
  stage(StageKind::Cmmc, 1, 2, epochs_cmmc);
  stage(StageKind::Cmmc, 2, 1, epochs_cmmc);
  stage(StageKind::Cmmc, 1, 2, epochs_cmmc);
  stage(StageKind::Cmmc, 2, 1, epochs_cmmc);
  return sched;
}

std::string metrics_csv_line(const MetricsRecord& row) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.3f", row.seconds);
  return std::to_string(row.stage) + "," + std::to_string(row.epoch) + "," +
         format_g17(row.loss) + "," + format_g17(row.pretext_acc) + "," + buf;
}

void write_metrics_csv(const std::string& path, const std::vector<MetricsRecord>& rows) {
  std::ofstream os(path);
  if (!os) throw std::runtime_error("write_metrics_csv: cannot open " + path);
  os << "stage,epoch,loss,pretext_acc,seconds\n";
  for (const MetricsRecord& r : rows) os << metrics_csv_line(r) << "\n";
}

static void append_metrics_csv(const std::string& path,
                               const std::vector<MetricsRecord>& rows) {
  if (fs::path(path).has_parent_path())
    fs::create_directories(fs::path(path).parent_path());
  const bool fresh = !fs::exists(path);
  std::ofstream os(path, std::ios::app);
  if (!os) throw std::runtime_error("append_metrics_csv: cannot open " + path);
  if (fresh) os << "stage,epoch,loss,pretext_acc,seconds\n";
  for (const MetricsRecord& r : rows) os << metrics_csv_line(r) << "\n";
}

// ---- Trainer ----

Trainer::Trainer(const Corpus& corpus, const TrainerOptions& opts) : opts_(opts) {
  EncoderArch arch1;
  arch1.in_channels = 3;
  arch1.frames = corpus.spec.frames;
  arch1.height = corpus.spec.height;
  arch1.width = corpus.spec.width;
  arch1.base_channels = opts.base_channels;
  arch1.embed_dim = opts.embed_dim;
  EncoderArch arch2 = arch1;
  arch2.in_channels = 2;
  f1_ = EncoderStack::make_default(arch1, mix_seed(opts.model_seed, 1), "modality1");
  f2_ = EncoderStack::make_default(arch2, mix_seed(opts.model_seed, 2), "modality2");

  auto cache = [](const std::vector<SynthClip>& clips, std::vector<Tensor>& m1,
                  std::vector<Tensor>& m2, std::vector<size_t>& labels,
                  std::vector<size_t>& ids) {
    for (const SynthClip& c : clips) {
      m1.push_back(c.video);
      m2.push_back(derive_second_modality(c.video));
      labels.push_back(c.class_id);
      ids.push_back(c.clip_id);
    }
  };
  cache(corpus.train, mod1_train_, mod2_train_, train_labels_, train_clip_ids_);
  cache(corpus.test, mod1_test_, mod2_test_, test_labels_, test_clip_ids_);
  if (mod1_train_.empty()) throw std::invalid_argument("Trainer: empty training split");
}

EncoderStack& Trainer::encoder(int modality) {
  if (modality == 1) return f1_;
  if (modality == 2) return f2_;
  throw std::invalid_argument("Trainer::encoder: modality must be 1 or 2");
}

const EncoderStack& Trainer::encoder(int modality) const {
  return const_cast<Trainer*>(this)->encoder(modality);
}

const std::vector<Tensor>& Trainer::modality_train(int modality) const {
  if (modality == 1) return mod1_train_;
  if (modality == 2) return mod2_train_;
  throw std::invalid_argument("Trainer::modality_train: modality must be 1 or 2");
}

const std::vector<Tensor>& Trainer::modality_test(int modality) const {
  if (modality == 1) return mod1_test_;
  if (modality == 2) return mod2_test_;
  throw std::invalid_argument("Trainer::modality_test: modality must be 1 or 2");
}

Tensor Trainer::assemble_views(const std::vector<Tensor>& clips,
                               const std::vector<size_t>& order, size_t begin,
                               size_t count, Rng& rng, bool flow_like) const {
  const Tensor& proto = clips.front();
  Tensor batch({count, proto.dim(0), proto.dim(1), proto.dim(2), proto.dim(3)});
  const size_t sample = proto.size();
  for (size_t i = 0; i < count; ++i) {
    Tensor view = augment_view(clips[order[begin + i]], opts_.augment, rng, flow_like);
    std::copy(view.data(), view.data() + sample, batch.data() + i * sample);
  }
  return batch;
}

std::vector<MetricsRecord> Trainer::run_stage(const StageConfig& stage,
                                              size_t stage_index) {
  stage.validate();
  if (stage.kind == StageKind::MixupPretrain) return run_mixup_stage(stage, stage_index);
  return run_cmmc_stage(stage, stage_index);
}

std::vector<MetricsRecord> Trainer::run_mixup_stage(const StageConfig& stage,
                                                    size_t stage_index) {
  std::vector<MetricsRecord> rows;
  if (stage.epochs == 0) return rows;

  EncoderStack& enc = encoder(stage.trained_modality);
  if (enc.frozen())
    throw std::logic_error("run_mixup_stage: trained encoder is marked frozen");
  const bool flow_like = stage.trained_modality == 2;
  const std::vector<Tensor>& clips = modality_train(stage.trained_modality);
  const size_t n = clips.size();
  const size_t batches = n / stage.batch_size;
  if (batches == 0)
    throw std::invalid_argument("run_mixup_stage: batch size exceeds training set");

  EncoderStack key = enc.clone();
  MoCoQueue queue(opts_.queue_capacity);
  OptimizerConfig ocfg;
  ocfg.kind = opts_.optimizer;
  ocfg.lr = opts_.lr;
  ocfg.weight_decay = opts_.weight_decay;
  ocfg.momentum = opts_.sgd_momentum;
  Optimizer opt(ocfg);

  for (size_t epoch = 0; epoch < stage.epochs; ++epoch) {
    const auto t0 = std::chrono::steady_clock::now();
    Rng order_rng(mix_seed(stage.seed, kOrderStream, epoch));
    const std::vector<size_t> order = order_rng.permutation(n);
    double loss_sum = 0.0, acc_sum = 0.0;

    for (size_t b = 0; b < batches; ++b) {
      const uint64_t batch_seed = mix_seed(stage.seed, epoch, b);
      Rng aug_q(mix_seed(batch_seed, kAugQueryStream));
      Rng aug_k(mix_seed(batch_seed, kAugKeyStream));
      Rng mix_rng(mix_seed(batch_seed, kMixStream));

      const Tensor x_query =
          assemble_views(clips, order, b * stage.batch_size, stage.batch_size, aug_q,
                         flow_like);
      const Tensor x_key = assemble_views(clips, order, b * stage.batch_size,
                                          stage.batch_size, aug_k, flow_like);

      const MixOutcome mo =
          apply_input_operator(stage.op, x_query, stage.alpha, mix_rng,
                               opts_.forced_lambda);
      const Tensor z = enc.forward(center_input(mo.mixed));
      const Tensor z_key = key.forward(center_input(x_key), /*cache=*/false);
      const ContrastiveResult res =
          imix_loss(z, z_key, queue, opts_.tau, mo.partner, mo.lambdas);

      enc.zero_grads();
      enc.backward_range(res.grad_query, 0, enc.num_layers());
      opt.step(enc.parameters(), enc.gradients());
      ema_update(key, enc, opts_.ema_momentum);
      queue.enqueue(z_key);

      loss_sum += res.loss;
      acc_sum += res.pretext_accuracy;
      if (opts_.batch_observer) {
        BatchTrace trace;
        trace.stage_index = stage_index;
        trace.epoch = epoch;
        trace.batch = b;
        trace.lambdas = mo.lambdas;
        trace.loss = res.loss;
        trace.pretext_acc = res.pretext_accuracy;
        opts_.batch_observer(trace);
      }
    }
    const double secs =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    rows.push_back({stage_index, epoch, loss_sum / static_cast<double>(batches),
                    acc_sum / static_cast<double>(batches), secs});
  }
  last_key_ = std::move(key);
  return rows;
}

std::vector<MetricsRecord> Trainer::run_cmmc_stage(const StageConfig& stage,
                                                   size_t stage_index) {
  std::vector<MetricsRecord> rows;
  if (stage.epochs == 0) return rows;

  EncoderStack& trained = encoder(stage.trained_modality);
  EncoderStack& frozen = encoder(*stage.frozen_modality);
  const bool was_frozen = frozen.frozen();
  frozen.set_frozen(true);
  if (trained.frozen())
    throw std::logic_error("run_cmmc_stage: trained encoder is marked frozen");

  const bool flow_like_trained = stage.trained_modality == 2;
  const bool flow_like_frozen = *stage.frozen_modality == 2;
  const std::vector<Tensor>& clips_trained = modality_train(stage.trained_modality);
  const std::vector<Tensor>& clips_frozen = modality_train(*stage.frozen_modality);
  const size_t n = clips_trained.size();
  const size_t batches = n / stage.batch_size;
  if (batches == 0)
    throw std::invalid_argument("run_cmmc_stage: batch size exceeds training set");

  EncoderStack key = trained.clone();
  MoCoQueue queue(opts_.queue_capacity);
  OptimizerConfig ocfg;
  ocfg.kind = opts_.optimizer;
  ocfg.lr = opts_.lr;
  ocfg.weight_decay = opts_.weight_decay;
  ocfg.momentum = opts_.sgd_momentum;
  Optimizer opt(ocfg);

  const size_t last_layer = trained.num_layers();
  for (size_t epoch = 0; epoch < stage.epochs; ++epoch) {
    const auto t0 = std::chrono::steady_clock::now();
    Rng order_rng(mix_seed(stage.seed, kOrderStream, epoch));
    const std::vector<size_t> order = order_rng.permutation(n);
    double loss_sum = 0.0, acc_sum = 0.0;

    for (size_t b = 0; b < batches; ++b) {
      const uint64_t batch_seed = mix_seed(stage.seed, epoch, b);
      Rng aug_q(mix_seed(batch_seed, kAugQueryStream));
      Rng aug_k(mix_seed(batch_seed, kAugKeyStream));
      Rng aug_2(mix_seed(batch_seed, kAugCrossStream));
      Rng mix_rng(mix_seed(batch_seed, kMixStream));
      Rng layer_rng(mix_seed(batch_seed, kLayerStream));

      const auto [layer_k, layer_l] =
          opts_.forced_layer_pair
              ? *opts_.forced_layer_pair
              : sample_layer_pair(trained.num_blocks(), frozen.num_blocks(), layer_rng);
      const size_t split_layer = trained.block_output_layer(layer_k);

      const Tensor x1_query =
          assemble_views(clips_trained, order, b * stage.batch_size, stage.batch_size,
                         aug_q, flow_like_trained);
      const Tensor x1_key =
          assemble_views(clips_trained, order, b * stage.batch_size, stage.batch_size,
                         aug_k, flow_like_trained);
      const Tensor x2 = assemble_views(clips_frozen, order, b * stage.batch_size,
                                       stage.batch_size, aug_2, flow_like_frozen);

      const Tensor g1 = trained.partial_forward(center_input(x1_query), 0, split_layer);
      // Donor branch is detached: no caching, no backward, no updates.
      const Tensor g2 =
          frozen.partial_forward(center_input(x2), 0, frozen.block_output_layer(layer_l),
                                 /*cache=*/false);
      const MixOutcome mo = cmmc_mix(g1, g2, stage.alpha, mix_rng, opts_.forced_lambda);

      const Tensor z_mix = trained.partial_forward(mo.mixed, split_layer, last_layer);
      const Tensor z_key = key.forward(center_input(x1_key), /*cache=*/false);
      const ContrastiveResult res =
          imix_loss(z_mix, z_key, queue, opts_.tau, mo.partner, mo.lambdas);

      trained.zero_grads();
      Tensor grad_mix = trained.backward_range(res.grad_query, split_layer, last_layer);
      // The mix is affine in g1: gradient passes outside the replaced box and
      // is zero inside it.
      if (mo.mask_box) zero_box(grad_mix, *mo.mask_box);
      trained.backward_range(grad_mix, 0, split_layer);
      opt.step(trained.parameters(), trained.gradients());
      ema_update(key, trained, opts_.ema_momentum);
      queue.enqueue(z_key);

      loss_sum += res.loss;
      acc_sum += res.pretext_accuracy;
      if (opts_.batch_observer) {
        BatchTrace trace;
        trace.stage_index = stage_index;
        trace.epoch = epoch;
        trace.batch = b;
        trace.lambdas = mo.lambdas;
        trace.layer_k = layer_k;
        trace.layer_l = layer_l;
        trace.loss = res.loss;
        trace.pretext_acc = res.pretext_accuracy;
        opts_.batch_observer(trace);
      }
    }
    const double secs =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    rows.push_back({stage_index, epoch, loss_sum / static_cast<double>(batches),
                    acc_sum / static_cast<double>(batches), secs});
  }
  frozen.set_frozen(was_frozen);
  last_key_ = std::move(key);
  return rows;
}

// ---- schedule orchestration ----

namespace {

std::string stage_dir(const std::string& root, size_t index) {
  return (fs::path(root) / ("stage" + std::to_string(index))).string();
}

void save_stage_checkpoint(const std::string& root, size_t index, const EncoderStack& f1,
                           const EncoderStack& f2) {
  const std::string dir = stage_dir(root, index);
  save_encoder(f1, (fs::path(dir) / "encoder1").string(), static_cast<int>(index));
  save_encoder(f2, (fs::path(dir) / "encoder2").string(), static_cast<int>(index));
  std::ofstream os(fs::path(dir) / "done.json");
  os << "{\"stage\": " << index << ", \"complete\": true}\n";
}

} // namespace

int latest_complete_stage(const std::string& checkpoint_dir, size_t num_stages) {
  for (size_t i = num_stages; i-- > 0;) {
    if (fs::exists(fs::path(stage_dir(checkpoint_dir, i)) / "done.json"))
      return static_cast<int>(i);
  }
  return -1;
}

ScheduleResult Trainer::run_schedule(const TrainSchedule& schedule, bool resume) {
  ScheduleResult result;
  size_t start = 0;
  if (resume) {
    if (schedule.checkpoint_dir.empty())
      throw std::invalid_argument("run_schedule: resume needs a checkpoint directory");
    const int last = latest_complete_stage(schedule.checkpoint_dir,
                                           schedule.stages.size());
    if (last < 0)
      throw std::runtime_error("run_schedule: resume requested but no complete stage "
                               "checkpoint under " +
                               schedule.checkpoint_dir);
    const std::string dir = stage_dir(schedule.checkpoint_dir, last);
    f1_ = load_encoder((fs::path(dir) / "encoder1").string());
    f2_ = load_encoder((fs::path(dir) / "encoder2").string());
    start = static_cast<size_t>(last) + 1;
  }
  result.first_stage_run = start;

  for (size_t i = start; i < schedule.stages.size(); ++i) {
    std::vector<MetricsRecord> rows;
    try {
      rows = run_stage(schedule.stages[i], i);
    } catch (...) {
      // Flush what we have so the run can be inspected and resumed by hand.
      if (!schedule.checkpoint_dir.empty()) {
        const std::string dir =
            (fs::path(schedule.checkpoint_dir) / ("stage" + std::to_string(i) + "-aborted"))
                .string();
        save_encoder(f1_, (fs::path(dir) / "encoder1").string(), static_cast<int>(i));
        save_encoder(f2_, (fs::path(dir) / "encoder2").string(), static_cast<int>(i));
      }
      throw;
    }
    if (!schedule.metrics_path.empty()) append_metrics_csv(schedule.metrics_path, rows);
    result.metrics.insert(result.metrics.end(), rows.begin(), rows.end());
    if (!schedule.checkpoint_dir.empty())
      save_stage_checkpoint(schedule.checkpoint_dir, i, f1_, f2_);
  }
  return result;
}

} // namespace stcmix
