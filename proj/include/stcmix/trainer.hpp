// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "stcmix/contrastive.hpp"
#include "stcmix/encoder.hpp"
#include "stcmix/mixing.hpp"
#include "stcmix/synthdata.hpp"

namespace stcmix {

enum class StageKind { MixupPretrain, Cmmc };

struct StageConfig {
  StageKind kind = StageKind::MixupPretrain;
  int trained_modality = 1;            // 1 or 2
  std::optional<int> frozen_modality;  // required (and distinct) for cmmc stages
  size_t epochs = 0;
  size_t batch_size = 16;
  MixOperator op = MixOperator::Mixup; // input-space operator for mixup stages
  double alpha = 1.0;
  uint64_t seed = 0;

  void validate() const;
};

struct TrainSchedule {
  std::vector<StageConfig> stages;
  std::string checkpoint_dir;
  std::string metrics_path;
};

/// The canonical pipeline: mixup pretraining of each modality, then four
/// alternating cross-modal stages (two cycles per modality).
TrainSchedule default_schedule(uint64_t master_seed, size_t epochs_mixup,
                               size_t epochs_cmmc, size_t batch_size, MixOperator op,
                               double alpha, const std::string& checkpoint_dir,
                               const std::string& metrics_path);

struct MetricsRecord {
  size_t stage = 0;
  size_t epoch = 0;
  double loss = 0.0;
  double pretext_acc = 0.0;
  double seconds = 0.0;
};

/// CSV sink, header "stage,epoch,loss,pretext_acc,seconds". Floats are
/// printed with %.17g so equal traces are equal as text.
void write_metrics_csv(const std::string& path, const std::vector<MetricsRecord>& rows);
std::string metrics_csv_line(const MetricsRecord& row);

/// Per-batch instrumentation surface for tests: mixing coefficients, sampled
/// layers, and loss values as the trainer saw them.
struct BatchTrace {
  size_t stage_index = 0, epoch = 0, batch = 0;
  std::vector<double> lambdas;
  size_t layer_k = 0, layer_l = 0; // cmmc stages only
  double loss = 0.0, pretext_acc = 0.0;
};

struct TrainerOptions {
  OptKind optimizer = OptKind::Adam;
  double lr = 1e-3;
  double weight_decay = 1e-5;
  double sgd_momentum = 0.9;
  double tau = 0.07;
  double ema_momentum = 0.999;
  size_t queue_capacity = 256;
  AugmentParams augment{};
  uint64_t model_seed = 1;
  size_t base_channels = 8;
  size_t embed_dim = 64;

  // Test hooks.
  std::optional<double> forced_lambda;
  std::optional<std::pair<size_t, size_t>> forced_layer_pair;
  std::function<void(const BatchTrace&)> batch_observer;
};

struct ScheduleResult {
  std::vector<MetricsRecord> metrics; // rows produced by this invocation
  size_t first_stage_run = 0;         // resume offset
};

/// Owns both modality encoders and the cached two-modality view of a corpus.
/// Stages are self-contained: the key encoder, queue and optimizer are
/// re-initialized from the trained encoder at every stage start, so resuming
/// from a stage checkpoint reproduces the remaining trace bitwise.
class Trainer {
public:
  Trainer(const Corpus& corpus, const TrainerOptions& opts);

  EncoderStack& encoder(int modality);
  const EncoderStack& encoder(int modality) const;

  std::vector<MetricsRecord> run_stage(const StageConfig& stage, size_t stage_index);

  /// Runs stages in order with a checkpoint after each. With resume=true,
  /// continues after the latest complete stage checkpoint and throws if none
  /// exists. Metrics rows are appended to schedule.metrics_path.
  ScheduleResult run_schedule(const TrainSchedule& schedule, bool resume = false);

  const TrainerOptions& options() const { return opts_; }
  size_t train_clip_count() const { return mod1_train_.size(); }

  /// The momentum key encoder of the most recently finished stage; lets tests
  /// verify that the detached key branch accumulated exactly zero gradient.
  const EncoderStack* last_key_encoder() const {
    return last_key_ ? &*last_key_ : nullptr;
  }

  const std::vector<Tensor>& modality_train(int modality) const;
  const std::vector<Tensor>& modality_test(int modality) const;
  const std::vector<size_t>& train_labels() const { return train_labels_; }
  const std::vector<size_t>& test_labels() const { return test_labels_; }
  const std::vector<size_t>& train_clip_ids() const { return train_clip_ids_; }
  const std::vector<size_t>& test_clip_ids() const { return test_clip_ids_; }

private:
  std::vector<MetricsRecord> run_mixup_stage(const StageConfig& stage, size_t stage_index);
  std::vector<MetricsRecord> run_cmmc_stage(const StageConfig& stage, size_t stage_index);
  Tensor assemble_views(const std::vector<Tensor>& clips, const std::vector<size_t>& order,
                        size_t begin, size_t count, Rng& rng, bool flow_like) const;

  TrainerOptions opts_;
  EncoderStack f1_, f2_;
  std::vector<Tensor> mod1_train_, mod1_test_; // (3,T,H,W)
  std::vector<Tensor> mod2_train_, mod2_test_; // (2,T,H,W)
  std::vector<size_t> train_labels_, test_labels_;
  std::vector<size_t> train_clip_ids_, test_clip_ids_;
  std::optional<EncoderStack> last_key_;
};

/// Index of the newest stage with a complete checkpoint under dir, or -1.
int latest_complete_stage(const std::string& checkpoint_dir, size_t num_stages);

} // namespace stcmix
