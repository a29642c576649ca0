// SPDX-License-Identifier: Apache-2.0

#include "stcmix/commands.hpp"

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>

#include <nlohmann/json.hpp>

#include "stcmix/evalkit.hpp"
#include "stcmix/gradcheck.hpp"
#include "stcmix/trainer.hpp"

namespace stcmix {

namespace fs = std::filesystem;
using json = nlohmann::json;

#ifndef STCMIX_BUILD_ID
#define STCMIX_BUILD_ID "dev"
#endif

const char* build_id() { return STCMIX_BUILD_ID; }

namespace {

std::string under(const std::string& workdir, const std::string& rel) {
  fs::path p(rel);
  if (p.is_absolute()) return rel;
  return (fs::path(workdir) / p).string();
}

CorpusSpec corpus_spec_from(const Config& cfg) {
  CorpusSpec spec;
  spec.num_classes = cfg.index("data.classes");
  spec.clips_per_class = cfg.index("data.clips_per_class");
  spec.frames = cfg.index("data.frames");
  spec.height = cfg.index("data.height");
  spec.width = cfg.index("data.width");
  spec.noise = cfg.f64("data.noise");
  spec.seed = cfg.u64("data.seed");
  spec.train_fraction = cfg.f64("data.train_fraction");
  return spec;
}

TrainerOptions trainer_options_from(const Config& cfg) {
  TrainerOptions opts;
  const std::string kind = cfg.str("opt.kind");
  if (kind == "adam")
    opts.optimizer = OptKind::Adam;
  else if (kind == "sgd")
    opts.optimizer = OptKind::SgdMomentum;
  else
    throw std::invalid_argument("opt.kind must be adam or sgd, got " + kind);
  opts.lr = cfg.f64("opt.lr");
  opts.weight_decay = cfg.f64("opt.weight_decay");
  opts.sgd_momentum = cfg.f64("opt.momentum");
  opts.tau = cfg.f64("loss.tau");
  opts.ema_momentum = cfg.f64("loss.ema_momentum");
  opts.queue_capacity = cfg.index("loss.queue_capacity");
  opts.augment.max_shift = cfg.index("augment.max_shift");
  opts.augment.flip_prob = cfg.f64("augment.flip_prob");
  opts.augment.jitter = cfg.f64("augment.jitter");
  opts.model_seed = cfg.u64("model.seed");
  opts.base_channels = cfg.index("model.base_channels");
  opts.embed_dim = cfg.index("model.embed_dim");
  return opts;
}

TrainSchedule schedule_from(const Config& cfg, const std::string& workdir) {
  return default_schedule(cfg.u64("trainer.master_seed"),
                          cfg.index("trainer.epochs_mixup"),
                          cfg.index("trainer.epochs_cmmc"),
                          cfg.index("trainer.batch_size"),
                          parse_mix_operator(cfg.str("trainer.operator")),
                          cfg.f64("trainer.alpha"),
                          under(workdir, cfg.str("trainer.checkpoint_dir")),
                          under(workdir, cfg.str("trainer.metrics")));
}

void write_manifest(const std::string& workdir, const std::string& command,
                    const Config& cfg) {
  json m;
  m["command"] = command;
  m["build_id"] = build_id();
  m["master_seed"] = cfg.u64("trainer.master_seed");
  json c;
  for (const auto& [k, v] : cfg.items()) c[k] = v;
  m["config"] = c;
  std::ofstream os(fs::path(workdir) / (command + ".manifest.json"));
  if (!os) throw std::runtime_error("cannot write manifest under " + workdir);
  os << m.dump(2) << "\n";
}

std::string latest_encoder_checkpoint(const Config& cfg, const std::string& workdir) {
  if (!cfg.str("eval.checkpoint").empty())
    return under(workdir, cfg.str("eval.checkpoint"));
  const std::string root = under(workdir, cfg.str("trainer.checkpoint_dir"));
  const int last = latest_complete_stage(root, 64);
  if (last < 0)
    throw std::runtime_error("no stage checkpoint under " + root +
                             "; run schedule/pretrain first or set eval.checkpoint");
  return (fs::path(root) / ("stage" + std::to_string(last)) /
          ("encoder" + cfg.str("eval.modality")))
      .string();
}

struct EvalData {
  FeatureTable train, test;
};

EvalData features_for(const Config& cfg, EncoderStack& enc) {
  const Corpus corpus = generate_corpus(corpus_spec_from(cfg));
  TrainerOptions opts = trainer_options_from(cfg);
  Trainer holder(corpus, opts); // reuse its cached two-modality tensors
  const int modality = static_cast<int>(cfg.i64("eval.modality"));
  EvalData data;
  data.train = extract_features(enc, holder.modality_train(modality),
                                holder.train_labels(), holder.train_clip_ids());
  data.test = extract_features(enc, holder.modality_test(modality),
                               holder.test_labels(), holder.test_clip_ids());
  return data;
}

int cmd_gen_data(const Config& cfg, const std::string& workdir) {
  const Corpus corpus = generate_corpus(corpus_spec_from(cfg));
  const std::string dir = under(workdir, "corpus");
  export_corpus(corpus, dir);
  std::printf("corpus: %zu train / %zu test clips -> %s (split hash %016llx)\n",
              corpus.train.size(), corpus.test.size(), dir.c_str(),
              static_cast<unsigned long long>(corpus.split_hash()));
  return 0;
}

int run_schedule_stages(const Config& cfg, const std::string& workdir, size_t keep_stages,
                        bool resume) {
  const Corpus corpus = generate_corpus(corpus_spec_from(cfg));
  Trainer trainer(corpus, trainer_options_from(cfg));
  TrainSchedule sched = schedule_from(cfg, workdir);
  if (keep_stages < sched.stages.size()) sched.stages.resize(keep_stages);
  const ScheduleResult result = trainer.run_schedule(sched, resume);
  std::printf("ran stages %zu..%zu, %zu metric rows -> %s\n", result.first_stage_run,
              sched.stages.size() - 1, result.metrics.size(), sched.metrics_path.c_str());
  return 0;
}

int cmd_probe(const Config& cfg, const std::string& workdir) {
  EncoderStack enc = load_encoder(latest_encoder_checkpoint(cfg, workdir));
  EvalData data = features_for(cfg, enc);
  const double acc = linear_probe(data.train, data.test, cfg.index("probe.epochs"),
                                  cfg.f64("probe.lr"), cfg.u64("probe.seed"));
  json report;
  report["linear_probe"] = acc;
  if (cfg.index("finetune.epochs") > 0) {
    const Corpus corpus = generate_corpus(corpus_spec_from(cfg));
    Trainer holder(corpus, trainer_options_from(cfg));
    const int modality = static_cast<int>(cfg.i64("eval.modality"));
    report["finetune"] = finetune(enc, holder.modality_train(modality),
                                  holder.train_labels(), holder.modality_test(modality),
                                  holder.test_labels(), cfg.index("finetune.epochs"),
                                  cfg.f64("finetune.lr"), cfg.u64("finetune.seed"));
  }
  std::ofstream os(fs::path(workdir) / "probe_report.json");
  os << report.dump(2) << "\n";
  std::printf("linear_probe: %.4f\n", acc);
  if (report.contains("finetune"))
    std::printf("finetune: %.4f\n", report["finetune"].get<double>());
  return 0;
}

std::vector<size_t> parse_ks(const std::string& csv) {
  std::vector<size_t> ks;
  std::stringstream ss(csv);
  std::string item;
  while (std::getline(ss, item, ',')) ks.push_back(std::stoul(item));
  if (ks.empty()) throw std::invalid_argument("retrieve.ks: empty list");
  return ks;
}

int cmd_retrieve(const Config& cfg, const std::string& workdir) {
  EncoderStack enc = load_encoder(latest_encoder_checkpoint(cfg, workdir));
  EvalData data = features_for(cfg, enc);
  const RetrievalReport rep =
      knn_retrieval(data.train, data.test, parse_ks(cfg.str("retrieve.ks")));
  json report;
  for (const auto& [k, r] : rep.r_at) report["retrieval"]["R@" + std::to_string(k)] = r;
  std::ofstream os(fs::path(workdir) / "retrieval_report.json");
  os << report.dump(2) << "\n";
  for (const auto& [k, r] : rep.r_at) std::printf("R@%zu: %.4f\n", k, r);
  return 0;
}

int cmd_gradcheck(const Config& cfg, const std::string& workdir) {
  const double tol = cfg.f64("gradcheck.tolerance");
  const auto report = gradcheck_all(cfg.u64("gradcheck.seed"));
  json j;
  j["tolerance"] = tol;
  bool ok = true;
  for (const GradCheckEntry& e : report) {
    const bool pass = e.max_rel_err < tol;
    ok = ok && pass;
    std::printf("%-22s max_rel_err=%.3e %s\n", e.component.c_str(), e.max_rel_err,
                pass ? "ok" : "FAIL");
    j["components"].push_back(
        {{"component", e.component}, {"max_rel_err", e.max_rel_err}, {"pass", pass}});
  }
  j["pass"] = ok;
  std::ofstream os(fs::path(workdir) / "gradcheck_report.json");
  os << j.dump(2) << "\n";
  return ok ? 0 : 1;
}

int cmd_compare_operators(const Config& cfg, const std::string& workdir) {
  const Corpus corpus = generate_corpus(corpus_spec_from(cfg));
  const std::string out_path = under(workdir, cfg.str("compare.output"));
  std::ofstream os(out_path);
  if (!os) throw std::runtime_error("cannot open " + out_path);
  os << "operator,seed,split_hash,probe_acc,retrieval_r1\n";
  os.flush();

  const MixOperator ops[] = {MixOperator::None, MixOperator::Mixup,
                             MixOperator::TemporalCutmix, MixOperator::StCutmix,
                             MixOperator::VideoMix};
  const size_t seeds = cfg.index("compare.seeds");
  const uint64_t master = cfg.u64("trainer.master_seed");
  char split_hash[32];
  std::snprintf(split_hash, sizeof(split_hash), "%016llx",
                static_cast<unsigned long long>(corpus.split_hash()));

  for (const MixOperator op : ops) {
    for (size_t s = 0; s < seeds; ++s) {
      TrainerOptions opts = trainer_options_from(cfg);
      opts.model_seed = mix_seed(opts.model_seed, s);
      Trainer trainer(corpus, opts);
      StageConfig stage;
      stage.kind = StageKind::MixupPretrain;
      stage.trained_modality = 1;
      stage.epochs = cfg.index("compare.epochs");
      stage.batch_size = cfg.index("trainer.batch_size");
      stage.op = op;
      stage.alpha = cfg.f64("trainer.alpha");
      stage.seed = mix_seed(master, 0xC0AB, s); // same across operators
      trainer.run_stage(stage, 0);

      FeatureTable gallery =
          extract_features(trainer.encoder(1), trainer.modality_train(1),
                           trainer.train_labels(), trainer.train_clip_ids());
      FeatureTable queries =
          extract_features(trainer.encoder(1), trainer.modality_test(1),
                           trainer.test_labels(), trainer.test_clip_ids());
      const double acc = linear_probe(gallery, queries, cfg.index("probe.epochs"),
                                      cfg.f64("probe.lr"), cfg.u64("probe.seed"));
      const double r1 = knn_retrieval(gallery, queries, {1}).r_at.at(1);
      os << mix_operator_name(op) << "," << s << "," << split_hash << ","
         << acc << "," << r1 << "\n";
      os.flush(); // keep partial results on failure
      std::printf("%-9s seed %zu: probe %.4f, R@1 %.4f\n", mix_operator_name(op), s, acc,
                  r1);
      std::fflush(stdout);
    }
  }
  return 0;
}

} // namespace

int run_command(const std::string& command, const Config& cfg,
                const std::string& workdir) {
  fs::create_directories(workdir);
  write_manifest(workdir, command, cfg);
  if (command == "gen-data") return cmd_gen_data(cfg, workdir);
  if (command == "pretrain") return run_schedule_stages(cfg, workdir, 2, false);
  if (command == "cmmc")
    return run_schedule_stages(cfg, workdir, cfg.index("trainer.stages"), true);
  if (command == "schedule")
    return run_schedule_stages(cfg, workdir, cfg.index("trainer.stages"),
                               cfg.flag("schedule.resume"));
  if (command == "probe") return cmd_probe(cfg, workdir);
  if (command == "retrieve") return cmd_retrieve(cfg, workdir);
  if (command == "gradcheck") return cmd_gradcheck(cfg, workdir);
  if (command == "compare-operators") return cmd_compare_operators(cfg, workdir);
  throw std::invalid_argument("unknown command: " + command);
}

} // namespace stcmix
