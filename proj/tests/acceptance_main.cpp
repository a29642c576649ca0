// SPDX-License-Identifier: Apache-2.0
//
// Acceptance suite: one self-contained check per criterion, each printing a
// single PASS/FAIL line. Criteria that specify a CLI surface spawn the real
// binary; the rest drive the library directly.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "stcmix/contrastive.hpp"
#include "stcmix/evalkit.hpp"
#include "stcmix/mixing.hpp"
#include "stcmix/trainer.hpp"

#ifndef STCMIX_CLI_PATH
#define STCMIX_CLI_PATH "stcmix"
#endif

namespace fs = std::filesystem;
using json = nlohmann::json;
using namespace stcmix;

namespace {

struct CheckFailure : std::runtime_error {
  using std::runtime_error::runtime_error;
};

void require(bool ok, const std::string& what) {
  if (!ok) throw CheckFailure(what);
}

fs::path scratch_root() {
  static fs::path root = [] {
    fs::path p = fs::temp_directory_path() /
                 ("stcmix_acceptance_" + std::to_string(::getpid()));
    fs::create_directories(p);
    return p;
  }();
  return root;
}

int run_cli(const std::string& args, const fs::path& log) {
  const std::string cmd =
      std::string(STCMIX_CLI_PATH) + " " + args + " > " + log.string() + " 2>&1";
  return std::system(cmd.c_str());
}

std::vector<std::string> read_lines(const fs::path& path) {
  std::ifstream is(path);
  require(static_cast<bool>(is), "cannot open " + path.string());
  std::vector<std::string> lines;
  std::string line;
  while (std::getline(is, line)) lines.push_back(line);
  return lines;
}

// CSV rows with the wall-clock column dropped; everything else is compared
// as exact text (floats are printed with %.17g, so text equality is value
// equality).
std::vector<std::string> metrics_without_seconds(const fs::path& csv) {
  std::vector<std::string> out;
  for (const std::string& line : read_lines(csv)) {
    const size_t cut = line.rfind(',');
    require(cut != std::string::npos, "malformed metrics row: " + line);
    out.push_back(line.substr(0, cut));
  }
  return out;
}

double median(std::vector<double> v) {
  std::sort(v.begin(), v.end());
  return v[v.size() / 2];
}

// ---- criterion 1: gradient oracle through the CLI ----

void criterion_gradcheck() {
  const fs::path dir = scratch_root() / "c1";
  fs::create_directories(dir);
  const auto t0 = std::chrono::steady_clock::now();
  const int rc = run_cli("gradcheck --workdir " + dir.string(), dir / "out.log");
  const double secs =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  require(rc == 0, "gradcheck exited with code " + std::to_string(rc));
  require(secs < 60.0, "gradcheck took " + std::to_string(secs) + " s (budget 60)");

  std::ifstream is(dir / "gradcheck_report.json");
  require(static_cast<bool>(is), "gradcheck_report.json missing");
  const json report = json::parse(is);
  require(report.at("pass").get<bool>(), "report marks failure");
  const auto& comps = report.at("components");
  require(comps.size() >= 8, "fewer than 8 components reported");
  std::set<std::string> names;
  for (const auto& c : comps) {
    names.insert(c.at("component").get<std::string>());
    require(c.at("max_rel_err").get<double>() < 1e-4,
            c.at("component").get<std::string>() + " above tolerance");
  }
  for (const char* needed :
       {"conv3d", "relu", "spatial-temporal-pool", "flatten", "linear", "l2norm-head",
        "info_nce", "imix_loss", "cmmc_backward_path"})
    require(names.count(needed) == 1, std::string("missing component ") + needed);
  std::printf("  gradcheck: %zu components < 1e-4 in %.1f s\n", names.size(), secs);
}

// ---- criterion 2: mask-volume oracle ----

void criterion_mask_volume() {
  Rng rng(220);
  for (int trial = 0; trial < 10000; ++trial) {
    const size_t c1 = 1 + rng.uniform_index(5), t1 = 1 + rng.uniform_index(4);
    const size_t h1 = 1 + rng.uniform_index(7), w1 = 1 + rng.uniform_index(7);
    const size_t c2 = 1 + rng.uniform_index(6), t2 = 1 + rng.uniform_index(5);
    const size_t h2 = 1 + rng.uniform_index(8), w2 = 1 + rng.uniform_index(8);
    const Tensor g1 = Tensor::full({2, c1, t1, h1, w1}, 1.0);
    const Tensor g2 = Tensor::full({2, c2, t2, h2, w2}, 0.0);
    const MixOutcome mo = cmmc_mix(g1, g2, 1.0, rng);
    const size_t sample = g1.size() / 2;
    for (size_t b = 0; b < 2; ++b) {
      long long zeros = 0;
      double sum = 0.0;
      for (size_t j = 0; j < sample; ++j) {
        const double v = mo.mixed[b * sample + j];
        if (v == 0.0) ++zeros;
        sum += v;
      }
      const double lambda_counted =
          static_cast<double>(static_cast<long long>(sample) - zeros) /
          static_cast<double>(sample);
      require(mo.lambdas[b] == lambda_counted, "lambda != brute-force count");
      require(sum / static_cast<double>(sample) == mo.lambdas[b],
              "mean(mixed) != lambda exactly");
    }
  }
  std::printf("  10000 randomized cmmc calls: mean(mixed) == lambda exactly\n");
}

// ---- criterion 3: identity degenerations ----

void criterion_identity() {
  Rng rng(33);
  Tensor x = Tensor::uniform({4, 3, 6, 8, 8}, rng);

  require(mixup_batch(x, 1.0, rng, 1.0).mixed.bitwise_equal(x), "mixup lambda=1");
  require(temporal_cutmix(x, 1.0, rng, 1.0).mixed.bitwise_equal(x), "t_cutmix lambda=1");
  require(st_cutmix(x, 1.0, rng, 1.0).mixed.bitwise_equal(x), "st_cutmix lambda=1");
  require(videomix(x, 1.0, rng, 1.0).mixed.bitwise_equal(x), "videomix lambda=1");

  const MixOutcome swap = mixup_batch(x, 1.0, rng, 0.0);
  const size_t sample = x.size() / 4;
  for (size_t i = 0; i < 4; ++i)
    for (size_t j = 0; j < sample; ++j)
      require(swap.mixed[i * sample + j] == x[swap.partner[i] * sample + j],
              "mixup lambda=0 is not a full partner swap");

  // empty clipped boxes: (identity, lambda = 1) for the whole cutmix family
  MaskBox empty;
  empty.lo = {0, 2, 3, 3};
  empty.hi = {0, 2, 3, 3};
  const std::vector<size_t> partner = {1, 0, 3, 2};
  for (const MixOutcome& mo :
       {temporal_cutmix_apply(x, partner, 3, 0), st_cutmix_apply(x, partner, empty),
        videomix_apply(x, partner, empty)}) {
    require(mo.mixed.bitwise_equal(x), "empty box is not the identity");
    require(mo.lambda() == 1.0, "empty box lambda != 1");
  }
  const Tensor g2 = Tensor::randn({4, 3, 6, 8, 8}, rng);
  const MixOutcome cm = cmmc_mix(x, g2, 1.0, rng, 1.0);
  require(cm.mixed.bitwise_equal(x), "cmmc with empty box is not the identity");
  require(cm.lambda() == 1.0, "cmmc empty box lambda != 1");
  std::printf("  lambda=1 identity, lambda=0 swap, empty boxes degrade cleanly\n");
}

// ---- criterion 4: freeze / detach contracts ----

void criterion_freeze_detach() {
  CorpusSpec spec;
  spec.clips_per_class = 4;
  spec.frames = 4;
  spec.height = 8;
  spec.width = 8;
  spec.seed = 44;
  const Corpus corpus = generate_corpus(spec);
  TrainerOptions opts;
  opts.base_channels = 4;
  opts.embed_dim = 16;
  opts.queue_capacity = 32;
  Trainer trainer(corpus, opts);

  const TrainSchedule sched =
      default_schedule(404, 1, 1, 8, MixOperator::Mixup, 1.0, "", "");
  for (size_t i = 2; i < 6; ++i) { // the four cmmc stages
    const StageConfig& st = sched.stages[i];
    EncoderStack& frozen_enc = trainer.encoder(*st.frozen_modality);
    frozen_enc.zero_grads();
    const uint64_t frozen_before = frozen_enc.param_digest();
    trainer.run_stage(st, i);
    require(frozen_enc.param_digest() == frozen_before,
            "frozen encoder changed in stage " + std::to_string(i));
    for (Tensor* g : frozen_enc.gradients())
      for (size_t j = 0; j < g->size(); ++j)
        require((*g)[j] == 0.0, "frozen encoder accumulated gradient");
    const EncoderStack* key = trainer.last_key_encoder();
    require(key != nullptr, "no key encoder recorded");
    for (Tensor* g : const_cast<EncoderStack*>(key)->gradients())
      for (size_t j = 0; j < g->size(); ++j)
        require((*g)[j] == 0.0, "key encoder accumulated gradient");
  }

  // queue entries are inert values: a loss evaluation never mutates them
  Rng rng(45);
  MoCoQueue queue(16);
  queue.enqueue(l2_normalize(Tensor::randn({8, 16}, rng)));
  const Tensor before = queue.as_matrix();
  const Tensor z = l2_normalize(Tensor::randn({4, 16}, rng));
  const Tensor zk = l2_normalize(Tensor::randn({4, 16}, rng));
  imix_loss(z, zk, queue, 0.07, {1, 0, 3, 2}, 0.5);
  require(queue.as_matrix().bitwise_equal(before), "queue mutated by the loss");
  std::printf("  4 cmmc stages: frozen weights bitwise stable, key/queue grads zero\n");
}

// ---- criterion 5: loss calibration ----

void criterion_loss_calibration() {
  const size_t b = 6, q_size = 64, d = 128;
  auto basis = [&](size_t rows, size_t offset) {
    Tensor t({rows, d});
    for (size_t i = 0; i < rows; ++i) t[i * d + offset + i] = 1.0;
    return t;
  };
  MoCoQueue queue(q_size);
  queue.enqueue(basis(q_size, 2 * b));
  const ContrastiveResult res = info_nce(basis(b, 0), basis(b, b), queue, 0.07);
  const double expect = std::log(static_cast<double>(q_size + 1));
  require(std::abs(res.loss - expect) <= 0.02 * expect,
          "orthogonal-embedding loss deviates from ln(Q+1)");

  Rng rng(55);
  const Tensor z = l2_normalize(Tensor::randn({5, 16}, rng));
  MoCoQueue empty(8);
  require(info_nce(z, z, empty, 0.07).loss == 0.0,
          "identical query/key with empty queue must give exactly zero loss");
  std::printf("  ln(Q+1) calibration within 2%%; exact zero for identical pairs\n");
}

// ---- criterion 6: determinism & resumability through the CLI ----

void criterion_determinism() {
  const fs::path dir = scratch_root() / "c6";
  fs::create_directories(dir);
  const std::string overrides =
      " --set trainer.epochs_mixup=3 --set trainer.epochs_cmmc=2"
      " --set data.clips_per_class=12";

  require(run_cli("schedule --workdir " + (dir / "run_a").string() + overrides,
                  dir / "a.log") == 0,
          "schedule run A failed");
  require(run_cli("schedule --workdir " + (dir / "run_b").string() + overrides,
                  dir / "b.log") == 0,
          "schedule run B failed");
  const auto rows_a = metrics_without_seconds(dir / "run_a" / "metrics.csv");
  const auto rows_b = metrics_without_seconds(dir / "run_b" / "metrics.csv");
  require(rows_a == rows_b, "two identically seeded runs differ");
  require(rows_a.size() == 1 + 2 * 3 + 4 * 2, "unexpected metrics row count");

  // interrupt after the third stage, then resume in place
  require(run_cli("schedule --workdir " + (dir / "run_c").string() + overrides +
                      " --set trainer.stages=3",
                  dir / "c.log") == 0,
          "interrupted run failed");
  require(run_cli("schedule --workdir " + (dir / "run_c").string() + overrides +
                      " --set schedule.resume=true",
                  dir / "c2.log") == 0,
          "resumed run failed");
  const auto rows_c = metrics_without_seconds(dir / "run_c" / "metrics.csv");
  require(rows_c == rows_a, "resumed trace differs from the uninterrupted one");
  std::printf("  bitwise-identical metrics across runs and across an interrupt/resume\n");
}

// ---- criterion 7: directional operator comparison through the CLI ----

void criterion_compare_operators() {
  const fs::path dir = scratch_root() / "c7";
  fs::create_directories(dir);
  const auto t0 = std::chrono::steady_clock::now();
  require(run_cli("compare-operators --workdir " + dir.string(), dir / "out.log") == 0,
          "compare-operators failed");
  const double secs =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  require(secs < 1800.0, "compare-operators took " + std::to_string(secs) + " s");

  const auto lines = read_lines(dir / "compare_operators.csv");
  require(lines.size() >= 2, "empty comparison CSV");
  require(lines[0] == "operator,seed,split_hash,probe_acc,retrieval_r1",
          "unexpected CSV header");
  std::map<std::string, std::vector<double>> probe;
  std::set<std::string> hashes;
  size_t rows = 0;
  for (size_t i = 1; i < lines.size(); ++i) {
    std::stringstream ss(lines[i]);
    std::string op, seed, hash, acc, r1;
    std::getline(ss, op, ',');
    std::getline(ss, seed, ',');
    std::getline(ss, hash, ',');
    std::getline(ss, acc, ',');
    std::getline(ss, r1, ',');
    probe[op].push_back(std::stod(acc));
    hashes.insert(hash);
    ++rows;
  }
  const size_t seeds = probe.begin()->second.size();
  require(rows == 5 * seeds, "expected 5 operators x seeds rows");
  require(hashes.size() == 1, "data split differs across runs");

  const double mixup_med = median(probe.at("mixup"));
  const double nomix_med = median(probe.at("none"));
  const double st_med = median(probe.at("st_cutmix"));
  std::printf("  medians: mixup %.4f, none %.4f, st_cutmix %.4f (%.0f s)\n", mixup_med,
              nomix_med, st_med, secs);
  require(mixup_med >= nomix_med, "mixup median below the no-mix baseline");
  require(mixup_med >= st_med, "mixup median below st_cutmix");
}

// ---- criterion 8: cross-modal benefit ----

void criterion_cross_modal() {
  CorpusSpec spec;
  spec.clips_per_class = 24; // 144 train / 48 test
  spec.seed = 7;
  const Corpus corpus = generate_corpus(spec);

  const size_t epochs_mixup = 12, epochs_cmmc = 5;
  const size_t budget = epochs_mixup + 2 * epochs_cmmc; // modality-1 epochs
  std::vector<double> cmmc_acc, mixup_acc, cmmc_r1, mixup_r1;

  for (uint64_t seed : {1ull, 2ull, 3ull}) {
    auto evaluate = [&](Trainer& tr) {
      FeatureTable train_t =
          extract_features(tr.encoder(1), tr.modality_train(1), tr.train_labels(),
                           tr.train_clip_ids());
      FeatureTable test_t =
          extract_features(tr.encoder(1), tr.modality_test(1), tr.test_labels(),
                           tr.test_clip_ids());
      const double acc = linear_probe(train_t, test_t, 100, 0.1, 123);
      const double r1 = knn_retrieval(train_t, test_t, {1}).r_at.at(1);
      return std::make_pair(acc, r1);
    };

    TrainerOptions opts;
    opts.model_seed = seed;

    // arm A: mixup pretrain of both modalities, then the 4-stage alternation
    {
      Trainer tr(corpus, opts);
      TrainSchedule sched = default_schedule(9000 + seed, epochs_mixup, epochs_cmmc, 16,
                                             MixOperator::Mixup, 1.0, "", "");
      tr.run_schedule(sched);
      const auto [acc, r1] = evaluate(tr);
      cmmc_acc.push_back(acc);
      cmmc_r1.push_back(r1);
    }
    // arm B: mixup only, same modality-1 epoch budget
    {
      Trainer tr(corpus, opts);
      TrainSchedule sched = default_schedule(9000 + seed, budget, 0, 16,
                                             MixOperator::Mixup, 1.0, "", "");
      sched.stages.resize(1); // modality 1 only
      tr.run_schedule(sched);
      const auto [acc, r1] = evaluate(tr);
      mixup_acc.push_back(acc);
      mixup_r1.push_back(r1);
    }
  }
  std::printf("  medians: mixup+cmmc %.4f (R@1 %.4f) vs mixup-only %.4f (R@1 %.4f)\n",
              median(cmmc_acc), median(cmmc_r1), median(mixup_acc), median(mixup_r1));
  require(median(cmmc_acc) >= median(mixup_acc),
          "cmmc arm below the mixup-only arm");
  require(median(cmmc_r1) >= 0.25, "cmmc arm R@1 below twice chance");
  require(median(mixup_r1) >= 0.25, "mixup arm R@1 below twice chance");
}

// ---- criterion 9: retrieval against the brute-force oracle ----

void criterion_retrieval_oracle() {
  Rng rng(99);
  for (int instance = 0; instance < 50; ++instance) {
    const size_t g = 2 + rng.uniform_index(31); // <= 32 gallery items
    const size_t q = 1 + rng.uniform_index(8);
    const size_t d = 2 + rng.uniform_index(6);
    const size_t classes = 1 + rng.uniform_index(4);

    FeatureTable gallery, queries;
    gallery.features = Tensor::randn({g, d}, rng);
    queries.features = Tensor::randn({q, d}, rng);
    for (size_t i = 0; i < g; ++i) {
      gallery.labels.push_back(rng.uniform_index(classes));
      gallery.clip_ids.push_back(1000 - i); // non-monotone ids exercise tie-breaks
    }
    for (size_t i = 0; i < q; ++i) {
      queries.labels.push_back(rng.uniform_index(classes));
      queries.clip_ids.push_back(i);
    }
    std::vector<size_t> ks;
    for (size_t k = 1; k <= g; k += 1 + rng.uniform_index(4)) ks.push_back(k);

    const RetrievalReport rep = knn_retrieval(gallery, queries, ks);

    // oracle: literal definition on fully sorted similarity lists
    const Tensor gal = l2_normalize(gallery.features);
    const Tensor qry = l2_normalize(queries.features);
    for (const size_t k : ks) {
      size_t hits = 0;
      for (size_t i = 0; i < q; ++i) {
        std::vector<std::pair<double, size_t>> order;
        for (size_t j = 0; j < g; ++j) {
          double dot = 0.0;
          for (size_t t = 0; t < d; ++t) dot += qry[i * d + t] * gal[j * d + t];
          order.push_back({dot, j});
        }
        std::sort(order.begin(), order.end(), [&](const auto& a, const auto& b) {
          if (a.first != b.first) return a.first > b.first;
          return gallery.clip_ids[a.second] < gallery.clip_ids[b.second];
        });
        bool hit = false;
        for (size_t j = 0; j < k; ++j)
          hit = hit || gallery.labels[order[j].second] == queries.labels[i];
        if (hit) ++hits;
      }
      require(rep.r_at.at(k) == static_cast<double>(hits) / static_cast<double>(q),
              "report differs from the enumeration oracle");
    }
    // monotonicity of every report
    double prev = 0.0;
    for (const auto& [k, r] : rep.r_at) {
      require(r >= prev, "R@k not monotone in k");
      prev = r;
    }
  }
  std::printf("  50 random instances match the enumeration oracle exactly\n");
}

struct Criterion {
  int id;
  const char* name;
  std::function<void()> run;
};

} // namespace

int main(int argc, char** argv) {
  int only = 0;
  for (int i = 1; i + 1 < argc + 1; ++i) {
    if (std::string(argv[i]) == "--criterion" && i + 1 < argc) only = std::atoi(argv[i + 1]);
  }

  const std::vector<Criterion> criteria = {
      {1, "gradient oracle (gradcheck CLI, < 60 s)", criterion_gradcheck},
      {2, "cmmc mask-volume oracle, exact", criterion_mask_volume},
      {3, "identity degenerations", criterion_identity},
      {4, "freeze/detach contracts", criterion_freeze_detach},
      {5, "loss calibration", criterion_loss_calibration},
      {6, "determinism & resumability", criterion_determinism},
      {7, "directional operator comparison", criterion_compare_operators},
      {8, "cross-modal benefit", criterion_cross_modal},
      {9, "retrieval correctness", criterion_retrieval_oracle},
  };

  int failures = 0;
  for (const Criterion& c : criteria) {
    if (only != 0 && c.id != only) continue;
    try {
      c.run();
      std::printf("[PASS] criterion %d: %s\n", c.id, c.name);
    } catch (const std::exception& e) {
      ++failures;
      std::printf("[FAIL] criterion %d: %s: %s\n", c.id, c.name, e.what());
    }
    std::fflush(stdout);
  }
  return failures == 0 ? 0 : 1;
}
