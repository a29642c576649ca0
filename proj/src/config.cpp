// SPDX-License-Identifier: Apache-2.0

#include "stcmix/config.hpp"

#include <fstream>
#include <sstream>
#include <stdexcept>

#include <nlohmann/json.hpp>

namespace stcmix {

using json = nlohmann::json;

Config Config::defaults() {
  Config cfg;
  auto& v = cfg.values_;
  // synthetic corpus
  v["data.classes"] = "8";
  v["data.clips_per_class"] = "40";
  v["data.frames"] = "8";
  v["data.height"] = "16";
  v["data.width"] = "16";
  v["data.noise"] = "0.02";
  v["data.seed"] = "7";
  v["data.train_fraction"] = "0.75";
  // encoders
  v["model.base_channels"] = "8";
  v["model.embed_dim"] = "64";
  v["model.seed"] = "1";
  // contrastive loss
  v["loss.tau"] = "0.07";
  v["loss.ema_momentum"] = "0.99";
  v["loss.queue_capacity"] = "256";
  // optimizer
  v["opt.kind"] = "adam";
  v["opt.lr"] = "0.001";
  v["opt.weight_decay"] = "1e-5";
  v["opt.momentum"] = "0.9";
  // view augmentation
  v["augment.max_shift"] = "2";
  v["augment.flip_prob"] = "0.5";
  v["augment.jitter"] = "0.2";
  // training
  v["trainer.master_seed"] = "42";
  v["trainer.batch_size"] = "16";
  v["trainer.epochs_mixup"] = "30";
  v["trainer.epochs_cmmc"] = "10";
  v["trainer.operator"] = "mixup";
  v["trainer.alpha"] = "1.0";
  v["trainer.stages"] = "6";
  v["trainer.metrics"] = "metrics.csv";
  v["trainer.checkpoint_dir"] = "checkpoints";
  v["schedule.resume"] = "false";
  // evaluation
  v["probe.epochs"] = "100";
  v["probe.lr"] = "0.1";
  v["probe.seed"] = "123";
  v["finetune.epochs"] = "0";
  v["finetune.lr"] = "0.01";
  v["finetune.seed"] = "321";
  v["eval.checkpoint"] = "";
  v["eval.modality"] = "1";
  v["retrieve.ks"] = "1,5,10,20";
  // verification harness
  v["gradcheck.tolerance"] = "1e-4";
  v["gradcheck.seed"] = "99";
  // operator comparison experiment
  v["compare.seeds"] = "3";
  v["compare.epochs"] = "10";
  v["compare.output"] = "compare_operators.csv";
  return cfg;
}

void Config::set(const std::string& key, const std::string& value) {
  auto it = values_.find(key);
  if (it == values_.end())
    throw std::invalid_argument("unknown config key: " + key);
  it->second = value;
}

void Config::set_kv(const std::string& key_equals_value) {
  const size_t eq = key_equals_value.find('=');
  if (eq == std::string::npos)
    throw std::invalid_argument("expected key=value, got: " + key_equals_value);
  auto trim = [](std::string s) {
    const auto a = s.find_first_not_of(" \t");
    const auto b = s.find_last_not_of(" \t");
    return a == std::string::npos ? std::string() : s.substr(a, b - a + 1);
  };
  set(trim(key_equals_value.substr(0, eq)), trim(key_equals_value.substr(eq + 1)));
}

void Config::load_file(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw std::runtime_error("config: cannot open " + path);
  if (path.size() > 5 && path.substr(path.size() - 5) == ".json") {
    json j = json::parse(is);
    const json& obj = j.contains("config") ? j["config"] : j;
    for (auto it = obj.begin(); it != obj.end(); ++it) {
      if (it.value().is_string())
        set(it.key(), it.value().get<std::string>());
      else
        set(it.key(), it.value().dump());
    }
    return;
  }
  std::string line;
  size_t lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    const size_t hash = line.find('#');
    if (hash != std::string::npos) line = line.substr(0, hash);
    const auto a = line.find_first_not_of(" \t\r\n");
    if (a == std::string::npos) continue;
    try {
      set_kv(line);
    } catch (const std::invalid_argument& e) {
      throw std::invalid_argument(path + ":" + std::to_string(lineno) + ": " + e.what());
    }
  }
}

bool Config::has(const std::string& key) const { return values_.count(key) > 0; }

const std::string& Config::str(const std::string& key) const {
  auto it = values_.find(key);
  if (it == values_.end())
    throw std::invalid_argument("unknown config key: " + key);
  return it->second;
}

int64_t Config::i64(const std::string& key) const {
  const std::string& s = str(key);
  size_t pos = 0;
  const int64_t v = std::stoll(s, &pos);
  if (pos != s.size())
    throw std::invalid_argument("config " + key + ": not an integer: " + s);
  return v;
}

uint64_t Config::u64(const std::string& key) const {
  const std::string& s = str(key);
  size_t pos = 0;
  const uint64_t v = std::stoull(s, &pos);
  if (pos != s.size())
    throw std::invalid_argument("config " + key + ": not an unsigned integer: " + s);
  return v;
}

size_t Config::index(const std::string& key) const {
  return static_cast<size_t>(u64(key));
}

double Config::f64(const std::string& key) const {
  const std::string& s = str(key);
  size_t pos = 0;
  const double v = std::stod(s, &pos);
  if (pos != s.size())
    throw std::invalid_argument("config " + key + ": not a number: " + s);
  return v;
}

bool Config::flag(const std::string& key) const {
  const std::string& s = str(key);
  if (s == "true" || s == "1" || s == "yes" || s == "on") return true;
  if (s == "false" || s == "0" || s == "no" || s == "off") return false;
  throw std::invalid_argument("config " + key + ": not a boolean: " + s);
}

} // namespace stcmix
