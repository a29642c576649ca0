// SPDX-License-Identifier: Apache-2.0

#include <cstdlib>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "stcmix/commands.hpp"
#include "stcmix/config.hpp"

int main(int argc, char** argv) {
  CLI::App app{"stcmix: self-supervised video representation lab with cross-modal "
               "feature mixing"};
  app.require_subcommand(1);
  app.set_version_flag("--version", std::string(stcmix::build_id()));

  const std::vector<std::string> commands = {"gen-data", "pretrain",  "cmmc",
                                             "schedule", "probe",     "retrieve",
                                             "gradcheck", "compare-operators"};
  struct SubArgs {
    std::string config_path;
    std::vector<std::string> sets;
    std::string workdir = ".";
  };
  std::vector<SubArgs> args(commands.size());
  for (size_t i = 0; i < commands.size(); ++i) {
    CLI::App* sub = app.add_subcommand(commands[i]);
    sub->add_option("--config", args[i].config_path, "config file (key = value or JSON)");
    sub->add_option("--set", args[i].sets, "override, key=value (repeatable)");
    sub->add_option("--workdir", args[i].workdir, "directory for inputs and outputs");
  }

  CLI11_PARSE(app, argc, argv);

  try {
    for (size_t i = 0; i < commands.size(); ++i) {
      CLI::App* sub = app.get_subcommand(commands[i]);
      if (!sub->parsed()) continue;
      stcmix::Config cfg = stcmix::Config::defaults();
      if (!args[i].config_path.empty()) cfg.load_file(args[i].config_path);
      for (const std::string& kv : args[i].sets) cfg.set_kv(kv);
      if (const char* env_seed = std::getenv("STCMIX_SEED"))
        cfg.set("trainer.master_seed", env_seed);
      return stcmix::run_command(commands[i], cfg, args[i].workdir);
    }
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 1;
}
