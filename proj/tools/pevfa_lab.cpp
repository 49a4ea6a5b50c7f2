#include <CLI11.hpp>

#include <iostream>

#include "pevfa/autodiff.hpp"
#include "pevfa/harness.hpp"

using namespace pevfa;

namespace {

struct RunOptions {
  std::string config;
  std::string seed;
  std::string seeds;
  std::string out;
  std::string algo;
  std::string repr;
  std::string repr_loss;
  std::vector<std::string> sets;
};

void add_run_options(CLI::App* cmd, RunOptions& o) {
  cmd->add_option("--config", o.config, "config file (key = value lines)");
  cmd->add_option("--seed", o.seed, "single seed");
  cmd->add_option("--seeds", o.seeds, "seed list: N..M or a,b,c");
  cmd->add_option("--out", o.out, "output directory");
  cmd->add_option("--algo", o.algo, "ppo | ppo-pevfa");
  cmd->add_option("--repr", o.repr, "rpr | random | opr | spr");
  cmd->add_option("--repr-loss", o.repr_loss, "e2e | cl | aux");
  cmd->add_option("--set", o.sets, "extra key=value override (repeatable)");
}

harness::ConfigEntries collect(const std::string& kind, const RunOptions& o) {
  harness::ConfigEntries e;
  if (!o.config.empty()) e = harness::read_config_file(o.config);
  if (auto it = e.find("experiment"); it != e.end() && it->second != kind) {
    throw harness::ConfigError("config says experiment = " + it->second + " but the subcommand is " + kind);
  }
  e["experiment"] = kind;
  for (const auto& s : o.sets) {
    const auto eq = s.find('=');
    if (eq == std::string::npos) throw harness::ConfigError("--set expects key=value, got '" + s + "'");
    e[s.substr(0, eq)] = s.substr(eq + 1);
  }
  if (!o.seed.empty() && !o.seeds.empty()) throw harness::ConfigError("give --seed or --seeds, not both");
  if (!o.seed.empty() || !o.seeds.empty()) {
    e.erase("seed");
    e["seeds"] = o.seed.empty() ? o.seeds : o.seed;
  }
  if (!o.out.empty()) e["out"] = o.out;
  if (!o.algo.empty()) e["algo"] = o.algo;
  if (!o.repr.empty()) e["repr"] = o.repr;
  if (!o.repr_loss.empty()) e["repr_loss"] = o.repr_loss;
  return e;
}

}  // namespace

int main(int argc, char** argv) {
  ad::keep_heap_resident();
  CLI::App app{"PeVFA experiments"};
  app.set_version_flag("--version", std::string(harness::kToolVersion));
  app.require_subcommand(1);

  RunOptions opts;
  std::vector<std::pair<CLI::App*, std::string>> runs;
  for (const char* kind : {"global-gen", "local-gen", "train", "theory-check"}) {
    auto* cmd = app.add_subcommand(kind, std::string("run the ") + kind + " experiment");
    add_run_options(cmd, opts);
    runs.emplace_back(cmd, kind);
  }
  std::string run_dir;
  auto* emb = app.add_subcommand("embeddings", "re-encode stored policies of a ppo-pevfa run");
  emb->add_option("run_dir", run_dir, "output directory of the run")->required();
  bool list_keys = false;
  auto* keys = app.add_subcommand("keys", "list accepted config keys");
  keys->callback([&] { list_keys = true; });

  CLI11_PARSE(app, argc, argv);

  try {
    if (list_keys) {
      for (const auto& k : harness::known_keys()) std::cout << k << '\n';
      return 0;
    }
    if (*emb) {
      std::cout << harness::dump_embeddings(run_dir).string() << '\n';
      return 0;
    }
    for (const auto& [cmd, kind] : runs) {
      if (!*cmd) continue;
      const auto m = harness::run_experiment(harness::make_experiment_config(collect(kind, opts)));
      std::cout << m.run_id << ": " << m.files.size() << " files\n";
    }
    return 0;
  } catch (const std::exception& e) {
    std::cerr << "pevfa-lab: " << e.what() << '\n';
    return 1;
  }
}
