#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

#include "pevfa/envs.hpp"
#include "pevfa/rl_core.hpp"
#include "pevfa/theory_lab.hpp"

namespace pevfa::harness {

using ad::Tensor;

inline constexpr const char* kToolVersion = "0.1.0";

class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// key -> value, kept sorted so equal configs serialize identically.
using ConfigEntries = std::map<std::string, std::string>;

/// `key = value` lines; `#` starts a comment; blank lines ignored. Duplicate keys and
/// lines without '=' are errors reported as "<source>:<line>: ...".
ConfigEntries parse_config(std::istream& is, const std::string& source = "config");
ConfigEntries read_config_file(const std::filesystem::path& path);
void write_config(std::ostream& os, const ConfigEntries& entries);

/// FNV-1a over the sorted "key=value" lines, as 16 hex digits.
std::string config_hash(const ConfigEntries& entries);

/// "3", "0..9" (inclusive) or "1,4,7".
std::vector<std::uint64_t> parse_seeds(const std::string& text);

enum class ExperimentKind { GlobalGen, LocalGen, Train, TheoryCheck };
const char* experiment_name(ExperimentKind kind);
ExperimentKind parse_experiment(const std::string& name);

struct GlobalGenConfig {
  std::size_t policies = 2000;
  int trajectories = 20;
  int horizon = 10;
  double init_range = 0.0;
  double gamma = 0.99;
  double lr = 0.005;
  std::size_t batch = 256;
  int epochs = 20;
  int trials = 6;
  double test_fraction = 0.2;
  std::size_t stream = 64;
  std::vector<std::size_t> trunk{128};

  void validate() const;
};

struct TheoryCheckConfig {
  int mdps = 10;
  theory::TabularGpiConfig gpi;
};

struct ExperimentConfig {
  ExperimentKind kind = ExperimentKind::Train;
  envs::EnvConfig env;
  rl::TrainConfig train;
  GlobalGenConfig global;
  TheoryCheckConfig theory;
  std::vector<std::uint64_t> seeds{0};
  std::string out_dir = "out";
  /// The effective entries the config was built from; hashed into the manifest.
  ConfigEntries entries;

  void validate() const;
};

/// Builds a config from entries. Unknown keys are rejected by name; the
/// `experiment` key selects the preset whose defaults the other keys override.
ExperimentConfig make_experiment_config(const ConfigEntries& entries);

/// Every key make_experiment_config accepts.
std::vector<std::string> known_keys();

// ---------------------------------------------------------------------------
// Artifacts

struct ArtifactFile {
  std::string role;  // train-log, theory-log, comparison-log, generalization-log, summary,
                     // embeddings, checkpoints, config
  std::string path;  // relative to the output directory
};

struct ArtifactManifest {
  std::string run_id;
  std::string config_hash;
  std::string tool_version = kToolVersion;
  std::vector<ArtifactFile> files;

  std::size_t count(const std::string& role) const;
};

void write_manifest(std::ostream& os, const ArtifactManifest& manifest);
ArtifactManifest read_manifest(std::istream& is);

// ---------------------------------------------------------------------------
// Global generalization: a PeVFA with RPR fitted on synthetic walker policies

struct GenEpoch {
  int trial = 0;
  int epoch = 0;  // 0 is the untrained network
  double train_loss = 0.0;
  double test_loss = 0.0;
};

struct GlobalGenData {
  Tensor states;                   // all visited states
  std::vector<double> returns;     // MC return per state
  std::vector<std::size_t> owner;  // policy index per state
  Tensor embeddings;               // policies x 26 (RPR)
};

GlobalGenData make_global_gen_data(const GlobalGenConfig& config, std::uint64_t seed);

/// One trial: reshuffle the 8:2 split, train, and log both losses per epoch.
std::vector<GenEpoch> global_gen_trial(const GlobalGenConfig& config, const GlobalGenData& data,
                                       std::uint64_t seed, int trial);

/// trial,epoch,train_loss,test_loss
void write_generalization_csv(std::ostream& os, const std::vector<GenEpoch>& rows);

// ---------------------------------------------------------------------------
// Local generalization: PPO with a shadow RPR PeVFA

struct LocalGenRun {
  rl::RunResult run;
  std::vector<theory::LossRecord> theory;
};

LocalGenRun local_gen_run(const ExperimentConfig& config, std::uint64_t seed);

/// Theory records from the logged losses with MC-return targets: f = sqrt(MSE),
/// d from consecutive policies on the iteration's probe states. Value gaps between
/// policies are not observable from on-policy returns, so Theorem 1 rows are marked
/// unavailable.
std::vector<theory::LossRecord> local_gen_theory(const rl::RunResult& run,
                                                 std::size_t steps_per_iteration);

/// iteration,avg_return,vfa_loss_pre,vfa_loss_post,pevfa_loss_pre,pevfa_loss_post
void write_comparison_csv(std::ostream& os, const std::vector<rl::IterationLog>& logs);

// ---------------------------------------------------------------------------
// Entry points

/// Runs the preset for every seed (up to PEVFA_LAB_THREADS at once), writes the CSVs,
/// config.txt and manifest.txt under config.out_dir, and returns the manifest.
ArtifactManifest run_experiment(const ExperimentConfig& config);

/// Parses the file, applies `overrides` on top, and runs it.
ArtifactManifest run_experiment(const std::filesystem::path& config_path,
                                const ConfigEntries& overrides = {});

/// Re-encodes every stored policy record under run_dir/seed_*/checkpoints with that
/// seed's final encoder and writes run_dir/embeddings.csv.
std::filesystem::path dump_embeddings(const std::filesystem::path& run_dir);

/// PEVFA_LAB_THREADS, default 1.
int thread_cap();

}  // namespace pevfa::harness
