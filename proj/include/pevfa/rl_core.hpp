#pragma once

#include <cstddef>
#include <cstdint>
#include <deque>
#include <iosfwd>
#include <span>
#include <string>
#include <vector>

#include "pevfa/autodiff.hpp"
#include "pevfa/envs.hpp"
#include "pevfa/nets.hpp"
#include "pevfa/policy_repr.hpp"

namespace pevfa::rl {

using ad::Tensor;

// ---------------------------------------------------------------------------
// Returns and advantages

/// G_t = sum_k gamma^k r_{t+k}, within the episode.
std::vector<double> mc_returns(const envs::Trajectory& traj, double gamma);

/// values has horizon+1 entries; the bootstrap is replaced by 0 when the episode ended.
std::vector<double> gae(const envs::Trajectory& traj, std::span<const double> values, double gamma,
                        double lambda);

/// Per-element PPO objective min(rho A, clip(rho, 1-eps, 1+eps) A).
double clipped_objective(double ratio, double advantage, double eps);

/// (x - mean) / std over the batch; std floored at 1e-8.
std::vector<double> normalize_advantages(std::span<const double> adv);

// ---------------------------------------------------------------------------
// On-policy batch

struct RolloutBatch {
  Tensor states;   // N x S
  Tensor actions;  // N x A
  std::vector<double> old_log_probs;
  std::vector<double> returns;
  std::vector<double> advantages;

  std::size_t size() const { return returns.size(); }
};

/// Log-densities of each row's action under `policy`, computed by the same taped
/// path that the PPO loss uses.
std::vector<double> batch_log_probs(const nets::GaussianPolicy& policy, const Tensor& states,
                                    const Tensor& actions);

/// Mean clipped objective at the policy's current parameters with the given advantages.
double ppo_surrogate(const nets::GaussianPolicy& policy, const RolloutBatch& batch,
                     std::span<const double> advantages, double eps);

struct PolicyUpdateStats {
  double mean_loss = 0.0;
  int minibatches = 0;
  int skipped = 0;
};

/// Adam on the clipped surrogate; advantages normalized once per batch. Minibatches
/// with a non-finite ratio are skipped with a warning on stderr.
PolicyUpdateStats ppo_policy_update(nets::GaussianPolicy& policy, ad::AdamState& adam,
                                    const RolloutBatch& batch, double eps, int epochs,
                                    std::size_t minibatch, Rng& rng);

// ---------------------------------------------------------------------------
// Value regression

double value_loss(const nets::MlpParams& vfa, const Tensor& states,
                  std::span<const double> targets);

struct LossPair {
  double pre = 0.0;
  double post = 0.0;
};

/// MSE regression by Adam with shuffled minibatches. Returns full-batch loss before and after.
LossPair vfa_update(nets::MlpParams& vfa, ad::AdamState& adam, const Tensor& states,
                    std::span<const double> targets, int epochs, std::size_t minibatch, Rng& rng);

/// Value network plus policy encoder and their optimizers.
struct PeVFAModel {
  nets::PeVFAParams net;
  ad::AdamState adam;
  repr::PolicyEncoder* encoder = nullptr;  // not owned; nullptr = cached embeddings only
  ad::AdamState* encoder_adam = nullptr;   // set to train the encoder end to end
  bool freeze_embed_stream = false;

  std::vector<Tensor*> trained_tensors();
};

PeVFAModel make_pevfa_model(nets::PeVFAParams net, double lr, bool freeze_embed_stream);

/// MSE of V(s, chi) against the record's returns over all of its states.
double pevfa_loss(const nets::PeVFAParams& net, std::span<const double> embedding,
                  const repr::PolicyRecord& record);

struct HistoricalConfig {
  int steps = 200;
  std::size_t batch = 64;
  std::size_t policy_batch = 16;
  /// Sampling weight of a record is exp(-recency * age); 0 is uniform.
  double recency = 0.0;
};

/// Regresses V(s, chi_i) onto each sampled record's own returns. The encoder, when
/// trainable and given an optimizer, is updated through the same loss. Returns the
/// mean minibatch loss; no-op (0) on an empty set.
double pevfa_historical_update(PeVFAModel& model, std::span<const repr::PolicyRecord> records,
                               const HistoricalConfig& config, Rng& rng);

/// Continues training from the current parameters on one record with a fixed
/// embedding. `pre` is measured before any step.
LossPair pevfa_current_update(PeVFAModel& model, const repr::PolicyRecord& record,
                              std::span<const double> embedding, int epochs,
                              std::size_t minibatch, Rng& rng);

// ---------------------------------------------------------------------------
// Experience buffer

/// FIFO over policy records, bounded by the total number of stored steps. The most
/// recent record is always kept.
class RecordBuffer {
 public:
  explicit RecordBuffer(std::size_t capacity_steps);

  void push(repr::PolicyRecord record);
  std::size_t total_steps() const { return total_steps_; }
  std::size_t capacity() const { return capacity_; }
  std::size_t size() const { return records_.size(); }
  std::span<const repr::PolicyRecord> records() const { return records_; }
  std::span<repr::PolicyRecord> records() { return records_; }
  const repr::PolicyRecord& back() const { return records_.back(); }

 private:
  std::size_t capacity_;
  std::size_t total_steps_ = 0;
  std::vector<repr::PolicyRecord> records_;
};

// ---------------------------------------------------------------------------
// Training loops

enum class Algo { Ppo, PpoPeVFA };
const char* algo_name(Algo algo);
Algo parse_algo(const std::string& name);

enum class ValueArch { Mlp, PeVFAStateOnly };

struct TrainConfig {
  Algo algo = Algo::Ppo;
  int iterations = 200;
  int steps_per_iteration = 2000;
  double policy_lr = 1e-4;
  double value_lr = 1e-3;
  double clip = 0.2;
  double gamma = 0.99;
  double lambda = 0.95;
  std::size_t minibatch = 128;
  int actor_epochs = 10;
  int critic_epochs = 10;
  std::vector<std::size_t> policy_hidden{64, 64};
  std::vector<std::size_t> value_hidden{128, 128};
  std::size_t pevfa_stream = 64;
  std::vector<std::size_t> pevfa_trunk{128};
  HistoricalConfig historical;
  int historical_interval = 1;
  std::size_t buffer_capacity = 50000;
  repr::ReprConfig repr;
  int repr_steps = 50;
  /// PPO only: also train an RPR PeVFA on the history without using it.
  bool shadow_pevfa = false;
  /// PPO only: build the VFA as the state-only part of a freshly initialised PeVFA.
  ValueArch value_arch = ValueArch::Mlp;
  bool freeze_embed_stream = false;
  bool log_wallclock = false;
  /// Keep every policy pi_0..pi_T and a strided sample of each iteration's states.
  bool keep_policy_path = false;
  std::size_t probe_states = 256;
  int checkpoint_every = 0;
  std::string checkpoint_dir;

  void validate() const;
};

struct IterationLog {
  int iteration = 0;
  std::int64_t env_steps = 0;
  double avg_return = 0.0;
  double policy_loss = 0.0;
  double vfa_loss_pre = 0.0;
  double vfa_loss_post = 0.0;
  double pevfa_loss_pre = 0.0;
  double pevfa_loss_post = 0.0;
  double repr_loss = 0.0;
  double wallclock_s = 0.0;
};

/// iteration,env_steps,avg_return,policy_loss,vfa_loss_pre,vfa_loss_post,
/// pevfa_loss_pre,pevfa_loss_post,repr_loss,wallclock_s
void write_iteration_csv(std::ostream& os, std::span<const IterationLog> logs);

struct RunResult {
  std::vector<IterationLog> logs;
  nets::GaussianPolicy policy;
  std::vector<repr::PolicyRecord> buffer;  // records still held at the end
  repr::PolicyEncoder encoder;             // PeVFA runs only
  std::vector<nets::GaussianPolicy> policy_path;  // keep_policy_path only
  std::vector<Tensor> probe_states;               // one per iteration
};

RunResult run_ppo(const TrainConfig& config, const envs::EnvConfig& env, std::uint64_t seed);
RunResult run_ppo_pevfa(const TrainConfig& config, const envs::EnvConfig& env,
                        std::uint64_t seed);
/// Dispatches on config.algo.
RunResult run_training(const TrainConfig& config, const envs::EnvConfig& env, std::uint64_t seed);

/// Mean avg_return over the last `window` logged iterations.
double final_return(std::span<const IterationLog> logs, std::size_t window = 10);

/// Mean episode return of uniform-random actions in [-1,1]^A.
double random_policy_return(const envs::EnvConfig& env, int episodes, std::uint64_t seed);

}  // namespace pevfa::rl
