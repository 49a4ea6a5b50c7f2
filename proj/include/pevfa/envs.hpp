#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <iosfwd>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "pevfa/nets.hpp"
#include "pevfa/rng.hpp"

namespace pevfa::envs {

enum class EnvId { PointWalker, PointMass, Tabular };

const char* env_name(EnvId id);
EnvId parse_env(const std::string& name);

struct EnvConfig {
  EnvId id = EnvId::PointWalker;
  int horizon = 10;
  int episodes = 1;
  std::uint64_t seed = 0;
  /// Half-width of the uniform box initial positions are drawn from; 0 pins the origin.
  double init_range = 0.0;

  void validate() const;
};

// ---------------------------------------------------------------------------
// 2D Point Walker

struct WalkerState {
  double x = 0.0;
  double y = 0.0;

  /// (x, y, sin theta, cos theta, cos x, cos y), theta the polar angle (0 at the origin).
  std::array<double, 6> features() const;
  double utility() const { return x * x - y * y; }
};

struct WalkerStep {
  WalkerState next;
  double reward = 0.0;
};

/// Moves by the clamped action; reward is the utility change divided by 10.
WalkerStep point_walker_step(const WalkerState& pos, std::span<const double> action);

// ---------------------------------------------------------------------------
// Point mass: a 2D double integrator steering towards a fixed goal.

struct PointMassState {
  std::array<double, 2> pos{0.0, 0.0};
  std::array<double, 2> vel{0.0, 0.0};

  static constexpr std::array<double, 2> kGoal{1.0, 1.0};

  /// (pos, vel, goal - pos).
  std::array<double, 6> features() const;
};

struct PointMassStep {
  PointMassState next;
  double reward = 0.0;
};

PointMassStep point_mass_step(const PointMassState& state, std::span<const double> action);

// ---------------------------------------------------------------------------
// Episodic environment interface used by rollouts.

class Environment {
 public:
  virtual ~Environment() = default;
  virtual std::size_t state_dim() const = 0;
  virtual std::size_t action_dim() const = 0;
  virtual std::vector<double> reset(Rng& rng) = 0;
  /// Returns reward; the new observation is available from observation().
  virtual double step(std::span<const double> action) = 0;
  virtual std::vector<double> observation() const = 0;
};

std::unique_ptr<Environment> make_env(const EnvConfig& config);
std::size_t env_state_dim(EnvId id);
std::size_t env_action_dim(EnvId id);

struct Trajectory {
  std::vector<std::vector<double>> states;   // horizon + 1 (last is terminal observation)
  std::vector<std::vector<double>> actions;  // horizon
  std::vector<double> rewards;               // horizon
  std::vector<bool> dones;                   // horizon; true on the final step

  std::size_t length() const { return rewards.size(); }
  double total_reward() const;
};

/// Maps a state to an action. The Rng is the sampling stream; deterministic
/// actors ignore it.
using Actor = std::function<std::vector<double>(std::span<const double> state, Rng& rng)>;

/// Collects `episodes` trajectories of exactly `horizon` steps each. Reset draws
/// use the "env" substream of `seed`, actor draws the "sampling" substream.
std::vector<Trajectory> rollout(const EnvConfig& config, const Actor& actor, int episodes,
                                int horizon, std::uint64_t seed);

/// Actor for a deterministic network policy (e.g. synthetic walker policies).
Actor deterministic_actor(const nets::MlpParams& policy);

/// CSV: episode,step,state_0..state_k,action_0..action_m,reward
void write_trajectories_csv(std::ostream& os, std::span<const Trajectory> trajectories);

// ---------------------------------------------------------------------------
// Synthetic policy population (deterministic 2-2 tanh networks for the walker)

/// n deterministic policies 6 -> 2 -> 2 -> 2, all tanh. Weights ~ U(-1,1), biases ~ U(-0.2,0.2).
std::vector<nets::MlpParams> synth_policy_population(std::size_t n, std::uint64_t seed);

// ---------------------------------------------------------------------------
// Tabular MDPs

struct TabularMdp {
  std::size_t num_states = 0;
  std::size_t num_actions = 0;
  std::vector<double> transitions;  // [s][a][s'], row-major
  std::vector<double> rewards;      // [s][a]
  double gamma = 0.9;

  double p(std::size_t s, std::size_t a, std::size_t next) const {
    return transitions[(s * num_actions + a) * num_states + next];
  }
  double& p(std::size_t s, std::size_t a, std::size_t next) {
    return transitions[(s * num_actions + a) * num_states + next];
  }
  double r(std::size_t s, std::size_t a) const { return rewards[s * num_actions + a]; }
  double& r(std::size_t s, std::size_t a) { return rewards[s * num_actions + a]; }

  /// Throws std::invalid_argument unless rows are stochastic (1e-12) and gamma in [0,1).
  void validate() const;
};

/// Row-stochastic |S| x |A| table.
using TabularPolicy = std::vector<std::vector<double>>;

TabularMdp random_mdp(std::size_t states, std::size_t actions, double gamma, Rng& rng);

/// P^pi (|S| x |S|, row-major) and r^pi (|S|).
std::vector<double> policy_transition_matrix(const TabularMdp& mdp, const TabularPolicy& policy);
std::vector<double> policy_reward_vector(const TabularMdp& mdp, const TabularPolicy& policy);

/// Exact V^pi = (I - gamma P^pi)^{-1} r^pi by LU solve.
std::vector<double> tabular_true_values(const TabularMdp& mdp, const TabularPolicy& policy);

/// One synchronous Bellman backup r^pi + gamma P^pi v.
std::vector<double> bellman_backup(const TabularMdp& mdp, const TabularPolicy& policy,
                                   std::span<const double> values);

}  // namespace pevfa::envs
