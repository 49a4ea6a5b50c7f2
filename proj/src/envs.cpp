#include "pevfa/envs.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <iomanip>
#include <limits>
#include <ostream>
#include <stdexcept>

namespace pevfa::envs {

const char* env_name(EnvId id) {
  switch (id) {
    case EnvId::PointWalker: return "point_walker";
    case EnvId::PointMass: return "point_mass";
    case EnvId::Tabular: return "tabular";
  }
  return "?";
}

EnvId parse_env(const std::string& name) {
  if (name == "point_walker") return EnvId::PointWalker;
  if (name == "point_mass") return EnvId::PointMass;
  if (name == "tabular") return EnvId::Tabular;
  throw std::invalid_argument("unknown environment '" + name + "'");
}

void EnvConfig::validate() const {
  if (horizon < 1) throw std::invalid_argument("env: horizon must be >= 1");
  if (episodes < 1) throw std::invalid_argument("env: episodes must be >= 1");
  if (!(init_range >= 0.0)) throw std::invalid_argument("env: init_range must be >= 0");
}

namespace {

std::array<double, 2> clamp_action(std::span<const double> action, const char* who) {
  if (action.size() != 2) {
    throw std::invalid_argument(std::string(who) + ": action must be 2-dimensional, got " +
                                std::to_string(action.size()));
  }
  std::array<double, 2> a{};
  for (std::size_t i = 0; i < 2; ++i) {
    if (!std::isfinite(action[i])) throw std::invalid_argument(std::string(who) + ": non-finite action");
    a[i] = std::clamp(action[i], -1.0, 1.0);
  }
  return a;
}

}  // namespace

std::array<double, 6> WalkerState::features() const {
  const double theta = (x == 0.0 && y == 0.0) ? 0.0 : std::atan2(y, x);
  return {x, y, std::sin(theta), std::cos(theta), std::cos(x), std::cos(y)};
}

WalkerStep point_walker_step(const WalkerState& pos, std::span<const double> action) {
  const auto a = clamp_action(action, "point_walker_step");
  WalkerStep out;
  out.next = {pos.x + a[0], pos.y + a[1]};
  out.reward = (out.next.utility() - pos.utility()) / 10.0;
  return out;
}

std::array<double, 6> PointMassState::features() const {
  return {pos[0], pos[1], vel[0], vel[1], kGoal[0] - pos[0], kGoal[1] - pos[1]};
}

PointMassStep point_mass_step(const PointMassState& state, std::span<const double> action) {
  const auto a = clamp_action(action, "point_mass_step");
  PointMassStep out;
  for (std::size_t i = 0; i < 2; ++i) {
    out.next.vel[i] = std::clamp(state.vel[i] + 0.1 * a[i], -1.0, 1.0);
    out.next.pos[i] = state.pos[i] + 0.1 * out.next.vel[i];
  }
  const double dx = out.next.pos[0] - PointMassState::kGoal[0];
  const double dy = out.next.pos[1] - PointMassState::kGoal[1];
  out.reward = -std::sqrt(dx * dx + dy * dy);
  return out;
}

namespace {

class PointWalkerEnv final : public Environment {
 public:
  explicit PointWalkerEnv(double init_range) : init_range_(init_range) {}
  std::size_t state_dim() const override { return 6; }
  std::size_t action_dim() const override { return 2; }
  std::vector<double> reset(Rng& rng) override {
    state_ = {};
    if (init_range_ > 0.0) {
      state_.x = uniform(rng, -init_range_, init_range_);
      state_.y = uniform(rng, -init_range_, init_range_);
    }
    return observation();
  }
  double step(std::span<const double> action) override {
    auto s = point_walker_step(state_, action);
    state_ = s.next;
    return s.reward;
  }
  std::vector<double> observation() const override {
    auto f = state_.features();
    return {f.begin(), f.end()};
  }

 private:
  double init_range_;
  WalkerState state_;
};

class PointMassEnv final : public Environment {
 public:
  explicit PointMassEnv(double init_range) : init_range_(init_range) {}
  std::size_t state_dim() const override { return 6; }
  std::size_t action_dim() const override { return 2; }
  std::vector<double> reset(Rng& rng) override {
    state_ = {};
    if (init_range_ > 0.0) {
      state_.pos[0] = uniform(rng, -init_range_, init_range_);
      state_.pos[1] = uniform(rng, -init_range_, init_range_);
    }
    return observation();
  }
  double step(std::span<const double> action) override {
    auto s = point_mass_step(state_, action);
    state_ = s.next;
    return s.reward;
  }
  std::vector<double> observation() const override {
    auto f = state_.features();
    return {f.begin(), f.end()};
  }

 private:
  double init_range_;
  PointMassState state_;
};

}  // namespace

std::unique_ptr<Environment> make_env(const EnvConfig& config) {
  config.validate();
  switch (config.id) {
    case EnvId::PointWalker: return std::make_unique<PointWalkerEnv>(config.init_range);
    case EnvId::PointMass: return std::make_unique<PointMassEnv>(config.init_range);
    case EnvId::Tabular: break;
  }
  throw std::invalid_argument("make_env: tabular MDPs are solved exactly, not rolled out");
}

std::size_t env_state_dim(EnvId id) {
  if (id == EnvId::Tabular) throw std::invalid_argument("env_state_dim: tabular has no feature vector");
  return 6;
}

std::size_t env_action_dim(EnvId id) {
  if (id == EnvId::Tabular) throw std::invalid_argument("env_action_dim: tabular actions are discrete");
  return 2;
}

double Trajectory::total_reward() const {
  double acc = 0.0;
  for (double r : rewards) acc += r;
  return acc;
}

std::vector<Trajectory> rollout(const EnvConfig& config, const Actor& actor, int episodes,
                                int horizon, std::uint64_t seed) {
  if (episodes < 1 || horizon < 1) throw std::invalid_argument("rollout: episodes and horizon must be >= 1");
  auto env = make_env(config);
  Rng env_rng = make_rng(seed, "env");
  Rng act_rng = make_rng(seed, "sampling");
  std::vector<Trajectory> out;
  out.reserve(static_cast<std::size_t>(episodes));
  for (int e = 0; e < episodes; ++e) {
    Trajectory traj;
    traj.states.push_back(env->reset(env_rng));
    for (int t = 0; t < horizon; ++t) {
      std::vector<double> action = actor(traj.states.back(), act_rng);
      if (action.size() != env->action_dim()) {
        throw std::invalid_argument("rollout: actor produced " + std::to_string(action.size()) +
                                    "-dim action, environment expects " +
                                    std::to_string(env->action_dim()));
      }
      const double reward = env->step(action);
      traj.actions.push_back(std::move(action));
      traj.rewards.push_back(reward);
      traj.dones.push_back(t + 1 == horizon);
      traj.states.push_back(env->observation());
    }
    out.push_back(std::move(traj));
  }
  return out;
}

Actor deterministic_actor(const nets::MlpParams& policy) {
  return [policy](std::span<const double> state, Rng&) { return nets::mlp_eval(policy, state); };
}

void write_trajectories_csv(std::ostream& os, std::span<const Trajectory> trajectories) {
  const std::size_t sdim = trajectories.empty() ? 0 : trajectories.front().states.front().size();
  const std::size_t adim =
      trajectories.empty() || trajectories.front().actions.empty() ? 0 : trajectories.front().actions.front().size();
  os << "episode,step";
  for (std::size_t i = 0; i < sdim; ++i) os << ",state_" << i;
  for (std::size_t i = 0; i < adim; ++i) os << ",action_" << i;
  os << ",reward\n";
  os << std::setprecision(std::numeric_limits<double>::max_digits10);
  for (std::size_t e = 0; e < trajectories.size(); ++e) {
    const auto& tr = trajectories[e];
    for (std::size_t t = 0; t < tr.length(); ++t) {
      os << e << ',' << t;
      for (double v : tr.states[t]) os << ',' << v;
      for (double v : tr.actions[t]) os << ',' << v;
      os << ',' << tr.rewards[t] << '\n';
    }
  }
}

std::vector<nets::MlpParams> synth_policy_population(std::size_t n, std::uint64_t seed) {
  if (n < 1) throw std::invalid_argument("synth_policy_population: n must be >= 1");
  Rng rng = make_rng(seed, "synthetic-policies");
  std::vector<nets::MlpParams> out;
  out.reserve(n);
  const std::size_t sizes[] = {6, 2, 2, 2};
  for (std::size_t k = 0; k < n; ++k) {
    nets::MlpParams p;
    for (std::size_t i = 0; i + 1 < std::size(sizes); ++i) {
      nets::Layer l;
      l.weight = ad::Tensor(sizes[i + 1], sizes[i]);
      for (auto& w : l.weight.values()) w = uniform(rng, -1.0, 1.0);
      l.bias = ad::Tensor(1, sizes[i + 1]);
      for (auto& b : l.bias.values()) b = uniform(rng, -0.2, 0.2);
      l.activation = nets::Activation::Tanh;
      p.layers.push_back(std::move(l));
    }
    out.push_back(std::move(p));
  }
  return out;
}

// ---------------------------------------------------------------------------

void TabularMdp::validate() const {
  if (num_states == 0 || num_actions == 0) throw std::invalid_argument("mdp: empty state or action set");
  if (transitions.size() != num_states * num_actions * num_states ||
      rewards.size() != num_states * num_actions) {
    throw std::invalid_argument("mdp: table sizes do not match |S| and |A|");
  }
  if (!(gamma >= 0.0 && gamma < 1.0)) throw std::invalid_argument("mdp: gamma must be in [0,1)");
  for (std::size_t s = 0; s < num_states; ++s) {
    for (std::size_t a = 0; a < num_actions; ++a) {
      double total = 0.0;
      for (std::size_t n = 0; n < num_states; ++n) {
        if (p(s, a, n) < 0.0) throw std::invalid_argument("mdp: negative transition probability");
        total += p(s, a, n);
      }
      if (std::abs(total - 1.0) > 1e-12) {
        throw std::invalid_argument("mdp: P[" + std::to_string(s) + "," + std::to_string(a) +
                                    ",:] does not sum to 1");
      }
    }
  }
}

TabularMdp random_mdp(std::size_t states, std::size_t actions, double gamma, Rng& rng) {
  TabularMdp mdp;
  mdp.num_states = states;
  mdp.num_actions = actions;
  mdp.gamma = gamma;
  mdp.transitions.assign(states * actions * states, 0.0);
  mdp.rewards.assign(states * actions, 0.0);
  for (std::size_t s = 0; s < states; ++s) {
    for (std::size_t a = 0; a < actions; ++a) {
      double total = 0.0;
      for (std::size_t n = 0; n < states; ++n) {
        const double w = -std::log(uniform(rng, 1e-12, 1.0));  // Dirichlet(1) via exponentials
        mdp.p(s, a, n) = w;
        total += w;
      }
      for (std::size_t n = 0; n < states; ++n) mdp.p(s, a, n) /= total;
      mdp.r(s, a) = uniform(rng, -1.0, 1.0);
    }
  }
  return mdp;
}

namespace {

void check_policy(const TabularMdp& mdp, const TabularPolicy& policy) {
  if (policy.size() != mdp.num_states) throw std::invalid_argument("tabular policy: wrong number of rows");
  for (const auto& row : policy) {
    if (row.size() != mdp.num_actions) throw std::invalid_argument("tabular policy: wrong row width");
    double total = 0.0;
    for (double x : row) {
      if (x < 0.0) throw std::invalid_argument("tabular policy: negative probability");
      total += x;
    }
    if (std::abs(total - 1.0) > 1e-9) throw std::invalid_argument("tabular policy: row does not sum to 1");
  }
}

}  // namespace

std::vector<double> policy_transition_matrix(const TabularMdp& mdp, const TabularPolicy& policy) {
  check_policy(mdp, policy);
  const std::size_t n = mdp.num_states;
  std::vector<double> out(n * n, 0.0);
  for (std::size_t s = 0; s < n; ++s)
    for (std::size_t a = 0; a < mdp.num_actions; ++a)
      for (std::size_t k = 0; k < n; ++k) out[s * n + k] += policy[s][a] * mdp.p(s, a, k);
  return out;
}

std::vector<double> policy_reward_vector(const TabularMdp& mdp, const TabularPolicy& policy) {
  check_policy(mdp, policy);
  std::vector<double> out(mdp.num_states, 0.0);
  for (std::size_t s = 0; s < mdp.num_states; ++s)
    for (std::size_t a = 0; a < mdp.num_actions; ++a) out[s] += policy[s][a] * mdp.r(s, a);
  return out;
}

std::vector<double> tabular_true_values(const TabularMdp& mdp, const TabularPolicy& policy) {
  mdp.validate();
  const auto n = static_cast<Eigen::Index>(mdp.num_states);
  const auto p = policy_transition_matrix(mdp, policy);
  const auto r = policy_reward_vector(mdp, policy);
  Eigen::MatrixXd system = Eigen::MatrixXd::Identity(n, n);
  Eigen::VectorXd rhs(n);
  for (Eigen::Index i = 0; i < n; ++i) {
    rhs(i) = r[static_cast<std::size_t>(i)];
    for (Eigen::Index j = 0; j < n; ++j) system(i, j) -= mdp.gamma * p[static_cast<std::size_t>(i * n + j)];
  }
  Eigen::FullPivLU<Eigen::MatrixXd> lu(system);
  if (!lu.isInvertible()) throw std::runtime_error("tabular_true_values: singular Bellman system");
  Eigen::VectorXd v = lu.solve(rhs);
  return {v.data(), v.data() + n};
}

std::vector<double> bellman_backup(const TabularMdp& mdp, const TabularPolicy& policy,
                                   std::span<const double> values) {
  const auto p = policy_transition_matrix(mdp, policy);
  auto out = policy_reward_vector(mdp, policy);
  const std::size_t n = mdp.num_states;
  for (std::size_t s = 0; s < n; ++s) {
    double acc = 0.0;
    for (std::size_t k = 0; k < n; ++k) acc += p[s * n + k] * values[k];
    out[s] += mdp.gamma * acc;
  }
  return out;
}

}  // namespace pevfa::envs
