#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <iosfwd>
#include <span>
#include <string>
#include <vector>

#include "pevfa/autodiff.hpp"
#include "pevfa/envs.hpp"
#include "pevfa/nets.hpp"
#include "pevfa/rng.hpp"

namespace pevfa::theory {

using ad::Tensor;

enum class OracleKind { ExactTabular, MonteCarlo };

/// Where the "true" values came from. Monte Carlo oracles carry their sample count
/// so any tolerance applied to them can be stated.
struct ValueOracle {
  OracleKind kind = OracleKind::ExactTabular;
  std::size_t samples = 0;

  static ValueOracle exact() { return {}; }
  static ValueOracle monte_carlo(std::size_t samples) { return {OracleKind::MonteCarlo, samples}; }
};

// ---------------------------------------------------------------------------
// Approximation loss f_theta(pi) = ||V_theta(pi) - V^pi|| / sqrt(n)

double approx_loss(std::span<const double> predicted, std::span<const double> truth);

/// value_fn(s) against truth[s] over the listed states.
using StateValueFn = std::function<double(std::size_t state)>;
double approx_loss(const StateValueFn& value_fn, std::span<const double> truth,
                   std::span<const std::size_t> states);

// ---------------------------------------------------------------------------
// Policy distance

/// KL(p||q) + KL(q||p) for diagonal Gaussians.
double gaussian_sym_kl(std::span<const double> mean_p, std::span<const double> log_std_p,
                       std::span<const double> mean_q, std::span<const double> log_std_q);

/// Mean symmetrized KL over the rows of `probe_states`.
double policy_distance(const nets::GaussianPolicy& a, const nets::GaussianPolicy& b,
                       const Tensor& probe_states);

/// Mean over states of the symmetrized KL of the action distributions. Both
/// policies must put positive mass on every action.
double tabular_policy_distance(const envs::TabularPolicy& a, const envs::TabularPolicy& b);

// ---------------------------------------------------------------------------
// Contraction and Lipschitz estimates

struct ContractionRatio {
  double value = 0.0;
  bool degenerate = false;       // f_before == 0
  bool non_contraction = false;  // value >= 1
};

ContractionRatio contraction_ratio(double f_before, double f_after);

struct LipschitzEstimate {
  double value = 0.0;
  int evaluated = 0;
  int skipped = 0;  // perturbations at zero distance
};

using ParamLossFn = std::function<double(std::span<const double> params)>;
using ParamDistanceFn = std::function<double(std::span<const double>, std::span<const double>)>;

/// max |f(pi) - f(pi')| / d(pi, pi') over `count` perturbations pi' = pi + N(0, scale^2).
LipschitzEstimate lipschitz_estimate(const ParamLossFn& f, const ParamDistanceFn& d,
                                     std::span<const double> params, int count, double scale,
                                     Rng& rng);

// ---------------------------------------------------------------------------
// Per-iteration loss records

struct LossRecord {
  int iteration = 0;
  double f_pre = 0.0;       // f_{theta_{t-1}}(pi_t)
  double f_post = 0.0;      // f_{theta_t}(pi_t)
  double f_next_pre = 0.0;  // f_{theta_t}(pi_{t+1})
  double gamma_t = 0.0;
  bool gamma_degenerate = false;
  double d = 0.0;  // d(pi_t, pi_{t+1})
  double L_t = 0.0;
  double M_t = 0.0;
  bool L_defined = false;
  double L_sampled = 0.0;  // lipschitz_estimate, 0 if not run
  double value_gap = 0.0;  // ||V^{pi_t} - V^{pi_{t+1}}||
  double cross = 0.0;      // ||V_{theta_t}(pi_t) - V^{pi_{t+1}}||
  bool oracle_available = true;
  ValueOracle oracle;
};

/// Fills gamma_t, L_t = |f_next_pre - f_post| / d and M_t = L_t d from the measured
/// quantities. d == 0 leaves L_t undefined.
LossRecord make_loss_record(int iteration, double f_pre, double f_post, double f_next_pre,
                            double d, double value_gap, double cross, ValueOracle oracle);

struct Theorem1Row {
  int iteration = 0;
  bool available = false;
  bool condition = false;   // f_post + f_next_pre <= value_gap
  bool conclusion = false;  // f_next_pre <= cross
  double cross = 0.0;
  ValueOracle oracle;
};

struct Theorem1Summary {
  std::vector<Theorem1Row> rows;
  int available = 0;
  int condition_held = 0;
  int violations = 0;  // condition true, conclusion false
};

/// `tol` absorbs rounding in the norms when the premise holds with equality.
Theorem1Summary theorem1_check(std::span<const LossRecord> records, double tol = 1e-12);

enum class LipschitzSource { Realized, Sampled };

struct Lemma2Row {
  int iteration = 0;
  bool defined = false;
  double lhs = 0.0;          // f_next_pre
  double rhs = 0.0;          // gamma_t f_pre + M_t
  bool holds = false;
  double accumulated = 0.0;  // Corollary 2 bound on f_next_pre
};

struct Lemma2Summary {
  std::vector<Lemma2Row> rows;
  int defined = 0;
  int violations = 0;
  double violation_rate = 0.0;
  /// Running product of gamma_t over the defined rows.
  double gamma_product = 1.0;
};

/// Per-step Lemma 2 bound and the Corollary 2 accumulation
///   A_t = prod_{k<=t} gamma_k f_0 + sum_{j<=t} prod_{j<k<=t} gamma_k M_j,
/// with f_0 the first record's f_pre. Needs at least 2 records.
Lemma2Summary lemma2_track(std::span<const LossRecord> records,
                           LipschitzSource source = LipschitzSource::Realized, double tol = 1e-12);

/// iteration,f_pre,f_post,f_next_pre,gamma_t,d,L_t,M_t,value_gap,thm1_condition,thm1_conclusion
/// Unavailable quantities are written as nan.
void write_theory_csv(std::ostream& os, std::span<const LossRecord> records);

// ---------------------------------------------------------------------------
// GPI on a tabular MDP with a PeVFA over (one-hot state, flattened policy)

struct TabularGpiConfig {
  std::size_t states = 5;
  std::size_t actions = 3;
  double gamma = 0.9;
  int iterations = 50;
  std::size_t stream = 32;
  std::vector<std::size_t> trunk{64};
  double lr = 3e-3;
  int historical_steps = 100;
  std::size_t batch = 64;
  std::size_t policy_batch = 16;
  int current_epochs = 10;
  /// Policy logits move by step_size * advantage under the PeVFA's values.
  double step_size = 1.0;
  double init_logit_scale = 1.0;
  int lipschitz_samples = 0;
  double lipschitz_scale = 1e-2;

  void validate() const;
};

struct TabularGpiResult {
  envs::TabularMdp mdp;
  std::vector<envs::TabularPolicy> policies;  // pi_0 .. pi_T
  std::vector<std::vector<double>> true_values;
  std::vector<LossRecord> records;            // one per iteration t < T
};

envs::TabularPolicy softmax_policy(std::span<const double> logits, std::size_t states,
                                   std::size_t actions);

TabularGpiResult run_tabular_gpi(const TabularGpiConfig& config, std::uint64_t seed);

}  // namespace pevfa::theory
