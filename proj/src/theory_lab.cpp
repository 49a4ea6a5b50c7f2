#include "pevfa/theory_lab.hpp"

#include <algorithm>
#include <cmath>
#include <iomanip>
#include <limits>
#include <ostream>
#include <stdexcept>

#include "pevfa/rl_core.hpp"

namespace pevfa::theory {

double approx_loss(std::span<const double> predicted, std::span<const double> truth) {
  if (truth.empty()) throw std::invalid_argument("approx_loss: empty state set");
  if (predicted.size() != truth.size()) {
    throw std::invalid_argument("approx_loss: " + std::to_string(predicted.size()) +
                                " predictions for " + std::to_string(truth.size()) + " states");
  }
  double s = 0.0;
  for (std::size_t i = 0; i < truth.size(); ++i) {
    const double diff = predicted[i] - truth[i];
    s += diff * diff;
  }
  return std::sqrt(s / static_cast<double>(truth.size()));
}

double approx_loss(const StateValueFn& value_fn, std::span<const double> truth,
                   std::span<const std::size_t> states) {
  if (states.empty()) throw std::invalid_argument("approx_loss: empty state set");
  std::vector<double> pred, target;
  pred.reserve(states.size());
  target.reserve(states.size());
  for (std::size_t s : states) {
    if (s >= truth.size()) throw std::out_of_range("approx_loss: oracle does not cover state " + std::to_string(s));
    pred.push_back(value_fn(s));
    target.push_back(truth[s]);
  }
  return approx_loss(pred, target);
}

// ---------------------------------------------------------------------------

double gaussian_sym_kl(std::span<const double> mean_p, std::span<const double> log_std_p,
                       std::span<const double> mean_q, std::span<const double> log_std_q) {
  const std::size_t n = mean_p.size();
  if (mean_q.size() != n || log_std_p.size() != n || log_std_q.size() != n) {
    throw std::invalid_argument("gaussian_sym_kl: dimension mismatch");
  }
  double kl = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const double vp = std::exp(2.0 * log_std_p[i]);
    const double vq = std::exp(2.0 * log_std_q[i]);
    const double dm2 = (mean_p[i] - mean_q[i]) * (mean_p[i] - mean_q[i]);
    // The log terms cancel between the two directions.
    kl += (vp + dm2) / (2.0 * vq) + (vq + dm2) / (2.0 * vp) - 1.0;
  }
  return kl;
}

double policy_distance(const nets::GaussianPolicy& a, const nets::GaussianPolicy& b,
                       const Tensor& probe_states) {
  if (probe_states.rows() == 0) throw std::invalid_argument("policy_distance: no probe states");
  double total = 0.0;
  for (std::size_t r = 0; r < probe_states.rows(); ++r) {
    auto pa = nets::policy_forward(a, probe_states.row(r));
    auto pb = nets::policy_forward(b, probe_states.row(r));
    total += gaussian_sym_kl(pa.mean, pa.log_std, pb.mean, pb.log_std);
  }
  return total / static_cast<double>(probe_states.rows());
}

double tabular_policy_distance(const envs::TabularPolicy& a, const envs::TabularPolicy& b) {
  if (a.empty() || a.size() != b.size()) throw std::invalid_argument("tabular_policy_distance: shape mismatch");
  double total = 0.0;
  for (std::size_t s = 0; s < a.size(); ++s) {
    if (a[s].size() != b[s].size()) throw std::invalid_argument("tabular_policy_distance: shape mismatch");
    for (std::size_t k = 0; k < a[s].size(); ++k) {
      const double p = a[s][k], q = b[s][k];
      if (!(p > 0.0) || !(q > 0.0)) {
        throw std::invalid_argument("tabular_policy_distance: zero-probability action");
      }
      total += (p - q) * (std::log(p) - std::log(q));
    }
  }
  return total / static_cast<double>(a.size());
}

// ---------------------------------------------------------------------------

ContractionRatio contraction_ratio(double f_before, double f_after) {
  ContractionRatio r;
  if (f_before <= 0.0) {
    r.degenerate = true;
    return r;
  }
  r.value = f_after / f_before;
  r.non_contraction = r.value >= 1.0;
  return r;
}

LipschitzEstimate lipschitz_estimate(const ParamLossFn& f, const ParamDistanceFn& d,
                                     std::span<const double> params, int count, double scale,
                                     Rng& rng) {
  if (count < 2) throw std::invalid_argument("lipschitz_estimate: need at least 2 perturbations");
  const double f0 = f(params);
  LipschitzEstimate est;
  std::vector<double> p(params.begin(), params.end());
  for (int k = 0; k < count; ++k) {
    for (std::size_t i = 0; i < p.size(); ++i) p[i] = params[i] + scale * standard_normal(rng);
    const double dist = d(params, p);
    if (!(dist > 0.0)) {
      ++est.skipped;
      continue;
    }
    ++est.evaluated;
    est.value = std::max(est.value, std::abs(f(p) - f0) / dist);
  }
  return est;
}

// ---------------------------------------------------------------------------

LossRecord make_loss_record(int iteration, double f_pre, double f_post, double f_next_pre,
                            double d, double value_gap, double cross, ValueOracle oracle) {
  LossRecord r;
  r.iteration = iteration;
  r.f_pre = f_pre;
  r.f_post = f_post;
  r.f_next_pre = f_next_pre;
  const auto g = contraction_ratio(f_pre, f_post);
  r.gamma_t = g.value;
  r.gamma_degenerate = g.degenerate;
  r.d = d;
  if (d > 0.0) {
    r.L_defined = true;
    r.L_t = std::abs(f_next_pre - f_post) / d;
    r.M_t = r.L_t * d;
  }
  r.value_gap = value_gap;
  r.cross = cross;
  r.oracle = oracle;
  return r;
}

Theorem1Summary theorem1_check(std::span<const LossRecord> records, double tol) {
  Theorem1Summary out;
  for (const auto& rec : records) {
    Theorem1Row row;
    row.iteration = rec.iteration;
    row.oracle = rec.oracle;
    row.available = rec.oracle_available;
    if (row.available) {
      row.condition = rec.f_post + rec.f_next_pre <= rec.value_gap;
      row.conclusion = rec.f_next_pre <= rec.cross + tol;
      row.cross = rec.cross;
      ++out.available;
      if (row.condition) ++out.condition_held;
      if (row.condition && !row.conclusion) ++out.violations;
    }
    out.rows.push_back(row);
  }
  return out;
}

Lemma2Summary lemma2_track(std::span<const LossRecord> records, LipschitzSource source,
                           double tol) {
  if (records.size() < 2) throw std::invalid_argument("lemma2_track: need at least 2 records");
  Lemma2Summary out;
  double acc = records.front().f_pre;
  for (const auto& rec : records) {
    Lemma2Row row;
    row.iteration = rec.iteration;
    row.lhs = rec.f_next_pre;
    row.defined = rec.L_defined;
    const double m = !rec.L_defined ? 0.0
                     : source == LipschitzSource::Realized ? rec.M_t
                                                           : rec.L_sampled * rec.d;
    acc = rec.gamma_t * acc + m;
    out.gamma_product *= rec.gamma_t;
    row.accumulated = acc;
    if (row.defined) {
      row.rhs = rec.gamma_t * rec.f_pre + m;
      row.holds = row.lhs <= row.rhs + tol;
      ++out.defined;
      if (!row.holds) ++out.violations;
    }
    out.rows.push_back(row);
  }
  out.violation_rate = out.defined ? static_cast<double>(out.violations) / out.defined : 0.0;
  return out;
}

void write_theory_csv(std::ostream& os, std::span<const LossRecord> records) {
  os << "iteration,f_pre,f_post,f_next_pre,gamma_t,d,L_t,M_t,value_gap,thm1_condition,"
        "thm1_conclusion\n";
  const auto thm = theorem1_check(records);
  const auto old_precision = os.precision(std::numeric_limits<double>::max_digits10);
  auto num = [&os](bool ok, double v) -> std::ostream& {
    if (ok) {
      os << v;
    } else {
      os << "nan";
    }
    return os;
  };
  for (std::size_t i = 0; i < records.size(); ++i) {
    const auto& r = records[i];
    const auto& t = thm.rows[i];
    os << r.iteration << ',' << r.f_pre << ',' << r.f_post << ',' << r.f_next_pre << ',';
    num(!r.gamma_degenerate, r.gamma_t) << ',' << r.d << ',';
    num(r.L_defined, r.L_t) << ',';
    num(r.L_defined, r.M_t) << ',';
    num(r.oracle_available, r.value_gap) << ',';
    num(t.available, t.condition ? 1 : 0) << ',';
    num(t.available, t.conclusion ? 1 : 0) << '\n';
  }
  os.precision(old_precision);
}

// ---------------------------------------------------------------------------

void TabularGpiConfig::validate() const {
  if (states == 0 || actions < 2) throw std::invalid_argument("tabular gpi: need states and >= 2 actions");
  if (!(gamma >= 0.0 && gamma < 1.0)) throw std::invalid_argument("tabular gpi: gamma must lie in [0,1)");
  if (iterations < 1) throw std::invalid_argument("tabular gpi: iterations must be >= 1");
  if (stream == 0 || trunk.empty() || !(lr > 0.0)) throw std::invalid_argument("tabular gpi: bad PeVFA setup");
  if (historical_steps < 0 || current_epochs < 0) throw std::invalid_argument("tabular gpi: negative step count");
  if (lipschitz_samples != 0 && lipschitz_samples < 2) {
    throw std::invalid_argument("tabular gpi: lipschitz_samples must be 0 or >= 2");
  }
}

envs::TabularPolicy softmax_policy(std::span<const double> logits, std::size_t states,
                                   std::size_t actions) {
  if (logits.size() != states * actions) throw std::invalid_argument("softmax_policy: wrong logit count");
  envs::TabularPolicy pi(states, std::vector<double>(actions));
  for (std::size_t s = 0; s < states; ++s) {
    const auto row = logits.subspan(s * actions, actions);
    const double mx = *std::max_element(row.begin(), row.end());
    double z = 0.0;
    for (std::size_t a = 0; a < actions; ++a) z += pi[s][a] = std::exp(row[a] - mx);
    for (auto& p : pi[s]) p /= z;
  }
  return pi;
}

namespace {

std::vector<double> flatten(const envs::TabularPolicy& pi) {
  std::vector<double> out;
  for (const auto& row : pi) out.insert(out.end(), row.begin(), row.end());
  return out;
}

std::vector<double> predict(const nets::PeVFAParams& net, const Tensor& onehot,
                            std::span<const double> chi) {
  Tensor emb(onehot.rows(), chi.size());
  for (std::size_t r = 0; r < onehot.rows(); ++r) std::copy(chi.begin(), chi.end(), emb.row(r).begin());
  const Tensor v = nets::pevfa_eval(net, onehot, emb);
  return {v.values().begin(), v.values().end()};
}

}  // namespace

TabularGpiResult run_tabular_gpi(const TabularGpiConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  const std::size_t S = cfg.states, A = cfg.actions;
  TabularGpiResult out;
  {
    Rng rng = make_rng(seed, "mdp");
    out.mdp = envs::random_mdp(S, A, cfg.gamma, rng);
  }
  const auto& mdp = out.mdp;

  Rng init_pi = make_rng(seed, "policy-init");
  std::vector<double> logits(S * A);
  for (auto& l : logits) l = cfg.init_logit_scale * standard_normal(init_pi);

  Rng init_net = make_rng(seed, "pevfa-init");
  auto model = rl::make_pevfa_model(nets::make_pevfa(S, S * A, cfg.stream, cfg.trunk, init_net),
                                    cfg.lr, false);
  Rng rng_hist = make_rng(seed, "historical");
  Rng rng_cur = make_rng(seed, "value-minibatch");
  Rng rng_lip = make_rng(seed, "lipschitz");

  Tensor onehot(S, S);
  for (std::size_t s = 0; s < S; ++s) onehot(s, s) = 1.0;
  rl::HistoricalConfig hist;
  hist.steps = cfg.historical_steps;
  hist.batch = cfg.batch;
  hist.policy_batch = cfg.policy_batch;

  auto loss_at = [&](const envs::TabularPolicy& pi, std::span<const double> truth) {
    return approx_loss(predict(model.net, onehot, flatten(pi)), truth);
  };

  std::vector<repr::PolicyRecord> history;
  out.policies.push_back(softmax_policy(logits, S, A));
  out.true_values.push_back(envs::tabular_true_values(mdp, out.policies.back()));

  for (int t = 0; t < cfg.iterations; ++t) {
    const envs::TabularPolicy pi = out.policies.back();
    const std::vector<double> v_pi = out.true_values.back();
    const auto chi = flatten(pi);
    const double f_pre = loss_at(pi, v_pi);

    repr::PolicyRecord rec;
    rec.id = static_cast<std::uint64_t>(t);
    rec.iteration = t;
    rec.states = onehot;
    rec.returns = v_pi;
    rec.embedding = chi;
    history.push_back(rec);
    rl::pevfa_historical_update(model, history, hist, rng_hist);
    rl::pevfa_current_update(model, rec, chi, cfg.current_epochs, S, rng_cur);
    const auto v_hat = predict(model.net, onehot, chi);
    const double f_post = approx_loss(v_hat, v_pi);

    // Improvement on the PeVFA's generalized values of pi_t.
    for (std::size_t s = 0; s < S; ++s) {
      std::vector<double> q(A);
      double baseline = 0.0;
      for (std::size_t a = 0; a < A; ++a) {
        double next = 0.0;
        for (std::size_t n = 0; n < S; ++n) next += mdp.p(s, a, n) * v_hat[n];
        q[a] = mdp.r(s, a) + mdp.gamma * next;
        baseline += pi[s][a] * q[a];
      }
      for (std::size_t a = 0; a < A; ++a) logits[s * A + a] += cfg.step_size * (q[a] - baseline);
    }
    out.policies.push_back(softmax_policy(logits, S, A));
    out.true_values.push_back(envs::tabular_true_values(mdp, out.policies.back()));
    const auto& pi_next = out.policies.back();
    const auto& v_next = out.true_values.back();

    auto record = make_loss_record(t, f_pre, f_post, loss_at(pi_next, v_next),
                                   tabular_policy_distance(pi, pi_next),
                                   approx_loss(v_pi, v_next), approx_loss(v_hat, v_next),
                                   ValueOracle::exact());
    if (cfg.lipschitz_samples > 0) {
      // Around pi_t in logit space, measured with the post-update theta_t.
      std::vector<double> base(S * A);
      for (std::size_t s = 0; s < S; ++s) {
        for (std::size_t a = 0; a < A; ++a) base[s * A + a] = std::log(pi[s][a]);
      }
      auto f = [&](std::span<const double> l) {
        auto p = softmax_policy(l, S, A);
        return loss_at(p, envs::tabular_true_values(mdp, p));
      };
      auto d = [&](std::span<const double> x, std::span<const double> y) {
        return tabular_policy_distance(softmax_policy(x, S, A), softmax_policy(y, S, A));
      };
      record.L_sampled =
          lipschitz_estimate(f, d, base, cfg.lipschitz_samples, cfg.lipschitz_scale, rng_lip).value;
    }
    out.records.push_back(record);
  }
  return out;
}

}  // namespace pevfa::theory
