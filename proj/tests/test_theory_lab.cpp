#include <gtest/gtest.h>

#include <cmath>
#include <sstream>

#include "pevfa/theory_lab.hpp"

using namespace pevfa;
using namespace pevfa::theory;

namespace {

LossRecord rec(int t, double f_pre, double f_post, double f_next, double d, double gap,
               double cross) {
  return make_loss_record(t, f_pre, f_post, f_next, d, gap, cross, ValueOracle::exact());
}

std::vector<LossRecord> random_records(std::size_t n, Rng& rng) {
  std::vector<LossRecord> out;
  double f = uniform(rng, 0.5, 2.0);
  for (std::size_t t = 0; t < n; ++t) {
    const double post = f * uniform(rng, 0.2, 1.2);
    const double next = post + uniform(rng, -0.1, 0.3) * post;
    out.push_back(rec(int(t), f, post, std::max(next, 0.0), uniform(rng, 0.01, 0.5), 1.0, 1.0));
    f = out.back().f_next_pre;
  }
  return out;
}

TabularGpiConfig quick_gpi() {
  TabularGpiConfig c;
  c.iterations = 12;
  c.historical_steps = 60;
  return c;
}

}  // namespace

TEST(ApproxLoss, ExactMatchIsZero) {
  const std::vector<double> v{1.0, -2.0, 3.5};
  EXPECT_EQ(approx_loss(v, v), 0.0);
}

TEST(ApproxLoss, ConstantOffsetGivesOffset) {
  const std::vector<double> truth{0.1, 0.7, -3.0, 2.0, 5.5};
  std::vector<double> pred = truth;
  for (auto& p : pred) p -= 0.25;
  EXPECT_NEAR(approx_loss(pred, truth), 0.25, 1e-15);
}

TEST(ApproxLoss, MatchesNaiveSum) {
  Rng rng(1);
  std::vector<double> truth(7), table(7);
  for (std::size_t i = 0; i < 7; ++i) {
    truth[i] = uniform(rng, -3, 3);
    table[i] = uniform(rng, -3, 3);
  }
  const std::vector<std::size_t> states{0, 2, 3, 6};
  double naive = 0.0;
  for (std::size_t s : states) naive += (table[s] - truth[s]) * (table[s] - truth[s]);
  naive = std::sqrt(naive) / std::sqrt(4.0);
  auto f = [&](std::size_t s) { return table[s]; };
  EXPECT_NEAR(approx_loss(f, truth, states), naive, 1e-12);
}

TEST(ApproxLoss, Rejections) {
  const std::vector<double> empty;
  EXPECT_THROW(approx_loss(empty, empty), std::invalid_argument);
  EXPECT_THROW(approx_loss(std::vector<double>{1}, std::vector<double>{1, 2}), std::invalid_argument);
  auto f = [](std::size_t) { return 0.0; };
  const std::vector<std::size_t> none;
  EXPECT_THROW(approx_loss(f, std::vector<double>{1}, none), std::invalid_argument);
  const std::vector<std::size_t> outside{3};
  EXPECT_THROW(approx_loss(f, std::vector<double>{1}, outside), std::out_of_range);
}

// ---------------------------------------------------------------------------

TEST(PolicyDistance, ClosedFormGaussian) {
  const double m1[] = {0.0}, m2[] = {1.0}, ls[] = {0.0};
  EXPECT_DOUBLE_EQ(gaussian_sym_kl(m1, ls, m2, ls), 1.0);
  // sigma 1 vs 2, same mean: KL = ln2 + 1/8 - 1/2 and ln(1/2) + 2 - 1/2.
  const double ls2[] = {std::log(2.0)};
  EXPECT_NEAR(gaussian_sym_kl(m1, ls, m1, ls2), 0.125 + 2.0 - 1.0, 1e-14);
}

TEST(PolicyDistance, IdenticalAndSymmetric) {
  Rng rng(3);
  const std::size_t hidden[] = {8, 8};
  auto a = nets::make_gaussian_policy(6, 2, hidden, rng);
  auto b = nets::make_gaussian_policy(6, 2, hidden, rng);
  b.log_std = Tensor::from_rows({{-0.3, 0.2}});
  Tensor probes(16, 6);
  for (std::size_t i = 0; i < probes.size(); ++i) probes[i] = uniform(rng, -1, 1);
  EXPECT_EQ(policy_distance(a, a, probes), 0.0);
  EXPECT_GT(policy_distance(a, b, probes), 0.0);
  EXPECT_NEAR(policy_distance(a, b, probes), policy_distance(b, a, probes), 1e-14);
  EXPECT_THROW(policy_distance(a, b, Tensor(0, 6)), std::invalid_argument);
}

TEST(PolicyDistance, SingleProbeOneDimension) {
  // Mean network 1 -> 1 with zero weight: mean = tanh(bias).
  nets::GaussianPolicy a, b;
  a.mean_net.layers.push_back({Tensor(1, 1), Tensor::from_rows({{0.0}}), nets::Activation::Identity});
  b.mean_net.layers.push_back({Tensor(1, 1), Tensor::from_rows({{1.0}}), nets::Activation::Identity});
  a.log_std = b.log_std = Tensor(1, 1);
  EXPECT_DOUBLE_EQ(policy_distance(a, b, Tensor(1, 1)), 1.0);
}

TEST(PolicyDistance, TabularCategorical) {
  envs::TabularPolicy p{{0.5, 0.5}, {0.9, 0.1}};
  envs::TabularPolicy q{{0.25, 0.75}, {0.9, 0.1}};
  const double expect = (0.25 * std::log(2.0) - 0.25 * std::log(0.5 / 0.75)) / 2.0;
  EXPECT_NEAR(tabular_policy_distance(p, q), expect, 1e-15);
  EXPECT_EQ(tabular_policy_distance(p, p), 0.0);
  EXPECT_EQ(tabular_policy_distance(p, q), tabular_policy_distance(q, p));
  EXPECT_THROW(tabular_policy_distance(p, {{1.0, 0.0}, {0.9, 0.1}}), std::invalid_argument);
}

// ---------------------------------------------------------------------------

TEST(Contraction, RatioAndFlags) {
  auto r = contraction_ratio(2.0, 1.0);
  EXPECT_EQ(r.value, 0.5);
  EXPECT_FALSE(r.non_contraction);
  r = contraction_ratio(0.7, 0.7);
  EXPECT_EQ(r.value, 1.0);
  EXPECT_TRUE(r.non_contraction);
  r = contraction_ratio(0.0, 0.3);
  EXPECT_TRUE(r.degenerate);
  EXPECT_EQ(r.value, 0.0);
}

TEST(Contraction, ProductMatchesRunningProduct) {
  Rng rng(5);
  auto records = random_records(30, rng);
  auto track = lemma2_track(records);
  double naive = 1.0;
  for (const auto& r : records) naive *= r.f_post / r.f_pre;
  EXPECT_NEAR(track.gamma_product, naive, 1e-12 * std::abs(naive));
}

// ---------------------------------------------------------------------------

namespace {

double abs_dist(std::span<const double> x, std::span<const double> y) { return std::abs(x[0] - y[0]); }

}  // namespace

TEST(Lipschitz, ConstantLossGivesZero) {
  Rng rng(1);
  const double p[] = {0.3, -0.1};
  auto f = [](std::span<const double>) { return 4.2; };
  auto d = [](std::span<const double> x, std::span<const double> y) {
    return std::hypot(x[0] - y[0], x[1] - y[1]);
  };
  auto est = lipschitz_estimate(f, d, p, 20, 1e-2, rng);
  EXPECT_EQ(est.value, 0.0);
  EXPECT_EQ(est.evaluated, 20);
}

TEST(Lipschitz, NonDecreasingInCount) {
  const double p[] = {0.5};
  auto f = [](std::span<const double> x) { return std::sin(5.0 * x[0]) + x[0] * x[0]; };
  double prev = 0.0;
  for (int n = 2; n <= 40; ++n) {
    Rng rng(9);
    const double v = lipschitz_estimate(f, abs_dist, p, n, 5e-2, rng).value;
    EXPECT_GE(v, prev);
    prev = v;
  }
}

TEST(Lipschitz, SyntheticLinearLoss) {
  Rng rng(2);
  const double p0[] = {0.7};
  auto f = [&](std::span<const double> x) { return 2.0 * std::abs(x[0] - p0[0]); };
  EXPECT_NEAR(lipschitz_estimate(f, abs_dist, p0, 10, 1e-2, rng).value, 2.0, 1e-9);
}

TEST(Lipschitz, ZeroDistanceSkipped) {
  Rng rng(3);
  const double p[] = {0.1};
  auto f = [](std::span<const double> x) { return x[0]; };
  auto d = [](std::span<const double>, std::span<const double>) { return 0.0; };
  auto est = lipschitz_estimate(f, d, p, 5, 1e-2, rng);
  EXPECT_EQ(est.skipped, 5);
  EXPECT_EQ(est.value, 0.0);
  EXPECT_THROW(lipschitz_estimate(f, d, p, 1, 1e-2, rng), std::invalid_argument);
}

// ---------------------------------------------------------------------------

TEST(Theorem1, TriangleExample) {
  std::vector<LossRecord> records{rec(0, 0.5, 0.3, 0.2, 0.1, 0.6, 0.45)};
  auto s = theorem1_check(records);
  ASSERT_EQ(s.rows.size(), 1u);
  EXPECT_TRUE(s.rows[0].condition);
  EXPECT_TRUE(s.rows[0].conclusion);
  EXPECT_EQ(s.violations, 0);
}

TEST(Theorem1, NoImprovementNeedsZeroLosses) {
  std::vector<LossRecord> records{rec(0, 0.1, 0.0, 0.0, 0.0, 0.0, 0.0),
                                  rec(1, 0.1, 0.05, 0.05, 0.0, 0.0, 0.05)};
  auto s = theorem1_check(records);
  EXPECT_TRUE(s.rows[0].condition);
  EXPECT_FALSE(s.rows[1].condition);
  EXPECT_EQ(s.violations, 0);
}

TEST(Theorem1, ViolationCountedAndUnavailableRowsMarked) {
  std::vector<LossRecord> records{rec(0, 1.0, 0.1, 0.2, 0.1, 1.0, 0.15),
                                  rec(1, 1.0, 0.1, 0.2, 0.1, 1.0, 0.9)};
  records[1].oracle_available = false;
  auto s = theorem1_check(records);
  EXPECT_EQ(s.violations, 1);
  EXPECT_FALSE(s.rows[1].available);
  EXPECT_EQ(s.available, 1);
}

TEST(Theorem1, ExactOracleTabularRun) {
  auto cfg = quick_gpi();
  cfg.iterations = 50;
  int held = 0;
  for (std::uint64_t seed = 0; seed < 2; ++seed) {
    auto run = run_tabular_gpi(cfg, seed);
    auto s = theorem1_check(run.records);
    EXPECT_EQ(s.available, 50);
    EXPECT_EQ(s.violations, 0);
    held += s.condition_held;
  }
  EXPECT_GT(held, 0);
}

// ---------------------------------------------------------------------------

TEST(Lemma2, RealizedBoundHoldsEveryRow) {
  Rng rng(7);
  auto records = random_records(40, rng);
  auto s = lemma2_track(records);
  EXPECT_EQ(s.defined, 40);
  EXPECT_EQ(s.violations, 0);
  for (const auto& r : s.rows) EXPECT_LE(r.lhs, r.rhs + 1e-12);
}

TEST(Lemma2, AccumulationMatchesNaive) {
  Rng rng(8);
  auto records = random_records(25, rng);
  auto s = lemma2_track(records);
  for (std::size_t t = 0; t < records.size(); ++t) {
    double prod = 1.0;
    for (std::size_t k = 0; k <= t; ++k) prod *= records[k].gamma_t;
    double naive = prod * records[0].f_pre;
    for (std::size_t j = 0; j <= t; ++j) {
      double p = 1.0;
      for (std::size_t k = j + 1; k <= t; ++k) p *= records[k].gamma_t;
      naive += p * records[j].M_t;
    }
    EXPECT_NEAR(s.rows[t].accumulated, naive, 1e-10);
    // The accumulated form bounds f_{theta_t}(pi_{t+1}).
    EXPECT_LE(records[t].f_next_pre, s.rows[t].accumulated + 1e-12);
  }
}

TEST(Lemma2, ZeroDistanceRowSkipped) {
  std::vector<LossRecord> records{rec(0, 1.0, 0.5, 0.6, 0.1, 1, 1), rec(1, 0.6, 0.3, 0.3, 0.0, 1, 1)};
  auto s = lemma2_track(records);
  EXPECT_FALSE(records[1].L_defined);
  EXPECT_FALSE(s.rows[1].defined);
  EXPECT_EQ(s.defined, 1);
  EXPECT_THROW(lemma2_track(std::span(records).first(1)), std::invalid_argument);
}

TEST(Lemma2, SampledLipschitzReportsRate) {
  auto cfg = quick_gpi();
  cfg.lipschitz_samples = 4;
  auto run = run_tabular_gpi(cfg, 3);
  auto s = lemma2_track(run.records, LipschitzSource::Sampled);
  EXPECT_EQ(s.defined, cfg.iterations);
  EXPECT_GE(s.violation_rate, 0.0);
  EXPECT_LE(s.violation_rate, 1.0);
  for (const auto& r : run.records) EXPECT_GE(r.L_sampled, 0.0);
  EXPECT_EQ(lemma2_track(run.records).violations, 0);
}

// ---------------------------------------------------------------------------

TEST(TabularGpi, RecordsAreConsistent) {
  auto cfg = quick_gpi();
  auto run = run_tabular_gpi(cfg, 1);
  ASSERT_EQ(run.records.size(), std::size_t(cfg.iterations));
  ASSERT_EQ(run.policies.size(), std::size_t(cfg.iterations + 1));
  for (std::size_t t = 0; t < run.records.size(); ++t) {
    const auto& r = run.records[t];
    EXPECT_GE(r.f_pre, 0.0);
    EXPECT_GE(r.f_post, 0.0);
    EXPECT_GE(r.d, 0.0);
    EXPECT_NEAR(r.value_gap, approx_loss(run.true_values[t], run.true_values[t + 1]), 1e-15);
    EXPECT_NEAR(r.M_t, r.L_t * r.d, 1e-15);
    if (t + 1 < run.records.size()) {
      EXPECT_EQ(run.records[t + 1].f_pre, r.f_next_pre);
    }
  }
  // Values come from the exact solve.
  EXPECT_EQ(run.true_values[4], envs::tabular_true_values(run.mdp, run.policies[4]));
}

TEST(TabularGpi, ImprovesOnInitialPolicy) {
  auto cfg = quick_gpi();
  cfg.iterations = 30;
  auto run = run_tabular_gpi(cfg, 2);
  double first = 0.0, last = 0.0;
  for (double v : run.true_values.front()) first += v;
  for (double v : run.true_values.back()) last += v;
  EXPECT_GT(last, first);
}

TEST(TabularGpi, Deterministic) {
  auto cfg = quick_gpi();
  std::ostringstream a, b;
  write_theory_csv(a, run_tabular_gpi(cfg, 4).records);
  write_theory_csv(b, run_tabular_gpi(cfg, 4).records);
  EXPECT_EQ(a.str(), b.str());
}

TEST(TheoryCsv, SchemaAndNan) {
  std::vector<LossRecord> records{rec(0, 0.0, 0.1, 0.2, 0.0, 0.5, 0.3)};
  std::ostringstream os;
  write_theory_csv(os, records);
  EXPECT_EQ(os.str(),
            "iteration,f_pre,f_post,f_next_pre,gamma_t,d,L_t,M_t,value_gap,thm1_condition,"
            "thm1_conclusion\n"
            "0,0,0.10000000000000001,0.20000000000000001,nan,0,nan,nan,0.5,1,1\n");
}
