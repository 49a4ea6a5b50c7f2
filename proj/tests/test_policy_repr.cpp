#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <numbers>
#include <set>
#include <sstream>

#include "pevfa/envs.hpp"
#include "pevfa/policy_repr.hpp"

using namespace pevfa;
using namespace pevfa::repr;
using ad::Tape;
using ad::Tensor;
using ad::Var;
using nets::Activation;
using nets::MlpParams;

namespace {

MlpParams identity_net(std::size_t n) {
  MlpParams p;
  Tensor w(n, n);
  for (std::size_t i = 0; i < n; ++i) w(i, i) = 1.0;
  p.layers.push_back({w, Tensor(1, n), Activation::Identity});
  return p;
}

std::vector<double> flat(const Tensor& t) { return {t.values().begin(), t.values().end()}; }

// Records for deterministic walker policies, one trajectory batch each.
std::vector<PolicyRecord> synthetic_records(std::size_t n, std::uint64_t seed, int episodes = 4) {
  auto pop = envs::synth_policy_population(n, seed);
  envs::EnvConfig cfg;
  cfg.init_range = 1.0;
  std::vector<PolicyRecord> out;
  Rng rng(seed);
  for (std::size_t i = 0; i < n; ++i) {
    auto trajs = envs::rollout(cfg, envs::deterministic_actor(pop[i]), episodes, 10, seed + i);
    std::vector<double> returns;
    for (const auto& t : trajs) {
      double g = 0.0;
      std::vector<double> rev;
      for (std::size_t k = t.length(); k-- > 0;) rev.push_back(g = t.rewards[k] + g);
      returns.insert(returns.end(), rev.rbegin(), rev.rend());
    }
    out.push_back(make_record(i, 0, pop[i], Tensor(), std::move(trajs), std::move(returns), 20, rng));
  }
  return out;
}

ReprConfig small_config(ReprKind kind, ReprLoss loss) {
  ReprConfig c;
  c.kind = kind;
  c.loss = loss;
  c.embed_dim = 8;
  c.encoder_hidden = 16;
  c.encoder_feature = 8;
  c.spr_pairs = 20;
  return c;
}

const std::size_t kSynthSizes[] = {6, 2, 2, 2};

}  // namespace

// ---------------------------------------------------------------------------

TEST(Rpr, FlattensWeightsThenBias) {
  MlpParams p;
  p.layers.push_back({Tensor::from_rows({{1, 2}}), Tensor::from_rows({{3}}), Activation::Tanh});
  EXPECT_EQ(rpr_encode(p), (Embedding{1, 2, 3}));
}

TEST(Rpr, SyntheticPolicyHas26Entries) {
  auto pop = envs::synth_policy_population(3, 5);
  for (const auto& p : pop) EXPECT_EQ(rpr_encode(p).size(), 26u);
  EXPECT_EQ(rpr_encode(pop[0]), rpr_encode(pop[0]));
}

TEST(Rpr, RecordAppendsLogStd) {
  MlpParams p;
  p.layers.push_back({Tensor::from_rows({{1, 2}}), Tensor::from_rows({{3}}), Activation::Tanh});
  PolicyRecord rec;
  rec.params = p;
  rec.log_std = Tensor::from_rows({{-0.5}});
  EXPECT_EQ(record_rpr(rec), (Embedding{1, 2, 3, -0.5}));
}

TEST(RandomPr, KeyedOnSeedAndId) {
  EXPECT_EQ(random_pr(7, 64, 1), random_pr(7, 64, 1));
  EXPECT_NE(random_pr(7, 64, 1), random_pr(7, 64, 2));
  std::set<Embedding> seen;
  for (std::uint64_t id = 0; id < 100; ++id) {
    auto e = random_pr(id, 64, 1);
    ASSERT_EQ(e.size(), 64u);
    for (double v : e) {
      EXPECT_GT(v, -1.0);
      EXPECT_LT(v, 1.0);
    }
    seen.insert(e);
  }
  EXPECT_EQ(seen.size(), 100u);
  EXPECT_THROW(random_pr(0, 0, 1), std::invalid_argument);
}

TEST(RandomPr, IndependentAcrossIds) {
  // Correlation between consecutive ids should look like that of independent draws.
  double sxy = 0.0, sxx = 0.0, syy = 0.0;
  for (std::uint64_t id = 0; id < 100; ++id) {
    auto a = random_pr(id, 64, 3), b = random_pr(id + 1, 64, 3);
    for (std::size_t i = 0; i < 64; ++i) {
      sxy += a[i] * b[i];
      sxx += a[i] * a[i];
      syy += b[i] * b[i];
    }
  }
  EXPECT_LT(std::abs(sxy / std::sqrt(sxx * syy)), 4.0 / std::sqrt(6400.0));
}

// ---------------------------------------------------------------------------

TEST(Opr, LayerRowsAppendBias) {
  nets::Layer l{Tensor::from_rows({{1, 2}, {3, 4}}), Tensor::from_rows({{0.5, 1.5}}),
                Activation::Tanh};
  EXPECT_EQ(layer_rows(l), Tensor::from_rows({{1, 2, 0.5}, {3, 4, 1.5}}));
}

TEST(Opr, IdentityElementReducesToRowMean) {
  nets::Layer l{Tensor::from_rows({{1, 2}, {3, 4}}), Tensor::from_rows({{0.5, 1.5}}),
                Activation::Tanh};
  Tape tape;
  Var f = opr_layer_feature(tape, identity_net(3), layer_rows(l));
  EXPECT_EQ(tape.value(f), Tensor::from_rows({{2, 3, 1}}));
}

TEST(Opr, RowPermutationGivesIdenticalEmbedding) {
  Rng rng(11);
  const std::size_t sizes[] = {6, 16, 16, 2};
  auto policy = nets::make_mlp(sizes, Activation::Relu, Activation::Tanh, rng);
  for (auto& l : policy.layers)
    for (auto& b : l.bias.values()) b = uniform(rng, -1, 1);
  auto enc = make_opr_encoder(sizes, 32, 16, 64, rng);
  const auto base = opr_encode(enc, policy);
  ASSERT_EQ(base.size(), 64u);
  for (int trial = 0; trial < 5; ++trial) {
    MlpParams permuted = policy;
    for (auto& l : permuted.layers) {
      std::vector<std::size_t> perm(l.out_dim());
      std::iota(perm.begin(), perm.end(), std::size_t{0});
      std::shuffle(perm.begin(), perm.end(), rng);
      nets::Layer copy = l;
      for (std::size_t r = 0; r < perm.size(); ++r) {
        for (std::size_t c = 0; c < l.in_dim(); ++c) l.weight(r, c) = copy.weight(perm[r], c);
        l.bias(0, r) = copy.bias(0, perm[r]);
      }
    }
    ASSERT_NE(permuted, policy);
    EXPECT_EQ(opr_encode(enc, permuted), base);
  }
}

TEST(Opr, DistinctPoliciesGiveDistinctEmbeddings) {
  Rng rng(12);
  auto pop = envs::synth_policy_population(2, 4);
  auto enc = make_opr_encoder(kSynthSizes, 16, 8, 8, rng);
  EXPECT_NE(opr_encode(enc, pop[0]), opr_encode(enc, pop[1]));
}

TEST(Opr, ShapeMismatchRejected) {
  Rng rng(13);
  auto enc = make_opr_encoder(kSynthSizes, 16, 8, 8, rng);
  const std::size_t other[] = {6, 3, 2};
  auto policy = nets::make_mlp(other, Activation::Tanh, Activation::Tanh, rng);
  EXPECT_THROW(opr_encode(enc, policy), ad::ShapeError);
  const std::size_t wide[] = {6, 3, 3, 2};
  auto policy2 = nets::make_mlp(wide, Activation::Tanh, Activation::Tanh, rng);
  EXPECT_THROW(opr_encode(enc, policy2), ad::ShapeError);
}

TEST(Opr, ValueLossGradientReachesEncoder) {
  Rng rng(14);
  auto pop = envs::synth_policy_population(1, 9);
  auto enc = make_opr_encoder(kSynthSizes, 8, 4, 4, rng);
  const std::size_t trunk[] = {8};
  auto pevfa = nets::make_pevfa(6, 4, 8, trunk, rng);
  Tensor states(5, 6);
  for (auto& v : states.values()) v = uniform(rng, -1, 1);
  Tensor targets(5, 1);
  for (auto& v : targets.values()) v = uniform(rng, -1, 1);

  Tape tape;
  Var chi = opr_encode(tape, enc, pop[0]);
  Var tiled = tape.gather_rows(chi, std::vector<std::size_t>(5, 0));
  Var v = nets::pevfa_forward(tape, pevfa, tape.constant(states), tiled);
  Var loss = tape.mean(tape.square(tape.sub(v, tape.constant(targets))));
  std::vector<Var> params;
  for (const auto* t : std::as_const(enc).tensors()) params.push_back(tape.param_var(*t));
  EXPECT_LT(ad::grad_check(tape, loss, params, 1e-5), 1e-4);
  double norm = 0.0;
  for (Var p : params)
    for (double g : tape.grad(p).values()) norm += g * g;
  EXPECT_GT(norm, 0.0);
}

// ---------------------------------------------------------------------------

TEST(Spr, IdentityNetworksGiveArithmeticMean) {
  SprEncoderParams enc{identity_net(2), identity_net(2)};
  EXPECT_EQ(spr_encode(enc, Tensor::from_rows({{1, 0}, {3, 2}})), (Embedding{2, 1}));
}

TEST(Spr, PermutationAndDuplicationInvariant) {
  Rng rng(21);
  auto enc = make_spr_encoder(6, 2, 32, 16, 64, rng);
  Tensor pairs(50, 8);
  for (auto& v : pairs.values()) v = uniform(rng, -2, 2);
  const auto base = spr_encode(enc, pairs);
  for (int trial = 0; trial < 5; ++trial) {
    std::vector<std::size_t> perm(50);
    std::iota(perm.begin(), perm.end(), std::size_t{0});
    std::shuffle(perm.begin(), perm.end(), rng);
    Tensor shuffled(50, 8);
    for (std::size_t r = 0; r < 50; ++r)
      for (std::size_t c = 0; c < 8; ++c) shuffled(r, c) = pairs(perm[r], c);
    EXPECT_EQ(spr_encode(enc, shuffled), base);
  }
  Tensor one(1, 8), many(7, 8);
  for (std::size_t c = 0; c < 8; ++c) {
    one(0, c) = pairs(0, c);
    for (std::size_t r = 0; r < 7; ++r) many(r, c) = pairs(0, c);
  }
  // (7x)/7 may round differently from x, so duplication is checked to rounding level.
  const auto a = spr_encode(enc, many), b = spr_encode(enc, one);
  for (std::size_t i = 0; i < a.size(); ++i) EXPECT_NEAR(a[i], b[i], 1e-12);
}

TEST(Spr, RejectsEmptyOrMisshapenPairs) {
  Rng rng(22);
  auto enc = make_spr_encoder(6, 2, 8, 8, 8, rng);
  EXPECT_THROW(spr_encode(enc, Tensor(0, 8)), std::invalid_argument);
  EXPECT_THROW(spr_encode(enc, Tensor(3, 7)), ad::ShapeError);
}

// ---------------------------------------------------------------------------

TEST(AugmentOpr, RatioZeroIsIdentity) {
  auto pop = envs::synth_policy_population(1, 3);
  Rng rng(1);
  EXPECT_EQ(augment_opr(pop[0], 0.0, rng), pop[0]);
}

TEST(AugmentOpr, RatioOneZeroesAllButOutputLayer) {
  auto pop = envs::synth_policy_population(1, 3);
  const MlpParams original = pop[0];
  Rng rng(1);
  auto masked = augment_opr(pop[0], 1.0, rng);
  EXPECT_EQ(pop[0], original);
  for (std::size_t i = 0; i + 1 < masked.layers.size(); ++i) {
    for (double v : masked.layers[i].weight.values()) EXPECT_EQ(v, 0.0);
    for (double v : masked.layers[i].bias.values()) EXPECT_EQ(v, 0.0);
  }
  EXPECT_EQ(masked.layers.back(), original.layers.back());
}

TEST(AugmentOpr, MaskedFractionNearRatio) {
  Rng rng(2);
  const std::size_t sizes[] = {100, 100, 2};
  auto policy = nets::make_mlp(sizes, Activation::Relu, Activation::Tanh, rng);
  auto masked = augment_opr(policy, 0.1, rng);
  std::size_t zeros = 0;
  for (double v : masked.layers[0].weight.values()) zeros += (v == 0.0);
  const double frac = static_cast<double>(zeros) / 10000.0;
  EXPECT_GE(frac, 0.08);
  EXPECT_LE(frac, 0.12);
  EXPECT_EQ(masked.layers[1], policy.layers[1]);
  EXPECT_THROW(augment_opr(policy, 1.5, rng), std::invalid_argument);
}

TEST(AugmentOpr, NoiseVariantLeavesOutputLayer) {
  Rng rng(3);
  const std::size_t sizes[] = {10, 10, 2};
  auto policy = nets::make_mlp(sizes, Activation::Relu, Activation::Tanh, rng);
  auto noisy = augment_opr_noise(policy, 0.5, 0.1, rng);
  EXPECT_EQ(noisy.layers[1], policy.layers[1]);
  std::size_t changed = 0;
  for (std::size_t i = 0; i < 100; ++i) {
    changed += noisy.layers[0].weight[i] != policy.layers[0].weight[i];
  }
  EXPECT_GT(changed, 25u);
  EXPECT_LT(changed, 75u);
}

TEST(AugmentSpr, SizesAndSubsets) {
  Rng rng(4);
  Tensor pairs(500, 3);
  for (std::size_t r = 0; r < 500; ++r) pairs(r, 0) = static_cast<double>(r);
  EXPECT_EQ(augment_spr(pairs, 0.8, rng).rows(), 400u);
  EXPECT_EQ(augment_spr(pairs, 0.001, rng).rows(), 1u);

  auto full = augment_spr(pairs, 1.0, rng);
  std::vector<double> ids;
  for (std::size_t r = 0; r < full.rows(); ++r) ids.push_back(full(r, 0));
  std::sort(ids.begin(), ids.end());
  for (std::size_t r = 0; r < 500; ++r) EXPECT_EQ(ids[r], static_cast<double>(r));

  auto subset_of = [](const Tensor& t) {
    std::set<double> s;
    for (std::size_t r = 0; r < t.rows(); ++r) s.insert(t(r, 0));
    return s;
  };
  int differing = 0;
  for (int k = 0; k < 20; ++k) {
    auto a = subset_of(augment_spr(pairs, 0.8, rng));
    auto b = subset_of(augment_spr(pairs, 0.8, rng));
    EXPECT_EQ(a.size(), 400u);
    differing += a != b;
  }
  EXPECT_EQ(differing, 20);
  EXPECT_THROW(augment_spr(Tensor(0, 3), 0.5, rng), std::invalid_argument);
  EXPECT_THROW(augment_spr(pairs, 0.0, rng), std::invalid_argument);
}

// ---------------------------------------------------------------------------

TEST(InfoNce, UniformLogitsGiveLogKPlusOne) {
  Tensor w(3, 3);
  for (int i = 0; i < 3; ++i) w(i, i) = 1.0;
  const Embedding e{0.3, -0.2, 0.9};
  const Embedding negs[] = {e, e};
  EXPECT_NEAR(infonce_loss(e, e, negs, w), std::log(3.0), 1e-12);
}

TEST(InfoNce, SaturatesToZero) {
  Tensor w(1, 1, 1.0);
  const Embedding a{100.0}, p{100.0};
  const Embedding negs[] = {{-100.0}, {0.0}};
  const double loss = infonce_loss(a, p, negs, w);
  EXPECT_GE(loss, 0.0);
  EXPECT_LT(loss, 1e-300);
}

TEST(InfoNce, MatchesNaiveFormula) {
  Rng rng(5);
  for (int trial = 0; trial < 20; ++trial) {
    Tensor w(4, 4);
    for (auto& v : w.values()) v = uniform(rng, -1, 1);
    auto draw = [&] {
      Embedding e(4);
      for (auto& v : e) v = uniform(rng, -1, 1);
      return e;
    };
    const Embedding a = draw(), p = draw();
    const std::vector<Embedding> negs{draw(), draw(), draw()};
    auto bilinear = [&](const Embedding& x, const Embedding& y) {
      double s = 0.0;
      for (int i = 0; i < 4; ++i)
        for (int j = 0; j < 4; ++j) s += x[i] * w(i, j) * y[j];
      return s;
    };
    double denom = std::exp(bilinear(a, p));
    for (const auto& n : negs) denom += std::exp(bilinear(a, n));
    const double naive = -std::log(std::exp(bilinear(a, p)) / denom);
    const double loss = infonce_loss(a, p, negs, w);
    EXPECT_NEAR(loss, naive, 1e-12);
    EXPECT_GE(loss, 0.0);
  }
}

TEST(InfoNce, BatchAgreesWithPerRowLoss) {
  Rng rng(6);
  const std::size_t b = 5, d = 3;
  Tensor anchors(b, d), keys(b, d), w(d, d);
  for (auto& v : anchors.values()) v = uniform(rng, -2, 2);
  for (auto& v : keys.values()) v = uniform(rng, -2, 2);
  for (auto& v : w.values()) v = uniform(rng, -1, 1);
  double expected = 0.0;
  for (std::size_t i = 0; i < b; ++i) {
    std::vector<Embedding> negs;
    for (std::size_t j = 0; j < b; ++j)
      if (j != i) negs.push_back(flat(Tensor::row_vector(keys.row(j))));
    expected += infonce_loss(anchors.row(i), keys.row(i), negs, w);
  }
  expected /= static_cast<double>(b);

  Tape tape;
  Var loss = infonce_batch(tape, tape.param(anchors), tape.constant(keys), tape.param(w));
  EXPECT_NEAR(tape.value(loss).item(), expected, 1e-12);
  const Var params[] = {tape.param_var(anchors), tape.param_var(w)};
  EXPECT_LT(ad::grad_check(tape, loss, params, 1e-5), 1e-4);
}

TEST(InfoNce, RejectsMissingNegatives) {
  Tensor w(1, 1, 1.0);
  const Embedding a{1.0};
  EXPECT_THROW(infonce_loss(a, a, {}, w), std::invalid_argument);
}

// ---------------------------------------------------------------------------

TEST(Momentum, EndpointsAndGeometricConvergence) {
  Tensor online = Tensor::from_rows({{1, 2, 3}});
  Tensor target = Tensor::from_rows({{-1, 0, 5}});
  const Tensor t0 = target;
  Tensor* tp[] = {&target};
  const Tensor* op[] = {&online};

  momentum_update(tp, op, 0.0);
  EXPECT_EQ(target, t0);
  momentum_update(tp, op, 1.0);
  EXPECT_EQ(target, online);

  target = t0;
  const double m = 0.05;
  for (int k = 1; k <= 100; ++k) {
    momentum_update(tp, op, m);
    for (std::size_t i = 0; i < 3; ++i) {
      const double expected = online[i] + std::pow(1.0 - m, k) * (t0[i] - online[i]);
      EXPECT_NEAR(target[i], expected, 1e-12);
    }
  }
  Tensor wrong(1, 2);
  Tensor* bad[] = {&wrong};
  EXPECT_THROW(momentum_update(bad, op, 0.5), ad::ShapeError);
}

// ---------------------------------------------------------------------------

TEST(Aux, ExactPredictionWithUnitSigma) {
  Rng rng(7);
  const std::size_t hidden[] = {4};
  auto dec = make_aux_decoder(3, 2, 2, hidden, rng);
  for (auto* t : dec.policy.mean_net.tensors()) t->fill(0.0);
  dec.policy.mean_net.layers.back().bias = Tensor::from_rows({{0.3, -0.6}});
  Tensor states(4, 3), actions(4, 2);
  for (auto& v : states.values()) v = uniform(rng, -1, 1);
  for (std::size_t r = 0; r < 4; ++r) {
    actions(r, 0) = std::tanh(0.3);
    actions(r, 1) = std::tanh(-0.6);
  }
  const Embedding chi{0.5, -0.5};
  EXPECT_NEAR(aux_loss(dec, chi, states, actions), 0.5 * std::log(2 * std::numbers::pi) * 2,
              1e-12);
  EXPECT_THROW(aux_loss(dec, chi, Tensor(0, 3), Tensor(0, 2)), std::invalid_argument);
}

TEST(Aux, IdenticalPairsEqualSinglePair) {
  Rng rng(8);
  const std::size_t hidden[] = {8};
  auto dec = make_aux_decoder(3, 2, 2, hidden, rng);
  Tensor s1 = Tensor::from_rows({{0.1, 0.2, -0.3}}), a1 = Tensor::from_rows({{0.5, -0.1}});
  Tensor sk(6, 3), ak(6, 2);
  for (std::size_t r = 0; r < 6; ++r) {
    std::copy(s1.values().begin(), s1.values().end(), sk.row(r).begin());
    std::copy(a1.values().begin(), a1.values().end(), ak.row(r).begin());
  }
  const Embedding chi{1.0, 2.0};
  EXPECT_NEAR(aux_loss(dec, chi, sk, ak), aux_loss(dec, chi, s1, a1), 1e-14);
}

TEST(Aux, LossDecreasesOnFixedBatch) {
  Rng rng(9);
  const std::size_t hidden[] = {16};
  auto dec = make_aux_decoder(3, 2, 2, hidden, rng);
  Tensor states(32, 3), actions(32, 2);
  for (auto& v : states.values()) v = uniform(rng, -1, 1);
  for (std::size_t r = 0; r < 32; ++r) {
    actions(r, 0) = 0.5 * states(r, 0);
    actions(r, 1) = -0.3 * states(r, 1) + 0.2;
  }
  const Embedding chi{0.2, -0.4};
  auto params = dec.tensors();
  ad::AdamState adam(params, 1e-2);
  std::vector<double> losses;
  for (int step = 0; step < 300; ++step) {
    Tape tape;
    Var loss = aux_loss(tape, dec, tape.constant(Tensor::row_vector(chi)), states, actions);
    losses.push_back(tape.value(loss).item());
    tape.backward(loss);
    ad::adam_step(params, ad::collect_grads(tape, params), adam);
  }
  // Trend check over windows rather than strict monotonicity.
  for (std::size_t k = 50; k < losses.size(); k += 50) {
    double early = 0.0, late = 0.0;
    for (std::size_t i = k - 50; i < k - 25; ++i) early += losses[i];
    for (std::size_t i = k - 25; i < k; ++i) late += losses[i];
    EXPECT_LT(late, early);
  }
  EXPECT_LT(losses.back(), losses.front() - 1.0);
}

// ---------------------------------------------------------------------------

TEST(Record, FlattensTrajectoriesAndSamplesPairs) {
  auto recs = synthetic_records(1, 3, 5);
  const auto& rec = recs[0];
  EXPECT_EQ(rec.steps(), 50u);
  EXPECT_EQ(rec.states.rows(), 50u);
  EXPECT_EQ(rec.actions.cols(), 2u);
  EXPECT_EQ(rec.spr_pairs.rows(), 20u);
  EXPECT_EQ(rec.spr_pairs.cols(), 8u);
  EXPECT_EQ(flat(Tensor::row_vector(rec.states.row(10))), rec.trajectories[1].states[0]);
  double total = 0.0;
  for (const auto& t : rec.trajectories) total += t.total_reward();
  EXPECT_DOUBLE_EQ(rec.avg_return, total / 5.0);
  Rng rng(1);
  auto t = rec.trajectories;
  EXPECT_THROW(make_record(0, 0, rec.params, Tensor(), t, {1.0}, 5, rng), std::invalid_argument);
}

TEST(Encoder, DimensionsPerKind) {
  const std::size_t sizes[] = {6, 8, 8, 2};
  auto rpr = make_encoder(small_config(ReprKind::Rpr, ReprLoss::E2E), sizes, true, 6, 2, 1);
  EXPECT_EQ(rpr.dim, 56u + 72u + 18u + 2u);
  EXPECT_FALSE(rpr.trainable());
  auto ran = make_encoder(small_config(ReprKind::Random, ReprLoss::E2E), sizes, true, 6, 2, 1);
  EXPECT_EQ(ran.dim, 8u);
  auto opr = make_encoder(small_config(ReprKind::Opr, ReprLoss::E2E), sizes, true, 6, 2, 1);
  EXPECT_EQ(opr.opr.element_nets.size(), 3u);
  EXPECT_EQ(opr.opr.element_nets[1].input_dim(), 9u);
  EXPECT_TRUE(opr.trainable());
  EXPECT_THROW(make_encoder(small_config(ReprKind::Rpr, ReprLoss::CL), sizes, true, 6, 2, 1),
               std::invalid_argument);
}

TEST(Encoder, EveryKindEncodesRecordsToFixedFiniteDim) {
  auto recs = synthetic_records(3, 8);
  for (auto kind : {ReprKind::Rpr, ReprKind::Random, ReprKind::Opr, ReprKind::Spr}) {
    auto enc = make_encoder(small_config(kind, ReprLoss::E2E), kSynthSizes, false, 6, 2, 4);
    for (const auto& rec : recs) {
      auto e = encode(enc, rec);
      EXPECT_EQ(e.size(), enc.dim) << repr_kind_name(kind);
      for (double v : e) EXPECT_TRUE(std::isfinite(v));
      EXPECT_EQ(e, encode(enc, rec));
    }
  }
}

TEST(TrainRepresentation, E2EModeIsNoOp) {
  auto recs = synthetic_records(4, 2);
  auto cfg = small_config(ReprKind::Opr, ReprLoss::E2E);
  auto tr = make_trainer(cfg, make_encoder(cfg, kSynthSizes, false, 6, 2, 1), 6, 2, 1);
  const auto before = tr.online.opr.post_net;
  Rng rng(1);
  EXPECT_EQ(train_representation(tr, recs, rng), 0.0);
  EXPECT_EQ(tr.online.opr.post_net, before);
}

TEST(TrainRepresentation, ContrastiveNeedsTwoRecords) {
  auto recs = synthetic_records(1, 2);
  auto cfg = small_config(ReprKind::Opr, ReprLoss::CL);
  auto tr = make_trainer(cfg, make_encoder(cfg, kSynthSizes, false, 6, 2, 1), 6, 2, 1);
  Rng rng(1);
  EXPECT_THROW(train_representation(tr, recs, rng), std::invalid_argument);
}

TEST(TrainRepresentation, ContrastiveLossDecreases) {
  for (auto kind : {ReprKind::Opr, ReprKind::Spr}) {
    auto recs = synthetic_records(16, 5);
    auto cfg = small_config(kind, ReprLoss::CL);
    auto tr = make_trainer(cfg, make_encoder(cfg, kSynthSizes, false, 6, 2, 1), 6, 2, 1);
    const auto target_before = tr.target.tensors();
    Rng rng(2);
    std::vector<double> losses;
    for (int step = 0; step < 200; ++step) losses.push_back(train_representation(tr, recs, rng));
    double first = 0.0, last = 0.0;
    for (int i = 0; i < 20; ++i) {
      first += losses[i];
      last += losses[180 + i];
    }
    EXPECT_LT(last, first) << repr_kind_name(kind);
    EXPECT_GT(losses.front(), 0.0);
    // The momentum copy trails the online encoder but has moved.
    EXPECT_NE(*tr.target.tensors().front(), *tr.online.tensors().front());
  }
}

TEST(TrainRepresentation, AuxDecoderRecoversHeldOutActions) {
  auto recs = synthetic_records(16, 6, 8);
  auto cfg = small_config(ReprKind::Opr, ReprLoss::Aux);
  cfg.aux_lr = 3e-3;
  auto tr = make_trainer(cfg, make_encoder(cfg, kSynthSizes, false, 6, 2, 1), 6, 2, 1);
  Rng rng(3);
  for (int step = 0; step < 1500; ++step) train_representation(tr, recs, rng);

  // Held-out states: fresh walker positions, actions from each policy itself.
  Rng probe(99);
  double mse = 0.0, var = 0.0;
  std::size_t count = 0;
  for (int k = 0; k < 50; ++k) {
    envs::WalkerState ws{uniform(probe, -1.5, 1.5), uniform(probe, -1.5, 1.5)};
    auto f = ws.features();
    std::vector<std::vector<double>> acts;
    for (const auto& rec : recs) acts.push_back(nets::mlp_eval(rec.params, f));
    for (std::size_t d = 0; d < 2; ++d) {
      double mean = 0.0;
      for (const auto& a : acts) mean += a[d];
      mean /= static_cast<double>(acts.size());
      for (const auto& a : acts) var += (a[d] - mean) * (a[d] - mean);
    }
    for (std::size_t i = 0; i < recs.size(); ++i) {
      auto chi = encode(tr.online, recs[i]);
      std::vector<double> in(f.begin(), f.end());
      in.insert(in.end(), chi.begin(), chi.end());
      auto pred = nets::mlp_eval(tr.decoder.policy.mean_net, in);
      for (std::size_t d = 0; d < 2; ++d) mse += (pred[d] - acts[i][d]) * (pred[d] - acts[i][d]);
      ++count;
    }
  }
  EXPECT_LT(mse / count, var / count);
}

// ---------------------------------------------------------------------------

TEST(Persistence, EncoderAndRecordRoundTrip) {
  auto recs = synthetic_records(2, 7);
  for (auto kind : {ReprKind::Rpr, ReprKind::Random, ReprKind::Opr, ReprKind::Spr}) {
    auto enc = make_encoder(small_config(kind, ReprLoss::E2E), kSynthSizes, false, 6, 2, 4);
    std::stringstream ss;
    write_encoder(ss, enc);
    write_record(ss, recs[1]);
    auto enc2 = read_encoder(ss);
    auto rec2 = read_record(ss);
    EXPECT_EQ(rec2.params, recs[1].params);
    EXPECT_EQ(rec2.spr_pairs, recs[1].spr_pairs);
    EXPECT_EQ(rec2.avg_return, recs[1].avg_return);
    EXPECT_EQ(encode(enc2, rec2), encode(enc, recs[1])) << repr_kind_name(kind);
  }
  std::stringstream bad("encoder nope 3 1\n");
  EXPECT_THROW(read_encoder(bad), std::invalid_argument);
}

TEST(EmbeddingCsv, HeaderAndRows) {
  std::vector<EmbeddingRow> rows{{3, 1, 7, -0.5, {0.25, 1.0}}, {4, 1, 8, 2.0, {0.0, -1.0}}};
  std::ostringstream os;
  write_embeddings_csv(os, rows);
  EXPECT_EQ(os.str(),
            "policy_id,trial,iteration,avg_return,dim_0,dim_1\n"
            "3,1,7,-0.5,0.25,1\n"
            "4,1,8,2,0,-1\n");
  rows[1].embedding.push_back(1.0);
  std::ostringstream os2;
  EXPECT_THROW(write_embeddings_csv(os2, rows), std::invalid_argument);
}
