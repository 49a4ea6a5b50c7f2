#include "pevfa/rl_core.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <limits>
#include <map>
#include <numeric>
#include <stdexcept>

namespace pevfa::rl {

using ad::Tape;
using ad::Var;

namespace {

Var stack_rows(Tape& tape, std::span<const Var> rows) {
  std::vector<Var> cols;
  cols.reserve(rows.size());
  for (Var r : rows) cols.push_back(tape.transpose(r));
  return tape.transpose(tape.concat(cols));
}

Tensor gather(const Tensor& t, std::span<const std::size_t> rows) {
  Tensor out(rows.size(), t.cols());
  for (std::size_t i = 0; i < rows.size(); ++i) {
    auto src = t.row(rows[i]);
    std::copy(src.begin(), src.end(), out.row(i).begin());
  }
  return out;
}

Tensor column(std::span<const double> v, std::span<const std::size_t> rows) {
  Tensor out(rows.size(), 1);
  for (std::size_t i = 0; i < rows.size(); ++i) out[i] = v[rows[i]];
  return out;
}

Tensor tile(std::span<const double> row, std::size_t n) {
  Tensor out(n, row.size());
  for (std::size_t r = 0; r < n; ++r) std::copy(row.begin(), row.end(), out.row(r).begin());
  return out;
}

std::vector<std::size_t> iota_n(std::size_t n) {
  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  return idx;
}

std::vector<std::size_t> shuffled(std::size_t n, Rng& rng) {
  auto idx = iota_n(n);
  for (std::size_t i = n; i > 1; --i) {
    std::uniform_int_distribution<std::size_t> pick(0, i - 1);
    std::swap(idx[i - 1], idx[pick(rng)]);
  }
  return idx;
}

template <typename Step>
void for_each_minibatch(std::size_t n, int epochs, std::size_t minibatch, Rng& rng, Step step) {
  if (minibatch == 0) throw std::invalid_argument("minibatch size must be positive");
  for (int e = 0; e < epochs; ++e) {
    auto order = shuffled(n, rng);
    for (std::size_t begin = 0; begin < n; begin += minibatch) {
      const std::size_t end = std::min(n, begin + minibatch);
      step(std::span<const std::size_t>(order.data() + begin, end - begin));
    }
  }
}

double mse(const Tensor& pred, std::span<const double> targets) {
  double s = 0.0;
  for (std::size_t i = 0; i < targets.size(); ++i) {
    const double d = pred[i] - targets[i];
    s += d * d;
  }
  return s / static_cast<double>(targets.size());
}

}  // namespace

// ---------------------------------------------------------------------------

std::vector<double> mc_returns(const envs::Trajectory& traj, double gamma) {
  const std::size_t h = traj.length();
  if (h == 0) throw std::invalid_argument("mc_returns: empty trajectory");
  std::vector<double> g(h);
  double acc = 0.0;
  for (std::size_t k = h; k-- > 0;) g[k] = acc = traj.rewards[k] + gamma * acc;
  return g;
}

std::vector<double> gae(const envs::Trajectory& traj, std::span<const double> values, double gamma,
                        double lambda) {
  const std::size_t h = traj.length();
  if (values.size() != h + 1) {
    throw std::invalid_argument("gae: expected " + std::to_string(h + 1) + " values, got " +
                                std::to_string(values.size()));
  }
  const bool ended = !traj.dones.empty() && traj.dones.back();
  std::vector<double> adv(h);
  double acc = 0.0;
  for (std::size_t k = h; k-- > 0;) {
    const double next = (k + 1 == h && ended) ? 0.0 : values[k + 1];
    const double delta = traj.rewards[k] + gamma * next - values[k];
    adv[k] = acc = delta + gamma * lambda * acc;
  }
  return adv;
}

double clipped_objective(double ratio, double advantage, double eps) {
  return std::min(ratio * advantage, std::clamp(ratio, 1.0 - eps, 1.0 + eps) * advantage);
}

std::vector<double> normalize_advantages(std::span<const double> adv) {
  if (adv.empty()) return {};
  const double n = static_cast<double>(adv.size());
  double mean = 0.0;
  for (double a : adv) mean += a;
  mean /= n;
  double var = 0.0;
  for (double a : adv) var += (a - mean) * (a - mean);
  const double sd = std::max(std::sqrt(var / n), 1e-8);
  std::vector<double> out(adv.size());
  for (std::size_t i = 0; i < adv.size(); ++i) out[i] = (adv[i] - mean) / sd;
  return out;
}

// ---------------------------------------------------------------------------

std::vector<double> batch_log_probs(const nets::GaussianPolicy& policy, const Tensor& states,
                                    const Tensor& actions) {
  Tape tape(false);
  Var mean = nets::mlp_forward(tape, policy.mean_net, tape.constant(states));
  Var lp = nets::gaussian_log_prob(tape, mean, tape.constant(policy.log_std),
                                   tape.constant(actions));
  const Tensor& v = tape.value(lp);
  return {v.values().begin(), v.values().end()};
}

namespace {

// Negative mean clipped objective on the rows `idx`.
Var ppo_loss(Tape& tape, const nets::GaussianPolicy& policy, const RolloutBatch& batch,
             std::span<const double> adv, std::span<const std::size_t> idx, double eps,
             Var* ratio_out) {
  Var mean = nets::mlp_forward(tape, policy.mean_net, tape.constant(gather(batch.states, idx)));
  Var lp = nets::gaussian_log_prob(tape, mean, tape.param(policy.log_std),
                                   tape.constant(gather(batch.actions, idx)));
  Var ratio = tape.exp(tape.sub(lp, tape.constant(column(batch.old_log_probs, idx))));
  Var a = tape.constant(column(adv, idx));
  Var unclipped = tape.mul(ratio, a);
  Var clipped = tape.mul(tape.clamp(ratio, 1.0 - eps, 1.0 + eps), a);
  if (ratio_out) *ratio_out = ratio;
  return tape.neg(tape.mean(tape.minimum(unclipped, clipped)));
}

}  // namespace

double ppo_surrogate(const nets::GaussianPolicy& policy, const RolloutBatch& batch,
                     std::span<const double> advantages, double eps) {
  Tape tape(false);
  auto idx = iota_n(batch.size());
  return -tape.value(ppo_loss(tape, policy, batch, advantages, idx, eps, nullptr)).item();
}

PolicyUpdateStats ppo_policy_update(nets::GaussianPolicy& policy, ad::AdamState& adam,
                                    const RolloutBatch& batch, double eps, int epochs,
                                    std::size_t minibatch, Rng& rng) {
  if (batch.advantages.size() != batch.size() || batch.old_log_probs.size() != batch.size()) {
    throw std::invalid_argument("ppo_policy_update: ragged batch");
  }
  const auto adv = normalize_advantages(batch.advantages);
  auto params = policy.tensors();
  PolicyUpdateStats stats;
  double total = 0.0;
  for_each_minibatch(batch.size(), epochs, minibatch, rng, [&](std::span<const std::size_t> idx) {
    Tape tape;
    Var ratio;
    Var loss = ppo_loss(tape, policy, batch, adv, idx, eps, &ratio);
    if (!tape.value(ratio).all_finite() || !std::isfinite(tape.value(loss).item())) {
      ++stats.skipped;
      std::cerr << "warning: ppo minibatch skipped, non-finite importance ratio\n";
      return;
    }
    total += tape.value(loss).item();
    ++stats.minibatches;
    tape.backward(loss);
    ad::adam_step(params, ad::collect_grads(tape, params), adam);
    policy.clamp_log_std();
  });
  stats.mean_loss = stats.minibatches ? total / stats.minibatches : 0.0;
  return stats;
}

// ---------------------------------------------------------------------------

double value_loss(const nets::MlpParams& vfa, const Tensor& states,
                  std::span<const double> targets) {
  if (states.rows() != targets.size()) throw std::invalid_argument("value_loss: length mismatch");
  return mse(nets::mlp_eval(vfa, states), targets);
}

LossPair vfa_update(nets::MlpParams& vfa, ad::AdamState& adam, const Tensor& states,
                    std::span<const double> targets, int epochs, std::size_t minibatch, Rng& rng) {
  if (states.rows() != targets.size()) {
    throw std::invalid_argument("vfa_update: " + std::to_string(states.rows()) + " states but " +
                                std::to_string(targets.size()) + " targets");
  }
  LossPair out;
  out.pre = value_loss(vfa, states, targets);
  auto params = vfa.tensors();
  for_each_minibatch(states.rows(), epochs, minibatch, rng, [&](std::span<const std::size_t> idx) {
    Tape tape;
    Var v = nets::mlp_forward(tape, vfa, tape.constant(gather(states, idx)));
    Var loss = tape.mean(tape.square(tape.sub(v, tape.constant(column(targets, idx)))));
    tape.backward(loss);
    ad::adam_step(params, ad::collect_grads(tape, params), adam);
  });
  out.post = value_loss(vfa, states, targets);
  return out;
}

std::vector<Tensor*> PeVFAModel::trained_tensors() {
  std::vector<Tensor*> out;
  for (auto* t : net.tensors()) {
    if (freeze_embed_stream && (t == &net.embed_stream.weight || t == &net.embed_stream.bias)) {
      continue;
    }
    out.push_back(t);
  }
  return out;
}

PeVFAModel make_pevfa_model(nets::PeVFAParams net, double lr, bool freeze_embed_stream) {
  PeVFAModel m;
  m.net = std::move(net);
  m.freeze_embed_stream = freeze_embed_stream;
  if (freeze_embed_stream) {
    m.net.embed_stream.weight.fill(0.0);
    m.net.embed_stream.bias.fill(0.0);
  }
  m.adam = ad::AdamState(m.trained_tensors(), lr);
  return m;
}

double pevfa_loss(const nets::PeVFAParams& net, std::span<const double> embedding,
                  const repr::PolicyRecord& record) {
  if (record.steps() == 0) throw std::invalid_argument("pevfa_loss: empty record");
  return mse(nets::pevfa_eval(net, record.states, tile(embedding, record.steps())), record.returns);
}

double pevfa_historical_update(PeVFAModel& model, std::span<const repr::PolicyRecord> records,
                               const HistoricalConfig& config, Rng& rng) {
  if (records.empty() || config.steps <= 0) return 0.0;
  if (config.batch == 0 || config.policy_batch == 0) {
    throw std::invalid_argument("pevfa_historical_update: batch sizes must be positive");
  }
  const std::size_t n = records.size();
  std::vector<double> weights(n);
  for (std::size_t i = 0; i < n; ++i) {
    weights[i] = std::exp(-config.recency * static_cast<double>(n - 1 - i));
  }
  std::discrete_distribution<std::size_t> pick_policy(weights.begin(), weights.end());
  const bool learn_encoder =
      model.encoder != nullptr && model.encoder->trainable() && model.encoder_adam != nullptr;
  const std::size_t pb = std::min(config.policy_batch, config.batch);
  auto params = model.trained_tensors();
  std::vector<Tensor*> enc_params;
  if (learn_encoder) enc_params = model.encoder->tensors();

  double total = 0.0;
  for (int step = 0; step < config.steps; ++step) {
    std::vector<std::size_t> owners(pb);
    for (auto& o : owners) o = n == 1 ? 0 : pick_policy(rng);
    const std::size_t s_dim = records[owners[0]].states.cols();
    Tensor states(config.batch, s_dim), targets(config.batch, 1);
    std::vector<std::size_t> row_owner(config.batch);
    for (std::size_t r = 0; r < config.batch; ++r) {
      const auto& rec = records[owners[r % pb]];
      std::uniform_int_distribution<std::size_t> pick_state(0, rec.steps() - 1);
      const std::size_t s = pick_state(rng);
      std::copy(rec.states.row(s).begin(), rec.states.row(s).end(), states.row(r).begin());
      targets[r] = rec.returns[s];
      row_owner[r] = owners[r % pb];
    }

    Tape tape;
    Var emb;
    if (learn_encoder) {
      std::map<std::size_t, std::size_t> slot;
      std::vector<Var> chis;
      for (std::size_t o : owners) {
        if (slot.emplace(o, chis.size()).second) {
          chis.push_back(repr::encode(tape, *model.encoder, records[o]));
        }
      }
      std::vector<std::size_t> rows(config.batch);
      for (std::size_t r = 0; r < config.batch; ++r) rows[r] = slot.at(row_owner[r]);
      emb = tape.gather_rows(stack_rows(tape, chis), std::move(rows));
    } else {
      const std::size_t d = records[owners[0]].embedding.size();
      Tensor e(config.batch, d);
      for (std::size_t r = 0; r < config.batch; ++r) {
        const auto& chi = records[row_owner[r]].embedding;
        if (chi.size() != d) throw std::invalid_argument("pevfa_historical_update: missing embedding");
        std::copy(chi.begin(), chi.end(), e.row(r).begin());
      }
      emb = tape.constant(std::move(e));
    }
    Var v = nets::pevfa_forward(tape, model.net, tape.constant(std::move(states)), emb);
    Var loss = tape.mean(tape.square(tape.sub(v, tape.constant(std::move(targets)))));
    total += tape.value(loss).item();
    tape.backward(loss);
    ad::adam_step(params, ad::collect_grads(tape, params), model.adam);
    if (learn_encoder) ad::adam_step(enc_params, ad::collect_grads(tape, enc_params), *model.encoder_adam);
  }
  return total / config.steps;
}

LossPair pevfa_current_update(PeVFAModel& model, const repr::PolicyRecord& record,
                              std::span<const double> embedding, int epochs,
                              std::size_t minibatch, Rng& rng) {
  LossPair out;
  out.pre = pevfa_loss(model.net, embedding, record);
  auto params = model.trained_tensors();
  for_each_minibatch(record.steps(), epochs, minibatch, rng, [&](std::span<const std::size_t> idx) {
    Tape tape;
    Var v = nets::pevfa_forward(tape, model.net, tape.constant(gather(record.states, idx)),
                                tape.constant(tile(embedding, idx.size())));
    Var loss = tape.mean(tape.square(tape.sub(v, tape.constant(column(record.returns, idx)))));
    tape.backward(loss);
    ad::adam_step(params, ad::collect_grads(tape, params), model.adam);
  });
  out.post = pevfa_loss(model.net, embedding, record);
  return out;
}

// ---------------------------------------------------------------------------

RecordBuffer::RecordBuffer(std::size_t capacity_steps) : capacity_(capacity_steps) {
  if (capacity_ == 0) throw std::invalid_argument("RecordBuffer: capacity must be positive");
}

void RecordBuffer::push(repr::PolicyRecord record) {
  total_steps_ += record.steps();
  records_.push_back(std::move(record));
  std::size_t drop = 0;
  while (records_.size() - drop > 1 && total_steps_ > capacity_) {
    total_steps_ -= records_[drop].steps();
    ++drop;
  }
  records_.erase(records_.begin(), records_.begin() + static_cast<std::ptrdiff_t>(drop));
}

// ---------------------------------------------------------------------------

const char* algo_name(Algo algo) { return algo == Algo::Ppo ? "ppo" : "ppo-pevfa"; }

Algo parse_algo(const std::string& name) {
  if (name == "ppo") return Algo::Ppo;
  if (name == "ppo-pevfa") return Algo::PpoPeVFA;
  throw std::invalid_argument("unknown algorithm '" + name + "' (ppo|ppo-pevfa)");
}

void TrainConfig::validate() const {
  if (iterations < 0) throw std::invalid_argument("train: iterations must be >= 0");
  if (steps_per_iteration <= 0) throw std::invalid_argument("train: steps_per_iteration must be positive");
  if (!(clip > 0.0 && clip < 1.0)) throw std::invalid_argument("train: clip must lie in (0,1)");
  if (!(gamma >= 0.0 && gamma <= 1.0) || !(lambda >= 0.0 && lambda <= 1.0)) {
    throw std::invalid_argument("train: gamma and lambda must lie in [0,1]");
  }
  if (!(policy_lr > 0.0) || !(value_lr > 0.0)) throw std::invalid_argument("train: learning rates must be positive");
  if (minibatch == 0 || actor_epochs < 0 || critic_epochs < 0) {
    throw std::invalid_argument("train: minibatch must be positive and epochs non-negative");
  }
  if (buffer_capacity == 0 || historical.batch == 0 || historical.policy_batch == 0) {
    throw std::invalid_argument("train: buffer capacity and historical batches must be positive");
  }
  if (historical_interval < 1) throw std::invalid_argument("train: historical_interval must be >= 1");
  if (historical.recency < 0.0) throw std::invalid_argument("train: recency weight must be >= 0");
  if (keep_policy_path && probe_states == 0) throw std::invalid_argument("train: probe_states must be positive");
  if (pevfa_stream == 0 || pevfa_trunk.empty()) throw std::invalid_argument("train: bad PeVFA shape");
  if (algo == Algo::Ppo && value_arch == ValueArch::Mlp && value_hidden.empty()) {
    throw std::invalid_argument("train: value network needs a hidden layer");
  }
  if (algo == Algo::PpoPeVFA && shadow_pevfa) {
    throw std::invalid_argument("train: shadow_pevfa only applies to ppo");
  }
  repr.validate();
}

void write_iteration_csv(std::ostream& os, std::span<const IterationLog> logs) {
  os << "iteration,env_steps,avg_return,policy_loss,vfa_loss_pre,vfa_loss_post,pevfa_loss_pre,"
        "pevfa_loss_post,repr_loss,wallclock_s\n";
  os << std::setprecision(std::numeric_limits<double>::max_digits10);
  for (const auto& l : logs) {
    os << l.iteration << ',' << l.env_steps << ',' << l.avg_return << ',' << l.policy_loss << ','
       << l.vfa_loss_pre << ',' << l.vfa_loss_post << ',' << l.pevfa_loss_pre << ','
       << l.pevfa_loss_post << ',' << l.repr_loss << ',' << l.wallclock_s << '\n';
  }
}

// ---------------------------------------------------------------------------

namespace {

struct Collected {
  std::vector<envs::Trajectory> trajs;
  RolloutBatch batch;
  Tensor all_states;  // per trajectory: its H+1 states, trajectory after trajectory
  double avg_return = 0.0;
};

Collected collect(const nets::GaussianPolicy& policy, const envs::EnvConfig& env, int steps,
                  double gamma, std::uint64_t seed) {
  const int episodes = (steps + env.horizon - 1) / env.horizon;
  envs::Actor actor = [&policy](std::span<const double> s, Rng& rng) {
    auto out = nets::policy_forward(policy, s);
    return nets::policy_sample(out.mean, out.log_std, rng);
  };
  Collected c;
  c.trajs = envs::rollout(env, actor, episodes, env.horizon, seed);
  const std::size_t sd = policy.state_dim(), ad = policy.action_dim();
  std::size_t n = 0, n_all = 0;
  for (const auto& t : c.trajs) {
    n += t.length();
    n_all += t.states.size();
  }
  c.batch.states = Tensor(n, sd);
  c.batch.actions = Tensor(n, ad);
  c.all_states = Tensor(n_all, sd);
  std::size_t row = 0, row_all = 0;
  double total = 0.0;
  for (const auto& t : c.trajs) {
    total += t.total_reward();
    for (std::size_t k = 0; k < t.length(); ++k, ++row) {
      std::copy(t.states[k].begin(), t.states[k].end(), c.batch.states.row(row).begin());
      std::copy(t.actions[k].begin(), t.actions[k].end(), c.batch.actions.row(row).begin());
    }
    for (const auto& s : t.states) std::copy(s.begin(), s.end(), c.all_states.row(row_all++).begin());
    auto g = mc_returns(t, gamma);
    c.batch.returns.insert(c.batch.returns.end(), g.begin(), g.end());
  }
  c.avg_return = total / static_cast<double>(c.trajs.size());
  c.batch.old_log_probs = batch_log_probs(policy, c.batch.states, c.batch.actions);
  return c;
}

void fill_advantages(Collected& c, const Tensor& all_values, double gamma, double lambda) {
  c.batch.advantages.clear();
  std::size_t offset = 0;
  for (const auto& t : c.trajs) {
    std::span<const double> v(all_values.data() + offset, t.states.size());
    auto a = gae(t, v, gamma, lambda);
    c.batch.advantages.insert(c.batch.advantages.end(), a.begin(), a.end());
    offset += t.states.size();
  }
}

Tensor strided_rows(const Tensor& t, std::size_t count) {
  const std::size_t n = std::min(count, t.rows());
  std::vector<std::size_t> rows(n);
  for (std::size_t i = 0; i < n; ++i) rows[i] = i * t.rows() / n;
  return gather(t, rows);
}

std::vector<std::size_t> policy_sizes(const TrainConfig& cfg, std::size_t s, std::size_t a) {
  std::vector<std::size_t> sizes{s};
  sizes.insert(sizes.end(), cfg.policy_hidden.begin(), cfg.policy_hidden.end());
  sizes.push_back(a);
  return sizes;
}

class Checkpointer {
 public:
  explicit Checkpointer(const TrainConfig& cfg) : every_(cfg.checkpoint_every) {
    if (cfg.checkpoint_dir.empty()) return;
    dir_ = cfg.checkpoint_dir;
    std::filesystem::create_directories(dir_);
    records_.open(dir_ / "records.txt", std::ios::trunc);
    if (!records_) throw std::runtime_error("cannot write " + (dir_ / "records.txt").string());
  }

  bool enabled() const { return !dir_.empty(); }

  void record(const repr::PolicyRecord& rec) {
    if (enabled()) repr::write_record(records_, rec);
  }

  void maybe_save(int iteration, bool last, const nets::GaussianPolicy& policy,
                  const nets::MlpParams* vfa, const nets::PeVFAParams* pevfa,
                  const repr::PolicyEncoder* encoder) {
    if (!enabled()) return;
    const bool periodic = every_ > 0 && (iteration + 1) % every_ == 0;
    if (!periodic && !last) return;
    records_.flush();
    const auto sub = dir_ / ("iter_" + std::to_string(iteration));
    std::filesystem::create_directories(sub);
    {
      std::ofstream os(sub / "policy.txt");
      nets::write_snapshot(os, policy.mean_net);
      nets::write_tensor(os, "log_std", policy.log_std);
    }
    if (vfa) {
      std::ofstream os(sub / "vfa.txt");
      nets::write_snapshot(os, *vfa);
    }
    if (pevfa) {
      std::ofstream os(sub / "pevfa.txt");
      nets::MlpParams s, e;
      s.layers.push_back(pevfa->state_stream);
      e.layers.push_back(pevfa->embed_stream);
      nets::write_snapshot(os, s);
      nets::write_snapshot(os, e);
      nets::write_snapshot(os, pevfa->trunk);
    }
    if (encoder) {
      std::ofstream os(sub / "encoder.txt");
      repr::write_encoder(os, *encoder);
      std::ofstream latest(dir_ / "encoder.txt");
      repr::write_encoder(latest, *encoder);
    }
  }

 private:
  int every_;
  std::filesystem::path dir_;
  std::ofstream records_;
};

RunResult run_gpi(const TrainConfig& cfg, const envs::EnvConfig& env, std::uint64_t seed) {
  cfg.validate();
  env.validate();
  const bool pevfa_advantages = cfg.algo == Algo::PpoPeVFA;
  const bool use_pevfa = pevfa_advantages || cfg.shadow_pevfa;
  const std::size_t sd = envs::env_state_dim(env.id), adim = envs::env_action_dim(env.id);
  const auto sizes = policy_sizes(cfg, sd, adim);

  Rng init_pi = make_rng(seed, "policy-init");
  RunResult result;
  nets::GaussianPolicy& policy = result.policy;
  policy = nets::make_gaussian_policy(sd, adim, cfg.policy_hidden, init_pi);
  ad::AdamState policy_adam(policy.tensors(), cfg.policy_lr);

  repr::ReprConfig repr_cfg = cfg.repr;
  if (cfg.shadow_pevfa) {
    repr_cfg.kind = repr::ReprKind::Rpr;
    repr_cfg.loss = repr::ReprLoss::E2E;
  }
  repr::ReprTrainer trainer = repr::make_trainer(
      repr_cfg, repr::make_encoder(repr_cfg, sizes, true, sd, adim, substream_seed(seed, "encoder")),
      sd, adim, substream_seed(seed, "repr-heads"));
  ad::AdamState encoder_adam(trainer.online.tensors(), cfg.value_lr);

  auto fresh_pevfa = [&] {
    Rng init = make_rng(seed, "pevfa-init");
    return nets::make_pevfa(sd, trainer.online.dim, cfg.pevfa_stream, cfg.pevfa_trunk, init);
  };

  nets::MlpParams vfa;
  ad::AdamState vfa_adam;
  if (!pevfa_advantages) {
    if (cfg.value_arch == ValueArch::PeVFAStateOnly) {
      vfa = nets::pevfa_state_only(fresh_pevfa());
    } else {
      Rng init = make_rng(seed, "value-init");
      std::vector<std::size_t> vs{sd};
      vs.insert(vs.end(), cfg.value_hidden.begin(), cfg.value_hidden.end());
      vs.push_back(1);
      vfa = nets::make_mlp(vs, nets::Activation::Relu, nets::Activation::Identity, init);
    }
    vfa_adam = ad::AdamState(vfa.tensors(), cfg.value_lr);
  }
  PeVFAModel model;
  if (use_pevfa) {
    model = make_pevfa_model(fresh_pevfa(), cfg.value_lr, cfg.freeze_embed_stream);
    model.encoder = &trainer.online;
    if (trainer.online.trainable()) model.encoder_adam = &encoder_adam;
  }

  Rng rng_value = make_rng(seed, "value-minibatch");
  Rng rng_shadow = make_rng(seed, "shadow-minibatch");
  Rng& rng_pevfa = pevfa_advantages ? rng_value : rng_shadow;
  Rng rng_policy = make_rng(seed, "policy-minibatch");
  Rng rng_hist = make_rng(seed, "historical");
  Rng rng_repr = make_rng(seed, "representation");
  Rng rng_pairs = make_rng(seed, "spr-pairs");
  RecordBuffer buffer(cfg.buffer_capacity);
  Checkpointer ckpt(cfg);
  std::int64_t env_steps = 0;

  for (int t = 0; t < cfg.iterations; ++t) {
    const auto start = std::chrono::steady_clock::now();
    IterationLog log;
    log.iteration = t;
    Collected c = collect(policy, env, cfg.steps_per_iteration, cfg.gamma,
                          substream_seed(seed, "rollout", static_cast<std::uint64_t>(t)));
    env_steps += static_cast<std::int64_t>(c.batch.size());
    log.env_steps = env_steps;
    log.avg_return = c.avg_return;

    if (!pevfa_advantages) {
      LossPair v = vfa_update(vfa, vfa_adam, c.batch.states, c.batch.returns, cfg.critic_epochs,
                              cfg.minibatch, rng_value);
      log.vfa_loss_pre = v.pre;
      log.vfa_loss_post = v.post;
    }

    repr::Embedding chi;
    if (use_pevfa) {
      repr::PolicyRecord rec = repr::make_record(
          static_cast<std::uint64_t>(t), t, policy.mean_net, policy.log_std, c.trajs,
          c.batch.returns, repr_cfg.kind == repr::ReprKind::Spr ? repr_cfg.spr_pairs : 0, rng_pairs);
      rec.embedding = repr::encode(trainer.online, rec);
      log.pevfa_loss_pre = pevfa_loss(model.net, rec.embedding, rec);
      ckpt.record(rec);
      buffer.push(std::move(rec));

      if (t % cfg.historical_interval == 0) {
        pevfa_historical_update(model, buffer.records(), cfg.historical, rng_hist);
        if (repr_cfg.loss != repr::ReprLoss::E2E && buffer.size() >= 2) {
          double sum = 0.0;
          for (int k = 0; k < cfg.repr_steps; ++k) {
            sum += repr::train_representation(trainer, buffer.records(), rng_repr);
          }
          log.repr_loss = cfg.repr_steps > 0 ? sum / cfg.repr_steps : 0.0;
        }
        if (trainer.online.trainable()) {
          for (auto& r : buffer.records()) r.embedding = repr::encode(trainer.online, r);
        }
      }
      chi = buffer.back().embedding;
      LossPair p = pevfa_current_update(model, buffer.back(), chi, cfg.critic_epochs,
                                        cfg.minibatch, rng_pevfa);
      log.pevfa_loss_post = p.post;
    }

    if (cfg.keep_policy_path) {
      result.policy_path.push_back(policy);
      result.probe_states.push_back(strided_rows(c.batch.states, cfg.probe_states));
    }
    Tensor values = pevfa_advantages
                        ? nets::pevfa_eval(model.net, c.all_states, tile(chi, c.all_states.rows()))
                        : nets::mlp_eval(vfa, c.all_states);
    fill_advantages(c, values, cfg.gamma, cfg.lambda);
    log.policy_loss = ppo_policy_update(policy, policy_adam, c.batch, cfg.clip, cfg.actor_epochs,
                                        cfg.minibatch, rng_policy)
                          .mean_loss;
    if (cfg.log_wallclock) {
      log.wallclock_s =
          std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    }
    result.logs.push_back(log);
    ckpt.maybe_save(t, t + 1 == cfg.iterations, policy, pevfa_advantages ? nullptr : &vfa,
                    use_pevfa ? &model.net : nullptr, use_pevfa ? &trainer.online : nullptr);
  }
  if (cfg.keep_policy_path) result.policy_path.push_back(policy);
  result.buffer.assign(buffer.records().begin(), buffer.records().end());
  result.encoder = trainer.online;
  return result;
}

}  // namespace

RunResult run_ppo(const TrainConfig& config, const envs::EnvConfig& env, std::uint64_t seed) {
  TrainConfig cfg = config;
  cfg.algo = Algo::Ppo;
  return run_gpi(cfg, env, seed);
}

RunResult run_ppo_pevfa(const TrainConfig& config, const envs::EnvConfig& env,
                        std::uint64_t seed) {
  TrainConfig cfg = config;
  cfg.algo = Algo::PpoPeVFA;
  cfg.shadow_pevfa = false;
  return run_gpi(cfg, env, seed);
}

RunResult run_training(const TrainConfig& config, const envs::EnvConfig& env, std::uint64_t seed) {
  return run_gpi(config, env, seed);
}

double final_return(std::span<const IterationLog> logs, std::size_t window) {
  if (logs.empty()) throw std::invalid_argument("final_return: no iterations");
  const std::size_t k = std::min(window, logs.size());
  double s = 0.0;
  for (std::size_t i = logs.size() - k; i < logs.size(); ++i) s += logs[i].avg_return;
  return s / static_cast<double>(k);
}

double random_policy_return(const envs::EnvConfig& env, int episodes, std::uint64_t seed) {
  const std::size_t adim = envs::env_action_dim(env.id);
  envs::Actor actor = [adim](std::span<const double>, Rng& rng) {
    std::vector<double> a(adim);
    for (auto& v : a) v = uniform(rng, -1.0, 1.0);
    return a;
  };
  double total = 0.0;
  for (const auto& t : envs::rollout(env, actor, episodes, env.horizon, seed)) total += t.total_reward();
  return total / episodes;
}

}  // namespace pevfa::rl
