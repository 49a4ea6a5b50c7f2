#include "pevfa/policy_repr.hpp"

#include <algorithm>
#include <cmath>
#include <iomanip>
#include <istream>
#include <limits>
#include <numeric>
#include <ostream>
#include <stdexcept>
#include <utility>

namespace pevfa::repr {

namespace {

std::vector<std::size_t> sample_without_replacement(std::size_t n, std::size_t k, Rng& rng) {
  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  k = std::min(k, n);
  for (std::size_t i = 0; i < k; ++i) {
    std::uniform_int_distribution<std::size_t> pick(i, n - 1);
    std::swap(idx[i], idx[pick(rng)]);
  }
  idx.resize(k);
  return idx;
}

Tensor gather(const Tensor& t, std::span<const std::size_t> rows) {
  Tensor out(rows.size(), t.cols());
  for (std::size_t i = 0; i < rows.size(); ++i) {
    auto src = t.row(rows[i]);
    std::copy(src.begin(), src.end(), out.row(i).begin());
  }
  return out;
}

// Stacks 1 x D rows into B x D.
Var stack_rows(Tape& tape, std::span<const Var> rows) {
  std::vector<Var> cols;
  cols.reserve(rows.size());
  for (Var r : rows) cols.push_back(tape.transpose(r));
  return tape.transpose(tape.concat(cols));
}

Embedding to_embedding(const Tensor& t) { return {t.values().begin(), t.values().end()}; }

Var encode_params(Tape& tape, const PolicyEncoder& enc, const nets::MlpParams& params) {
  return opr_encode(tape, enc.opr, params);
}

Var encode_pairs(Tape& tape, const PolicyEncoder& enc, const Tensor& pairs) {
  return spr_encode(tape, enc.spr, pairs);
}

}  // namespace

const char* repr_kind_name(ReprKind kind) {
  switch (kind) {
    case ReprKind::Rpr: return "rpr";
    case ReprKind::Random: return "random";
    case ReprKind::Opr: return "opr";
    case ReprKind::Spr: return "spr";
  }
  return "?";
}

ReprKind parse_repr_kind(const std::string& name) {
  if (name == "rpr") return ReprKind::Rpr;
  if (name == "random") return ReprKind::Random;
  if (name == "opr") return ReprKind::Opr;
  if (name == "spr") return ReprKind::Spr;
  throw std::invalid_argument("unknown representation '" + name + "' (rpr|random|opr|spr)");
}

const char* repr_loss_name(ReprLoss loss) {
  switch (loss) {
    case ReprLoss::E2E: return "e2e";
    case ReprLoss::CL: return "cl";
    case ReprLoss::Aux: return "aux";
  }
  return "?";
}

ReprLoss parse_repr_loss(const std::string& name) {
  if (name == "e2e") return ReprLoss::E2E;
  if (name == "cl") return ReprLoss::CL;
  if (name == "aux") return ReprLoss::Aux;
  throw std::invalid_argument("unknown representation loss '" + name + "' (e2e|cl|aux)");
}

// ---------------------------------------------------------------------------

Embedding rpr_encode(const nets::MlpParams& policy) {
  Embedding out;
  out.reserve(policy.param_count());
  for (const auto& l : policy.layers) {
    out.insert(out.end(), l.weight.values().begin(), l.weight.values().end());
    out.insert(out.end(), l.bias.values().begin(), l.bias.values().end());
  }
  return out;
}

Embedding random_pr(std::uint64_t policy_id, std::size_t dim, std::uint64_t seed) {
  if (dim == 0) throw std::invalid_argument("random_pr: dim must be >= 1");
  Rng rng = make_rng(seed, "random-pr", policy_id);
  Embedding out(dim);
  for (auto& v : out) v = uniform(rng, -1.0, 1.0);
  return out;
}

// ---------------------------------------------------------------------------

std::vector<Tensor*> OprEncoderParams::tensors() {
  std::vector<Tensor*> out;
  for (auto& e : element_nets)
    for (auto* t : e.tensors()) out.push_back(t);
  for (auto* t : post_net.tensors()) out.push_back(t);
  return out;
}

std::vector<const Tensor*> OprEncoderParams::tensors() const {
  std::vector<const Tensor*> out;
  for (const auto& e : element_nets)
    for (auto* t : e.tensors()) out.push_back(t);
  for (auto* t : post_net.tensors()) out.push_back(t);
  return out;
}

OprEncoderParams make_opr_encoder(std::span<const std::size_t> policy_sizes, std::size_t hidden,
                                  std::size_t feature, std::size_t embed_dim, Rng& rng) {
  if (policy_sizes.size() < 2) throw std::invalid_argument("make_opr_encoder: policy has no layers");
  OprEncoderParams enc;
  for (std::size_t i = 0; i + 1 < policy_sizes.size(); ++i) {
    const std::size_t sizes[] = {policy_sizes[i] + 1, hidden, feature};
    enc.element_nets.push_back(
        nets::make_mlp(sizes, nets::Activation::Relu, nets::Activation::Tanh, rng));
  }
  const std::size_t post[] = {feature * enc.element_nets.size(), hidden, embed_dim};
  enc.post_net = nets::make_mlp(post, nets::Activation::Relu, nets::Activation::Tanh, rng);
  return enc;
}

Tensor layer_rows(const nets::Layer& layer) {
  const std::size_t in = layer.in_dim();
  Tensor rows(layer.out_dim(), in + 1);
  for (std::size_t r = 0; r < layer.out_dim(); ++r) {
    for (std::size_t c = 0; c < in; ++c) rows(r, c) = layer.weight(r, c);
    rows(r, in) = layer.bias(0, r);
  }
  return rows;
}

Var opr_layer_feature(Tape& tape, const nets::MlpParams& element, const Tensor& rows) {
  if (rows.cols() != element.input_dim()) {
    throw ad::ShapeError("opr_encode: layer rows have width " + std::to_string(rows.cols()) +
                         ", element network expects " + std::to_string(element.input_dim()));
  }
  return tape.mean_rows(nets::mlp_forward(tape, element, tape.constant(rows)));
}

Var opr_encode(Tape& tape, const OprEncoderParams& enc, const nets::MlpParams& policy) {
  if (policy.layers.size() != enc.element_nets.size()) {
    throw ad::ShapeError("opr_encode: policy has " + std::to_string(policy.layers.size()) +
                         " layers, encoder expects " + std::to_string(enc.element_nets.size()));
  }
  std::vector<Var> features;
  for (std::size_t i = 0; i < policy.layers.size(); ++i) {
    features.push_back(opr_layer_feature(tape, enc.element_nets[i], layer_rows(policy.layers[i])));
  }
  return nets::mlp_forward(tape, enc.post_net, tape.concat(features));
}

Embedding opr_encode(const OprEncoderParams& enc, const nets::MlpParams& policy) {
  Tape tape(false);
  return to_embedding(tape.value(opr_encode(tape, enc, policy)));
}

// ---------------------------------------------------------------------------

std::vector<Tensor*> SprEncoderParams::tensors() {
  auto out = pair_net.tensors();
  for (auto* t : post_net.tensors()) out.push_back(t);
  return out;
}

std::vector<const Tensor*> SprEncoderParams::tensors() const {
  auto out = pair_net.tensors();
  for (auto* t : post_net.tensors()) out.push_back(t);
  return out;
}

SprEncoderParams make_spr_encoder(std::size_t state_dim, std::size_t action_dim,
                                  std::size_t hidden, std::size_t feature, std::size_t embed_dim,
                                  Rng& rng) {
  SprEncoderParams enc;
  const std::size_t pair[] = {state_dim + action_dim, hidden, feature};
  enc.pair_net = nets::make_mlp(pair, nets::Activation::Relu, nets::Activation::Tanh, rng);
  const std::size_t post[] = {feature, hidden, embed_dim};
  enc.post_net = nets::make_mlp(post, nets::Activation::Relu, nets::Activation::Tanh, rng);
  return enc;
}

Var spr_encode(Tape& tape, const SprEncoderParams& enc, const Tensor& pairs) {
  if (pairs.rows() == 0) throw std::invalid_argument("spr_encode: empty pair set");
  if (pairs.cols() != enc.pair_net.input_dim()) {
    throw ad::ShapeError("spr_encode: pairs have width " + std::to_string(pairs.cols()) +
                         ", pair network expects " + std::to_string(enc.pair_net.input_dim()));
  }
  Var pooled = tape.mean_rows(nets::mlp_forward(tape, enc.pair_net, tape.constant(pairs)));
  return nets::mlp_forward(tape, enc.post_net, pooled);
}

Embedding spr_encode(const SprEncoderParams& enc, const Tensor& pairs) {
  Tape tape(false);
  return to_embedding(tape.value(spr_encode(tape, enc, pairs)));
}

// ---------------------------------------------------------------------------

namespace {

template <typename Corrupt>
nets::MlpParams corrupt_hidden_layers(const nets::MlpParams& policy, double ratio, Rng& rng,
                                      Corrupt corrupt) {
  if (!(ratio >= 0.0 && ratio <= 1.0)) throw std::invalid_argument("augment: ratio outside [0,1]");
  nets::MlpParams out = policy;
  std::bernoulli_distribution hit(ratio);
  for (std::size_t i = 0; i + 1 < out.layers.size(); ++i) {
    for (auto& v : out.layers[i].weight.values())
      if (hit(rng)) v = corrupt(v);
    for (auto& v : out.layers[i].bias.values())
      if (hit(rng)) v = corrupt(v);
  }
  return out;
}

}  // namespace

nets::MlpParams augment_opr(const nets::MlpParams& policy, double mask_ratio, Rng& rng) {
  return corrupt_hidden_layers(policy, mask_ratio, rng, [](double) { return 0.0; });
}

nets::MlpParams augment_opr_noise(const nets::MlpParams& policy, double ratio, double scale,
                                  Rng& rng) {
  if (!(scale >= 0.0)) throw std::invalid_argument("augment_opr_noise: negative scale");
  // Noise draws come from a child stream so the selection pattern matches augment_opr.
  Rng noise(rng());
  return corrupt_hidden_layers(policy, ratio, rng,
                               [&](double v) { return v + scale * standard_normal(noise); });
}

Tensor augment_spr(const Tensor& pairs, double sample_ratio, Rng& rng) {
  if (pairs.rows() == 0) throw std::invalid_argument("augment_spr: empty buffer");
  if (!(sample_ratio > 0.0 && sample_ratio <= 1.0)) {
    throw std::invalid_argument("augment_spr: sample ratio outside (0,1]");
  }
  const auto k = static_cast<std::size_t>(
      std::ceil(sample_ratio * static_cast<double>(pairs.rows()) - 1e-9));
  auto idx = sample_without_replacement(pairs.rows(), std::max<std::size_t>(k, 1), rng);
  return gather(pairs, idx);
}

// ---------------------------------------------------------------------------

double infonce_loss(std::span<const double> anchor, std::span<const double> positive,
                    std::span<const Embedding> negatives, const Tensor& w) {
  const std::size_t d = anchor.size();
  if (negatives.empty()) throw std::invalid_argument("infonce_loss: need at least one negative");
  if (w.rows() != d || w.cols() != d || positive.size() != d) {
    throw ad::ShapeError("infonce_loss: dimension mismatch");
  }
  std::vector<double> aw(d, 0.0);
  for (std::size_t i = 0; i < d; ++i)
    for (std::size_t j = 0; j < d; ++j) aw[j] += anchor[i] * w(i, j);
  auto logit = [&](std::span<const double> k) {
    if (k.size() != d) throw ad::ShapeError("infonce_loss: dimension mismatch");
    double s = 0.0;
    for (std::size_t j = 0; j < d; ++j) s += aw[j] * k[j];
    return s;
  };
  std::vector<double> logits{logit(positive)};
  for (const auto& n : negatives) logits.push_back(logit(n));
  const double m = *std::max_element(logits.begin(), logits.end());
  double z = 0.0;
  for (double l : logits) z += std::exp(l - m);
  return std::log(z) - (logits[0] - m);
}

Var infonce_batch(Tape& tape, Var anchors, Var keys, Var w) {
  const Tensor& a = tape.value(anchors);
  const std::size_t b = a.rows();
  if (b < 2) throw std::invalid_argument("infonce_batch: need at least two rows for negatives");
  if (!tape.value(keys).same_shape(a)) throw ad::ShapeError("infonce_batch: anchors/keys shape");
  Var logits = tape.matmul_nt(tape.matmul(anchors, w), keys);
  Tensor row_max(b, 1);
  {
    const Tensor& l = tape.value(logits);
    for (std::size_t r = 0; r < b; ++r) {
      auto row = l.row(r);
      row_max(r, 0) = *std::max_element(row.begin(), row.end());
    }
  }
  Var shifted = tape.sub(logits, tape.constant(std::move(row_max)));
  Var lse = tape.log(tape.sum_cols(tape.exp(shifted)));
  Tensor eye(b, b);
  for (std::size_t i = 0; i < b; ++i) eye(i, i) = 1.0;
  Var diag = tape.sum_cols(tape.mul(shifted, tape.constant(std::move(eye))));
  return tape.mean(tape.sub(lse, diag));
}

void momentum_update(std::span<Tensor* const> target, std::span<const Tensor* const> online,
                     double m) {
  if (!(m >= 0.0 && m <= 1.0)) throw std::invalid_argument("momentum_update: m outside [0,1]");
  if (target.size() != online.size()) throw ad::ShapeError("momentum_update: tensor count mismatch");
  for (std::size_t i = 0; i < target.size(); ++i) {
    if (!target[i]->same_shape(*online[i])) {
      throw ad::ShapeError("momentum_update: tensor " + std::to_string(i) + " shape mismatch");
    }
  }
  for (std::size_t i = 0; i < target.size(); ++i) {
    auto t = target[i]->values();
    auto o = online[i]->values();
    for (std::size_t k = 0; k < t.size(); ++k) t[k] = (1.0 - m) * t[k] + m * o[k];
  }
}

AuxDecoder make_aux_decoder(std::size_t state_dim, std::size_t embed_dim, std::size_t action_dim,
                            std::span<const std::size_t> hidden, Rng& rng) {
  return {nets::make_gaussian_policy(state_dim + embed_dim, action_dim, hidden, rng)};
}

Var aux_loss(Tape& tape, const AuxDecoder& dec, Var embedding, const Tensor& states,
             const Tensor& actions) {
  const std::size_t n = states.rows();
  if (n == 0) throw std::invalid_argument("aux_loss: empty batch");
  if (actions.rows() != n) throw ad::ShapeError("aux_loss: states/actions row mismatch");
  if (tape.value(embedding).rows() != 1) throw ad::ShapeError("aux_loss: embedding must be 1 x D");
  Var tiled = tape.gather_rows(embedding, std::vector<std::size_t>(n, 0));
  Var input = tape.concat({tape.constant(states), tiled});
  Var mean = nets::mlp_forward(tape, dec.policy.mean_net, input);
  Var lp = nets::gaussian_log_prob(tape, mean, tape.param(dec.policy.log_std),
                                   tape.constant(actions));
  return tape.neg(tape.mean(lp));
}

double aux_loss(const AuxDecoder& dec, std::span<const double> embedding, const Tensor& states,
                const Tensor& actions) {
  Tape tape(false);
  return tape.value(aux_loss(tape, dec, tape.constant(Tensor::row_vector(embedding)), states,
                             actions))
      .item();
}

// ---------------------------------------------------------------------------

PolicyRecord make_record(std::uint64_t id, int iteration, nets::MlpParams params, Tensor log_std,
                         std::vector<envs::Trajectory> trajectories, std::vector<double> returns,
                         std::size_t spr_pair_count, Rng& rng) {
  std::size_t n = 0;
  for (const auto& t : trajectories) n += t.length();
  if (n == 0) throw std::invalid_argument("make_record: no transitions");
  if (returns.size() != n) {
    throw std::invalid_argument("make_record: " + std::to_string(returns.size()) +
                                " returns for " + std::to_string(n) + " transitions");
  }
  const std::size_t sd = trajectories.front().states.front().size();
  const std::size_t adim = trajectories.front().actions.front().size();
  PolicyRecord rec;
  rec.id = id;
  rec.iteration = iteration;
  rec.params = std::move(params);
  rec.log_std = std::move(log_std);
  rec.states = Tensor(n, sd);
  rec.actions = Tensor(n, adim);
  Tensor pairs(n, sd + adim);
  std::size_t row = 0;
  double total = 0.0;
  for (const auto& t : trajectories) {
    total += t.total_reward();
    for (std::size_t k = 0; k < t.length(); ++k, ++row) {
      for (std::size_t c = 0; c < sd; ++c) rec.states(row, c) = pairs(row, c) = t.states[k][c];
      for (std::size_t c = 0; c < adim; ++c) {
        rec.actions(row, c) = pairs(row, sd + c) = t.actions[k][c];
      }
    }
  }
  rec.avg_return = total / static_cast<double>(trajectories.size());
  rec.returns = std::move(returns);
  rec.trajectories = std::move(trajectories);
  if (spr_pair_count > 0) {
    auto idx = sample_without_replacement(n, spr_pair_count, rng);
    std::sort(idx.begin(), idx.end());
    rec.spr_pairs = gather(pairs, idx);
  }
  return rec;
}

Embedding record_rpr(const PolicyRecord& record) {
  Embedding out = rpr_encode(record.params);
  out.insert(out.end(), record.log_std.values().begin(), record.log_std.values().end());
  return out;
}

// ---------------------------------------------------------------------------

void ReprConfig::validate() const {
  if (embed_dim == 0 || encoder_hidden == 0 || encoder_feature == 0) {
    throw std::invalid_argument("repr: dimensions must be positive");
  }
  if (policy_batch == 0 || aux_batch == 0) throw std::invalid_argument("repr: batch sizes must be positive");
  if (!(mask_ratio >= 0.0 && mask_ratio <= 1.0)) throw std::invalid_argument("repr: mask_ratio outside [0,1]");
  if (!(spr_sample_ratio > 0.0 && spr_sample_ratio <= 1.0)) {
    throw std::invalid_argument("repr: spr_sample_ratio outside (0,1]");
  }
  if (!(cl_momentum > 0.0 && cl_momentum < 1.0)) throw std::invalid_argument("repr: cl_momentum outside (0,1)");
  if (!(cl_lr > 0.0) || !(aux_lr > 0.0)) throw std::invalid_argument("repr: learning rates must be positive");
  if (kind == ReprKind::Spr && spr_pairs == 0) throw std::invalid_argument("repr: spr needs spr_pairs >= 1");
  if (loss != ReprLoss::E2E && (kind == ReprKind::Rpr || kind == ReprKind::Random)) {
    throw std::invalid_argument(std::string("repr: ") + repr_loss_name(loss) +
                                " training needs a learned encoder (opr or spr), not " +
                                repr_kind_name(kind));
  }
}

std::vector<Tensor*> PolicyEncoder::tensors() {
  if (kind == ReprKind::Opr) return opr.tensors();
  if (kind == ReprKind::Spr) return spr.tensors();
  return {};
}

std::vector<const Tensor*> PolicyEncoder::tensors() const {
  if (kind == ReprKind::Opr) return opr.tensors();
  if (kind == ReprKind::Spr) return spr.tensors();
  return {};
}

PolicyEncoder make_encoder(const ReprConfig& config, std::span<const std::size_t> policy_sizes,
                           bool gaussian, std::size_t state_dim, std::size_t action_dim,
                           std::uint64_t seed) {
  config.validate();
  PolicyEncoder enc;
  enc.kind = config.kind;
  enc.seed = seed;
  Rng rng = make_rng(seed, "encoder-init");
  switch (config.kind) {
    case ReprKind::Rpr: {
      std::size_t n = 0;
      for (std::size_t i = 0; i + 1 < policy_sizes.size(); ++i) {
        n += (policy_sizes[i] + 1) * policy_sizes[i + 1];
      }
      enc.dim = n + (gaussian ? action_dim : 0);
      break;
    }
    case ReprKind::Random:
      enc.dim = config.embed_dim;
      break;
    case ReprKind::Opr:
      enc.opr = make_opr_encoder(policy_sizes, config.encoder_hidden, config.encoder_feature,
                                 config.embed_dim, rng);
      enc.dim = config.embed_dim;
      break;
    case ReprKind::Spr:
      enc.spr = make_spr_encoder(state_dim, action_dim, config.encoder_hidden,
                                 config.encoder_feature, config.embed_dim, rng);
      enc.dim = config.embed_dim;
      break;
  }
  return enc;
}

Var encode(Tape& tape, const PolicyEncoder& enc, const PolicyRecord& record) {
  switch (enc.kind) {
    case ReprKind::Rpr: {
      Embedding e = record_rpr(record);
      if (e.size() != enc.dim) {
        throw ad::ShapeError("encode: raw representation has " + std::to_string(e.size()) +
                             " entries, encoder expects " + std::to_string(enc.dim));
      }
      return tape.constant(Tensor::row_vector(e));
    }
    case ReprKind::Random:
      return tape.constant(Tensor::row_vector(random_pr(record.id, enc.dim, enc.seed)));
    case ReprKind::Opr:
      return encode_params(tape, enc, record.params);
    case ReprKind::Spr:
      return encode_pairs(tape, enc, record.spr_pairs);
  }
  throw std::logic_error("encode: unknown kind");
}

Embedding encode(const PolicyEncoder& enc, const PolicyRecord& record) {
  Tape tape(false);
  return to_embedding(tape.value(encode(tape, enc, record)));
}

// ---------------------------------------------------------------------------

std::vector<Tensor*> ReprTrainer::trained_tensors() {
  auto out = online.tensors();
  if (config.loss == ReprLoss::CL) out.push_back(&w);
  if (config.loss == ReprLoss::Aux)
    for (auto* t : decoder.tensors()) out.push_back(t);
  return out;
}

ReprTrainer make_trainer(const ReprConfig& config, PolicyEncoder encoder, std::size_t state_dim,
                         std::size_t action_dim, std::uint64_t seed) {
  config.validate();
  ReprTrainer tr;
  tr.config = config;
  tr.online = std::move(encoder);
  tr.target = tr.online;
  const std::size_t d = tr.online.dim;
  tr.w = Tensor(d, d);
  for (std::size_t i = 0; i < d; ++i) tr.w(i, i) = 1.0;
  Rng rng = make_rng(seed, "aux-decoder-init");
  const std::size_t hidden[] = {config.encoder_hidden, config.encoder_hidden};
  tr.decoder = make_aux_decoder(state_dim, d, action_dim, hidden, rng);
  const double lr = config.loss == ReprLoss::Aux ? config.aux_lr : config.cl_lr;
  auto params = tr.trained_tensors();
  tr.adam = ad::AdamState(params, lr);
  return tr;
}

double train_representation(ReprTrainer& trainer, std::span<const PolicyRecord> records,
                            Rng& rng) {
  const ReprConfig& cfg = trainer.config;
  if (cfg.loss == ReprLoss::E2E || !trainer.online.trainable()) return 0.0;
  if (records.empty()) throw std::invalid_argument("train_representation: no records");
  if (cfg.loss == ReprLoss::CL && records.size() < 2) {
    throw std::invalid_argument("train_representation: contrastive training needs >= 2 records");
  }
  auto batch = sample_without_replacement(records.size(), cfg.policy_batch, rng);
  const bool opr = trainer.online.kind == ReprKind::Opr;

  Tape tape;
  Var loss;
  if (cfg.loss == ReprLoss::CL) {
    std::vector<Var> anchors;
    Tensor keys(batch.size(), trainer.online.dim);
    for (std::size_t i = 0; i < batch.size(); ++i) {
      const PolicyRecord& rec = records[batch[i]];
      Embedding key;
      if (opr) {
        auto view = [&] {
          return cfg.noise_augment
                     ? augment_opr_noise(rec.params, cfg.mask_ratio, cfg.noise_scale, rng)
                     : augment_opr(rec.params, cfg.mask_ratio, rng);
        };
        anchors.push_back(encode_params(tape, trainer.online, view()));
        key = opr_encode(trainer.target.opr, view());
      } else {
        anchors.push_back(encode_pairs(tape, trainer.online,
                                       augment_spr(rec.spr_pairs, cfg.spr_sample_ratio, rng)));
        key = spr_encode(trainer.target.spr,
                         augment_spr(rec.spr_pairs, cfg.spr_sample_ratio, rng));
      }
      std::copy(key.begin(), key.end(), keys.row(i).begin());
    }
    loss = infonce_batch(tape, stack_rows(tape, anchors), tape.constant(std::move(keys)),
                         tape.param(trainer.w));
  } else {
    const std::size_t per = (cfg.aux_batch + batch.size() - 1) / batch.size();
    std::vector<Var> terms;
    for (std::size_t i : batch) {
      const PolicyRecord& rec = records[i];
      auto idx = sample_without_replacement(rec.steps(), per, rng);
      Var chi = encode(tape, trainer.online, rec);
      terms.push_back(aux_loss(tape, trainer.decoder, chi, gather(rec.states, idx),
                               gather(rec.actions, idx)));
    }
    Var sum = terms.front();
    for (std::size_t i = 1; i < terms.size(); ++i) sum = tape.add(sum, terms[i]);
    loss = tape.scale(sum, 1.0 / static_cast<double>(terms.size()));
  }
  const double value = tape.value(loss).item();
  tape.backward(loss);
  auto params = trainer.trained_tensors();
  auto grads = ad::collect_grads(tape, params);
  ad::adam_step(params, grads, trainer.adam);
  if (cfg.loss == ReprLoss::CL) {
    auto online = std::as_const(trainer.online).tensors();
    momentum_update(trainer.target.tensors(), online, cfg.cl_momentum);
  } else {
    trainer.decoder.policy.clamp_log_std();
  }
  ++trainer.steps;
  return value;
}

// ---------------------------------------------------------------------------

void write_encoder(std::ostream& os, const PolicyEncoder& enc) {
  os << "encoder " << repr_kind_name(enc.kind) << ' ' << enc.dim << ' ' << enc.seed << '\n';
  if (enc.kind == ReprKind::Opr) {
    os << "elements " << enc.opr.element_nets.size() << '\n';
    for (const auto& e : enc.opr.element_nets) nets::write_snapshot(os, e);
    nets::write_snapshot(os, enc.opr.post_net);
  } else if (enc.kind == ReprKind::Spr) {
    nets::write_snapshot(os, enc.spr.pair_net);
    nets::write_snapshot(os, enc.spr.post_net);
  }
}

PolicyEncoder read_encoder(std::istream& is) {
  std::string tag, kind;
  PolicyEncoder enc;
  if (!(is >> tag >> kind >> enc.dim >> enc.seed) || tag != "encoder") {
    throw std::runtime_error("encoder snapshot: missing header");
  }
  enc.kind = parse_repr_kind(kind);
  if (enc.kind == ReprKind::Opr) {
    std::size_t n = 0;
    if (!(is >> tag >> n) || tag != "elements") throw std::runtime_error("encoder snapshot: missing elements");
    for (std::size_t i = 0; i < n; ++i) enc.opr.element_nets.push_back(nets::read_snapshot(is));
    enc.opr.post_net = nets::read_snapshot(is);
  } else if (enc.kind == ReprKind::Spr) {
    enc.spr.pair_net = nets::read_snapshot(is);
    enc.spr.post_net = nets::read_snapshot(is);
  }
  return enc;
}

void write_record(std::ostream& os, const PolicyRecord& record) {
  os << std::setprecision(std::numeric_limits<double>::max_digits10);
  os << "record " << record.id << ' ' << record.iteration << ' ' << record.avg_return << '\n';
  nets::write_snapshot(os, record.params);
  nets::write_tensor(os, "log_std", record.log_std);
  nets::write_tensor(os, "spr_pairs", record.spr_pairs);
}

PolicyRecord read_record(std::istream& is) {
  std::string tag;
  PolicyRecord rec;
  if (!(is >> tag >> rec.id >> rec.iteration >> rec.avg_return) || tag != "record") {
    throw std::runtime_error("record snapshot: missing header");
  }
  rec.params = nets::read_snapshot(is);
  rec.log_std = nets::read_tensor(is, "log_std");
  rec.spr_pairs = nets::read_tensor(is, "spr_pairs");
  return rec;
}

void write_embeddings_csv(std::ostream& os, std::span<const EmbeddingRow> rows) {
  const std::size_t d = rows.empty() ? 0 : rows.front().embedding.size();
  os << "policy_id,trial,iteration,avg_return";
  for (std::size_t i = 0; i < d; ++i) os << ",dim_" << i;
  os << '\n' << std::setprecision(std::numeric_limits<double>::max_digits10);
  for (const auto& r : rows) {
    if (r.embedding.size() != d) throw std::invalid_argument("embeddings csv: ragged embedding dims");
    os << r.policy_id << ',' << r.trial << ',' << r.iteration << ',' << r.avg_return;
    for (double v : r.embedding) os << ',' << v;
    os << '\n';
  }
}

}  // namespace pevfa::repr
