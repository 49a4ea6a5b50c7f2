#pragma once

#include <cstddef>
#include <cstdint>
#include <iosfwd>
#include <span>
#include <string>
#include <vector>

#include "pevfa/autodiff.hpp"
#include "pevfa/envs.hpp"
#include "pevfa/nets.hpp"
#include "pevfa/rng.hpp"

namespace pevfa::repr {

using ad::Tape;
using ad::Tensor;
using ad::Var;
using Embedding = std::vector<double>;

enum class ReprKind { Rpr, Random, Opr, Spr };
enum class ReprLoss { E2E, CL, Aux };

const char* repr_kind_name(ReprKind kind);
ReprKind parse_repr_kind(const std::string& name);
const char* repr_loss_name(ReprLoss loss);
ReprLoss parse_repr_loss(const std::string& name);

// ---------------------------------------------------------------------------
// Fixed representations

/// All weights and biases in snapshot order: per layer, weight row-major then bias.
Embedding rpr_encode(const nets::MlpParams& policy);

/// U(-1,1)^dim keyed on (seed, policy_id).
Embedding random_pr(std::uint64_t policy_id, std::size_t dim, std::uint64_t seed);

// ---------------------------------------------------------------------------
// OPR: each layer's (incoming weights, bias) rows go through an element network,
// are mean-reduced, concatenated across layers and mapped by a post network.

struct OprEncoderParams {
  std::vector<nets::MlpParams> element_nets;  // one per encoded policy layer
  nets::MlpParams post_net;

  std::size_t embed_dim() const { return post_net.output_dim(); }
  std::vector<Tensor*> tensors();
  std::vector<const Tensor*> tensors() const;
};

/// policy_sizes = {in, hidden..., out} of the policy networks to be encoded.
OprEncoderParams make_opr_encoder(std::span<const std::size_t> policy_sizes, std::size_t hidden,
                                  std::size_t feature, std::size_t embed_dim, Rng& rng);

/// Rows [w_i | b_i] of one layer (out x (in+1)).
Tensor layer_rows(const nets::Layer& layer);
/// Mean over rows of the element network applied to `rows`; 1 x feature.
Var opr_layer_feature(Tape& tape, const nets::MlpParams& element, const Tensor& rows);
Var opr_encode(Tape& tape, const OprEncoderParams& enc, const nets::MlpParams& policy);
Embedding opr_encode(const OprEncoderParams& enc, const nets::MlpParams& policy);

// ---------------------------------------------------------------------------
// SPR: mean-pooled features of state-action pairs.

struct SprEncoderParams {
  nets::MlpParams pair_net;
  nets::MlpParams post_net;

  std::size_t embed_dim() const { return post_net.output_dim(); }
  std::vector<Tensor*> tensors();
  std::vector<const Tensor*> tensors() const;
};

SprEncoderParams make_spr_encoder(std::size_t state_dim, std::size_t action_dim,
                                  std::size_t hidden, std::size_t feature, std::size_t embed_dim,
                                  Rng& rng);

/// pairs: N x (state_dim + action_dim), N >= 1.
Var spr_encode(Tape& tape, const SprEncoderParams& enc, const Tensor& pairs);
Embedding spr_encode(const SprEncoderParams& enc, const Tensor& pairs);

// ---------------------------------------------------------------------------
// Augmentations

/// Zeroes each weight and bias of every layer but the last with probability `mask_ratio`.
nets::MlpParams augment_opr(const nets::MlpParams& policy, double mask_ratio, Rng& rng);
/// Adds N(0, scale^2) noise to the same selection of entries instead of zeroing them.
nets::MlpParams augment_opr_noise(const nets::MlpParams& policy, double ratio, double scale,
                                  Rng& rng);
/// ceil(ratio * N) rows sampled uniformly without replacement.
Tensor augment_spr(const Tensor& pairs, double sample_ratio, Rng& rng);

// ---------------------------------------------------------------------------
// Contrastive and auxiliary objectives

/// -log softmax of the positive logit among {a W p} and {a W n_k}.
double infonce_loss(std::span<const double> anchor, std::span<const double> positive,
                    std::span<const Embedding> negatives, const Tensor& w);

/// Batched InfoNCE: row i of `keys` is the positive for row i of `anchors`, the
/// other rows are its negatives. Mean over rows.
Var infonce_batch(Tape& tape, Var anchors, Var keys, Var w);

/// target <- (1 - m) target + m online, tensor by tensor.
void momentum_update(std::span<Tensor* const> target, std::span<const Tensor* const> online,
                     double m);

/// Gaussian decoder pi(a | s, chi) over state concatenated with embedding.
struct AuxDecoder {
  nets::GaussianPolicy policy;

  std::vector<Tensor*> tensors() { return policy.tensors(); }
};

AuxDecoder make_aux_decoder(std::size_t state_dim, std::size_t embed_dim, std::size_t action_dim,
                            std::span<const std::size_t> hidden, Rng& rng);

/// Mean negative log-likelihood of `actions` (N x A) given `states` (N x S) and a
/// 1 x D embedding.
Var aux_loss(Tape& tape, const AuxDecoder& dec, Var embedding, const Tensor& states,
             const Tensor& actions);
double aux_loss(const AuxDecoder& dec, std::span<const double> embedding, const Tensor& states,
                const Tensor& actions);

// ---------------------------------------------------------------------------
// Policy records

struct PolicyRecord {
  std::uint64_t id = 0;
  int iteration = 0;
  nets::MlpParams params;
  Tensor log_std;  // 1 x A for Gaussian policies, empty for deterministic ones
  std::vector<envs::Trajectory> trajectories;
  Tensor states;                // visited states, trajectory order
  Tensor actions;               // matching actions
  std::vector<double> returns;  // Monte Carlo return of each visited state
  Tensor spr_pairs;             // fixed subsample of [state | action] rows used for SPR
  double avg_return = 0.0;
  Embedding embedding;

  std::size_t steps() const { return returns.size(); }
};

/// `returns` must align with the trajectories' non-terminal states in order.
PolicyRecord make_record(std::uint64_t id, int iteration, nets::MlpParams params, Tensor log_std,
                         std::vector<envs::Trajectory> trajectories, std::vector<double> returns,
                         std::size_t spr_pair_count, Rng& rng);

/// Raw representation of a record: rpr_encode(params) followed by log_std.
Embedding record_rpr(const PolicyRecord& record);

// ---------------------------------------------------------------------------
// Encoder of any kind plus its training state

struct ReprConfig {
  ReprKind kind = ReprKind::Opr;
  ReprLoss loss = ReprLoss::E2E;
  std::size_t embed_dim = 64;
  std::size_t encoder_hidden = 64;
  std::size_t encoder_feature = 32;
  std::size_t policy_batch = 16;
  std::size_t spr_pairs = 200;
  double cl_lr = 1e-3;
  double cl_momentum = 5e-2;
  double mask_ratio = 0.1;
  bool noise_augment = false;
  double noise_scale = 0.1;
  double spr_sample_ratio = 0.8;
  double aux_lr = 1e-3;
  std::size_t aux_batch = 128;

  void validate() const;
};

struct PolicyEncoder {
  ReprKind kind = ReprKind::Opr;
  std::size_t dim = 0;
  std::uint64_t seed = 0;
  OprEncoderParams opr;
  SprEncoderParams spr;

  bool trainable() const { return kind == ReprKind::Opr || kind == ReprKind::Spr; }
  std::vector<Tensor*> tensors();
  std::vector<const Tensor*> tensors() const;
};

/// policy_sizes describes the mean network of the policies to be encoded. For RPR
/// the dimension is their parameter count plus action_dim when `gaussian`.
PolicyEncoder make_encoder(const ReprConfig& config, std::span<const std::size_t> policy_sizes,
                           bool gaussian, std::size_t state_dim, std::size_t action_dim,
                           std::uint64_t seed);

/// 1 x dim. Trainable encoders register their parameters on the tape.
Var encode(Tape& tape, const PolicyEncoder& enc, const PolicyRecord& record);
Embedding encode(const PolicyEncoder& enc, const PolicyRecord& record);

struct ReprTrainer {
  ReprConfig config;
  PolicyEncoder online;
  PolicyEncoder target;  // momentum copy of `online` (CL)
  Tensor w;              // bilinear InfoNCE matrix (CL)
  AuxDecoder decoder;    // policy recovery head (AUX)
  ad::AdamState adam;    // online encoder + head of the active loss
  std::uint64_t steps = 0;

  std::vector<Tensor*> trained_tensors();
};

ReprTrainer make_trainer(const ReprConfig& config, PolicyEncoder encoder, std::size_t state_dim,
                         std::size_t action_dim, std::uint64_t seed);

/// One CL or AUX gradient step on a batch of records drawn with `rng`. Returns the
/// loss before the step. E2E has no separate objective here (its gradient arrives
/// through the value loss) and returns 0 without touching anything.
double train_representation(ReprTrainer& trainer, std::span<const PolicyRecord> records,
                            Rng& rng);

// ---------------------------------------------------------------------------
// Persistence

void write_encoder(std::ostream& os, const PolicyEncoder& enc);
PolicyEncoder read_encoder(std::istream& is);

/// Parameters, log_std, SPR pairs and metadata; trajectories are not stored.
void write_record(std::ostream& os, const PolicyRecord& record);
PolicyRecord read_record(std::istream& is);

struct EmbeddingRow {
  std::uint64_t policy_id = 0;
  std::uint64_t trial = 0;
  int iteration = 0;
  double avg_return = 0.0;
  Embedding embedding;
};

/// policy_id,trial,iteration,avg_return,dim_0..dim_{D-1}
void write_embeddings_csv(std::ostream& os, std::span<const EmbeddingRow> rows);

}  // namespace pevfa::repr
