#pragma once

#include <cstddef>
#include <iosfwd>
#include <span>
#include <string>
#include <vector>

#include "pevfa/autodiff.hpp"
#include "pevfa/rng.hpp"

namespace pevfa::nets {

using ad::Tape;
using ad::Tensor;
using ad::Var;

enum class Activation { Identity, Tanh, Relu };

const char* activation_name(Activation act);
Activation parse_activation(const std::string& name);

/// Dense layer y = act(x W^T + b). `weight` is out x in, `bias` is 1 x out.
struct Layer {
  Tensor weight;
  Tensor bias;
  Activation activation = Activation::Identity;

  std::size_t in_dim() const { return weight.cols(); }
  std::size_t out_dim() const { return weight.rows(); }
};

struct MlpParams {
  std::vector<Layer> layers;

  std::size_t input_dim() const;
  std::size_t output_dim() const;
  std::size_t param_count() const;
  /// Throws ad::ShapeError if adjacent layers do not chain or entries are non-finite.
  void validate() const;
  std::vector<Tensor*> tensors();
  std::vector<const Tensor*> tensors() const;

  friend bool operator==(const MlpParams&, const MlpParams&) = default;
};

inline bool operator==(const Layer& a, const Layer& b) {
  return a.weight == b.weight && a.bias == b.bias && a.activation == b.activation;
}

/// sizes = {in, hidden..., out}. Weights ~ U(-1/sqrt(fan_in), 1/sqrt(fan_in)), biases 0.
MlpParams make_mlp(std::span<const std::size_t> sizes, Activation hidden, Activation output,
                   Rng& rng);

Var apply_activation(Tape& tape, Var x, Activation act);
Var layer_forward(Tape& tape, const Layer& layer, Var input);
/// Batched forward over rows of `input`; parameters are registered on the tape.
Var mlp_forward(Tape& tape, const MlpParams& params, Var input);
Tensor mlp_eval(const MlpParams& params, const Tensor& input);
std::vector<double> mlp_eval(const MlpParams& params, std::span<const double> input);

// ---------------------------------------------------------------------------
// Policy

inline constexpr double kLogStdMin = -20.0;
inline constexpr double kLogStdMax = 2.0;

/// Diagonal Gaussian policy with a tanh-bounded mean network and a
/// state-independent log standard deviation.
struct GaussianPolicy {
  MlpParams mean_net;
  Tensor log_std;  // 1 x action_dim

  std::size_t state_dim() const { return mean_net.input_dim(); }
  std::size_t action_dim() const { return log_std.cols(); }
  std::vector<Tensor*> tensors();
  /// Projects log_std back into [kLogStdMin, kLogStdMax].
  void clamp_log_std();
};

/// hidden_sizes are the widths between state and action; hidden activation ReLU, output tanh.
GaussianPolicy make_gaussian_policy(std::size_t state_dim, std::size_t action_dim,
                                    std::span<const std::size_t> hidden_sizes, Rng& rng);

struct PolicyOutput {
  std::vector<double> mean;
  std::vector<double> log_std;
};

PolicyOutput policy_forward(const GaussianPolicy& policy, std::span<const double> state);
double policy_log_prob(std::span<const double> mean, std::span<const double> log_std,
                       std::span<const double> action);
std::vector<double> policy_sample(std::span<const double> mean, std::span<const double> log_std,
                                  Rng& rng);

/// Per-row log density (B x 1) for B x A `mean`/`actions` and 1 x A `log_std`.
Var gaussian_log_prob(Tape& tape, Var mean, Var log_std, Var actions);

// ---------------------------------------------------------------------------
// Value networks

double value_forward(const MlpParams& vfa, std::span<const double> state);

/// Two input streams (state, policy embedding), each one ReLU layer, whose
/// outputs are concatenated and fed through `trunk` to a scalar.
struct PeVFAParams {
  Layer state_stream;
  Layer embed_stream;
  MlpParams trunk;

  std::size_t state_dim() const { return state_stream.in_dim(); }
  std::size_t embed_dim() const { return embed_stream.in_dim(); }
  std::vector<Tensor*> tensors();
  void validate() const;
};

PeVFAParams make_pevfa(std::size_t state_dim, std::size_t embed_dim, std::size_t stream_width,
                       std::span<const std::size_t> trunk_hidden, Rng& rng);

/// states: B x state_dim, embeddings: B x embed_dim -> B x 1.
Var pevfa_forward(Tape& tape, const PeVFAParams& pevfa, Var states, Var embeddings);
double pevfa_forward(const PeVFAParams& pevfa, std::span<const double> state,
                     std::span<const double> embedding);
Tensor pevfa_eval(const PeVFAParams& pevfa, const Tensor& states, const Tensor& embeddings);

/// The conventional value network obtained by dropping the embedding stream.
MlpParams pevfa_state_only(const PeVFAParams& pevfa);

// ---------------------------------------------------------------------------
// Snapshots: text, layer order input->output, each layer's weights (row-major)
// before its biases. Values are written with round-trip precision.

void write_snapshot(std::ostream& os, const MlpParams& params);
MlpParams read_snapshot(std::istream& is);
void write_tensor(std::ostream& os, const std::string& tag, const Tensor& t);
Tensor read_tensor(std::istream& is, const std::string& tag);

}  // namespace pevfa::nets
