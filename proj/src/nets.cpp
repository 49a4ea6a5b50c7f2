#include "pevfa/nets.hpp"

#include <algorithm>
#include <cmath>
#include <iomanip>
#include <istream>
#include <limits>
#include <numbers>
#include <ostream>
#include <stdexcept>

namespace pevfa::nets {

const char* activation_name(Activation act) {
  switch (act) {
    case Activation::Identity: return "identity";
    case Activation::Tanh: return "tanh";
    case Activation::Relu: return "relu";
  }
  return "?";
}

Activation parse_activation(const std::string& name) {
  if (name == "identity") return Activation::Identity;
  if (name == "tanh") return Activation::Tanh;
  if (name == "relu") return Activation::Relu;
  throw std::invalid_argument("unknown activation '" + name + "'");
}

std::size_t MlpParams::input_dim() const { return layers.empty() ? 0 : layers.front().in_dim(); }
std::size_t MlpParams::output_dim() const { return layers.empty() ? 0 : layers.back().out_dim(); }

std::size_t MlpParams::param_count() const {
  std::size_t n = 0;
  for (const auto& l : layers) n += l.weight.size() + l.bias.size();
  return n;
}

void MlpParams::validate() const {
  for (std::size_t i = 0; i < layers.size(); ++i) {
    const Layer& l = layers[i];
    if (l.bias.rows() != 1 || l.bias.cols() != l.out_dim()) {
      throw ad::ShapeError("mlp: layer " + std::to_string(i) + " bias " + l.bias.shape_string() +
                           " does not match weight " + l.weight.shape_string());
    }
    if (i > 0 && layers[i - 1].out_dim() != l.in_dim()) {
      throw ad::ShapeError("mlp: layer " + std::to_string(i) + " input " +
                           std::to_string(l.in_dim()) + " does not chain with previous output " +
                           std::to_string(layers[i - 1].out_dim()));
    }
    if (!l.weight.all_finite() || !l.bias.all_finite()) {
      throw ad::ShapeError("mlp: layer " + std::to_string(i) + " has non-finite entries");
    }
  }
}

std::vector<Tensor*> MlpParams::tensors() {
  std::vector<Tensor*> out;
  for (auto& l : layers) {
    out.push_back(&l.weight);
    out.push_back(&l.bias);
  }
  return out;
}

std::vector<const Tensor*> MlpParams::tensors() const {
  std::vector<const Tensor*> out;
  for (const auto& l : layers) {
    out.push_back(&l.weight);
    out.push_back(&l.bias);
  }
  return out;
}

MlpParams make_mlp(std::span<const std::size_t> sizes, Activation hidden, Activation output,
                   Rng& rng) {
  if (sizes.size() < 2) throw std::invalid_argument("make_mlp: need at least input and output size");
  MlpParams p;
  for (std::size_t i = 0; i + 1 < sizes.size(); ++i) {
    const std::size_t in = sizes[i], out = sizes[i + 1];
    Layer l;
    l.weight = Tensor(out, in);
    const double bound = 1.0 / std::sqrt(static_cast<double>(in));
    for (auto& w : l.weight.values()) w = uniform(rng, -bound, bound);
    l.bias = Tensor(1, out);
    l.activation = (i + 2 == sizes.size()) ? output : hidden;
    p.layers.push_back(std::move(l));
  }
  return p;
}

Var apply_activation(Tape& tape, Var x, Activation act) {
  switch (act) {
    case Activation::Tanh: return tape.tanh(x);
    case Activation::Relu: return tape.relu(x);
    case Activation::Identity: return x;
  }
  return x;
}

Var layer_forward(Tape& tape, const Layer& layer, Var input) {
  Var z = tape.add(tape.matmul_nt(input, tape.param(layer.weight)), tape.param(layer.bias));
  return apply_activation(tape, z, layer.activation);
}

Var mlp_forward(Tape& tape, const MlpParams& params, Var input) {
  Var x = input;
  for (const auto& l : params.layers) x = layer_forward(tape, l, x);
  return x;
}

Tensor mlp_eval(const MlpParams& params, const Tensor& input) {
  Tape tape(false);
  Var out = mlp_forward(tape, params, tape.constant(input));
  return tape.value(out);
}

std::vector<double> mlp_eval(const MlpParams& params, std::span<const double> input) {
  if (input.size() != params.input_dim()) {
    throw ad::ShapeError("mlp: input dim " + std::to_string(input.size()) + " != network input " +
                         std::to_string(params.input_dim()));
  }
  // Same accumulation order as the taped matmul_nt + bias, without building a tape.
  std::vector<double> x(input.begin(), input.end()), y;
  for (const auto& l : params.layers) {
    const std::size_t in = l.in_dim(), out = l.out_dim();
    y.assign(out, 0.0);
    for (std::size_t j = 0; j < out; ++j) {
      const double* w = l.weight.data() + j * in;
      double acc = 0.0;
      for (std::size_t p = 0; p < in; ++p) acc += x[p] * w[p];
      y[j] = acc + l.bias[j];
      switch (l.activation) {
        case Activation::Tanh: y[j] = std::tanh(y[j]); break;
        case Activation::Relu: y[j] = y[j] > 0.0 ? y[j] : 0.0; break;
        case Activation::Identity: break;
      }
    }
    x.swap(y);
  }
  return x;
}

// ---------------------------------------------------------------------------

std::vector<Tensor*> GaussianPolicy::tensors() {
  auto out = mean_net.tensors();
  out.push_back(&log_std);
  return out;
}

void GaussianPolicy::clamp_log_std() {
  for (auto& v : log_std.values()) v = std::clamp(v, kLogStdMin, kLogStdMax);
}

GaussianPolicy make_gaussian_policy(std::size_t state_dim, std::size_t action_dim,
                                    std::span<const std::size_t> hidden_sizes, Rng& rng) {
  std::vector<std::size_t> sizes{state_dim};
  sizes.insert(sizes.end(), hidden_sizes.begin(), hidden_sizes.end());
  sizes.push_back(action_dim);
  GaussianPolicy p;
  p.mean_net = make_mlp(sizes, Activation::Relu, Activation::Tanh, rng);
  p.log_std = Tensor(1, action_dim, 0.0);
  return p;
}

PolicyOutput policy_forward(const GaussianPolicy& policy, std::span<const double> state) {
  if (state.size() != policy.state_dim()) {
    throw ad::ShapeError("policy_forward: state dim " + std::to_string(state.size()) +
                         " != policy input " + std::to_string(policy.state_dim()));
  }
  PolicyOutput out;
  out.mean = mlp_eval(policy.mean_net, state);
  out.log_std.assign(policy.log_std.values().begin(), policy.log_std.values().end());
  return out;
}

double policy_log_prob(std::span<const double> mean, std::span<const double> log_std,
                       std::span<const double> action) {
  if (mean.size() != log_std.size() || mean.size() != action.size()) {
    throw ad::ShapeError("policy_log_prob: dimension mismatch");
  }
  // Same association as gaussian_log_prob so both paths agree bit for bit.
  double lp = 0.0;
  for (std::size_t i = 0; i < mean.size(); ++i) {
    const double z = (action[i] - mean[i]) * std::exp(-log_std[i]);
    lp += (z * z) * -0.5 - log_std[i];
  }
  return lp + -0.5 * std::log(2.0 * std::numbers::pi) * static_cast<double>(mean.size());
}

std::vector<double> policy_sample(std::span<const double> mean, std::span<const double> log_std,
                                  Rng& rng) {
  std::vector<double> a(mean.size());
  for (std::size_t i = 0; i < mean.size(); ++i) {
    const double ls = std::clamp(log_std[i], kLogStdMin, kLogStdMax);
    a[i] = mean[i] + std::exp(ls) * standard_normal(rng);
  }
  return a;
}

Var gaussian_log_prob(Tape& tape, Var mean, Var log_std, Var actions) {
  // -0.5 * ((a - mu) / sigma)^2 - log sigma - 0.5 log(2 pi), summed over action dims.
  Var z = tape.mul(tape.sub(actions, mean), tape.exp(tape.neg(log_std)));
  Var per_dim = tape.sub(tape.scale(tape.square(z), -0.5), log_std);
  Var summed = tape.sum_cols(per_dim);
  const double dims = static_cast<double>(tape.value(mean).cols());
  return tape.add_scalar(summed, -0.5 * std::log(2.0 * std::numbers::pi) * dims);
}

// ---------------------------------------------------------------------------

double value_forward(const MlpParams& vfa, std::span<const double> state) {
  auto out = mlp_eval(vfa, state);
  if (out.size() != 1) throw ad::ShapeError("value_forward: network output is not scalar");
  return out[0];
}

std::vector<Tensor*> PeVFAParams::tensors() {
  std::vector<Tensor*> out{&state_stream.weight, &state_stream.bias, &embed_stream.weight,
                           &embed_stream.bias};
  for (auto* t : trunk.tensors()) out.push_back(t);
  return out;
}

void PeVFAParams::validate() const {
  if (trunk.layers.empty()) throw ad::ShapeError("pevfa: empty trunk");
  if (trunk.input_dim() != state_stream.out_dim() + embed_stream.out_dim()) {
    throw ad::ShapeError("pevfa: trunk input does not equal concatenated stream widths");
  }
  if (trunk.output_dim() != 1) throw ad::ShapeError("pevfa: output is not scalar");
  trunk.validate();
}

PeVFAParams make_pevfa(std::size_t state_dim, std::size_t embed_dim, std::size_t stream_width,
                       std::span<const std::size_t> trunk_hidden, Rng& rng) {
  PeVFAParams p;
  const std::size_t s_sizes[] = {state_dim, stream_width};
  const std::size_t e_sizes[] = {embed_dim, stream_width};
  p.state_stream = make_mlp(s_sizes, Activation::Relu, Activation::Relu, rng).layers.front();
  p.embed_stream = make_mlp(e_sizes, Activation::Relu, Activation::Relu, rng).layers.front();
  std::vector<std::size_t> sizes{2 * stream_width};
  sizes.insert(sizes.end(), trunk_hidden.begin(), trunk_hidden.end());
  sizes.push_back(1);
  p.trunk = make_mlp(sizes, Activation::Relu, Activation::Identity, rng);
  return p;
}

Var pevfa_forward(Tape& tape, const PeVFAParams& pevfa, Var states, Var embeddings) {
  if (tape.value(states).cols() != pevfa.state_dim() ||
      tape.value(embeddings).cols() != pevfa.embed_dim() ||
      tape.value(states).rows() != tape.value(embeddings).rows()) {
    throw ad::ShapeError("pevfa_forward: inputs " + tape.value(states).shape_string() + " and " +
                         tape.value(embeddings).shape_string() + " do not match network (" +
                         std::to_string(pevfa.state_dim()) + ", " +
                         std::to_string(pevfa.embed_dim()) + ")");
  }
  Var hs = layer_forward(tape, pevfa.state_stream, states);
  Var he = layer_forward(tape, pevfa.embed_stream, embeddings);
  // First trunk layer applied to concat(hs, he), computed as two partial products
  // so a silent embedding stream contributes exact zeros.
  const Layer& first = pevfa.trunk.layers.front();
  const std::size_t ws = pevfa.state_stream.out_dim();
  Var w = tape.param(first.weight);
  Var w_state = tape.slice_cols(w, 0, ws);
  Var w_embed = tape.slice_cols(w, ws, first.in_dim());
  Var z = tape.add(tape.matmul_nt(hs, w_state), tape.matmul_nt(he, w_embed));
  Var x = apply_activation(tape, tape.add(z, tape.param(first.bias)), first.activation);
  for (std::size_t i = 1; i < pevfa.trunk.layers.size(); ++i) {
    x = layer_forward(tape, pevfa.trunk.layers[i], x);
  }
  return x;
}

Tensor pevfa_eval(const PeVFAParams& pevfa, const Tensor& states, const Tensor& embeddings) {
  Tape tape(false);
  Var v = pevfa_forward(tape, pevfa, tape.constant(states), tape.constant(embeddings));
  return tape.value(v);
}

double pevfa_forward(const PeVFAParams& pevfa, std::span<const double> state,
                     std::span<const double> embedding) {
  return pevfa_eval(pevfa, Tensor::row_vector(state), Tensor::row_vector(embedding)).item();
}

MlpParams pevfa_state_only(const PeVFAParams& pevfa) {
  MlpParams out;
  out.layers.push_back(pevfa.state_stream);
  const Layer& first = pevfa.trunk.layers.front();
  Layer reduced;
  const std::size_t ws = pevfa.state_stream.out_dim();
  reduced.weight = Tensor(first.out_dim(), ws);
  for (std::size_t r = 0; r < first.out_dim(); ++r)
    for (std::size_t c = 0; c < ws; ++c) reduced.weight(r, c) = first.weight(r, c);
  reduced.bias = first.bias;
  reduced.activation = first.activation;
  out.layers.push_back(std::move(reduced));
  for (std::size_t i = 1; i < pevfa.trunk.layers.size(); ++i) out.layers.push_back(pevfa.trunk.layers[i]);
  return out;
}

// ---------------------------------------------------------------------------

void write_tensor(std::ostream& os, const std::string& tag, const Tensor& t) {
  os << tag << ' ' << t.rows() << ' ' << t.cols() << '\n';
  os << std::setprecision(std::numeric_limits<double>::max_digits10);
  for (std::size_t r = 0; r < t.rows(); ++r) {
    for (std::size_t c = 0; c < t.cols(); ++c) os << (c ? " " : "") << t(r, c);
    os << '\n';
  }
}

Tensor read_tensor(std::istream& is, const std::string& tag) {
  std::string got;
  std::size_t rows = 0, cols = 0;
  if (!(is >> got >> rows >> cols) || got != tag) {
    throw std::runtime_error("snapshot: expected '" + tag + "' record, got '" + got + "'");
  }
  Tensor t(rows, cols);
  for (auto& v : t.values()) {
    if (!(is >> v)) throw std::runtime_error("snapshot: truncated '" + tag + "' values");
  }
  return t;
}

void write_snapshot(std::ostream& os, const MlpParams& params) {
  os << "mlp " << params.layers.size() << '\n';
  for (const auto& l : params.layers) {
    os << "layer " << l.out_dim() << ' ' << l.in_dim() << ' ' << activation_name(l.activation)
       << '\n';
    write_tensor(os, "weight", l.weight);
    write_tensor(os, "bias", l.bias);
  }
}

MlpParams read_snapshot(std::istream& is) {
  std::string tag;
  std::size_t count = 0;
  if (!(is >> tag >> count) || tag != "mlp") throw std::runtime_error("snapshot: missing 'mlp' header");
  MlpParams p;
  for (std::size_t i = 0; i < count; ++i) {
    std::size_t out = 0, in = 0;
    std::string act;
    if (!(is >> tag >> out >> in >> act) || tag != "layer") {
      throw std::runtime_error("snapshot: malformed layer header " + std::to_string(i));
    }
    Layer l;
    l.activation = parse_activation(act);
    l.weight = read_tensor(is, "weight");
    l.bias = read_tensor(is, "bias");
    if (l.weight.rows() != out || l.weight.cols() != in) {
      throw std::runtime_error("snapshot: layer " + std::to_string(i) + " shape disagrees with header");
    }
    p.layers.push_back(std::move(l));
  }
  p.validate();
  return p;
}

}  // namespace pevfa::nets
