#include "pevfa/harness.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdlib>
#include <exception>
#include <fstream>
#include <functional>
#include <iomanip>
#include <limits>
#include <mutex>
#include <numeric>
#include <sstream>
#include <thread>

namespace pevfa::harness {

namespace fs = std::filesystem;

namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

[[noreturn]] void bad_value(const std::string& key, const std::string& value, const char* want) {
  throw ConfigError("config key '" + key + "': expected " + want + ", got '" + value + "'");
}

double to_double(const std::string& key, const std::string& v) {
  try {
    std::size_t used = 0;
    const double d = std::stod(v, &used);
    if (used != v.size() || !std::isfinite(d)) bad_value(key, v, "a finite number");
    return d;
  } catch (const std::logic_error&) {
    bad_value(key, v, "a number");
  }
}

long long to_int(const std::string& key, const std::string& v) {
  try {
    std::size_t used = 0;
    const long long n = std::stoll(v, &used);
    if (used != v.size()) bad_value(key, v, "an integer");
    return n;
  } catch (const std::logic_error&) {
    bad_value(key, v, "an integer");
  }
}

std::size_t to_size(const std::string& key, const std::string& v) {
  const long long n = to_int(key, v);
  if (n < 0) bad_value(key, v, "a non-negative integer");
  return static_cast<std::size_t>(n);
}

int to_int32(const std::string& key, const std::string& v) {
  const long long n = to_int(key, v);
  if (n < std::numeric_limits<int>::min() || n > std::numeric_limits<int>::max()) {
    bad_value(key, v, "an int");
  }
  return static_cast<int>(n);
}

bool to_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "1" || v == "yes") return true;
  if (v == "false" || v == "0" || v == "no") return false;
  bad_value(key, v, "true or false");
}

std::vector<std::size_t> to_sizes(const std::string& key, const std::string& v) {
  std::string text = v;
  std::replace(text.begin(), text.end(), ',', ' ');
  std::istringstream is(text);
  std::vector<std::size_t> out;
  std::string tok;
  while (is >> tok) out.push_back(to_size(key, tok));
  if (out.empty()) bad_value(key, v, "a list of widths");
  return out;
}

template <typename F>
auto wrap(const std::string& key, F&& f) {
  try {
    return f();
  } catch (const ConfigError&) {
    throw;
  } catch (const std::exception& e) {
    throw ConfigError("config key '" + key + "': " + e.what());
  }
}

using Setter = std::function<void(ExperimentConfig&, const std::string& key, const std::string& value)>;

const std::map<std::string, Setter>& setters() {
  static const std::map<std::string, Setter> table = [] {
    std::map<std::string, Setter> t;
    auto& T = t;
#define PEVFA_KEY(name, body) T[name] = [](ExperimentConfig & c, const std::string& k, const std::string& v) body
    PEVFA_KEY("experiment", { (void)k; c.kind = wrap(k, [&] { return parse_experiment(v); }); });
    PEVFA_KEY("env", { c.env.id = wrap(k, [&] { return envs::parse_env(v); }); });
    PEVFA_KEY("horizon", { c.env.horizon = to_int32(k, v); });
    PEVFA_KEY("init_range", { c.env.init_range = to_double(k, v); });
    PEVFA_KEY("algo", { c.train.algo = wrap(k, [&] { return rl::parse_algo(v); }); });
    PEVFA_KEY("repr", { c.train.repr.kind = wrap(k, [&] { return repr::parse_repr_kind(v); }); });
    PEVFA_KEY("repr_loss", { c.train.repr.loss = wrap(k, [&] { return repr::parse_repr_loss(v); }); });
    PEVFA_KEY("seeds", { c.seeds = wrap(k, [&] { return parse_seeds(v); }); });
    PEVFA_KEY("seed", { c.seeds = {static_cast<std::uint64_t>(to_size(k, v))}; });
    PEVFA_KEY("out", { (void)k; c.out_dir = v; });

    PEVFA_KEY("iterations", { c.train.iterations = to_int32(k, v); });
    PEVFA_KEY("steps_per_iteration", { c.train.steps_per_iteration = to_int32(k, v); });
    PEVFA_KEY("policy_lr", { c.train.policy_lr = to_double(k, v); });
    PEVFA_KEY("value_lr", { c.train.value_lr = to_double(k, v); });
    PEVFA_KEY("clip", { c.train.clip = to_double(k, v); });
    PEVFA_KEY("gamma", { c.train.gamma = to_double(k, v); });
    PEVFA_KEY("lambda", { c.train.lambda = to_double(k, v); });
    PEVFA_KEY("minibatch", { c.train.minibatch = to_size(k, v); });
    PEVFA_KEY("actor_epochs", { c.train.actor_epochs = to_int32(k, v); });
    PEVFA_KEY("critic_epochs", { c.train.critic_epochs = to_int32(k, v); });
    PEVFA_KEY("policy_hidden", { c.train.policy_hidden = to_sizes(k, v); });
    PEVFA_KEY("value_hidden", { c.train.value_hidden = to_sizes(k, v); });
    PEVFA_KEY("pevfa_stream", { c.train.pevfa_stream = to_size(k, v); });
    PEVFA_KEY("pevfa_trunk", { c.train.pevfa_trunk = to_sizes(k, v); });
    PEVFA_KEY("historical_steps", { c.train.historical.steps = to_int32(k, v); });
    PEVFA_KEY("historical_batch", { c.train.historical.batch = to_size(k, v); });
    PEVFA_KEY("historical_policy_batch", { c.train.historical.policy_batch = to_size(k, v); });
    PEVFA_KEY("historical_recency", { c.train.historical.recency = to_double(k, v); });
    PEVFA_KEY("historical_interval", { c.train.historical_interval = to_int32(k, v); });
    PEVFA_KEY("buffer_capacity", { c.train.buffer_capacity = to_size(k, v); });
    PEVFA_KEY("repr_steps", { c.train.repr_steps = to_int32(k, v); });
    PEVFA_KEY("embed_dim", { c.train.repr.embed_dim = to_size(k, v); });
    PEVFA_KEY("encoder_hidden", { c.train.repr.encoder_hidden = to_size(k, v); });
    PEVFA_KEY("encoder_feature", { c.train.repr.encoder_feature = to_size(k, v); });
    PEVFA_KEY("repr_policy_batch", { c.train.repr.policy_batch = to_size(k, v); });
    PEVFA_KEY("spr_pairs", { c.train.repr.spr_pairs = to_size(k, v); });
    PEVFA_KEY("cl_lr", { c.train.repr.cl_lr = to_double(k, v); });
    PEVFA_KEY("cl_momentum", { c.train.repr.cl_momentum = to_double(k, v); });
    PEVFA_KEY("mask_ratio", { c.train.repr.mask_ratio = to_double(k, v); });
    PEVFA_KEY("noise_augment", { c.train.repr.noise_augment = to_bool(k, v); });
    PEVFA_KEY("noise_scale", { c.train.repr.noise_scale = to_double(k, v); });
    PEVFA_KEY("spr_sample_ratio", { c.train.repr.spr_sample_ratio = to_double(k, v); });
    PEVFA_KEY("aux_lr", { c.train.repr.aux_lr = to_double(k, v); });
    PEVFA_KEY("aux_batch", { c.train.repr.aux_batch = to_size(k, v); });
    PEVFA_KEY("freeze_embed_stream", { c.train.freeze_embed_stream = to_bool(k, v); });
    PEVFA_KEY("shadow_pevfa", { c.train.shadow_pevfa = to_bool(k, v); });
    PEVFA_KEY("checkpoint_every", { c.train.checkpoint_every = to_int32(k, v); });
    PEVFA_KEY("log_wallclock", { c.train.log_wallclock = to_bool(k, v); });
    PEVFA_KEY("probe_states", { c.train.probe_states = to_size(k, v); });

    PEVFA_KEY("gen_policies", { c.global.policies = to_size(k, v); });
    PEVFA_KEY("gen_trajectories", { c.global.trajectories = to_int32(k, v); });
    PEVFA_KEY("gen_horizon", { c.global.horizon = to_int32(k, v); });
    PEVFA_KEY("gen_init_range", { c.global.init_range = to_double(k, v); });
    PEVFA_KEY("gen_gamma", { c.global.gamma = to_double(k, v); });
    PEVFA_KEY("gen_lr", { c.global.lr = to_double(k, v); });
    PEVFA_KEY("gen_batch", { c.global.batch = to_size(k, v); });
    PEVFA_KEY("gen_epochs", { c.global.epochs = to_int32(k, v); });
    PEVFA_KEY("gen_trials", { c.global.trials = to_int32(k, v); });
    PEVFA_KEY("gen_test_fraction", { c.global.test_fraction = to_double(k, v); });
    PEVFA_KEY("gen_stream", { c.global.stream = to_size(k, v); });
    PEVFA_KEY("gen_trunk", { c.global.trunk = to_sizes(k, v); });

    PEVFA_KEY("theory_mdps", { c.theory.mdps = to_int32(k, v); });
    PEVFA_KEY("theory_states", { c.theory.gpi.states = to_size(k, v); });
    PEVFA_KEY("theory_actions", { c.theory.gpi.actions = to_size(k, v); });
    PEVFA_KEY("theory_gamma", { c.theory.gpi.gamma = to_double(k, v); });
    PEVFA_KEY("theory_iterations", { c.theory.gpi.iterations = to_int32(k, v); });
    PEVFA_KEY("theory_lr", { c.theory.gpi.lr = to_double(k, v); });
    PEVFA_KEY("theory_historical_steps", { c.theory.gpi.historical_steps = to_int32(k, v); });
    PEVFA_KEY("theory_step_size", { c.theory.gpi.step_size = to_double(k, v); });
    PEVFA_KEY("theory_lipschitz_samples", { c.theory.gpi.lipschitz_samples = to_int32(k, v); });
    PEVFA_KEY("theory_lipschitz_scale", { c.theory.gpi.lipschitz_scale = to_double(k, v); });
#undef PEVFA_KEY
    return t;
  }();
  return table;
}

void apply_preset(ExperimentConfig& c) {
  switch (c.kind) {
    case ExperimentKind::GlobalGen:
      c.env.id = envs::EnvId::PointWalker;
      break;
    case ExperimentKind::LocalGen:
      c.env.id = envs::EnvId::PointMass;
      c.train.policy_hidden = {8, 8};
      c.train.shadow_pevfa = true;
      c.train.keep_policy_path = true;
      break;
    case ExperimentKind::Train:
      c.env.id = envs::EnvId::PointMass;
      break;
    case ExperimentKind::TheoryCheck:
      break;
  }
}

}  // namespace

// ---------------------------------------------------------------------------

ConfigEntries parse_config(std::istream& is, const std::string& source) {
  ConfigEntries out;
  std::string line;
  int lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.resize(hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    const std::string where = source + ":" + std::to_string(lineno) + ": ";
    if (eq == std::string::npos) throw ConfigError(where + "expected 'key = value'");
    const std::string key = trim(line.substr(0, eq));
    const std::string value = trim(line.substr(eq + 1));
    if (key.empty()) throw ConfigError(where + "empty key");
    if (!out.emplace(key, value).second) throw ConfigError(where + "duplicate key '" + key + "'");
  }
  return out;
}

ConfigEntries read_config_file(const fs::path& path) {
  std::ifstream is(path);
  if (!is) throw ConfigError("cannot read config " + path.string());
  return parse_config(is, path.string());
}

void write_config(std::ostream& os, const ConfigEntries& entries) {
  for (const auto& [k, v] : entries) os << k << " = " << v << '\n';
}

std::string config_hash(const ConfigEntries& entries) {
  std::string text;
  for (const auto& [k, v] : entries) text += k + "=" + v + "\n";
  std::ostringstream os;
  os << std::hex << std::setw(16) << std::setfill('0') << fnv1a(text);
  return os.str();
}

std::vector<std::uint64_t> parse_seeds(const std::string& text) {
  std::vector<std::uint64_t> out;
  const auto dots = text.find("..");
  if (dots != std::string::npos) {
    const auto lo = to_size("seeds", trim(text.substr(0, dots)));
    const auto hi = to_size("seeds", trim(text.substr(dots + 2)));
    if (hi < lo) throw ConfigError("seeds: empty range '" + text + "'");
    for (auto s = lo; s <= hi; ++s) out.push_back(s);
    return out;
  }
  std::string list = text;
  std::replace(list.begin(), list.end(), ',', ' ');
  std::istringstream is(list);
  std::string tok;
  while (is >> tok) out.push_back(to_size("seeds", tok));
  if (out.empty()) throw ConfigError("seeds: no seeds given");
  return out;
}

const char* experiment_name(ExperimentKind kind) {
  switch (kind) {
    case ExperimentKind::GlobalGen:
      return "global-gen";
    case ExperimentKind::LocalGen:
      return "local-gen";
    case ExperimentKind::Train:
      return "train";
    case ExperimentKind::TheoryCheck:
      return "theory-check";
  }
  return "?";
}

ExperimentKind parse_experiment(const std::string& name) {
  for (auto k : {ExperimentKind::GlobalGen, ExperimentKind::LocalGen, ExperimentKind::Train,
                 ExperimentKind::TheoryCheck}) {
    if (name == experiment_name(k)) return k;
  }
  throw std::invalid_argument("unknown experiment '" + name +
                              "' (global-gen|local-gen|train|theory-check)");
}

void GlobalGenConfig::validate() const {
  if (policies < 10) throw ConfigError("global-gen: need at least 10 policies");
  if (trajectories < 1 || horizon < 1) throw ConfigError("global-gen: trajectories and horizon must be positive");
  if (!(test_fraction > 0.0 && test_fraction < 1.0)) throw ConfigError("global-gen: test fraction must lie in (0,1)");
  if (epochs < 0 || trials < 1 || batch == 0 || !(lr > 0.0)) throw ConfigError("global-gen: bad training setup");
  if (stream == 0 || trunk.empty()) throw ConfigError("global-gen: bad PeVFA shape");
}

void ExperimentConfig::validate() const {
  if (seeds.empty()) throw ConfigError("at least one seed is required");
  if (out_dir.empty()) throw ConfigError("output directory is required");
  const bool repr_given = entries.count("repr") || entries.count("repr_loss");
  if (repr_given && !(kind == ExperimentKind::Train && train.algo == rl::Algo::PpoPeVFA)) {
    throw ConfigError("representation options (repr, repr_loss) require experiment = train with algo = ppo-pevfa");
  }
  auto wrapped = [](auto&& f) {
    try {
      f();
    } catch (const ConfigError&) {
      throw;
    } catch (const std::exception& e) {
      throw ConfigError(e.what());
    }
  };
  switch (kind) {
    case ExperimentKind::GlobalGen:
      if (env.id != envs::EnvId::PointWalker) throw ConfigError("global-gen runs on point_walker only");
      global.validate();
      break;
    case ExperimentKind::LocalGen:
      if (env.id != envs::EnvId::PointWalker && env.id != envs::EnvId::PointMass) {
        throw ConfigError("local-gen needs env point_walker or point_mass");
      }
      if (train.algo != rl::Algo::Ppo) throw ConfigError("local-gen trains plain ppo with a shadow PeVFA");
      wrapped([&] {
        env.validate();
        train.validate();
      });
      break;
    case ExperimentKind::Train:
      if (env.id == envs::EnvId::Tabular) throw ConfigError("train needs a continuous env");
      wrapped([&] {
        env.validate();
        train.validate();
      });
      break;
    case ExperimentKind::TheoryCheck:
      if (theory.mdps < 1) throw ConfigError("theory-check: theory_mdps must be >= 1");
      wrapped([&] { theory.gpi.validate(); });
      break;
  }
}

ExperimentConfig make_experiment_config(const ConfigEntries& entries) {
  ExperimentConfig c;
  if (auto it = entries.find("experiment"); it != entries.end()) {
    c.kind = wrap(it->first, [&] { return parse_experiment(it->second); });
  }
  apply_preset(c);
  const auto& table = setters();
  for (const auto& [k, v] : entries) {
    auto it = table.find(k);
    if (it == table.end()) throw ConfigError("unknown config key '" + k + "'");
    it->second(c, k, v);
  }
  if (!entries.count("horizon")) c.env.horizon = c.env.id == envs::EnvId::PointMass ? 50 : 10;
  c.entries = entries;
  c.entries["experiment"] = experiment_name(c.kind);
  c.validate();
  return c;
}

std::vector<std::string> known_keys() {
  std::vector<std::string> out;
  for (const auto& [k, _] : setters()) out.push_back(k);
  return out;
}

// ---------------------------------------------------------------------------

std::size_t ArtifactManifest::count(const std::string& role) const {
  return static_cast<std::size_t>(
      std::count_if(files.begin(), files.end(), [&](const auto& f) { return f.role == role; }));
}

void write_manifest(std::ostream& os, const ArtifactManifest& m) {
  os << "run_id " << m.run_id << '\n'
     << "config_hash " << m.config_hash << '\n'
     << "tool_version " << m.tool_version << '\n';
  for (const auto& f : m.files) os << "file " << f.role << ' ' << f.path << '\n';
}

ArtifactManifest read_manifest(std::istream& is) {
  ArtifactManifest m;
  std::string tag;
  while (is >> tag) {
    if (tag == "run_id") {
      is >> m.run_id;
    } else if (tag == "config_hash") {
      is >> m.config_hash;
    } else if (tag == "tool_version") {
      is >> m.tool_version;
    } else if (tag == "file") {
      ArtifactFile f;
      is >> f.role >> f.path;
      m.files.push_back(f);
    } else {
      throw std::runtime_error("manifest: unexpected entry '" + tag + "'");
    }
  }
  return m;
}

// ---------------------------------------------------------------------------

GlobalGenData make_global_gen_data(const GlobalGenConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  const auto population = envs::synth_policy_population(cfg.policies, substream_seed(seed, "population"));
  envs::EnvConfig env;
  env.id = envs::EnvId::PointWalker;
  env.horizon = cfg.horizon;
  env.init_range = cfg.init_range;
  GlobalGenData data;
  const std::size_t per_policy = static_cast<std::size_t>(cfg.trajectories * cfg.horizon);
  const std::size_t sd = envs::env_state_dim(env.id);
  data.states = Tensor(cfg.policies * per_policy, sd);
  data.returns.reserve(cfg.policies * per_policy);
  data.owner.reserve(cfg.policies * per_policy);
  std::size_t row = 0;
  for (std::size_t i = 0; i < cfg.policies; ++i) {
    auto trajs = envs::rollout(env, envs::deterministic_actor(population[i]), cfg.trajectories,
                               cfg.horizon, substream_seed(seed, "gen-rollout", i));
    for (const auto& t : trajs) {
      const auto g = rl::mc_returns(t, cfg.gamma);
      for (std::size_t k = 0; k < t.length(); ++k, ++row) {
        std::copy(t.states[k].begin(), t.states[k].end(), data.states.row(row).begin());
        data.returns.push_back(g[k]);
        data.owner.push_back(i);
      }
    }
    const auto chi = repr::rpr_encode(population[i]);
    if (i == 0) data.embeddings = Tensor(cfg.policies, chi.size());
    std::copy(chi.begin(), chi.end(), data.embeddings.row(i).begin());
  }
  return data;
}

namespace {

Tensor gather_rows(const Tensor& t, std::span<const std::size_t> rows) {
  Tensor out(rows.size(), t.cols());
  for (std::size_t i = 0; i < rows.size(); ++i) {
    auto src = t.row(rows[i]);
    std::copy(src.begin(), src.end(), out.row(i).begin());
  }
  return out;
}

double gen_loss(const nets::PeVFAParams& net, const GlobalGenData& data,
                std::span<const std::size_t> samples) {
  constexpr std::size_t kChunk = 4096;
  double total = 0.0;
  std::vector<std::size_t> owners;
  for (std::size_t begin = 0; begin < samples.size(); begin += kChunk) {
    const auto idx = samples.subspan(begin, std::min(kChunk, samples.size() - begin));
    owners.assign(idx.size(), 0);
    for (std::size_t i = 0; i < idx.size(); ++i) owners[i] = data.owner[idx[i]];
    const Tensor v = nets::pevfa_eval(net, gather_rows(data.states, idx), gather_rows(data.embeddings, owners));
    for (std::size_t i = 0; i < idx.size(); ++i) {
      const double d = v[i] - data.returns[idx[i]];
      total += d * d;
    }
  }
  return total / static_cast<double>(samples.size());
}

void shuffle_in_place(std::vector<std::size_t>& v, Rng& rng) {
  for (std::size_t i = v.size(); i > 1; --i) {
    std::uniform_int_distribution<std::size_t> pick(0, i - 1);
    std::swap(v[i - 1], v[pick(rng)]);
  }
}

}  // namespace

std::vector<GenEpoch> global_gen_trial(const GlobalGenConfig& cfg, const GlobalGenData& data,
                                       std::uint64_t seed, int trial) {
  const auto t = static_cast<std::uint64_t>(trial);
  const std::size_t n_policies = data.embeddings.rows();
  std::vector<std::size_t> order(n_policies);
  std::iota(order.begin(), order.end(), std::size_t{0});
  Rng split = make_rng(seed, "split", t);
  shuffle_in_place(order, split);
  const auto n_test = static_cast<std::size_t>(std::llround(cfg.test_fraction * static_cast<double>(n_policies)));
  std::vector<char> is_test(n_policies, 0);
  for (std::size_t i = n_policies - n_test; i < n_policies; ++i) is_test[order[i]] = 1;
  std::vector<std::size_t> train, test;
  for (std::size_t s = 0; s < data.owner.size(); ++s) (is_test[data.owner[s]] ? test : train).push_back(s);

  Rng init = make_rng(seed, "gen-init", t);
  auto net = nets::make_pevfa(data.states.cols(), data.embeddings.cols(), cfg.stream, cfg.trunk, init);
  auto params = net.tensors();
  ad::AdamState adam(params, cfg.lr);
  Rng mb = make_rng(seed, "gen-minibatch", t);

  std::vector<GenEpoch> out;
  out.push_back({trial, 0, gen_loss(net, data, train), gen_loss(net, data, test)});
  std::vector<std::size_t> owners;
  for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
    shuffle_in_place(train, mb);
    for (std::size_t begin = 0; begin < train.size(); begin += cfg.batch) {
      const std::span<const std::size_t> idx(train.data() + begin, std::min(cfg.batch, train.size() - begin));
      owners.assign(idx.size(), 0);
      Tensor target(idx.size(), 1);
      for (std::size_t i = 0; i < idx.size(); ++i) {
        owners[i] = data.owner[idx[i]];
        target[i] = data.returns[idx[i]];
      }
      ad::Tape tape;
      auto v = nets::pevfa_forward(tape, net, tape.constant(gather_rows(data.states, idx)),
                                   tape.constant(gather_rows(data.embeddings, owners)));
      auto loss = tape.mean(tape.square(tape.sub(v, tape.constant(std::move(target)))));
      tape.backward(loss);
      ad::adam_step(params, ad::collect_grads(tape, params), adam);
    }
    std::sort(train.begin(), train.end());
    out.push_back({trial, epoch, gen_loss(net, data, train), gen_loss(net, data, test)});
  }
  return out;
}

void write_generalization_csv(std::ostream& os, const std::vector<GenEpoch>& rows) {
  os << "trial,epoch,train_loss,test_loss\n";
  os << std::setprecision(std::numeric_limits<double>::max_digits10);
  for (const auto& r : rows) os << r.trial << ',' << r.epoch << ',' << r.train_loss << ',' << r.test_loss << '\n';
}

// ---------------------------------------------------------------------------

std::vector<theory::LossRecord> local_gen_theory(const rl::RunResult& run,
                                                 std::size_t steps_per_iteration) {
  std::vector<theory::LossRecord> out;
  const auto& logs = run.logs;
  if (run.policy_path.size() != logs.size() + 1 || run.probe_states.size() != logs.size()) {
    throw std::invalid_argument("local_gen_theory: run was not recorded with keep_policy_path");
  }
  for (std::size_t t = 0; t + 1 < logs.size(); ++t) {
    const double d = theory::policy_distance(run.policy_path[t], run.policy_path[t + 1], run.probe_states[t]);
    auto rec = theory::make_loss_record(static_cast<int>(t), std::sqrt(logs[t].pevfa_loss_pre),
                                        std::sqrt(logs[t].pevfa_loss_post),
                                        std::sqrt(logs[t + 1].pevfa_loss_pre), d, 0.0, 0.0,
                                        theory::ValueOracle::monte_carlo(steps_per_iteration));
    rec.oracle_available = false;
    out.push_back(rec);
  }
  return out;
}

LocalGenRun local_gen_run(const ExperimentConfig& config, std::uint64_t seed) {
  rl::TrainConfig cfg = config.train;
  cfg.algo = rl::Algo::Ppo;
  cfg.shadow_pevfa = true;
  cfg.keep_policy_path = true;
  LocalGenRun out;
  out.run = rl::run_ppo(cfg, config.env, seed);
  out.theory = local_gen_theory(out.run, static_cast<std::size_t>(cfg.steps_per_iteration));
  return out;
}

void write_comparison_csv(std::ostream& os, const std::vector<rl::IterationLog>& logs) {
  os << "iteration,avg_return,vfa_loss_pre,vfa_loss_post,pevfa_loss_pre,pevfa_loss_post\n";
  os << std::setprecision(std::numeric_limits<double>::max_digits10);
  for (const auto& l : logs) {
    os << l.iteration << ',' << l.avg_return << ',' << l.vfa_loss_pre << ',' << l.vfa_loss_post
       << ',' << l.pevfa_loss_pre << ',' << l.pevfa_loss_post << '\n';
  }
}

// ---------------------------------------------------------------------------

int thread_cap() {
  const char* v = std::getenv("PEVFA_LAB_THREADS");
  if (!v || !*v) return 1;
  char* end = nullptr;
  const long n = std::strtol(v, &end, 10);
  if (*end != '\0' || n < 1) throw ConfigError(std::string("PEVFA_LAB_THREADS must be a positive integer, got '") + v + "'");
  return static_cast<int>(n);
}

namespace {

void parallel_for(std::size_t n, int threads, const std::function<void(std::size_t)>& task) {
  const std::size_t workers = std::min<std::size_t>(n, static_cast<std::size_t>(std::max(threads, 1)));
  if (workers <= 1) {
    for (std::size_t i = 0; i < n; ++i) task(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::vector<std::exception_ptr> errors(n);
  std::vector<std::thread> pool;
  for (std::size_t w = 0; w < workers; ++w) {
    pool.emplace_back([&] {
      for (std::size_t i = next++; i < n; i = next++) {
        try {
          task(i);
        } catch (...) {
          errors[i] = std::current_exception();
        }
      }
    });
  }
  for (auto& t : pool) t.join();
  for (auto& e : errors) {
    if (e) std::rethrow_exception(e);
  }
}

std::ofstream open_out(const fs::path& path) {
  fs::create_directories(path.parent_path());
  std::ofstream os(path, std::ios::trunc);
  if (!os) throw std::runtime_error("cannot write " + path.string());
  return os;
}

std::string seed_dir(std::uint64_t seed) { return "seed_" + std::to_string(seed); }

std::vector<ArtifactFile> run_seed(const ExperimentConfig& c, std::uint64_t seed, const fs::path& out) {
  std::vector<ArtifactFile> files;
  const std::string dir = seed_dir(seed);
  auto emit = [&](const std::string& role, const std::string& rel, auto&& writer) {
    auto os = open_out(out / rel);
    writer(os);
    files.push_back({role, rel});
  };
  switch (c.kind) {
    case ExperimentKind::Train: {
      rl::TrainConfig cfg = c.train;
      const bool checkpoints = cfg.algo == rl::Algo::PpoPeVFA || cfg.checkpoint_every > 0;
      if (checkpoints) cfg.checkpoint_dir = (out / dir / "checkpoints").string();
      const auto run = rl::run_training(cfg, c.env, seed);
      emit("train-log", dir + "/train_log.csv", [&](std::ostream& os) { rl::write_iteration_csv(os, run.logs); });
      if (checkpoints) files.push_back({"checkpoints", dir + "/checkpoints"});
      break;
    }
    case ExperimentKind::LocalGen: {
      const auto lg = local_gen_run(c, seed);
      emit("train-log", dir + "/train_log.csv", [&](std::ostream& os) { rl::write_iteration_csv(os, lg.run.logs); });
      emit("comparison-log", dir + "/local_gen.csv", [&](std::ostream& os) { write_comparison_csv(os, lg.run.logs); });
      emit("theory-log", dir + "/theory.csv", [&](std::ostream& os) { theory::write_theory_csv(os, lg.theory); });
      break;
    }
    case ExperimentKind::GlobalGen: {
      const auto data = make_global_gen_data(c.global, seed);
      std::vector<GenEpoch> rows;
      for (int t = 0; t < c.global.trials; ++t) {
        auto trial = global_gen_trial(c.global, data, seed, t);
        rows.insert(rows.end(), trial.begin(), trial.end());
      }
      emit("generalization-log", dir + "/generalization.csv", [&](std::ostream& os) { write_generalization_csv(os, rows); });
      break;
    }
    case ExperimentKind::TheoryCheck: {
      std::ostringstream summary;
      summary << "mdp,iterations,thm1_available,thm1_condition_held,thm1_violations,lemma2_defined,"
                 "lemma2_violations,lemma2_sampled_violation_rate\n";
      summary << std::setprecision(std::numeric_limits<double>::max_digits10);
      for (int m = 0; m < c.theory.mdps; ++m) {
        const auto run = theory::run_tabular_gpi(c.theory.gpi, substream_seed(seed, "mdp", static_cast<std::uint64_t>(m)));
        emit("theory-log", dir + "/theory_mdp_" + std::to_string(m) + ".csv",
             [&](std::ostream& os) { theory::write_theory_csv(os, run.records); });
        const auto thm = theory::theorem1_check(run.records);
        summary << m << ',' << run.records.size() << ',' << thm.available << ',' << thm.condition_held << ','
                << thm.violations << ',';
        if (run.records.size() >= 2) {
          const auto lem = theory::lemma2_track(run.records);
          summary << lem.defined << ',' << lem.violations << ',';
          if (c.theory.gpi.lipschitz_samples > 0) {
            summary << theory::lemma2_track(run.records, theory::LipschitzSource::Sampled).violation_rate;
          } else {
            summary << "nan";
          }
        } else {
          summary << "0,0,nan";
        }
        summary << '\n';
      }
      emit("summary", dir + "/theory_summary.csv", [&](std::ostream& os) { os << summary.str(); });
      break;
    }
  }
  return files;
}

}  // namespace

ArtifactManifest run_experiment(const ExperimentConfig& config) {
  config.validate();
  const fs::path out = config.out_dir;
  fs::create_directories(out);
  std::vector<std::vector<ArtifactFile>> per_seed(config.seeds.size());
  parallel_for(config.seeds.size(), thread_cap(),
               [&](std::size_t i) { per_seed[i] = run_seed(config, config.seeds[i], out); });

  ArtifactManifest m;
  m.config_hash = config_hash(config.entries);
  m.run_id = std::string(experiment_name(config.kind)) + "-" + m.config_hash.substr(0, 8);
  {
    auto os = open_out(out / "config.txt");
    write_config(os, config.entries);
  }
  m.files.push_back({"config", "config.txt"});
  for (const auto& files : per_seed) m.files.insert(m.files.end(), files.begin(), files.end());
  auto os = open_out(out / "manifest.txt");
  write_manifest(os, m);
  return m;
}

ArtifactManifest run_experiment(const fs::path& config_path, const ConfigEntries& overrides) {
  ConfigEntries entries = read_config_file(config_path);
  for (const auto& [k, v] : overrides) entries[k] = v;
  return run_experiment(make_experiment_config(entries));
}

fs::path dump_embeddings(const fs::path& run_dir) {
  std::vector<std::pair<std::uint64_t, fs::path>> seeds;
  if (fs::is_directory(run_dir)) {
    for (const auto& entry : fs::directory_iterator(run_dir)) {
      const std::string name = entry.path().filename().string();
      if (!entry.is_directory() || name.rfind("seed_", 0) != 0) continue;
      const fs::path ck = entry.path() / "checkpoints";
      if (fs::exists(ck / "records.txt") && fs::exists(ck / "encoder.txt")) {
        seeds.emplace_back(std::stoull(name.substr(5)), ck);
      }
    }
  }
  if (seeds.empty()) {
    throw std::runtime_error("dump_embeddings: no checkpoints with records and an encoder under " + run_dir.string());
  }
  std::sort(seeds.begin(), seeds.end());
  std::vector<repr::EmbeddingRow> rows;
  for (const auto& [seed, ck] : seeds) {
    std::ifstream enc_in(ck / "encoder.txt");
    const auto encoder = repr::read_encoder(enc_in);
    std::ifstream rec_in(ck / "records.txt");
    while (rec_in >> std::ws && rec_in.peek() != EOF) {
      const auto rec = repr::read_record(rec_in);
      rows.push_back({rec.id, seed, rec.iteration, rec.avg_return, repr::encode(encoder, rec)});
    }
  }
  const fs::path path = run_dir / "embeddings.csv";
  {
    auto os = open_out(path);
    repr::write_embeddings_csv(os, rows);
  }
  const fs::path manifest_path = run_dir / "manifest.txt";
  if (fs::exists(manifest_path)) {
    ArtifactManifest m;
    {
      std::ifstream is(manifest_path);
      m = read_manifest(is);
    }
    if (m.count("embeddings") == 0) {
      m.files.push_back({"embeddings", "embeddings.csv"});
      auto os = open_out(manifest_path);
      write_manifest(os, m);
    }
  }
  return path;
}

}  // namespace pevfa::harness
