#pragma once

// Run configuration as flat `key = value` text. Blank lines and `#` comments
// are ignored; unknown keys are errors. Keys:
//
//   task              copy | reverse | lexical_translate | lexical_translate_with_insertions
//   vocab min_length max_length permutation_seed window insertion_rate
//   steps warmup batch_size lr_scale log_every checkpoint_every probe_size divergence_window
//   adam_beta1 adam_beta2 adam_epsilon
//   layers model_dim heads ffn_dim dropout attention_dropout label_smoothing
//   norm_epsilon xavier_fan post_norm seed
//   mechanism         preset for all three attention types (see mechanism_preset)
//   <type>.mechanism  preset for one type; <type> is encoder_self, decoder_self or cross
//   <type>.activation <type>.leak <type>.norm <type>.gain_init
//
// Model vocabularies follow the task vocabulary plus the special tokens.
// echo_config writes every key explicitly and parses back to the same run.

#include <array>
#include <cstdio>
#include <istream>
#include <sstream>
#include <stdexcept>
#include <string>
#include <string_view>
#include <type_traits>
#include <vector>

#include "rela/toydata.hpp"
#include "rela/transformer.hpp"

namespace rela {

class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

struct RunConfig {
  TrainConfig train;
  ToyTask task = ToyTask::make(TaskKind::copy);
  std::size_t steps = 3000;

  void finalize() {
    task.rebuild_tables();
    train.model.source_vocab = task.vocab + kTokenOffset;
    train.model.target_vocab = task.vocab + kTokenOffset;
    train.validate();
  }
};

namespace detail {

inline std::string trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return std::string(s.substr(b, e - b + 1));
}

template <class T>
T parse_number(const std::string& key, const std::string& value) {
  std::istringstream is(value);
  T out{};
  is >> out;
  if (!is || !is.eof()) throw ConfigError("bad value '" + value + "' for " + key);
  if constexpr (std::is_unsigned_v<T>)
    if (value.find('-') != std::string::npos) throw ConfigError("negative value '" + value + "' for " + key);
  return out;
}

inline bool parse_bool(const std::string& key, const std::string& value) {
  if (value == "true" || value == "1") return true;
  if (value == "false" || value == "0") return false;
  throw ConfigError("bad boolean '" + value + "' for " + key);
}

}  // namespace detail

/// Applies one setting. Throws ConfigError on unknown keys or bad values.
inline void apply_setting(RunConfig& rc, const std::string& key, const std::string& value) {
  using detail::parse_number;
  auto& t = rc.train;
  auto& m = t.model;
  auto& task = rc.task;
  try {
    if (const auto dot = key.find('.'); dot != std::string::npos) {
      const auto type = parse_attention_type(key.substr(0, dot));
      const std::string field = key.substr(dot + 1);
      Mechanism& mech = m.attention[static_cast<std::size_t>(type)];
      if (field == "mechanism") mech = mechanism_preset(value);
      else if (field == "activation") mech.activation.tag = parse_activation(value);
      else if (field == "leak") mech.activation.leak = parse_number<double>(key, value);
      else if (field == "norm") mech.norm = parse_norm(value);
      else if (field == "gain_init") mech.init = parse_gain_init(value);
      else throw ConfigError("unknown key " + key);
      return;
    }
    if (key == "task") task.kind = parse_task_kind(value);
    else if (key == "vocab") task.vocab = parse_number<std::size_t>(key, value);
    else if (key == "min_length") task.min_length = parse_number<std::size_t>(key, value);
    else if (key == "max_length") task.max_length = parse_number<std::size_t>(key, value);
    else if (key == "permutation_seed") task.permutation_seed = parse_number<std::uint64_t>(key, value);
    else if (key == "window") task.window = parse_number<std::size_t>(key, value);
    else if (key == "insertion_rate") task.insertion_rate = parse_number<double>(key, value);
    else if (key == "steps") rc.steps = parse_number<std::size_t>(key, value);
    else if (key == "warmup") t.warmup = parse_number<std::size_t>(key, value);
    else if (key == "batch_size") t.batch_size = parse_number<std::size_t>(key, value);
    else if (key == "lr_scale") t.lr_scale = parse_number<double>(key, value);
    else if (key == "log_every") t.log_every = parse_number<std::size_t>(key, value);
    else if (key == "checkpoint_every") t.checkpoint_every = parse_number<std::size_t>(key, value);
    else if (key == "probe_size") t.probe_size = parse_number<std::size_t>(key, value);
    else if (key == "divergence_window") t.divergence_window = parse_number<std::size_t>(key, value);
    else if (key == "adam_beta1") t.adam.beta1 = parse_number<double>(key, value);
    else if (key == "adam_beta2") t.adam.beta2 = parse_number<double>(key, value);
    else if (key == "adam_epsilon") t.adam.epsilon = parse_number<double>(key, value);
    else if (key == "layers") m.layers = parse_number<std::size_t>(key, value);
    else if (key == "model_dim") m.model_dim = parse_number<std::size_t>(key, value);
    else if (key == "heads") m.heads = parse_number<std::size_t>(key, value);
    else if (key == "ffn_dim") m.ffn_dim = parse_number<std::size_t>(key, value);
    else if (key == "dropout") m.dropout = parse_number<double>(key, value);
    else if (key == "attention_dropout") m.attention_dropout = parse_number<double>(key, value);
    else if (key == "label_smoothing") m.label_smoothing = parse_number<double>(key, value);
    else if (key == "norm_epsilon") m.norm_epsilon = parse_number<double>(key, value);
    else if (key == "xavier_fan") m.xavier_fan = parse_xavier_fan(value);
    else if (key == "post_norm") m.post_norm = detail::parse_bool(key, value);
    else if (key == "seed") m.seed = parse_number<std::uint64_t>(key, value);
    else if (key == "mechanism") m.set_all(mechanism_preset(value));
    else throw ConfigError("unknown key " + key);
  } catch (const ConfigError&) {
    throw;
  } catch (const std::invalid_argument& e) {
    throw ConfigError(key + ": " + e.what());
  }
}

/// Parses `key = value` lines on top of `base` and validates the result.
inline RunConfig parse_config(std::istream& is, RunConfig base = {}) {
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    if (const auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
    const std::string body = detail::trim(line);
    if (body.empty()) continue;
    const auto eq = body.find('=');
    if (eq == std::string::npos) throw ConfigError("line " + std::to_string(lineno) + ": expected key = value");
    const std::string key = detail::trim(std::string_view(body).substr(0, eq));
    const std::string value = detail::trim(std::string_view(body).substr(eq + 1));
    if (key.empty() || value.empty()) throw ConfigError("line " + std::to_string(lineno) + ": empty key or value");
    try {
      apply_setting(base, key, value);
    } catch (const ConfigError& e) {
      throw ConfigError("line " + std::to_string(lineno) + ": " + e.what());
    }
  }
  try {
    base.finalize();
  } catch (const ConfigError&) {
    throw;
  } catch (const std::invalid_argument& e) {
    throw ConfigError(e.what());
  }
  return base;
}

inline RunConfig parse_config(const std::string& text, RunConfig base = {}) {
  std::istringstream is(text);
  return parse_config(is, std::move(base));
}

inline std::string echo_config(const RunConfig& rc) {
  std::ostringstream os;
  os.precision(17);
  const auto& t = rc.train;
  const auto& m = t.model;
  os << "task = " << to_string(rc.task.kind) << "\nvocab = " << rc.task.vocab << "\nmin_length = " << rc.task.min_length
     << "\nmax_length = " << rc.task.max_length << "\npermutation_seed = " << rc.task.permutation_seed
     << "\nwindow = " << rc.task.window << "\ninsertion_rate = " << rc.task.insertion_rate << "\nsteps = " << rc.steps
     << "\nwarmup = " << t.warmup << "\nbatch_size = " << t.batch_size << "\nlr_scale = " << t.lr_scale
     << "\nlog_every = " << t.log_every << "\ncheckpoint_every = " << t.checkpoint_every
     << "\nprobe_size = " << t.probe_size << "\ndivergence_window = " << t.divergence_window
     << "\nadam_beta1 = " << t.adam.beta1 << "\nadam_beta2 = " << t.adam.beta2 << "\nadam_epsilon = " << t.adam.epsilon
     << "\nlayers = " << m.layers << "\nmodel_dim = " << m.model_dim << "\nheads = " << m.heads
     << "\nffn_dim = " << m.ffn_dim << "\ndropout = " << m.dropout << "\nattention_dropout = " << m.attention_dropout
     << "\nlabel_smoothing = " << m.label_smoothing << "\nnorm_epsilon = " << m.norm_epsilon
     << "\nxavier_fan = " << to_string(m.xavier_fan) << "\npost_norm = " << (m.post_norm ? "true" : "false")
     << "\nseed = " << m.seed << '\n';
  for (auto type : kAttentionTypes) {
    const auto& mech = m.mechanism(type);
    const std::string p(to_string(type));
    os << p << ".activation = " << to_string(mech.activation.tag) << '\n'
       << p << ".leak = " << mech.activation.leak << '\n'
       << p << ".norm = " << to_string(mech.norm) << '\n'
       << p << ".gain_init = " << to_string(mech.init) << '\n';
  }
  return os.str();
}

// Streams beyond the four used by train(): held-out evaluation sets and the
// target shuffle of the hallucination probe.
inline constexpr std::uint64_t kHeldOutStream = 5;
inline constexpr std::uint64_t kShuffleStream = 6;

inline Dataset held_out(const RunConfig& rc, std::size_t count) {
  Rng rng = make_rng(rc.train.model.seed, kHeldOutStream);
  return generate(rc.task, rng, count);
}

inline std::string format_double(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

/// step,loss,lr,accuracy,divergence_flag with round-trip precision.
inline std::string telemetry_csv(const std::vector<TelemetryRow>& rows) {
  std::string out = "step,loss,lr,accuracy,divergence_flag\n";
  for (const auto& r : rows)
    out += std::to_string(r.step) + ',' + format_double(r.loss) + ',' + format_double(r.lr) + ',' +
           format_double(r.accuracy) + ',' + (r.divergence_flag ? "1" : "0") + '\n';
  return out;
}

struct AblationRow {
  int id;
  std::string label;
  std::array<Mechanism, 3> attention;  // encoder_self, decoder_self, cross
};

/// The mechanism ablation: every attention type switched together (rows
/// 1-10), then ReLA-g on one attention type with softmax on the others.
inline std::vector<AblationRow> ablation_grid() {
  auto all = [](const char* preset) {
    const Mechanism m = mechanism_preset(preset);
    return std::array<Mechanism, 3>{m, m, m};
  };
  auto only = [](AttentionType t) {
    auto a = std::array<Mechanism, 3>{mechanism_preset("softmax"), mechanism_preset("softmax"),
                                      mechanism_preset("softmax")};
    a[static_cast<std::size_t>(t)] = mechanism_preset("rela_g");
    return a;
  };
  return {{1, "softmax", all("softmax")},
          {2, "sparsemax", all("sparsemax")},
          {3, "entmax15", all("entmax15")},
          {4, "relu alone", all("relu")},
          {5, "relu + rmsnorm", all("relu_rmsnorm")},
          {6, "rela-i", all("rela_i")},
          {7, "rela-g", all("rela_g")},
          {8, "rela-g + layernorm", all("rela_g_layernorm")},
          {9, "rela-g + gelu", all("rela_g_gelu")},
          {10, "rela-g + leaky relu", all("rela_g_leaky")},
          {11, "rela-g encoder attention only", only(AttentionType::encoder_self)},
          {12, "rela-g decoder attention only", only(AttentionType::decoder_self)},
          {13, "rela-g cross attention only", only(AttentionType::cross)}};
}

}  // namespace rela
