#pragma once

// Small encoder-decoder transformer over toy tasks: embeddings with sinusoidal
// positions, pre-norm (or post-norm) residual blocks with the three attention
// types, label-smoothed cross entropy, Adam with inverse-sqrt warmup, and a
// training loop that records loss telemetry and a divergence flag.

#include <algorithm>
#include <array>
#include <cmath>
#include <functional>
#include <limits>
#include <map>
#include <memory>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "json.hpp"
#include "rela/activations.hpp"
#include "rela/attention.hpp"
#include "rela/normalization.hpp"
#include "rela/rng.hpp"
#include "rela/tensor.hpp"
#include "rela/toydata.hpp"

namespace rela {

inline constexpr int kPad = 0;  // also the decoder start symbol
inline constexpr int kEos = 1;
inline constexpr int kTokenOffset = 2;

/// Attention activation plus its post-attention normalization.
struct Mechanism {
  ActivationKind activation;
  NormKind norm = NormKind::none;
  GainInit init = GainInit::ones;

  friend bool operator==(const Mechanism&, const Mechanism&) = default;
};

/// Named mechanisms covering the ablation grid.
inline Mechanism mechanism_preset(std::string_view name) {
  using A = ActivationTag;
  if (name == "softmax") return {{A::softmax}, NormKind::none, GainInit::ones};
  if (name == "sparsemax") return {{A::sparsemax}, NormKind::none, GainInit::ones};
  if (name == "entmax15") return {{A::entmax15}, NormKind::none, GainInit::ones};
  if (name == "relu") return {{A::relu}, NormKind::none, GainInit::ones};
  if (name == "relu_rmsnorm") return {{A::relu}, NormKind::rmsnorm, GainInit::ones};
  if (name == "rela_i") return {{A::relu}, NormKind::rmsnorm, GainInit::xavier_uniform_gain};
  if (name == "rela_g") return {{A::relu}, NormKind::gated_rmsnorm, GainInit::ones};
  if (name == "rela_g_layernorm") return {{A::relu}, NormKind::gated_layernorm, GainInit::ones};
  if (name == "rela_g_gelu") return {{A::gelu}, NormKind::gated_rmsnorm, GainInit::ones};
  if (name == "rela_g_leaky") return {{A::leaky_relu}, NormKind::gated_rmsnorm, GainInit::ones};
  throw std::invalid_argument("unknown mechanism preset '" + std::string(name) + "'");
}

struct ModelConfig {
  std::size_t layers = 2;
  std::size_t model_dim = 64;
  std::size_t heads = 4;
  std::size_t ffn_dim = 256;
  std::size_t source_vocab = 50 + kTokenOffset;
  std::size_t target_vocab = 50 + kTokenOffset;
  double dropout = 0.1;            // residual connections
  double attention_dropout = 0.1;  // attention weights
  double label_smoothing = 0.1;
  double norm_epsilon = 1e-8;
  std::array<Mechanism, 3> attention{mechanism_preset("softmax"), mechanism_preset("softmax"),
                                     mechanism_preset("softmax")};
  XavierFan xavier_fan = XavierFan::head_dim;
  bool post_norm = false;
  std::uint64_t seed = 1;

  std::size_t head_dim() const { return heads ? model_dim / heads : 0; }
  const Mechanism& mechanism(AttentionType t) const { return attention[static_cast<std::size_t>(t)]; }
  void set_all(const Mechanism& m) { attention = {m, m, m}; }

  AttentionConfig attention_config(AttentionType t) const {
    const Mechanism& m = mechanism(t);
    AttentionConfig c;
    c.model_dim = model_dim;
    c.heads = heads;
    c.head_dim = head_dim();
    c.activation = m.activation;
    c.norm = NormConfig{m.norm, model_dim, head_dim(), norm_epsilon, m.init, xavier_fan};
    c.dropout_rate = attention_dropout;
    return c;
  }

  void validate() const {
    if (layers == 0) throw std::invalid_argument("layers must be positive");
    if (heads == 0 || model_dim % heads != 0)
      throw std::invalid_argument("model_dim must be a multiple of heads");
    if (ffn_dim < model_dim) throw std::invalid_argument("ffn_dim must be at least model_dim");
    if (source_vocab <= kTokenOffset || target_vocab <= kTokenOffset)
      throw std::invalid_argument("vocabularies must include the special tokens");
    if (!(dropout >= 0 && dropout < 1) || !(attention_dropout >= 0 && attention_dropout < 1))
      throw std::invalid_argument("dropout rates must be in [0, 1)");
    if (!(label_smoothing >= 0 && label_smoothing < 1)) throw std::invalid_argument("label smoothing in [0, 1)");
    for (auto t : kAttentionTypes) attention_config(t).validate();
  }
};

inline nlohmann::json to_json(const ModelConfig& c) {
  nlohmann::json mech = nlohmann::json::object();
  for (auto t : kAttentionTypes) {
    const auto& m = c.mechanism(t);
    mech[std::string(to_string(t))] = {{"activation", to_string(m.activation.tag)},
                                       {"leak", m.activation.leak},
                                       {"norm", to_string(m.norm)},
                                       {"init", to_string(m.init)}};
  }
  return {{"layers", c.layers},
          {"model_dim", c.model_dim},
          {"heads", c.heads},
          {"ffn_dim", c.ffn_dim},
          {"source_vocab", c.source_vocab},
          {"target_vocab", c.target_vocab},
          {"dropout", c.dropout},
          {"attention_dropout", c.attention_dropout},
          {"label_smoothing", c.label_smoothing},
          {"norm_epsilon", c.norm_epsilon},
          {"xavier_fan", to_string(c.xavier_fan)},
          {"post_norm", c.post_norm},
          {"seed", c.seed},
          {"attention", mech}};
}

inline ModelConfig model_config_from_json(const nlohmann::json& j) {
  ModelConfig c;
  c.layers = j.at("layers");
  c.model_dim = j.at("model_dim");
  c.heads = j.at("heads");
  c.ffn_dim = j.at("ffn_dim");
  c.source_vocab = j.at("source_vocab");
  c.target_vocab = j.at("target_vocab");
  c.dropout = j.at("dropout");
  c.attention_dropout = j.at("attention_dropout");
  c.label_smoothing = j.at("label_smoothing");
  c.norm_epsilon = j.value("norm_epsilon", 1e-8);
  c.xavier_fan = parse_xavier_fan(j.value("xavier_fan", std::string("head_dim")));
  c.post_norm = j.value("post_norm", false);
  c.seed = j.at("seed");
  for (auto t : kAttentionTypes) {
    const auto& m = j.at("attention").at(std::string(to_string(t)));
    Mechanism& dst = c.attention[static_cast<std::size_t>(t)];
    dst.activation.tag = parse_activation(m.at("activation").get<std::string>());
    dst.activation.leak = m.value("leak", 0.01);
    dst.norm = parse_norm(m.at("norm").get<std::string>());
    dst.init = parse_gain_init(m.at("init").get<std::string>());
  }
  c.validate();
  return c;
}

// ---------------------------------------------------------------------------
// Parameters

struct LayerNormParams {
  Tensor gain, bias;
};

struct FeedForwardParams {
  Tensor w1, b1, w2, b2;
};

struct EncoderLayer {
  AttentionParams self;
  LayerNormParams ln_self, ln_ffn;
  FeedForwardParams ffn;
};

struct DecoderLayer {
  AttentionParams self, cross;
  LayerNormParams ln_self, ln_cross, ln_ffn;
  FeedForwardParams ffn;
};

class Model {
 public:
  explicit Model(const ModelConfig& config) : config_(config) {
    config_.validate();
    Rng rng = make_rng(config_.seed, 1);
    const std::size_t d = config_.model_dim;
    const double embed_sd = 1.0 / std::sqrt(static_cast<double>(d));
    auto normal_table = [&](std::size_t rows) {
      Tensor t = Tensor::zeros({rows, d}, true);
      for (auto& v : t.mutable_data()) v = embed_sd * normal(rng);
      return t;
    };
    auto xavier = [&](std::size_t fan_in, std::size_t fan_out) {
      const double bound = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
      Tensor w = Tensor::zeros({fan_in, fan_out}, true);
      for (auto& v : w.mutable_data()) v = uniform(rng, -bound, bound);
      return w;
    };
    auto ln = [&] { return LayerNormParams{Tensor::full({d}, 1.0, true), Tensor::zeros({d}, true)}; };
    auto ffn = [&] {
      return FeedForwardParams{xavier(d, config_.ffn_dim), Tensor::zeros({config_.ffn_dim}, true),
                               xavier(config_.ffn_dim, d), Tensor::zeros({d}, true)};
    };
    source_embedding_ = normal_table(config_.source_vocab);
    target_embedding_ = normal_table(config_.target_vocab);
    for (std::size_t l = 0; l < config_.layers; ++l) {
      EncoderLayer e;
      e.self = init_attention(config_.attention_config(AttentionType::encoder_self), rng);
      e.ln_self = ln();
      e.ln_ffn = ln();
      e.ffn = ffn();
      encoder_.push_back(std::move(e));
    }
    for (std::size_t l = 0; l < config_.layers; ++l) {
      DecoderLayer dl;
      dl.self = init_attention(config_.attention_config(AttentionType::decoder_self), rng);
      dl.cross = init_attention(config_.attention_config(AttentionType::cross), rng);
      dl.ln_self = ln();
      dl.ln_cross = ln();
      dl.ln_ffn = ln();
      dl.ffn = ffn();
      decoder_.push_back(std::move(dl));
    }
    encoder_norm_ = ln();
    decoder_norm_ = ln();
    output_weight_ = xavier(d, config_.target_vocab);
    output_bias_ = Tensor::zeros({config_.target_vocab}, true);
    index_parameters();
  }

  Model(const Model& other) : Model(other.config_) { copy_values_from(other); }
  Model& operator=(const Model& other) {
    if (this != &other) {
      Model fresh(other);
      *this = std::move(fresh);
    }
    return *this;
  }
  Model(Model&&) = default;
  Model& operator=(Model&&) = default;

  const ModelConfig& config() const { return config_; }

  /// Named parameter handles; they share storage with the model.
  const std::vector<std::pair<std::string, Tensor>>& parameters() const { return named_; }

  void zero_grad() {
    for (auto& [name, t] : named_) t.zero_grad();
  }

  void copy_values_from(const Model& other) {
    if (other.named_.size() != named_.size()) throw std::invalid_argument("model structure mismatch");
    for (std::size_t i = 0; i < named_.size(); ++i) {
      auto src = other.named_[i].second.data();
      auto dst = named_[i].second.mutable_data();
      if (src.size() != dst.size()) throw std::invalid_argument("parameter shape mismatch: " + named_[i].first);
      std::copy(src.begin(), src.end(), dst.begin());
    }
  }

  const Tensor& source_embedding() const { return source_embedding_; }
  const Tensor& target_embedding() const { return target_embedding_; }
  const std::vector<EncoderLayer>& encoder() const { return encoder_; }
  const std::vector<DecoderLayer>& decoder() const { return decoder_; }
  const LayerNormParams& encoder_norm() const { return encoder_norm_; }
  const LayerNormParams& decoder_norm() const { return decoder_norm_; }
  const Tensor& output_weight() const { return output_weight_; }
  const Tensor& output_bias() const { return output_bias_; }

 private:
  void index_parameters() {
    named_.clear();
    auto add = [this](std::string name, const Tensor& t) {
      if (t.defined()) named_.emplace_back(std::move(name), t);
    };
    auto add_attention = [&](const std::string& prefix, const AttentionParams& p) {
      add(prefix + ".wq", p.wq);
      add(prefix + ".wk", p.wk);
      add(prefix + ".wv", p.wv);
      add(prefix + ".wo", p.wo);
      add(prefix + ".norm.gain", p.norm.gain);
      add(prefix + ".norm.gate", p.norm.gate);
      add(prefix + ".norm.bias", p.norm.bias);
    };
    auto add_ln = [&](const std::string& prefix, const LayerNormParams& p) {
      add(prefix + ".gain", p.gain);
      add(prefix + ".bias", p.bias);
    };
    auto add_ffn = [&](const std::string& prefix, const FeedForwardParams& p) {
      add(prefix + ".w1", p.w1);
      add(prefix + ".b1", p.b1);
      add(prefix + ".w2", p.w2);
      add(prefix + ".b2", p.b2);
    };
    add("src_embed", source_embedding_);
    add("tgt_embed", target_embedding_);
    for (std::size_t l = 0; l < encoder_.size(); ++l) {
      const std::string p = "enc." + std::to_string(l);
      add_attention(p + ".self", encoder_[l].self);
      add_ln(p + ".ln_self", encoder_[l].ln_self);
      add_ln(p + ".ln_ffn", encoder_[l].ln_ffn);
      add_ffn(p + ".ffn", encoder_[l].ffn);
    }
    for (std::size_t l = 0; l < decoder_.size(); ++l) {
      const std::string p = "dec." + std::to_string(l);
      add_attention(p + ".self", decoder_[l].self);
      add_attention(p + ".cross", decoder_[l].cross);
      add_ln(p + ".ln_self", decoder_[l].ln_self);
      add_ln(p + ".ln_cross", decoder_[l].ln_cross);
      add_ln(p + ".ln_ffn", decoder_[l].ln_ffn);
      add_ffn(p + ".ffn", decoder_[l].ffn);
    }
    add_ln("enc.ln", encoder_norm_);
    add_ln("dec.ln", decoder_norm_);
    add("out.w", output_weight_);
    add("out.b", output_bias_);
  }

  ModelConfig config_;
  Tensor source_embedding_, target_embedding_;
  std::vector<EncoderLayer> encoder_;
  std::vector<DecoderLayer> decoder_;
  LayerNormParams encoder_norm_, decoder_norm_;
  Tensor output_weight_, output_bias_;
  std::vector<std::pair<std::string, Tensor>> named_;
};

// ---------------------------------------------------------------------------
// Batches

/// Padded batch in model token ids. Sources end with EOS; decoder inputs
/// start with the pad symbol and decoder targets end with EOS. Padding
/// targets are -1 (ignored by the loss).
struct Batch {
  std::size_t size = 0, source_len = 0, target_len = 0;
  std::vector<int> source_ids, decoder_input, decoder_target;
  std::vector<std::size_t> source_lengths, target_lengths;
};

inline Batch make_batch(std::span<const Example> examples, const ModelConfig& config) {
  if (examples.empty()) throw std::invalid_argument("empty batch");
  Batch b;
  b.size = examples.size();
  for (const auto& ex : examples) {
    b.source_len = std::max(b.source_len, ex.source.size() + 1);
    b.target_len = std::max(b.target_len, ex.target.size() + 1);
  }
  b.source_ids.assign(b.size * b.source_len, kPad);
  b.decoder_input.assign(b.size * b.target_len, kPad);
  b.decoder_target.assign(b.size * b.target_len, -1);
  auto check = [](int tok, std::size_t vocab) {
    if (tok < 0 || static_cast<std::size_t>(tok) + kTokenOffset >= vocab)
      throw std::out_of_range("token id " + std::to_string(tok) + " outside vocabulary of " +
                              std::to_string(vocab - kTokenOffset));
    return tok + kTokenOffset;
  };
  for (std::size_t e = 0; e < b.size; ++e) {
    const auto& ex = examples[e];
    for (std::size_t i = 0; i < ex.source.size(); ++i)
      b.source_ids[e * b.source_len + i] = check(ex.source[i], config.source_vocab);
    b.source_ids[e * b.source_len + ex.source.size()] = kEos;
    for (std::size_t i = 0; i < ex.target.size(); ++i) {
      const int tok = check(ex.target[i], config.target_vocab);
      b.decoder_input[e * b.target_len + i + 1] = tok;
      b.decoder_target[e * b.target_len + i] = tok;
    }
    b.decoder_target[e * b.target_len + ex.target.size()] = kEos;
    b.source_lengths.push_back(ex.source.size() + 1);
    b.target_lengths.push_back(ex.target.size() + 1);
  }
  return b;
}

// ---------------------------------------------------------------------------
// Forward pass

namespace detail {

inline Tensor positions(std::size_t batch, std::size_t len, std::size_t d) {
  std::vector<double> pe(batch * len * d);
  for (std::size_t pos = 0; pos < len; ++pos)
    for (std::size_t i = 0; i < d; i += 2) {
      const double angle = static_cast<double>(pos) / std::pow(10000.0, static_cast<double>(i) / static_cast<double>(d));
      for (std::size_t b = 0; b < batch; ++b) {
        pe[(b * len + pos) * d + i] = std::sin(angle);
        if (i + 1 < d) pe[(b * len + pos) * d + i + 1] = std::cos(angle);
      }
    }
  return Tensor({batch * len, d}, std::move(pe));
}

inline Tensor embed(const Tensor& table, std::span<const int> ids, std::size_t batch, std::size_t len) {
  const std::size_t d = table.dim(1);
  return add(scale(gather_rows(table, ids), std::sqrt(static_cast<double>(d))), positions(batch, len, d));
}

struct ForwardContext {
  const ModelConfig& config;
  Rng* rng;  // null in evaluation mode
  std::vector<AttentionRecord>* capture;
  std::size_t sentence_offset;

  Tensor norm(const Tensor& x, const LayerNormParams& p) const { return layernorm(x, p.gain, p.bias, config.norm_epsilon); }
  Tensor drop(const Tensor& x) const { return dropout(x, config.dropout, rng); }

  // Residual wrapper: pre-norm x + f(LN(x)) or post-norm LN(x + f(x)).
  template <class F>
  Tensor residual(const Tensor& x, const LayerNormParams& ln, F&& sublayer) const {
    if (config.post_norm) return norm(add(x, drop(sublayer(x))), ln);
    return add(x, drop(sublayer(norm(x, ln))));
  }

  Tensor ffn(const Tensor& x, const FeedForwardParams& p) const {
    Tensor h = relu(add(matmul(x, p.w1), p.b1));
    return add(matmul(h, p.w2), p.b2);
  }

  Tensor attend(const Tensor& x, const Tensor& y, const AttentionParams& p, AttentionType type, std::size_t layer,
                const BatchLayout& layout) const {
    AttentionConfig c = config.attention_config(type);
    if (!rng) c.dropout_rate = 0.0;
    CaptureSink sink;
    if (capture) sink = {capture, layer, type, sentence_offset};
    return mhatt_batched(x, y, p, c, layout, rng, sink);
  }
};

}  // namespace detail

/// Encoder output [B*S, d].
inline Tensor encode(const Model& model, const Batch& batch, Rng* dropout_rng = nullptr,
                     std::vector<AttentionRecord>* capture = nullptr, std::size_t sentence_offset = 0) {
  const auto& cfg = model.config();
  detail::ForwardContext ctx{cfg, dropout_rng, capture, sentence_offset};
  BatchLayout layout{batch.size, batch.source_len, batch.source_len, batch.source_lengths, batch.source_lengths, false};
  Tensor x = ctx.drop(detail::embed(model.source_embedding(), batch.source_ids, batch.size, batch.source_len));
  for (std::size_t l = 0; l < cfg.layers; ++l) {
    const auto& layer = model.encoder()[l];
    x = ctx.residual(x, layer.ln_self, [&](const Tensor& h) {
      return ctx.attend(h, h, layer.self, AttentionType::encoder_self, l, layout);
    });
    x = ctx.residual(x, layer.ln_ffn, [&](const Tensor& h) { return ctx.ffn(h, layer.ffn); });
  }
  return cfg.post_norm ? x : ctx.norm(x, model.encoder_norm());
}

/// Decoder logits [B*T, target_vocab] given encoder output.
inline Tensor decode(const Model& model, const Batch& batch, const Tensor& memory, Rng* dropout_rng = nullptr,
                     std::vector<AttentionRecord>* capture = nullptr, std::size_t sentence_offset = 0) {
  const auto& cfg = model.config();
  detail::ForwardContext ctx{cfg, dropout_rng, capture, sentence_offset};
  BatchLayout self{batch.size, batch.target_len, batch.target_len, batch.target_lengths, batch.target_lengths, true};
  BatchLayout cross{batch.size, batch.target_len, batch.source_len, batch.target_lengths, batch.source_lengths, false};
  Tensor y = ctx.drop(detail::embed(model.target_embedding(), batch.decoder_input, batch.size, batch.target_len));
  for (std::size_t l = 0; l < cfg.layers; ++l) {
    const auto& layer = model.decoder()[l];
    y = ctx.residual(y, layer.ln_self, [&](const Tensor& h) {
      return ctx.attend(h, h, layer.self, AttentionType::decoder_self, l, self);
    });
    y = ctx.residual(y, layer.ln_cross, [&](const Tensor& h) {
      return ctx.attend(h, memory, layer.cross, AttentionType::cross, l, cross);
    });
    y = ctx.residual(y, layer.ln_ffn, [&](const Tensor& h) { return ctx.ffn(h, layer.ffn); });
  }
  if (!cfg.post_norm) y = ctx.norm(y, model.decoder_norm());
  return add(matmul(y, model.output_weight()), model.output_bias());
}

/// Teacher-forced logits [B*T, target_vocab]. A null rng means evaluation mode.
inline Tensor forward(const Model& model, const Batch& batch, Rng* dropout_rng = nullptr,
                      std::vector<AttentionRecord>* capture = nullptr, std::size_t sentence_offset = 0) {
  Tensor memory = encode(model, batch, dropout_rng, capture, sentence_offset);
  return decode(model, batch, memory, dropout_rng, capture, sentence_offset);
}

// ---------------------------------------------------------------------------
// Objective

/// Label-smoothed cross entropy, mean over rows whose target is not -1. The
/// smoothed target puts (1 - eps) on the label and eps / V on every class.
inline Tensor cross_entropy(const Tensor& logits, std::span<const int> targets, double smoothing) {
  if (logits.rank() != 2 || logits.dim(0) != targets.size())
    throw ShapeError("cross_entropy: logits " + to_string(logits.shape()) + " for " + std::to_string(targets.size()) +
                     " targets");
  const std::size_t n = logits.dim(0), V = logits.dim(1);
  auto probs = std::make_shared<std::vector<double>>(n * V, 0.0);
  auto tgt = std::make_shared<std::vector<int>>(targets.begin(), targets.end());
  auto x = logits.data();
  double total = 0.0;
  std::size_t count = 0;
  for (std::size_t i = 0; i < n; ++i) {
    if ((*tgt)[i] < 0) continue;
    if (static_cast<std::size_t>((*tgt)[i]) >= V) throw std::out_of_range("target id outside vocabulary");
    ++count;
    const double* row = x.data() + i * V;
    const double m = *std::max_element(row, row + V);
    double z = 0.0;
    for (std::size_t c = 0; c < V; ++c) z += std::exp(row[c] - m);
    const double lse = m + std::log(z);
    double loss = 0.0;
    for (std::size_t c = 0; c < V; ++c) {
      const double logp = row[c] - lse;
      (*probs)[i * V + c] = std::exp(logp);
      const double q = smoothing / static_cast<double>(V) + (static_cast<int>(c) == (*tgt)[i] ? 1.0 - smoothing : 0.0);
      loss -= q * logp;
    }
    total += loss;
  }
  const double denom = count ? static_cast<double>(count) : 1.0;
  return Tensor::make_result({1}, {total / denom}, "cross_entropy", {&logits},
                             [probs, tgt, n, V, smoothing, denom](detail::Node& self) {
                               auto& g = self.inputs[0]->ensure_grad();
                               const double up = self.grad[0] / denom;
                               for (std::size_t i = 0; i < n; ++i) {
                                 if ((*tgt)[i] < 0) continue;
                                 for (std::size_t c = 0; c < V; ++c) {
                                   const double q = smoothing / static_cast<double>(V) +
                                                    (static_cast<int>(c) == (*tgt)[i] ? 1.0 - smoothing : 0.0);
                                   g[i * V + c] += up * ((*probs)[i * V + c] - q);
                                 }
                               }
                             });
}

struct TokenCount {
  std::size_t correct = 0, total = 0;
  double accuracy() const { return total ? static_cast<double>(correct) / static_cast<double>(total) : 0.0; }
};

inline TokenCount token_accuracy(const Tensor& logits, std::span<const int> targets) {
  TokenCount c;
  const std::size_t V = logits.dim(1);
  auto x = logits.data();
  for (std::size_t i = 0; i < targets.size(); ++i) {
    if (targets[i] < 0) continue;
    const double* row = x.data() + i * V;
    const auto best = static_cast<int>(std::max_element(row, row + V) - row);
    ++c.total;
    if (best == targets[i]) ++c.correct;
  }
  return c;
}

/// Inverse square-root schedule with linear warmup: d^-0.5 * min(step^-0.5, step * warmup^-1.5).
inline double lr_at(std::size_t step, std::size_t warmup, std::size_t model_dim) {
  if (step == 0) throw std::invalid_argument("learning-rate schedule starts at step 1");
  if (warmup == 0 || model_dim == 0) throw std::invalid_argument("warmup and model_dim must be positive");
  const double s = static_cast<double>(step), w = static_cast<double>(warmup);
  return std::pow(static_cast<double>(model_dim), -0.5) * std::min(std::pow(s, -0.5), s * std::pow(w, -1.5));
}

struct AdamConfig {
  double beta1 = 0.9;
  double beta2 = 0.98;
  double epsilon = 1e-9;
};

struct AdamState {
  std::size_t t = 0;
  std::vector<std::vector<double>> m, v;
};

inline void adam_step(const std::vector<std::pair<std::string, Tensor>>& params, AdamState& state,
                      const AdamConfig& cfg, double lr) {
  if (state.m.empty()) {
    for (const auto& [name, p] : params) {
      state.m.emplace_back(p.size(), 0.0);
      state.v.emplace_back(p.size(), 0.0);
    }
  }
  ++state.t;
  const double c1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(state.t));
  const double c2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(state.t));
  for (std::size_t k = 0; k < params.size(); ++k) {
    Tensor p = params[k].second;
    if (!p.has_grad()) continue;
    auto w = p.mutable_data();
    auto g = p.grad();
    auto& m = state.m[k];
    auto& v = state.v[k];
    for (std::size_t i = 0; i < w.size(); ++i) {
      m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g[i];
      v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g[i] * g[i];
      w[i] -= lr * (m[i] / c1) / (std::sqrt(v[i] / c2) + cfg.epsilon);
    }
  }
}

// ---------------------------------------------------------------------------
// Training

struct TrainConfig {
  ModelConfig model;
  std::size_t warmup = 400;
  std::size_t batch_size = 64;
  double lr_scale = 1.0;
  AdamConfig adam;
  std::size_t log_every = 10;
  std::size_t checkpoint_every = 0;  // 0: no intermediate checkpoints
  std::size_t probe_size = 8;        // sentences captured with each checkpoint
  std::size_t divergence_window = 500;

  void validate() const {
    model.validate();
    if (warmup == 0 || batch_size == 0 || log_every == 0 || divergence_window == 0)
      throw std::invalid_argument("warmup, batch_size, log_every and divergence_window must be positive");
    if (!(lr_scale > 0)) throw std::invalid_argument("lr_scale must be positive");
  }
};

struct TelemetryRow {
  std::size_t step = 0;
  double loss = 0, lr = 0, accuracy = 0;
  bool divergence_flag = false;
};

struct TrainState {
  std::size_t step = 0;
  AdamState adam;
  double lr = 0.0;
  std::vector<double> loss_history;
  bool nan_seen = false;
  bool diverged = false;
};

struct Checkpoint {
  std::size_t step = 0;
  std::vector<std::pair<std::string, Tensor>> parameters;  // detached copies
  std::vector<AttentionRecord> attention;                  // evaluation-mode capture on the probe set
};

/// NaN loss, or a loss whose trailing moving average is no lower than its
/// leading one. The window shrinks to half the history for short runs.
inline bool loss_diverged(std::span<const double> history, std::size_t window, bool nan_seen) {
  if (nan_seen) return true;
  const std::size_t w = std::min(window, history.size() / 2);
  if (w == 0) return false;
  double first = 0.0, last = 0.0;
  for (std::size_t i = 0; i < w; ++i) {
    first += history[i];
    last += history[history.size() - w + i];
  }
  return last >= first;
}

inline std::vector<AttentionRecord> capture_attention(const Model& model, std::span<const Example> data,
                                                      std::size_t batch_size = 64) {
  std::vector<AttentionRecord> records;
  for (std::size_t start = 0; start < data.size(); start += batch_size) {
    auto chunk = data.subspan(start, std::min(batch_size, data.size() - start));
    forward(model, make_batch(chunk, model.config()), nullptr, &records, start);
  }
  return records;
}

struct Evaluation {
  double loss = 0.0;
  TokenCount tokens;
};

/// Evaluation-mode teacher-forced loss and token accuracy.
inline Evaluation evaluate(const Model& model, std::span<const Example> data, std::size_t batch_size = 64) {
  Evaluation ev;
  double weighted = 0.0;
  for (std::size_t start = 0; start < data.size(); start += batch_size) {
    auto chunk = data.subspan(start, std::min(batch_size, data.size() - start));
    Batch b = make_batch(chunk, model.config());
    Tensor logits = forward(model, b);
    TokenCount c = token_accuracy(logits, b.decoder_target);
    weighted += cross_entropy(logits, b.decoder_target, model.config().label_smoothing).item() *
                static_cast<double>(c.total);
    ev.tokens.correct += c.correct;
    ev.tokens.total += c.total;
  }
  ev.loss = ev.tokens.total ? weighted / static_cast<double>(ev.tokens.total) : 0.0;
  return ev;
}

struct TrainResult {
  Model model;
  TrainState state;
  std::vector<TelemetryRow> telemetry;
  std::vector<Checkpoint> checkpoints;
};

namespace detail {
inline Checkpoint snapshot(const Model& model, std::size_t step, std::span<const Example> probe) {
  Checkpoint c;
  c.step = step;
  for (const auto& [name, t] : model.parameters()) c.parameters.emplace_back(name, t.detach());
  if (!probe.empty()) c.attention = capture_attention(model, probe);
  return c;
}
}  // namespace detail

/// Trains a freshly initialized model for `steps` Adam updates on batches drawn
/// from `task`. Streams: parameters (seed, 1), data (seed, 2), dropout
/// (seed, 3), probe set (seed, 4). Training stops early on a NaN loss.
inline TrainResult train(const TrainConfig& config, const ToyTask& task, std::size_t steps,
                         const std::function<void(const TelemetryRow&)>& on_log = {}) {
  config.validate();
  TrainResult result{Model(config.model), {}, {}, {}};
  Model& model = result.model;
  TrainState& state = result.state;
  const std::uint64_t seed = config.model.seed;
  Rng data_rng = make_rng(seed, 2);
  Rng dropout_rng = make_rng(seed, 3);
  Dataset probe;
  if (config.checkpoint_every > 0 && config.probe_size > 0) {
    Rng probe_rng = make_rng(seed, 4);
    probe = generate(task, probe_rng, config.probe_size);
  }

  for (std::size_t s = 1; s <= steps; ++s) {
    Dataset data = generate(task, data_rng, config.batch_size);
    Batch batch = make_batch(data, config.model);
    model.zero_grad();
    Tensor logits = forward(model, batch, &dropout_rng);
    Tensor loss = cross_entropy(logits, batch.decoder_target, config.model.label_smoothing);
    const double value = loss.item();
    state.step = s;
    state.lr = config.lr_scale * lr_at(s, config.warmup, config.model.model_dim);
    state.loss_history.push_back(value);
    if (!std::isfinite(value)) state.nan_seen = true;
    state.diverged = loss_diverged(state.loss_history, config.divergence_window, state.nan_seen);
    const bool log = s % config.log_every == 0 || s == steps || state.nan_seen;
    if (log) {
      TelemetryRow row{s, value, state.lr, token_accuracy(logits, batch.decoder_target).accuracy(), state.diverged};
      result.telemetry.push_back(row);
      if (on_log) on_log(row);
    }
    if (state.nan_seen) break;
    loss.backward();
    adam_step(model.parameters(), state.adam, config.adam, state.lr);
    if (config.checkpoint_every > 0 && s % config.checkpoint_every == 0)
      result.checkpoints.push_back(detail::snapshot(model, s, probe));
  }
  return result;
}

// ---------------------------------------------------------------------------
// Decoding

/// Greedy decoding until EOS or 2 * |source| + 5 tokens. Returns task tokens
/// (without EOS). The decoder is re-run on the whole prefix at every step.
inline std::vector<int> greedy_decode(const Model& model, const std::vector<int>& source) {
  if (source.empty()) return {};
  const std::size_t cap = 2 * source.size() + 5;
  Example ex{source, {}, std::nullopt};
  Batch enc = make_batch(std::span<const Example>(&ex, 1), model.config());
  Tensor memory = encode(model, enc);
  std::vector<int> out;
  const std::size_t V = model.config().target_vocab;
  while (out.size() < cap) {
    Example prefix{source, out, std::nullopt};
    Batch b = make_batch(std::span<const Example>(&prefix, 1), model.config());
    Tensor logits = decode(model, b, memory);
    const double* row = logits.data().data() + (b.target_len - 1) * V;
    // The pad symbol is never a valid prediction.
    const auto best = static_cast<int>(std::max_element(row + 1, row + V) - row);
    if (best == kEos) break;
    out.push_back(best - kTokenOffset);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Checkpoint file: {"format": "rela-checkpoint", "version": 1, "step": n,
// "config": {...}, "parameters": {name: {"shape": [...], "data": [...]}}}

inline nlohmann::json checkpoint_json(const ModelConfig& config, std::size_t step,
                                      const std::vector<std::pair<std::string, Tensor>>& params) {
  nlohmann::json p = nlohmann::json::object();
  for (const auto& [name, t] : params) p[name] = to_json(t);
  return {{"format", "rela-checkpoint"}, {"version", 1}, {"step", step}, {"config", to_json(config)}, {"parameters", p}};
}

inline nlohmann::json checkpoint_json(const Model& model, std::size_t step) {
  return checkpoint_json(model.config(), step, model.parameters());
}

/// Rebuilds a model from a checkpoint; throws if any parameter is missing or
/// its shape disagrees with the configuration.
inline Model model_from_checkpoint(const nlohmann::json& j) {
  if (j.value("format", std::string()) != "rela-checkpoint") throw std::invalid_argument("not a rela checkpoint");
  Model model(model_config_from_json(j.at("config")));
  const auto& params = j.at("parameters");
  for (const auto& [name, t] : model.parameters()) {
    if (!params.contains(name)) throw std::invalid_argument("checkpoint lacks parameter " + name);
    Tensor saved = tensor_from_json(params.at(name));
    if (saved.shape() != t.shape())
      throw std::invalid_argument("parameter " + name + " has shape " + to_string(saved.shape()) + ", config expects " +
                                  to_string(t.shape()));
    Tensor dst = t;
    std::copy(saved.data().begin(), saved.data().end(), dst.mutable_data().begin());
  }
  if (params.size() != model.parameters().size())
    throw std::invalid_argument("checkpoint holds parameters the configuration does not define");
  return model;
}

}  // namespace rela
