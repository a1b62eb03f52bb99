#pragma once

// Scaled dot-product attention with a pluggable row activation, multi-head
// wrapping, and the post-attention normalization used by rectified linear
// attention (ReLU scores, normalization over the concatenated heads).
//
// Two routes compute the same thing:
//   att_head / mhatt       compose tensor primitives for one (X, Y) pair;
//   mhatt_batched          runs a fused kernel over a padded batch and is
//                          what the transformer uses.
// The tests hold them to each other.

#include <Eigen/Core>

#include <cmath>
#include <cstdint>
#include <memory>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "json.hpp"
#include "rela/activations.hpp"
#include "rela/normalization.hpp"
#include "rela/rng.hpp"
#include "rela/tensor.hpp"

namespace rela {

enum class AttentionType { encoder_self, decoder_self, cross };

inline constexpr AttentionType kAttentionTypes[] = {AttentionType::encoder_self, AttentionType::decoder_self,
                                                   AttentionType::cross};

inline std::string_view to_string(AttentionType t) {
  switch (t) {
    case AttentionType::encoder_self: return "encoder_self";
    case AttentionType::decoder_self: return "decoder_self";
    case AttentionType::cross: return "cross";
  }
  return "?";
}
inline AttentionType parse_attention_type(std::string_view s) {
  for (auto t : kAttentionTypes)
    if (to_string(t) == s) return t;
  throw std::invalid_argument("unknown attention type '" + std::string(s) + "'");
}

struct AttentionConfig {
  std::size_t model_dim = 64;
  std::size_t heads = 4;
  std::size_t head_dim = 16;
  ActivationKind activation;
  NormConfig norm;  // applied to the concatenated heads; width = model_dim
  double dropout_rate = 0.0;
  bool capture = false;

  void validate() const {
    if (heads == 0 || head_dim == 0) throw std::invalid_argument("heads and head_dim must be positive");
    if (model_dim != heads * head_dim)
      throw std::invalid_argument("model_dim " + std::to_string(model_dim) + " != heads * head_dim (" +
                                  std::to_string(heads) + " * " + std::to_string(head_dim) + ")");
    activation.validate();
    norm.validate();
    if (activation.is_distribution() && norm.kind != NormKind::none)
      throw std::invalid_argument(std::string(to_string(activation.tag)) +
                                  " attention takes no post-attention normalization");
    if (norm.kind != NormKind::none && norm.width != model_dim)
      throw std::invalid_argument("attention norm width must equal model_dim");
    if (!(dropout_rate >= 0.0 && dropout_rate < 1.0)) throw std::invalid_argument("dropout rate must be in [0, 1)");
  }
};

struct AttentionParams {
  Tensor wq, wk, wv;  // [d, H*d_h]; head h owns columns [h*d_h, (h+1)*d_h)
  Tensor wo;          // [H*d_h, d]
  NormParams norm;
};

/// Uniform xavier init for the projections, init_gain() for the norm.
inline AttentionParams init_attention(const AttentionConfig& config, Rng& rng) {
  config.validate();
  const std::size_t d = config.model_dim, hd = config.heads * config.head_dim;
  auto xavier = [&rng](std::size_t fan_in, std::size_t fan_out) {
    const double bound = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
    Tensor w = Tensor::zeros({fan_in, fan_out}, true);
    for (auto& v : w.mutable_data()) v = uniform(rng, -bound, bound);
    return w;
  };
  AttentionParams p;
  p.wq = xavier(d, hd);
  p.wk = xavier(d, hd);
  p.wv = xavier(d, hd);
  p.wo = xavier(hd, d);
  p.norm = init_gain(config.norm, rng);
  return p;
}

/// Per-query, per-key block flags (nonzero = hidden) for an n x m score matrix.
inline std::vector<std::uint8_t> make_mask(std::size_t n, std::size_t m, std::size_t valid_keys, bool causal) {
  std::vector<std::uint8_t> mask(n * m, 0);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < m; ++j) mask[i * m + j] = (j >= valid_keys || (causal && j > i)) ? 1 : 0;
  return mask;
}

// ---------------------------------------------------------------------------
// Captured attention

struct AttentionRecord {
  std::size_t layer = 0;
  AttentionType type = AttentionType::cross;
  std::size_t sentence = 0;
  ActivationKind activation;
  std::size_t heads = 0, rows = 0, cols = 0;
  std::vector<double> alpha;  // [heads][rows][cols]
  std::vector<std::uint8_t> query_valid, key_valid;
  bool causal = false;

  double weight(std::size_t h, std::size_t i, std::size_t j) const { return alpha[(h * rows + i) * cols + j]; }
  std::span<const double> row(std::size_t h, std::size_t i) const {
    return {alpha.data() + (h * rows + i) * cols, cols};
  }
  bool valid_row(std::size_t i) const { return query_valid.empty() || query_valid[i]; }
  bool valid_cell(std::size_t i, std::size_t j) const {
    return valid_row(i) && (key_valid.empty() || key_valid[j]) && !(causal && j > i);
  }
};

inline nlohmann::json to_json(const AttentionRecord& r) {
  nlohmann::json heads = nlohmann::json::array();
  for (std::size_t h = 0; h < r.heads; ++h) {
    nlohmann::json rows = nlohmann::json::array();
    for (std::size_t i = 0; i < r.rows; ++i) {
      auto row = r.row(h, i);
      rows.push_back(std::vector<double>(row.begin(), row.end()));
    }
    heads.push_back({{"head", h}, {"rows", std::move(rows)}});
  }
  return {{"layer", r.layer},
          {"type", to_string(r.type)},
          {"sentence", r.sentence},
          {"activation", to_string(r.activation.tag)},
          {"causal", r.causal},
          {"query_mask", r.query_valid},
          {"key_mask", r.key_valid},
          {"heads", std::move(heads)}};
}

inline AttentionRecord record_from_json(const nlohmann::json& j) {
  AttentionRecord r;
  r.layer = j.at("layer").get<std::size_t>();
  r.type = parse_attention_type(j.at("type").get<std::string>());
  r.sentence = j.value("sentence", std::size_t{0});
  r.activation.tag = parse_activation(j.at("activation").get<std::string>());
  r.causal = j.value("causal", false);
  r.query_valid = j.at("query_mask").get<std::vector<std::uint8_t>>();
  r.key_valid = j.at("key_mask").get<std::vector<std::uint8_t>>();
  const auto& heads = j.at("heads");
  r.heads = heads.size();
  for (const auto& h : heads) {
    const auto& rows = h.at("rows");
    r.rows = rows.size();
    for (const auto& row : rows) {
      r.cols = row.size();
      for (double v : row) r.alpha.push_back(v);
    }
  }
  if (r.alpha.size() != r.heads * r.rows * r.cols) throw std::invalid_argument("ragged attention record");
  if (!r.query_valid.empty() && r.query_valid.size() != r.rows) throw std::invalid_argument("query mask length");
  if (!r.key_valid.empty() && r.key_valid.size() != r.cols) throw std::invalid_argument("key mask length");
  return r;
}

// ---------------------------------------------------------------------------
// Reference route: one (X, Y) pair built from tensor primitives.

/// (X Wq)(Y Wk)^T / sqrt(d_h) with per-head projections wq_h, wk_h of shape [d, d_h].
inline Tensor scaled_scores(const Tensor& x, const Tensor& y, const Tensor& wq_h, const Tensor& wk_h) {
  if (x.rank() != 2 || y.rank() != 2 || x.dim(1) != wq_h.dim(0) || y.dim(1) != wk_h.dim(0) ||
      wq_h.dim(1) != wk_h.dim(1))
    throw ShapeError("scaled_scores: X " + to_string(x.shape()) + ", Y " + to_string(y.shape()) + ", Wq " +
                     to_string(wq_h.shape()) + ", Wk " + to_string(wk_h.shape()));
  const double inv = 1.0 / std::sqrt(static_cast<double>(wq_h.dim(1)));
  return scale(matmul(matmul(x, wq_h), transpose(matmul(y, wk_h))), inv);
}

/// Draws a keep mask scaled by 1/(1-rate) as a constant tensor.
inline Tensor dropout_mask(const Shape& shape, double rate, Rng& rng) {
  std::vector<double> keep(numel(shape));
  const double s = 1.0 / (1.0 - rate);
  for (auto& k : keep) k = uniform01(rng) < rate ? 0.0 : s;
  return Tensor(shape, std::move(keep));
}

inline Tensor dropout(const Tensor& x, double rate, Rng* rng) {
  if (rng == nullptr || rate <= 0.0) return x;
  return mul(x, dropout_mask(x.shape(), rate, *rng));
}

struct HeadOutput {
  Tensor output;  // [n, d_h], alpha V (pre-normalization)
  Tensor alpha;   // [n, m], post-activation, pre-dropout
};

inline HeadOutput att_head(const Tensor& x, const Tensor& y, const AttentionParams& p, std::size_t head,
                           const AttentionConfig& config, std::span<const std::uint8_t> masked = {},
                           Rng* dropout_rng = nullptr) {
  if (head >= config.heads) throw std::out_of_range("head index " + std::to_string(head));
  const std::size_t dh = config.head_dim, off = head * dh;
  Tensor wq = narrow(p.wq, 1, off, dh), wk = narrow(p.wk, 1, off, dh), wv = narrow(p.wv, 1, off, dh);
  Tensor alpha = activate(config.activation, scaled_scores(x, y, wq, wk), masked);
  Tensor out = matmul(dropout(alpha, config.dropout_rate, dropout_rng), matmul(y, wv));
  return {out, alpha};
}

/// Multi-head attention of queries X [n, d] over context Y [m, d]. When
/// `capture` is given, the per-head alpha is recorded into it.
inline Tensor mhatt(const Tensor& x, const Tensor& y, const AttentionParams& p, const AttentionConfig& config,
                    std::span<const std::uint8_t> masked = {}, Rng* dropout_rng = nullptr,
                    AttentionRecord* capture = nullptr) {
  config.validate();
  std::vector<Tensor> heads;
  if (capture) {
    capture->activation = config.activation;
    capture->heads = config.heads;
    capture->rows = x.dim(0);
    capture->cols = y.dim(0);
    capture->alpha.clear();
    capture->query_valid.assign(x.dim(0), 1);
    capture->key_valid.assign(y.dim(0), 1);
  }
  for (std::size_t h = 0; h < config.heads; ++h) {
    auto [out, alpha] = att_head(x, y, p, h, config, masked, dropout_rng);
    heads.push_back(out);
    if (capture) capture->alpha.insert(capture->alpha.end(), alpha.data().begin(), alpha.data().end());
  }
  Tensor joined = config.heads == 1 ? heads[0] : concat(heads, 1);
  return matmul(apply_norm(config.norm, p.norm, joined), p.wo);
}

// ---------------------------------------------------------------------------
// Batched route

/// Padded batch geometry: queries [batch * query_len], keys [batch * key_len].
struct BatchLayout {
  std::size_t batch = 1, query_len = 0, key_len = 0;
  std::vector<std::size_t> query_lengths, key_lengths;
  bool causal = false;

  bool blocked(std::size_t b, std::size_t i, std::size_t j) const {
    return j >= key_lengths[b] || (causal && j > i);
  }
};

struct CaptureSink {
  std::vector<AttentionRecord>* records = nullptr;
  std::size_t layer = 0;
  AttentionType type = AttentionType::cross;
  std::size_t sentence_offset = 0;
};

namespace detail {

using StridedMap = Eigen::Map<RowMatrix, 0, Eigen::OuterStride<>>;
using ConstStridedMap = Eigen::Map<const RowMatrix, 0, Eigen::OuterStride<>>;

struct CoreBuffers {
  std::vector<double> filled;  // masked scores, [B][H][n][m]
  std::vector<double> alpha;   // post-activation
  std::vector<double> keep;    // dropout factors, empty when inactive
};

}  // namespace detail

/// Fused multi-head attention core. Q is [B*n, H*d_h], K and V are
/// [B*m, H*d_h]; returns the concatenated head outputs alpha V as [B*n, H*d_h].
inline Tensor attention_core(const Tensor& q, const Tensor& k, const Tensor& v, std::size_t heads,
                             std::size_t head_dim, const ActivationKind& kind, const BatchLayout& layout,
                             double dropout_rate = 0.0, Rng* dropout_rng = nullptr, const CaptureSink& sink = {}) {
  using detail::ConstStridedMap;
  using detail::StridedMap;
  const std::size_t B = layout.batch, n = layout.query_len, m = layout.key_len, dh = head_dim, hd = heads * dh;
  if (q.rank() != 2 || q.dim(0) != B * n || q.dim(1) != hd || k.rank() != 2 || k.dim(0) != B * m ||
      k.dim(1) != hd || v.shape() != k.shape())
    throw ShapeError("attention_core: Q " + to_string(q.shape()) + ", K " + to_string(k.shape()) + ", V " +
                     to_string(v.shape()) + " do not fit layout");
  if (layout.key_lengths.size() != B || layout.query_lengths.size() != B)
    throw ShapeError("attention_core: layout lengths do not match batch");
  const double inv = 1.0 / std::sqrt(static_cast<double>(dh));
  const bool drop = dropout_rng != nullptr && dropout_rate > 0.0;
  auto buf = std::make_shared<detail::CoreBuffers>();
  buf->filled.resize(B * heads * n * m);
  buf->alpha.resize(B * heads * n * m);
  if (drop) buf->keep.resize(B * heads * n * m);

  std::vector<double> out(B * n * hd, 0.0);
  detail::RowMatrix weights(n, m);
  for (std::size_t b = 0; b < B; ++b) {
    for (std::size_t h = 0; h < heads; ++h) {
      ConstStridedMap qb(q.data().data() + b * n * hd + h * dh, n, dh, Eigen::OuterStride<>(hd));
      ConstStridedMap kb(k.data().data() + b * m * hd + h * dh, m, dh, Eigen::OuterStride<>(hd));
      ConstStridedMap vb(v.data().data() + b * m * hd + h * dh, m, dh, Eigen::OuterStride<>(hd));
      const std::size_t base = (b * heads + h) * n * m;
      detail::MatrixMap scores(buf->filled.data() + base, n, m);
      scores.noalias() = (qb * kb.transpose()) * inv;
      for (std::size_t i = 0; i < n; ++i) {
        std::size_t open = m;
        for (std::size_t j = 0; j < m; ++j)
          if (layout.blocked(b, i, j)) scores(i, j) = kMaskedScore, --open;
        if (open == 0 && kind.is_distribution())
          throw std::invalid_argument(std::string(to_string(kind.tag)) + ": query " + std::to_string(i) +
                                      " of batch item " + std::to_string(b) + " has no visible key");
        std::span<double> a(buf->alpha.data() + base + i * m, m);
        rows::forward(kind, std::span<const double>(buf->filled.data() + base + i * m, m), a);
        for (std::size_t j = 0; j < m; ++j)
          if (layout.blocked(b, i, j)) a[j] = 0.0;
      }
      detail::ConstMatrixMap alpha(buf->alpha.data() + base, n, m);
      StridedMap ob(out.data() + b * n * hd + h * dh, n, dh, Eigen::OuterStride<>(hd));
      if (drop) {
        for (std::size_t c = 0; c < n * m; ++c)
          buf->keep[base + c] = uniform01(*dropout_rng) < dropout_rate ? 0.0 : 1.0 / (1.0 - dropout_rate);
        weights = alpha.cwiseProduct(detail::ConstMatrixMap(buf->keep.data() + base, n, m));
        ob.noalias() = weights * vb;
      } else {
        ob.noalias() = alpha * vb;
      }
    }
    if (sink.records) {
      AttentionRecord r;
      r.layer = sink.layer;
      r.type = sink.type;
      r.sentence = sink.sentence_offset + b;
      r.activation = kind;
      r.heads = heads;
      r.rows = layout.query_lengths[b];
      r.cols = layout.key_lengths[b];
      r.causal = layout.causal;
      r.query_valid.assign(r.rows, 1);
      r.key_valid.assign(r.cols, 1);
      r.alpha.reserve(heads * r.rows * r.cols);
      for (std::size_t h = 0; h < heads; ++h)
        for (std::size_t i = 0; i < r.rows; ++i)
          for (std::size_t j = 0; j < r.cols; ++j) r.alpha.push_back(buf->alpha[((b * heads + h) * n + i) * m + j]);
      sink.records->push_back(std::move(r));
    }
  }

  return Tensor::make_result(
      {B * n, hd}, std::move(out), "attention_core", {&q, &k, &v},
      [buf, kind, layout, B, n, m, heads, dh, hd, inv, drop](detail::Node& self) {
        detail::Node& nq = *self.inputs[0];
        detail::Node& nk = *self.inputs[1];
        detail::Node& nv = *self.inputs[2];
        auto& gq = nq.ensure_grad();
        auto& gk = nk.ensure_grad();
        auto& gv = nv.ensure_grad();
        detail::RowMatrix d_weights(n, m), d_scores(n, m), weights(n, m);
        std::vector<double> row(m);
        for (std::size_t b = 0; b < B; ++b) {
          for (std::size_t h = 0; h < heads; ++h) {
            const std::size_t base = (b * heads + h) * n * m;
            const std::size_t qoff = b * n * hd + h * dh, koff = b * m * hd + h * dh;
            detail::ConstStridedMap dout(self.grad.data() + qoff, n, dh, Eigen::OuterStride<>(hd));
            detail::ConstStridedMap qb(nq.data.data() + qoff, n, dh, Eigen::OuterStride<>(hd));
            detail::ConstStridedMap kb(nk.data.data() + koff, m, dh, Eigen::OuterStride<>(hd));
            detail::ConstStridedMap vb(nv.data.data() + koff, m, dh, Eigen::OuterStride<>(hd));
            detail::ConstMatrixMap alpha(buf->alpha.data() + base, n, m);
            d_weights.noalias() = dout * vb.transpose();
            detail::StridedMap dv(gv.data() + koff, m, dh, Eigen::OuterStride<>(hd));
            if (drop) {
              detail::ConstMatrixMap keep(buf->keep.data() + base, n, m);
              weights = alpha.cwiseProduct(keep);
              dv.noalias() += weights.transpose() * dout;
              d_weights = d_weights.cwiseProduct(keep);
            } else {
              dv.noalias() += alpha.transpose() * dout;
            }
            for (std::size_t i = 0; i < n; ++i) {
              rows::backward(kind, std::span<const double>(buf->filled.data() + base + i * m, m),
                             std::span<const double>(buf->alpha.data() + base + i * m, m),
                             std::span<const double>(d_weights.data() + i * m, m), row);
              for (std::size_t j = 0; j < m; ++j) d_scores(i, j) = layout.blocked(b, i, j) ? 0.0 : row[j] * inv;
            }
            detail::StridedMap(gq.data() + qoff, n, dh, Eigen::OuterStride<>(hd)).noalias() += d_scores * kb;
            detail::StridedMap(gk.data() + koff, m, dh, Eigen::OuterStride<>(hd)).noalias() +=
                d_scores.transpose() * qb;
          }
        }
      });
}

/// Multi-head attention over a padded batch: X is [B*n, d], Y is [B*m, d].
inline Tensor mhatt_batched(const Tensor& x, const Tensor& y, const AttentionParams& p,
                            const AttentionConfig& config, const BatchLayout& layout, Rng* dropout_rng = nullptr,
                            const CaptureSink& sink = {}) {
  Tensor q = matmul(x, p.wq), k = matmul(y, p.wk), v = matmul(y, p.wv);
  Tensor heads = attention_core(q, k, v, config.heads, config.head_dim, config.activation, layout,
                                config.dropout_rate, dropout_rng, sink);
  return matmul(apply_norm(config.norm, p.norm, heads), p.wo);
}

}  // namespace rela
