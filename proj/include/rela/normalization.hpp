#pragma once

// Post-attention stabilizers: RMSNorm, LayerNorm and their sigmoid-gated
// forms, plus gain initialization.

#include <algorithm>
#include <cmath>
#include <memory>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "rela/rng.hpp"
#include "rela/tensor.hpp"

namespace rela {

enum class NormKind { none, rmsnorm, layernorm, gated_rmsnorm, gated_layernorm };
enum class GainInit { ones, xavier_uniform_gain };
// Fan used for the xavier gain bound sqrt(3 / fan).
enum class XavierFan { head_dim, width };

inline std::string_view to_string(NormKind k) {
  switch (k) {
    case NormKind::none: return "none";
    case NormKind::rmsnorm: return "rmsnorm";
    case NormKind::layernorm: return "layernorm";
    case NormKind::gated_rmsnorm: return "gated_rmsnorm";
    case NormKind::gated_layernorm: return "gated_layernorm";
  }
  return "?";
}
inline std::string_view to_string(GainInit g) { return g == GainInit::ones ? "ones" : "xavier_uniform_gain"; }
inline std::string_view to_string(XavierFan f) { return f == XavierFan::head_dim ? "head_dim" : "width"; }

inline NormKind parse_norm(std::string_view s) {
  for (auto k : {NormKind::none, NormKind::rmsnorm, NormKind::layernorm, NormKind::gated_rmsnorm,
                 NormKind::gated_layernorm})
    if (to_string(k) == s) return k;
  throw std::invalid_argument("unknown norm kind '" + std::string(s) + "'");
}
inline GainInit parse_gain_init(std::string_view s) {
  if (s == "ones") return GainInit::ones;
  if (s == "xavier_uniform_gain" || s == "xavier") return GainInit::xavier_uniform_gain;
  throw std::invalid_argument("unknown gain init '" + std::string(s) + "'");
}
inline XavierFan parse_xavier_fan(std::string_view s) {
  if (s == "head_dim") return XavierFan::head_dim;
  if (s == "width") return XavierFan::width;
  throw std::invalid_argument("unknown xavier fan '" + std::string(s) + "'");
}

inline bool is_gated(NormKind k) { return k == NormKind::gated_rmsnorm || k == NormKind::gated_layernorm; }
inline bool is_centered(NormKind k) { return k == NormKind::layernorm || k == NormKind::gated_layernorm; }

struct NormConfig {
  NormKind kind = NormKind::none;
  std::size_t width = 0;     // normalized (trailing) axis
  std::size_t head_dim = 0;  // d_h, only used for the xavier bound
  double epsilon = 1e-8;
  GainInit init = GainInit::ones;
  XavierFan xavier_fan = XavierFan::head_dim;

  std::size_t fan() const { return xavier_fan == XavierFan::head_dim ? head_dim : width; }

  void validate() const {
    if (!(epsilon > 0.0)) throw std::invalid_argument("norm epsilon must be positive");
    if (kind != NormKind::none && width == 0) throw std::invalid_argument("norm width must be positive");
    if (init == GainInit::xavier_uniform_gain) {
      if (kind == NormKind::none || is_centered(kind))
        throw std::invalid_argument("xavier_uniform_gain applies only to rmsnorm and gated_rmsnorm");
      if (fan() == 0) throw std::invalid_argument("xavier_uniform_gain needs a positive fan");
    }
  }
};

struct NormParams {
  Tensor gain;  // [width]
  Tensor gate;  // [width], gated kinds only
  Tensor bias;  // [width], centered kinds only
};

namespace detail {

// Fused row normalization over the trailing axis:
//   c = z - mean(z) (centered) or z;  n = c / sqrt(mean(c^2) + eps)
//   y = n * gain + bias;  gated: y *= sigmoid(gate * z)
// `gate` and `bias` may be undefined tensors.
inline Tensor row_norm(const Tensor& z, const Tensor& gain, const Tensor& gate, const Tensor& bias, double epsilon,
                       bool centered, std::string_view name) {
  const std::size_t w = z.shape().back(), rows = z.size() / w;
  auto check = [&](const Tensor& t, const char* what) {
    if (t.defined() && t.size() != w)
      throw ShapeError(std::string(name) + " " + what + " of " + std::to_string(t.size()) + " for width " +
                       std::to_string(w));
  };
  check(gain, "gain");
  check(gate, "gate");
  check(bias, "bias");
  const bool gated = gate.defined();
  auto normed = std::make_shared<std::vector<double>>(z.size());
  auto inv_rms = std::make_shared<std::vector<double>>(rows);
  std::vector<double> out(z.size());
  auto x = z.data();
  auto gn = gain.data();
  for (std::size_t r = 0; r < rows; ++r) {
    const double* zr = x.data() + r * w;
    double* nr = normed->data() + r * w;
    double mu = 0.0;
    if (centered) {
      for (std::size_t k = 0; k < w; ++k) mu += zr[k];
      mu /= static_cast<double>(w);
    }
    double ms = 0.0;
    for (std::size_t k = 0; k < w; ++k) ms += (zr[k] - mu) * (zr[k] - mu);
    const double inv = 1.0 / std::sqrt(ms / static_cast<double>(w) + epsilon);
    (*inv_rms)[r] = inv;
    for (std::size_t k = 0; k < w; ++k) {
      nr[k] = (zr[k] - mu) * inv;
      double y = nr[k] * gn[k];
      if (bias.defined()) y += bias.data()[k];
      if (gated) y *= 1.0 / (1.0 + std::exp(-gate.data()[k] * zr[k]));
      out[r * w + k] = y;
    }
  }
  std::vector<Tensor> inputs{z, gain};
  if (gated) inputs.push_back(gate);
  if (bias.defined()) inputs.push_back(bias);
  const bool has_bias = bias.defined();
  return Tensor::make_result(z.shape(), std::move(out), name, inputs,
                             [normed, inv_rms, w, rows, centered, gated, has_bias](Node& self) {
    Node& nz = *self.inputs[0];
    Node& ngain = *self.inputs[1];
    Node* ngate = gated ? self.inputs[2].get() : nullptr;
    Node* nbias = has_bias ? self.inputs[gated ? 3 : 2].get() : nullptr;
    std::vector<double> gy0(w), gnorm(w), direct(w);  // direct: gradient reaching z through the gate
    for (std::size_t r = 0; r < rows; ++r) {
      const double* zr = nz.data.data() + r * w;
      const double* nr = normed->data() + r * w;
      const double* gy = self.grad.data() + r * w;
      std::fill(direct.begin(), direct.end(), 0.0);
      for (std::size_t k = 0; k < w; ++k) {
        if (gated) {
          const double s = 1.0 / (1.0 + std::exp(-ngate->data[k] * zr[k]));
          double y0 = nr[k] * ngain.data[k];
          if (nbias) y0 += nbias->data[k];
          const double gs = gy[k] * y0 * s * (1.0 - s);
          if (ngate->requires_grad) ngate->ensure_grad()[k] += gs * zr[k];
          direct[k] = gs * ngate->data[k];
          gy0[k] = gy[k] * s;
        } else {
          gy0[k] = gy[k];
        }
        if (nbias && nbias->requires_grad) nbias->ensure_grad()[k] += gy0[k];
        if (ngain.requires_grad) ngain.ensure_grad()[k] += gy0[k] * nr[k];
        gnorm[k] = gy0[k] * ngain.data[k];
      }
      if (!nz.requires_grad) continue;
      double dot = 0.0, total = 0.0;
      for (std::size_t k = 0; k < w; ++k) dot += gnorm[k] * nr[k], total += gnorm[k];
      dot /= static_cast<double>(w);
      total /= static_cast<double>(w);
      auto& gz = nz.ensure_grad();
      const double inv = (*inv_rms)[r];
      for (std::size_t k = 0; k < w; ++k)
        gz[r * w + k] += (gnorm[k] - (centered ? total : 0.0) - nr[k] * dot) * inv + direct[k];
    }
  });
}

}  // namespace detail

/// z / sqrt(mean(z^2) + eps) * gain over the trailing axis.
inline Tensor rmsnorm(const Tensor& z, const Tensor& gain, double epsilon = 1e-8) {
  return detail::row_norm(z, gain, {}, {}, epsilon, false, "rmsnorm");
}

/// (z - mean) / sqrt(var + eps) * gain + bias over the trailing axis.
inline Tensor layernorm(const Tensor& z, const Tensor& gain, const Tensor& bias, double epsilon = 1e-8) {
  return detail::row_norm(z, gain, {}, bias, epsilon, true, "layernorm");
}

/// sigmoid(gate * z) * rmsnorm(z); the gate sees the raw input.
inline Tensor gated_rmsnorm(const Tensor& z, const Tensor& gain, const Tensor& gate, double epsilon = 1e-8) {
  return detail::row_norm(z, gain, gate, {}, epsilon, false, "gated_rmsnorm");
}

inline Tensor gated_layernorm(const Tensor& z, const Tensor& gain, const Tensor& gate, const Tensor& bias,
                              double epsilon = 1e-8) {
  return detail::row_norm(z, gain, gate, bias, epsilon, true, "gated_layernorm");
}

inline Tensor apply_norm(const NormConfig& config, const NormParams& p, const Tensor& z) {
  switch (config.kind) {
    case NormKind::none: return z;
    case NormKind::rmsnorm: return rmsnorm(z, p.gain, config.epsilon);
    case NormKind::layernorm: return layernorm(z, p.gain, p.bias, config.epsilon);
    case NormKind::gated_rmsnorm: return gated_rmsnorm(z, p.gain, p.gate, config.epsilon);
    case NormKind::gated_layernorm: return gated_layernorm(z, p.gain, p.gate, p.bias, config.epsilon);
  }
  return z;
}

/// Fresh parameters: gain is 1 or U(-sqrt(3/fan), sqrt(3/fan)); gate and bias start at 0.
inline NormParams init_gain(const NormConfig& config, Rng& rng) {
  config.validate();
  NormParams p;
  if (config.kind == NormKind::none) return p;
  const std::size_t w = config.width;
  p.gain = Tensor::full({w}, 1.0, true);
  if (config.init == GainInit::xavier_uniform_gain) {
    const double bound = std::sqrt(3.0 / static_cast<double>(config.fan()));
    for (auto& g : p.gain.mutable_data()) g = uniform(rng, -bound, bound);
  }
  if (is_gated(config.kind)) p.gate = Tensor::zeros({w}, true);
  if (is_centered(config.kind)) p.bias = Tensor::zeros({w}, true);
  return p;
}

}  // namespace rela
