#pragma once

// Finite-difference gradient suite over the activations, the norms and a
// full ReLA-g attention block. Each component is probed at seeded points that
// stay away from kinks (ReLU zero, simplex support changes) by at least
// `margin`, so central differences are valid.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "rela/activations.hpp"
#include "rela/attention.hpp"
#include "rela/normalization.hpp"
#include "rela/rng.hpp"
#include "rela/tensor.hpp"

namespace rela {

struct GradSuiteOptions {
  std::size_t points = 20;
  double step = 1e-5;
  double tolerance = 1e-4;
  double margin = 1e-3;
  std::uint64_t seed = 20;
  // Routes every component through an op whose adjoint is off by a factor of
  // two. The suite must then fail; used to check the detector itself.
  bool inject_bug = false;
};

struct ComponentResult {
  std::string component;
  std::size_t points = 0;
  double worst = 0.0;
  bool finite = true;
  bool passed = false;
};

inline const std::vector<std::string>& gradcheck_components() {
  static const std::vector<std::string> names{"softmax", "relu",    "sparsemax",     "entmax15",
                                              "gelu",    "leaky_relu", "rmsnorm",    "layernorm",
                                              "gated_rmsnorm", "rela_g_block"};
  return names;
}

namespace detail {

// Identity forward, doubled adjoint.
inline Tensor faulty_identity(const Tensor& x) {
  return Tensor::make_result(x.shape(), std::vector<double>(x.data().begin(), x.data().end()), "faulty", {&x},
                             [](Node& self) {
                               auto& g = self.inputs[0]->ensure_grad();
                               for (std::size_t i = 0; i < g.size(); ++i) g[i] += 2.0 * self.grad[i];
                             });
}

inline Tensor random_tensor(Shape shape, Rng& rng, double scale = 1.0) {
  std::vector<double> v(numel(shape));
  for (auto& x : v) x = scale * normal(rng);
  return Tensor(std::move(shape), std::move(v));
}

// Smallest distance of any score to the kink of its activation.
inline double kink_margin(const ActivationKind& kind, std::span<const double> z) {
  double best = std::numeric_limits<double>::infinity();
  std::vector<double> p(z.size());
  switch (kind.tag) {
    case ActivationTag::relu:
    case ActivationTag::leaky_relu:
      for (double v : z) best = std::min(best, std::abs(v));
      return best;
    case ActivationTag::sparsemax: {
      rows::sparsemax(z, p);
      double tau = 0.0;
      for (std::size_t j = 0; j < z.size(); ++j)
        if (p[j] > 0) tau = z[j] - p[j];
      for (double v : z) best = std::min(best, std::abs(v - tau));
      return best;
    }
    case ActivationTag::entmax15: {
      rows::entmax15(z, p);
      const double zmax = *std::max_element(z.begin(), z.end());
      double tau = 0.0;
      for (std::size_t j = 0; j < z.size(); ++j)
        if (p[j] > 0) tau = (z[j] - zmax) / 2.0 - std::sqrt(p[j]);
      for (double v : z) best = std::min(best, std::abs((v - zmax) / 2.0 - tau));
      return best;
    }
    default: return best;
  }
}

inline bool clear_of_kinks(const ActivationKind& kind, const Tensor& scores, double margin) {
  const std::size_t m = scores.shape().back();
  for (std::size_t r = 0; r < scores.size() / m; ++r)
    if (kink_margin(kind, scores.data().subspan(r * m, m)) <= margin) return false;
  return true;
}

inline GradCheckReport check_activation(const ActivationKind& kind, Rng& rng, const GradSuiteOptions& o,
                                        std::size_t point) {
  const std::size_t rows = 3, cols = 6;
  Tensor z;
  do {
    z = random_tensor({rows, cols}, rng, 2.0);
  } while (!clear_of_kinks(kind, z, o.margin));
  Tensor w = random_tensor({rows, cols}, rng);
  // Every other point hides the last key of each row.
  std::vector<std::uint8_t> mask;
  if (point % 2 == 1) {
    mask.assign(rows * cols, 0);
    for (std::size_t r = 0; r < rows; ++r) mask[r * cols + cols - 1] = 1;
  }
  const bool bug = o.inject_bug;
  return grad_check(
      [&](const std::vector<Tensor>& in) {
        Tensor x = bug ? faulty_identity(in[0]) : in[0];
        return sum_all(mul(activate(kind, x, mask), w));
      },
      std::vector<Tensor>{z}, o.step);
}

inline GradCheckReport check_norm(NormKind kind, Rng& rng, const GradSuiteOptions& o) {
  const std::size_t rows = 3, width = 8;
  Tensor z = random_tensor({rows, width}, rng);
  Tensor gain = random_tensor({width}, rng);
  Tensor gate = random_tensor({width}, rng);
  Tensor bias = random_tensor({width}, rng);
  Tensor w = random_tensor({rows, width}, rng);
  const bool bug = o.inject_bug;
  return grad_check(
      [&](const std::vector<Tensor>& in) {
        Tensor x = bug ? faulty_identity(in[0]) : in[0];
        NormConfig config{kind, width, width / 2};
        NormParams p{in[1], is_gated(kind) ? in[2] : Tensor(), is_centered(kind) ? in[3] : Tensor()};
        return sum_all(mul(apply_norm(config, p, x), w));
      },
      std::vector<Tensor>{z, gain, gate, bias}, o.step);
}

// Two padded sentences through the batched ReLA-g block: ReLU attention,
// gated RMSNorm, output projection.
inline GradCheckReport check_rela_g_block(Rng& rng, const GradSuiteOptions& o) {
  const std::size_t d = 8, heads = 2, dh = 4, n = 4, m = 3;
  BatchLayout layout{2, n, m, {4, 3}, {3, 2}, false};
  AttentionConfig config;
  config.model_dim = d;
  config.heads = heads;
  config.head_dim = dh;
  config.activation = {ActivationTag::relu};
  config.norm = NormConfig{NormKind::gated_rmsnorm, d, dh};
  config.dropout_rate = 0.0;
  Tensor x, y, wq, wk, wv, wo, gain, gate;
  for (;;) {
    x = random_tensor({2 * n, d}, rng);
    y = random_tensor({2 * m, d}, rng);
    wq = random_tensor({d, d}, rng, 0.7);
    wk = random_tensor({d, d}, rng, 0.7);
    wv = random_tensor({d, d}, rng, 0.7);
    wo = random_tensor({d, d}, rng, 0.7);
    gain = random_tensor({d}, rng);
    gate = random_tensor({d}, rng);
    // Keep every visible score clear of the ReLU kink.
    Tensor q = matmul(x, wq), k = matmul(y, wk);
    bool clear = true;
    for (std::size_t b = 0; b < 2 && clear; ++b)
      for (std::size_t h = 0; h < heads && clear; ++h)
        for (std::size_t i = 0; i < n; ++i)
          for (std::size_t j = 0; j < layout.key_lengths[b]; ++j) {
            double s = 0.0;
            for (std::size_t c = 0; c < dh; ++c) s += q.at(b * n + i, h * dh + c) * k.at(b * m + j, h * dh + c);
            if (std::abs(s) / std::sqrt(static_cast<double>(dh)) <= o.margin) clear = false;
          }
    if (clear) break;
  }
  Tensor w = random_tensor({2 * n, d}, rng);
  const bool bug = o.inject_bug;
  return grad_check(
      [&](const std::vector<Tensor>& in) {
        AttentionParams p{in[2], in[3], in[4], in[5], NormParams{in[6], in[7], Tensor()}};
        Tensor xin = bug ? faulty_identity(in[0]) : in[0];
        return sum_all(mul(mhatt_batched(xin, in[1], p, config, layout), w));
      },
      std::vector<Tensor>{x, y, wq, wk, wv, wo, gain, gate}, o.step);
}

}  // namespace detail

inline ComponentResult check_component(std::string_view component, const GradSuiteOptions& options = {}) {
  const auto& names = gradcheck_components();
  const auto it = std::find(names.begin(), names.end(), component);
  if (it == names.end()) throw std::invalid_argument("unknown gradient check component '" + std::string(component) + "'");
  Rng rng = make_rng(options.seed, static_cast<std::uint64_t>(it - names.begin()));
  ComponentResult result{std::string(component), options.points, 0.0, true, false};
  for (std::size_t point = 0; point < options.points; ++point) {
    GradCheckReport r;
    if (component == "rmsnorm") {
      r = detail::check_norm(NormKind::rmsnorm, rng, options);
    } else if (component == "layernorm") {
      r = detail::check_norm(NormKind::layernorm, rng, options);
    } else if (component == "gated_rmsnorm") {
      r = detail::check_norm(NormKind::gated_rmsnorm, rng, options);
    } else if (component == "rela_g_block") {
      r = detail::check_rela_g_block(rng, options);
    } else {
      r = detail::check_activation({parse_activation(component)}, rng, options, point);
    }
    result.finite = result.finite && r.finite;
    result.worst = std::max(result.worst, r.max_rel_error);
  }
  result.passed = result.finite && result.worst < options.tolerance;
  return result;
}

/// Runs the named components, or all of them when `scope` is empty.
inline std::vector<ComponentResult> run_gradcheck(const std::vector<std::string>& scope,
                                                  const GradSuiteOptions& options = {}) {
  std::vector<ComponentResult> out;
  for (const auto& name : scope.empty() ? gradcheck_components() : scope) out.push_back(check_component(name, options));
  return out;
}

}  // namespace rela
