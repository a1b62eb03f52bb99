#pragma once

// Row-wise attention activations over the last axis of a score tensor.
//
// Masked scores are replaced by kMaskedScore before the activation runs, and
// masked outputs are forced to zero afterwards. For the distribution kinds a
// fully masked row has no support and is rejected.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numbers>
#include <numeric>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "rela/tensor.hpp"

namespace rela {

enum class ActivationTag { softmax, relu, sparsemax, entmax15, gelu, leaky_relu };

struct ActivationKind {
  ActivationTag tag = ActivationTag::softmax;
  double leak = 0.01;

  /// softmax, sparsemax and entmax15 produce rows on the probability simplex.
  bool is_distribution() const {
    return tag == ActivationTag::softmax || tag == ActivationTag::sparsemax || tag == ActivationTag::entmax15;
  }
  void validate() const {
    if (tag == ActivationTag::leaky_relu && !(leak > 0.0 && leak < 1.0))
      throw std::invalid_argument("leaky_relu slope must lie in (0, 1), got " + std::to_string(leak));
  }
  friend bool operator==(const ActivationKind&, const ActivationKind&) = default;
};

inline constexpr double kMaskedScore = -1e9;

inline std::string_view to_string(ActivationTag tag) {
  switch (tag) {
    case ActivationTag::softmax: return "softmax";
    case ActivationTag::relu: return "relu";
    case ActivationTag::sparsemax: return "sparsemax";
    case ActivationTag::entmax15: return "entmax15";
    case ActivationTag::gelu: return "gelu";
    case ActivationTag::leaky_relu: return "leaky_relu";
  }
  return "?";
}

inline ActivationTag parse_activation(std::string_view name) {
  for (auto tag : {ActivationTag::softmax, ActivationTag::relu, ActivationTag::sparsemax, ActivationTag::entmax15,
                   ActivationTag::gelu, ActivationTag::leaky_relu})
    if (to_string(tag) == name) return tag;
  throw std::invalid_argument("unknown activation '" + std::string(name) + "'");
}

namespace rows {

namespace detail {

// Indices of z sorted by decreasing value, ties by original index.
inline std::vector<std::size_t> descending_order(std::span<const double> z) {
  std::vector<std::size_t> order(z.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return z[a] > z[b]; });
  return order;
}

inline constexpr double kGeluC = 0.7978845608028654;  // sqrt(2/pi)
inline constexpr double kGeluA = 0.044715;

}  // namespace detail

inline void softmax(std::span<const double> z, std::span<double> out) {
  const double m = *std::max_element(z.begin(), z.end());
  double total = 0.0;
  for (std::size_t j = 0; j < z.size(); ++j) total += out[j] = std::exp(z[j] - m);
  for (auto& v : out) v /= total;
}

/// Euclidean projection onto the simplex by the sort-and-threshold rule.
inline void sparsemax(std::span<const double> z, std::span<double> out) {
  const auto order = detail::descending_order(z);
  double cumsum = 0.0, tau_sum = 0.0;
  std::size_t support = 0;
  for (std::size_t k = 0; k < order.size(); ++k) {
    cumsum += z[order[k]];
    if (1.0 + static_cast<double>(k + 1) * z[order[k]] > cumsum) {
      support = k + 1;
      tau_sum = cumsum;
    }
  }
  const double tau = (tau_sum - 1.0) / static_cast<double>(support);
  for (std::size_t j = 0; j < z.size(); ++j) out[j] = std::max(0.0, z[j] - tau);
}

/// Exact 1.5-entmax: with u = (z - max z) / 2 sorted descending, the threshold
/// for support size k is mean_k - sqrt((1 - k * var_k) / k).
inline void entmax15(std::span<const double> z, std::span<double> out) {
  const double zmax = *std::max_element(z.begin(), z.end());
  const auto order = detail::descending_order(z);
  double sum = 0.0, sumsq = 0.0, tau_star = 0.0;
  for (std::size_t k = 0; k < order.size(); ++k) {
    const double u = (z[order[k]] - zmax) / 2.0;
    sum += u;
    sumsq += u * u;
    const double rho = static_cast<double>(k + 1);
    const double mean = sum / rho;
    const double ss = rho * (sumsq / rho - mean * mean);
    const double delta = std::max(0.0, (1.0 - ss) / rho);
    const double tau = mean - std::sqrt(delta);
    if (tau <= u) tau_star = tau;
  }
  for (std::size_t j = 0; j < z.size(); ++j) {
    const double p = std::max(0.0, (z[j] - zmax) / 2.0 - tau_star);
    out[j] = p * p;
  }
}

inline double gelu(double z) {
  return 0.5 * z * (1.0 + std::tanh(detail::kGeluC * (z + detail::kGeluA * z * z * z)));
}
inline double gelu_derivative(double z) {
  const double t = std::tanh(detail::kGeluC * (z + detail::kGeluA * z * z * z));
  return 0.5 * (1.0 + t) + 0.5 * z * (1.0 - t * t) * detail::kGeluC * (1.0 + 3.0 * detail::kGeluA * z * z);
}

/// Forward pass of one row. `z` must already carry the mask fill.
inline void forward(const ActivationKind& kind, std::span<const double> z, std::span<double> out) {
  switch (kind.tag) {
    case ActivationTag::softmax: softmax(z, out); return;
    case ActivationTag::sparsemax: sparsemax(z, out); return;
    case ActivationTag::entmax15: entmax15(z, out); return;
    case ActivationTag::relu:
      for (std::size_t j = 0; j < z.size(); ++j) out[j] = z[j] > 0.0 ? z[j] : 0.0;
      return;
    case ActivationTag::gelu:
      for (std::size_t j = 0; j < z.size(); ++j) out[j] = gelu(z[j]);
      return;
    case ActivationTag::leaky_relu:
      for (std::size_t j = 0; j < z.size(); ++j) out[j] = z[j] > 0.0 ? z[j] : kind.leak * z[j];
      return;
  }
}

/// Vector-Jacobian product of one row: writes grad_in = J(z)^T grad_out.
inline void backward(const ActivationKind& kind, std::span<const double> z, std::span<const double> out,
                     std::span<const double> grad_out, std::span<double> grad_in) {
  const std::size_t m = z.size();
  switch (kind.tag) {
    case ActivationTag::softmax: {
      double dot = 0.0;
      for (std::size_t j = 0; j < m; ++j) dot += out[j] * grad_out[j];
      for (std::size_t j = 0; j < m; ++j) grad_in[j] = out[j] * (grad_out[j] - dot);
      return;
    }
    case ActivationTag::sparsemax: {
      // Jacobian is diag(s) - s s^T / |S| on the support S.
      double total = 0.0;
      std::size_t support = 0;
      for (std::size_t j = 0; j < m; ++j)
        if (out[j] > 0.0) total += grad_out[j], ++support;
      const double avg = total / static_cast<double>(support);
      for (std::size_t j = 0; j < m; ++j) grad_in[j] = out[j] > 0.0 ? grad_out[j] - avg : 0.0;
      return;
    }
    case ActivationTag::entmax15: {
      // With s = sqrt(p) on the support, J^T g = s*g - s * <s, g> / sum(s).
      double sg = 0.0, ss = 0.0;
      for (std::size_t j = 0; j < m; ++j) {
        const double s = std::sqrt(out[j]);
        sg += s * grad_out[j];
        ss += s;
      }
      const double q = sg / ss;
      for (std::size_t j = 0; j < m; ++j) {
        const double s = std::sqrt(out[j]);
        grad_in[j] = s * grad_out[j] - s * q;
      }
      return;
    }
    case ActivationTag::relu:
      for (std::size_t j = 0; j < m; ++j) grad_in[j] = z[j] > 0.0 ? grad_out[j] : 0.0;
      return;
    case ActivationTag::gelu:
      for (std::size_t j = 0; j < m; ++j) grad_in[j] = grad_out[j] * gelu_derivative(z[j]);
      return;
    case ActivationTag::leaky_relu:
      for (std::size_t j = 0; j < m; ++j) grad_in[j] = grad_out[j] * (z[j] > 0.0 ? 1.0 : kind.leak);
      return;
  }
}

}  // namespace rows

/// Applies the activation to every row (last axis) of `scores`. `masked` is
/// either empty or holds one flag per score; nonzero means the position is
/// hidden from the query.
inline Tensor activate(const ActivationKind& kind, const Tensor& scores, std::span<const std::uint8_t> masked = {}) {
  kind.validate();
  if (!masked.empty() && masked.size() != scores.size())
    throw ShapeError("mask of " + std::to_string(masked.size()) + " flags for scores of shape " +
                     to_string(scores.shape()));
  const std::size_t m = scores.shape().back();
  const std::size_t n = scores.size() / m;
  auto filled = std::make_shared<std::vector<double>>(scores.data().begin(), scores.data().end());
  auto mask = std::make_shared<std::vector<std::uint8_t>>(masked.begin(), masked.end());
  for (std::size_t i = 0; i < n; ++i) {
    std::size_t open = m;
    if (!mask->empty()) {
      for (std::size_t j = 0; j < m; ++j)
        if ((*mask)[i * m + j]) (*filled)[i * m + j] = kMaskedScore, --open;
    }
    if (open == 0 && kind.is_distribution())
      throw std::invalid_argument(std::string(to_string(kind.tag)) + ": row " + std::to_string(i) +
                                  " is fully masked");
  }
  std::vector<double> out(scores.size());
  for (std::size_t i = 0; i < n; ++i) {
    std::span<double> row(out.data() + i * m, m);
    rows::forward(kind, std::span<const double>(filled->data() + i * m, m), row);
    if (!mask->empty())
      for (std::size_t j = 0; j < m; ++j)
        if ((*mask)[i * m + j]) row[j] = 0.0;
  }
  return Tensor::make_result(scores.shape(), std::move(out), to_string(kind.tag), {&scores},
                             [kind, filled, mask, n, m](detail::Node& self) {
                               auto& gi = self.inputs[0]->ensure_grad();
                               std::vector<double> row(m);
                               for (std::size_t i = 0; i < n; ++i) {
                                 rows::backward(kind, std::span<const double>(filled->data() + i * m, m),
                                                std::span<const double>(self.data.data() + i * m, m),
                                                std::span<const double>(self.grad.data() + i * m, m), row);
                                 for (std::size_t j = 0; j < m; ++j)
                                   if (mask->empty() || !(*mask)[i * m + j]) gi[i * m + j] += row[j];
                               }
                             });
}

inline Tensor softmax_rows(const Tensor& s, std::span<const std::uint8_t> masked = {}) {
  return activate({ActivationTag::softmax}, s, masked);
}
inline Tensor relu_rows(const Tensor& s, std::span<const std::uint8_t> masked = {}) {
  return activate({ActivationTag::relu}, s, masked);
}
inline Tensor sparsemax_rows(const Tensor& s, std::span<const std::uint8_t> masked = {}) {
  return activate({ActivationTag::sparsemax}, s, masked);
}
inline Tensor entmax15_rows(const Tensor& s, std::span<const std::uint8_t> masked = {}) {
  return activate({ActivationTag::entmax15}, s, masked);
}
inline Tensor gelu_rows(const Tensor& s, std::span<const std::uint8_t> masked = {}) {
  return activate({ActivationTag::gelu}, s, masked);
}
inline Tensor leaky_relu_rows(const Tensor& s, std::span<const std::uint8_t> masked = {}, double leak = 0.01) {
  return activate({ActivationTag::leaky_relu, leak}, s, masked);
}

}  // namespace rela
