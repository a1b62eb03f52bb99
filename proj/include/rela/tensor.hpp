#pragma once

// Dense row-major tensors of doubles with reverse-mode differentiation.
//
// A Tensor is a cheap handle to a graph node. Operations on tensors that
// require gradients record their inputs and an adjoint closure in the result
// node; Graph::trace() recovers a topological order from any root, and
// Graph::backward() replays the adjoints in reverse. Nothing here touches
// global mutable state, so independent graphs may live on different threads.

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <memory>
#include <numeric>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <string_view>
#include <unordered_set>
#include <utility>
#include <vector>

#include "json.hpp"

namespace rela {

using Shape = std::vector<std::size_t>;

class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

inline std::size_t numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

inline std::string to_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "x" : "") << shape[i];
  os << ']';
  return os.str();
}

namespace detail {

struct Node {
  Shape shape;
  std::vector<double> data;
  std::vector<double> grad;
  bool requires_grad = false;
  std::string_view op = "leaf";
  std::vector<std::shared_ptr<Node>> inputs;
  // Reads this node's grad and accumulates into the inputs' grads.
  std::function<void(Node&)> backward;

  Node() = default;
  Node(const Node&) = delete;
  Node& operator=(const Node&) = delete;

  // Unlinks the graph iteratively; the default destructor recurses once per
  // node and overflows the stack on long chains.
  ~Node() {
    std::vector<std::shared_ptr<Node>> pending = std::move(inputs);
    while (!pending.empty()) {
      std::shared_ptr<Node> n = std::move(pending.back());
      pending.pop_back();
      if (n && n.use_count() == 1) {
        for (auto& in : n->inputs) pending.push_back(std::move(in));
        n->inputs.clear();
        n->backward = nullptr;
      }
    }
  }

  std::vector<double>& ensure_grad() {
    if (grad.size() != data.size()) grad.assign(data.size(), 0.0);
    return grad;
  }
};

}  // namespace detail

class Tensor {
 public:
  Tensor() = default;

  Tensor(Shape shape, std::vector<double> data, bool requires_grad = false)
      : node_(std::make_shared<detail::Node>()) {
    if (shape.empty()) throw ShapeError("tensor shape must have at least one extent");
    for (auto e : shape)
      if (e == 0) throw ShapeError("tensor extents must be positive, got " + to_string(shape));
    if (numel(shape) != data.size())
      throw ShapeError("shape " + to_string(shape) + " does not match " +
                       std::to_string(data.size()) + " values");
    node_->shape = std::move(shape);
    node_->data = std::move(data);
    node_->requires_grad = requires_grad;
  }

  static Tensor zeros(Shape shape, bool requires_grad = false) {
    const auto n = numel(shape);
    return Tensor(std::move(shape), std::vector<double>(n, 0.0), requires_grad);
  }
  static Tensor full(Shape shape, double value, bool requires_grad = false) {
    const auto n = numel(shape);
    return Tensor(std::move(shape), std::vector<double>(n, value), requires_grad);
  }
  static Tensor scalar(double value, bool requires_grad = false) {
    return Tensor({1}, {value}, requires_grad);
  }

  bool defined() const { return static_cast<bool>(node_); }
  const Shape& shape() const { return node_->shape; }
  std::size_t rank() const { return node_->shape.size(); }
  std::size_t size() const { return node_->data.size(); }
  std::size_t dim(std::size_t axis) const { return node_->shape.at(axis); }

  std::span<const double> data() const { return node_->data; }
  // Direct write access, for initializers and optimizers. Mutating a tensor
  // that is part of a live graph invalidates that graph.
  std::span<double> mutable_data() { return node_->data; }
  double item() const {
    if (size() != 1) throw ShapeError("item() on tensor of shape " + to_string(shape()));
    return node_->data[0];
  }
  double at(std::size_t i) const { return node_->data.at(i); }
  double at(std::size_t i, std::size_t j) const {
    if (rank() != 2) throw ShapeError("2-index access on tensor of shape " + to_string(shape()));
    return node_->data.at(i * node_->shape[1] + j);
  }

  bool requires_grad() const { return node_->requires_grad; }
  void set_requires_grad(bool on) { node_->requires_grad = on; }
  bool has_grad() const { return node_->grad.size() == node_->data.size(); }
  std::span<const double> grad() const { return node_->grad; }
  std::span<double> mutable_grad() { return node_->ensure_grad(); }
  void zero_grad() { node_->grad.assign(node_->data.size(), 0.0); }

  /// Copy of the values with no graph history.
  Tensor detach() const { return Tensor(shape(), node_->data, false); }

  /// Reverse pass from a single-element tensor, seeding d(self)/d(self) = 1.
  void backward() const;

  const std::shared_ptr<detail::Node>& node() const { return node_; }

  // Builds an op result. The adjoint is retained only if some input
  // requires a gradient.
  static Tensor make_result(Shape shape, std::vector<double> data, std::string_view op,
                            std::initializer_list<const Tensor*> inputs,
                            std::function<void(detail::Node&)> backward) {
    Tensor out(std::move(shape), std::move(data));
    out.node_->op = op;
    bool any = false;
    for (const Tensor* in : inputs) any = any || in->requires_grad();
    if (any) {
      out.node_->requires_grad = true;
      for (const Tensor* in : inputs) out.node_->inputs.push_back(in->node_);
      out.node_->backward = std::move(backward);
    }
    return out;
  }
  static Tensor make_result(Shape shape, std::vector<double> data, std::string_view op,
                            const std::vector<Tensor>& inputs,
                            std::function<void(detail::Node&)> backward) {
    Tensor out(std::move(shape), std::move(data));
    out.node_->op = op;
    bool any = std::any_of(inputs.begin(), inputs.end(), [](const Tensor& t) { return t.requires_grad(); });
    if (any) {
      out.node_->requires_grad = true;
      for (const auto& in : inputs) out.node_->inputs.push_back(in.node_);
      out.node_->backward = std::move(backward);
    }
    return out;
  }

 private:
  std::shared_ptr<detail::Node> node_;
};

/// Topologically ordered record of the operations reachable from a root.
class Graph {
 public:
  static Graph trace(const Tensor& root) {
    Graph g;
    std::unordered_set<const detail::Node*> seen;
    // Iterative post-order DFS; inputs are emitted before their consumers.
    std::vector<std::pair<detail::Node*, std::size_t>> stack;
    stack.emplace_back(root.node().get(), 0);
    seen.insert(root.node().get());
    while (!stack.empty()) {
      auto& [node, next] = stack.back();
      if (next < node->inputs.size()) {
        detail::Node* child = node->inputs[next++].get();
        if (seen.insert(child).second) stack.emplace_back(child, 0);
      } else {
        g.nodes_.push_back(node);
        stack.pop_back();
      }
    }
    return g;
  }

  std::span<detail::Node* const> nodes() const { return nodes_; }

  /// Seeds the root (last node) with `seed` and runs every adjoint in reverse order.
  void backward(double seed = 1.0) const {
    if (nodes_.empty()) return;
    detail::Node* root = nodes_.back();
    if (root->data.size() != 1)
      throw ShapeError("backward() needs a single-element root, got " + to_string(root->shape));
    root->ensure_grad()[0] += seed;
    for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) {
      detail::Node* n = *it;
      if (!n->backward || !n->requires_grad) continue;
      n->ensure_grad();
      n->backward(*n);
    }
  }

 private:
  std::vector<detail::Node*> nodes_;
};

inline void Tensor::backward() const { Graph::trace(*this).backward(); }

// ---------------------------------------------------------------------------
// Broadcasting

inline Shape broadcast_shape(const Shape& a, const Shape& b) {
  const std::size_t rank = std::max(a.size(), b.size());
  Shape out(rank);
  for (std::size_t k = 0; k < rank; ++k) {
    const std::size_t ea = k < rank - a.size() ? 1 : a[k - (rank - a.size())];
    const std::size_t eb = k < rank - b.size() ? 1 : b[k - (rank - b.size())];
    if (ea != eb && ea != 1 && eb != 1)
      throw ShapeError("shapes " + to_string(a) + " and " + to_string(b) + " are not broadcastable");
    out[k] = std::max(ea, eb);
  }
  return out;
}

namespace detail {

// Flat source index for every flat index of `out`, with `in` right-aligned
// against `out`. Empty result means the identity map.
inline std::vector<std::size_t> broadcast_index(const Shape& out, const Shape& in) {
  if (in == out) return {};
  const std::size_t rank = out.size();
  const std::size_t offset = rank - in.size();
  std::vector<std::size_t> in_stride(rank, 0);
  std::size_t stride = 1;
  for (std::size_t k = rank; k-- > offset;) {
    const std::size_t e = in[k - offset];
    in_stride[k] = e == 1 ? 0 : stride;
    stride *= e;
  }
  const std::size_t total = numel(out);
  std::vector<std::size_t> map(total);
  std::vector<std::size_t> idx(rank, 0);
  std::size_t src = 0;
  for (std::size_t flat = 0; flat < total; ++flat) {
    map[flat] = src;
    for (std::size_t k = rank; k-- > 0;) {
      ++idx[k];
      src += in_stride[k];
      if (idx[k] < out[k]) break;
      src -= in_stride[k] * idx[k];
      idx[k] = 0;
    }
  }
  return map;
}

// broadcast_index with closed forms for the common layouts: an operand that
// tiles the result (bias rows) or whose trailing extents are all 1 (per-row
// statistics).
struct BroadcastMap {
  enum class Kind { identity, tile, stretch, general } kind = Kind::identity;
  std::size_t period = 1;
  std::vector<std::size_t> map;

  std::size_t operator()(std::size_t i) const {
    switch (kind) {
      case Kind::identity: return i;
      case Kind::tile: return i % period;
      case Kind::stretch: return i / period;
      case Kind::general: return map[i];
    }
    return i;
  }
};

inline BroadcastMap broadcast_map(const Shape& out, const Shape& in) {
  BroadcastMap m;
  if (in == out) return m;
  const std::size_t offset = out.size() - in.size();
  std::size_t lead = 0;  // leading extents of `in` equal to 1
  while (lead < in.size() && in[lead] == 1) ++lead;
  if (std::equal(in.begin() + static_cast<long>(lead), in.end(), out.begin() + static_cast<long>(offset + lead))) {
    m.kind = BroadcastMap::Kind::tile;
    m.period = numel(in);
    return m;
  }
  if (offset == 0) {
    std::size_t k = in.size();
    while (k > 0 && in[k - 1] == 1) --k;
    if (std::equal(in.begin(), in.begin() + static_cast<long>(k), out.begin())) {
      m.kind = BroadcastMap::Kind::stretch;
      m.period = 1;
      for (std::size_t j = k; j < out.size(); ++j) m.period *= out[j];
      return m;
    }
  }
  m.kind = BroadcastMap::Kind::general;
  m.map = broadcast_index(out, in);
  return m;
}

inline std::size_t normalize_axis(int axis, std::size_t rank) {
  const long a = axis < 0 ? static_cast<long>(rank) + axis : axis;
  if (a < 0 || a >= static_cast<long>(rank))
    throw ShapeError("axis " + std::to_string(axis) + " out of range for rank " + std::to_string(rank));
  return static_cast<std::size_t>(a);
}

// Generic binary pointwise op. `da`/`db` give the partial derivatives from
// (x, y, out).
template <class F, class DA, class DB>
Tensor binary(const Tensor& a, const Tensor& b, std::string_view name, F f, DA da, DB db) {
  Shape shape = broadcast_shape(a.shape(), b.shape());
  auto ia = std::make_shared<BroadcastMap>(broadcast_map(shape, a.shape()));
  auto ib = std::make_shared<BroadcastMap>(broadcast_map(shape, b.shape()));
  const std::size_t n = numel(shape);
  std::vector<double> out(n);
  auto xa = a.data();
  auto xb = b.data();
  using K = BroadcastMap::Kind;
  if (ia->kind == K::identity && ib->kind == K::identity) {
    for (std::size_t i = 0; i < n; ++i) out[i] = f(xa[i], xb[i]);
  } else if (ia->kind == K::identity && ib->kind == K::tile) {
    const std::size_t p = ib->period;
    for (std::size_t r = 0; r < n; r += p)
      for (std::size_t k = 0; k < p; ++k) out[r + k] = f(xa[r + k], xb[k]);
  } else {
    for (std::size_t i = 0; i < n; ++i) out[i] = f(xa[(*ia)(i)], xb[(*ib)(i)]);
  }
  return Tensor::make_result(
      std::move(shape), std::move(out), name, {&a, &b}, [ia, ib, da, db](Node& self) {
        Node& na = *self.inputs[0];
        Node& nb = *self.inputs[1];
        const auto& g = self.grad;
        const BroadcastMap& ma = *ia;
        const BroadcastMap& mb = *ib;
        if (na.requires_grad) {
          auto& ga = na.ensure_grad();
          for (std::size_t i = 0; i < g.size(); ++i) {
            const std::size_t ka = ma(i), kb = mb(i);
            ga[ka] += g[i] * da(na.data[ka], nb.data[kb], self.data[i]);
          }
        }
        if (nb.requires_grad) {
          auto& gb = nb.ensure_grad();
          for (std::size_t i = 0; i < g.size(); ++i) {
            const std::size_t ka = ma(i), kb = mb(i);
            gb[kb] += g[i] * db(na.data[ka], nb.data[kb], self.data[i]);
          }
        }
      });
}

// Generic unary pointwise op. `d` gives the derivative from (x, out).
template <class F, class D>
Tensor unary(const Tensor& a, std::string_view name, F f, D d) {
  std::vector<double> out(a.size());
  auto x = a.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = f(x[i]);
  return Tensor::make_result(a.shape(), std::move(out), name, {&a}, [d](Node& self) {
    Node& in = *self.inputs[0];
    auto& gi = in.ensure_grad();
    for (std::size_t i = 0; i < self.grad.size(); ++i) gi[i] += self.grad[i] * d(in.data[i], self.data[i]);
  });
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Pointwise operations

inline Tensor add(const Tensor& a, const Tensor& b) {
  return detail::binary(
      a, b, "add", [](double x, double y) { return x + y; }, [](double, double, double) { return 1.0; },
      [](double, double, double) { return 1.0; });
}
inline Tensor sub(const Tensor& a, const Tensor& b) {
  return detail::binary(
      a, b, "sub", [](double x, double y) { return x - y; }, [](double, double, double) { return 1.0; },
      [](double, double, double) { return -1.0; });
}
inline Tensor mul(const Tensor& a, const Tensor& b) {
  return detail::binary(
      a, b, "mul", [](double x, double y) { return x * y; }, [](double, double y, double) { return y; },
      [](double x, double, double) { return x; });
}
// Division; the caller guarantees a nonzero denominator (norms add their epsilon first).
inline Tensor div(const Tensor& a, const Tensor& b) {
  return detail::binary(
      a, b, "div", [](double x, double y) { return x / y; }, [](double, double y, double) { return 1.0 / y; },
      [](double, double y, double o) { return -o / y; });
}
// Ties send the adjoint to `a`.
inline Tensor maximum(const Tensor& a, const Tensor& b) {
  return detail::binary(
      a, b, "maximum", [](double x, double y) { return x >= y ? x : y; },
      [](double x, double y, double) { return x >= y ? 1.0 : 0.0; },
      [](double x, double y, double) { return x >= y ? 0.0 : 1.0; });
}

inline Tensor scale(const Tensor& a, double c) {
  return detail::unary(
      a, "scale", [c](double x) { return c * x; }, [c](double, double) { return c; });
}
inline Tensor add_scalar(const Tensor& a, double c) {
  return detail::unary(
      a, "add_scalar", [c](double x) { return x + c; }, [](double, double) { return 1.0; });
}
inline Tensor neg(const Tensor& a) { return scale(a, -1.0); }
inline Tensor exp(const Tensor& a) {
  return detail::unary(
      a, "exp", [](double x) { return std::exp(x); }, [](double, double o) { return o; });
}
inline Tensor log(const Tensor& a) {
  return detail::unary(
      a, "log", [](double x) { return std::log(x); }, [](double x, double) { return 1.0 / x; });
}
inline Tensor sqrt(const Tensor& a) {
  return detail::unary(
      a, "sqrt", [](double x) { return std::sqrt(x); }, [](double, double o) { return 0.5 / o; });
}
inline Tensor pow(const Tensor& a, double p) {
  return detail::unary(
      a, "pow", [p](double x) { return std::pow(x, p); },
      [p](double x, double) { return p * std::pow(x, p - 1.0); });
}
inline Tensor square(const Tensor& a) {
  return detail::unary(
      a, "square", [](double x) { return x * x; }, [](double x, double) { return 2.0 * x; });
}
inline Tensor sigmoid(const Tensor& a) {
  return detail::unary(
      a, "sigmoid",
      [](double x) { return x >= 0 ? 1.0 / (1.0 + std::exp(-x)) : std::exp(x) / (1.0 + std::exp(x)); },
      [](double, double o) { return o * (1.0 - o); });
}
inline Tensor tanh(const Tensor& a) {
  return detail::unary(
      a, "tanh", [](double x) { return std::tanh(x); }, [](double, double o) { return 1.0 - o * o; });
}
inline Tensor relu(const Tensor& a) {
  return detail::unary(
      a, "relu", [](double x) { return x > 0 ? x : 0.0; }, [](double x, double) { return x > 0 ? 1.0 : 0.0; });
}

enum class UnaryKind { neg, exp, log, sqrt, square, sigmoid, tanh, relu };
enum class BinaryKind { add, sub, mul, div, maximum };

inline Tensor elementwise(UnaryKind kind, const Tensor& a) {
  switch (kind) {
    case UnaryKind::neg: return neg(a);
    case UnaryKind::exp: return exp(a);
    case UnaryKind::log: return log(a);
    case UnaryKind::sqrt: return sqrt(a);
    case UnaryKind::square: return square(a);
    case UnaryKind::sigmoid: return sigmoid(a);
    case UnaryKind::tanh: return tanh(a);
    case UnaryKind::relu: return relu(a);
  }
  throw std::invalid_argument("unknown unary kind");
}

inline Tensor elementwise(BinaryKind kind, const Tensor& a, const Tensor& b) {
  switch (kind) {
    case BinaryKind::add: return add(a, b);
    case BinaryKind::sub: return sub(a, b);
    case BinaryKind::mul: return mul(a, b);
    case BinaryKind::div: return div(a, b);
    case BinaryKind::maximum: return maximum(a, b);
  }
  throw std::invalid_argument("unknown binary kind");
}

// ---------------------------------------------------------------------------
// Reductions

enum class ReduceKind { sum, mean, max };

/// Reduces one axis. Without keepdims the axis is removed; a rank-1 input
/// reduces to shape [1].
inline Tensor reduce(ReduceKind kind, const Tensor& a, int axis, bool keepdims = false) {
  const std::size_t ax = detail::normalize_axis(axis, a.rank());
  const auto& s = a.shape();
  std::size_t outer = 1, inner = 1;
  for (std::size_t k = 0; k < ax; ++k) outer *= s[k];
  for (std::size_t k = ax + 1; k < s.size(); ++k) inner *= s[k];
  const std::size_t len = s[ax];

  Shape shape = s;
  if (keepdims) {
    shape[ax] = 1;
  } else {
    shape.erase(shape.begin() + static_cast<long>(ax));
    if (shape.empty()) shape = {1};
  }
  std::vector<double> out(outer * inner, 0.0);
  auto argmax = std::make_shared<std::vector<std::size_t>>();
  if (kind == ReduceKind::max) argmax->assign(outer * inner, 0);
  auto x = a.data();
  for (std::size_t o = 0; o < outer; ++o) {
    for (std::size_t i = 0; i < inner; ++i) {
      const std::size_t base = o * len * inner + i;
      double acc = kind == ReduceKind::max ? x[base] : 0.0;
      std::size_t best = 0;
      for (std::size_t k = 0; k < len; ++k) {
        const double v = x[base + k * inner];
        if (kind == ReduceKind::max) {
          if (v > acc) acc = v, best = k;
        } else {
          acc += v;
        }
      }
      if (kind == ReduceKind::mean) acc /= static_cast<double>(len);
      out[o * inner + i] = acc;
      if (kind == ReduceKind::max) (*argmax)[o * inner + i] = best;
    }
  }
  static constexpr std::string_view names[] = {"sum", "mean", "max"};
  return Tensor::make_result(std::move(shape), std::move(out), names[static_cast<int>(kind)], {&a},
                             [kind, outer, inner, len, argmax](detail::Node& self) {
                               auto& gi = self.inputs[0]->ensure_grad();
                               const double w = kind == ReduceKind::mean ? 1.0 / static_cast<double>(len) : 1.0;
                               for (std::size_t o = 0; o < outer; ++o) {
                                 for (std::size_t i = 0; i < inner; ++i) {
                                   const double g = self.grad[o * inner + i];
                                   const std::size_t base = o * len * inner + i;
                                   if (kind == ReduceKind::max) {
                                     gi[base + (*argmax)[o * inner + i] * inner] += g;
                                   } else {
                                     for (std::size_t k = 0; k < len; ++k) gi[base + k * inner] += g * w;
                                   }
                                 }
                               }
                             });
}

inline Tensor sum(const Tensor& a, int axis, bool keepdims = false) {
  return reduce(ReduceKind::sum, a, axis, keepdims);
}
inline Tensor mean(const Tensor& a, int axis, bool keepdims = false) {
  return reduce(ReduceKind::mean, a, axis, keepdims);
}
inline Tensor max(const Tensor& a, int axis, bool keepdims = false) {
  return reduce(ReduceKind::max, a, axis, keepdims);
}

/// Sum of every element, shape [1].
inline Tensor sum_all(const Tensor& a) {
  double acc = 0.0;
  for (double v : a.data()) acc += v;
  return Tensor::make_result({1}, {acc}, "sum_all", {&a}, [](detail::Node& self) {
    auto& gi = self.inputs[0]->ensure_grad();
    for (auto& g : gi) g += self.grad[0];
  });
}

// ---------------------------------------------------------------------------
// Linear algebra and layout

namespace detail {
using RowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MatrixMap = Eigen::Map<RowMatrix>;
using ConstMatrixMap = Eigen::Map<const RowMatrix>;
}  // namespace detail

inline Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0))
    throw ShapeError("matmul: incompatible shapes " + to_string(a.shape()) + " and " + to_string(b.shape()));
  const std::size_t n = a.dim(0), k = a.dim(1), m = b.dim(1);
  std::vector<double> out(n * m);
  detail::MatrixMap(out.data(), n, m).noalias() =
      detail::ConstMatrixMap(a.data().data(), n, k) * detail::ConstMatrixMap(b.data().data(), k, m);
  return Tensor::make_result({n, m}, std::move(out), "matmul", {&a, &b}, [n, k, m](detail::Node& self) {
    detail::Node& na = *self.inputs[0];
    detail::Node& nb = *self.inputs[1];
    detail::ConstMatrixMap g(self.grad.data(), n, m);
    if (na.requires_grad)
      detail::MatrixMap(na.ensure_grad().data(), n, k).noalias() +=
          g * detail::ConstMatrixMap(nb.data.data(), k, m).transpose();
    if (nb.requires_grad)
      detail::MatrixMap(nb.ensure_grad().data(), k, m).noalias() +=
          detail::ConstMatrixMap(na.data.data(), n, k).transpose() * g;
  });
}

inline Tensor transpose(const Tensor& a) {
  if (a.rank() != 2) throw ShapeError("transpose expects rank 2, got " + to_string(a.shape()));
  const std::size_t n = a.dim(0), m = a.dim(1);
  std::vector<double> out(n * m);
  detail::MatrixMap(out.data(), m, n) = detail::ConstMatrixMap(a.data().data(), n, m).transpose();
  return Tensor::make_result({m, n}, std::move(out), "transpose", {&a}, [n, m](detail::Node& self) {
    detail::MatrixMap(self.inputs[0]->ensure_grad().data(), n, m) +=
        detail::ConstMatrixMap(self.grad.data(), m, n).transpose();
  });
}

inline Tensor reshape(const Tensor& a, Shape shape) {
  if (numel(shape) != a.size())
    throw ShapeError("reshape " + to_string(a.shape()) + " -> " + to_string(shape) + " changes element count");
  return Tensor::make_result(std::move(shape), std::vector<double>(a.data().begin(), a.data().end()), "reshape",
                             {&a}, [](detail::Node& self) {
                               auto& gi = self.inputs[0]->ensure_grad();
                               for (std::size_t i = 0; i < gi.size(); ++i) gi[i] += self.grad[i];
                             });
}

/// Slice [start, start+length) along `axis`.
inline Tensor narrow(const Tensor& a, int axis, std::size_t start, std::size_t length) {
  const std::size_t ax = detail::normalize_axis(axis, a.rank());
  const auto& s = a.shape();
  if (length == 0 || start + length > s[ax])
    throw ShapeError("narrow out of range on axis " + std::to_string(ax) + " of " + to_string(s));
  std::size_t outer = 1, inner = 1;
  for (std::size_t k = 0; k < ax; ++k) outer *= s[k];
  for (std::size_t k = ax + 1; k < s.size(); ++k) inner *= s[k];
  const std::size_t len = s[ax];
  Shape shape = s;
  shape[ax] = length;
  std::vector<double> out(outer * length * inner);
  auto x = a.data();
  for (std::size_t o = 0; o < outer; ++o)
    std::copy_n(x.begin() + static_cast<long>((o * len + start) * inner), length * inner,
                out.begin() + static_cast<long>(o * length * inner));
  return Tensor::make_result(std::move(shape), std::move(out), "narrow", {&a},
                             [outer, inner, len, start, length](detail::Node& self) {
                               auto& gi = self.inputs[0]->ensure_grad();
                               for (std::size_t o = 0; o < outer; ++o)
                                 for (std::size_t k = 0; k < length * inner; ++k)
                                   gi[(o * len + start) * inner + k] += self.grad[o * length * inner + k];
                             });
}

/// Concatenation along `axis`; all other extents must agree.
inline Tensor concat(const std::vector<Tensor>& parts, int axis) {
  if (parts.empty()) throw ShapeError("concat of zero tensors");
  const std::size_t ax = detail::normalize_axis(axis, parts[0].rank());
  Shape shape = parts[0].shape();
  std::size_t total = 0;
  for (const auto& p : parts) {
    Shape probe = p.shape();
    if (probe.size() != shape.size()) throw ShapeError("concat rank mismatch");
    probe[ax] = shape[ax];
    if (probe != shape)
      throw ShapeError("concat: " + to_string(p.shape()) + " incompatible with " + to_string(parts[0].shape()));
    total += p.dim(ax);
  }
  std::size_t outer = 1, inner = 1;
  for (std::size_t k = 0; k < ax; ++k) outer *= shape[k];
  for (std::size_t k = ax + 1; k < shape.size(); ++k) inner *= shape[k];
  shape[ax] = total;
  std::vector<double> out(outer * total * inner);
  std::vector<std::size_t> offsets;
  std::size_t off = 0;
  for (const auto& p : parts) {
    offsets.push_back(off);
    const std::size_t len = p.dim(ax);
    auto x = p.data();
    for (std::size_t o = 0; o < outer; ++o)
      std::copy_n(x.begin() + static_cast<long>(o * len * inner), len * inner,
                  out.begin() + static_cast<long>((o * total + off) * inner));
    off += len;
  }
  return Tensor::make_result(std::move(shape), std::move(out), "concat", parts,
                             [outer, inner, total, offsets](detail::Node& self) {
                               for (std::size_t p = 0; p < self.inputs.size(); ++p) {
                                 detail::Node& in = *self.inputs[p];
                                 if (!in.requires_grad) continue;
                                 auto& gi = in.ensure_grad();
                                 const std::size_t len = gi.size() / (outer * inner);
                                 for (std::size_t o = 0; o < outer; ++o)
                                   for (std::size_t k = 0; k < len * inner; ++k)
                                     gi[o * len * inner + k] += self.grad[(o * total + offsets[p]) * inner + k];
                               }
                             });
}

/// Rows of a [vocab x d] table selected by ids; adjoint scatter-adds.
inline Tensor gather_rows(const Tensor& table, std::span<const int> ids) {
  if (table.rank() != 2) throw ShapeError("gather_rows expects a rank-2 table");
  const std::size_t rows = table.dim(0), d = table.dim(1);
  std::vector<double> out(ids.size() * d);
  auto x = table.data();
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] < 0 || static_cast<std::size_t>(ids[i]) >= rows)
      throw std::out_of_range("token id " + std::to_string(ids[i]) + " outside table of " + std::to_string(rows) +
                              " rows");
    std::copy_n(x.begin() + static_cast<long>(ids[i] * d), d, out.begin() + static_cast<long>(i * d));
  }
  auto idx = std::make_shared<std::vector<int>>(ids.begin(), ids.end());
  return Tensor::make_result({ids.size(), d}, std::move(out), "gather_rows", {&table}, [idx, d](detail::Node& self) {
    auto& gi = self.inputs[0]->ensure_grad();
    for (std::size_t i = 0; i < idx->size(); ++i)
      for (std::size_t c = 0; c < d; ++c) gi[(*idx)[i] * d + c] += self.grad[i * d + c];
  });
}

// ---------------------------------------------------------------------------
// Finite-difference gradient checking

struct GradCheckReport {
  double max_rel_error = 0.0;
  std::size_t worst_input = 0;
  std::size_t worst_index = 0;
  bool finite = true;
  std::string message;

  bool passed(double tolerance) const { return finite && max_rel_error < tolerance; }
};

/// Compares the reverse-mode gradient of scalar `f` with central differences
/// at every coordinate of every input. Error per coordinate is
/// |analytic - numeric| / max(1, |analytic|).
inline GradCheckReport grad_check(const std::function<Tensor(const std::vector<Tensor>&)>& f,
                                  const std::vector<Tensor>& at, double step = 1e-5) {
  if (step <= 0) throw std::invalid_argument("grad_check step must be positive");
  std::vector<Tensor> leaves;
  for (const auto& t : at) leaves.emplace_back(t.shape(), std::vector<double>(t.data().begin(), t.data().end()), true);
  Tensor y = f(leaves);
  if (y.size() != 1) throw ShapeError("grad_check needs a scalar function, got " + to_string(y.shape()));
  GradCheckReport report;
  if (!std::isfinite(y.item())) {
    report.finite = false;
    report.message = "function value is not finite at the probe point";
    return report;
  }
  y.backward();
  for (std::size_t t = 0; t < leaves.size(); ++t) {
    auto values = leaves[t].mutable_data();
    for (std::size_t i = 0; i < values.size(); ++i) {
      const double analytic = leaves[t].has_grad() ? leaves[t].grad()[i] : 0.0;
      const double x0 = values[i];
      values[i] = x0 + step;
      const double up = f(leaves).item();
      values[i] = x0 - step;
      const double down = f(leaves).item();
      values[i] = x0;
      const double numeric = (up - down) / (2.0 * step);
      if (!std::isfinite(analytic) || !std::isfinite(numeric)) {
        report.finite = false;
        report.worst_input = t;
        report.worst_index = i;
        report.message = "NaN/inf gradient at input " + std::to_string(t) + " coordinate " + std::to_string(i);
        return report;
      }
      const double err = std::abs(analytic - numeric) / std::max(1.0, std::abs(analytic));
      if (err > report.max_rel_error) {
        report.max_rel_error = err;
        report.worst_input = t;
        report.worst_index = i;
      }
    }
  }
  return report;
}

inline GradCheckReport grad_check(const std::function<Tensor(const Tensor&)>& f, const Tensor& at,
                                  double step = 1e-5) {
  return grad_check([&f](const std::vector<Tensor>& xs) { return f(xs[0]); }, std::vector<Tensor>{at}, step);
}

// ---------------------------------------------------------------------------
// Snapshot format: {"shape": [..], "data": [..]} with row-major data.

inline nlohmann::json to_json(const Tensor& t) {
  return nlohmann::json{{"shape", t.shape()}, {"data", std::vector<double>(t.data().begin(), t.data().end())}};
}

inline Tensor tensor_from_json(const nlohmann::json& j) {
  return Tensor(j.at("shape").get<Shape>(), j.at("data").get<std::vector<double>>());
}

}  // namespace rela
