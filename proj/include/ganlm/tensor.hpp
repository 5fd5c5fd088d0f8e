// Copyright 2026 The ganlm-desk Authors
// SPDX-License-Identifier: Apache-2.0
//
// Dense row-major tensors with tape-free reverse-mode differentiation.
//
// Every op returns a new Tensor whose node remembers its inputs and a closure
// that pushes the output gradient back into them. backward() sorts the
// reachable nodes topologically and runs each closure exactly once. The
// scalar type is a template parameter: float for training, double for
// finite-difference gradient checks.

#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <initializer_list>
#include <memory>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include <Eigen/Core>

#include "ganlm/error.hpp"
#include "ganlm/rng.hpp"

namespace ganlm {

using Shape = std::vector<std::size_t>;
using TokenId = std::int32_t;

inline std::size_t numel_of(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

inline std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
  os << ']';
  return os.str();
}

namespace detail {
inline bool& grad_enabled() {
  thread_local bool enabled = true;
  return enabled;
}
inline bool& checked_mode() {
  thread_local bool checked = false;
  return checked;
}
}  // namespace detail

// Disables graph recording on this thread for the guard's lifetime.
class NoGradGuard {
 public:
  NoGradGuard() : prev_(detail::grad_enabled()) { detail::grad_enabled() = false; }
  ~NoGradGuard() { detail::grad_enabled() = prev_; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool prev_;
};

// While active, every op rejects non-finite inputs with NumericError.
class CheckedModeGuard {
 public:
  explicit CheckedModeGuard(bool on = true) : prev_(detail::checked_mode()) {
    detail::checked_mode() = on;
  }
  ~CheckedModeGuard() { detail::checked_mode() = prev_; }
  CheckedModeGuard(const CheckedModeGuard&) = delete;
  CheckedModeGuard& operator=(const CheckedModeGuard&) = delete;

 private:
  bool prev_;
};

template <typename T>
struct Node {
  Shape shape;
  std::vector<T> data;
  std::vector<T> grad;  // empty until a gradient reaches this node
  bool requires_grad = false;
  bool is_leaf = true;
  bool retain_grad = false;
  const char* op = "leaf";
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backward_fn;

  T* grad_buffer() {
    if (grad.empty()) grad.assign(data.size(), T(0));
    return grad.data();
  }
};

template <typename T>
class Tensor {
 public:
  using value_type = T;

  Tensor() = default;

  Tensor(Shape shape, std::vector<T> data, bool requires_grad = false) {
    if (numel_of(shape) != data.size()) {
      throw ShapeError("tensor: shape " + shape_str(shape) + " does not hold " +
                       std::to_string(data.size()) + " values");
    }
    node_ = std::make_shared<Node<T>>();
    node_->shape = std::move(shape);
    node_->data = std::move(data);
    node_->requires_grad = requires_grad;
  }

  static Tensor zeros(Shape shape, bool requires_grad = false) {
    const std::size_t n = numel_of(shape);
    return Tensor(std::move(shape), std::vector<T>(n, T(0)), requires_grad);
  }

  static Tensor full(Shape shape, T value, bool requires_grad = false) {
    const std::size_t n = numel_of(shape);
    return Tensor(std::move(shape), std::vector<T>(n, value), requires_grad);
  }

  static Tensor scalar(T value, bool requires_grad = false) {
    return Tensor(Shape{}, std::vector<T>{value}, requires_grad);
  }

  // Normal(0, stddev) entries via Box-Muller on the given stream.
  static Tensor randn(Shape shape, Rng& rng, double stddev, bool requires_grad = false) {
    std::vector<T> values(numel_of(shape));
    for (std::size_t i = 0; i < values.size(); i += 2) {
      const double u1 = 1.0 - rng.uniform();
      const double u2 = rng.uniform();
      const double r = std::sqrt(-2.0 * std::log(u1)) * stddev;
      values[i] = static_cast<T>(r * std::cos(2.0 * M_PI * u2));
      if (i + 1 < values.size()) values[i + 1] = static_cast<T>(r * std::sin(2.0 * M_PI * u2));
    }
    return Tensor(std::move(shape), std::move(values), requires_grad);
  }

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const { return node_->shape; }
  std::size_t rank() const { return node_->shape.size(); }
  std::size_t numel() const { return node_->data.size(); }
  std::size_t dim(int axis) const {
    const int r = static_cast<int>(rank());
    return node_->shape.at(static_cast<std::size_t>(axis < 0 ? axis + r : axis));
  }

  std::span<T> data() { return node_->data; }
  std::span<const T> data() const { return node_->data; }
  std::vector<T> values() const { return node_->data; }
  T item() const {
    if (numel() != 1) throw ShapeError("item: tensor of shape " + shape_str(shape()) + " is not a scalar");
    return node_->data[0];
  }

  bool requires_grad() const { return node_->requires_grad; }
  void set_requires_grad(bool on) { node_->requires_grad = on; }
  bool has_grad() const { return !node_->grad.empty(); }
  std::span<const T> grad() const { return node_->grad; }
  std::vector<T> grad_values() const { return node_->grad; }
  std::span<T> mutable_grad() { return std::span<T>(node_->grad_buffer(), numel()); }
  void zero_grad() { node_->grad.clear(); }
  void retain_grad() { node_->retain_grad = true; }
  bool is_leaf() const { return node_->is_leaf; }
  const char* op() const { return node_->op; }

  // Copy of the values with no history.
  Tensor detach() const { return Tensor(shape(), node_->data, false); }

  template <typename U>
  Tensor<U> cast() const {
    return Tensor<U>(shape(), std::vector<U>(node_->data.begin(), node_->data.end()), false);
  }

  const std::shared_ptr<Node<T>>& node() const { return node_; }

 private:
  std::shared_ptr<Node<T>> node_;
};

namespace detail {

template <typename T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using ConstMap = Eigen::Map<const RowMat<T>>;
template <typename T>
using MutMap = Eigen::Map<RowMat<T>>;

template <typename T>
void check_finite(const char* op, const Tensor<T>& t) {
  if (!checked_mode()) return;
  for (T v : t.data()) {
    if (!std::isfinite(v)) {
      throw NumericError(std::string("op '") + op + "': non-finite input of shape " + shape_str(t.shape()));
    }
  }
}

template <typename T>
[[noreturn]] void shape_mismatch(const char* op, const Tensor<T>& a, const Tensor<T>& b) {
  throw ShapeError(std::string("op '") + op + "': incompatible shapes " + shape_str(a.shape()) + " and " +
                   shape_str(b.shape()));
}

template <typename T>
Tensor<T> make_result(const char* op, Shape shape, std::vector<T> data, std::initializer_list<Tensor<T>> inputs,
                      std::function<void(Node<T>&)> backward) {
  Tensor<T> out(std::move(shape), std::move(data), false);
  if (!grad_enabled()) return out;
  bool any = false;
  for (const auto& in : inputs) any = any || in.requires_grad();
  if (!any) return out;
  auto& node = *out.node();
  node.requires_grad = true;
  node.is_leaf = false;
  node.op = op;
  for (const auto& in : inputs) node.parents.push_back(in.node());
  node.backward_fn = std::move(backward);
  return out;
}

inline std::size_t normalize_axis(int axis, std::size_t rank, const char* op) {
  const int r = static_cast<int>(rank);
  const int a = axis < 0 ? axis + r : axis;
  if (a < 0 || a >= r) {
    throw ShapeError(std::string("op '") + op + "': axis " + std::to_string(axis) + " out of range for rank " +
                     std::to_string(rank));
  }
  return static_cast<std::size_t>(a);
}

// outer x len x inner split around one axis.
inline void split_axis(const Shape& shape, std::size_t axis, std::size_t& outer, std::size_t& len,
                       std::size_t& inner) {
  outer = 1;
  inner = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= shape[i];
  len = shape[axis];
  for (std::size_t i = axis + 1; i < shape.size(); ++i) inner *= shape[i];
}

inline bool is_suffix(const Shape& small, const Shape& big) {
  if (small.size() > big.size()) return false;
  return std::equal(small.rbegin(), small.rend(), big.rbegin());
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Backward pass
// ---------------------------------------------------------------------------

// Accumulates d(loss)/d(leaf) into every reachable leaf that requires grad.
// The graph is consumed: interior nodes drop their history afterwards.
template <typename T>
void backward(const Tensor<T>& loss) {
  if (loss.numel() != 1 || loss.rank() > 1) {
    throw ShapeError("backward: loss must be a scalar, got shape " + shape_str(loss.shape()));
  }
  if (!loss.requires_grad()) throw Error("backward: loss is not connected to any tensor requiring grad");

  std::vector<Node<T>*> order;
  std::unordered_set<Node<T>*> visited;
  std::vector<std::pair<Node<T>*, std::size_t>> stack;
  stack.emplace_back(loss.node().get(), 0);
  visited.insert(loss.node().get());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      Node<T>* parent = node->parents[next++].get();
      if (parent->requires_grad && !visited.count(parent)) {
        visited.insert(parent);
        stack.emplace_back(parent, 0);
      }
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }

  loss.node()->grad_buffer()[0] += T(1);
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node<T>* node = *it;
    if (node->backward_fn && !node->grad.empty()) node->backward_fn(*node);
  }
  for (Node<T>* node : order) {
    if (node->is_leaf) continue;
    node->backward_fn = nullptr;
    node->parents.clear();
    if (!node->retain_grad) {
      node->grad.clear();
      node->grad.shrink_to_fit();
    }
  }
}

// ---------------------------------------------------------------------------
// Shape ops
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> reshape(const Tensor<T>& x, Shape shape) {
  if (numel_of(shape) != x.numel()) {
    throw ShapeError("op 'reshape': cannot view " + shape_str(x.shape()) + " as " + shape_str(shape));
  }
  std::vector<T> data(x.data().begin(), x.data().end());
  return detail::make_result<T>("reshape", std::move(shape), std::move(data), {x}, [](Node<T>& self) {
    auto& p = *self.parents[0];
    if (!p.requires_grad) return;
    T* g = p.grad_buffer();
    for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i];
  });
}

// Swaps two axes.
template <typename T>
Tensor<T> transpose(const Tensor<T>& x, int axis0, int axis1) {
  const std::size_t r = x.rank();
  const std::size_t a0 = detail::normalize_axis(axis0, r, "transpose");
  const std::size_t a1 = detail::normalize_axis(axis1, r, "transpose");
  Shape out_shape = x.shape();
  std::swap(out_shape[a0], out_shape[a1]);
  const std::size_t lo = std::min(a0, a1), hi = std::max(a0, a1);

  // Input viewed as [outer, A, mid, B, inner]; output is [outer, B, mid, A, inner].
  auto prod = [&](std::size_t from, std::size_t to) {
    std::size_t p = 1;
    for (std::size_t i = from; i < to; ++i) p *= x.shape()[i];
    return p;
  };
  const std::size_t outer = prod(0, lo), A = x.shape()[lo], mid = prod(lo + 1, hi), B = x.shape()[hi],
                    inner = prod(hi + 1, r);
  // Calls fn(in_offset, out_offset) for every contiguous run of `inner` values.
  auto for_each_run = [=](auto&& fn) {
    for (std::size_t o = 0; o < outer; ++o)
      for (std::size_t a = 0; a < A; ++a)
        for (std::size_t m = 0; m < mid; ++m)
          for (std::size_t b = 0; b < B; ++b) {
            const std::size_t in_off = (((o * A + a) * mid + m) * B + b) * inner;
            const std::size_t out_off = (((o * B + b) * mid + m) * A + a) * inner;
            fn(in_off, out_off);
          }
  };

  std::vector<T> data(x.numel());
  const T* in = x.data().data();
  if (lo == hi) {
    std::copy(in, in + data.size(), data.begin());
  } else {
    for_each_run([&](std::size_t i, std::size_t o) { std::copy(in + i, in + i + inner, data.data() + o); });
  }
  return detail::make_result<T>("transpose", std::move(out_shape), std::move(data), {x},
                                [for_each_run, inner, same = lo == hi](Node<T>& self) {
                                  auto& p = *self.parents[0];
                                  if (!p.requires_grad) return;
                                  T* g = p.grad_buffer();
                                  const T* go = self.grad.data();
                                  if (same) {
                                    for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += go[i];
                                    return;
                                  }
                                  for_each_run([&](std::size_t i, std::size_t o) {
                                    for (std::size_t k = 0; k < inner; ++k) g[i + k] += go[o + k];
                                  });
                                });
}

template <typename T>
Tensor<T> slice(const Tensor<T>& x, int axis, std::size_t begin, std::size_t end) {
  const std::size_t a = detail::normalize_axis(axis, x.rank(), "slice");
  if (begin > end || end > x.shape()[a]) {
    throw ShapeError("op 'slice': range [" + std::to_string(begin) + "," + std::to_string(end) +
                     ") out of bounds for shape " + shape_str(x.shape()));
  }
  std::size_t outer, len, inner;
  detail::split_axis(x.shape(), a, outer, len, inner);
  Shape out_shape = x.shape();
  out_shape[a] = end - begin;
  const std::size_t width = (end - begin) * inner;
  std::vector<T> data(outer * width);
  auto in = x.data();
  for (std::size_t o = 0; o < outer; ++o) {
    std::copy_n(in.begin() + static_cast<std::ptrdiff_t>(o * len * inner + begin * inner), width,
                data.begin() + static_cast<std::ptrdiff_t>(o * width));
  }
  return detail::make_result<T>("slice", std::move(out_shape), std::move(data), {x},
                                [outer, len, inner, begin, width](Node<T>& self) {
                                  auto& p = *self.parents[0];
                                  if (!p.requires_grad) return;
                                  T* g = p.grad_buffer();
                                  for (std::size_t o = 0; o < outer; ++o) {
                                    T* dst = g + o * len * inner + begin * inner;
                                    const T* src = self.grad.data() + o * width;
                                    for (std::size_t i = 0; i < width; ++i) dst[i] += src[i];
                                  }
                                });
}

template <typename T>
Tensor<T> concat(const std::vector<Tensor<T>>& parts, int axis) {
  if (parts.empty()) throw ShapeError("op 'concat': no inputs");
  const std::size_t a = detail::normalize_axis(axis, parts[0].rank(), "concat");
  Shape out_shape = parts[0].shape();
  out_shape[a] = 0;
  for (const auto& p : parts) {
    Shape s = p.shape();
    if (s.size() != out_shape.size()) detail::shape_mismatch("concat", parts[0], p);
    for (std::size_t d = 0; d < s.size(); ++d) {
      if (d != a && s[d] != parts[0].shape()[d]) detail::shape_mismatch("concat", parts[0], p);
    }
    out_shape[a] += s[a];
    detail::check_finite("concat", p);
  }
  std::size_t outer, len, inner;
  detail::split_axis(out_shape, a, outer, len, inner);
  std::vector<T> data(numel_of(out_shape));
  std::vector<std::size_t> offsets;
  std::size_t offset = 0;
  for (const auto& p : parts) {
    offsets.push_back(offset);
    const std::size_t w = p.shape()[a] * inner;
    auto in = p.data();
    for (std::size_t o = 0; o < outer; ++o) {
      std::copy_n(in.begin() + static_cast<std::ptrdiff_t>(o * w), w,
                  data.begin() + static_cast<std::ptrdiff_t>(o * len * inner + offset * inner));
    }
    offset += p.shape()[a];
  }

  Tensor<T> out(out_shape, std::move(data));
  if (!detail::grad_enabled()) return out;
  bool any = false;
  for (const auto& p : parts) any = any || p.requires_grad();
  if (!any) return out;
  auto& node = *out.node();
  node.requires_grad = true;
  node.is_leaf = false;
  node.op = "concat";
  for (const auto& p : parts) node.parents.push_back(p.node());
  node.backward_fn = [outer, len, inner, a, offsets](Node<T>& self) {
    for (std::size_t k = 0; k < self.parents.size(); ++k) {
      auto& p = *self.parents[k];
      if (!p.requires_grad) continue;
      const std::size_t w = p.shape[a] * inner;
      T* g = p.grad_buffer();
      for (std::size_t o = 0; o < outer; ++o) {
        const T* src = self.grad.data() + o * len * inner + offsets[k] * inner;
        for (std::size_t i = 0; i < w; ++i) g[o * w + i] += src[i];
      }
    }
  };
  return out;
}

// ---------------------------------------------------------------------------
// Arithmetic
// ---------------------------------------------------------------------------

namespace detail {

// Elementwise binary op. Shapes must match, or the smaller operand's shape is
// a trailing suffix of the larger one (bias-style broadcast).
template <typename T, typename F, typename DA, typename DB>
Tensor<T> broadcast_binary(const char* op, const Tensor<T>& a, const Tensor<T>& b, F f, DA da, DB db) {
  const bool b_fits = is_suffix(b.shape(), a.shape());
  if (!b_fits && !is_suffix(a.shape(), b.shape())) shape_mismatch(op, a, b);
  check_finite(op, a);
  check_finite(op, b);
  const Shape& out_shape = b_fits ? a.shape() : b.shape();
  const std::size_t n = numel_of(out_shape);
  const std::size_t am = a.numel();
  const std::size_t bm = b.numel();
  // One operand spans the output; the other repeats with period am or bm.
  std::vector<T> data(n);
  auto av = a.data();
  auto bv = b.data();
  if (am == n && bm == n) {
    for (std::size_t i = 0; i < n; ++i) data[i] = f(av[i], bv[i]);
  } else if (am == n) {
    for (std::size_t o = 0; o < n; o += bm) {
      for (std::size_t j = 0; j < bm; ++j) data[o + j] = f(av[o + j], bv[j]);
    }
  } else {
    for (std::size_t o = 0; o < n; o += am) {
      for (std::size_t j = 0; j < am; ++j) data[o + j] = f(av[j], bv[o + j]);
    }
  }
  return make_result<T>(op, out_shape, std::move(data), {a, b}, [n, am, bm, da, db](Node<T>& self) {
    auto& pa = *self.parents[0];
    auto& pb = *self.parents[1];
    const T* g = self.grad.data();
    const T* xa = pa.data.data();
    const T* xb = pb.data.data();
    if (pa.requires_grad) {
      T* ga = pa.grad_buffer();
      for (std::size_t o = 0; o < n; o += std::min(am, bm)) {
        const std::size_t w = std::min(am, bm);
        const std::size_t oa = am == n ? o : 0, ob = bm == n ? o : 0;
        for (std::size_t j = 0; j < w; ++j) ga[oa + j] += g[o + j] * da(xa[oa + j], xb[ob + j]);
      }
    }
    if (pb.requires_grad) {
      T* gb = pb.grad_buffer();
      for (std::size_t o = 0; o < n; o += std::min(am, bm)) {
        const std::size_t w = std::min(am, bm);
        const std::size_t oa = am == n ? o : 0, ob = bm == n ? o : 0;
        for (std::size_t j = 0; j < w; ++j) gb[ob + j] += g[o + j] * db(xa[oa + j], xb[ob + j]);
      }
    }
  });
}

template <typename T, typename F, typename D>
Tensor<T> unary(const char* op, const Tensor<T>& x, F f, D dfdx) {
  check_finite(op, x);
  std::vector<T> data(x.numel());
  auto in = x.data();
  for (std::size_t i = 0; i < data.size(); ++i) data[i] = f(in[i]);
  return make_result<T>(op, x.shape(), std::move(data), {x}, [dfdx](Node<T>& self) {
    auto& p = *self.parents[0];
    if (!p.requires_grad) return;
    T* g = p.grad_buffer();
    for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i] * dfdx(p.data[i], self.data[i]);
  });
}

}  // namespace detail

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  return detail::broadcast_binary<T>(
      "add", a, b, [](T x, T y) { return x + y; }, [](T, T) { return T(1); }, [](T, T) { return T(1); });
}

template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  return detail::broadcast_binary<T>(
      "sub", a, b, [](T x, T y) { return x - y; }, [](T, T) { return T(1); }, [](T, T) { return T(-1); });
}

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  return detail::broadcast_binary<T>(
      "mul", a, b, [](T x, T y) { return x * y; }, [](T, T y) { return y; }, [](T x, T) { return x; });
}

template <typename T>
Tensor<T> scale(const Tensor<T>& x, T s) {
  return detail::unary<T>("scale", x, [s](T v) { return v * s; }, [s](T, T) { return s; });
}

template <typename T>
Tensor<T> sigmoid(const Tensor<T>& x) {
  return detail::unary<T>(
      "sigmoid", x, [](T v) { return T(1) / (T(1) + std::exp(-v)); }, [](T, T y) { return y * (T(1) - y); });
}

template <typename T>
Tensor<T> relu(const Tensor<T>& x) {
  return detail::unary<T>(
      "relu", x, [](T v) { return v > T(0) ? v : T(0); }, [](T v, T) { return v > T(0) ? T(1) : T(0); });
}

// tanh approximation of GELU.
template <typename T>
Tensor<T> gelu(const Tensor<T>& x) {
  using Arr = Eigen::Array<T, Eigen::Dynamic, 1>;
  static constexpr T kC = T(0.7978845608028654);  // sqrt(2/pi)
  static constexpr T kA = T(0.044715);
  detail::check_finite("gelu", x);
  const auto n = static_cast<Eigen::Index>(x.numel());
  Eigen::Map<const Arr> v(x.data().data(), n);
  Arr t = (kC * (v + kA * v.cube())).tanh();
  std::vector<T> data(x.numel());
  Eigen::Map<Arr>(data.data(), n) = T(0.5) * v * (T(1) + t);
  return detail::make_result<T>("gelu", x.shape(), std::move(data), {x}, [t = std::move(t), n](Node<T>& self) {
    auto& p = *self.parents[0];
    if (!p.requires_grad) return;
    Eigen::Map<Arr> g(p.grad_buffer(), n);
    Eigen::Map<const Arr> go(self.grad.data(), n), v(p.data.data(), n);
    g += go * (T(0.5) * (T(1) + t) + T(0.5) * v * (T(1) - t.square()) * kC * (T(1) + T(3) * kA * v.square()));
  });
}

template <typename T>
Tensor<T> sum(const Tensor<T>& x) {
  detail::check_finite("sum", x);
  T total = T(0);
  for (T v : x.data()) total += v;
  return detail::make_result<T>("sum", Shape{}, {total}, {x}, [](Node<T>& self) {
    auto& p = *self.parents[0];
    if (!p.requires_grad) return;
    T* g = p.grad_buffer();
    for (std::size_t i = 0; i < p.data.size(); ++i) g[i] += self.grad[0];
  });
}

template <typename T>
Tensor<T> mean(const Tensor<T>& x) {
  return scale(sum(x), T(1) / static_cast<T>(x.numel()));
}

// a: [..., m, k]; b: [k, n] (shared across the leading axes) or [..., k, n]
// with the same leading axes as a.
template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  using detail::ConstMap;
  using detail::MutMap;
  if (a.rank() < 2 || b.rank() < 2) detail::shape_mismatch("matmul", a, b);
  const std::size_t k = a.dim(-1);
  const std::size_t m = a.dim(-2);
  if (b.dim(-2) != k) detail::shape_mismatch("matmul", a, b);
  const std::size_t n = b.dim(-1);
  const bool shared_rhs = b.rank() == 2;
  if (!shared_rhs) {
    if (b.rank() != a.rank() || !std::equal(a.shape().begin(), a.shape().end() - 2, b.shape().begin())) {
      detail::shape_mismatch("matmul", a, b);
    }
  }
  detail::check_finite("matmul", a);
  detail::check_finite("matmul", b);
  Shape out_shape = a.shape();
  out_shape.back() = n;
  std::vector<T> data(numel_of(out_shape));
  const std::size_t batches = a.numel() / (m * k);
  const auto ad = Eigen::Index(k);
  if (shared_rhs) {
    const std::size_t rows = batches * m;
    MutMap<T>(data.data(), Eigen::Index(rows), Eigen::Index(n)).noalias() =
        ConstMap<T>(a.data().data(), Eigen::Index(rows), ad) * ConstMap<T>(b.data().data(), ad, Eigen::Index(n));
  } else {
    for (std::size_t bi = 0; bi < batches; ++bi) {
      MutMap<T>(data.data() + bi * m * n, Eigen::Index(m), Eigen::Index(n)).noalias() =
          ConstMap<T>(a.data().data() + bi * m * k, Eigen::Index(m), ad) *
          ConstMap<T>(b.data().data() + bi * k * n, ad, Eigen::Index(n));
    }
  }
  return detail::make_result<T>(
      "matmul", std::move(out_shape), std::move(data), {a, b}, [m, k, n, batches, shared_rhs](Node<T>& self) {
        auto& pa = *self.parents[0];
        auto& pb = *self.parents[1];
        const auto M = Eigen::Index(m), K = Eigen::Index(k), N = Eigen::Index(n);
        if (shared_rhs) {
          const auto rows = Eigen::Index(batches * m);
          ConstMap<T> g(self.grad.data(), rows, N);
          if (pa.requires_grad) {
            MutMap<T>(pa.grad_buffer(), rows, K).noalias() += g * ConstMap<T>(pb.data.data(), K, N).transpose();
          }
          if (pb.requires_grad) {
            MutMap<T>(pb.grad_buffer(), K, N).noalias() += ConstMap<T>(pa.data.data(), rows, K).transpose() * g;
          }
          return;
        }
        for (std::size_t bi = 0; bi < batches; ++bi) {
          ConstMap<T> g(self.grad.data() + bi * m * n, M, N);
          if (pa.requires_grad) {
            MutMap<T>(pa.grad_buffer() + bi * m * k, M, K).noalias() +=
                g * ConstMap<T>(pb.data.data() + bi * k * n, K, N).transpose();
          }
          if (pb.requires_grad) {
            MutMap<T>(pb.grad_buffer() + bi * k * n, K, N).noalias() +=
                ConstMap<T>(pa.data.data() + bi * m * k, M, K).transpose() * g;
          }
        }
      });
}

// x @ weight + bias, weight [in, out], bias [out].
template <typename T>
Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>& bias) {
  return add(matmul(x, weight), bias);
}

// ---------------------------------------------------------------------------
// Normalization and softmax family
// ---------------------------------------------------------------------------

// Normalizes over the last axis; gamma and beta have shape [d].
template <typename T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta, T eps = T(1e-5)) {
  const std::size_t d = x.dim(-1);
  if (gamma.shape() != Shape{d}) detail::shape_mismatch("layer_norm", x, gamma);
  if (beta.shape() != Shape{d}) detail::shape_mismatch("layer_norm", x, beta);
  detail::check_finite("layer_norm", x);
  const std::size_t rows = x.numel() / d;
  std::vector<T> data(x.numel());
  std::vector<T> xhat(x.numel());
  std::vector<T> rstd(rows);
  auto in = x.data();
  auto g = gamma.data();
  auto b = beta.data();
  for (std::size_t r = 0; r < rows; ++r) {
    const T* row = in.data() + r * d;
    T mu = T(0);
    for (std::size_t i = 0; i < d; ++i) mu += row[i];
    mu /= static_cast<T>(d);
    T var = T(0);
    for (std::size_t i = 0; i < d; ++i) var += (row[i] - mu) * (row[i] - mu);
    var /= static_cast<T>(d);
    const T rs = T(1) / std::sqrt(var + eps);
    rstd[r] = rs;
    for (std::size_t i = 0; i < d; ++i) {
      const T h = (row[i] - mu) * rs;
      xhat[r * d + i] = h;
      data[r * d + i] = h * g[i] + b[i];
    }
  }
  return detail::make_result<T>(
      "layer_norm", x.shape(), std::move(data), {x, gamma, beta},
      [d, rows, xhat = std::move(xhat), rstd = std::move(rstd)](Node<T>& self) {
        auto& px = *self.parents[0];
        auto& pg = *self.parents[1];
        auto& pb = *self.parents[2];
        const T* dy = self.grad.data();
        if (pg.requires_grad || pb.requires_grad) {
          T* dg = pg.requires_grad ? pg.grad_buffer() : nullptr;
          T* db = pb.requires_grad ? pb.grad_buffer() : nullptr;
          for (std::size_t r = 0; r < rows; ++r) {
            for (std::size_t i = 0; i < d; ++i) {
              if (dg) dg[i] += dy[r * d + i] * xhat[r * d + i];
              if (db) db[i] += dy[r * d + i];
            }
          }
        }
        if (!px.requires_grad) return;
        T* dx = px.grad_buffer();
        const T* gam = pg.data.data();
        const T inv_d = T(1) / static_cast<T>(d);
        for (std::size_t r = 0; r < rows; ++r) {
          T mean_dh = T(0), mean_dh_h = T(0);
          for (std::size_t i = 0; i < d; ++i) {
            const T dh = dy[r * d + i] * gam[i];
            mean_dh += dh;
            mean_dh_h += dh * xhat[r * d + i];
          }
          mean_dh *= inv_d;
          mean_dh_h *= inv_d;
          for (std::size_t i = 0; i < d; ++i) {
            const T dh = dy[r * d + i] * gam[i];
            dx[r * d + i] += rstd[r] * (dh - mean_dh - xhat[r * d + i] * mean_dh_h);
          }
        }
      });
}

template <typename T>
Tensor<T> softmax(const Tensor<T>& x, int axis = -1) {
  const std::size_t a = detail::normalize_axis(axis, x.rank(), "softmax");
  detail::check_finite("softmax", x);
  std::size_t outer, len, inner;
  detail::split_axis(x.shape(), a, outer, len, inner);
  std::vector<T> data(x.numel());
  auto in = x.data();
  for (std::size_t o = 0; o < outer; ++o) {
    for (std::size_t j = 0; j < inner; ++j) {
      const std::size_t base = o * len * inner + j;
      T mx = in[base];
      for (std::size_t i = 1; i < len; ++i) mx = std::max(mx, in[base + i * inner]);
      T total = T(0);
      for (std::size_t i = 0; i < len; ++i) {
        const T e = std::exp(in[base + i * inner] - mx);
        data[base + i * inner] = e;
        total += e;
      }
      for (std::size_t i = 0; i < len; ++i) data[base + i * inner] /= total;
    }
  }
  return detail::make_result<T>("softmax", x.shape(), std::move(data), {x}, [outer, len, inner](Node<T>& self) {
    auto& p = *self.parents[0];
    if (!p.requires_grad) return;
    T* g = p.grad_buffer();
    const T* y = self.data.data();
    const T* dy = self.grad.data();
    for (std::size_t o = 0; o < outer; ++o) {
      for (std::size_t j = 0; j < inner; ++j) {
        const std::size_t base = o * len * inner + j;
        T dot = T(0);
        for (std::size_t i = 0; i < len; ++i) dot += dy[base + i * inner] * y[base + i * inner];
        for (std::size_t i = 0; i < len; ++i) {
          const std::size_t idx = base + i * inner;
          g[idx] += y[idx] * (dy[idx] - dot);
        }
      }
    }
  });
}

template <typename T>
Tensor<T> log_softmax(const Tensor<T>& x, int axis = -1) {
  const std::size_t a = detail::normalize_axis(axis, x.rank(), "log_softmax");
  detail::check_finite("log_softmax", x);
  std::size_t outer, len, inner;
  detail::split_axis(x.shape(), a, outer, len, inner);
  std::vector<T> data(x.numel());
  auto in = x.data();
  for (std::size_t o = 0; o < outer; ++o) {
    for (std::size_t j = 0; j < inner; ++j) {
      const std::size_t base = o * len * inner + j;
      T mx = in[base];
      for (std::size_t i = 1; i < len; ++i) mx = std::max(mx, in[base + i * inner]);
      T total = T(0);
      for (std::size_t i = 0; i < len; ++i) total += std::exp(in[base + i * inner] - mx);
      const T lse = mx + std::log(total);
      for (std::size_t i = 0; i < len; ++i) data[base + i * inner] = in[base + i * inner] - lse;
    }
  }
  return detail::make_result<T>("log_softmax", x.shape(), std::move(data), {x}, [outer, len, inner](Node<T>& self) {
    auto& p = *self.parents[0];
    if (!p.requires_grad) return;
    T* g = p.grad_buffer();
    const T* y = self.data.data();
    const T* dy = self.grad.data();
    for (std::size_t o = 0; o < outer; ++o) {
      for (std::size_t j = 0; j < inner; ++j) {
        const std::size_t base = o * len * inner + j;
        T total = T(0);
        for (std::size_t i = 0; i < len; ++i) total += dy[base + i * inner];
        for (std::size_t i = 0; i < len; ++i) {
          const std::size_t idx = base + i * inner;
          g[idx] += dy[idx] - std::exp(y[idx]) * total;
        }
      }
    }
  });
}

// ---------------------------------------------------------------------------
// Indexing, masking, regularization
// ---------------------------------------------------------------------------

// Gathers rows of table [V, d] for every id; output shape is lead + [d].
template <typename T>
Tensor<T> embedding(const Tensor<T>& table, std::span<const TokenId> ids, Shape lead) {
  if (table.rank() != 2) throw ShapeError("op 'embedding': table must be rank 2, got " + shape_str(table.shape()));
  if (numel_of(lead) != ids.size()) {
    throw ShapeError("op 'embedding': " + std::to_string(ids.size()) + " ids do not fill shape " + shape_str(lead));
  }
  const std::size_t vocab = table.dim(0);
  const std::size_t d = table.dim(1);
  std::vector<T> data(ids.size() * d);
  auto tv = table.data();
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] < 0 || static_cast<std::size_t>(ids[i]) >= vocab) {
      throw ShapeError("op 'embedding': id " + std::to_string(ids[i]) + " outside table of " +
                       std::to_string(vocab) + " rows");
    }
    std::copy_n(tv.begin() + static_cast<std::ptrdiff_t>(static_cast<std::size_t>(ids[i]) * d), d,
                data.begin() + static_cast<std::ptrdiff_t>(i * d));
  }
  lead.push_back(d);
  std::vector<TokenId> saved(ids.begin(), ids.end());
  return detail::make_result<T>("embedding", std::move(lead), std::move(data), {table},
                                [d, saved = std::move(saved)](Node<T>& self) {
                                  auto& p = *self.parents[0];
                                  if (!p.requires_grad) return;
                                  T* g = p.grad_buffer();
                                  for (std::size_t i = 0; i < saved.size(); ++i) {
                                    T* row = g + static_cast<std::size_t>(saved[i]) * d;
                                    const T* src = self.grad.data() + i * d;
                                    for (std::size_t j = 0; j < d; ++j) row[j] += src[j];
                                  }
                                });
}

// Positions where mask is nonzero take `value` and pass no gradient.
template <typename T>
Tensor<T> masked_fill(const Tensor<T>& x, std::span<const std::uint8_t> mask, T value) {
  if (mask.size() != x.numel()) {
    throw ShapeError("op 'masked_fill': mask of " + std::to_string(mask.size()) + " entries vs tensor " +
                     shape_str(x.shape()));
  }
  detail::check_finite("masked_fill", x);
  std::vector<T> data(x.data().begin(), x.data().end());
  for (std::size_t i = 0; i < data.size(); ++i) {
    if (mask[i]) data[i] = value;
  }
  std::vector<std::uint8_t> saved(mask.begin(), mask.end());
  return detail::make_result<T>("masked_fill", x.shape(), std::move(data), {x},
                                [saved = std::move(saved)](Node<T>& self) {
                                  auto& p = *self.parents[0];
                                  if (!p.requires_grad) return;
                                  T* g = p.grad_buffer();
                                  for (std::size_t i = 0; i < saved.size(); ++i) {
                                    if (!saved[i]) g[i] += self.grad[i];
                                  }
                                });
}

// Inverted dropout; identity when rate is 0 or training is off.
template <typename T>
Tensor<T> dropout(const Tensor<T>& x, double rate, Rng& rng, bool training = true) {
  if (!training || rate <= 0.0) return x;
  if (rate >= 1.0) throw ConfigError("dropout: rate must be below 1");
  const T keep_scale = static_cast<T>(1.0 / (1.0 - rate));
  std::vector<T> factor(x.numel());
  for (auto& f : factor) f = rng.uniform() >= rate ? keep_scale : T(0);
  std::vector<T> data(x.numel());
  auto in = x.data();
  for (std::size_t i = 0; i < data.size(); ++i) data[i] = in[i] * factor[i];
  return detail::make_result<T>("dropout", x.shape(), std::move(data), {x},
                                [factor = std::move(factor)](Node<T>& self) {
                                  auto& p = *self.parents[0];
                                  if (!p.requires_grad) return;
                                  T* g = p.grad_buffer();
                                  for (std::size_t i = 0; i < factor.size(); ++i) g[i] += self.grad[i] * factor[i];
                                });
}

// ---------------------------------------------------------------------------
// Losses
// ---------------------------------------------------------------------------

// Token-mean cross-entropy over rows of logits [..., V]. Rows whose target
// equals ignore_index are skipped. With smoothing e the per-row loss is
// (1 - e) * nll(target) + e * mean_v nll(v).
template <typename T>
Tensor<T> cross_entropy(const Tensor<T>& logits, std::span<const TokenId> targets, double smoothing = 0.0,
                        TokenId ignore_index = -1) {
  const std::size_t vocab = logits.dim(-1);
  const std::size_t rows = logits.numel() / vocab;
  if (targets.size() != rows) {
    throw ShapeError("op 'cross_entropy': " + std::to_string(targets.size()) + " targets for logits " +
                     shape_str(logits.shape()));
  }
  if (smoothing < 0.0 || smoothing >= 1.0) throw ConfigError("cross_entropy: smoothing must lie in [0, 1)");
  detail::check_finite("cross_entropy", logits);
  std::size_t count = 0;
  for (TokenId t : targets) {
    if (t == ignore_index) continue;
    if (t < 0 || static_cast<std::size_t>(t) >= vocab) {
      throw ShapeError("op 'cross_entropy': target " + std::to_string(t) + " outside vocab " + std::to_string(vocab));
    }
    ++count;
  }
  if (count == 0) throw NumericError("cross_entropy: every position is ignored");

  const T eps = static_cast<T>(smoothing);
  auto x = logits.data();
  std::vector<T> probs(logits.numel());
  double total = 0.0;
  for (std::size_t r = 0; r < rows; ++r) {
    if (targets[r] == ignore_index) continue;
    const T* row = x.data() + r * vocab;
    T mx = row[0];
    for (std::size_t v = 1; v < vocab; ++v) mx = std::max(mx, row[v]);
    T z = T(0);
    for (std::size_t v = 0; v < vocab; ++v) z += std::exp(row[v] - mx);
    const T lse = mx + std::log(z);
    T mean_logit = T(0);
    for (std::size_t v = 0; v < vocab; ++v) {
      probs[r * vocab + v] = std::exp(row[v] - lse);
      mean_logit += row[v];
    }
    mean_logit /= static_cast<T>(vocab);
    const T nll = lse - row[static_cast<std::size_t>(targets[r])];
    total += static_cast<double>((T(1) - eps) * nll + eps * (lse - mean_logit));
  }
  const T loss = static_cast<T>(total / static_cast<double>(count));
  std::vector<TokenId> saved(targets.begin(), targets.end());
  return detail::make_result<T>(
      "cross_entropy", Shape{}, {loss}, {logits},
      [vocab, rows, count, eps, ignore_index, saved = std::move(saved), probs = std::move(probs)](Node<T>& self) {
        auto& p = *self.parents[0];
        if (!p.requires_grad) return;
        T* g = p.grad_buffer();
        const T scale = self.grad[0] / static_cast<T>(count);
        const T uniform = eps / static_cast<T>(vocab);
        for (std::size_t r = 0; r < rows; ++r) {
          if (saved[r] == ignore_index) continue;
          for (std::size_t v = 0; v < vocab; ++v) {
            T target = uniform;
            if (static_cast<std::size_t>(saved[r]) == v) target += T(1) - eps;
            g[r * vocab + v] += scale * (probs[r * vocab + v] - target);
          }
        }
      });
}

inline constexpr double kProbabilityClamp = 1e-7;

// Mean binary cross-entropy over masked-in entries; labels are 1 for the
// positive class. Probabilities are clamped to [1e-7, 1 - 1e-7]; clamped
// entries pass no gradient. An empty mask yields a zero loss.
template <typename T>
Tensor<T> binary_cross_entropy(const Tensor<T>& probs, std::span<const std::uint8_t> labels,
                               std::span<const std::uint8_t> mask) {
  if (labels.size() != probs.numel() || mask.size() != probs.numel()) {
    throw ShapeError("op 'binary_cross_entropy': labels/mask of " + std::to_string(labels.size()) + "/" +
                     std::to_string(mask.size()) + " entries vs probabilities " + shape_str(probs.shape()));
  }
  detail::check_finite("binary_cross_entropy", probs);
  const T lo = static_cast<T>(kProbabilityClamp);
  const T hi = T(1) - lo;
  std::size_t count = 0;
  double total = 0.0;
  auto pv = probs.data();
  for (std::size_t i = 0; i < pv.size(); ++i) {
    if (!mask[i]) continue;
    ++count;
    const T p = std::clamp(pv[i], lo, hi);
    total -= labels[i] ? std::log(static_cast<double>(p)) : std::log1p(-static_cast<double>(p));
  }
  const T loss = count ? static_cast<T>(total / static_cast<double>(count)) : T(0);
  std::vector<std::uint8_t> saved_labels(labels.begin(), labels.end());
  std::vector<std::uint8_t> saved_mask(mask.begin(), mask.end());
  return detail::make_result<T>(
      "binary_cross_entropy", Shape{}, {loss}, {probs},
      [count, lo, hi, saved_labels = std::move(saved_labels), saved_mask = std::move(saved_mask)](Node<T>& self) {
        auto& p = *self.parents[0];
        if (!p.requires_grad || count == 0) return;
        T* g = p.grad_buffer();
        const T scale = self.grad[0] / static_cast<T>(count);
        for (std::size_t i = 0; i < saved_mask.size(); ++i) {
          if (!saved_mask[i]) continue;
          const T v = p.data[i];
          if (v < lo || v > hi) continue;
          g[i] += scale * (saved_labels[i] ? -T(1) / v : T(1) / (T(1) - v));
        }
      });
}

// ---------------------------------------------------------------------------
// Finite-difference gradient check
// ---------------------------------------------------------------------------

// Compares the analytic gradient of fn at `point` with central differences.
// Returns max_i |analytic - numeric| / max(1, |analytic|, |numeric|). fn may
// close over other tensors; `point` is perturbed in place and restored.
template <typename T>
T grad_check(const std::function<Tensor<T>(const Tensor<T>&)>& fn, Tensor<T> point, T eps) {
  const bool had_flag = point.requires_grad();
  point.set_requires_grad(true);
  point.zero_grad();

  Tensor<T> loss = fn(point);
  T repeat;
  {
    NoGradGuard no_grad;
    repeat = fn(point).item();
  }
  if (loss.item() != repeat) {
    point.set_requires_grad(had_flag);
    throw NumericError("grad_check: function is not deterministic at the probe point");
  }
  std::vector<T> analytic(point.numel(), T(0));
  if (loss.requires_grad()) {
    backward(loss);
    if (point.has_grad()) analytic.assign(point.grad().begin(), point.grad().end());
  }

  NoGradGuard no_grad;
  T worst = T(0);
  auto values = point.data();
  for (std::size_t i = 0; i < values.size(); ++i) {
    const T saved = values[i];
    values[i] = saved + eps;
    const T plus = fn(point).item();
    values[i] = saved - eps;
    const T minus = fn(point).item();
    values[i] = saved;
    const T numeric = (plus - minus) / (T(2) * eps);
    const T denom = std::max({T(1), std::abs(analytic[i]), std::abs(numeric)});
    worst = std::max(worst, std::abs(analytic[i] - numeric) / denom);
  }
  point.zero_grad();
  point.set_requires_grad(had_flag);
  return worst;
}

}  // namespace ganlm
