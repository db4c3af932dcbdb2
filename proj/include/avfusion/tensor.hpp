#pragma once

// Dense tensors with a reverse-mode gradient tape.
//
// Layout is row-major and channels-first everywhere. Audio feature maps keep
// time on the last axis. The only implicit broadcast is rank-0 with tensor;
// every other shape mix is a ShapeError.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <initializer_list>
#include <limits>
#include <map>
#include <memory>
#include <numeric>
#include <optional>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "avfusion/blas.hpp"

namespace avf {

using Shape = std::vector<std::size_t>;
using NodeId = std::size_t;

class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

class TapeError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

enum class Op : std::uint8_t {
  Leaf,
  Add,
  Sub,
  Mul,
  Scale,
  AddScalar,
  AddBias,
  Matmul,
  Conv1d,
  Conv2d,
  Conv3d,
  ConvTranspose1d,
  Gelu,
  Softmax,
  LayerNorm,
  GroupNorm,
  MeanAxis,
  Reshape,
  Transpose,
  SliceLast,
  PadEdge,
  Sum,
  Mean,
  L1Loss,
  CrossEntropy,
};

inline std::string_view op_name(Op op) {
  switch (op) {
    case Op::Leaf: return "leaf";
    case Op::Add: return "add";
    case Op::Sub: return "sub";
    case Op::Mul: return "mul";
    case Op::Scale: return "scale";
    case Op::AddScalar: return "add_scalar";
    case Op::AddBias: return "add_bias";
    case Op::Matmul: return "matmul";
    case Op::Conv1d: return "conv1d";
    case Op::Conv2d: return "conv2d";
    case Op::Conv3d: return "conv3d";
    case Op::ConvTranspose1d: return "conv_transpose1d";
    case Op::Gelu: return "gelu";
    case Op::Softmax: return "softmax";
    case Op::LayerNorm: return "layer_norm";
    case Op::GroupNorm: return "group_norm";
    case Op::MeanAxis: return "mean_axis";
    case Op::Reshape: return "reshape";
    case Op::Transpose: return "transpose";
    case Op::SliceLast: return "slice_last";
    case Op::PadEdge: return "pad_edge";
    case Op::Sum: return "sum";
    case Op::Mean: return "mean";
    case Op::L1Loss: return "l1_loss";
    case Op::CrossEntropy: return "cross_entropy";
  }
  return "unknown";
}

inline std::size_t numel(const Shape& s) {
  return std::accumulate(s.begin(), s.end(), std::size_t{1}, std::multiplies<>());
}

inline std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << '(';
  for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
  os << ')';
  return os.str();
}

[[noreturn]] inline void shape_fail(Op op, std::string_view what) {
  throw ShapeError(std::string(op_name(op)) + ": " + std::string(what));
}

inline void shape_require(bool ok, Op op, std::string_view expected, const Shape& actual) {
  if (!ok) shape_fail(op, "expected " + std::string(expected) + ", got " + shape_str(actual));
}

template <class T>
class Tape;

/// Handle to a shared buffer of scalars. Copies alias the same storage;
/// use clone() for an independent copy.
template <class T>
class Tensor {
 public:
  using value_type = T;

  Tensor() : data_(std::make_shared<std::vector<T>>()) {}

  explicit Tensor(Shape shape, T fill = T{0})
      : shape_(std::move(shape)), data_(std::make_shared<std::vector<T>>(numel(shape_), fill)) {}

  Tensor(Shape shape, std::vector<T> values)
      : shape_(std::move(shape)), data_(std::make_shared<std::vector<T>>(std::move(values))) {
    if (numel(shape_) != data_->size()) {
      throw ShapeError("tensor: shape " + shape_str(shape_) + " holds " +
                       std::to_string(numel(shape_)) + " values, got " +
                       std::to_string(data_->size()));
    }
  }

  static Tensor scalar(T v) { return Tensor(Shape{}, std::vector<T>{v}); }

  const Shape& shape() const noexcept { return shape_; }
  std::size_t rank() const noexcept { return shape_.size(); }
  std::size_t dim(std::size_t i) const { return shape_.at(i); }
  std::size_t size() const noexcept { return data_->size(); }
  bool empty() const noexcept { return data_->empty(); }

  std::span<const T> data() const noexcept { return {data_->data(), data_->size()}; }
  /// Writes are visible through every handle sharing this buffer.
  std::span<T> mutable_data() noexcept { return {data_->data(), data_->size()}; }
  const T* ptr() const noexcept { return data_->data(); }
  T operator[](std::size_t i) const { return (*data_)[i]; }

  T item() const {
    if (size() != 1) throw ShapeError("item: tensor of shape " + shape_str(shape_) + " is not a scalar");
    return (*data_)[0];
  }

  bool requires_grad() const noexcept { return node_.has_value(); }
  std::optional<NodeId> node_id() const noexcept { return node_; }
  Tape<T>* tape() const noexcept { return tape_; }

  Tensor detach() const {
    Tensor t;
    t.shape_ = shape_;
    t.data_ = data_;
    return t;
  }

  Tensor clone() const { return Tensor(shape_, *data_); }

  bool same_values(const Tensor& o) const { return shape_ == o.shape_ && *data_ == *o.data_; }

 private:
  friend class Tape<T>;
  Shape shape_;
  std::shared_ptr<std::vector<T>> data_;
  std::optional<NodeId> node_;
  Tape<T>* tape_ = nullptr;
};

template <class T>
class Gradients {
 public:
  const Tensor<T>* find(NodeId id) const {
    auto it = grads_.find(id);
    return it == grads_.end() ? nullptr : &it->second;
  }

  const Tensor<T>& of(const Tensor<T>& leaf) const {
    if (!leaf.node_id()) throw TapeError("gradient requested for a tensor that is not on a tape");
    const Tensor<T>* g = find(*leaf.node_id());
    if (!g) throw TapeError("no gradient recorded for node " + std::to_string(*leaf.node_id()));
    return *g;
  }

  std::size_t size() const noexcept { return grads_.size(); }
  const std::map<NodeId, Tensor<T>>& all() const noexcept { return grads_; }

 private:
  friend class Tape<T>;
  std::map<NodeId, Tensor<T>> grads_;
};

/// Ordered record of primitive applications. One forward+backward pass owns a
/// tape; tensors on it hold a raw pointer back, so the tape must outlive them.
template <class T>
class Tape {
 public:
  /// Receives d(loss)/d(output) and accumulates into each input's gradient
  /// buffer. Buffers for inputs that are not on the tape are null.
  using BackwardFn = std::function<void(std::span<const T> grad_out, std::span<std::vector<T>* const> grad_in)>;

  struct Entry {
    Op kind;
    std::vector<std::optional<NodeId>> inputs;
    NodeId output;
    BackwardFn backward;
  };

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  /// Registers a gradient-accumulating leaf that aliases `value`'s storage.
  Tensor<T> leaf(const Tensor<T>& value) {
    if (value.tape_) throw TapeError("leaf: tensor already belongs to a tape");
    Tensor<T> t = value.detach();
    t.node_ = new_node(t.shape(), true);
    t.tape_ = this;
    return t;
  }

  Tensor<T> record(Op kind, std::initializer_list<const Tensor<T>*> inputs, Tensor<T> out, BackwardFn fn) {
    Entry e{kind, {}, 0, std::move(fn)};
    e.inputs.reserve(inputs.size());
    for (const Tensor<T>* in : inputs) {
      if (in && in->tape_ && in->tape_ != this) throw TapeError("inputs belong to different tapes");
      e.inputs.push_back(in && in->tape_ == this ? in->node_ : std::nullopt);
    }
    out.node_ = new_node(out.shape(), false);
    out.tape_ = this;
    e.output = *out.node_;
    entries_.push_back(std::move(e));
    return out;
  }

  Gradients<T> backward(const Tensor<T>& loss) {
    if (loss.tape_ != this || !loss.node_) throw TapeError("backward: loss is not recorded on this tape");
    if (loss.size() != 1) throw TapeError("backward: loss must be scalar, got shape " + shape_str(loss.shape()));

    std::vector<std::vector<T>> grads(shapes_.size());
    grads[*loss.node_].assign(1, T{1});
    std::vector<std::vector<T>*> sinks;
    for (auto it = entries_.rbegin(); it != entries_.rend(); ++it) {
      std::vector<T>& gout = grads[it->output];
      if (gout.empty()) continue;
      sinks.assign(it->inputs.size(), nullptr);
      for (std::size_t i = 0; i < it->inputs.size(); ++i) {
        if (!it->inputs[i]) continue;
        std::vector<T>& g = grads[*it->inputs[i]];
        if (g.empty()) g.assign(numel(shapes_[*it->inputs[i]]), T{0});
        sinks[i] = &g;
      }
      it->backward(std::span<const T>(gout), std::span<std::vector<T>* const>(sinks));
      std::vector<T>().swap(gout);
    }

    Gradients<T> out;
    for (NodeId id = 0; id < shapes_.size(); ++id) {
      if (is_leaf_[id] && !grads[id].empty()) out.grads_.emplace(id, Tensor<T>(shapes_[id], std::move(grads[id])));
    }
    return out;
  }

  const std::vector<Entry>& entries() const noexcept { return entries_; }
  std::size_t node_count() const noexcept { return shapes_.size(); }
  bool is_leaf(NodeId id) const { return is_leaf_.at(id); }

 private:
  NodeId new_node(const Shape& s, bool leaf) {
    shapes_.push_back(s);
    is_leaf_.push_back(leaf);
    return shapes_.size() - 1;
  }

  std::vector<Shape> shapes_;
  std::vector<bool> is_leaf_;
  std::vector<Entry> entries_;
};

namespace detail {

template <class T>
Tape<T>* tape_of(std::initializer_list<const Tensor<T>*> ins) {
  Tape<T>* tape = nullptr;
  for (const Tensor<T>* t : ins) {
    if (!t || !t->tape()) continue;
    if (tape && tape != t->tape()) throw TapeError("inputs belong to different tapes");
    tape = t->tape();
  }
  return tape;
}

template <class T>
Tensor<T> finish(Op kind, std::initializer_list<const Tensor<T>*> ins, Tensor<T> out,
                 typename Tape<T>::BackwardFn fn) {
  Tape<T>* tape = tape_of<T>(ins);
  if (!tape) return out;
  return tape->record(kind, ins, std::move(out), std::move(fn));
}

inline bool is_rank0(const Shape& s) { return s.empty(); }

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise

template <class T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  const bool sa = detail::is_rank0(a.shape()) && !detail::is_rank0(b.shape());
  const bool sb = detail::is_rank0(b.shape()) && !detail::is_rank0(a.shape());
  if (!sa && !sb && a.shape() != b.shape())
    shape_fail(Op::Add, "shapes " + shape_str(a.shape()) + " and " + shape_str(b.shape()) + " differ");
  const Shape& shape = sa ? b.shape() : a.shape();
  Tensor<T> out(shape);
  auto o = out.mutable_data();
  auto x = a.data(), y = b.data();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] = x[sa ? 0 : i] + y[sb ? 0 : i];
  return detail::finish<T>(Op::Add, {&a, &b}, out, [sa, sb](std::span<const T> g, std::span<std::vector<T>* const> gi) {
    for (int k = 0; k < 2; ++k) {
      if (!gi[k]) continue;
      auto& d = *gi[k];
      if ((k == 0 && sa) || (k == 1 && sb)) {
        T s = 0;
        for (T v : g) s += v;
        d[0] += s;
      } else {
        for (std::size_t i = 0; i < g.size(); ++i) d[i] += g[i];
      }
    }
  });
}

template <class T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  const bool sa = detail::is_rank0(a.shape()) && !detail::is_rank0(b.shape());
  const bool sb = detail::is_rank0(b.shape()) && !detail::is_rank0(a.shape());
  if (!sa && !sb && a.shape() != b.shape())
    shape_fail(Op::Sub, "shapes " + shape_str(a.shape()) + " and " + shape_str(b.shape()) + " differ");
  const Shape& shape = sa ? b.shape() : a.shape();
  Tensor<T> out(shape);
  auto o = out.mutable_data();
  auto x = a.data(), y = b.data();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] = x[sa ? 0 : i] - y[sb ? 0 : i];
  return detail::finish<T>(Op::Sub, {&a, &b}, out, [sa, sb](std::span<const T> g, std::span<std::vector<T>* const> gi) {
    for (int k = 0; k < 2; ++k) {
      if (!gi[k]) continue;
      auto& d = *gi[k];
      const T sign = k == 0 ? T(1) : T(-1);
      if ((k == 0 && sa) || (k == 1 && sb)) {
        T s = 0;
        for (T v : g) s += v;
        d[0] += sign * s;
      } else {
        for (std::size_t i = 0; i < g.size(); ++i) d[i] += sign * g[i];
      }
    }
  });
}

template <class T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  const bool sa = detail::is_rank0(a.shape()) && !detail::is_rank0(b.shape());
  const bool sb = detail::is_rank0(b.shape()) && !detail::is_rank0(a.shape());
  if (!sa && !sb && a.shape() != b.shape())
    shape_fail(Op::Mul, "shapes " + shape_str(a.shape()) + " and " + shape_str(b.shape()) + " differ");
  const Shape& shape = sa ? b.shape() : a.shape();
  Tensor<T> out(shape);
  auto o = out.mutable_data();
  auto x = a.data(), y = b.data();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] = x[sa ? 0 : i] * y[sb ? 0 : i];
  Tensor<T> av = a.detach(), bv = b.detach();
  return detail::finish<T>(Op::Mul, {&a, &b}, out,
                           [av, bv, sa, sb](std::span<const T> g, std::span<std::vector<T>* const> gi) {
                             auto x = av.data(), y = bv.data();
                             if (gi[0]) {
                               auto& d = *gi[0];
                               for (std::size_t i = 0; i < g.size(); ++i) d[sa ? 0 : i] += g[i] * y[sb ? 0 : i];
                             }
                             if (gi[1]) {
                               auto& d = *gi[1];
                               for (std::size_t i = 0; i < g.size(); ++i) d[sb ? 0 : i] += g[i] * x[sa ? 0 : i];
                             }
                           });
}

template <class T>
Tensor<T> scale(const Tensor<T>& a, double factor) {
  Tensor<T> out(a.shape());
  auto o = out.mutable_data();
  auto x = a.data();
  const T f = static_cast<T>(factor);
  for (std::size_t i = 0; i < o.size(); ++i) o[i] = x[i] * f;
  return detail::finish<T>(Op::Scale, {&a}, out, [f](std::span<const T> g, std::span<std::vector<T>* const> gi) {
    for (std::size_t i = 0; i < g.size(); ++i) (*gi[0])[i] += g[i] * f;
  });
}

template <class T>
Tensor<T> add_scalar(const Tensor<T>& a, double c) {
  Tensor<T> out(a.shape());
  auto o = out.mutable_data();
  auto x = a.data();
  const T v = static_cast<T>(c);
  for (std::size_t i = 0; i < o.size(); ++i) o[i] = x[i] + v;
  return detail::finish<T>(Op::AddScalar, {&a}, out, [](std::span<const T> g, std::span<std::vector<T>* const> gi) {
    for (std::size_t i = 0; i < g.size(); ++i) (*gi[0])[i] += g[i];
  });
}

/// Adds `bias` along `axis` of `x`; bias extent must equal x.shape()[axis].
/// This is the one explicit broadcast primitive (per-channel or per-class offsets).
template <class T>
Tensor<T> add_bias(const Tensor<T>& x, const Tensor<T>& bias, std::size_t axis = 0) {
  if (axis >= x.rank()) shape_fail(Op::AddBias, "axis out of range for " + shape_str(x.shape()));
  shape_require(bias.rank() == 1 && bias.dim(0) == x.dim(axis), Op::AddBias,
                "bias of extent " + std::to_string(x.dim(axis)), bias.shape());
  std::size_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= x.dim(i);
  for (std::size_t i = axis + 1; i < x.rank(); ++i) inner *= x.dim(i);
  const std::size_t n = x.dim(axis);
  Tensor<T> out(x.shape());
  auto o = out.mutable_data();
  auto xv = x.data(), b = bias.data();
  for (std::size_t p = 0; p < outer; ++p)
    for (std::size_t c = 0; c < n; ++c) {
      const std::size_t base = (p * n + c) * inner;
      for (std::size_t i = 0; i < inner; ++i) o[base + i] = xv[base + i] + b[c];
    }
  return detail::finish<T>(Op::AddBias, {&x, &bias}, out,
                           [outer, inner, n](std::span<const T> g, std::span<std::vector<T>* const> gi) {
                             if (gi[0])
                               for (std::size_t i = 0; i < g.size(); ++i) (*gi[0])[i] += g[i];
                             if (gi[1]) {
                               auto& d = *gi[1];
                               for (std::size_t p = 0; p < outer; ++p)
                                 for (std::size_t c = 0; c < n; ++c) {
                                   const std::size_t base = (p * n + c) * inner;
                                   T s = 0;
                                   for (std::size_t i = 0; i < inner; ++i) s += g[base + i];
                                   d[c] += s;
                                 }
                             }
                           });
}

template <class T>
Tensor<T> gelu(const Tensor<T>& x) {
  Tensor<T> out(x.shape());
  auto o = out.mutable_data();
  auto v = x.data();
  constexpr double inv_sqrt2 = 0.70710678118654752440;
  for (std::size_t i = 0; i < o.size(); ++i) {
    const double z = v[i];
    o[i] = static_cast<T>(0.5 * z * (1.0 + std::erf(z * inv_sqrt2)));
  }
  Tensor<T> xv = x.detach();
  return detail::finish<T>(Op::Gelu, {&x}, out, [xv](std::span<const T> g, std::span<std::vector<T>* const> gi) {
    constexpr double inv_sqrt2 = 0.70710678118654752440;
    constexpr double inv_sqrt2pi = 0.39894228040143267794;
    auto v = xv.data();
    auto& d = *gi[0];
    for (std::size_t i = 0; i < g.size(); ++i) {
      const double z = v[i];
      const double cdf = 0.5 * (1.0 + std::erf(z * inv_sqrt2));
      const double pdf = inv_sqrt2pi * std::exp(-0.5 * z * z);
      d[i] += static_cast<T>(g[i] * (cdf + z * pdf));
    }
  });
}

// ---------------------------------------------------------------------------
// Shape manipulation

template <class T>
Tensor<T> reshape(const Tensor<T>& x, Shape shape) {
  if (numel(shape) != x.size())
    shape_fail(Op::Reshape, "cannot view " + shape_str(x.shape()) + " as " + shape_str(shape));
  Tensor<T> out(std::move(shape), std::vector<T>(x.data().begin(), x.data().end()));
  return detail::finish<T>(Op::Reshape, {&x}, out, [](std::span<const T> g, std::span<std::vector<T>* const> gi) {
    for (std::size_t i = 0; i < g.size(); ++i) (*gi[0])[i] += g[i];
  });
}

template <class T>
Tensor<T> transpose(const Tensor<T>& x) {
  shape_require(x.rank() == 2, Op::Transpose, "rank-2 tensor", x.shape());
  const std::size_t r = x.dim(0), c = x.dim(1);
  Tensor<T> out({c, r});
  auto o = out.mutable_data();
  auto v = x.data();
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) o[j * r + i] = v[i * c + j];
  return detail::finish<T>(Op::Transpose, {&x}, out, [r, c](std::span<const T> g, std::span<std::vector<T>* const> gi) {
    auto& d = *gi[0];
    for (std::size_t i = 0; i < r; ++i)
      for (std::size_t j = 0; j < c; ++j) d[i * c + j] += g[j * r + i];
  });
}

/// Keeps [begin, end) of the last axis.
template <class T>
Tensor<T> slice_last(const Tensor<T>& x, std::size_t begin, std::size_t end) {
  shape_require(x.rank() >= 1, Op::SliceLast, "rank >= 1", x.shape());
  const std::size_t n = x.shape().back();
  if (begin >= end || end > n)
    shape_fail(Op::SliceLast, "range [" + std::to_string(begin) + "," + std::to_string(end) + ") invalid for " +
                                  shape_str(x.shape()));
  const std::size_t rows = x.size() / n, m = end - begin;
  Shape s = x.shape();
  s.back() = m;
  Tensor<T> out(s);
  auto o = out.mutable_data();
  auto v = x.data();
  for (std::size_t r = 0; r < rows; ++r) std::copy_n(v.begin() + r * n + begin, m, o.begin() + r * m);
  return detail::finish<T>(Op::SliceLast, {&x}, out,
                           [rows, n, m, begin](std::span<const T> g, std::span<std::vector<T>* const> gi) {
                             auto& d = *gi[0];
                             for (std::size_t r = 0; r < rows; ++r)
                               for (std::size_t j = 0; j < m; ++j) d[r * n + begin + j] += g[r * m + j];
                           });
}

/// Extends `axis` by repeating its first slice `before` times and its last
/// slice `after` times.
template <class T>
Tensor<T> pad_edge(const Tensor<T>& x, std::size_t axis, std::size_t before, std::size_t after) {
  if (axis >= x.rank()) shape_fail(Op::PadEdge, "axis out of range for " + shape_str(x.shape()));
  std::size_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= x.dim(i);
  for (std::size_t i = axis + 1; i < x.rank(); ++i) inner *= x.dim(i);
  const std::size_t n = x.dim(axis), m = n + before + after;
  Shape s = x.shape();
  s[axis] = m;
  Tensor<T> out(s);
  auto o = out.mutable_data();
  auto v = x.data();
  auto src_index = [n, before](std::size_t k) {
    return k < before ? std::size_t{0} : std::min(k - before, n - 1);
  };
  for (std::size_t p = 0; p < outer; ++p)
    for (std::size_t k = 0; k < m; ++k)
      std::copy_n(v.begin() + static_cast<std::ptrdiff_t>((p * n + src_index(k)) * inner), inner,
                  o.begin() + static_cast<std::ptrdiff_t>((p * m + k) * inner));
  return detail::finish<T>(Op::PadEdge, {&x}, out,
                           [outer, inner, n, m, src_index](std::span<const T> g, std::span<std::vector<T>* const> gi) {
                             auto& d = *gi[0];
                             for (std::size_t p = 0; p < outer; ++p)
                               for (std::size_t k = 0; k < m; ++k) {
                                 const std::size_t src = (p * n + src_index(k)) * inner;
                                 for (std::size_t i = 0; i < inner; ++i) d[src + i] += g[(p * m + k) * inner + i];
                               }
                           });
}

// ---------------------------------------------------------------------------
// Reductions

template <class T>
Tensor<T> sum(const Tensor<T>& x) {
  T s = 0;
  for (T v : x.data()) s += v;
  return detail::finish<T>(Op::Sum, {&x}, Tensor<T>::scalar(s), [](std::span<const T> g, std::span<std::vector<T>* const> gi) {
    for (T& d : *gi[0]) d += g[0];
  });
}

template <class T>
Tensor<T> mean(const Tensor<T>& x) {
  if (x.empty()) shape_fail(Op::Mean, "empty tensor");
  T s = 0;
  for (T v : x.data()) s += v;
  const T inv = T{1} / static_cast<T>(x.size());
  return detail::finish<T>(Op::Mean, {&x}, Tensor<T>::scalar(s * inv),
                           [inv](std::span<const T> g, std::span<std::vector<T>* const> gi) {
                             for (T& d : *gi[0]) d += g[0] * inv;
                           });
}

/// Average over one axis, removing it (average pooling over a full axis).
template <class T>
Tensor<T> mean_axis(const Tensor<T>& x, std::size_t axis) {
  if (axis >= x.rank()) shape_fail(Op::MeanAxis, "axis out of range for " + shape_str(x.shape()));
  std::size_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= x.dim(i);
  for (std::size_t i = axis + 1; i < x.rank(); ++i) inner *= x.dim(i);
  const std::size_t n = x.dim(axis);
  Shape s = x.shape();
  s.erase(s.begin() + static_cast<std::ptrdiff_t>(axis));
  Tensor<T> out(s);
  auto o = out.mutable_data();
  auto v = x.data();
  const T inv = T{1} / static_cast<T>(n);
  for (std::size_t p = 0; p < outer; ++p) {
    T* dst = o.data() + p * inner;
    for (std::size_t k = 0; k < n; ++k) {
      const T* src = v.data() + (p * n + k) * inner;
      for (std::size_t i = 0; i < inner; ++i) dst[i] += src[i];
    }
    for (std::size_t i = 0; i < inner; ++i) dst[i] *= inv;
  }
  return detail::finish<T>(Op::MeanAxis, {&x}, out,
                           [outer, inner, n, inv](std::span<const T> g, std::span<std::vector<T>* const> gi) {
                             auto& d = *gi[0];
                             for (std::size_t p = 0; p < outer; ++p)
                               for (std::size_t k = 0; k < n; ++k)
                                 for (std::size_t i = 0; i < inner; ++i)
                                   d[(p * n + k) * inner + i] += g[p * inner + i] * inv;
                           });
}

// ---------------------------------------------------------------------------
// Matrix products

/// Batched product over the last two axes; leading axes must match exactly.
template <class T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b, bool trans_a = false, bool trans_b = false) {
  if (a.rank() < 2 || a.rank() != b.rank())
    shape_fail(Op::Matmul, "operands " + shape_str(a.shape()) + " and " + shape_str(b.shape()) +
                               " need equal rank >= 2");
  const std::size_t r = a.rank();
  std::size_t batch = 1;
  for (std::size_t i = 0; i + 2 < r; ++i) {
    if (a.dim(i) != b.dim(i)) shape_fail(Op::Matmul, "batch axes of " + shape_str(a.shape()) + " and " + shape_str(b.shape()) + " differ");
    batch *= a.dim(i);
  }
  const std::size_t ar = a.dim(r - 2), ac = a.dim(r - 1), br = b.dim(r - 2), bc = b.dim(r - 1);
  const std::size_t M = trans_a ? ac : ar, K = trans_a ? ar : ac;
  const std::size_t Kb = trans_b ? bc : br, N = trans_b ? br : bc;
  if (K != Kb)
    shape_fail(Op::Matmul, "inner extents " + std::to_string(K) + " and " + std::to_string(Kb) + " differ for " +
                               shape_str(a.shape()) + " x " + shape_str(b.shape()));
  Shape s(a.shape().begin(), a.shape().end() - 2);
  s.push_back(M);
  s.push_back(N);
  Tensor<T> out(s);
  T* o = out.mutable_data().data();
  for (std::size_t p = 0; p < batch; ++p)
    blas::gemm<T>(trans_a, trans_b, M, N, K, T{1}, a.ptr() + p * ar * ac, ac, b.ptr() + p * br * bc, bc, T{0},
                  o + p * M * N, N);
  Tensor<T> av = a.detach(), bv = b.detach();
  return detail::finish<T>(
      Op::Matmul, {&a, &b}, out,
      [av, bv, trans_a, trans_b, batch, M, N, K, ar, ac, br, bc](std::span<const T> g, std::span<std::vector<T>* const> gi) {
        for (std::size_t p = 0; p < batch; ++p) {
          const T* gp = g.data() + p * M * N;
          const T* ap = av.ptr() + p * ar * ac;
          const T* bp = bv.ptr() + p * br * bc;
          if (gi[0]) {
            T* da = gi[0]->data() + p * ar * ac;
            if (!trans_a)
              blas::gemm<T>(false, !trans_b, M, K, N, T{1}, gp, N, bp, bc, T{1}, da, ac);
            else
              blas::gemm<T>(trans_b, true, K, M, N, T{1}, bp, bc, gp, N, T{1}, da, ac);
          }
          if (gi[1]) {
            T* db = gi[1]->data() + p * br * bc;
            if (!trans_b)
              blas::gemm<T>(!trans_a, false, K, N, M, T{1}, ap, ac, gp, N, T{1}, db, bc);
            else
              blas::gemm<T>(true, trans_a, N, K, M, T{1}, gp, N, ap, ac, T{1}, db, bc);
          }
        }
      });
}

// ---------------------------------------------------------------------------
// Convolutions

struct Conv3 {
  std::array<std::size_t, 3> in{};      // D, H, W
  std::array<std::size_t, 3> kernel{};  // kD, kH, kW
  std::array<std::size_t, 3> stride{1, 1, 1};
  std::array<std::size_t, 3> pad{0, 0, 0};
  std::array<std::size_t, 3> out{};
  std::size_t cin = 0, cout = 0, batch = 1;

  std::size_t in_plane() const { return in[0] * in[1] * in[2]; }
  std::size_t out_plane() const { return out[0] * out[1] * out[2]; }
  std::size_t taps() const { return kernel[0] * kernel[1] * kernel[2]; }
};

namespace detail {

// Output columns [lo, hi) whose input column ow * stride + kw - pad is in range.
inline std::pair<std::size_t, std::size_t> valid_range(const Conv3& c, std::size_t kw) {
  const std::size_t s = c.stride[2];
  const std::size_t lo = kw >= c.pad[2] ? 0 : (c.pad[2] - kw + s - 1) / s;
  // largest ow with ow * s + kw - pad <= in - 1
  const std::size_t lim = c.in[2] + c.pad[2];
  const std::size_t hi = lim <= kw ? 0 : std::min(c.out[2], (lim - kw - 1) / s + 1);
  return {std::min(lo, hi), hi};
}

// Rows are (cin, kd, kh, kw); columns are output positions [d0, d1) x H_out x W_out.
template <class T>
void im2col(const Conv3& c, const T* x, std::size_t d0, std::size_t d1, T* cols) {
  const std::size_t ncols = (d1 - d0) * c.out[1] * c.out[2];
  std::size_t row = 0;
  for (std::size_t ci = 0; ci < c.cin; ++ci)
    for (std::size_t kd = 0; kd < c.kernel[0]; ++kd)
      for (std::size_t kh = 0; kh < c.kernel[1]; ++kh)
        for (std::size_t kw = 0; kw < c.kernel[2]; ++kw, ++row) {
          T* dst = cols + row * ncols;
          for (std::size_t od = d0; od < d1; ++od) {
            const std::ptrdiff_t id = static_cast<std::ptrdiff_t>(od * c.stride[0] + kd) - static_cast<std::ptrdiff_t>(c.pad[0]);
            for (std::size_t oh = 0; oh < c.out[1]; ++oh) {
              const std::ptrdiff_t ih = static_cast<std::ptrdiff_t>(oh * c.stride[1] + kh) - static_cast<std::ptrdiff_t>(c.pad[1]);
              T* rowp = dst + ((od - d0) * c.out[1] + oh) * c.out[2];
              if (id < 0 || id >= static_cast<std::ptrdiff_t>(c.in[0]) || ih < 0 || ih >= static_cast<std::ptrdiff_t>(c.in[1])) {
                std::fill_n(rowp, c.out[2], T{0});
                continue;
              }
              const T* src = x + (ci * c.in[0] + static_cast<std::size_t>(id)) * c.in[1] * c.in[2] + static_cast<std::size_t>(ih) * c.in[2];
              const auto [lo, hi] = valid_range(c, kw);
              std::fill(rowp, rowp + lo, T{0});
              std::fill(rowp + hi, rowp + c.out[2], T{0});
              const T* s0 = src + lo * c.stride[2] + kw - c.pad[2];
              if (c.stride[2] == 1)
                std::copy(s0, s0 + (hi - lo), rowp + lo);
              else
                for (std::size_t ow = lo; ow < hi; ++ow) rowp[ow] = s0[(ow - lo) * c.stride[2]];
            }
          }
        }
}

template <class T>
void col2im(const Conv3& c, const T* cols, std::size_t d0, std::size_t d1, T* dx) {
  const std::size_t ncols = (d1 - d0) * c.out[1] * c.out[2];
  std::size_t row = 0;
  for (std::size_t ci = 0; ci < c.cin; ++ci)
    for (std::size_t kd = 0; kd < c.kernel[0]; ++kd)
      for (std::size_t kh = 0; kh < c.kernel[1]; ++kh)
        for (std::size_t kw = 0; kw < c.kernel[2]; ++kw, ++row) {
          const T* src = cols + row * ncols;
          for (std::size_t od = d0; od < d1; ++od) {
            const std::ptrdiff_t id = static_cast<std::ptrdiff_t>(od * c.stride[0] + kd) - static_cast<std::ptrdiff_t>(c.pad[0]);
            if (id < 0 || id >= static_cast<std::ptrdiff_t>(c.in[0])) continue;
            for (std::size_t oh = 0; oh < c.out[1]; ++oh) {
              const std::ptrdiff_t ih = static_cast<std::ptrdiff_t>(oh * c.stride[1] + kh) - static_cast<std::ptrdiff_t>(c.pad[1]);
              if (ih < 0 || ih >= static_cast<std::ptrdiff_t>(c.in[1])) continue;
              const T* rowp = src + ((od - d0) * c.out[1] + oh) * c.out[2];
              T* dst = dx + (ci * c.in[0] + static_cast<std::size_t>(id)) * c.in[1] * c.in[2] + static_cast<std::size_t>(ih) * c.in[2];
              const auto [lo, hi] = valid_range(c, kw);
              T* d0p = dst + lo * c.stride[2] + kw - c.pad[2];
              for (std::size_t ow = lo; ow < hi; ++ow) d0p[(ow - lo) * c.stride[2]] += rowp[ow];
            }
          }
        }
}

// Output-depth slices per im2col chunk, bounding the column buffer.
inline std::size_t depth_chunk(const Conv3& c) {
  constexpr std::size_t budget = std::size_t{1} << 22;
  const std::size_t per_depth = std::max<std::size_t>(1, c.cin * c.taps() * c.out[1] * c.out[2]);
  return std::clamp<std::size_t>(budget / per_depth, 1, c.out[0]);
}

template <class T>
Tensor<T> conv_generic(Op kind, const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>* bias, Conv3 c,
                       const Shape& out_shape) {
  const std::size_t P = c.out_plane(), K = c.cin * c.taps();
  Tensor<T> out(out_shape);
  T* o = out.mutable_data().data();
  const std::size_t chunk = depth_chunk(c);
  std::vector<T> cols;
  for (std::size_t n = 0; n < c.batch; ++n) {
    const T* xn = x.ptr() + n * c.cin * c.in_plane();
    T* on = o + n * c.cout * P;
    for (std::size_t d0 = 0; d0 < c.out[0]; d0 += chunk) {
      const std::size_t d1 = std::min(c.out[0], d0 + chunk);
      const std::size_t ncols = (d1 - d0) * c.out[1] * c.out[2];
      cols.resize(K * ncols);
      im2col(c, xn, d0, d1, cols.data());
      blas::gemm<T>(false, false, c.cout, ncols, K, T{1}, w.ptr(), K, cols.data(), ncols, T{0},
                    on + d0 * c.out[1] * c.out[2], P);
    }
    if (bias)
      for (std::size_t co = 0; co < c.cout; ++co) {
        const T b = bias->ptr()[co];
        for (std::size_t p = 0; p < P; ++p) on[co * P + p] += b;
      }
  }
  Tensor<T> xv = x.detach(), wv = w.detach();
  Tensor<T> none;
  return finish<T>(kind, {&x, &w, bias ? bias : &none}, out,
                   [xv, wv, c, chunk, P, K](std::span<const T> g, std::span<std::vector<T>* const> gi) {
                     std::vector<T> cols, dcols;
                     for (std::size_t n = 0; n < c.batch; ++n) {
                       const T* xn = xv.ptr() + n * c.cin * c.in_plane();
                       const T* gn = g.data() + n * c.cout * P;
                       if (gi[2])
                         for (std::size_t co = 0; co < c.cout; ++co) {
                           T s = 0;
                           for (std::size_t p = 0; p < P; ++p) s += gn[co * P + p];
                           (*gi[2])[co] += s;
                         }
                       if (!gi[0] && !gi[1]) continue;
                       for (std::size_t d0 = 0; d0 < c.out[0]; d0 += chunk) {
                         const std::size_t d1 = std::min(c.out[0], d0 + chunk);
                         const std::size_t ncols = (d1 - d0) * c.out[1] * c.out[2];
                         const T* gslice = gn + d0 * c.out[1] * c.out[2];
                         if (gi[1]) {
                           cols.resize(K * ncols);
                           im2col(c, xn, d0, d1, cols.data());
                           blas::gemm<T>(false, true, c.cout, K, ncols, T{1}, gslice, P, cols.data(), ncols, T{1},
                                         gi[1]->data(), K);
                         }
                         if (gi[0]) {
                           dcols.assign(K * ncols, T{0});
                           blas::gemm<T>(true, false, K, ncols, c.cout, T{1}, wv.ptr(), K, gslice, P, T{0}, dcols.data(),
                                         ncols);
                           col2im(c, dcols.data(), d0, d1, gi[0]->data() + n * c.cin * c.in_plane());
                         }
                       }
                     }
                   });
}

inline std::size_t conv_out_extent(Op kind, std::size_t in, std::size_t k, std::size_t stride, std::size_t pad) {
  if (stride == 0) shape_fail(kind, "stride must be positive");
  if (in + 2 * pad < k)
    shape_fail(kind, "kernel " + std::to_string(k) + " exceeds padded input " + std::to_string(in + 2 * pad));
  return (in + 2 * pad - k) / stride + 1;
}

template <class T>
void check_bias(Op kind, const Tensor<T>* bias, std::size_t cout) {
  if (bias && !bias->empty())
    shape_require(bias->rank() == 1 && bias->dim(0) == cout, kind, "bias (" + std::to_string(cout) + ")", bias->shape());
}

}  // namespace detail

/// x: (N, Cin, L), w: (Cout, Cin, k), bias: (Cout) or empty.
template <class T>
Tensor<T> conv1d(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& bias, std::size_t stride = 1,
                 std::size_t pad = 0) {
  shape_require(x.rank() == 3, Op::Conv1d, "input (N,C,L)", x.shape());
  shape_require(w.rank() == 3 && w.dim(1) == x.dim(1), Op::Conv1d,
                "weight (Cout," + std::to_string(x.dim(1)) + ",k)", w.shape());
  detail::check_bias(Op::Conv1d, &bias, w.dim(0));
  Conv3 c;
  c.batch = x.dim(0);
  c.cin = x.dim(1);
  c.cout = w.dim(0);
  c.in = {1, 1, x.dim(2)};
  c.kernel = {1, 1, w.dim(2)};
  c.stride = {1, 1, stride};
  c.pad = {0, 0, pad};
  c.out = {1, 1, detail::conv_out_extent(Op::Conv1d, x.dim(2), w.dim(2), stride, pad)};
  return detail::conv_generic<T>(Op::Conv1d, x, w, bias.empty() ? nullptr : &bias, c, {c.batch, c.cout, c.out[2]});
}

/// x: (N, Cin, H, W), w: (Cout, Cin, kH, kW), bias: (Cout) or empty.
template <class T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& bias, std::array<std::size_t, 2> stride = {1, 1},
                 std::array<std::size_t, 2> pad = {0, 0}) {
  shape_require(x.rank() == 4, Op::Conv2d, "input (N,C,H,W)", x.shape());
  shape_require(w.rank() == 4 && w.dim(1) == x.dim(1), Op::Conv2d,
                "weight (Cout," + std::to_string(x.dim(1)) + ",kH,kW)", w.shape());
  detail::check_bias(Op::Conv2d, &bias, w.dim(0));
  Conv3 c;
  c.batch = x.dim(0);
  c.cin = x.dim(1);
  c.cout = w.dim(0);
  c.in = {1, x.dim(2), x.dim(3)};
  c.kernel = {1, w.dim(2), w.dim(3)};
  c.stride = {1, stride[0], stride[1]};
  c.pad = {0, pad[0], pad[1]};
  c.out = {1, detail::conv_out_extent(Op::Conv2d, x.dim(2), w.dim(2), stride[0], pad[0]),
           detail::conv_out_extent(Op::Conv2d, x.dim(3), w.dim(3), stride[1], pad[1])};
  return detail::conv_generic<T>(Op::Conv2d, x, w, bias.empty() ? nullptr : &bias, c,
                                 {c.batch, c.cout, c.out[1], c.out[2]});
}

/// x: (N, Cin, D, H, W), w: (Cout, Cin, kD, kH, kW), bias: (Cout) or empty.
template <class T>
Tensor<T> conv3d(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& bias,
                 std::array<std::size_t, 3> stride = {1, 1, 1}, std::array<std::size_t, 3> pad = {0, 0, 0}) {
  shape_require(x.rank() == 5, Op::Conv3d, "input (N,C,D,H,W)", x.shape());
  shape_require(w.rank() == 5 && w.dim(1) == x.dim(1), Op::Conv3d,
                "weight (Cout," + std::to_string(x.dim(1)) + ",kD,kH,kW)", w.shape());
  detail::check_bias(Op::Conv3d, &bias, w.dim(0));
  Conv3 c;
  c.batch = x.dim(0);
  c.cin = x.dim(1);
  c.cout = w.dim(0);
  c.in = {x.dim(2), x.dim(3), x.dim(4)};
  c.kernel = {w.dim(2), w.dim(3), w.dim(4)};
  c.stride = stride;
  c.pad = pad;
  for (int i = 0; i < 3; ++i) c.out[i] = detail::conv_out_extent(Op::Conv3d, c.in[i], c.kernel[i], stride[i], pad[i]);
  return detail::conv_generic<T>(Op::Conv3d, x, w, bias.empty() ? nullptr : &bias, c,
                                 {c.batch, c.cout, c.out[0], c.out[1], c.out[2]});
}

inline std::size_t conv_transpose_length(std::size_t in, std::size_t kernel, std::size_t stride, std::size_t pad) {
  return (in - 1) * stride + kernel - 2 * pad;
}

/// Transposed convolution along axis 1 (time) of x: (Cin, T, rest...), with
/// w: (Cin, Cout, k). Positions along the trailing axes are independent.
template <class T>
Tensor<T> conv_transpose1d(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& bias, std::size_t stride,
                           std::size_t pad) {
  shape_require(x.rank() >= 2, Op::ConvTranspose1d, "input (C,T,...)", x.shape());
  shape_require(w.rank() == 3 && w.dim(0) == x.dim(0), Op::ConvTranspose1d,
                "weight (" + std::to_string(x.dim(0)) + ",Cout,k)", w.shape());
  detail::check_bias(Op::ConvTranspose1d, &bias, w.dim(1));
  if (stride == 0) shape_fail(Op::ConvTranspose1d, "stride must be positive");
  const std::size_t cin = x.dim(0), tin = x.dim(1), cout = w.dim(1), k = w.dim(2);
  if ((tin - 1) * stride + k <= 2 * pad) shape_fail(Op::ConvTranspose1d, "padding consumes the whole output");
  const std::size_t tout = conv_transpose_length(tin, k, stride, pad);
  const std::size_t S = x.size() / (cin * tin);
  Shape s = x.shape();
  s[0] = cout;
  s[1] = tout;
  Tensor<T> out(s);
  T* o = out.mutable_data().data();

  // For tap j, Y_j = W_j^T X lands at output time t*stride - pad + j.
  std::vector<T> wk(cin * cout), yk(cout * tin * S);
  auto tap_weights = [&](const T* wp, std::size_t j, std::vector<T>& dst) {
    for (std::size_t ci = 0; ci < cin; ++ci)
      for (std::size_t co = 0; co < cout; ++co) dst[ci * cout + co] = wp[(ci * cout + co) * k + j];
  };
  for (std::size_t j = 0; j < k; ++j) {
    tap_weights(w.ptr(), j, wk);
    blas::gemm<T>(true, false, cout, tin * S, cin, T{1}, wk.data(), cout, x.ptr(), tin * S, T{0}, yk.data(), tin * S);
    for (std::size_t t = 0; t < tin; ++t) {
      const std::ptrdiff_t to = static_cast<std::ptrdiff_t>(t * stride + j) - static_cast<std::ptrdiff_t>(pad);
      if (to < 0 || to >= static_cast<std::ptrdiff_t>(tout)) continue;
      for (std::size_t co = 0; co < cout; ++co) {
        const T* src = yk.data() + (co * tin + t) * S;
        T* dst = o + (co * tout + static_cast<std::size_t>(to)) * S;
        for (std::size_t q = 0; q < S; ++q) dst[q] += src[q];
      }
    }
  }
  if (!bias.empty())
    for (std::size_t co = 0; co < cout; ++co)
      for (std::size_t q = 0; q < tout * S; ++q) o[co * tout * S + q] += bias.ptr()[co];

  Tensor<T> xv = x.detach(), wv = w.detach();
  const Tensor<T>* bptr = &bias;
  return detail::finish<T>(
      Op::ConvTranspose1d, {&x, &w, bptr}, out,
      [xv, wv, cin, tin, cout, k, tout, S, stride, pad](std::span<const T> g, std::span<std::vector<T>* const> gi) {
        if (gi[2])
          for (std::size_t co = 0; co < cout; ++co) {
            T sacc = 0;
            for (std::size_t q = 0; q < tout * S; ++q) sacc += g[co * tout * S + q];
            (*gi[2])[co] += sacc;
          }
        if (!gi[0] && !gi[1]) return;
        std::vector<T> gk(cout * tin * S), wk(cin * cout), dwk(cin * cout);
        for (std::size_t j = 0; j < k; ++j) {
          // Gather the output gradient seen by tap j.
          std::fill(gk.begin(), gk.end(), T{0});
          for (std::size_t t = 0; t < tin; ++t) {
            const std::ptrdiff_t to = static_cast<std::ptrdiff_t>(t * stride + j) - static_cast<std::ptrdiff_t>(pad);
            if (to < 0 || to >= static_cast<std::ptrdiff_t>(tout)) continue;
            for (std::size_t co = 0; co < cout; ++co)
              std::copy_n(g.data() + (co * tout + static_cast<std::size_t>(to)) * S, S, gk.data() + (co * tin + t) * S);
          }
          if (gi[0]) {
            for (std::size_t ci = 0; ci < cin; ++ci)
              for (std::size_t co = 0; co < cout; ++co) wk[ci * cout + co] = wv.ptr()[(ci * cout + co) * k + j];
            blas::gemm<T>(false, false, cin, tin * S, cout, T{1}, wk.data(), cout, gk.data(), tin * S, T{1},
                          gi[0]->data(), tin * S);
          }
          if (gi[1]) {
            blas::gemm<T>(false, true, cin, cout, tin * S, T{1}, xv.ptr(), tin * S, gk.data(), tin * S, T{0}, dwk.data(),
                          cout);
            for (std::size_t ci = 0; ci < cin; ++ci)
              for (std::size_t co = 0; co < cout; ++co) (*gi[1])[(ci * cout + co) * k + j] += dwk[ci * cout + co];
          }
        }
      });
}

// ---------------------------------------------------------------------------
// Normalization and softmax

/// Softmax along `axis`. Positions flagged in `masked` (one flag per element
/// of that axis) get probability exactly 0, as if their logits were -inf.
template <class T>
Tensor<T> softmax(const Tensor<T>& x, std::size_t axis, std::span<const std::uint8_t> masked = {}) {
  if (axis >= x.rank()) shape_fail(Op::Softmax, "axis out of range for " + shape_str(x.shape()));
  const std::size_t n = x.dim(axis);
  if (!masked.empty() && masked.size() != n)
    shape_fail(Op::Softmax, "mask has " + std::to_string(masked.size()) + " entries for axis extent " + std::to_string(n));
  std::size_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= x.dim(i);
  for (std::size_t i = axis + 1; i < x.rank(); ++i) inner *= x.dim(i);
  std::vector<std::uint8_t> mask(masked.begin(), masked.end());
  if (!mask.empty() && std::all_of(mask.begin(), mask.end(), [](std::uint8_t m) { return m != 0; }))
    shape_fail(Op::Softmax, "every position along the axis is masked");
  Tensor<T> out(x.shape());
  auto o = out.mutable_data();
  auto v = x.data();
  for (std::size_t p = 0; p < outer; ++p)
    for (std::size_t i = 0; i < inner; ++i) {
      const std::size_t base = p * n * inner + i;
      T mx = -std::numeric_limits<T>::infinity();
      for (std::size_t k = 0; k < n; ++k)
        if (mask.empty() || !mask[k]) mx = std::max(mx, v[base + k * inner]);
      T s = 0;
      for (std::size_t k = 0; k < n; ++k) {
        const T e = (mask.empty() || !mask[k]) ? std::exp(v[base + k * inner] - mx) : T{0};
        o[base + k * inner] = e;
        s += e;
      }
      const T inv = T{1} / s;
      for (std::size_t k = 0; k < n; ++k) o[base + k * inner] *= inv;
    }
  Tensor<T> yv = out.detach();
  return detail::finish<T>(Op::Softmax, {&x}, out,
                           [yv, outer, inner, n](std::span<const T> g, std::span<std::vector<T>* const> gi) {
                             auto y = yv.data();
                             auto& d = *gi[0];
                             for (std::size_t p = 0; p < outer; ++p)
                               for (std::size_t i = 0; i < inner; ++i) {
                                 const std::size_t base = p * n * inner + i;
                                 T dot = 0;
                                 for (std::size_t k = 0; k < n; ++k) dot += g[base + k * inner] * y[base + k * inner];
                                 for (std::size_t k = 0; k < n; ++k)
                                   d[base + k * inner] += y[base + k * inner] * (g[base + k * inner] - dot);
                               }
                           });
}

/// Normalizes each column of a (d x T) map over its d channels.
template <class T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta, double eps = 1e-5) {
  shape_require(x.rank() == 2, Op::LayerNorm, "input (d,T)", x.shape());
  const std::size_t d = x.dim(0), t = x.dim(1);
  shape_require(gamma.rank() == 1 && gamma.dim(0) == d, Op::LayerNorm, "gamma (" + std::to_string(d) + ")", gamma.shape());
  shape_require(beta.rank() == 1 && beta.dim(0) == d, Op::LayerNorm, "beta (" + std::to_string(d) + ")", beta.shape());
  Tensor<T> out(x.shape());
  Tensor<T> xhat(x.shape());
  std::vector<T> rstd(t);
  auto v = x.data();
  auto o = out.mutable_data();
  auto xh = xhat.mutable_data();
  for (std::size_t j = 0; j < t; ++j) {
    double m = 0, var = 0;
    for (std::size_t i = 0; i < d; ++i) m += v[i * t + j];
    m /= static_cast<double>(d);
    for (std::size_t i = 0; i < d; ++i) {
      const double c = v[i * t + j] - m;
      var += c * c;
    }
    var /= static_cast<double>(d);
    const double r = 1.0 / std::sqrt(var + eps);
    rstd[j] = static_cast<T>(r);
    for (std::size_t i = 0; i < d; ++i) {
      xh[i * t + j] = static_cast<T>((v[i * t + j] - m) * r);
      o[i * t + j] = xh[i * t + j] * gamma.ptr()[i] + beta.ptr()[i];
    }
  }
  Tensor<T> gv = gamma.detach();
  return detail::finish<T>(Op::LayerNorm, {&x, &gamma, &beta}, out,
                           [xhat, gv, rstd, d, t](std::span<const T> g, std::span<std::vector<T>* const> gi) {
                             auto xh = xhat.data();
                             if (gi[1])
                               for (std::size_t i = 0; i < d; ++i)
                                 for (std::size_t j = 0; j < t; ++j) (*gi[1])[i] += g[i * t + j] * xh[i * t + j];
                             if (gi[2])
                               for (std::size_t i = 0; i < d; ++i)
                                 for (std::size_t j = 0; j < t; ++j) (*gi[2])[i] += g[i * t + j];
                             if (!gi[0]) return;
                             auto& dx = *gi[0];
                             for (std::size_t j = 0; j < t; ++j) {
                               double s1 = 0, s2 = 0;
                               for (std::size_t i = 0; i < d; ++i) {
                                 const double gh = static_cast<double>(g[i * t + j]) * gv.ptr()[i];
                                 s1 += gh;
                                 s2 += gh * xh[i * t + j];
                               }
                               s1 /= static_cast<double>(d);
                               s2 /= static_cast<double>(d);
                               for (std::size_t i = 0; i < d; ++i) {
                                 const double gh = static_cast<double>(g[i * t + j]) * gv.ptr()[i];
                                 dx[i * t + j] += static_cast<T>(rstd[j] * (gh - s1 - xh[i * t + j] * s2));
                               }
                             }
                           });
}

/// Group normalization of x: (N, C, spatial...) with per-channel affine.
template <class T>
Tensor<T> group_norm(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta, std::size_t groups,
                     double eps = 1e-5) {
  shape_require(x.rank() >= 2, Op::GroupNorm, "input (N,C,...)", x.shape());
  const std::size_t N = x.dim(0), C = x.dim(1), S = x.size() / (N * C);
  if (groups == 0 || C % groups != 0)
    shape_fail(Op::GroupNorm, std::to_string(C) + " channels not divisible into " + std::to_string(groups) + " groups");
  shape_require(gamma.rank() == 1 && gamma.dim(0) == C, Op::GroupNorm, "gamma (" + std::to_string(C) + ")", gamma.shape());
  shape_require(beta.rank() == 1 && beta.dim(0) == C, Op::GroupNorm, "beta (" + std::to_string(C) + ")", beta.shape());
  const std::size_t cpg = C / groups, m = cpg * S;
  Tensor<T> out(x.shape());
  Tensor<T> xhat(x.shape());
  std::vector<T> rstd(N * groups);
  auto v = x.data();
  auto o = out.mutable_data();
  auto xh = xhat.mutable_data();
  for (std::size_t n = 0; n < N; ++n)
    for (std::size_t gidx = 0; gidx < groups; ++gidx) {
      const std::size_t base = (n * C + gidx * cpg) * S;
      double mu = 0, var = 0;
      for (std::size_t i = 0; i < m; ++i) mu += v[base + i];
      mu /= static_cast<double>(m);
      for (std::size_t i = 0; i < m; ++i) {
        const double c = v[base + i] - mu;
        var += c * c;
      }
      var /= static_cast<double>(m);
      const double r = 1.0 / std::sqrt(var + eps);
      rstd[n * groups + gidx] = static_cast<T>(r);
      for (std::size_t c = 0; c < cpg; ++c) {
        const std::size_t ch = gidx * cpg + c;
        for (std::size_t s = 0; s < S; ++s) {
          const std::size_t idx = base + c * S + s;
          xh[idx] = static_cast<T>((v[idx] - mu) * r);
          o[idx] = xh[idx] * gamma.ptr()[ch] + beta.ptr()[ch];
        }
      }
    }
  Tensor<T> gv = gamma.detach();
  return detail::finish<T>(
      Op::GroupNorm, {&x, &gamma, &beta}, out,
      [xhat, gv, rstd, N, C, S, groups, cpg, m](std::span<const T> g, std::span<std::vector<T>* const> gi) {
        auto xh = xhat.data();
        for (std::size_t n = 0; n < N; ++n)
          for (std::size_t ch = 0; ch < C; ++ch) {
            const std::size_t base = (n * C + ch) * S;
            if (gi[1]) {
              T acc = 0;
              for (std::size_t s = 0; s < S; ++s) acc += g[base + s] * xh[base + s];
              (*gi[1])[ch] += acc;
            }
            if (gi[2]) {
              T acc = 0;
              for (std::size_t s = 0; s < S; ++s) acc += g[base + s];
              (*gi[2])[ch] += acc;
            }
          }
        if (!gi[0]) return;
        auto& dx = *gi[0];
        for (std::size_t n = 0; n < N; ++n)
          for (std::size_t gidx = 0; gidx < groups; ++gidx) {
            const std::size_t base = (n * C + gidx * cpg) * S;
            double s1 = 0, s2 = 0;
            for (std::size_t c = 0; c < cpg; ++c) {
              const double gam = gv.ptr()[gidx * cpg + c];
              for (std::size_t s = 0; s < S; ++s) {
                const double gh = static_cast<double>(g[base + c * S + s]) * gam;
                s1 += gh;
                s2 += gh * xh[base + c * S + s];
              }
            }
            s1 /= static_cast<double>(m);
            s2 /= static_cast<double>(m);
            const double r = rstd[n * groups + gidx];
            for (std::size_t c = 0; c < cpg; ++c) {
              const double gam = gv.ptr()[gidx * cpg + c];
              for (std::size_t s = 0; s < S; ++s) {
                const std::size_t idx = base + c * S + s;
                dx[idx] += static_cast<T>(r * (static_cast<double>(g[idx]) * gam - s1 - xh[idx] * s2));
              }
            }
          }
      });
}

// ---------------------------------------------------------------------------
// Losses

/// Mean absolute error. The subgradient at equality is 0.
template <class T>
Tensor<T> l1_loss(const Tensor<T>& target, const Tensor<T>& pred) {
  if (target.shape() != pred.shape())
    shape_fail(Op::L1Loss, "target " + shape_str(target.shape()) + " vs prediction " + shape_str(pred.shape()));
  if (pred.empty()) shape_fail(Op::L1Loss, "empty operands");
  auto a = target.data(), b = pred.data();
  double s = 0;
  for (std::size_t i = 0; i < a.size(); ++i) s += std::abs(static_cast<double>(a[i]) - static_cast<double>(b[i]));
  const double n = static_cast<double>(a.size());
  Tensor<T> tv = target.detach(), pv = pred.detach();
  return detail::finish<T>(Op::L1Loss, {&target, &pred}, Tensor<T>::scalar(static_cast<T>(s / n)),
                           [tv, pv, n](std::span<const T> g, std::span<std::vector<T>* const> gi) {
                             auto a = tv.data(), b = pv.data();
                             const T inv = static_cast<T>(1.0 / n) * g[0];
                             for (std::size_t i = 0; i < a.size(); ++i) {
                               const T diff = a[i] - b[i];
                               const T sgn = diff > 0 ? T{1} : (diff < 0 ? T{-1} : T{0});
                               if (gi[0]) (*gi[0])[i] += sgn * inv;
                               if (gi[1]) (*gi[1])[i] -= sgn * inv;
                             }
                           });
}

/// Mean over rows of -log softmax(pred)[c*], where c* is the argmax of the
/// matching target row (the one-hot target class). Rows are frames, columns
/// are classes. No gradient flows into `target`.
template <class T>
Tensor<T> cross_entropy_argmax(const Tensor<T>& target, const Tensor<T>& pred) {
  if (target.shape() != pred.shape() || pred.rank() != 2)
    shape_fail(Op::CrossEntropy, "target " + shape_str(target.shape()) + " vs prediction " + shape_str(pred.shape()) +
                                     " (need equal (frames, classes))");
  const std::size_t rows = pred.dim(0), C = pred.dim(1);
  if (rows == 0 || C < 2) shape_fail(Op::CrossEntropy, "need at least one frame and two classes");
  std::vector<std::size_t> cls(rows);
  auto tv = target.data();
  for (std::size_t r = 0; r < rows; ++r)
    cls[r] = static_cast<std::size_t>(std::max_element(tv.begin() + r * C, tv.begin() + (r + 1) * C) - (tv.begin() + r * C));
  auto p = pred.data();
  Tensor<T> probs({rows, C});
  auto pr = probs.mutable_data();
  double total = 0;
  for (std::size_t r = 0; r < rows; ++r) {
    const T* row = p.data() + r * C;
    const double mx = *std::max_element(row, row + C);
    double s = 0;
    for (std::size_t c = 0; c < C; ++c) s += std::exp(static_cast<double>(row[c]) - mx);
    const double lse = mx + std::log(s);
    total += lse - row[cls[r]];
    for (std::size_t c = 0; c < C; ++c) pr[r * C + c] = static_cast<T>(std::exp(static_cast<double>(row[c]) - lse));
  }
  const double n = static_cast<double>(rows);
  Tensor<T> none;
  return detail::finish<T>(Op::CrossEntropy, {&none, &pred}, Tensor<T>::scalar(static_cast<T>(total / n)),
                           [probs, cls, rows, C, n](std::span<const T> g, std::span<std::vector<T>* const> gi) {
                             if (!gi[1]) return;
                             auto pr = probs.data();
                             const T k = static_cast<T>(1.0 / n) * g[0];
                             for (std::size_t r = 0; r < rows; ++r)
                               for (std::size_t c = 0; c < C; ++c)
                                 (*gi[1])[r * C + c] += (pr[r * C + c] - (c == cls[r] ? T{1} : T{0})) * k;
                           });
}

// ---------------------------------------------------------------------------
// Generic dispatch

struct OpAttrs {
  std::array<std::size_t, 3> stride{1, 1, 1};
  std::array<std::size_t, 3> pad{0, 0, 0};
  std::size_t axis = 0;
  std::size_t groups = 1;
  std::size_t begin = 0, end = 0;
  std::size_t before = 0, after = 0;
  bool trans_a = false, trans_b = false;
  double scalar = 0.0;
  double eps = 1e-5;
  Shape shape;
  std::vector<std::uint8_t> mask;
};

class UnknownOpError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Applies primitive `kind` to `inputs`. Optional bias/affine operands may be
/// passed as empty tensors where the primitive allows it.
template <class T>
Tensor<T> apply_primitive(Op kind, std::span<const Tensor<T>> in, const OpAttrs& a = {}) {
  auto need = [&](std::size_t n) {
    if (in.size() != n)
      shape_fail(kind, "expects " + std::to_string(n) + " inputs, got " + std::to_string(in.size()));
  };
  const Tensor<T> none;
  auto opt = [&](std::size_t i) -> const Tensor<T>& { return i < in.size() ? in[i] : none; };
  switch (kind) {
    case Op::Add: need(2); return add(in[0], in[1]);
    case Op::Sub: need(2); return sub(in[0], in[1]);
    case Op::Mul: need(2); return mul(in[0], in[1]);
    case Op::Scale: need(1); return scale(in[0], a.scalar);
    case Op::AddScalar: need(1); return add_scalar(in[0], a.scalar);
    case Op::AddBias: need(2); return add_bias(in[0], in[1], a.axis);
    case Op::Matmul: need(2); return matmul(in[0], in[1], a.trans_a, a.trans_b);
    case Op::Conv1d: return conv1d(in[0], in[1], opt(2), a.stride[0], a.pad[0]);
    case Op::Conv2d: return conv2d(in[0], in[1], opt(2), {a.stride[0], a.stride[1]}, {a.pad[0], a.pad[1]});
    case Op::Conv3d: return conv3d(in[0], in[1], opt(2), a.stride, a.pad);
    case Op::ConvTranspose1d: return conv_transpose1d(in[0], in[1], opt(2), a.stride[0], a.pad[0]);
    case Op::Gelu: need(1); return gelu(in[0]);
    case Op::Softmax: need(1); return softmax(in[0], a.axis, std::span<const std::uint8_t>(a.mask));
    case Op::LayerNorm: need(3); return layer_norm(in[0], in[1], in[2], a.eps);
    case Op::GroupNorm: need(3); return group_norm(in[0], in[1], in[2], a.groups, a.eps);
    case Op::MeanAxis: need(1); return mean_axis(in[0], a.axis);
    case Op::Reshape: need(1); return reshape(in[0], a.shape);
    case Op::Transpose: need(1); return transpose(in[0]);
    case Op::SliceLast: need(1); return slice_last(in[0], a.begin, a.end);
    case Op::PadEdge: need(1); return pad_edge(in[0], a.axis, a.before, a.after);
    case Op::Sum: need(1); return sum(in[0]);
    case Op::Mean: need(1); return mean(in[0]);
    case Op::L1Loss: need(2); return l1_loss(in[0], in[1]);
    case Op::CrossEntropy: need(2); return cross_entropy_argmax(in[0], in[1]);
    case Op::Leaf: break;
  }
  throw UnknownOpError("apply_primitive: unknown primitive kind " + std::to_string(static_cast<int>(kind)));
}

// ---------------------------------------------------------------------------
// Finite-difference checking

/// Max over elements of |analytic - numeric| / max(1, |analytic|, |numeric|),
/// with central differences of step h.
inline double grad_check(const std::function<Tensor<double>(const Tensor<double>&)>& f, const Tensor<double>& x,
                         double h = 1e-5) {
  Tape<double> tape;
  Tensor<double> xl = tape.leaf(x.clone());
  Tensor<double> y = f(xl);
  Gradients<double> grads = tape.backward(y);
  const Tensor<double>* gp = grads.find(*xl.node_id());
  std::vector<double> analytic = gp ? std::vector<double>(gp->data().begin(), gp->data().end())
                                    : std::vector<double>(x.size(), 0.0);
  double worst = 0;
  Tensor<double> probe = x.clone();
  auto pd = probe.mutable_data();
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double orig = pd[i];
    pd[i] = orig + h;
    const double fp = f(probe).item();
    pd[i] = orig - h;
    const double fm = f(probe).item();
    pd[i] = orig;
    const double numeric = (fp - fm) / (2 * h);
    const double denom = std::max({1.0, std::abs(analytic[i]), std::abs(numeric)});
    worst = std::max(worst, std::abs(analytic[i] - numeric) / denom);
  }
  return worst;
}

}  // namespace avf
