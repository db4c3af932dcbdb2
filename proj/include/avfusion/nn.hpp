#pragma once

// Named parameter collections, tape binding, shared layers and Adam.

#include <cmath>
#include <cstdint>
#include <cstring>
#include <functional>
#include <map>
#include <numbers>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "avfusion/rng.hpp"
#include "avfusion/tensor.hpp"

namespace avf {

/// Ordered, named parameter tensors. Iteration order is insertion order and
/// is part of the checkpoint contract.
template <class T>
class ParamSet {
 public:
  Tensor<T>& add(const std::string& name, Tensor<T> value) {
    if (index_.count(name)) throw std::invalid_argument("duplicate parameter name: " + name);
    index_.emplace(name, values_.size());
    names_.push_back(name);
    values_.push_back(std::move(value));
    return values_.back();
  }

  bool contains(std::string_view name) const { return index_.find(name) != index_.end(); }

  const Tensor<T>& at(std::string_view name) const { return values_[index_of(name)]; }
  Tensor<T>& at(std::string_view name) { return values_[index_of(name)]; }

  std::size_t index_of(std::string_view name) const {
    auto it = index_.find(name);
    if (it == index_.end()) throw std::out_of_range("unknown parameter: " + std::string(name));
    return it->second;
  }

  std::size_t size() const noexcept { return values_.size(); }
  const std::vector<std::string>& names() const noexcept { return names_; }
  const Tensor<T>& value(std::size_t i) const { return values_.at(i); }
  Tensor<T>& value(std::size_t i) { return values_.at(i); }

  std::size_t parameter_count() const {
    std::size_t n = 0;
    for (const auto& v : values_) n += v.size();
    return n;
  }

  ParamSet deep_copy() const {
    ParamSet out;
    for (std::size_t i = 0; i < size(); ++i) out.add(names_[i], values_[i].clone());
    return out;
  }

  bool bitwise_equal(const ParamSet& o) const {
    if (names_ != o.names_) return false;
    for (std::size_t i = 0; i < size(); ++i) {
      if (values_[i].shape() != o.values_[i].shape()) return false;
      if (std::memcmp(values_[i].ptr(), o.values_[i].ptr(), values_[i].size() * sizeof(T)) != 0) return false;
    }
    return true;
  }

  template <class U>
  ParamSet<U> cast() const {
    ParamSet<U> out;
    for (std::size_t i = 0; i < size(); ++i) {
      auto d = values_[i].data();
      out.add(names_[i], Tensor<U>(values_[i].shape(), std::vector<U>(d.begin(), d.end())));
    }
    return out;
  }

 private:
  std::vector<std::string> names_;
  std::vector<Tensor<T>> values_;
  std::map<std::string, std::size_t, std::less<>> index_;
};

/// A view of a ParamSet for one forward pass: on a tape every parameter is a
/// gradient leaf, otherwise a constant.
template <class T>
class Bound {
 public:
  Bound(const ParamSet<T>& params, Tape<T>* tape) : params_(&params) {
    handles_.reserve(params.size());
    for (std::size_t i = 0; i < params.size(); ++i)
      handles_.push_back(tape ? tape->leaf(params.value(i)) : params.value(i).detach());
  }

  const Tensor<T>& operator[](std::string_view name) const { return handles_[params_->index_of(name)]; }

  /// Gradients in parameter order; parameters unreachable from the loss get zeros.
  std::vector<std::vector<T>> gradients(const Gradients<T>& g) const {
    std::vector<std::vector<T>> out(handles_.size());
    for (std::size_t i = 0; i < handles_.size(); ++i) {
      const Tensor<T>* gi = handles_[i].node_id() ? g.find(*handles_[i].node_id()) : nullptr;
      if (gi)
        out[i].assign(gi->data().begin(), gi->data().end());
      else
        out[i].assign(handles_[i].size(), T{0});
    }
    return out;
  }

 private:
  const ParamSet<T>* params_;
  std::vector<Tensor<T>> handles_;
};

// ---------------------------------------------------------------------------
// Initialization

template <class T>
Tensor<T> glorot(Rng& rng, Shape shape, std::size_t fan_in, std::size_t fan_out, double gain = 1.0) {
  const double bound = gain * std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
  std::vector<T> v(numel(shape));
  for (T& x : v) x = static_cast<T>(rng.uniform(-bound, bound));
  return Tensor<T>(std::move(shape), std::move(v));
}

template <class T>
Tensor<T> filled(std::size_t n, double value) {
  return Tensor<T>({n}, static_cast<T>(value));
}

// ---------------------------------------------------------------------------
// Layers shared by the fusion module and the ASR surrogate

/// W: (out x in), x: (in x T) -> (out x T).
template <class T>
Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b) {
  return add_bias(matmul(w, x), b, 0);
}

template <class T>
void add_linear(ParamSet<T>& ps, const std::string& name, std::size_t in, std::size_t out, Rng& rng, double gain = 1.0) {
  ps.add(name + ".w", glorot<T>(rng, {out, in}, in, out, gain));
  ps.add(name + ".b", filled<T>(out, 0.0));
}

template <class T>
void add_norm(ParamSet<T>& ps, const std::string& name, std::size_t n) {
  ps.add(name + ".g", filled<T>(n, 1.0));
  ps.add(name + ".b", filled<T>(n, 0.0));
}

/// Sinusoidal position table, (d x T).
template <class T>
Tensor<T> positional_encoding(std::size_t d, std::size_t t) {
  Tensor<T> pe({d, t});
  auto p = pe.mutable_data();
  for (std::size_t i = 0; i < d; ++i) {
    const double rate = std::pow(10000.0, -static_cast<double>(2 * (i / 2)) / static_cast<double>(d));
    for (std::size_t j = 0; j < t; ++j) {
      const double a = static_cast<double>(j) * rate;
      p[i * t + j] = static_cast<T>(i % 2 == 0 ? std::sin(a) : std::cos(a));
    }
  }
  return pe;
}

struct AttentionShape {
  std::size_t width = 0;
  std::size_t heads = 1;
  std::size_t ffn = 0;
  bool cross = false;
};

template <class T>
void add_attention_layer(ParamSet<T>& ps, const std::string& prefix, const AttentionShape& s, Rng& rng) {
  if (s.heads == 0 || s.width % s.heads != 0)
    throw std::invalid_argument("attention width " + std::to_string(s.width) + " not divisible by " +
                                std::to_string(s.heads) + " heads");
  add_norm(ps, prefix + "ln_q", s.width);
  if (s.cross) add_norm(ps, prefix + "ln_kv", s.width);
  add_linear(ps, prefix + "q", s.width, s.width, rng);
  add_linear(ps, prefix + "k", s.width, s.width, rng);
  add_linear(ps, prefix + "v", s.width, s.width, rng);
  add_linear(ps, prefix + "o", s.width, s.width, rng);
  add_norm(ps, prefix + "ln_f", s.width);
  add_linear(ps, prefix + "ff1", s.width, s.ffn, rng);
  add_linear(ps, prefix + "ff2", s.ffn, s.width, rng);
}

/// Pre-norm multi-head attention layer with a feed-forward sublayer.
/// Queries come from `query` (d x Tq), keys and values from `kv` (d x Tk).
/// The residual path follows the query stream. Key positions flagged in
/// `kv_mask` are excluded from every softmax. When `probs` is non-null the
/// attention weights (heads x Tq x Tk) are appended to it.
template <class T>
Tensor<T> attention_layer(const Bound<T>& p, const std::string& prefix, const AttentionShape& s, const Tensor<T>& query,
                          const Tensor<T>& kv, std::span<const std::uint8_t> kv_mask = {},
                          std::vector<Tensor<T>>* probs = nullptr) {
  const std::size_t d = s.width, h = s.heads, dh = d / h;
  const std::size_t tq = query.dim(1), tk = kv.dim(1);
  const Tensor<T> qn = layer_norm(query, p[prefix + "ln_q.g"], p[prefix + "ln_q.b"]);
  const Tensor<T> kn = s.cross ? layer_norm(kv, p[prefix + "ln_kv.g"], p[prefix + "ln_kv.b"]) : qn;
  const Tensor<T> q = reshape(linear(qn, p[prefix + "q.w"], p[prefix + "q.b"]), {h, dh, tq});
  const Tensor<T> k = reshape(linear(kn, p[prefix + "k.w"], p[prefix + "k.b"]), {h, dh, tk});
  const Tensor<T> v = reshape(linear(kn, p[prefix + "v.w"], p[prefix + "v.b"]), {h, dh, tk});
  const Tensor<T> scores = scale(matmul(q, k, true, false), 1.0 / std::sqrt(static_cast<double>(dh)));
  const Tensor<T> w = softmax(scores, 2, kv_mask);
  if (probs) probs->push_back(w.detach());
  const Tensor<T> ctx = reshape(matmul(v, w, false, true), {d, tq});
  const Tensor<T> hidden = add(query, linear(ctx, p[prefix + "o.w"], p[prefix + "o.b"]));
  const Tensor<T> fn = layer_norm(hidden, p[prefix + "ln_f.g"], p[prefix + "ln_f.b"]);
  const Tensor<T> ff = linear(gelu(linear(fn, p[prefix + "ff1.w"], p[prefix + "ff1.b"])), p[prefix + "ff2.w"],
                              p[prefix + "ff2.b"]);
  return add(hidden, ff);
}

// ---------------------------------------------------------------------------
// Optimizer

struct AdamConfig {
  double beta1 = 0.9;
  double beta2 = 0.98;
  double eps = 1e-8;
  double clip_norm = 1.0;  // global gradient norm; <= 0 disables
};

/// Adam without weight decay. State is keyed by parameter name, so only the
/// parameters passed to step() ever change.
template <class T>
class Adam {
 public:
  explicit Adam(AdamConfig cfg = {}) : cfg_(cfg) {}

  /// `grads` is in `params` order. Parameters for which `trainable(name)` is
  /// false are skipped entirely and excluded from the clipping norm.
  /// Returns the pre-clipping global norm.
  double step(ParamSet<T>& params, const std::vector<std::vector<T>>& grads, double lr,
              const std::function<bool(std::string_view)>& trainable) {
    if (grads.size() != params.size()) throw std::invalid_argument("adam: gradient count mismatch");
    double sq = 0;
    for (std::size_t i = 0; i < params.size(); ++i) {
      if (!trainable(params.names()[i])) continue;
      for (T g : grads[i]) sq += static_cast<double>(g) * g;
    }
    const double norm = std::sqrt(sq);
    const double clip = (cfg_.clip_norm > 0 && norm > cfg_.clip_norm) ? cfg_.clip_norm / norm : 1.0;
    ++t_;
    const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
    for (std::size_t i = 0; i < params.size(); ++i) {
      const std::string& name = params.names()[i];
      if (!trainable(name)) continue;
      auto& st = state_[name];
      auto w = params.value(i).mutable_data();
      if (st.m.empty()) {
        st.m.assign(w.size(), 0.0);
        st.v.assign(w.size(), 0.0);
      }
      for (std::size_t j = 0; j < w.size(); ++j) {
        const double g = static_cast<double>(grads[i][j]) * clip;
        st.m[j] = cfg_.beta1 * st.m[j] + (1 - cfg_.beta1) * g;
        st.v[j] = cfg_.beta2 * st.v[j] + (1 - cfg_.beta2) * g * g;
        const double mh = st.m[j] / bc1, vh = st.v[j] / bc2;
        w[j] = static_cast<T>(w[j] - lr * mh / (std::sqrt(vh) + cfg_.eps));
      }
    }
    return norm;
  }

  std::size_t steps() const noexcept { return t_; }

 private:
  struct Moments {
    std::vector<double> m, v;
  };
  AdamConfig cfg_;
  std::map<std::string, Moments, std::less<>> state_;
  std::size_t t_ = 0;
};

}  // namespace avf
