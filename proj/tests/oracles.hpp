#pragma once

// Independent reference implementations for the tests. Everything here is
// written as plain loops over doubles and shares no code with the library
// beyond the Tensor container.

#include <algorithm>
#include <cmath>
#include <functional>
#include <numeric>
#include <string>
#include <vector>

#include "avfusion/nn.hpp"
#include "avfusion/rng.hpp"
#include "avfusion/tensor.hpp"

namespace oracle {

using avf::Rng;
using avf::Shape;
using Td = avf::Tensor<double>;

inline Td random_tensor(Rng& rng, Shape shape, double lo = -1.0, double hi = 1.0) {
  Td t(std::move(shape));
  for (double& v : t.mutable_data()) v = rng.uniform(lo, hi);
  return t;
}

inline std::size_t rand_size(Rng& rng, std::size_t lo, std::size_t hi) {
  return static_cast<std::size_t>(rng.uniform_int(static_cast<std::int64_t>(lo), static_cast<std::int64_t>(hi)));
}

/// Direct-sum N-d convolution (cross-correlation) on (N, C, spatial...)
/// with zero padding; spatial rank 1..3.
inline Td conv_nd(const Td& x, const Td& w, const Td* bias, const std::vector<std::size_t>& stride,
                  const std::vector<std::size_t>& pad) {
  const std::size_t r = x.rank() - 2;
  std::array<std::size_t, 3> in{1, 1, 1}, k{1, 1, 1}, s{1, 1, 1}, p{0, 0, 0}, out{1, 1, 1};
  for (std::size_t i = 0; i < r; ++i) {
    in[i] = x.dim(2 + i);
    k[i] = w.dim(2 + i);
    s[i] = stride[i];
    p[i] = pad[i];
    out[i] = (in[i] + 2 * p[i] - k[i]) / s[i] + 1;
  }
  const std::size_t N = x.dim(0), C = x.dim(1), O = w.dim(0);
  Shape os{N, O};
  for (std::size_t i = 0; i < r; ++i) os.push_back(out[i]);
  Td y(os);
  auto xv = x.data();
  auto wv = w.data();
  auto yv = y.mutable_data();
  for (std::size_t n = 0; n < N; ++n)
    for (std::size_t o = 0; o < O; ++o)
      for (std::size_t a = 0; a < out[0]; ++a)
        for (std::size_t b = 0; b < out[1]; ++b)
          for (std::size_t c = 0; c < out[2]; ++c) {
            double acc = bias ? (*bias)[o] : 0.0;
            for (std::size_t ci = 0; ci < C; ++ci)
              for (std::size_t i = 0; i < k[0]; ++i)
                for (std::size_t j = 0; j < k[1]; ++j)
                  for (std::size_t l = 0; l < k[2]; ++l) {
                    const long ia = static_cast<long>(a * s[0] + i) - static_cast<long>(p[0]);
                    const long ib = static_cast<long>(b * s[1] + j) - static_cast<long>(p[1]);
                    const long ic = static_cast<long>(c * s[2] + l) - static_cast<long>(p[2]);
                    if (ia < 0 || ib < 0 || ic < 0 || ia >= static_cast<long>(in[0]) || ib >= static_cast<long>(in[1]) ||
                        ic >= static_cast<long>(in[2]))
                      continue;
                    const std::size_t xi = (((n * C + ci) * in[0] + ia) * in[1] + ib) * in[2] + ic;
                    const std::size_t wi = (((o * C + ci) * k[0] + i) * k[1] + j) * k[2] + l;
                    acc += xv[xi] * wv[wi];
                  }
            yv[(((n * O + o) * out[0] + a) * out[1] + b) * out[2] + c] = acc;
          }
  return y;
}

/// Scatter form of the transposed convolution on x: (Cin, T), w: (Cin, Cout, k).
inline Td conv_transpose_1d(const Td& x, const Td& w, const Td* bias, std::size_t stride, std::size_t pad) {
  const std::size_t cin = x.dim(0), tin = x.dim(1), cout = w.dim(1), k = w.dim(2);
  const long full = static_cast<long>((tin - 1) * stride + k);
  const std::size_t tout = static_cast<std::size_t>(full - 2 * static_cast<long>(pad));
  Td y({cout, tout});
  auto yv = y.mutable_data();
  for (std::size_t co = 0; co < cout; ++co)
    for (std::size_t t = 0; t < tout; ++t) yv[co * tout + t] = bias ? (*bias)[co] : 0.0;
  for (std::size_t ci = 0; ci < cin; ++ci)
    for (std::size_t t = 0; t < tin; ++t)
      for (std::size_t co = 0; co < cout; ++co)
        for (std::size_t j = 0; j < k; ++j) {
          const long pos = static_cast<long>(t * stride + j) - static_cast<long>(pad);
          if (pos < 0 || pos >= static_cast<long>(tout)) continue;
          yv[co * tout + static_cast<std::size_t>(pos)] += x[ci * tin + t] * w[(ci * cout + co) * k + j];
        }
  return y;
}

inline Td matmul(const Td& a, const Td& b) {
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  Td c({m, n});
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) {
      double s = 0;
      for (std::size_t l = 0; l < k; ++l) s += a[i * k + l] * b[l * n + j];
      c.mutable_data()[i * n + j] = s;
    }
  return c;
}

inline Td transpose(const Td& a) {
  Td t({a.dim(1), a.dim(0)});
  for (std::size_t i = 0; i < a.dim(0); ++i)
    for (std::size_t j = 0; j < a.dim(1); ++j) t.mutable_data()[j * a.dim(0) + i] = a[i * a.dim(1) + j];
  return t;
}

/// Two-pass softmax along the columns of each row of a (rows, n) matrix.
inline std::vector<double> softmax_row(const std::vector<double>& row) {
  std::vector<double> e(row.size());
  double s = 0;
  for (std::size_t i = 0; i < row.size(); ++i) s += (e[i] = std::exp(row[i]));
  for (double& v : e) v /= s;
  return e;
}

/// Mean over rows of -log(softmax(pred_row)[argmax(target_row)]), computed
/// naively: softmax first, then the log.
inline double naive_ce(const Td& target, const Td& pred) {
  const std::size_t rows = pred.dim(0), C = pred.dim(1);
  double total = 0;
  for (std::size_t r = 0; r < rows; ++r) {
    std::vector<double> tr(target.data().begin() + r * C, target.data().begin() + (r + 1) * C);
    std::vector<double> pr(pred.data().begin() + r * C, pred.data().begin() + (r + 1) * C);
    const std::size_t c = static_cast<std::size_t>(std::max_element(tr.begin(), tr.end()) - tr.begin());
    total += -std::log(softmax_row(pr)[c]);
  }
  return total / static_cast<double>(rows);
}

inline double naive_l1(const Td& a, const Td& b) {
  double s = 0;
  for (std::size_t i = 0; i < a.size(); ++i) s += std::fabs(a[i] - b[i]);
  return s / static_cast<double>(a.size());
}

/// Levenshtein distance by the textbook full-matrix recurrence.
template <class W>
std::size_t levenshtein(const std::vector<W>& a, const std::vector<W>& b) {
  std::vector<std::vector<std::size_t>> d(a.size() + 1, std::vector<std::size_t>(b.size() + 1));
  for (std::size_t i = 0; i <= a.size(); ++i) d[i][0] = i;
  for (std::size_t j = 0; j <= b.size(); ++j) d[0][j] = j;
  for (std::size_t i = 1; i <= a.size(); ++i)
    for (std::size_t j = 1; j <= b.size(); ++j)
      d[i][j] = std::min({d[i - 1][j] + 1, d[i][j - 1] + 1, d[i - 1][j - 1] + (a[i - 1] == b[j - 1] ? 0 : 1)});
  return d[a.size()][b.size()];
}

/// Cheapest edit script by plain recursion over every script (no table),
/// exponential in length and only used on tiny inputs.
template <class W>
std::size_t brute_force_edits(const std::vector<W>& ref, const std::vector<W>& hyp) {
  std::function<std::size_t(std::size_t, std::size_t)> best = [&](std::size_t i, std::size_t j) -> std::size_t {
    if (i == ref.size()) return hyp.size() - j;  // insert the rest
    if (j == hyp.size()) return ref.size() - i;  // delete the rest
    std::size_t r = std::min(best(i + 1, j) + 1, best(i, j + 1) + 1);
    r = std::min(r, best(i + 1, j + 1) + (ref[i] == hyp[j] ? 0 : 1));
    return r;
  };
  return best(0, 0);
}

/// Pearson correlation coefficient.
inline double pearson(const std::vector<double>& a, const std::vector<double>& b) {
  const double n = static_cast<double>(a.size());
  const double ma = std::accumulate(a.begin(), a.end(), 0.0) / n, mb = std::accumulate(b.begin(), b.end(), 0.0) / n;
  double sab = 0, saa = 0, sbb = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    sab += (a[i] - ma) * (b[i] - mb);
    saa += (a[i] - ma) * (a[i] - ma);
    sbb += (b[i] - mb) * (b[i] - mb);
  }
  return sab / std::sqrt(saa * sbb);
}

/// Kolmogorov-Smirnov statistic of `xs` against Uniform[lo, hi].
inline double ks_uniform(std::vector<double> xs, double lo, double hi) {
  std::sort(xs.begin(), xs.end());
  const double n = static_cast<double>(xs.size());
  double d = 0;
  for (std::size_t i = 0; i < xs.size(); ++i) {
    const double f = std::clamp((xs[i] - lo) / (hi - lo), 0.0, 1.0);
    d = std::max({d, (static_cast<double>(i) + 1) / n - f, f - static_cast<double>(i) / n});
  }
  return d;
}

/// Asymptotic two-sided 1% critical value of the KS statistic.
inline double ks_critical_1pct(std::size_t n) { return 1.6276 / std::sqrt(static_cast<double>(n)); }

// ---------------------------------------------------------------------------
// Finite-difference probes per primitive

struct GradCase {
  std::string label;
  std::function<Td(const Td&)> f;
  Td x;
};

/// f(x) = sum(y * R) with fixed random weights R, so every output element
/// contributes with a distinct coefficient; rank-0 outputs pass through.
inline GradCase probe(Rng& rng, avf::Op kind, std::vector<Td> inputs, avf::OpAttrs attrs, std::size_t slot,
                      std::string label) {
  const Td y0 = avf::apply_primitive<double>(kind, std::span<const Td>(inputs), attrs);
  Td weights = random_tensor(rng, y0.shape(), 0.5, 1.5);
  Td x = inputs[slot].clone();
  auto f = [kind, inputs, attrs, slot, weights, rank0 = y0.rank() == 0](const Td& v) {
    std::vector<Td> in = inputs;
    in[slot] = v;
    Td y = avf::apply_primitive<double>(kind, std::span<const Td>(in), attrs);
    return rank0 ? y : avf::sum(avf::mul(y, weights));
  };
  return {std::string(avf::op_name(kind)) + "/" + label, f, x};
}

/// Random well-conditioned instances for `kind`, one probe per
/// differentiable input.
inline std::vector<GradCase> primitive_cases(avf::Op kind, Rng& rng) {
  using avf::Op;
  std::vector<GradCase> out;
  avf::OpAttrs a;
  auto shape_nd = [&](std::size_t rank, std::size_t lo, std::size_t hi) {
    Shape s;
    for (std::size_t i = 0; i < rank; ++i) s.push_back(rand_size(rng, lo, hi));
    return s;
  };
  switch (kind) {
    case Op::Add:
    case Op::Sub:
    case Op::Mul: {
      const Shape s = shape_nd(rand_size(rng, 1, 3), 1, 5);
      const bool scalar_b = rng.bernoulli(0.3);
      Td x = random_tensor(rng, s), y = random_tensor(rng, scalar_b ? Shape{} : s);
      out.push_back(probe(rng, kind, {x, y}, a, 0, "lhs"));
      out.push_back(probe(rng, kind, {x, y}, a, 1, scalar_b ? "scalar_rhs" : "rhs"));
      break;
    }
    case Op::Scale:
    case Op::AddScalar:
      a.scalar = rng.uniform(-2, 2);
      out.push_back(probe(rng, kind, {random_tensor(rng, shape_nd(2, 1, 5))}, a, 0, "x"));
      break;
    case Op::AddBias: {
      const Shape s = shape_nd(3, 1, 4);
      a.axis = rand_size(rng, 0, 2);
      Td x = random_tensor(rng, s), b = random_tensor(rng, {s[a.axis]});
      out.push_back(probe(rng, kind, {x, b}, a, 0, "x"));
      out.push_back(probe(rng, kind, {x, b}, a, 1, "bias"));
      break;
    }
    case Op::Matmul: {
      const std::size_t m = rand_size(rng, 1, 5), k = rand_size(rng, 1, 5), n = rand_size(rng, 1, 5);
      a.trans_a = rng.bernoulli(0.5);
      a.trans_b = rng.bernoulli(0.5);
      Td x = random_tensor(rng, a.trans_a ? Shape{k, m} : Shape{m, k});
      Td y = random_tensor(rng, a.trans_b ? Shape{n, k} : Shape{k, n});
      out.push_back(probe(rng, kind, {x, y}, a, 0, "a"));
      out.push_back(probe(rng, kind, {x, y}, a, 1, "b"));
      break;
    }
    case Op::Conv1d:
    case Op::Conv2d:
    case Op::Conv3d: {
      const std::size_t r = kind == Op::Conv1d ? 1 : kind == Op::Conv2d ? 2 : 3;
      const std::size_t n = rand_size(rng, 1, 2), c = rand_size(rng, 1, 3), o = rand_size(rng, 1, 3);
      Shape xs{n, c}, ws{o, c};
      for (std::size_t i = 0; i < r; ++i) {
        const std::size_t k = rand_size(rng, 1, 3);
        a.stride[i] = rand_size(rng, 1, 2);
        a.pad[i] = rand_size(rng, 0, k - 1);
        xs.push_back(rand_size(rng, k, k + (r == 3 ? 2 : 4)));
        ws.push_back(k);
      }
      Td x = random_tensor(rng, xs), w = random_tensor(rng, ws), b = random_tensor(rng, {o});
      out.push_back(probe(rng, kind, {x, w, b}, a, 0, "x"));
      out.push_back(probe(rng, kind, {x, w, b}, a, 1, "w"));
      out.push_back(probe(rng, kind, {x, w, b}, a, 2, "bias"));
      break;
    }
    case Op::ConvTranspose1d: {
      const std::size_t cin = rand_size(rng, 1, 3), cout = rand_size(rng, 1, 3), k = rand_size(rng, 2, 4);
      a.stride[0] = rand_size(rng, 1, 3);
      a.pad[0] = rand_size(rng, 0, k / 2);
      Shape xs{cin, rand_size(rng, 2, 5)};
      if (rng.bernoulli(0.5)) xs.push_back(rand_size(rng, 1, 3));
      Td x = random_tensor(rng, xs), w = random_tensor(rng, {cin, cout, k}), b = random_tensor(rng, {cout});
      out.push_back(probe(rng, kind, {x, w, b}, a, 0, "x"));
      out.push_back(probe(rng, kind, {x, w, b}, a, 1, "w"));
      out.push_back(probe(rng, kind, {x, w, b}, a, 2, "bias"));
      break;
    }
    case Op::Gelu:
      out.push_back(probe(rng, kind, {random_tensor(rng, shape_nd(2, 1, 5), -3, 3)}, a, 0, "x"));
      break;
    case Op::Softmax: {
      const Shape s = shape_nd(rand_size(rng, 1, 3), 2, 5);
      a.axis = rand_size(rng, 0, s.size() - 1);
      if (rng.bernoulli(0.5)) {
        a.mask.assign(s[a.axis], 0);
        a.mask[rand_size(rng, 0, s[a.axis] - 1)] = 1;
      }
      out.push_back(probe(rng, kind, {random_tensor(rng, s, -2, 2)}, a, 0, a.mask.empty() ? "x" : "masked"));
      break;
    }
    case Op::LayerNorm: {
      const std::size_t d = rand_size(rng, 2, 6), t = rand_size(rng, 1, 4);
      Td x = random_tensor(rng, {d, t}), g = random_tensor(rng, {d}, 0.5, 1.5), b = random_tensor(rng, {d});
      out.push_back(probe(rng, kind, {x, g, b}, a, 0, "x"));
      out.push_back(probe(rng, kind, {x, g, b}, a, 1, "gamma"));
      out.push_back(probe(rng, kind, {x, g, b}, a, 2, "beta"));
      break;
    }
    case Op::GroupNorm: {
      a.groups = rand_size(rng, 1, 3);
      const std::size_t c = a.groups * rand_size(rng, 1, 2);
      Shape s{rand_size(rng, 1, 2), c, rand_size(rng, 1, 4)};
      if (rng.bernoulli(0.5)) s.push_back(rand_size(rng, 1, 3));
      if (c == a.groups && avf::numel(s) / (s[0] * c) == 1) s[2] = 2;  // at least two values per group
      Td x = random_tensor(rng, s), g = random_tensor(rng, {c}, 0.5, 1.5), b = random_tensor(rng, {c});
      out.push_back(probe(rng, kind, {x, g, b}, a, 0, "x"));
      out.push_back(probe(rng, kind, {x, g, b}, a, 1, "gamma"));
      out.push_back(probe(rng, kind, {x, g, b}, a, 2, "beta"));
      break;
    }
    case Op::MeanAxis: {
      const Shape s = shape_nd(rand_size(rng, 1, 3), 1, 5);
      a.axis = rand_size(rng, 0, s.size() - 1);
      out.push_back(probe(rng, kind, {random_tensor(rng, s)}, a, 0, "x"));
      break;
    }
    case Op::Reshape: {
      const std::size_t p = rand_size(rng, 1, 4), q = rand_size(rng, 1, 4);
      a.shape = {q, p};
      out.push_back(probe(rng, kind, {random_tensor(rng, {p, q})}, a, 0, "x"));
      break;
    }
    case Op::Transpose:
      out.push_back(probe(rng, kind, {random_tensor(rng, shape_nd(2, 1, 5))}, a, 0, "x"));
      break;
    case Op::SliceLast: {
      const Shape s = shape_nd(rand_size(rng, 1, 3), 2, 6);
      a.begin = rand_size(rng, 0, s.back() - 1);
      a.end = rand_size(rng, a.begin + 1, s.back());
      out.push_back(probe(rng, kind, {random_tensor(rng, s)}, a, 0, "x"));
      break;
    }
    case Op::PadEdge: {
      const Shape s = shape_nd(rand_size(rng, 1, 3), 1, 4);
      a.axis = rand_size(rng, 0, s.size() - 1);
      a.before = rand_size(rng, 0, 3);
      a.after = rand_size(rng, 0, 3);
      out.push_back(probe(rng, kind, {random_tensor(rng, s)}, a, 0, "x"));
      break;
    }
    case Op::Sum:
    case Op::Mean:
      out.push_back(probe(rng, kind, {random_tensor(rng, shape_nd(rand_size(rng, 1, 3), 1, 5))}, a, 0, "x"));
      break;
    case Op::L1Loss: {
      const Shape s = shape_nd(2, 1, 5);
      Td t = random_tensor(rng, s), p = random_tensor(rng, s);
      out.push_back(probe(rng, kind, {t, p}, a, 0, "target"));
      out.push_back(probe(rng, kind, {t, p}, a, 1, "pred"));
      break;
    }
    case Op::CrossEntropy: {
      const Shape s{rand_size(rng, 1, 5), rand_size(rng, 2, 6)};
      out.push_back(probe(rng, kind, {random_tensor(rng, s, -3, 3), random_tensor(rng, s, -3, 3)}, a, 1, "pred"));
      break;
    }
    case Op::Leaf: break;
  }
  return out;
}

inline std::vector<avf::Op> differentiable_ops() {
  using avf::Op;
  return {Op::Add,       Op::Sub,     Op::Mul,       Op::Scale,     Op::AddScalar, Op::AddBias,
          Op::Matmul,    Op::Conv1d,  Op::Conv2d,    Op::Conv3d,    Op::ConvTranspose1d,
          Op::Gelu,      Op::Softmax, Op::LayerNorm, Op::GroupNorm, Op::MeanAxis,  Op::Reshape,
          Op::Transpose, Op::SliceLast, Op::PadEdge, Op::Sum,       Op::Mean,      Op::L1Loss,
          Op::CrossEntropy};
}

/// Central differences on a sample of elements of every parameter tensor.
/// Returns the worst |analytic - numeric| / max(1e-3·scale, |analytic|,
/// |numeric|) where scale is the largest gradient magnitude seen, so tiny
/// gradients are judged against the loss's overall gradient scale.
template <class LossFn>
double sampled_param_check(avf::ParamSet<double>& params, const LossFn& loss, std::size_t per_tensor, Rng& rng,
                           double h = 1e-6, std::string* worst_name = nullptr) {
  avf::Tape<double> tape;
  const avf::Bound<double> bound(params, &tape);
  const Td l = loss(bound);
  const auto grads = bound.gradients(tape.backward(l));
  double scale = 0;
  for (const auto& g : grads)
    for (double v : g) scale = std::max(scale, std::fabs(v));
  double worst = 0;
  for (std::size_t p = 0; p < params.size(); ++p) {
    auto data = params.value(p).mutable_data();
    for (std::size_t s = 0; s < std::min(per_tensor, data.size()); ++s) {
      const std::size_t i = rand_size(rng, 0, data.size() - 1);
      const double orig = data[i];
      data[i] = orig + h;
      const double fp = loss(avf::Bound<double>(params, nullptr)).item();
      data[i] = orig - h;
      const double fm = loss(avf::Bound<double>(params, nullptr)).item();
      data[i] = orig;
      const double numeric = (fp - fm) / (2 * h), analytic = grads[p][i];
      const double err = std::fabs(analytic - numeric) / std::max({1e-3 * scale, std::fabs(analytic), std::fabs(numeric)});
      if (err > worst) {
        worst = err;
        if (worst_name) *worst_name = params.names()[p];
      }
    }
  }
  return worst;
}

}  // namespace oracle
