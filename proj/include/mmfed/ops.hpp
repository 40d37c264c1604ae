// Copyright 2026 The mmfed Authors
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//      http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

// Differentiable operators over Tape-attached tensors. Every operator checks
// its shape contract up front and throws ShapeError naming the mismatch.

#pragma once

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <vector>

#include "mmfed/tape.hpp"
#include "mmfed/tensor.hpp"

namespace mmfed::ad {

namespace detail {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MatMap = Eigen::Map<RowMat>;
using ConstMatMap = Eigen::Map<const RowMat>;
using VecMap = Eigen::Map<Eigen::VectorXd>;
using ConstVecMap = Eigen::Map<const Eigen::VectorXd>;

inline ConstMatMap cmat(const Tensor& t, std::size_t rows, std::size_t cols) {
  return ConstMatMap(t.ptr(), static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols));
}
inline MatMap mat(Tensor& t, std::size_t rows, std::size_t cols) {
  return MatMap(t.ptr(), static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols));
}

inline void require(bool ok, const std::string& op, const std::string& what) {
  if (!ok) throw ShapeError(op + ": " + what);
}

inline void require_same(const Var& a, const Var& b, const char* op) {
  require(a.shape() == b.shape(), op,
          "shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
}

inline std::uint64_t hash_bits(const std::vector<std::uint8_t>& bits) {
  std::uint64_t h = 1469598103934665603ULL;
  for (std::uint8_t b : bits) {
    h ^= b;
    h *= 1099511628211ULL;
  }
  return h;
}

/// Unary elementwise op with a derivative computed from (input, output).
template <class F, class D>
Var unary(Var x, F f, D dfdx) {
  const Tensor& xv = x.value();
  Tensor out(xv.shape());
  for (std::size_t i = 0; i < xv.size(); ++i) out[i] = f(xv[i]);
  return x.tape->record(std::move(out), {x}, [x, dfdx](Tape& t, NodeId self) {
    const Tensor& g = t.grad_ref(Var{&t, self});
    const Tensor& xv = x.value();
    const Tensor& yv = t.value(self);
    Tensor* gx = t.accumulator(x);
    if (!gx) return;
    for (std::size_t i = 0; i < g.size(); ++i) (*gx)[i] += g[i] * dfdx(xv[i], yv[i]);
  });
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise arithmetic and reductions
// ---------------------------------------------------------------------------

inline Var add(Var a, Var b) {
  detail::require_same(a, b, "add");
  Tensor out = a.value();
  const Tensor& bv = b.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += bv[i];
  return a.tape->record(std::move(out), {a, b}, [a, b](Tape& t, NodeId self) {
    const Tensor& g = t.grad_ref(Var{&t, self});
    t.accumulate(a, g.data());
    t.accumulate(b, g.data());
  });
}

inline Var sub(Var a, Var b) {
  detail::require_same(a, b, "sub");
  Tensor out = a.value();
  const Tensor& bv = b.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] -= bv[i];
  return a.tape->record(std::move(out), {a, b}, [a, b](Tape& t, NodeId self) {
    const Tensor& g = t.grad_ref(Var{&t, self});
    t.accumulate(a, g.data());
    if (Tensor* gb = t.accumulator(b)) {
      for (std::size_t i = 0; i < g.size(); ++i) (*gb)[i] -= g[i];
    }
  });
}

/// Hadamard product.
inline Var mul(Var a, Var b) {
  detail::require_same(a, b, "mul");
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  Tensor out(av.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] * bv[i];
  return a.tape->record(std::move(out), {a, b}, [a, b](Tape& t, NodeId self) {
    const Tensor& g = t.grad_ref(Var{&t, self});
    const Tensor& av = a.value();
    const Tensor& bv = b.value();
    if (Tensor* ga = t.accumulator(a)) {
      for (std::size_t i = 0; i < g.size(); ++i) (*ga)[i] += g[i] * bv[i];
    }
    if (Tensor* gb = t.accumulator(b)) {
      for (std::size_t i = 0; i < g.size(); ++i) (*gb)[i] += g[i] * av[i];
    }
  });
}

/// Elementwise a / b.
inline Var div(Var a, Var b) {
  detail::require_same(a, b, "div");
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  Tensor out(av.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] / bv[i];
  return a.tape->record(std::move(out), {a, b}, [a, b](Tape& t, NodeId self) {
    const Tensor& g = t.grad_ref(Var{&t, self});
    const Tensor& av = a.value();
    const Tensor& bv = b.value();
    if (Tensor* ga = t.accumulator(a)) {
      for (std::size_t i = 0; i < g.size(); ++i) (*ga)[i] += g[i] / bv[i];
    }
    if (Tensor* gb = t.accumulator(b)) {
      for (std::size_t i = 0; i < g.size(); ++i) (*gb)[i] -= g[i] * av[i] / (bv[i] * bv[i]);
    }
  });
}

inline Var scale(Var x, double c) {
  return detail::unary(
      x, [c](double v) { return c * v; }, [c](double, double) { return c; });
}

inline Var add_scalar(Var x, double c) {
  return detail::unary(
      x, [c](double v) { return v + c; }, [](double, double) { return 1.0; });
}

inline Var log(Var x) {
  return detail::unary(
      x, [](double v) { return std::log(v); }, [](double v, double) { return 1.0 / v; });
}

/// Clamp to [lo, hi]; the gradient is zero where the bound is active.
inline Var clamp(Var x, double lo, double hi) {
  if (x.tape->branch_tracking()) {
    std::vector<std::uint8_t> bits(x.value().size());
    for (std::size_t i = 0; i < bits.size(); ++i) {
      const double v = x.value()[i];
      bits[i] = v < lo ? 1 : (v > hi ? 2 : 0);
    }
    x.tape->fold_branch(detail::hash_bits(bits));
  }
  return detail::unary(
      x, [lo, hi](double v) { return std::clamp(v, lo, hi); },
      [lo, hi](double v, double) { return (v >= lo && v <= hi) ? 1.0 : 0.0; });
}

inline Var relu(Var x) {
  if (x.tape->branch_tracking()) {
    std::vector<std::uint8_t> bits(x.value().size());
    for (std::size_t i = 0; i < bits.size(); ++i) bits[i] = x.value()[i] > 0.0;
    x.tape->fold_branch(detail::hash_bits(bits));
  }
  return detail::unary(
      x, [](double v) { return v > 0.0 ? v : 0.0; },
      [](double v, double) { return v > 0.0 ? 1.0 : 0.0; });
}

inline Var sigmoid(Var x) {
  return detail::unary(
      x, [](double v) { return 1.0 / (1.0 + std::exp(-v)); },
      [](double, double y) { return y * (1.0 - y); });
}

/// Sum of all elements, as a scalar.
inline Var sum(Var x) {
  double s = 0.0;
  for (double v : x.value().data()) s += v;
  return x.tape->record(Tensor::scalar(s), {x}, [x](Tape& t, NodeId self) {
    const double g = t.grad_ref(Var{&t, self})[0];
    if (Tensor* gx = t.accumulator(x)) {
      for (double& v : gx->data()) v += g;
    }
  });
}

inline Var mean(Var x) {
  const auto n = static_cast<double>(x.value().size());
  return scale(sum(x), 1.0 / n);
}

inline Var reshape(Var x, Shape shape) {
  Tensor out = x.value().reshaped(std::move(shape));
  return x.tape->record(std::move(out), {x}, [x](Tape& t, NodeId self) {
    t.accumulate(x, t.grad_ref(Var{&t, self}).data());
  });
}

// ---------------------------------------------------------------------------
// Layout operators
// ---------------------------------------------------------------------------

/// Concatenates along axis 0; trailing dimensions must agree.
inline Var concat_channels(const std::vector<Var>& parts) {
  detail::require(!parts.empty(), "concat_channels", "no operands");
  const Shape& ref = parts.front().shape();
  detail::require(ref.size() >= 1, "concat_channels", "rank-0 operand");
  Shape out_shape = ref;
  out_shape[0] = 0;
  for (const Var& p : parts) {
    const Shape& s = p.shape();
    detail::require(s.size() == ref.size() && std::equal(s.begin() + 1, s.end(), ref.begin() + 1),
                    "concat_channels",
                    "trailing dims differ: " + shape_str(s) + " vs " + shape_str(ref));
    out_shape[0] += s[0];
  }
  Tensor out(out_shape);
  std::size_t off = 0;
  for (const Var& p : parts) {
    std::copy(p.value().ptr(), p.value().ptr() + p.value().size(), out.ptr() + off);
    off += p.value().size();
  }
  return parts.front().tape->record(std::move(out), parts, [parts](Tape& t, NodeId self) {
    const Tensor& g = t.grad_ref(Var{&t, self});
    std::size_t off = 0;
    for (const Var& p : parts) {
      const std::size_t n = p.value().size();
      t.accumulate(p, std::span<const double>(g.ptr() + off, n));
      off += n;
    }
  });
}

inline Var concat_channels(Var a, Var b) { return concat_channels(std::vector<Var>{a, b}); }

/// Rows [start, start + count) of axis 0.
inline Var slice_channels(Var x, std::size_t start, std::size_t count) {
  const Shape& s = x.shape();
  detail::require(s.size() >= 1 && start + count <= s[0], "slice_channels",
                  "range out of bounds for " + shape_str(s));
  const std::size_t inner = s[0] ? x.value().size() / s[0] : 0;
  Shape os = s;
  os[0] = count;
  Tensor out(os);
  std::copy(x.value().ptr() + start * inner, x.value().ptr() + (start + count) * inner, out.ptr());
  return x.tape->record(std::move(out), {x}, [x, start, inner](Tape& t, NodeId self) {
    const Tensor& g = t.grad_ref(Var{&t, self});
    if (Tensor* gx = t.accumulator(x)) {
      double* dst = gx->ptr() + start * inner;
      for (std::size_t i = 0; i < g.size(); ++i) dst[i] += g[i];
    }
  });
}

/// Columns [start, start + count) of a matrix.
inline Var slice_cols(Var x, std::size_t start, std::size_t count) {
  const Shape& s = x.shape();
  detail::require(s.size() == 2 && start + count <= s[1], "slice_cols",
                  "range out of bounds for " + shape_str(s));
  const std::size_t rows = s[0], cols = s[1];
  Tensor out(Shape{rows, count});
  for (std::size_t r = 0; r < rows; ++r) {
    std::copy_n(x.value().ptr() + r * cols + start, count, out.ptr() + r * count);
  }
  return x.tape->record(std::move(out), {x}, [x, start, count, rows, cols](Tape& t, NodeId self) {
    const Tensor& g = t.grad_ref(Var{&t, self});
    if (Tensor* gx = t.accumulator(x)) {
      for (std::size_t r = 0; r < rows; ++r) {
        for (std::size_t c = 0; c < count; ++c) (*gx)[r * cols + start + c] += g[r * count + c];
      }
    }
  });
}

/// Concatenates matrices along columns.
inline Var concat_cols(const std::vector<Var>& parts) {
  detail::require(!parts.empty(), "concat_cols", "no operands");
  const std::size_t rows = parts.front().shape().at(0);
  std::size_t cols = 0;
  for (const Var& p : parts) {
    detail::require(p.shape().size() == 2 && p.shape()[0] == rows, "concat_cols",
                    "row count mismatch at " + shape_str(p.shape()));
    cols += p.shape()[1];
  }
  Tensor out(Shape{rows, cols});
  std::size_t c0 = 0;
  for (const Var& p : parts) {
    const std::size_t pc = p.shape()[1];
    for (std::size_t r = 0; r < rows; ++r) {
      std::copy_n(p.value().ptr() + r * pc, pc, out.ptr() + r * cols + c0);
    }
    c0 += pc;
  }
  return parts.front().tape->record(std::move(out), parts, [parts, rows, cols](Tape& t, NodeId self) {
    const Tensor& g = t.grad_ref(Var{&t, self});
    std::size_t c0 = 0;
    for (const Var& p : parts) {
      const std::size_t pc = p.shape()[1];
      if (Tensor* gp = t.accumulator(p)) {
        for (std::size_t r = 0; r < rows; ++r) {
          for (std::size_t c = 0; c < pc; ++c) (*gp)[r * pc + c] += g[r * cols + c0 + c];
        }
      }
      c0 += pc;
    }
  });
}

inline Var transpose(Var x) {
  const Shape& s = x.shape();
  detail::require(s.size() == 2, "transpose", "expects a matrix, got " + shape_str(s));
  const std::size_t r = s[0], c = s[1];
  Tensor out(Shape{c, r});
  detail::mat(out, c, r) = detail::cmat(x.value(), r, c).transpose();
  return x.tape->record(std::move(out), {x}, [x, r, c](Tape& t, NodeId self) {
    if (Tensor* gx = t.accumulator(x)) {
      detail::mat(*gx, r, c) += detail::cmat(t.grad_ref(Var{&t, self}), c, r).transpose();
    }
  });
}

// ---------------------------------------------------------------------------
// Dense algebra
// ---------------------------------------------------------------------------

inline Var matmul(Var a, Var b) {
  const Shape& sa = a.shape();
  const Shape& sb = b.shape();
  detail::require(sa.size() == 2 && sb.size() == 2 && sa[1] == sb[0], "matmul",
                  "incompatible " + shape_str(sa) + " x " + shape_str(sb));
  const std::size_t m = sa[0], k = sa[1], n = sb[1];
  Tensor out(Shape{m, n});
  detail::mat(out, m, n).noalias() = detail::cmat(a.value(), m, k) * detail::cmat(b.value(), k, n);
  a.tape->add_flops(2ULL * m * k * n);
  return a.tape->record(std::move(out), {a, b}, [a, b, m, k, n](Tape& t, NodeId self) {
    auto g = detail::cmat(t.grad_ref(Var{&t, self}), m, n);
    if (Tensor* ga = t.accumulator(a)) {
      detail::mat(*ga, m, k).noalias() += g * detail::cmat(b.value(), k, n).transpose();
    }
    if (Tensor* gb = t.accumulator(b)) {
      detail::mat(*gb, k, n).noalias() += detail::cmat(a.value(), m, k).transpose() * g;
    }
  });
}

/// x[T, d_in] * W[d_in, d_out] + b[d_out].
inline Var linear(Var x, Var w, Var b) {
  const Shape& sx = x.shape();
  const Shape& sw = w.shape();
  detail::require(sx.size() == 2 && sw.size() == 2 && sx[1] == sw[0], "linear",
                  "input " + shape_str(sx) + " incompatible with weight " + shape_str(sw));
  detail::require(b.shape() == Shape{sw[1]}, "linear",
                  "bias " + shape_str(b.shape()) + " does not match d_out " + std::to_string(sw[1]));
  const std::size_t rows = sx[0], din = sx[1], dout = sw[1];
  Tensor out(Shape{rows, dout});
  auto o = detail::mat(out, rows, dout);
  o.noalias() = detail::cmat(x.value(), rows, din) * detail::cmat(w.value(), din, dout);
  o.rowwise() += detail::cmat(b.value(), 1, dout).row(0);
  x.tape->add_flops(2ULL * rows * din * dout, rows * dout);
  return x.tape->record(std::move(out), {x, w, b}, [x, w, b, rows, din, dout](Tape& t, NodeId self) {
    auto g = detail::cmat(t.grad_ref(Var{&t, self}), rows, dout);
    if (Tensor* gx = t.accumulator(x)) {
      detail::mat(*gx, rows, din).noalias() += g * detail::cmat(w.value(), din, dout).transpose();
    }
    if (Tensor* gw = t.accumulator(w)) {
      detail::mat(*gw, din, dout).noalias() += detail::cmat(x.value(), rows, din).transpose() * g;
    }
    if (Tensor* gb = t.accumulator(b)) {
      detail::mat(*gb, 1, dout) += g.colwise().sum();
    }
  });
}

/// Row-wise softmax of a matrix, stabilized by subtracting the row maximum.
inline Var softmax_rows(Var x) {
  const Shape& s = x.shape();
  detail::require(s.size() == 2 && s[1] >= 1, "softmax_rows", "expects a matrix, got " + shape_str(s));
  const std::size_t rows = s[0], cols = s[1];
  Tensor out(s);
  const Tensor& xv = x.value();
  for (std::size_t r = 0; r < rows; ++r) {
    const double* in = xv.ptr() + r * cols;
    double* o = out.ptr() + r * cols;
    const double mx = *std::max_element(in, in + cols);
    double z = 0.0;
    for (std::size_t c = 0; c < cols; ++c) z += (o[c] = std::exp(in[c] - mx));
    for (std::size_t c = 0; c < cols; ++c) o[c] /= z;
  }
  return x.tape->record(std::move(out), {x}, [x, rows, cols](Tape& t, NodeId self) {
    const Tensor& g = t.grad_ref(Var{&t, self});
    const Tensor& y = t.value(self);
    Tensor* gx = t.accumulator(x);
    if (!gx) return;
    for (std::size_t r = 0; r < rows; ++r) {
      const double* yr = y.ptr() + r * cols;
      const double* gr = g.ptr() + r * cols;
      double dot = 0.0;
      for (std::size_t c = 0; c < cols; ++c) dot += yr[c] * gr[c];
      double* out = gx->ptr() + r * cols;
      for (std::size_t c = 0; c < cols; ++c) out[c] += yr[c] * (gr[c] - dot);
    }
  });
}

/// Softmax across axis 0 of a [K, ...] tensor, independently per trailing
/// position (per-pixel class probabilities).
inline Var softmax_channels(Var x) {
  const Shape& s = x.shape();
  detail::require(s.size() >= 1 && s[0] >= 1, "softmax_channels", "empty class axis");
  const std::size_t k = s[0];
  const std::size_t n = x.value().size() / k;
  const Tensor& xv = x.value();
  Tensor out(s);
  for (std::size_t p = 0; p < n; ++p) {
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t c = 0; c < k; ++c) mx = std::max(mx, xv[c * n + p]);
    double z = 0.0;
    for (std::size_t c = 0; c < k; ++c) z += (out[c * n + p] = std::exp(xv[c * n + p] - mx));
    for (std::size_t c = 0; c < k; ++c) out[c * n + p] /= z;
  }
  return x.tape->record(std::move(out), {x}, [x, k, n](Tape& t, NodeId self) {
    const Tensor& g = t.grad_ref(Var{&t, self});
    const Tensor& y = t.value(self);
    Tensor* gx = t.accumulator(x);
    if (!gx) return;
    for (std::size_t p = 0; p < n; ++p) {
      double dot = 0.0;
      for (std::size_t c = 0; c < k; ++c) dot += y[c * n + p] * g[c * n + p];
      for (std::size_t c = 0; c < k; ++c) (*gx)[c * n + p] += y[c * n + p] * (g[c * n + p] - dot);
    }
  });
}

inline constexpr double kLayerNormEps = 1e-5;

/// Normalizes each row of x[T, D] to zero mean and unit variance, then applies
/// the affine gamma[D], beta[D].
inline Var layer_norm(Var x, Var gamma, Var beta, double eps = kLayerNormEps) {
  const Shape& s = x.shape();
  detail::require(s.size() == 2, "layer_norm", "expects a matrix, got " + shape_str(s));
  const std::size_t rows = s[0], d = s[1];
  detail::require(gamma.shape() == Shape{d} && beta.shape() == Shape{d}, "layer_norm",
                  "affine parameters must have shape [" + std::to_string(d) + "]");
  const Tensor& xv = x.value();
  Tensor xhat(s);
  std::vector<double> inv_std(rows);
  Tensor out(s);
  for (std::size_t r = 0; r < rows; ++r) {
    const double* in = xv.ptr() + r * d;
    double mu = 0.0;
    for (std::size_t c = 0; c < d; ++c) mu += in[c];
    mu /= static_cast<double>(d);
    double var = 0.0;
    for (std::size_t c = 0; c < d; ++c) var += (in[c] - mu) * (in[c] - mu);
    var /= static_cast<double>(d);
    const double is = 1.0 / std::sqrt(var + eps);
    inv_std[r] = is;
    for (std::size_t c = 0; c < d; ++c) {
      const double h = (in[c] - mu) * is;
      xhat[r * d + c] = h;
      out[r * d + c] = h * gamma.value()[c] + beta.value()[c];
    }
  }
  return x.tape->record(
      std::move(out), {x, gamma, beta},
      [x, gamma, beta, rows, d, xhat = std::move(xhat), inv_std = std::move(inv_std)](Tape& t, NodeId self) {
        const Tensor& g = t.grad_ref(Var{&t, self});
        if (Tensor* gg = t.accumulator(gamma)) {
          for (std::size_t r = 0; r < rows; ++r)
            for (std::size_t c = 0; c < d; ++c) (*gg)[c] += g[r * d + c] * xhat[r * d + c];
        }
        if (Tensor* gb = t.accumulator(beta)) {
          for (std::size_t r = 0; r < rows; ++r)
            for (std::size_t c = 0; c < d; ++c) (*gb)[c] += g[r * d + c];
        }
        Tensor* gx = t.accumulator(x);
        if (!gx) return;
        const Tensor& gam = gamma.value();
        const double inv_d = 1.0 / static_cast<double>(d);
        for (std::size_t r = 0; r < rows; ++r) {
          double s1 = 0.0, s2 = 0.0;
          for (std::size_t c = 0; c < d; ++c) {
            const double gh = g[r * d + c] * gam[c];
            s1 += gh;
            s2 += gh * xhat[r * d + c];
          }
          for (std::size_t c = 0; c < d; ++c) {
            const double gh = g[r * d + c] * gam[c];
            (*gx)[r * d + c] += inv_std[r] * (gh - inv_d * s1 - xhat[r * d + c] * inv_d * s2);
          }
        }
      });
}

/// softmax(Q K^T / sqrt(d)) V for Q, K, V of shape [T, d].
inline Var scaled_attention(Var q, Var k, Var v) {
  const Shape& sq = q.shape();
  detail::require(sq.size() == 2, "scaled_attention", "Q must be [T, d], got " + shape_str(sq));
  detail::require(sq[0] >= 1, "scaled_attention", "token count T must be >= 1");
  detail::require(sq[1] >= 1, "scaled_attention", "head dim d must be >= 1");
  detail::require(k.shape() == sq && v.shape() == sq, "scaled_attention",
                  "Q, K, V shapes differ: " + shape_str(sq) + ", " + shape_str(k.shape()) + ", " +
                      shape_str(v.shape()));
  const std::size_t tokens = sq[0], d = sq[1];
  const double inv_sqrt_d = 1.0 / std::sqrt(static_cast<double>(d));
  Tensor probs(Shape{tokens, tokens});
  auto p = detail::mat(probs, tokens, tokens);
  p.noalias() = detail::cmat(q.value(), tokens, d) * detail::cmat(k.value(), tokens, d).transpose();
  p *= inv_sqrt_d;
  for (Eigen::Index r = 0; r < p.rows(); ++r) {
    const double mx = p.row(r).maxCoeff();
    p.row(r) = (p.row(r).array() - mx).exp();
    p.row(r) /= p.row(r).sum();
  }
  Tensor out(Shape{tokens, d});
  detail::mat(out, tokens, d).noalias() = p * detail::cmat(v.value(), tokens, d);
  q.tape->add_flops(4ULL * tokens * tokens * d);
  return q.tape->record(
      std::move(out), {q, k, v},
      [q, k, v, tokens, d, inv_sqrt_d, probs = std::move(probs)](Tape& t, NodeId self) {
        auto g = detail::cmat(t.grad_ref(Var{&t, self}), tokens, d);
        auto p = detail::cmat(probs, tokens, tokens);
        if (Tensor* gv = t.accumulator(v)) {
          detail::mat(*gv, tokens, d).noalias() += p.transpose() * g;
        }
        Tensor* gq = t.accumulator(q);
        Tensor* gk = t.accumulator(k);
        if (!gq && !gk) return;
        detail::RowMat ds = g * detail::cmat(v.value(), tokens, d).transpose();
        for (Eigen::Index r = 0; r < ds.rows(); ++r) {
          const double dot = ds.row(r).dot(p.row(r));
          ds.row(r) = (ds.row(r).array() - dot) * p.row(r).array();
        }
        ds *= inv_sqrt_d;
        if (gq) detail::mat(*gq, tokens, d).noalias() += ds * detail::cmat(k.value(), tokens, d);
        if (gk) detail::mat(*gk, tokens, d).noalias() += ds.transpose() * detail::cmat(q.value(), tokens, d);
      });
}

// ---------------------------------------------------------------------------
// Spatial operators on [C, H, W]
// ---------------------------------------------------------------------------

inline std::size_t conv_out_size(std::size_t in, std::size_t k, std::size_t stride, std::size_t pad) {
  return (in + 2 * pad - k) / stride + 1;
}

/// Cross-correlation of x[C_in, H, W] with kernels[C_out, C_in, k, k] plus bias.
inline Var conv2d(Var x, Var kernels, Var bias, std::size_t stride = 1, std::size_t padding = 0) {
  const Shape& sx = x.shape();
  const Shape& sk = kernels.shape();
  detail::require(sx.size() == 3, "conv2d", "input must be [C, H, W], got " + shape_str(sx));
  detail::require(sk.size() == 4 && sk[2] == sk[3], "conv2d",
                  "kernels must be [C_out, C_in, k, k], got " + shape_str(sk));
  detail::require(sk[1] == sx[0], "conv2d",
                  "kernel C_in " + std::to_string(sk[1]) + " != input channels " + std::to_string(sx[0]));
  detail::require(bias.shape() == Shape{sk[0]}, "conv2d",
                  "bias " + shape_str(bias.shape()) + " does not match C_out " + std::to_string(sk[0]));
  detail::require(stride >= 1, "conv2d", "stride must be positive");
  const std::size_t cin = sx[0], h = sx[1], w = sx[2], cout = sk[0], ks = sk[2];
  detail::require(ks <= h + 2 * padding && ks <= w + 2 * padding, "conv2d",
                  "kernel larger than padded input");
  const std::size_t ho = conv_out_size(h, ks, stride, padding);
  const std::size_t wo = conv_out_size(w, ks, stride, padding);
  const std::size_t patch = cin * ks * ks, npix = ho * wo;
  const bool direct = ks == 1 && stride == 1 && padding == 0;

  Tensor col;
  if (!direct) {
    col = Tensor(Shape{patch, npix}, 0.0);
    const double* in = x.value().ptr();
    for (std::size_t c = 0; c < cin; ++c) {
      for (std::size_t ki = 0; ki < ks; ++ki) {
        for (std::size_t kj = 0; kj < ks; ++kj) {
          double* row = col.ptr() + ((c * ks + ki) * ks + kj) * npix;
          for (std::size_t oy = 0; oy < ho; ++oy) {
            const auto iy = static_cast<std::ptrdiff_t>(oy * stride + ki) - static_cast<std::ptrdiff_t>(padding);
            if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(h)) continue;
            const double* src = in + (c * h + static_cast<std::size_t>(iy)) * w;
            double* dst = row + oy * wo;
            for (std::size_t ox = 0; ox < wo; ++ox) {
              const auto ix = static_cast<std::ptrdiff_t>(ox * stride + kj) - static_cast<std::ptrdiff_t>(padding);
              if (ix >= 0 && ix < static_cast<std::ptrdiff_t>(w)) dst[ox] = src[ix];
            }
          }
        }
      }
    }
  }
  const Tensor& cols = direct ? x.value() : col;
  Tensor out(Shape{cout, ho, wo});
  auto o = detail::mat(out, cout, npix);
  o.noalias() = detail::cmat(kernels.value(), cout, patch) * detail::cmat(cols, patch, npix);
  o.colwise() += detail::ConstVecMap(bias.value().ptr(), static_cast<Eigen::Index>(cout));
  x.tape->add_flops(2ULL * cout * patch * npix, cout * npix);

  return x.tape->record(
      std::move(out), {x, kernels, bias},
      [x, kernels, bias, cin, h, w, cout, ks, stride, padding, ho, wo, patch, npix, direct,
       col = std::move(col)](Tape& t, NodeId self) {
        auto g = detail::cmat(t.grad_ref(Var{&t, self}), cout, npix);
        if (Tensor* gk = t.accumulator(kernels)) {
          const Tensor& cols = direct ? x.value() : col;
          detail::mat(*gk, cout, patch).noalias() += g * detail::cmat(cols, patch, npix).transpose();
        }
        if (Tensor* gb = t.accumulator(bias)) {
          detail::VecMap(gb->ptr(), static_cast<Eigen::Index>(cout)) += g.rowwise().sum();
        }
        Tensor* gx = t.accumulator(x);
        if (!gx) return;
        if (direct) {
          detail::mat(*gx, patch, npix).noalias() += detail::cmat(kernels.value(), cout, patch).transpose() * g;
          return;
        }
        detail::RowMat dcol = detail::cmat(kernels.value(), cout, patch).transpose() * g;
        double* dx = gx->ptr();
        for (std::size_t c = 0; c < cin; ++c) {
          for (std::size_t ki = 0; ki < ks; ++ki) {
            for (std::size_t kj = 0; kj < ks; ++kj) {
              const double* row = dcol.data() + ((c * ks + ki) * ks + kj) * npix;
              for (std::size_t oy = 0; oy < ho; ++oy) {
                const auto iy = static_cast<std::ptrdiff_t>(oy * stride + ki) - static_cast<std::ptrdiff_t>(padding);
                if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(h)) continue;
                double* dst = dx + (c * h + static_cast<std::size_t>(iy)) * w;
                const double* src = row + oy * wo;
                for (std::size_t ox = 0; ox < wo; ++ox) {
                  const auto ix = static_cast<std::ptrdiff_t>(ox * stride + kj) - static_cast<std::ptrdiff_t>(padding);
                  if (ix >= 0 && ix < static_cast<std::ptrdiff_t>(w)) dst[ix] += src[ox];
                }
              }
            }
          }
        }
      });
}

enum class Resample { kDown2, kUp2 };

/// 2x2 max-pool with stride 2. Ties resolve to the first element in
/// row-major window order.
inline Var max_pool2(Var x) {
  const Shape& s = x.shape();
  detail::require(s.size() == 3, "resample(down2)", "input must be [C, H, W], got " + shape_str(s));
  detail::require(s[1] % 2 == 0 && s[2] % 2 == 0, "resample(down2)",
                  "spatial size " + std::to_string(s[1]) + "x" + std::to_string(s[2]) + " is not even");
  const std::size_t c = s[0], h = s[1], w = s[2], ho = h / 2, wo = w / 2;
  Tensor out(Shape{c, ho, wo});
  std::vector<std::uint32_t> arg(out.size());
  const Tensor& xv = x.value();
  for (std::size_t ch = 0; ch < c; ++ch) {
    for (std::size_t oy = 0; oy < ho; ++oy) {
      for (std::size_t ox = 0; ox < wo; ++ox) {
        std::size_t best = (ch * h + 2 * oy) * w + 2 * ox;
        for (std::size_t dy = 0; dy < 2; ++dy) {
          for (std::size_t dx = 0; dx < 2; ++dx) {
            const std::size_t idx = (ch * h + 2 * oy + dy) * w + 2 * ox + dx;
            if (xv[idx] > xv[best]) best = idx;
          }
        }
        const std::size_t o = (ch * ho + oy) * wo + ox;
        out[o] = xv[best];
        arg[o] = static_cast<std::uint32_t>(best);
      }
    }
  }
  if (x.tape->branch_tracking()) {
    std::uint64_t hsh = 1469598103934665603ULL;
    for (std::uint32_t a : arg) hsh = (hsh ^ a) * 1099511628211ULL;
    x.tape->fold_branch(hsh);
  }
  return x.tape->record(std::move(out), {x}, [x, arg = std::move(arg)](Tape& t, NodeId self) {
    const Tensor& g = t.grad_ref(Var{&t, self});
    if (Tensor* gx = t.accumulator(x)) {
      for (std::size_t i = 0; i < g.size(); ++i) (*gx)[arg[i]] += g[i];
    }
  });
}

/// Nearest-neighbour 2x upsampling.
inline Var upsample2(Var x) {
  const Shape& s = x.shape();
  detail::require(s.size() == 3, "resample(up2)", "input must be [C, H, W], got " + shape_str(s));
  const std::size_t c = s[0], h = s[1], w = s[2], ho = 2 * h, wo = 2 * w;
  Tensor out(Shape{c, ho, wo});
  const Tensor& xv = x.value();
  for (std::size_t ch = 0; ch < c; ++ch)
    for (std::size_t oy = 0; oy < ho; ++oy)
      for (std::size_t ox = 0; ox < wo; ++ox)
        out[(ch * ho + oy) * wo + ox] = xv[(ch * h + oy / 2) * w + ox / 2];
  return x.tape->record(std::move(out), {x}, [x, c, h, w, ho, wo](Tape& t, NodeId self) {
    const Tensor& g = t.grad_ref(Var{&t, self});
    Tensor* gx = t.accumulator(x);
    if (!gx) return;
    for (std::size_t ch = 0; ch < c; ++ch)
      for (std::size_t oy = 0; oy < ho; ++oy)
        for (std::size_t ox = 0; ox < wo; ++ox)
          (*gx)[(ch * h + oy / 2) * w + ox / 2] += g[(ch * ho + oy) * wo + ox];
  });
}

inline Var resample(Var x, Resample mode) {
  return mode == Resample::kDown2 ? max_pool2(x) : upsample2(x);
}

}  // namespace mmfed::ad
