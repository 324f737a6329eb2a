// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <cstdint>
#include <limits>
#include <span>
#include <string>
#include <vector>

#include "biomamba/kernels.hpp"
#include "biomamba/tensor.hpp"

// Differentiable tensor operations. Every op computes its forward result
// eagerly and, when a tape is active, records a backward rule that
// accumulates into the gradients of its inputs.
namespace biomamba {

namespace detail {

inline void require_rank2(const Shape& s, const char* op) {
  if (s.size() != 2) throw DimensionError(std::string(op) + ": expected a matrix, got " + shape_str(s));
}

template <class T>
void require_same_shape(const Tensor<T>& a, const Tensor<T>& b, const char* op) {
  if (a.shape() != b.shape())
    throw DimensionError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
}

template <class T>
T sigmoid(T x) {
  return x >= 0 ? T(1) / (T(1) + std::exp(-x)) : std::exp(x) / (T(1) + std::exp(x));
}

template <class T>
T softplus(T x) {
  return x > T(20) ? x : std::log1p(std::exp(x));
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Linear algebra

template <class T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  detail::require_rank2(a.shape(), "matmul");
  detail::require_rank2(b.shape(), "matmul");
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  if (b.dim(0) != k)
    throw DimensionError("matmul: inner dimensions disagree " + shape_str(a.shape()) + " * " + shape_str(b.shape()));
  auto out = Tensor<T>::zeros({m, n});
  kernels::gemm_nn(m, k, n, a.data().data(), b.data().data(), out.mutable_data().data(), false);
  return detail::record(out, {a, b}, "matmul", [a, b, m, k, n](TensorNode<T>& o) {
    if (T* ga = detail::grad_of(a)) kernels::gemm_nt(m, n, k, o.grad.data(), b.data().data(), ga, true);
    if (T* gb = detail::grad_of(b)) kernels::gemm_tn(m, k, n, a.data().data(), o.grad.data(), gb, true);
  });
}

// a[m x k] * b[n x k]^T
template <class T>
Tensor<T> matmul_nt(const Tensor<T>& a, const Tensor<T>& b) {
  detail::require_rank2(a.shape(), "matmul_nt");
  detail::require_rank2(b.shape(), "matmul_nt");
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(0);
  if (b.dim(1) != k)
    throw DimensionError("matmul_nt: inner dimensions disagree " + shape_str(a.shape()) + " * " +
                         shape_str(b.shape()) + "^T");
  auto out = Tensor<T>::zeros({m, n});
  kernels::gemm_nt(m, k, n, a.data().data(), b.data().data(), out.mutable_data().data(), false);
  return detail::record(out, {a, b}, "matmul_nt", [a, b, m, k, n](TensorNode<T>& o) {
    if (T* ga = detail::grad_of(a)) kernels::gemm_nn(m, n, k, o.grad.data(), b.data().data(), ga, true);
    if (T* gb = detail::grad_of(b)) kernels::gemm_tn(m, n, k, o.grad.data(), a.data().data(), gb, true);
  });
}

template <class T>
Tensor<T> transpose(const Tensor<T>& x) {
  detail::require_rank2(x.shape(), "transpose");
  const std::size_t r = x.dim(0), c = x.dim(1);
  auto out = Tensor<T>::zeros({c, r});
  kernels::transpose(r, c, x.data().data(), out.mutable_data().data());
  return detail::record(out, {x}, "transpose", [x, r, c](TensorNode<T>& o) {
    if (T* g = detail::grad_of(x))
      for (std::size_t i = 0; i < r; ++i)
        for (std::size_t j = 0; j < c; ++j) g[i * c + j] += o.grad[j * r + i];
  });
}

// ---------------------------------------------------------------------------
// Elementwise

enum class Unary { kNeg, kExp, kLog, kSigmoid, kSilu, kSoftplus, kTanh };
enum class Binary { kAdd, kMul };

template <class T>
Tensor<T> elementwise(const Tensor<T>& x, Unary fn) {
  const std::size_t n = x.numel();
  auto in = x.data();
  auto out = Tensor<T>::zeros(x.shape());
  auto y = out.mutable_data();
  switch (fn) {
    case Unary::kNeg:
      for (std::size_t i = 0; i < n; ++i) y[i] = -in[i];
      break;
    case Unary::kExp:
      for (std::size_t i = 0; i < n; ++i) y[i] = std::exp(in[i]);
      break;
    case Unary::kLog:
      for (std::size_t i = 0; i < n; ++i) {
        if (!(in[i] > T(0))) throw DomainError("log of non-positive value " + std::to_string(in[i]));
        y[i] = std::log(in[i]);
      }
      break;
    case Unary::kSigmoid:
      for (std::size_t i = 0; i < n; ++i) y[i] = detail::sigmoid(in[i]);
      break;
    case Unary::kSilu:
      for (std::size_t i = 0; i < n; ++i) y[i] = in[i] * detail::sigmoid(in[i]);
      break;
    case Unary::kSoftplus:
      for (std::size_t i = 0; i < n; ++i) y[i] = detail::softplus(in[i]);
      break;
    case Unary::kTanh:
      for (std::size_t i = 0; i < n; ++i) y[i] = std::tanh(in[i]);
      break;
  }
  return detail::record(out, {x}, "elementwise", [x, fn, out_data = out.node().get()](TensorNode<T>& o) {
    T* g = detail::grad_of(x);
    if (!g) return;
    auto in = x.data();
    const auto& y = out_data->data;
    for (std::size_t i = 0; i < o.grad.size(); ++i) {
      T d;
      switch (fn) {
        case Unary::kNeg: d = T(-1); break;
        case Unary::kExp: d = y[i]; break;
        case Unary::kLog: d = T(1) / in[i]; break;
        case Unary::kSigmoid: d = y[i] * (T(1) - y[i]); break;
        case Unary::kSilu: {
          const T s = detail::sigmoid(in[i]);
          d = s * (T(1) + in[i] * (T(1) - s));
          break;
        }
        case Unary::kSoftplus: d = detail::sigmoid(in[i]); break;
        case Unary::kTanh: d = T(1) - y[i] * y[i]; break;
      }
      g[i] += o.grad[i] * d;
    }
  });
}

template <class T>
Tensor<T> elementwise(const Tensor<T>& a, const Tensor<T>& b, Binary fn) {
  detail::require_same_shape(a, b, "elementwise");
  auto out = Tensor<T>::zeros(a.shape());
  auto y = out.mutable_data();
  auto x1 = a.data();
  auto x2 = b.data();
  for (std::size_t i = 0; i < y.size(); ++i) y[i] = fn == Binary::kAdd ? x1[i] + x2[i] : x1[i] * x2[i];
  return detail::record(out, {a, b}, "elementwise", [a, b, fn](TensorNode<T>& o) {
    T* ga = detail::grad_of(a);
    T* gb = detail::grad_of(b);
    auto x1 = a.data();
    auto x2 = b.data();
    for (std::size_t i = 0; i < o.grad.size(); ++i) {
      if (ga) ga[i] += fn == Binary::kAdd ? o.grad[i] : o.grad[i] * x2[i];
      if (gb) gb[i] += fn == Binary::kAdd ? o.grad[i] : o.grad[i] * x1[i];
    }
  });
}

template <class T> Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) { return elementwise(a, b, Binary::kAdd); }
template <class T> Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) { return elementwise(a, b, Binary::kMul); }
template <class T> Tensor<T> neg(const Tensor<T>& x) { return elementwise(x, Unary::kNeg); }
template <class T> Tensor<T> exp(const Tensor<T>& x) { return elementwise(x, Unary::kExp); }
template <class T> Tensor<T> log(const Tensor<T>& x) { return elementwise(x, Unary::kLog); }
template <class T> Tensor<T> sigmoid(const Tensor<T>& x) { return elementwise(x, Unary::kSigmoid); }
template <class T> Tensor<T> silu(const Tensor<T>& x) { return elementwise(x, Unary::kSilu); }
template <class T> Tensor<T> softplus(const Tensor<T>& x) { return elementwise(x, Unary::kSoftplus); }
template <class T> Tensor<T> tanh(const Tensor<T>& x) { return elementwise(x, Unary::kTanh); }

template <class T>
Tensor<T> scale(const Tensor<T>& x, T s) {
  auto out = Tensor<T>::zeros(x.shape());
  auto y = out.mutable_data();
  auto in = x.data();
  for (std::size_t i = 0; i < y.size(); ++i) y[i] = in[i] * s;
  return detail::record(out, {x}, "scale", [x, s](TensorNode<T>& o) {
    if (T* g = detail::grad_of(x))
      for (std::size_t i = 0; i < o.grad.size(); ++i) g[i] += o.grad[i] * s;
  });
}

// x[m x n] + row[n], broadcast over rows.
template <class T>
Tensor<T> add_row(const Tensor<T>& x, const Tensor<T>& row) {
  const std::size_t n = x.cols(), m = x.numel() / n;
  if (row.numel() != n) throw DimensionError("add_row: row length " + std::to_string(row.numel()) + " != " + std::to_string(n));
  auto out = Tensor<T>::zeros(x.shape());
  auto y = out.mutable_data();
  auto in = x.data();
  auto r = row.data();
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) y[i * n + j] = in[i * n + j] + r[j];
  return detail::record(out, {x, row}, "add_row", [x, row, m, n](TensorNode<T>& o) {
    if (T* g = detail::grad_of(x))
      for (std::size_t i = 0; i < m * n; ++i) g[i] += o.grad[i];
    if (T* g = detail::grad_of(row))
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) g[j] += o.grad[i * n + j];
  });
}

// x[m x n] * row[n], broadcast over rows.
template <class T>
Tensor<T> mul_row(const Tensor<T>& x, const Tensor<T>& row) {
  const std::size_t n = x.cols(), m = x.numel() / n;
  if (row.numel() != n) throw DimensionError("mul_row: row length " + std::to_string(row.numel()) + " != " + std::to_string(n));
  auto out = Tensor<T>::zeros(x.shape());
  auto y = out.mutable_data();
  auto in = x.data();
  auto r = row.data();
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) y[i * n + j] = in[i * n + j] * r[j];
  return detail::record(out, {x, row}, "mul_row", [x, row, m, n](TensorNode<T>& o) {
    auto in = x.data();
    auto r = row.data();
    T* gx = detail::grad_of(x);
    T* gr = detail::grad_of(row);
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < n; ++j) {
        if (gx) gx[i * n + j] += o.grad[i * n + j] * r[j];
        if (gr) gr[j] += o.grad[i * n + j] * in[i * n + j];
      }
  });
}

// ---------------------------------------------------------------------------
// Reductions

enum class Reduce { kSum, kMean, kMax };

// Reduces along `axis`; the result drops that axis (rank-1 inputs give [1]).
template <class T>
Tensor<T> reduce(const Tensor<T>& x, Reduce fn, std::size_t axis) {
  const auto& s = x.shape();
  if (axis >= s.size())
    throw DimensionError("reduce: axis " + std::to_string(axis) + " out of range for " + shape_str(s));
  std::size_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= s[i];
  for (std::size_t i = axis + 1; i < s.size(); ++i) inner *= s[i];
  const std::size_t len = s[axis];
  Shape rs;
  for (std::size_t i = 0; i < s.size(); ++i)
    if (i != axis) rs.push_back(s[i]);
  if (rs.empty()) rs.push_back(1);
  auto out = Tensor<T>::zeros(rs);
  auto y = out.mutable_data();
  auto in = x.data();
  std::vector<std::size_t> argmax(fn == Reduce::kMax ? outer * inner : 0);
  for (std::size_t o = 0; o < outer; ++o)
    for (std::size_t j = 0; j < inner; ++j) {
      const T* base = in.data() + o * len * inner + j;
      T acc = fn == Reduce::kMax ? base[0] : T(0);
      std::size_t best = 0;
      for (std::size_t i = 0; i < len; ++i) {
        const T v = base[i * inner];
        if (fn == Reduce::kMax) {
          if (v > acc) acc = v, best = i;
        } else {
          acc += v;
        }
      }
      if (fn == Reduce::kMean) acc /= static_cast<T>(len);
      y[o * inner + j] = acc;
      if (fn == Reduce::kMax) argmax[o * inner + j] = best;
    }
  return detail::record(out, {x}, "reduce",
                        [x, fn, outer, inner, len, argmax = std::move(argmax)](TensorNode<T>& o) {
                          T* g = detail::grad_of(x);
                          if (!g) return;
                          for (std::size_t a = 0; a < outer; ++a)
                            for (std::size_t j = 0; j < inner; ++j) {
                              const T go = o.grad[a * inner + j];
                              T* base = g + a * len * inner + j;
                              if (fn == Reduce::kMax) {
                                base[argmax[a * inner + j] * inner] += go;
                              } else {
                                const T d = fn == Reduce::kMean ? go / static_cast<T>(len) : go;
                                for (std::size_t i = 0; i < len; ++i) base[i * inner] += d;
                              }
                            }
                        });
}

template <class T>
Tensor<T> sum_all(const Tensor<T>& x) {
  auto out = Tensor<T>::zeros({1});
  T acc = 0;
  for (T v : x.data()) acc += v;
  out.mutable_data()[0] = acc;
  return detail::record(out, {x}, "sum_all", [x](TensorNode<T>& o) {
    if (T* g = detail::grad_of(x))
      for (std::size_t i = 0; i < x.numel(); ++i) g[i] += o.grad[0];
  });
}

template <class T>
Tensor<T> mean_all(const Tensor<T>& x) {
  return scale(sum_all(x), T(1) / static_cast<T>(x.numel()));
}

// ---------------------------------------------------------------------------
// Softmax family

namespace detail {
template <class T>
void softmax_row(const T* x, T* y, std::size_t n) {
  T mx = -std::numeric_limits<T>::infinity();
  for (std::size_t j = 0; j < n; ++j) {
    if (std::isnan(x[j])) throw NumericError("softmax: NaN input");
    mx = std::max(mx, x[j]);
  }
  T sum = 0;
  for (std::size_t j = 0; j < n; ++j) {
    y[j] = std::exp(x[j] - mx);
    sum += y[j];
  }
  for (std::size_t j = 0; j < n; ++j) y[j] /= sum;
}
}  // namespace detail

template <class T>
Tensor<T> softmax_rows(const Tensor<T>& x) {
  const std::size_t n = x.cols(), m = x.numel() / n;
  auto out = Tensor<T>::zeros(x.shape());
  for (std::size_t i = 0; i < m; ++i)
    detail::softmax_row(x.data().data() + i * n, out.mutable_data().data() + i * n, n);
  return detail::record(out, {x}, "softmax_rows", [x, m, n, yp = out.node().get()](TensorNode<T>& o) {
    T* g = detail::grad_of(x);
    if (!g) return;
    const auto& y = yp->data;
    for (std::size_t i = 0; i < m; ++i) {
      T dot = 0;
      for (std::size_t j = 0; j < n; ++j) dot += o.grad[i * n + j] * y[i * n + j];
      for (std::size_t j = 0; j < n; ++j) g[i * n + j] += y[i * n + j] * (o.grad[i * n + j] - dot);
    }
  });
}

template <class T>
Tensor<T> log_softmax_rows(const Tensor<T>& x) {
  const std::size_t n = x.cols(), m = x.numel() / n;
  auto out = Tensor<T>::zeros(x.shape());
  auto in = x.data();
  auto y = out.mutable_data();
  for (std::size_t i = 0; i < m; ++i) {
    T mx = -std::numeric_limits<T>::infinity();
    for (std::size_t j = 0; j < n; ++j) {
      if (std::isnan(in[i * n + j])) throw NumericError("log_softmax: NaN input");
      mx = std::max(mx, in[i * n + j]);
    }
    T sum = 0;
    for (std::size_t j = 0; j < n; ++j) sum += std::exp(in[i * n + j] - mx);
    const T lse = mx + std::log(sum);
    for (std::size_t j = 0; j < n; ++j) y[i * n + j] = in[i * n + j] - lse;
  }
  return detail::record(out, {x}, "log_softmax_rows", [x, m, n, yp = out.node().get()](TensorNode<T>& o) {
    T* g = detail::grad_of(x);
    if (!g) return;
    const auto& y = yp->data;
    for (std::size_t i = 0; i < m; ++i) {
      T total = 0;
      for (std::size_t j = 0; j < n; ++j) total += o.grad[i * n + j];
      for (std::size_t j = 0; j < n; ++j) g[i * n + j] += o.grad[i * n + j] - std::exp(y[i * n + j]) * total;
    }
  });
}

// Mean over rows with mask[i] != 0 of -log softmax(logits[i])[targets[i]].
template <class T>
Tensor<T> cross_entropy(const Tensor<T>& logits, std::span<const std::int32_t> targets,
                        std::span<const std::uint8_t> mask) {
  const std::size_t v = logits.cols(), m = logits.numel() / v;
  if (targets.size() != m || mask.size() != m)
    throw DimensionError("cross_entropy: " + std::to_string(m) + " rows but " + std::to_string(targets.size()) +
                         " targets / " + std::to_string(mask.size()) + " mask entries");
  std::size_t count = 0;
  for (auto b : mask) count += b ? 1 : 0;
  if (count == 0) throw ContractError("cross_entropy: mask selects no positions");
  auto in = logits.data();
  std::vector<T> probs(m * v, T(0));
  double total = 0;
  for (std::size_t i = 0; i < m; ++i) {
    if (!mask[i]) continue;
    if (targets[i] < 0 || static_cast<std::size_t>(targets[i]) >= v)
      throw InputError("cross_entropy: target id " + std::to_string(targets[i]) + " outside vocabulary");
    detail::softmax_row(in.data() + i * v, probs.data() + i * v, v);
    const T* row = in.data() + i * v;
    T mx = row[0];
    for (std::size_t j = 1; j < v; ++j) mx = std::max(mx, row[j]);
    double sum = 0;
    for (std::size_t j = 0; j < v; ++j) sum += std::exp(static_cast<double>(row[j] - mx));
    total += static_cast<double>(mx) + std::log(sum) - static_cast<double>(row[targets[i]]);
  }
  auto out = Tensor<T>::scalar(static_cast<T>(total / static_cast<double>(count)));
  std::vector<std::int32_t> tg(targets.begin(), targets.end());
  std::vector<std::uint8_t> mk(mask.begin(), mask.end());
  return detail::record(out, {logits}, "cross_entropy",
                        [logits, v, m, count, probs = std::move(probs), tg = std::move(tg),
                         mk = std::move(mk)](TensorNode<T>& o) {
                          T* g = detail::grad_of(logits);
                          if (!g) return;
                          const T s = o.grad[0] / static_cast<T>(count);
                          for (std::size_t i = 0; i < m; ++i) {
                            if (!mk[i]) continue;
                            for (std::size_t j = 0; j < v; ++j) g[i * v + j] += s * probs[i * v + j];
                            g[i * v + tg[i]] -= s;
                          }
                        });
}

// ---------------------------------------------------------------------------
// Layout

template <class T>
Tensor<T> reshape(const Tensor<T>& x, Shape shape) {
  if (shape_numel(shape) != x.numel())
    throw DimensionError("reshape: " + shape_str(x.shape()) + " -> " + shape_str(shape));
  auto out = Tensor<T>::from(std::move(shape), std::vector<T>(x.data().begin(), x.data().end()));
  return detail::record(out, {x}, "reshape", [x](TensorNode<T>& o) {
    if (T* g = detail::grad_of(x))
      for (std::size_t i = 0; i < o.grad.size(); ++i) g[i] += o.grad[i];
  });
}

// Columns [begin, end) of a matrix.
template <class T>
Tensor<T> slice_cols(const Tensor<T>& x, std::size_t begin, std::size_t end) {
  detail::require_rank2(x.shape(), "slice_cols");
  const std::size_t m = x.dim(0), n = x.dim(1);
  if (begin >= end || end > n)
    throw DimensionError("slice_cols: [" + std::to_string(begin) + "," + std::to_string(end) + ") of " + shape_str(x.shape()));
  const std::size_t w = end - begin;
  auto out = Tensor<T>::zeros({m, w});
  auto y = out.mutable_data();
  auto in = x.data();
  for (std::size_t i = 0; i < m; ++i)
    std::copy_n(in.data() + i * n + begin, w, y.data() + i * w);
  return detail::record(out, {x}, "slice_cols", [x, m, n, w, begin](TensorNode<T>& o) {
    if (T* g = detail::grad_of(x))
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < w; ++j) g[i * n + begin + j] += o.grad[i * w + j];
  });
}

// Rows ids[i] of table[V x d] -> [N x d].
template <class T>
Tensor<T> embedding(const Tensor<T>& table, std::span<const std::int32_t> ids) {
  detail::require_rank2(table.shape(), "embedding");
  const std::size_t vocab = table.dim(0), d = table.dim(1);
  if (ids.empty()) throw DimensionError("embedding: no ids");
  auto out = Tensor<T>::zeros({ids.size(), d});
  auto y = out.mutable_data();
  auto t = table.data();
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] < 0 || static_cast<std::size_t>(ids[i]) >= vocab)
      throw InputError("embedding: token id " + std::to_string(ids[i]) + " outside vocabulary of " + std::to_string(vocab));
    std::copy_n(t.data() + ids[i] * d, d, y.data() + i * d);
  }
  std::vector<std::int32_t> idv(ids.begin(), ids.end());
  return detail::record(out, {table}, "embedding", [table, d, idv = std::move(idv)](TensorNode<T>& o) {
    if (T* g = detail::grad_of(table))
      for (std::size_t i = 0; i < idv.size(); ++i)
        for (std::size_t j = 0; j < d; ++j) g[idv[i] * d + j] += o.grad[i * d + j];
  });
}

// ---------------------------------------------------------------------------
// Normalization

// Per row: x * gain / sqrt(mean(x^2) + eps).
template <class T>
Tensor<T> rms_norm(const Tensor<T>& x, const Tensor<T>& gain, T eps = T(1e-5)) {
  const std::size_t n = x.cols(), m = x.numel() / n;
  if (gain.numel() != n) throw DimensionError("rms_norm: gain length mismatch");
  auto out = Tensor<T>::zeros(x.shape());
  std::vector<T> inv(m);
  auto in = x.data();
  auto gn = gain.data();
  auto y = out.mutable_data();
  for (std::size_t i = 0; i < m; ++i) {
    T ss = 0;
    for (std::size_t j = 0; j < n; ++j) ss += in[i * n + j] * in[i * n + j];
    inv[i] = T(1) / std::sqrt(ss / static_cast<T>(n) + eps);
    for (std::size_t j = 0; j < n; ++j) y[i * n + j] = in[i * n + j] * inv[i] * gn[j];
  }
  return detail::record(out, {x, gain}, "rms_norm", [x, gain, m, n, inv = std::move(inv)](TensorNode<T>& o) {
    auto in = x.data();
    auto gn = gain.data();
    T* gx = detail::grad_of(x);
    T* gg = detail::grad_of(gain);
    for (std::size_t i = 0; i < m; ++i) {
      const T r = inv[i];
      T dot = 0;  // sum_j dy_j * g_j * x_j
      for (std::size_t j = 0; j < n; ++j) {
        dot += o.grad[i * n + j] * gn[j] * in[i * n + j];
        if (gg) gg[j] += o.grad[i * n + j] * in[i * n + j] * r;
      }
      if (gx) {
        const T c = r * r * r * dot / static_cast<T>(n);
        for (std::size_t j = 0; j < n; ++j) gx[i * n + j] += o.grad[i * n + j] * gn[j] * r - in[i * n + j] * c;
      }
    }
  });
}

// Per row: (x - mean) / sqrt(var + eps) * gain + bias (population variance).
template <class T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gain, const Tensor<T>& bias, T eps = T(1e-5)) {
  const std::size_t n = x.cols(), m = x.numel() / n;
  if (n < 2) throw ContractError("layer_norm: needs at least two features");
  if (gain.numel() != n || bias.numel() != n) throw DimensionError("layer_norm: affine length mismatch");
  auto out = Tensor<T>::zeros(x.shape());
  std::vector<T> xhat(m * n), inv(m);
  auto in = x.data();
  auto y = out.mutable_data();
  for (std::size_t i = 0; i < m; ++i) {
    T mean = 0;
    for (std::size_t j = 0; j < n; ++j) mean += in[i * n + j];
    mean /= static_cast<T>(n);
    T var = 0;
    for (std::size_t j = 0; j < n; ++j) var += (in[i * n + j] - mean) * (in[i * n + j] - mean);
    var /= static_cast<T>(n);
    inv[i] = T(1) / std::sqrt(var + eps);
    for (std::size_t j = 0; j < n; ++j) {
      xhat[i * n + j] = (in[i * n + j] - mean) * inv[i];
      y[i * n + j] = xhat[i * n + j] * gain[j] + bias[j];
    }
  }
  return detail::record(out, {x, gain, bias}, "layer_norm",
                        [x, gain, bias, m, n, xhat = std::move(xhat), inv = std::move(inv)](TensorNode<T>& o) {
                          T* gx = detail::grad_of(x);
                          T* gg = detail::grad_of(gain);
                          T* gb = detail::grad_of(bias);
                          for (std::size_t i = 0; i < m; ++i) {
                            T sum_d = 0, sum_dx = 0;
                            for (std::size_t j = 0; j < n; ++j) {
                              const T dy = o.grad[i * n + j];
                              const T dxh = dy * gain[j];
                              sum_d += dxh;
                              sum_dx += dxh * xhat[i * n + j];
                              if (gg) gg[j] += dy * xhat[i * n + j];
                              if (gb) gb[j] += dy;
                            }
                            if (gx)
                              for (std::size_t j = 0; j < n; ++j) {
                                const T dxh = o.grad[i * n + j] * gain[j];
                                gx[i * n + j] += inv[i] / static_cast<T>(n) *
                                                 (static_cast<T>(n) * dxh - sum_d - xhat[i * n + j] * sum_dx);
                              }
                          }
                        });
}

}  // namespace biomamba
