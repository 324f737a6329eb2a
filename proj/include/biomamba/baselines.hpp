// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <limits>
#include <string>
#include <vector>

#include "biomamba/ops.hpp"
#include "biomamba/param.hpp"

// Comparison architectures: an Elman RNN and a multi-head self-attention
// Transformer block, both usable as drop-in blocks of the LM stack.
namespace biomamba::baselines {

// ---------------------------------------------------------------------------
// RNN: h_t = tanh(x_t W_x + h_{t-1} W_h + b), o_t = h_t W_o

template <class T>
struct RNNParams {
  Tensor<T> w_x;  // [d_model x d_hidden]
  Tensor<T> w_h;  // [d_hidden x d_hidden]
  Tensor<T> b;    // [d_hidden]
  Tensor<T> w_o;  // [d_hidden x d_model]

  void collect(const std::string& prefix, ParamList<T>& out) const {
    out.push_back({prefix + "w_x", w_x, true});
    out.push_back({prefix + "w_h", w_h, true});
    out.push_back({prefix + "b", b, false});
    out.push_back({prefix + "w_o", w_o, true});
  }
};

template <class T>
RNNParams<T> init_rnn(std::size_t d_model, std::size_t d_hidden, Initializer<T>& init) {
  RNNParams<T> p;
  p.w_x = init.normal({d_model, d_hidden}, 0.02);
  // Recurrent weights start near an orthogonal-scale map so early gradients
  // neither vanish nor explode through the sequence.
  p.w_h = init.normal({d_hidden, d_hidden}, 1.0 / std::sqrt(static_cast<double>(d_hidden)) * 0.5);
  p.b = Tensor<T>::zeros({d_hidden}, true);
  p.w_o = init.normal({d_hidden, d_model}, 0.02);
  return p;
}

// H[t] = tanh(pre[t] + H[t-1] W_h) per length-seq_len block, H[-1] = 0.
template <class T>
Tensor<T> tanh_recurrence(const Tensor<T>& pre, const Tensor<T>& w_h, std::size_t seq_len) {
  const std::size_t dh = pre.cols(), rows = pre.numel() / dh;
  if (w_h.numel() != dh * dh) throw DimensionError("tanh_recurrence: W_h must be square in d_hidden");
  if (seq_len == 0 || rows % seq_len) throw DimensionError("tanh_recurrence: rows not a multiple of seq_len");
  auto out = Tensor<T>::zeros({rows, dh});
  auto h = out.mutable_data();
  auto p = pre.data();
  const T* w = w_h.data().data();
  for (std::size_t s0 = 0; s0 < rows; s0 += seq_len)
    for (std::size_t t = s0; t < s0 + seq_len; ++t) {
      T* ht = h.data() + t * dh;
      std::copy_n(p.data() + t * dh, dh, ht);
      if (t > s0) kernels::gemm_nn<T>(1, dh, dh, h.data() + (t - 1) * dh, w, ht, true);
      for (std::size_t j = 0; j < dh; ++j) {
        ht[j] = std::tanh(ht[j]);
        if (!std::isfinite(ht[j])) throw NumericError("rnn: non-finite hidden state");
      }
    }
  return biomamba::detail::record(out, {pre, w_h}, "tanh_recurrence",
                                  [pre, w_h, dh, rows, seq_len, hp = out.node().get()](TensorNode<T>& o) {
                                    T* gp = biomamba::detail::grad_of(pre);
                                    T* gw = biomamba::detail::grad_of(w_h);
                                    const auto& h = hp->data;
                                    const T* w = w_h.data().data();
                                    std::vector<T> carry(dh), dz(dh);
                                    for (std::size_t s0 = 0; s0 < rows; s0 += seq_len) {
                                      std::fill(carry.begin(), carry.end(), T(0));
                                      for (std::size_t t = s0 + seq_len; t-- > s0;) {
                                        for (std::size_t j = 0; j < dh; ++j) {
                                          const T ht = h[t * dh + j];
                                          dz[j] = (o.grad[t * dh + j] + carry[j]) * (T(1) - ht * ht);
                                          if (gp) gp[t * dh + j] += dz[j];
                                        }
                                        if (t > s0) {
                                          if (gw) kernels::gemm_tn<T>(1, dh, dh, h.data() + (t - 1) * dh, dz.data(), gw, true);
                                          kernels::gemm_nt<T>(1, dh, dh, dz.data(), w, carry.data(), false);
                                        }
                                      }
                                    }
                                  });
}

template <class T>
struct RNNOutput {
  Tensor<T> hidden;  // [N x d_hidden]
  Tensor<T> output;  // [N x d_model]
};

template <class T>
RNNOutput<T> rnn_forward(const RNNParams<T>& p, const Tensor<T>& x, std::size_t seq_len) {
  if (x.rank() != 2 || x.cols() != p.w_x.dim(0)) throw ContractError("rnn_forward: input width mismatch");
  auto h = tanh_recurrence(add_row(matmul(x, p.w_x), p.b), p.w_h, seq_len);
  return {h, matmul(h, p.w_o)};
}

// ---------------------------------------------------------------------------
// Transformer

enum class NormKind { kRMS, kLayer };

template <class T>
struct NormParams {
  Tensor<T> gain;
  Tensor<T> bias;  // only for layer norm

  static NormParams make(std::size_t d, NormKind kind) {
    NormParams n;
    n.gain = Tensor<T>::full({d}, T(1), true);
    if (kind == NormKind::kLayer) n.bias = Tensor<T>::zeros({d}, true);
    return n;
  }
  Tensor<T> apply(const Tensor<T>& x) const { return bias ? layer_norm(x, gain, bias) : rms_norm(x, gain); }
  void collect(const std::string& prefix, ParamList<T>& out) const {
    out.push_back({prefix + "gain", gain, false});
    if (bias) out.push_back({prefix + "bias", bias, false});
  }
};

template <class T>
struct TransformerBlockParams {
  std::size_t n_heads = 1;
  Tensor<T> w_q, w_k, w_v, w_o;  // [d_model x d_model]
  NormParams<T> ffn_norm;        // pre-norm of the feed-forward sublayer
  Tensor<T> w_ff1;               // [d_model x d_ff]
  Tensor<T> w_ff2;               // [d_ff x d_model]

  void collect(const std::string& prefix, ParamList<T>& out) const {
    out.push_back({prefix + "w_q", w_q, true});
    out.push_back({prefix + "w_k", w_k, true});
    out.push_back({prefix + "w_v", w_v, true});
    out.push_back({prefix + "w_o", w_o, true});
    ffn_norm.collect(prefix + "ffn_norm.", out);
    out.push_back({prefix + "w_ff1", w_ff1, true});
    out.push_back({prefix + "w_ff2", w_ff2, true});
  }
};

template <class T>
TransformerBlockParams<T> init_transformer(std::size_t d_model, std::size_t n_heads, std::size_t d_ff, NormKind norm,
                                           Initializer<T>& init) {
  if (n_heads == 0 || d_model % n_heads) throw ContractError("transformer: n_heads must divide d_model");
  TransformerBlockParams<T> p;
  p.n_heads = n_heads;
  p.w_q = init.normal({d_model, d_model}, 0.02);
  p.w_k = init.normal({d_model, d_model}, 0.02);
  p.w_v = init.normal({d_model, d_model}, 0.02);
  p.w_o = init.normal({d_model, d_model}, 0.02);
  p.ffn_norm = NormParams<T>::make(d_model, norm);
  p.w_ff1 = init.normal({d_model, d_ff}, 0.02);
  p.w_ff2 = init.normal({d_ff, d_model}, 0.02);
  return p;
}

// X + P[0..T) for each length-seq_len block of rows.
template <class T>
Tensor<T> positional_embed(const Tensor<T>& x, const Tensor<T>& table, std::size_t seq_len) {
  const std::size_t d = x.cols(), rows = x.numel() / d;
  if (table.rank() != 2 || table.cols() != d) throw DimensionError("positional_embed: table width mismatch");
  if (seq_len > table.dim(0))
    throw ContractError("positional_embed: sequence of " + std::to_string(seq_len) + " exceeds table of " +
                        std::to_string(table.dim(0)) + " positions");
  if (seq_len == 0 || rows % seq_len) throw DimensionError("positional_embed: rows not a multiple of seq_len");
  auto out = Tensor<T>::zeros(x.shape());
  auto y = out.mutable_data();
  auto in = x.data();
  auto pt = table.data();
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t j = 0; j < d; ++j) y[r * d + j] = in[r * d + j] + pt[(r % seq_len) * d + j];
  return biomamba::detail::record(out, {x, table}, "positional_embed", [x, table, d, rows, seq_len](TensorNode<T>& o) {
    T* gx = biomamba::detail::grad_of(x);
    T* gt = biomamba::detail::grad_of(table);
    for (std::size_t r = 0; r < rows; ++r)
      for (std::size_t j = 0; j < d; ++j) {
        if (gx) gx[r * d + j] += o.grad[r * d + j];
        if (gt) gt[(r % seq_len) * d + j] += o.grad[r * d + j];
      }
  });
}

// Scaled dot-product attention over heads. q, k, v: [N x d_model] with
// N = batch * seq_len; head h uses columns [h*hd, (h+1)*hd). With `causal`,
// row i attends to j <= i only. If `weights_out` is non-null it receives the
// attention weights [batch * heads * seq_len * seq_len].
template <class T>
Tensor<T> attention(const Tensor<T>& q, const Tensor<T>& k, const Tensor<T>& v, std::size_t n_heads,
                    std::size_t seq_len, bool causal, std::vector<T>* weights_out = nullptr) {
  const std::size_t d = q.cols(), rows = q.numel() / d;
  if (k.shape() != q.shape() || v.shape() != q.shape()) throw DimensionError("attention: q/k/v shapes differ");
  if (n_heads == 0 || d % n_heads) throw DimensionError("attention: heads must divide width");
  if (seq_len == 0 || rows % seq_len) throw DimensionError("attention: rows not a multiple of seq_len");
  const std::size_t hd = d / n_heads, batch = rows / seq_len, L = seq_len;
  const T inv_sqrt = T(1) / std::sqrt(static_cast<T>(hd));
  std::vector<T> probs(batch * n_heads * L * L, T(0));
  auto out = Tensor<T>::zeros({rows, d});
  auto y = out.mutable_data();
  const T* qd = q.data().data();
  const T* kd = k.data().data();
  const T* vd = v.data().data();
  for (std::size_t b = 0; b < batch; ++b)
    for (std::size_t h = 0; h < n_heads; ++h) {
      T* P = probs.data() + (b * n_heads + h) * L * L;
      for (std::size_t i = 0; i < L; ++i) {
        const T* qi = qd + (b * L + i) * d + h * hd;
        const std::size_t jmax = causal ? i + 1 : L;
        T mx = -std::numeric_limits<T>::infinity();
        for (std::size_t j = 0; j < jmax; ++j) {
          const T* kj = kd + (b * L + j) * d + h * hd;
          T s = 0;
          for (std::size_t c = 0; c < hd; ++c) s += qi[c] * kj[c];
          s *= inv_sqrt;
          P[i * L + j] = s;
          mx = std::max(mx, s);
        }
        if (std::isnan(mx)) throw NumericError("attention: NaN score");
        T sum = 0;
        for (std::size_t j = 0; j < jmax; ++j) {
          P[i * L + j] = std::exp(P[i * L + j] - mx);
          sum += P[i * L + j];
        }
        T* yi = y.data() + (b * L + i) * d + h * hd;
        for (std::size_t j = 0; j < jmax; ++j) {
          P[i * L + j] /= sum;
          const T pij = P[i * L + j];
          const T* vj = vd + (b * L + j) * d + h * hd;
          for (std::size_t c = 0; c < hd; ++c) yi[c] += pij * vj[c];
        }
      }
    }
  if (weights_out) *weights_out = probs;
  return biomamba::detail::record(
      out, {q, k, v}, "attention",
      [q, k, v, n_heads, L, causal, d, hd, batch, inv_sqrt, probs = std::move(probs)](TensorNode<T>& o) {
        T* gq = biomamba::detail::grad_of(q);
        T* gk = biomamba::detail::grad_of(k);
        T* gv = biomamba::detail::grad_of(v);
        const T* qd = q.data().data();
        const T* kd = k.data().data();
        const T* vd = v.data().data();
        std::vector<T> dp(L);
        for (std::size_t b = 0; b < batch; ++b)
          for (std::size_t h = 0; h < n_heads; ++h) {
            const T* P = probs.data() + (b * n_heads + h) * L * L;
            for (std::size_t i = 0; i < L; ++i) {
              const std::size_t jmax = causal ? i + 1 : L;
              const T* go = o.grad.data() + (b * L + i) * d + h * hd;
              T dot = 0;
              for (std::size_t j = 0; j < jmax; ++j) {
                const T* vj = vd + (b * L + j) * d + h * hd;
                T s = 0;
                for (std::size_t c = 0; c < hd; ++c) s += go[c] * vj[c];
                dp[j] = s;
                dot += s * P[i * L + j];
                if (gv) {
                  T* gvj = gv + (b * L + j) * d + h * hd;
                  for (std::size_t c = 0; c < hd; ++c) gvj[c] += P[i * L + j] * go[c];
                }
              }
              const T* qi = qd + (b * L + i) * d + h * hd;
              for (std::size_t j = 0; j < jmax; ++j) {
                const T ds = P[i * L + j] * (dp[j] - dot) * inv_sqrt;
                const T* kj = kd + (b * L + j) * d + h * hd;
                if (gq) {
                  T* gqi = gq + (b * L + i) * d + h * hd;
                  for (std::size_t c = 0; c < hd; ++c) gqi[c] += ds * kj[c];
                }
                if (gk) {
                  T* gkj = gk + (b * L + j) * d + h * hd;
                  for (std::size_t c = 0; c < hd; ++c) gkj[c] += ds * qi[c];
                }
              }
            }
          }
      });
}

// softmax(Q K^T / sqrt(head_dim) [+ causal mask]) V per head, heads
// concatenated, then W_O.
template <class T>
Tensor<T> multi_head_attention(const TransformerBlockParams<T>& p, const Tensor<T>& x, std::size_t seq_len,
                               bool causal) {
  auto q = matmul(x, p.w_q);
  auto k = matmul(x, p.w_k);
  auto v = matmul(x, p.w_v);
  return matmul(attention(q, k, v, p.n_heads, seq_len, causal), p.w_o);
}

// Two pre-norm residual sublayers; `attn_norm` normalizes the attention
// input and is owned by the surrounding stack.
template <class T>
Tensor<T> transformer_block_forward(const TransformerBlockParams<T>& p, const NormParams<T>& attn_norm,
                                    const Tensor<T>& x, std::size_t seq_len, bool causal) {
  auto h = add(x, multi_head_attention(p, attn_norm.apply(x), seq_len, causal));
  auto f = matmul(silu(matmul(p.ffn_norm.apply(h), p.w_ff1)), p.w_ff2);
  return add(h, f);
}

}  // namespace biomamba::baselines
