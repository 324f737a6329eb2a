// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <cstddef>
#include <string>
#include <vector>

#include "biomamba/ops.hpp"
#include "biomamba/param.hpp"
#include "biomamba/scan.hpp"

// Selective state-space block.
//
// Per channel d and state slot n, with input-dependent step size, input and
// output maps:
//
//   delta_t = softplus(W_up W_down u_t + delta_bias)       (> 0)
//   B_t = W_B u_t,   C_t = W_C u_t
//   A = -exp(a_log)                                         (< 0)
//   x_t[d,n] = exp(delta_t[d] A[d,n]) x_{t-1}[d,n] + delta_t[d] u_t[d] B_t[n]
//   y_t[d]   = sum_n C_t[n] x_t[d,n] + D[d] u_t[d]
//
// The recurrence is evaluated either sequentially or as a Blelloch scan over
// affine pairs; both give the same result up to rounding.
namespace biomamba::ssm {

enum class ScanMode { kRecurrent, kParallel };

inline const char* to_string(ScanMode m) { return m == ScanMode::kRecurrent ? "recurrent" : "parallel"; }

struct SSMDims {
  std::size_t d_model = 128;
  std::size_t d_inner = 256;
  std::size_t n_state = 16;
  std::size_t k_conv = 4;
  std::size_t dt_rank = 8;
  bool dynamic_d = false;
};

template <class T>
struct SSMCoreParams {
  Tensor<T> a_log;         // [d_inner x n_state]
  Tensor<T> d_skip;        // [d_inner]; static D
  Tensor<T> w_d;           // [d_inner x d_inner]; D_t = u_t W_d when dynamic_d
  Tensor<T> w_delta_down;  // [d_inner x dt_rank]
  Tensor<T> w_delta_up;    // [dt_rank x d_inner]
  Tensor<T> delta_bias;    // [d_inner]
  Tensor<T> w_b;           // [d_inner x n_state]
  Tensor<T> w_c;           // [d_inner x n_state]

  bool dynamic_d() const { return static_cast<bool>(w_d); }

  void collect(const std::string& prefix, ParamList<T>& out) const {
    out.push_back({prefix + "a_log", a_log, false});
    if (dynamic_d())
      out.push_back({prefix + "w_d", w_d, true});
    else
      out.push_back({prefix + "d_skip", d_skip, false});
    out.push_back({prefix + "w_delta_down", w_delta_down, true});
    out.push_back({prefix + "w_delta_up", w_delta_up, true});
    out.push_back({prefix + "delta_bias", delta_bias, false});
    out.push_back({prefix + "w_b", w_b, true});
    out.push_back({prefix + "w_c", w_c, true});
  }
};

template <class T>
struct MambaBlockParams {
  SSMDims dims;
  Tensor<T> in_proj;      // [d_model x 2 d_inner]
  Tensor<T> conv_kernel;  // [d_inner x k_conv]; tap k_conv-1 sees the current token
  SSMCoreParams<T> core;
  Tensor<T> out_proj;  // [d_inner x d_model]

  void collect(const std::string& prefix, ParamList<T>& out) const {
    out.push_back({prefix + "in_proj", in_proj, true});
    out.push_back({prefix + "conv_kernel", conv_kernel, true});
    core.collect(prefix, out);
    out.push_back({prefix + "out_proj", out_proj, true});
  }
};

// Recurrent state of one block: SSM hidden state plus the last k_conv-1
// conv inputs (oldest first). Zero at sequence start.
template <class T>
struct SSMState {
  std::size_t d_inner = 0, n_state = 0, k_conv = 0;
  std::vector<T> x;            // [d_inner x n_state]
  std::vector<T> conv_buffer;  // [(k_conv-1) x d_inner]

  static SSMState zeros(const SSMDims& d) {
    SSMState s;
    s.d_inner = d.d_inner;
    s.n_state = d.n_state;
    s.k_conv = d.k_conv;
    s.x.assign(d.d_inner * d.n_state, T(0));
    s.conv_buffer.assign((d.k_conv - 1) * d.d_inner, T(0));
    return s;
  }
};

inline void validate(const SSMDims& d) {
  if (!d.d_model || !d.d_inner || !d.n_state || !d.dt_rank) throw ContractError("ssm: all extents must be positive");
  if (d.k_conv < 1) throw ContractError("ssm: k_conv must be >= 1");
}

// Softplus inverse, used to place the initial step size.
inline double inverse_softplus(double y) { return y + std::log(-std::expm1(-y)); }

template <class T>
MambaBlockParams<T> init_block(const SSMDims& d, Initializer<T>& init) {
  validate(d);
  MambaBlockParams<T> p;
  p.dims = d;
  p.in_proj = init.normal({d.d_model, 2 * d.d_inner}, 0.02);
  const double conv_bound = 1.0 / std::sqrt(static_cast<double>(d.k_conv));
  p.conv_kernel = init.uniform_tensor({d.d_inner, d.k_conv}, -conv_bound, conv_bound);
  auto& c = p.core;
  c.a_log = Tensor<T>::zeros({d.d_inner, d.n_state}, true);
  for (std::size_t i = 0; i < d.d_inner; ++i)
    for (std::size_t n = 0; n < d.n_state; ++n)
      c.a_log.mutable_data()[i * d.n_state + n] = static_cast<T>(std::log(static_cast<double>(n + 1)));
  if (d.dynamic_d)
    c.w_d = init.normal({d.d_inner, d.d_inner}, 0.02);
  else
    c.d_skip = init.constant({d.d_inner}, T(1));
  c.w_delta_down = init.normal({d.d_inner, d.dt_rank}, 0.02);
  c.w_delta_up = init.normal({d.dt_rank, d.d_inner}, 0.02);
  c.delta_bias = Tensor<T>::zeros({d.d_inner}, true);
  for (auto& b : c.delta_bias.mutable_data()) {
    // initial step sizes log-uniform in [1e-3, 1e-1]
    const double dt = std::exp(init.uniform(std::log(1e-3), std::log(1e-1)));
    b = static_cast<T>(inverse_softplus(dt));
  }
  c.w_b = init.normal({d.d_inner, d.n_state}, 0.02);
  c.w_c = init.normal({d.d_inner, d.n_state}, 0.02);
  p.out_proj = init.normal({d.d_inner, d.d_model}, 0.02);
  return p;
}

// ---------------------------------------------------------------------------
// Discretization

template <class T>
struct Discretized {
  Tensor<T> a_bar;   // [d_inner x n_state]
  Tensor<T> bu_bar;  // [d_inner x n_state]
};

// Zero-order hold, simplified: A_bar = exp(delta (x) a), Bu_bar = (delta * u) (x) B.
template <class T>
Discretized<T> discretize(const Tensor<T>& delta, const Tensor<T>& a, const Tensor<T>& b_t, const Tensor<T>& u_t) {
  const std::size_t di = delta.numel(), n = b_t.numel();
  if (a.numel() != di * n || u_t.numel() != di) throw DimensionError("discretize: extents disagree");
  Discretized<T> out{Tensor<T>::zeros({di, n}), Tensor<T>::zeros({di, n})};
  auto ab = out.a_bar.mutable_data();
  auto bb = out.bu_bar.mutable_data();
  for (std::size_t d = 0; d < di; ++d) {
    if (!(delta[d] > T(0))) throw ContractError("discretize: step size must be positive");
    for (std::size_t k = 0; k < n; ++k) {
      ab[d * n + k] = std::exp(delta[d] * a[d * n + k]);
      bb[d * n + k] = delta[d] * u_t[d] * b_t[k];
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Fused differentiable kernels

namespace detail {

template <class T>
void require_finite(T v, const char* what) {
  if (!std::isfinite(v)) throw NumericError(std::string("selective scan: non-finite ") + what);
}

// Per-sequence scratch: a_bar and states for every step.
template <class T>
struct SequenceStates {
  std::vector<T> a_bar;  // [len x di x n]
  std::vector<T> x;      // [len x di x n]
};

template <class T>
void sequence_states(ScanMode mode, std::size_t len, std::size_t di, std::size_t n, const T* u, const T* delta,
                     const T* neg_a, const T* bm, SequenceStates<T>& s) {
  const std::size_t w = di * n;
  s.a_bar.resize(len * w);
  s.x.resize(len * w);
  for (std::size_t t = 0; t < len; ++t)
    for (std::size_t d = 0; d < di; ++d) {
      const T dt = delta[t * di + d];
      const T du = dt * u[t * di + d];
      T* ab = s.a_bar.data() + t * w + d * n;
      T* bx = s.x.data() + t * w + d * n;
      for (std::size_t k = 0; k < n; ++k) {
        ab[k] = std::exp(dt * neg_a[d * n + k]);
        bx[k] = du * bm[t * n + k];
      }
    }
  if (mode == ScanMode::kRecurrent) {
    for (std::size_t t = 1; t < len; ++t) {
      T* xt = s.x.data() + t * w;
      const T* xp = s.x.data() + (t - 1) * w;
      const T* ab = s.a_bar.data() + t * w;
      for (std::size_t i = 0; i < w; ++i) xt[i] = ab[i] * xp[i] + xt[i];
    }
  } else {
    std::vector<T> a_copy(s.a_bar);
    scan::affine_scan_inclusive<T>(a_copy, s.x, len, w);
  }
}

}  // namespace detail

// Depthwise causal convolution over each length-`seq_len` block of rows:
// y[t,c] = sum_j kernel[c,j] * x[t - (K-1) + j, c], zero before the block start.
template <class T>
Tensor<T> causal_depthwise_conv(const Tensor<T>& x, const Tensor<T>& kernel, std::size_t seq_len) {
  const std::size_t ch = x.cols(), rows = x.numel() / ch, kw = kernel.cols();
  if (kernel.numel() != ch * kw) throw DimensionError("causal_conv: kernel shape " + shape_str(kernel.shape()));
  if (seq_len == 0 || rows % seq_len) throw DimensionError("causal_conv: rows not a multiple of seq_len");
  auto out = Tensor<T>::zeros(x.shape());
  auto in = x.data();
  auto kd = kernel.data();
  auto y = out.mutable_data();
  for (std::size_t s0 = 0; s0 < rows; s0 += seq_len)
    for (std::size_t t = 0; t < seq_len; ++t)
      for (std::size_t j = 0; j < kw; ++j) {
        if (t + j + 1 < kw) continue;
        const std::size_t src = s0 + t + j + 1 - kw;
        for (std::size_t c = 0; c < ch; ++c) y[(s0 + t) * ch + c] += kd[c * kw + j] * in[src * ch + c];
      }
  return biomamba::detail::record(out, {x, kernel}, "causal_conv", [x, kernel, ch, rows, kw, seq_len](TensorNode<T>& o) {
    T* gx = biomamba::detail::grad_of(x);
    T* gk = biomamba::detail::grad_of(kernel);
    auto in = x.data();
    auto kd = kernel.data();
    for (std::size_t s0 = 0; s0 < rows; s0 += seq_len)
      for (std::size_t t = 0; t < seq_len; ++t)
        for (std::size_t j = 0; j < kw; ++j) {
          if (t + j + 1 < kw) continue;
          const std::size_t src = s0 + t + j + 1 - kw;
          const T* go = o.grad.data() + (s0 + t) * ch;
          for (std::size_t c = 0; c < ch; ++c) {
            if (gx) gx[src * ch + c] += kd[c * kw + j] * go[c];
            if (gk) gk[c * kw + j] += in[src * ch + c] * go[c];
          }
        }
  });
}

// y[t,d] = sum_n C[t,n] x_t[d,n] for the selective recurrence above (no D
// term). u, delta: [N x di]; B, C: [N x n]; N a multiple of seq_len.
template <class T>
Tensor<T> selective_scan(const Tensor<T>& u, const Tensor<T>& delta, const Tensor<T>& a_log, const Tensor<T>& bm,
                         const Tensor<T>& cm, std::size_t seq_len, ScanMode mode) {
  const std::size_t di = u.cols(), rows = u.numel() / di, n = a_log.cols();
  if (delta.shape() != u.shape() || a_log.numel() != di * n || bm.numel() != rows * n || cm.numel() != rows * n)
    throw DimensionError("selective_scan: extents disagree");
  if (seq_len == 0 || rows % seq_len) throw DimensionError("selective_scan: rows not a multiple of seq_len");
  for (T v : delta.data()) {
    if (!std::isfinite(v)) throw NumericError("selective_scan: non-finite step size");
    if (!(v > T(0))) throw ContractError("selective_scan: step sizes must be positive");
  }
  std::vector<T> neg_a(di * n);
  for (std::size_t i = 0; i < di * n; ++i) neg_a[i] = -std::exp(a_log[i]);

  auto out = Tensor<T>::zeros({rows, di});
  auto y = out.mutable_data();
  const std::size_t w = di * n;
  const T* ud = u.data().data();
  const T* dd = delta.data().data();
  const T* bd = bm.data().data();
  const T* cd = cm.data().data();
  if (mode == ScanMode::kRecurrent) {
    std::vector<T> x(w);
    for (std::size_t s0 = 0; s0 < rows; s0 += seq_len) {
      std::fill(x.begin(), x.end(), T(0));
      for (std::size_t t = s0; t < s0 + seq_len; ++t) {
        for (std::size_t d = 0; d < di; ++d) {
          const T dt = dd[t * di + d];
          const T du = dt * ud[t * di + d];
          T* xd = x.data() + d * n;
          const T* na = neg_a.data() + d * n;
          T acc = 0;
          for (std::size_t k = 0; k < n; ++k) {
            xd[k] = std::exp(dt * na[k]) * xd[k] + du * bd[t * n + k];
            acc += cd[t * n + k] * xd[k];
          }
          y[t * di + d] = acc;
        }
      }
    }
  } else {
    detail::SequenceStates<T> st;
    for (std::size_t s0 = 0; s0 < rows; s0 += seq_len) {
      detail::sequence_states(mode, seq_len, di, n, ud + s0 * di, dd + s0 * di, neg_a.data(), bd + s0 * n, st);
      for (std::size_t t = 0; t < seq_len; ++t)
        for (std::size_t d = 0; d < di; ++d) {
          T acc = 0;
          const T* xd = st.x.data() + t * w + d * n;
          for (std::size_t k = 0; k < n; ++k) acc += cd[(s0 + t) * n + k] * xd[k];
          y[(s0 + t) * di + d] = acc;
        }
    }
  }
  for (T v : y) detail::require_finite(v, "output");

  return biomamba::detail::record(
      out, {u, delta, a_log, bm, cm}, "selective_scan",
      [u, delta, a_log, bm, cm, seq_len, mode, di, n, rows, neg_a = std::move(neg_a)](TensorNode<T>& o) {
        using biomamba::detail::grad_of;
        T* gu = grad_of(u);
        T* gdelta = grad_of(delta);
        T* ga = grad_of(a_log);
        T* gb = grad_of(bm);
        T* gc = grad_of(cm);
        const std::size_t w = di * n;
        const T* ud = u.data().data();
        const T* dd = delta.data().data();
        const T* bd = bm.data().data();
        const T* cd = cm.data().data();
        std::vector<T> g_neg_a(w, T(0));
        detail::SequenceStates<T> st;
        std::vector<T> g(seq_len * w);  // dL/dx_t including future contributions
        for (std::size_t s0 = 0; s0 < rows; s0 += seq_len) {
          detail::sequence_states(mode, seq_len, di, n, ud + s0 * di, dd + s0 * di, neg_a.data(), bd + s0 * n, st);
          const T* dy = o.grad.data() + s0 * di;
          // direct contribution dy_t[d] * C_t[n]
          for (std::size_t t = 0; t < seq_len; ++t)
            for (std::size_t d = 0; d < di; ++d)
              for (std::size_t k = 0; k < n; ++k) g[t * w + d * n + k] = dy[t * di + d] * cd[(s0 + t) * n + k];
          // adjoint recurrence g_t += A_bar_{t+1} g_{t+1}, run backwards in time
          if (mode == ScanMode::kRecurrent) {
            for (std::size_t t = seq_len - 1; t-- > 0;) {
              const T* ab = st.a_bar.data() + (t + 1) * w;
              const T* gn = g.data() + (t + 1) * w;
              T* gt = g.data() + t * w;
              for (std::size_t i = 0; i < w; ++i) gt[i] += ab[i] * gn[i];
            }
          } else {
            std::vector<T> ra(seq_len * w), rb(seq_len * w);
            for (std::size_t s = 0; s < seq_len; ++s) {
              const std::size_t t = seq_len - 1 - s;
              for (std::size_t i = 0; i < w; ++i) {
                ra[s * w + i] = t + 1 < seq_len ? st.a_bar[(t + 1) * w + i] : T(0);
                rb[s * w + i] = g[t * w + i];
              }
            }
            scan::affine_scan_inclusive<T>(ra, rb, seq_len, w);
            for (std::size_t s = 0; s < seq_len; ++s)
              std::copy_n(rb.data() + s * w, w, g.data() + (seq_len - 1 - s) * w);
          }
          for (std::size_t t = 0; t < seq_len; ++t) {
            const std::size_t r = s0 + t;
            for (std::size_t d = 0; d < di; ++d) {
              const T dt = dd[r * di + d];
              const T uv = ud[r * di + d];
              T g_dt = 0, g_u = 0;
              for (std::size_t k = 0; k < n; ++k) {
                const std::size_t i = t * w + d * n + k;
                const T gi = g[i];
                const T xprev = t ? st.x[i - w] : T(0);
                const T ab = st.a_bar[i];
                const T g_ab = gi * xprev * ab;  // dL/d(dt * A) via exp
                g_dt += g_ab * neg_a[d * n + k] + gi * uv * bd[r * n + k];
                g_neg_a[d * n + k] += g_ab * dt;
                g_u += gi * dt * bd[r * n + k];
                if (gb) gb[r * n + k] += gi * dt * uv;
                if (gc) gc[r * n + k] += dy[t * di + d] * st.x[i];
              }
              if (gdelta) gdelta[r * di + d] += g_dt;
              if (gu) gu[r * di + d] += g_u;
            }
          }
        }
        // A = -exp(a_log)  =>  dA/da_log = A
        if (ga)
          for (std::size_t i = 0; i < w; ++i) ga[i] += g_neg_a[i] * neg_a[i];
      });
}

// ---------------------------------------------------------------------------
// Core and block

namespace detail {

// softplus is positive in exact arithmetic; a zero here is underflow from
// diverging parameters, not a caller error.
template <class T>
Tensor<T> step_sizes(const SSMCoreParams<T>& core, const Tensor<T>& u) {
  auto delta = softplus(add_row(matmul(matmul(u, core.w_delta_down), core.w_delta_up), core.delta_bias));
  for (T v : delta.data())
    if (!(v > T(0)) || !std::isfinite(v)) throw NumericError("selective SSM: step size underflowed or diverged");
  return delta;
}

}  // namespace detail

// Full selective SSM over U [N x d_inner] (N a multiple of seq_len),
// including the skip term.
template <class T>
Tensor<T> selective_ssm(const SSMCoreParams<T>& core, const Tensor<T>& u, std::size_t seq_len, ScanMode mode) {
  auto delta = detail::step_sizes(core, u);
  auto bm = matmul(u, core.w_b);
  auto cm = matmul(u, core.w_c);
  auto y = selective_scan(u, delta, core.a_log, bm, cm, seq_len, mode);
  if (core.dynamic_d()) return add(y, mul(u, matmul(u, core.w_d)));
  return add(y, mul_row(u, core.d_skip));
}

template <class T>
Tensor<T> selective_scan_recurrent(const SSMCoreParams<T>& core, const Tensor<T>& u) {
  return selective_ssm(core, u, u.rows(), ScanMode::kRecurrent);
}

template <class T>
Tensor<T> selective_scan_parallel(const SSMCoreParams<T>& core, const Tensor<T>& u) {
  return selective_ssm(core, u, u.rows(), ScanMode::kParallel);
}

// Gated block: (u, gate) = X W_in; u <- silu(conv(u)); y = ssm(u);
// out = (y * silu(gate)) W_out. Residual and pre-norm belong to the caller.
template <class T>
Tensor<T> mamba_block_forward(const MambaBlockParams<T>& p, const Tensor<T>& x, std::size_t seq_len, ScanMode mode) {
  const auto& d = p.dims;
  if (x.rank() != 2 || x.cols() != d.d_model)
    throw ContractError("mamba_block_forward: expected [T x " + std::to_string(d.d_model) + "], got " +
                        shape_str(x.shape()));
  auto xz = matmul(x, p.in_proj);
  auto u = slice_cols(xz, 0, d.d_inner);
  auto gate = slice_cols(xz, d.d_inner, 2 * d.d_inner);
  u = silu(causal_depthwise_conv(u, p.conv_kernel, seq_len));
  auto y = selective_ssm(p.core, u, seq_len, mode);
  return matmul(mul(y, silu(gate)), p.out_proj);
}

// Inference path that starts from and updates `state`; chunked calls
// compose exactly like one call over the concatenated input.
template <class T>
Tensor<T> mamba_block_forward_stateful(const MambaBlockParams<T>& p, const Tensor<T>& x, SSMState<T>& state) {
  const auto& d = p.dims;
  if (state.d_inner != d.d_inner || state.n_state != d.n_state || state.k_conv != d.k_conv ||
      state.x.size() != d.d_inner * d.n_state)
    throw ContractError("ssm step: state was created for a different block configuration");
  if (x.cols() != d.d_model) throw ContractError("ssm step: input width mismatch");
  NoGradScope<T> no_grad;
  const std::size_t len = x.numel() / d.d_model, di = d.d_inner, n = d.n_state, kw = d.k_conv;
  auto xz = matmul(x.rank() == 1 ? reshape(x, {1, d.d_model}) : x, p.in_proj);
  auto u_raw = slice_cols(xz, 0, di);
  auto gate = slice_cols(xz, di, 2 * di);

  // conv over [buffer; u_raw]
  std::vector<T> hist(state.conv_buffer);
  hist.insert(hist.end(), u_raw.data().begin(), u_raw.data().end());
  auto conv = Tensor<T>::zeros({len, di});
  auto cv = conv.mutable_data();
  auto kd = p.conv_kernel.data();
  for (std::size_t t = 0; t < len; ++t)
    for (std::size_t j = 0; j < kw; ++j) {
      const std::size_t src = t + j;  // index into hist; hist has kw-1 leading rows
      for (std::size_t c = 0; c < di; ++c) cv[t * di + c] += kd[c * kw + j] * hist[src * di + c];
    }
  state.conv_buffer.assign(hist.end() - static_cast<std::ptrdiff_t>((kw - 1) * di), hist.end());
  auto u = silu(conv);

  const auto& core = p.core;
  auto delta = detail::step_sizes(core, u);
  auto bm = matmul(u, core.w_b);
  auto cm = matmul(u, core.w_c);
  auto ys = Tensor<T>::zeros({len, di});
  auto yv = ys.mutable_data();
  for (std::size_t t = 0; t < len; ++t)
    for (std::size_t c = 0; c < di; ++c) {
      const T dt = delta[t * di + c];
      const T du = dt * u[t * di + c];
      T* xd = state.x.data() + c * n;
      T acc = 0;
      for (std::size_t k = 0; k < n; ++k) {
        xd[k] = std::exp(dt * -std::exp(core.a_log[c * n + k])) * xd[k] + du * bm[t * n + k];
        acc += cm[t * n + k] * xd[k];
      }
      yv[t * di + c] = acc;
    }
  auto y = core.dynamic_d() ? add(ys, mul(u, matmul(u, core.w_d))) : add(ys, mul_row(u, core.d_skip));
  return matmul(mul(y, silu(gate)), p.out_proj);
}

// Single-token update: x_t [d_model] -> y_t [1 x d_model].
template <class T>
Tensor<T> step(const MambaBlockParams<T>& p, SSMState<T>& state, const Tensor<T>& x_t) {
  return mamba_block_forward_stateful(p, reshape(x_t, {1, p.dims.d_model}), state);
}

}  // namespace biomamba::ssm
