// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <bit>
#include <cstddef>
#include <span>
#include <vector>

#include "biomamba/error.hpp"

// Work-efficient (Blelloch) prefix scans over an associative operator.
//
// The tree shape depends only on the padded length, never on thread count,
// so results are reproducible bit for bit.
namespace biomamba::scan {

// Affine map x -> a * x + b. Composition "first, then second" is associative
// with identity (1, 0); it is the combine step of a linear recurrence.
template <class T>
struct AffinePair {
  T a{1};
  T b{0};
  friend bool operator==(const AffinePair&, const AffinePair&) = default;
};

template <class T>
constexpr AffinePair<T> combine(const AffinePair<T>& first, const AffinePair<T>& second) {
  return {second.a * first.a, second.a * first.b + second.b};
}

template <class T>
constexpr AffinePair<T> affine_identity() {
  return {T(1), T(0)};
}

// In-place exclusive scan; elements past xs.size() are treated as identity.
// op(left, right) must be associative; it need not be commutative.
template <class E, class Op>
void blelloch_exclusive(std::vector<E>& xs, Op op, const E& identity) {
  const std::size_t n = xs.size();
  if (n == 0) return;
  const std::size_t padded = std::bit_ceil(n);
  xs.resize(padded, identity);
  for (std::size_t stride = 1; stride < padded; stride *= 2)
    for (std::size_t i = 2 * stride - 1; i < padded; i += 2 * stride) xs[i] = op(xs[i - stride], xs[i]);
  xs[padded - 1] = identity;
  for (std::size_t stride = padded / 2; stride >= 1; stride /= 2) {
    for (std::size_t i = 2 * stride - 1; i < padded; i += 2 * stride) {
      E left = xs[i - stride];
      xs[i - stride] = xs[i];
      xs[i] = op(xs[i], left);
    }
    if (stride == 1) break;
  }
  xs.resize(n);
}

template <class E, class Op>
void blelloch_inclusive(std::vector<E>& xs, Op op, const E& identity) {
  std::vector<E> original = xs;
  blelloch_exclusive(xs, op, identity);
  for (std::size_t i = 0; i < xs.size(); ++i) xs[i] = op(xs[i], original[i]);
}

// Inclusive scan of `len` affine pairs, each a lane-wise vector of `width`
// independent recurrences, stored row-major as a[len x width], b[len x width].
// On return b[t] holds the composed offset of elements 0..t, i.e. the state
// x_t of x_t = a_t * x_{t-1} + b_t with x_{-1} = 0. `a` is clobbered.
template <class T>
void affine_scan_inclusive(std::span<T> a, std::span<T> b, std::size_t len, std::size_t width) {
  if (a.size() < len * width || b.size() < len * width) throw DimensionError("affine_scan: buffers too small");
  if (len <= 1) return;
  const std::size_t padded = std::bit_ceil(len);
  std::vector<T> pa(padded * width, T(1)), pb(padded * width, T(0));
  std::copy_n(a.data(), len * width, pa.data());
  std::copy_n(b.data(), len * width, pb.data());

  auto merge_into_right = [&](std::size_t left, std::size_t right) {
    // right <- left then right
    T* ar = pa.data() + right * width;
    T* br = pb.data() + right * width;
    const T* al = pa.data() + left * width;
    const T* bl = pb.data() + left * width;
    for (std::size_t w = 0; w < width; ++w) {
      br[w] = ar[w] * bl[w] + br[w];
      ar[w] = ar[w] * al[w];
    }
  };

  for (std::size_t stride = 1; stride < padded; stride *= 2)
    for (std::size_t i = 2 * stride - 1; i < padded; i += 2 * stride) merge_into_right(i - stride, i);

  // Root holds the full composition, which is the inclusive value of the
  // last padded slot; everything else comes from the exclusive down-sweep.
  std::vector<T> total_b(pb.begin() + (padded - 1) * width, pb.begin() + padded * width);
  std::fill_n(pa.data() + (padded - 1) * width, width, T(1));
  std::fill_n(pb.data() + (padded - 1) * width, width, T(0));
  std::vector<T> ta(width), tb(width);
  for (std::size_t stride = padded / 2; stride >= 1; stride /= 2) {
    for (std::size_t i = 2 * stride - 1; i < padded; i += 2 * stride) {
      const std::size_t l = i - stride;
      T* al = pa.data() + l * width;
      T* bl = pb.data() + l * width;
      T* ar = pa.data() + i * width;
      T* br = pb.data() + i * width;
      std::copy_n(al, width, ta.data());
      std::copy_n(bl, width, tb.data());
      std::copy_n(ar, width, al);
      std::copy_n(br, width, bl);
      // right <- prefix then left-subtree total
      for (std::size_t w = 0; w < width; ++w) {
        br[w] = ta[w] * br[w] + tb[w];
        ar[w] = ta[w] * ar[w];
      }
    }
    if (stride == 1) break;
  }
  // inclusive[t] = exclusive[t + 1]; inclusive[padded - 1] = total.
  for (std::size_t t = 0; t < len; ++t) {
    const T* src = t + 1 < padded ? pb.data() + (t + 1) * width : total_b.data();
    std::copy_n(src, width, b.data() + t * width);
  }
}

}  // namespace biomamba::scan
