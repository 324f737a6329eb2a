// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <random>
#include <vector>

#include "biomamba/tensor.hpp"

namespace biomamba {

struct GradCheckResult {
  double max_rel_error = 0;
  std::size_t coords_checked = 0;
};

// Relative error used throughout: |a - n| / (|a| + |n| + 1e-12).
inline double grad_rel_error(double analytic, double numeric) {
  return std::abs(analytic - numeric) / (std::abs(analytic) + std::abs(numeric) + 1e-12);
}

// Compares reverse-mode gradients of a scalar function against central
// differences. `f` is re-evaluated on perturbed copies of each tensor in
// `inputs`; when `max_coords_per_tensor` is nonzero a seeded random subset
// of coordinates is checked per tensor.
template <class T>
GradCheckResult grad_check_many(const std::function<Tensor<T>()>& f, std::vector<Tensor<T>> inputs, double eps,
                                std::size_t max_coords_per_tensor = 0, std::uint64_t seed = 0) {
  if (eps < 1e-7 || eps > 1e-3) throw ContractError("grad_check: eps must lie in [1e-7, 1e-3]");
  for (auto& x : inputs) {
    x.set_requires_grad(true);
    x.zero_grad();
  }
  std::vector<std::vector<T>> analytic;
  {
    Tape<T> tape;
    TapeScope<T> scope(tape);
    Tensor<T> loss = f();
    tape.backward(loss);
  }
  for (auto& x : inputs) {
    std::vector<T> g(x.numel(), T(0));
    if (x.has_grad()) std::copy(x.grad().begin(), x.grad().end(), g.begin());
    analytic.push_back(std::move(g));
  }

  GradCheckResult result;
  std::mt19937_64 rng(seed);
  NoGradScope<T> no_grad;
  for (std::size_t t = 0; t < inputs.size(); ++t) {
    auto& x = inputs[t];
    std::vector<std::size_t> coords(x.numel());
    for (std::size_t i = 0; i < coords.size(); ++i) coords[i] = i;
    if (max_coords_per_tensor && coords.size() > max_coords_per_tensor) {
      for (std::size_t i = 0; i < max_coords_per_tensor; ++i) {
        std::uniform_int_distribution<std::size_t> pick(i, coords.size() - 1);
        std::swap(coords[i], coords[pick(rng)]);
      }
      coords.resize(max_coords_per_tensor);
    }
    auto data = x.mutable_data();
    for (std::size_t c : coords) {
      const T saved = data[c];
      data[c] = saved + static_cast<T>(eps);
      const double up = static_cast<double>(f().item());
      data[c] = saved - static_cast<T>(eps);
      const double down = static_cast<double>(f().item());
      data[c] = saved;
      const double numeric = (up - down) / (2 * eps);
      result.max_rel_error = std::max(result.max_rel_error, grad_rel_error(analytic[t][c], numeric));
      ++result.coords_checked;
    }
  }
  return result;
}

// Max relative error of d f / d x over every coordinate of x.
template <class T>
double grad_check(const std::function<Tensor<T>(const Tensor<T>&)>& f, Tensor<T> x, double eps) {
  return grad_check_many<T>([&] { return f(x); }, {x}, eps).max_rel_error;
}

}  // namespace biomamba
