// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <random>
#include <string>
#include <vector>

#include "biomamba/rng.hpp"
#include "biomamba/tensor.hpp"

namespace biomamba {

template <class T>
struct NamedParam {
  std::string name;
  Tensor<T> tensor;
  bool decay = true;  // false for norm gains, biases and SSM timescales
};

template <class T>
using ParamList = std::vector<NamedParam<T>>;

// Seeded parameter factory. Gaussian draws use a Box-Muller transform on
// raw generator output so initial weights match across toolchains.
template <class T>
class Initializer {
 public:
  explicit Initializer(std::uint64_t seed) : rng_(rng_stream(seed, "init")) {}

  double gaussian() {
    if (has_spare_) {
      has_spare_ = false;
      return spare_;
    }
    double u1;
    do u1 = uniform_unit(rng_);
    while (u1 <= 0);
    const double u2 = uniform_unit(rng_);
    const double r = std::sqrt(-2.0 * std::log(u1));
    spare_ = r * std::sin(2 * M_PI * u2);
    has_spare_ = true;
    return r * std::cos(2 * M_PI * u2);
  }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform_unit(rng_); }

  Tensor<T> normal(Shape shape, double stddev) {
    auto t = Tensor<T>::zeros(std::move(shape), true);
    for (auto& v : t.mutable_data()) v = static_cast<T>(gaussian() * stddev);
    return t;
  }

  Tensor<T> uniform_tensor(Shape shape, double lo, double hi) {
    auto t = Tensor<T>::zeros(std::move(shape), true);
    for (auto& v : t.mutable_data()) v = static_cast<T>(uniform(lo, hi));
    return t;
  }

  Tensor<T> constant(Shape shape, T value) { return Tensor<T>::full(std::move(shape), value, true); }

 private:
  std::mt19937_64 rng_;
  bool has_spare_ = false;
  double spare_ = 0;
};

}  // namespace biomamba
