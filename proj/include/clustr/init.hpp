#pragma once

#include <cstdint>
#include <random>
#include <string_view>

#include "clustr/rng.hpp"
#include "clustr/tensor.hpp"

namespace clustr {

/// Normal(0, stddev) values drawn from a stream keyed by (seed, name), so a parameter's
/// initial value does not depend on which other parameters exist.
template <typename T>
Tensor<T> normal_tensor(Shape shape, double stddev, std::uint64_t seed, std::string_view name) {
  CounterRng rng(seed, name);
  std::normal_distribution<double> dist(0.0, stddev);
  Tensor<T> out(std::move(shape));
  for (auto& v : out.storage()) v = static_cast<T>(dist(rng));
  return out;
}

}  // namespace clustr
