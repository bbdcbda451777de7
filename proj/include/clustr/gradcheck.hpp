#pragma once

#include <cstddef>
#include <functional>
#include <span>
#include <string>

#include "clustr/autodiff.hpp"

namespace clustr {

struct GradcheckOptions {
  double step = 1e-5;
  // 0 checks every element; otherwise an evenly spaced subset of at most this many per parameter.
  std::size_t max_entries_per_param = 0;
};

struct GradcheckResult {
  double max_rel_error = 0.0;
  std::string worst_param;
  std::size_t worst_index = 0;
  double worst_analytic = 0.0;
  double worst_numeric = 0.0;
  std::size_t entries_checked = 0;
};

/// Builds a scalar loss on the given tape.
using LossBuilder = std::function<Var<double>(Tape<double>&)>;

/// Compares reverse-mode gradients of `loss` against central differences
/// (f(p+h) - f(p-h)) / 2h. Relative error is |a - n| / (max(|a|, |n|) + 1e-8).
/// Parameter values are restored before returning; their grads hold the analytic result.
GradcheckResult finite_diff_gradcheck(const LossBuilder& loss, std::span<Parameter<double>* const> params,
                                      const GradcheckOptions& options = {});

}  // namespace clustr
