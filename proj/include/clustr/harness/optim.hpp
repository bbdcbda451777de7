#pragma once

#include <cstddef>
#include <vector>

#include "clustr/autodiff.hpp"

namespace clustr::harness {

struct OptimizerConfig {
  double lr = 1e-3;
  double min_lr = 0.0;
  double weight_decay = 0.05;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  std::size_t steps = 100;
  std::size_t warmup_steps = 0;
  std::size_t batch_size = 16;
};

/// Linear warmup to cfg.lr, then cosine decay to cfg.min_lr at the last step.
double learning_rate(std::size_t step, const OptimizerConfig& cfg);

/// Adam with decoupled weight decay. Decay applies to weight matrices only, not to biases, norms or score vectors.
template <typename T>
class AdamW {
 public:
  AdamW(std::vector<Parameter<T>*> params, const OptimizerConfig& cfg);

  /// Applies one update from the accumulated gradients; throws NumericError if a parameter becomes non-finite.
  void step(double lr);
  std::size_t steps_taken() const { return t_; }

 private:
  std::vector<Parameter<T>*> params_;
  std::vector<Tensor<T>> m_;
  std::vector<Tensor<T>> v_;
  OptimizerConfig cfg_;
  std::size_t t_ = 0;
};

}  // namespace clustr::harness
