#include "clustr/harness/optim.hpp"

#include <cmath>
#include <numbers>

namespace clustr::harness {

double learning_rate(std::size_t step, const OptimizerConfig& cfg) {
  if (step < cfg.warmup_steps) {
    return cfg.lr * static_cast<double>(step + 1) / static_cast<double>(cfg.warmup_steps);
  }
  const std::size_t span = cfg.steps > cfg.warmup_steps + 1 ? cfg.steps - cfg.warmup_steps - 1 : 1;
  const double progress = std::min(1.0, static_cast<double>(step - cfg.warmup_steps) / static_cast<double>(span));
  return cfg.min_lr + 0.5 * (cfg.lr - cfg.min_lr) * (1.0 + std::cos(std::numbers::pi * progress));
}

template <typename T>
AdamW<T>::AdamW(std::vector<Parameter<T>*> params, const OptimizerConfig& cfg) : params_(std::move(params)), cfg_(cfg) {
  for (const auto* p : params_) {
    m_.emplace_back(p->value.shape());
    v_.emplace_back(p->value.shape());
  }
}

template <typename T>
void AdamW<T>::step(double lr) {
  ++t_;
  const double b1 = cfg_.beta1, b2 = cfg_.beta2;
  const double c1 = 1.0 - std::pow(b1, static_cast<double>(t_));
  const double c2 = 1.0 - std::pow(b2, static_cast<double>(t_));
  for (std::size_t i = 0; i < params_.size(); ++i) {
    auto& p = *params_[i];
    auto& m = m_[i];
    auto& v = v_[i];
    const bool decay = p.value.rank() == 2 && p.value.rows() > 1 && p.value.cols() > 1;
    for (std::size_t j = 0; j < p.value.size(); ++j) {
      const double g = static_cast<double>(p.grad[j]);
      const double mj = b1 * static_cast<double>(m[j]) + (1.0 - b1) * g;
      const double vj = b2 * static_cast<double>(v[j]) + (1.0 - b2) * g * g;
      m[j] = static_cast<T>(mj);
      v[j] = static_cast<T>(vj);
      double w = static_cast<double>(p.value[j]);
      w -= lr * ((mj / c1) / (std::sqrt(vj / c2) + cfg_.eps) + (decay ? cfg_.weight_decay * w : 0.0));
      p.value[j] = static_cast<T>(w);
    }
    if (!p.value.all_finite()) throw NumericError("optimizer step made " + p.name + " non-finite");
  }
}

template class AdamW<float>;
template class AdamW<double>;

}  // namespace clustr::harness
