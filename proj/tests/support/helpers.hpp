#pragma once

#include <functional>
#include <memory>

#include "clustr/attention.hpp"
#include "clustr/gradcheck.hpp"
#include "clustr/init.hpp"
#include "clustr/model.hpp"

namespace helpers {

/// Overwrites every parameter with N(0, stddev) draws so gradients are not dominated by zero-initialized leaves.
inline void randomize(clustr::ParameterStore<double>& store, std::uint64_t seed, double stddev) {
  for (auto* p : store.all()) p->value = clustr::normal_tensor<double>(p->value.shape(), stddev, seed, p->name);
}

/// Wraps a forward pass so the first evaluation records cluster assignments and later ones replay them.
inline clustr::LossBuilder cached_loss(
    clustr::attention::ClusterCache& cache,
    std::function<clustr::Var<double>(clustr::Tape<double>&, clustr::attention::ForwardContext)> forward) {
  auto first = std::make_shared<bool>(true);
  return [&cache, forward = std::move(forward), first](clustr::Tape<double>& tape) {
    using Mode = clustr::attention::ClusterCache::Mode;
    cache.start(*first ? Mode::record : Mode::replay);
    *first = false;
    clustr::attention::ForwardContext ctx;
    ctx.cache = &cache;
    return forward(tape, ctx);
  };
}

/// Parameter count of a model worked out by hand: per stage the patch embedding (k*k*C_in*C weights, C bias,
/// 2C norm), per block two norms (4C), Q/K/V (3C^2), phi (|lambdas|*C*C + C), one C_h score vector per head when
/// some ratio reduces, and the FFN (2*r*C^2 + r*C + C); then the final norm and the classifier.
inline std::size_t expected_param_count(const clustr::model::ModelConfig& cfg) {
  std::size_t total = 0, in = cfg.in_channels;
  for (std::size_t i = 0; i < cfg.stages.size(); ++i) {
    const auto& s = cfg.stages[i];
    const std::size_t c = s.channels, k = s.patch_embed.kernel, r = cfg.stage_ffn_ratio(i);
    total += k * k * in * c + c + 2 * c;
    bool reduces = false;
    for (double l : s.lambdas) reduces = reduces || l != 1.0;
    const std::size_t phi_in = cfg.combine == clustr::attention::ScaleCombine::concat ? s.lambdas.size() * c : c;
    std::size_t block = 4 * c + 3 * c * c + phi_in * c + c + 2 * r * c * c + r * c + c;
    if (cfg.aggregation == clustr::attention::Aggregation::cluster && reduces) block += c;
    if (cfg.aggregation == clustr::attention::Aggregation::grid) {
      for (double l : s.lambdas) block += l == 1.0 ? 0 : static_cast<std::size_t>(l);
    }
    total += s.layers * block;
    in = c;
  }
  return total + 2 * in + in * cfg.num_classes + cfg.num_classes;
}

/// H x W x C image with uniform entries in [-1, 1].
inline clustr::Tensor<double> random_image(clustr::CounterRng& rng, std::size_t side, std::size_t channels) {
  clustr::Tensor<double> img({side, side, channels});
  for (auto& v : img.storage()) v = 2.0 * rng.uniform() - 1.0;
  return img;
}

}  // namespace helpers
