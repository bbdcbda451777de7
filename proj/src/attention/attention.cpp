#include "clustr/attention.hpp"

#include <algorithm>
#include <cmath>
#include <set>

#include "clustr/init.hpp"

namespace clustr::attention {

namespace {

constexpr double kInitStd = 0.02;

bool is_identity_ratio(double lambda) { return lambda == 1.0; }

}  // namespace

void AttentionSpec::validate() const {
  if (heads == 0 || channels == 0 || channels % heads != 0) {
    throw ParameterError("attention: " + std::to_string(channels) + " channels cannot be split into " +
                         std::to_string(heads) + " heads");
  }
  if (!(scale_factor() > 0.0)) throw ParameterError("attention: scale factor must be positive");
  if (lambdas.empty()) throw ParameterError("attention: at least one reduction ratio is required");
  std::set<double> seen;
  for (double l : lambdas) {
    if (!(l >= 1.0) || !std::isfinite(l)) throw ParameterError("attention: reduction ratios must be >= 1");
    if (!seen.insert(l).second) throw ParameterError("attention: repeated reduction ratio " + std::to_string(l));
    if (aggregation == Aggregation::grid) grid_patch_size(l);
  }
}

std::size_t grid_patch_size(double lambda) {
  const auto r = static_cast<std::size_t>(std::llround(std::sqrt(lambda)));
  if (r == 0 || static_cast<double>(r * r) != lambda) {
    throw ParameterError("grid aggregation needs a perfect-square ratio, got " + std::to_string(lambda));
  }
  return r;
}

const clustering::ClusterResult& ClusterCache::next(const std::function<clustering::ClusterResult()>& compute) {
  if (mode_ == Mode::record) {
    entries_.push_back(compute());
    return entries_.back();
  }
  if (cursor_ >= entries_.size()) throw ParameterError("cluster cache: replay ran past the recorded calls");
  return entries_[cursor_++];
}

template <typename T>
AttentionWeights<T> make_attention_weights(ParameterStore<T>& store, const std::string& prefix,
                                           const AttentionSpec& spec, std::uint64_t seed) {
  spec.validate();
  const std::size_t c = spec.channels, ch = spec.head_channels();
  auto normal = [&](const std::string& name, Shape shape) {
    return &store.add(name, normal_tensor<T>(std::move(shape), kInitStd, seed, name));
  };
  AttentionWeights<T> w;
  w.wq = normal(prefix + ".wq", {c, c});
  w.wk = normal(prefix + ".wk", {c, c});
  w.wv = normal(prefix + ".wv", {c, c});
  w.phi = normal(prefix + ".phi", {spec.phi_input_width(), c});
  w.phi_bias = &store.add(prefix + ".phi_bias", Tensor<T>({c}));
  const bool any_reduction =
      std::any_of(spec.lambdas.begin(), spec.lambdas.end(), [](double l) { return !is_identity_ratio(l); });
  if (spec.aggregation == Aggregation::cluster && any_reduction) {
    for (std::size_t h = 0; h < spec.heads; ++h) {
      w.score_proj.push_back(&store.add(prefix + ".score_proj" + std::to_string(h), Tensor<T>({ch, 1})));
    }
  }
  if (spec.aggregation == Aggregation::grid) {
    for (std::size_t j = 0; j < spec.lambdas.size(); ++j) {
      const std::size_t r = grid_patch_size(spec.lambdas[j]);
      w.pool_logits.push_back(r == 1 ? nullptr
                                     : &store.add(prefix + ".pool_logits" + std::to_string(j), Tensor<T>({1, r * r})));
    }
  }
  return w;
}

template <typename T>
Var<T> dense_attention(Var<T> q, Var<T> k, Var<T> v, double s, MacCounter* counter) {
  if (!(s > 0.0)) throw ParameterError("dense_attention: scale factor must be positive");
  if (k.value().rows() != v.value().rows()) throw ShapeError("dense_attention: keys and values differ in length");
  auto logits = scale(matmul_nt(q, k, counter), static_cast<T>(1.0 / std::sqrt(s)));
  return matmul(softmax_rows(logits), v, counter);
}

template <typename T>
ReducedKV<T> cluster_kv(Var<T> k, Var<T> v, Var<T> scores, double lambda, const AttentionSpec& spec,
                        ClusterCache* cache) {
  const std::size_t n = k.value().rows();
  const auto params = clustering::ClusterParams::with_ratio(lambda, spec.neighbors);
  if (params.is_identity(n)) return {k, v};
  auto compute = [&] { return clustering::density_peaks(k.value().template cast<double>(), params); };
  clustering::ClusterResult local;
  const clustering::ClusterResult* result = nullptr;
  if (cache != nullptr) {
    result = &cache->next(compute);
  } else {
    local = compute();
    result = &local;
  }
  const auto agg = clustering::aggregate(k, result->labels, result->num_clusters(), scores);
  const auto values = segment_weighted_sum(v, result->labels, agg.weights, result->num_clusters());
  return {agg.tokens, values};
}

template <typename T>
Var<T> clus_attention(Var<T> q, Var<T> k, Var<T> v, Var<T> scores, double lambda, const AttentionSpec& spec,
                      ClusterCache* cache, MacCounter* counter) {
  const auto kv = cluster_kv(k, v, scores, lambda, spec, cache);
  return dense_attention(q, kv.keys, kv.values, spec.scale_factor(), counter);
}

template <typename T>
Var<T> multi_scale_cluster(Var<T> x, Var<T> scores, const std::vector<double>& lambdas, const AttentionSpec& spec,
                           ClusterCache* cache) {
  if (lambdas.empty()) throw ParameterError("multi_scale_cluster: no reduction ratios");
  std::vector<Var<T>> blocks;
  for (double l : lambdas) blocks.push_back(cluster_kv(x, x, scores, l, spec, cache).keys);
  return concat_rows(blocks);
}

template <typename T>
Var<T> grid_aggregation(Var<T> x, Grid grid, std::size_t r, Var<T> weights) {
  if (r == 1) return x;
  return grid_pool(x, grid.height, grid.width, r, weights);
}

namespace {

template <typename T>
Var<T> heads_at_scale(Var<T> q, Var<T> k, Var<T> v, const AttentionWeights<T>& weights, const AttentionSpec& spec,
                      std::size_t scale_index, double lambda, Grid grid, const ForwardContext& ctx,
                      MacCounter& counter, std::size_t& kv_tokens) {
  auto& tape = q.tape();
  const std::size_t ch = spec.head_channels();
  std::vector<Var<T>> heads;
  for (std::size_t h = 0; h < spec.heads; ++h) {
    auto qh = slice_cols(q, h * ch, (h + 1) * ch);
    auto kh = slice_cols(k, h * ch, (h + 1) * ch);
    auto vh = slice_cols(v, h * ch, (h + 1) * ch);
    ReducedKV<T> kv{kh, vh};
    if (!is_identity_ratio(lambda)) {
      if (spec.aggregation == Aggregation::cluster) {
        auto scores = matmul(kh, tape.parameter(*weights.score_proj.at(h)));
        kv = cluster_kv(kh, vh, scores, lambda, spec, ctx.cache);
      } else {
        const std::size_t r = grid_patch_size(lambda);
        auto pool = softmax_rows(tape.parameter(*weights.pool_logits.at(scale_index)));
        kv = {grid_aggregation(kh, grid, r, pool), grid_aggregation(vh, grid, r, pool)};
      }
    }
    kv_tokens = kv.keys.value().rows();
    heads.push_back(dense_attention(qh, kv.keys, kv.values, spec.scale_factor(), &counter));
  }
  return concat_cols(heads);
}

template <typename T>
void log_macs(const ForwardContext& ctx, std::size_t tokens, std::vector<std::size_t> kv, const MacCounter& counter) {
  if (ctx.mac_log == nullptr) return;
  ctx.mac_log->push_back(LayerMacs{ctx.layer, tokens, std::move(kv), counter.multiplies});
}

}  // namespace

template <typename T>
Var<T> mh_clus_attention(Var<T> x, const AttentionWeights<T>& weights, const AttentionSpec& spec, double lambda,
                         Grid grid, const ForwardContext& ctx) {
  spec.validate();
  auto& tape = x.tape();
  if (weights.phi->value.rows() != spec.channels) {
    throw ShapeError("mh_clus_attention: output projection must take " + std::to_string(spec.channels) + " inputs");
  }
  auto q = matmul(x, tape.parameter(*weights.wq));
  auto k = matmul(x, tape.parameter(*weights.wk));
  auto v = matmul(x, tape.parameter(*weights.wv));
  const auto it = std::find(spec.lambdas.begin(), spec.lambdas.end(), lambda);
  const std::size_t scale_index = it == spec.lambdas.end() ? 0 : static_cast<std::size_t>(it - spec.lambdas.begin());
  MacCounter counter;
  std::size_t kv_tokens = 0;
  auto merged = heads_at_scale(q, k, v, weights, spec, scale_index, lambda, grid, ctx, counter, kv_tokens);
  log_macs<T>(ctx, x.value().rows(), {kv_tokens}, counter);
  return linear(merged, tape.parameter(*weights.phi), tape.parameter(*weights.phi_bias));
}

template <typename T>
Var<T> mhms_clus_attention(Var<T> x, const AttentionWeights<T>& weights, const AttentionSpec& spec, Grid grid,
                           const ForwardContext& ctx) {
  spec.validate();
  auto& tape = x.tape();
  if (x.value().cols() != spec.channels) throw ShapeError("mhms_clus_attention: channel count mismatch");
  auto q = matmul(x, tape.parameter(*weights.wq));
  auto k = matmul(x, tape.parameter(*weights.wk));
  auto v = matmul(x, tape.parameter(*weights.wv));
  MacCounter counter;
  std::vector<std::size_t> kv_per_scale;
  std::vector<Var<T>> per_scale;
  for (std::size_t j = 0; j < spec.lambdas.size(); ++j) {
    std::size_t kv_tokens = 0;
    per_scale.push_back(heads_at_scale(q, k, v, weights, spec, j, spec.lambdas[j], grid, ctx, counter, kv_tokens));
    kv_per_scale.push_back(kv_tokens);
  }
  log_macs<T>(ctx, x.value().rows(), std::move(kv_per_scale), counter);
  Var<T> merged = per_scale.front();
  if (spec.combine == ScaleCombine::concat) {
    merged = concat_cols(per_scale);
  } else {
    for (std::size_t j = 1; j < per_scale.size(); ++j) merged = add(merged, per_scale[j]);
  }
  return linear(merged, tape.parameter(*weights.phi), tape.parameter(*weights.phi_bias));
}

AttentionMacs attention_macs(std::size_t tokens, const AttentionSpec& spec) {
  spec.validate();
  if (tokens == 0) throw ParameterError("attention_macs: need at least one token");
  const std::uint64_t n = tokens, c = spec.channels;
  AttentionMacs out;
  out.dense = 2 * n * n * c;
  for (double l : spec.lambdas) {
    const std::size_t m = is_identity_ratio(l) ? tokens : clustering::clusters_for_ratio(tokens, l);
    out.kv_tokens.push_back(m);
    out.per_scale.push_back(2 * n * m * c);
    out.clustered += out.per_scale.back();
  }
  out.projections = 3 * n * c * c + n * spec.phi_input_width() * c;
  return out;
}

#define CLUSTR_INSTANTIATE_ATTENTION(T)                                                                               \
  template AttentionWeights<T> make_attention_weights<T>(ParameterStore<T>&, const std::string&,                      \
                                                         const AttentionSpec&, std::uint64_t);                        \
  template Var<T> dense_attention<T>(Var<T>, Var<T>, Var<T>, double, MacCounter*);                                    \
  template ReducedKV<T> cluster_kv<T>(Var<T>, Var<T>, Var<T>, double, const AttentionSpec&, ClusterCache*);           \
  template Var<T> clus_attention<T>(Var<T>, Var<T>, Var<T>, Var<T>, double, const AttentionSpec&, ClusterCache*,      \
                                    MacCounter*);                                                                     \
  template Var<T> multi_scale_cluster<T>(Var<T>, Var<T>, const std::vector<double>&, const AttentionSpec&,            \
                                         ClusterCache*);                                                              \
  template Var<T> grid_aggregation<T>(Var<T>, Grid, std::size_t, Var<T>);                                             \
  template Var<T> mh_clus_attention<T>(Var<T>, const AttentionWeights<T>&, const AttentionSpec&, double, Grid,        \
                                       const ForwardContext&);                                                        \
  template Var<T> mhms_clus_attention<T>(Var<T>, const AttentionWeights<T>&, const AttentionSpec&, Grid,              \
                                         const ForwardContext&);

CLUSTR_INSTANTIATE_ATTENTION(float)
CLUSTR_INSTANTIATE_ATTENTION(double)

}  // namespace clustr::attention
