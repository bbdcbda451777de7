#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "clustr/autodiff.hpp"
#include "clustr/clustering.hpp"
#include "clustr/ops.hpp"

namespace clustr::attention {

/// How keys and values are condensed before attention.
enum class Aggregation {
  cluster,  // density-peaks clustering of the key tokens
  grid,     // learned pooling of fixed r x r token patches, r = sqrt(lambda)
};

/// How per-scale head outputs reach the output projection.
enum class ScaleCombine {
  concat,  // channels of all scales side by side; phi is (C * L) x C
  sum,     // per-scale outputs added; phi is C x C
};

struct AttentionSpec {
  std::size_t heads = 1;
  std::size_t channels = 0;
  std::optional<double> scale;  // softmax temperature s; head channel count when unset
  std::vector<double> lambdas{1.0};
  std::optional<std::size_t> neighbors;
  Aggregation aggregation = Aggregation::cluster;
  ScaleCombine combine = ScaleCombine::concat;

  std::size_t head_channels() const { return channels / heads; }
  double scale_factor() const { return scale ? *scale : static_cast<double>(head_channels()); }
  std::size_t phi_input_width() const {
    return combine == ScaleCombine::concat ? channels * lambdas.size() : channels;
  }
  /// Throws ParameterError on heads not dividing channels, s <= 0, lambda < 1 or repeated lambdas.
  void validate() const;
};

struct Grid {
  std::size_t height = 0;
  std::size_t width = 0;
  std::size_t tokens() const { return height * width; }
};

/// Patch size used by grid aggregation for ratio lambda; lambda must be a perfect square.
std::size_t grid_patch_size(double lambda);

template <typename T>
struct AttentionWeights {
  Parameter<T>* wq = nullptr;  // C x C, head i owns columns [i*C_h, (i+1)*C_h)
  Parameter<T>* wk = nullptr;
  Parameter<T>* wv = nullptr;
  Parameter<T>* phi = nullptr;  // phi_input_width x C
  Parameter<T>* phi_bias = nullptr;
  std::vector<Parameter<T>*> score_proj;   // per head, C_h x 1, cluster aggregation only
  std::vector<Parameter<T>*> pool_logits;  // per scale, r*r, grid aggregation only (null when r == 1)
};

/// Registers one attention layer's parameters under `prefix` (e.g. "stage1.block0.attn").
template <typename T>
AttentionWeights<T> make_attention_weights(ParameterStore<T>& store, const std::string& prefix,
                                           const AttentionSpec& spec, std::uint64_t seed);

/// Per-layer record of score/value products measured during a forward pass.
struct LayerMacs {
  std::string layer;
  std::size_t tokens = 0;
  std::vector<std::size_t> kv_tokens;  // per scale
  std::uint64_t measured = 0;
};

/// Replays cluster labels so repeated forward passes (finite differences) see identical assignments.
class ClusterCache {
 public:
  enum class Mode { record, replay };

  void start(Mode mode) {
    mode_ = mode;
    cursor_ = 0;
    if (mode == Mode::record) entries_.clear();
  }
  Mode mode() const { return mode_; }

  /// Labels for the next clustering call: computes and stores when recording, returns stored when replaying.
  const clustering::ClusterResult& next(const std::function<clustering::ClusterResult()>& compute);

 private:
  Mode mode_ = Mode::record;
  std::size_t cursor_ = 0;
  std::vector<clustering::ClusterResult> entries_;
};

struct ForwardContext {
  std::vector<LayerMacs>* mac_log = nullptr;
  ClusterCache* cache = nullptr;
  std::string layer;
};

/// softmax(q k^T / sqrt(s)) v
template <typename T>
Var<T> dense_attention(Var<T> q, Var<T> k, Var<T> v, double s, MacCounter* counter = nullptr);

/// Condensed keys and values for one head at one scale.
template <typename T>
struct ReducedKV {
  Var<T> keys;
  Var<T> values;
};

/// Clusters the key tokens once and aggregates keys and values with the same assignment and weights.
template <typename T>
ReducedKV<T> cluster_kv(Var<T> k, Var<T> v, Var<T> scores, double lambda, const AttentionSpec& spec,
                        ClusterCache* cache = nullptr);

/// Attention of every query against the clustered keys and values; queries are never reduced.
template <typename T>
Var<T> clus_attention(Var<T> q, Var<T> k, Var<T> v, Var<T> scores, double lambda, const AttentionSpec& spec,
                      ClusterCache* cache = nullptr, MacCounter* counter = nullptr);

/// Concatenation of cluster_tokens(x; lambda_j) blocks in declared order.
template <typename T>
Var<T> multi_scale_cluster(Var<T> x, Var<T> scores, const std::vector<double>& lambdas, const AttentionSpec& spec,
                           ClusterCache* cache = nullptr);

/// Learned-weight pooling of non-overlapping r x r patches; weights has r*r entries.
template <typename T>
Var<T> grid_aggregation(Var<T> x, Grid grid, std::size_t r, Var<T> weights);

/// Multi-head clustered attention at a single ratio; requires phi of width C.
template <typename T>
Var<T> mh_clus_attention(Var<T> x, const AttentionWeights<T>& weights, const AttentionSpec& spec, double lambda,
                         Grid grid, const ForwardContext& ctx = {});

/// Multi-head, multi-scale clustered attention over spec.lambdas.
template <typename T>
Var<T> mhms_clus_attention(Var<T> x, const AttentionWeights<T>& weights, const AttentionSpec& spec, Grid grid,
                           const ForwardContext& ctx = {});

struct AttentionMacs {
  std::uint64_t dense = 0;             // 2 N^2 C
  std::uint64_t clustered = 0;         // 2 N C sum_j M_j
  std::vector<std::uint64_t> per_scale;
  std::vector<std::size_t> kv_tokens;  // M_j = ceil(N / lambda_j)
  std::uint64_t projections = 0;       // Q, K, V and phi, reported separately
};

/// Analytic multiply counts of the score and value products for N tokens.
AttentionMacs attention_macs(std::size_t tokens, const AttentionSpec& spec);

}  // namespace clustr::attention
