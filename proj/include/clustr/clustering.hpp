#pragma once

#include <cstddef>
#include <optional>
#include <span>
#include <vector>

#include "clustr/autodiff.hpp"
#include "clustr/tensor.hpp"

namespace clustr::clustering {

/// Number of clusters for reduction ratio `lambda`: max(1, ceil(n / lambda)).
std::size_t clusters_for_ratio(std::size_t n, double lambda);

/// Density neighbor count used when none is configured: min(5, n - 1).
std::size_t default_neighbors(std::size_t n);

/// Either a reduction ratio or an explicit cluster count; `neighbors` defaults to default_neighbors(N).
struct ClusterParams {
  std::optional<double> lambda;
  std::optional<std::size_t> clusters;
  std::optional<std::size_t> neighbors;

  static ClusterParams with_ratio(double lambda, std::optional<std::size_t> neighbors = std::nullopt) {
    return ClusterParams{lambda, std::nullopt, neighbors};
  }
  static ClusterParams with_clusters(std::size_t m, std::optional<std::size_t> neighbors = std::nullopt) {
    return ClusterParams{std::nullopt, m, neighbors};
  }

  std::size_t resolve_clusters(std::size_t n) const;
  std::size_t resolve_neighbors(std::size_t n) const;
  /// True when the configuration reduces to the identity (lambda == 1 or a single token).
  bool is_identity(std::size_t n) const;
};

struct ClusterResult {
  std::vector<double> rho;
  std::vector<double> delta;
  std::vector<double> gamma;
  std::vector<std::size_t> peaks;   // peaks[j] is the token index of cluster j's center
  std::vector<std::size_t> labels;  // labels[i] is token i's cluster id

  std::size_t num_clusters() const { return peaks.size(); }
};

/// Euclidean distances via |a|^2 + |b|^2 - 2ab, clamped at zero. Symmetric with an exact zero diagonal.
Tensor<double> pairwise_distances(const Tensor<double>& x);

/// rho[i] = exp(-(1/k) * sum of squared distances to the k nearest other tokens).
std::vector<double> local_density(const Tensor<double>& distances, std::size_t k);

/// Token indices sorted by density descending, index ascending.
std::vector<std::size_t> density_order(std::span<const double> rho);

/// Distance to the nearest token earlier in density_order; the first token gets its max distance.
std::vector<double> peak_distance(const Tensor<double>& distances, std::span<const double> rho);

std::vector<double> decision_scores(std::span<const double> rho, std::span<const double> delta);

/// Indices of the m largest scores (ties to the lower index), sorted by descending score.
/// If `must_include` is outside the selection it replaces the lowest-scored pick.
std::vector<std::size_t> select_peaks(std::span<const double> gamma, std::size_t m,
                                      std::optional<std::size_t> must_include = std::nullopt);

/// Walks tokens in density order; peak j takes label j, every other token copies the label of
/// its nearest already-visited token (ties to the lower index).
std::vector<std::size_t> assign_clusters(const Tensor<double>& distances, std::span<const double> rho,
                                         std::span<const std::size_t> peaks);

/// Full density-peaks pass over an N x C token set.
ClusterResult density_peaks(const Tensor<double>& x, const ClusterParams& params);

/// Identity clustering: every token is its own cluster, in index order.
ClusterResult identity_clusters(std::size_t n);

template <typename T>
struct AggregatedVar {
  Var<T> tokens;   // M x C
  Var<T> weights;  // per-token weights, normalized within each cluster
};

/// Within-cluster softmax of `scores`, then the weighted sum of each cluster's rows.
/// Labels are constants; gradients reach `x` and `scores` only.
template <typename T>
AggregatedVar<T> aggregate(Var<T> x, std::span<const std::size_t> labels, std::size_t clusters, Var<T> scores);

struct AggregatedTokens {
  Tensor<double> tokens;
  std::vector<double> weights;
  ClusterResult source;
};

/// Value-level composite: density_peaks followed by aggregate. lambda == 1 or N == 1 returns x unchanged.
AggregatedTokens cluster_tokens(const Tensor<double>& x, const ClusterParams& params, const Tensor<double>& scores);

}  // namespace clustr::clustering
