#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <string>

#include "clustr/clustering.hpp"
#include "clustr/ops.hpp"

namespace clustr::clustering {

std::size_t clusters_for_ratio(std::size_t n, double lambda) {
  if (!(lambda >= 1.0) || !std::isfinite(lambda)) {
    throw ParameterError("reduction ratio must be a finite value >= 1, got " + std::to_string(lambda));
  }
  const auto m = static_cast<std::size_t>(std::ceil(static_cast<double>(n) / lambda));
  return std::max<std::size_t>(1, m);
}

std::size_t default_neighbors(std::size_t n) { return n <= 1 ? 1 : std::min<std::size_t>(5, n - 1); }

std::size_t ClusterParams::resolve_clusters(std::size_t n) const {
  if (clusters) return *clusters;
  if (lambda) return clusters_for_ratio(n, *lambda);
  throw ParameterError("cluster parameters need either a ratio or a cluster count");
}

std::size_t ClusterParams::resolve_neighbors(std::size_t n) const {
  return neighbors ? *neighbors : default_neighbors(n);
}

bool ClusterParams::is_identity(std::size_t n) const {
  if (n == 1) return true;
  return !clusters && lambda && *lambda == 1.0;
}

namespace {

// Pairs with |a-b|^2 below this fraction of |a|^2 + |b|^2 are recomputed from differences.
constexpr double kCancellationGuard = 1e-2;

}  // namespace

Tensor<double> pairwise_distances(const Tensor<double>& x) {
  if (x.rank() != 2) throw ShapeError("pairwise_distances: expected N x C tokens, got " + shape_string(x.shape()));
  const std::size_t n = x.rows(), c = x.cols();
  if (n < 2) throw ParameterError("pairwise_distances: need at least two tokens");
  std::vector<double> sq(n, 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    auto r = x.row(i);
    for (std::size_t k = 0; k < c; ++k) sq[i] += r[k] * r[k];
  }
  Tensor<double> d({n, n});
  for (std::size_t i = 0; i < n; ++i) {
    auto a = x.row(i);
    for (std::size_t j = i + 1; j < n; ++j) {
      auto b = x.row(j);
      double dot = 0.0;
      for (std::size_t k = 0; k < c; ++k) dot += a[k] * b[k];
      double d2 = std::max(0.0, sq[i] + sq[j] - 2.0 * dot);
      if (d2 < kCancellationGuard * (sq[i] + sq[j])) {
        // close pair: the expanded form has lost most of its significant bits
        d2 = 0.0;
        for (std::size_t k = 0; k < c; ++k) d2 += (a[k] - b[k]) * (a[k] - b[k]);
      }
      d(i, j) = d(j, i) = std::sqrt(d2);
    }
  }
  return d;
}

namespace {

void require_square(const Tensor<double>& d, const char* op) {
  if (d.rank() != 2 || d.rows() != d.cols()) {
    throw ShapeError(std::string(op) + ": expected a square distance matrix, got " + shape_string(d.shape()));
  }
}

}  // namespace

std::vector<double> local_density(const Tensor<double>& distances, std::size_t k) {
  require_square(distances, "local_density");
  const std::size_t n = distances.rows();
  if (k < 1 || k + 1 > n) {
    throw ParameterError("local_density: neighbor count " + std::to_string(k) + " outside [1, " +
                         std::to_string(n - 1) + "]");
  }
  std::vector<double> rho(n);
  std::vector<std::size_t> others;
  others.reserve(n - 1);
  for (std::size_t i = 0; i < n; ++i) {
    others.clear();
    for (std::size_t j = 0; j < n; ++j) {
      if (j != i) others.push_back(j);
    }
    auto row = distances.row(i);
    std::partial_sort(others.begin(), others.begin() + static_cast<std::ptrdiff_t>(k), others.end(),
                      [&](std::size_t a, std::size_t b) { return row[a] < row[b] || (row[a] == row[b] && a < b); });
    double total = 0.0;
    for (std::size_t t = 0; t < k; ++t) total += row[others[t]] * row[others[t]];
    rho[i] = std::exp(-total / static_cast<double>(k));
  }
  return rho;
}

std::vector<std::size_t> density_order(std::span<const double> rho) {
  std::vector<std::size_t> order(rho.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::sort(order.begin(), order.end(),
            [&](std::size_t a, std::size_t b) { return rho[a] > rho[b] || (rho[a] == rho[b] && a < b); });
  return order;
}

std::vector<double> peak_distance(const Tensor<double>& distances, std::span<const double> rho) {
  require_square(distances, "peak_distance");
  const std::size_t n = distances.rows();
  if (rho.size() != n) throw ShapeError("peak_distance: density length does not match distances");
  const auto order = density_order(rho);
  std::vector<double> delta(n);
  for (std::size_t p = 0; p < n; ++p) {
    const std::size_t i = order[p];
    auto row = distances.row(i);
    if (p == 0) {
      delta[i] = *std::max_element(row.begin(), row.end());
      continue;
    }
    double best = std::numeric_limits<double>::infinity();
    for (std::size_t q = 0; q < p; ++q) best = std::min(best, row[order[q]]);
    delta[i] = best;
  }
  return delta;
}

std::vector<double> decision_scores(std::span<const double> rho, std::span<const double> delta) {
  if (rho.size() != delta.size()) throw ShapeError("decision_scores: length mismatch");
  std::vector<double> gamma(rho.size());
  for (std::size_t i = 0; i < rho.size(); ++i) gamma[i] = rho[i] * delta[i];
  return gamma;
}

std::vector<std::size_t> select_peaks(std::span<const double> gamma, std::size_t m,
                                      std::optional<std::size_t> must_include) {
  const std::size_t n = gamma.size();
  if (m < 1 || m > n) {
    throw ParameterError("select_peaks: cluster count " + std::to_string(m) + " outside [1, " + std::to_string(n) +
                         "]");
  }
  auto by_score = [&](std::size_t a, std::size_t b) {
    return gamma[a] > gamma[b] || (gamma[a] == gamma[b] && a < b);
  };
  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  std::partial_sort(idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(m), idx.end(), by_score);
  idx.resize(m);
  if (must_include) {
    if (*must_include >= n) throw ParameterError("select_peaks: forced peak out of range");
    if (std::find(idx.begin(), idx.end(), *must_include) == idx.end()) {
      idx.back() = *must_include;
      std::sort(idx.begin(), idx.end(), by_score);
    }
  }
  return idx;
}

std::vector<std::size_t> assign_clusters(const Tensor<double>& distances, std::span<const double> rho,
                                         std::span<const std::size_t> peaks) {
  require_square(distances, "assign_clusters");
  const std::size_t n = distances.rows();
  if (rho.size() != n) throw ShapeError("assign_clusters: density length does not match distances");
  constexpr std::size_t kUnset = std::numeric_limits<std::size_t>::max();
  std::vector<std::size_t> peak_label(n, kUnset);
  for (std::size_t j = 0; j < peaks.size(); ++j) {
    if (peaks[j] >= n) throw ParameterError("assign_clusters: peak index out of range");
    if (peak_label[peaks[j]] != kUnset) throw ParameterError("assign_clusters: duplicate peak");
    peak_label[peaks[j]] = j;
  }
  const auto order = density_order(rho);
  if (peak_label[order.front()] == kUnset) {
    throw ParameterError("assign_clusters: the highest-density token must be a peak");
  }
  std::vector<std::size_t> labels(n, kUnset);
  for (std::size_t p = 0; p < n; ++p) {
    const std::size_t i = order[p];
    if (peak_label[i] != kUnset) {
      labels[i] = peak_label[i];
      continue;
    }
    auto row = distances.row(i);
    std::size_t nearest = order[0];
    for (std::size_t q = 1; q < p; ++q) {
      const std::size_t j = order[q];
      if (row[j] < row[nearest] || (row[j] == row[nearest] && j < nearest)) nearest = j;
    }
    labels[i] = labels[nearest];
  }
  return labels;
}

ClusterResult identity_clusters(std::size_t n) {
  ClusterResult r;
  r.rho.assign(n, 1.0);
  r.delta.assign(n, 0.0);
  r.gamma.assign(n, 0.0);
  r.peaks.resize(n);
  std::iota(r.peaks.begin(), r.peaks.end(), std::size_t{0});
  r.labels = r.peaks;
  return r;
}

ClusterResult density_peaks(const Tensor<double>& x, const ClusterParams& params) {
  if (x.rank() != 2) throw ShapeError("density_peaks: expected N x C tokens, got " + shape_string(x.shape()));
  const std::size_t n = x.rows();
  if (n == 0) throw ParameterError("density_peaks: empty token set");
  const std::size_t m = params.resolve_clusters(n);
  if (m < 1 || m > n) {
    throw ParameterError("density_peaks: cluster count " + std::to_string(m) + " outside [1, " + std::to_string(n) +
                         "]");
  }
  if (n == 1) return identity_clusters(1);

  ClusterResult r;
  const Tensor<double> d = pairwise_distances(x);
  r.rho = local_density(d, params.resolve_neighbors(n));
  r.delta = peak_distance(d, r.rho);
  r.gamma = decision_scores(r.rho, r.delta);
  // The densest token has nobody to inherit a label from, so it is always a peak.
  r.peaks = select_peaks(r.gamma, m, density_order(r.rho).front());
  r.labels = assign_clusters(d, r.rho, r.peaks);
  return r;
}

template <typename T>
AggregatedVar<T> aggregate(Var<T> x, std::span<const std::size_t> labels, std::size_t clusters, Var<T> scores) {
  Var<T> weights = segment_softmax(scores, labels, clusters);
  Var<T> tokens = segment_weighted_sum(x, labels, weights, clusters);
  return {tokens, weights};
}

template AggregatedVar<float> aggregate<float>(Var<float>, std::span<const std::size_t>, std::size_t, Var<float>);
template AggregatedVar<double> aggregate<double>(Var<double>, std::span<const std::size_t>, std::size_t,
                                                 Var<double>);

AggregatedTokens cluster_tokens(const Tensor<double>& x, const ClusterParams& params, const Tensor<double>& scores) {
  if (x.rank() != 2) throw ShapeError("cluster_tokens: expected N x C tokens, got " + shape_string(x.shape()));
  const std::size_t n = x.rows();
  if (n == 0) throw ParameterError("cluster_tokens: empty token set");
  if (scores.size() != n) throw ShapeError("cluster_tokens: one score per token required");
  if (params.is_identity(n)) {
    return AggregatedTokens{x, std::vector<double>(n, 1.0), identity_clusters(n)};
  }
  ClusterResult result = density_peaks(x, params);
  Tape<double> tape(false);
  auto agg = aggregate(tape.constant(x), result.labels, result.num_clusters(), tape.constant(scores));
  const auto& w = agg.weights.value();
  return AggregatedTokens{agg.tokens.value(), std::vector<double>(w.data().begin(), w.data().end()),
                          std::move(result)};
}

}  // namespace clustr::clustering
