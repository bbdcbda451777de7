#include <cmath>
#include <sstream>

#include "clustr/gradcheck.hpp"
#include "clustr/ops.hpp"
#include "oracles.hpp"
#include "properties.hpp"

namespace props {

using namespace clustr;

namespace {

Outcome fail(const std::string& why) { return Outcome{false, why}; }

Outcome softmax_rows_sum_to_one(std::uint64_t seed) {
  CounterRng rng(seed, "prop-softmax");
  Tape<double> td;
  const auto x = oracle::random_matrix(rng, 11, 13, -50, 50);
  auto p = softmax_rows(td.constant(x)).value();
  Tape<float> tf;
  auto pf = softmax_rows(tf.constant(x.cast<float>())).value();
  for (std::size_t r = 0; r < p.rows(); ++r) {
    double s = 0.0, sf = 0.0;
    for (std::size_t c = 0; c < p.cols(); ++c) {
      if (p(r, c) < 0.0) return fail("negative probability");
      s += p(r, c);
      sf += pf(r, c);
    }
    if (std::abs(s - 1.0) > 1e-12) return fail("double row sum off by " + std::to_string(s - 1.0));
    if (std::abs(sf - 1.0) > 1e-6) return fail("float row sum off by " + std::to_string(sf - 1.0));
  }
  return {};
}

Outcome backward_matches_finite_differences(std::uint64_t seed) {
  CounterRng rng(seed, "prop-fd");
  Parameter<double> a("a", oracle::random_matrix(rng, 5, 4));
  Parameter<double> b("b", oracle::random_matrix(rng, 4, 6));
  Parameter<double> g("g", oracle::random_matrix(rng, 1, 6, 0.5, 1.5).reshaped({6}));
  Parameter<double> beta("beta", oracle::random_matrix(rng, 1, 6).reshaped({6}));
  Parameter<double> s("s", oracle::random_matrix(rng, 5, 1));
  Parameter<double> w("w", oracle::random_matrix(rng, 2, 6));
  const std::vector<std::size_t> labels{0, 1, 1, 0, 1};
  auto loss = [&](Tape<double>& t) {
    auto h = layer_norm(matmul(t.parameter(a), t.parameter(b)), t.parameter(g), t.parameter(beta));
    auto weights = segment_softmax(t.parameter(s), labels, 2);
    auto pooled = segment_weighted_sum(gelu(h), labels, weights, 2);
    return sum(mul(pooled, t.parameter(w)));
  };
  std::vector<Parameter<double>*> params{&a, &b, &g, &beta, &s};
  const auto r = finite_diff_gradcheck(loss, params);
  if (r.max_rel_error > 1e-4) {
    return fail("rel err " + std::to_string(r.max_rel_error) + " at " + r.worst_param);
  }
  return {};
}

Outcome singleton_segments_are_identity(std::uint64_t seed) {
  CounterRng rng(seed, "prop-seg");
  const auto x = oracle::random_matrix(rng, 9, 5, -1e3, 1e3);
  std::vector<std::size_t> ident(9);
  for (std::size_t i = 0; i < 9; ++i) ident[i] = i;
  Tape<double> t(false);
  auto y = segment_weighted_sum(t.constant(x), ident, t.constant(Tensor<double>({9}, 1.0)), 9).value();
  if (!(y == x)) return fail("singleton aggregation changed values");
  return {};
}

Outcome large_inputs_stay_finite(std::uint64_t seed) {
  CounterRng rng(seed, "prop-finite");
  Tape<double> t(false);
  auto x = t.constant(oracle::random_matrix(rng, 8, 6, -1e3, 1e3));
  auto w = t.constant(oracle::random_matrix(rng, 6, 6, -1e3, 1e3));
  auto g = t.constant(Tensor<double>({6}, 1.0));
  auto b = t.constant(Tensor<double>({6}, 0.0));
  try {
    auto h = layer_norm(matmul(x, w), g, b);
    auto y = softmax_rows(matmul_nt(gelu(x), x));
    std::vector<std::size_t> lab{0, 0, 1, 1, 2, 2, 0, 1};
    auto s = segment_softmax(slice_cols(x, 0, 1), lab, 3);
    auto z = segment_weighted_sum(h, lab, s, 3);
    if (!y.value().all_finite() || !z.value().all_finite()) return fail("non-finite output");
  } catch (const NumericError& e) {
    return fail(e.what());
  }
  return {};
}

}  // namespace

std::vector<Check> numerics_checks() {
  return {
      {"numerics", "softmax rows sum to one", softmax_rows_sum_to_one},
      {"numerics", "backward passes match finite differences", backward_matches_finite_differences},
      {"numerics", "singleton segments are the identity", singleton_segments_are_identity},
      {"numerics", "finite inputs up to 1e3 stay finite", large_inputs_stay_finite},
  };
}

}  // namespace props
