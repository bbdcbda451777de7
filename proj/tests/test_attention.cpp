#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>
#include <numeric>

#include "clustr/attention.hpp"
#include "clustr/gradcheck.hpp"
#include "support/helpers.hpp"
#include "support/oracles.hpp"
#include "support/properties.hpp"

using namespace clustr;
using namespace clustr::attention;

namespace {

Tensor<double> line_keys() { return Tensor<double>({4, 1}, std::vector<double>{0.0, 0.2, 9.0, 9.4}); }

}  // namespace

TEST_CASE("dense_attention examples") {
  Tape<double> tape;
  auto one = tape.constant(Tensor<double>::matrix(1, 1, {1}));
  CHECK(dense_attention(one, one, one, 1.0).value() == Tensor<double>::matrix(1, 1, {1}));

  CounterRng rng(1, "dense");
  auto q = tape.constant(oracle::random_matrix(rng, 3, 2));
  auto k = tape.constant(Tensor<double>::matrix(4, 2, {0.5, -1, 0.5, -1, 0.5, -1, 0.5, -1}));
  auto v = tape.constant(Tensor<double>::matrix(4, 2, {1, 2, 3, 4, 5, 6, 7, 8}));
  auto out = dense_attention(q, k, v, 2.0).value();
  for (std::size_t r = 0; r < 3; ++r) {
    CHECK(out(r, 0) == doctest::Approx(4.0).epsilon(1e-12));
    CHECK(out(r, 1) == doctest::Approx(5.0).epsilon(1e-12));
  }

  const auto qr = oracle::random_matrix(rng, 4, 2), kr = oracle::random_matrix(rng, 4, 2),
             vr = oracle::random_matrix(rng, 4, 2);
  auto got = dense_attention(tape.constant(qr), tape.constant(kr), tape.constant(vr), 2.0).value();
  CHECK(max_abs_diff(got, oracle::attention(qr, kr, vr, 2.0)) <= 1e-12);

  CHECK_THROWS_AS(dense_attention(q, k, tape.constant(Tensor<double>({3, 2})), 2.0), ShapeError);
}

TEST_CASE("clus_attention") {
  CounterRng rng(2, "clus");
  AttentionSpec spec;
  spec.channels = 3;
  Tape<double> tape;
  const auto q = tape.constant(oracle::random_matrix(rng, 7, 3));
  const auto k = tape.constant(oracle::random_matrix(rng, 7, 3));
  const auto v = tape.constant(oracle::random_matrix(rng, 7, 3));
  const auto s = tape.constant(oracle::random_matrix(rng, 7, 1));
  auto id = clus_attention(q, k, v, s, 1.0, spec).value();
  CHECK(max_abs_diff(id, dense_attention(q, k, v, 3.0).value()) <= 1e-12);

  // 1-D keys {0, 0.2, 9, 9.4}, lambda 2, k = 1, uniform scores
  AttentionSpec line;
  line.channels = 1;
  line.neighbors = 1;
  const auto qs = tape.constant(oracle::random_matrix(rng, 4, 1, -0.5, 0.5));
  const auto keys = tape.constant(line_keys());
  const auto vals = tape.constant(oracle::random_matrix(rng, 4, 1));
  auto got = clus_attention(qs, keys, vals, tape.constant(Tensor<double>({4, 1})), 2.0, line).value();
  const auto kc = Tensor<double>::matrix(2, 1, {0.1, 9.2});
  const auto& vv = vals.value();
  const auto vc = Tensor<double>::matrix(2, 1, {(vv[0] + vv[1]) / 2, (vv[2] + vv[3]) / 2});
  CHECK(max_abs_diff(got, oracle::attention(qs.value(), kc, vc, 1.0)) <= 1e-12);

  // score matrix is N x ceil(N / lambda) with unit rows
  auto kv = cluster_kv(k, v, s, 3.0, spec);
  auto scores = softmax_rows(matmul_nt(q, kv.keys)).value();
  CHECK(scores.rows() == 7);
  CHECK(scores.cols() == 3);
  for (std::size_t r = 0; r < 7; ++r) {
    double t = 0;
    for (std::size_t c = 0; c < 3; ++c) t += scores(r, c);
    CHECK(std::abs(t - 1.0) <= 1e-12);
  }
}

TEST_CASE("mh_clus_attention") {
  CounterRng rng(3, "mh");
  AttentionSpec one;
  one.channels = 4;
  ParameterStore<double> store;
  auto w = make_attention_weights(store, "a", one, 7);
  helpers::randomize(store, 8, 0.5);
  w.phi->value.fill(0.0);
  for (std::size_t i = 0; i < 4; ++i) w.phi->value(i, i) = 1.0;
  Tape<double> tape;
  const auto x = tape.constant(oracle::random_matrix(rng, 6, 4));
  auto out = mh_clus_attention(x, w, one, 1.0, {}).value();
  auto q = matmul(x, tape.parameter(*w.wq)), k = matmul(x, tape.parameter(*w.wk)), v = matmul(x, tape.parameter(*w.wv));
  auto ref = add_row_bias(dense_attention(q, k, v, 4.0), tape.parameter(*w.phi_bias)).value();
  CHECK(max_abs_diff(out, ref) <= 1e-12);

  // two heads equal two single-head runs on the column slices, concatenated and projected
  AttentionSpec two;
  two.channels = 4;
  two.heads = 2;
  two.lambdas = {2.0};
  ParameterStore<double> s2;
  auto w2 = make_attention_weights(s2, "b", two, 9);
  helpers::randomize(s2, 10, 0.5);
  Tape<double> t2;
  const auto x2 = t2.constant(oracle::random_matrix(rng, 8, 4));
  auto got = mh_clus_attention(x2, w2, two, 2.0, {}).value();
  CHECK(got.rows() == 8);
  CHECK(got.cols() == 4);

  AttentionSpec single;
  single.channels = 2;
  single.lambdas = {2.0};
  auto q2 = matmul(x2, t2.parameter(*w2.wq)), k2 = matmul(x2, t2.parameter(*w2.wk)),
       v2 = matmul(x2, t2.parameter(*w2.wv));
  std::vector<Var<double>> heads;
  for (std::size_t h = 0; h < 2; ++h) {
    auto kh = slice_cols(k2, 2 * h, 2 * h + 2);
    auto sh = matmul(kh, t2.parameter(*w2.score_proj[h]));
    heads.push_back(clus_attention(slice_cols(q2, 2 * h, 2 * h + 2), kh, slice_cols(v2, 2 * h, 2 * h + 2), sh, 2.0,
                                   single));
  }
  auto expect = linear(concat_cols(heads), t2.parameter(*w2.phi), t2.parameter(*w2.phi_bias)).value();
  CHECK(max_abs_diff(got, expect) <= 1e-12);
}

TEST_CASE("multi_scale_cluster") {
  CounterRng rng(4, "msc");
  AttentionSpec spec;
  spec.channels = 3;
  Tape<double> tape;
  const auto x8 = tape.constant(oracle::random_matrix(rng, 8, 3));
  const auto s8 = tape.constant(oracle::random_matrix(rng, 8, 1));
  CHECK(multi_scale_cluster(x8, s8, {1.0}, spec).value() == x8.value());
  CHECK(multi_scale_cluster(x8, s8, {4.0, 1.0}, spec).value().rows() == 10);
  const auto two = multi_scale_cluster(x8, s8, {2.0}, spec).value();
  const auto ref = clustering::cluster_tokens(x8.value(), clustering::ClusterParams::with_ratio(2.0), s8.value());
  CHECK(two == ref.tokens);
}

TEST_CASE("mhms_clus_attention") {
  CounterRng rng(5, "mhms");
  AttentionSpec spec;
  spec.channels = 4;
  spec.heads = 2;
  ParameterStore<double> store;
  auto w = make_attention_weights(store, "a", spec, 3);
  helpers::randomize(store, 4, 0.5);
  Tape<double> tape;
  const auto x = tape.constant(oracle::random_matrix(rng, 9, 4));
  CHECK(max_abs_diff(mhms_clus_attention(x, w, spec, {}).value(), mh_clus_attention(x, w, spec, 1.0, {}).value()) ==
        0.0);

  AttentionSpec multi = spec;
  multi.lambdas = {4.0, 1.0};
  ParameterStore<double> s2;
  auto w2 = make_attention_weights(s2, "m", multi, 5);
  CHECK(w2.phi->value.rows() == 8);
  const auto x16 = tape.constant(oracle::random_matrix(rng, 16, 4));
  auto y = mhms_clus_attention(x16, w2, multi, {}).value();
  CHECK(y.rows() == 16);
  CHECK(y.cols() == 4);
  CHECK(y.all_finite());

  AttentionSpec summed = multi;
  summed.combine = ScaleCombine::sum;
  ParameterStore<double> s3;
  auto w3 = make_attention_weights(s3, "s", summed, 5);
  CHECK(w3.phi->value.rows() == 4);
  CHECK(mhms_clus_attention(x16, w3, summed, {}).value().cols() == 4);
}

TEST_CASE("mhms_clus_attention gradient") {
  CounterRng rng(6, "mhms-grad");
  AttentionSpec spec;
  spec.channels = 4;
  spec.heads = 2;
  spec.lambdas = {4.0, 1.0};
  ParameterStore<double> store;
  auto w = make_attention_weights(store, "a", spec, 11);
  helpers::randomize(store, 12, 0.5);
  const auto x = oracle::random_matrix(rng, 12, 4);
  ClusterCache cache;
  auto loss = helpers::cached_loss(cache, [&](Tape<double>& t, ForwardContext ctx) {
    auto y = mhms_clus_attention(t.constant(x), w, spec, {}, ctx);
    return sum(mul(y, y));
  });
  auto params = store.all();
  CHECK(params.size() == 7);
  const auto res = finite_diff_gradcheck(loss, params);
  INFO(res.worst_param);
  CHECK(res.max_rel_error <= 1e-4);
}

TEST_CASE("grid aggregation") {
  Tape<double> tape;
  CounterRng rng(7, "grid");
  const auto x = tape.constant(oracle::random_matrix(rng, 6, 2));
  CHECK(grid_aggregation(x, {2, 3}, 1, tape.constant(Tensor<double>({1}, 1.0))).value() == x.value());

  const auto g = tape.constant(Tensor<double>::matrix(4, 1, {1, 2, 3, 4}));
  CHECK(grid_aggregation(g, {2, 2}, 2, tape.constant(Tensor<double>({4}, 0.25))).value()[0] == 2.5);

  const auto x16 = oracle::random_matrix(rng, 16, 3);
  std::vector<double> w{0.1, 0.2, 0.3, 0.4};
  auto got = grid_aggregation(tape.constant(x16), {4, 4}, 2, tape.constant(Tensor<double>({4}, w))).value();
  CHECK(got.rows() == 4);
  CHECK(max_abs_diff(got, oracle::grid_pool(x16, 4, 4, 2, w)) <= 1e-15);

  CHECK_THROWS_AS(grid_aggregation(tape.constant(oracle::random_matrix(rng, 9, 1)), {3, 3}, 2,
                                   tape.constant(Tensor<double>({4}, 0.25))),
                  ParameterError);
  CHECK(grid_patch_size(64) == 8);
  CHECK_THROWS_AS(grid_patch_size(8), ParameterError);
}

TEST_CASE("attention_macs") {
  AttentionSpec spec;
  spec.channels = 64;
  auto dense = attention_macs(3136, spec);
  CHECK(dense.clustered == dense.dense);

  spec.lambdas = {64};
  auto stage1 = attention_macs(3136, spec);
  CHECK(stage1.kv_tokens == std::vector<std::size_t>{49});
  CHECK(stage1.clustered * 64 == stage1.dense);
  CHECK(stage1.dense == 2ull * 3136 * 3136 * 64);

  spec.lambdas = {64, 16};
  auto ms = attention_macs(4096, spec);
  CHECK(ms.kv_tokens[0] + ms.kv_tokens[1] == 320);
  CHECK(ms.clustered == 2ull * 4096 * 64 * 320);
  CHECK(ms.per_scale.size() == 2);
}

TEST_CASE("spec validation") {
  AttentionSpec bad;
  bad.channels = 6;
  bad.heads = 4;
  CHECK_THROWS_AS(bad.validate(), ParameterError);
  AttentionSpec rep;
  rep.channels = 4;
  rep.lambdas = {2.0, 2.0};
  CHECK_THROWS_AS(rep.validate(), ParameterError);
  AttentionSpec small;
  small.channels = 4;
  small.lambdas = {0.5};
  CHECK_THROWS_AS(small.validate(), ParameterError);
  AttentionSpec neg;
  neg.channels = 4;
  neg.scale = -1.0;
  CHECK_THROWS_AS(neg.validate(), ParameterError);
}

TEST_CASE("attention properties hold across seeds") {
  for (std::uint64_t seed : {1, 2, 3}) {
    CAPTURE(seed);
    for (const auto& check : props::attention_checks()) {
      const auto outcome = check.run(seed);
      INFO(check.name << ": " << outcome.detail);
      CHECK(outcome.ok);
    }
  }
}
