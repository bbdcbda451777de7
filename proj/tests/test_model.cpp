#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>
#include <filesystem>

#include "clustr/model.hpp"
#include "support/gradchecks.hpp"
#include "support/helpers.hpp"
#include "support/oracles.hpp"
#include "support/properties.hpp"

using namespace clustr;
using namespace clustr::model;

TEST_CASE("stage grids") {
  const auto t = stage_grids(variant_config("T"));
  REQUIRE(t.size() == 4);
  CHECK(t[0].tokens() == 3136);
  CHECK(t[1].height == 28);
  CHECK(t[2].height == 14);
  CHECK(t[3].height == 7);
  const auto micro = stage_grids(variant_config("micro"));
  CHECK(micro[0].height == 8);
  CHECK(micro[3].height == 1);

  // 8x8 toy image: 2x2 after the first embedding, 1x1 after the second
  CHECK(conv_output_size(8, 7, 4, 3) == 2);
  CHECK(conv_output_size(2, 3, 2, 1) == 1);
}

TEST_CASE("overlapped patch embedding") {
  CounterRng rng(1, "embed");
  ParameterStore<double> store;
  StageWeights<double> w;
  const std::size_t c = 3;
  Tensor<double> eye({c, c});
  for (std::size_t i = 0; i < c; ++i) eye(i, i) = 1.0;
  w.embed = &store.add("embed", eye);
  w.embed_bias = &store.add("embed_bias", Tensor<double>({c}));
  w.embed_norm_gain = &store.add("gain", Tensor<double>({c}, 1.0));
  w.embed_norm_bias = &store.add("bias", Tensor<double>({c}));
  Tape<double> tape;
  const auto x = oracle::random_matrix(rng, 16, c);
  auto y = overlapped_patch_embed(tape.constant(x), {4, 4}, PatchEmbedConfig{1, 1, 0, c, c}, w).value();
  REQUIRE(y.rows() == 16);
  for (std::size_t r = 0; r < 16; ++r) {
    double mean = 0.0, var = 0.0;
    for (std::size_t k = 0; k < c; ++k) mean += x(r, k) / c;
    for (std::size_t k = 0; k < c; ++k) var += (x(r, k) - mean) * (x(r, k) - mean) / c;
    for (std::size_t k = 0; k < c; ++k) {
      CHECK(y(r, k) == doctest::Approx((x(r, k) - mean) / std::sqrt(var + 1e-5)).epsilon(1e-12));
    }
  }

  StageWeights<double> w2;
  ParameterStore<double> s2;
  w2.embed = &s2.add("embed", oracle::random_matrix(rng, 49 * 3, 5));
  w2.embed_bias = &s2.add("embed_bias", Tensor<double>({5}));
  w2.embed_norm_gain = &s2.add("gain", Tensor<double>({5}, 1.0));
  w2.embed_norm_bias = &s2.add("bias", Tensor<double>({5}));
  auto toy = overlapped_patch_embed(tape.constant(oracle::random_matrix(rng, 64, 3)), {8, 8},
                                    PatchEmbedConfig{7, 4, 3, 3, 5}, w2);
  CHECK(toy.value().rows() == 4);
  CHECK_THROWS_AS(overlapped_patch_embed(tape.constant(oracle::random_matrix(rng, 64, 2)), {8, 8},
                                         PatchEmbedConfig{7, 4, 3, 3, 5}, w2),
                  ShapeError);
}

TEST_CASE("variant configs follow the architecture table") {
  const auto t = variant_config("T");
  const auto s = variant_config("S");
  const auto b = variant_config("B");
  auto depths = [](const ModelConfig& c) {
    std::vector<std::size_t> d;
    for (const auto& st : c.stages) d.push_back(st.layers);
    return d;
  };
  CHECK(depths(t) == std::vector<std::size_t>{1, 2, 6, 1});
  CHECK(depths(s) == std::vector<std::size_t>{3, 5, 13, 2});
  CHECK(depths(b) == std::vector<std::size_t>{3, 5, 18, 3});
  CHECK(b.stages[2].channels == 320);
  CHECK(b.stages[2].heads == 5);
  for (const auto* cfg : {&t, &s, &b}) {
    CHECK(cfg->stages[0].lambdas == std::vector<double>{64, 16});
    CHECK(cfg->stages[1].lambdas == std::vector<double>{16, 4});
    CHECK(cfg->stages[2].lambdas == std::vector<double>{4, 1});
    CHECK(cfg->stages[3].lambdas == std::vector<double>{1});
    CHECK(table_deviations(*cfg).empty());
  }
  CHECK(variant_config("tiny").variant == "T");
  CHECK_THROWS_AS(variant_config("XL"), ConfigError);

  auto custom = t;
  custom.variant = "custom";
  custom.stages[1].layers = 4;
  custom.stages[0].lambdas = {8};
  const auto flags = table_deviations(custom);
  CHECK(flags.size() == 2);
  CHECK_NOTHROW(Model<float>(custom, 0));
}

TEST_CASE("config json") {
  const auto micro = variant_config("micro", 10);
  nlohmann::json j = micro;
  const auto back = j.get<ModelConfig>();
  CHECK(nlohmann::json(back) == j);
  CHECK(nlohmann::json::parse(R"({"variant": "micro", "num_classes": 10})").get<ModelConfig>().stages.size() == 4);
  CHECK_THROWS_AS(nlohmann::json::parse(R"({"variant": "micro", "clases": 10})").get<ModelConfig>(), ConfigError);
  CHECK_THROWS_AS(nlohmann::json::parse(R"({"variant": "micro", "aggregation": "pool"})").get<ModelConfig>(),
                  ConfigError);
  auto bad = j;
  bad["stages"][1]["heads"] = 3;
  CHECK_THROWS_AS(bad.get<ModelConfig>(), ConfigError);
  auto grid = j;
  grid["aggregation"] = "grid";
  grid["stages"][0]["lambdas"] = {9};
  CHECK_THROWS_AS(grid.get<ModelConfig>(), ConfigError);
}

TEST_CASE("transformer block") {
  CounterRng rng(2, "block");
  attention::AttentionSpec spec;
  spec.heads = 2;
  spec.channels = 8;
  spec.lambdas = {4, 1};
  ParameterStore<double> store;
  auto w = make_block_weights(store, "b", spec, 4, 3);
  helpers::randomize(store, 4, 0.3);
  Tape<double> tape;
  const auto x = oracle::random_matrix(rng, 12, 8);
  auto y = transformer_block(tape.constant(x), w, spec, {3, 4}).value();
  CHECK(y.rows() == 12);
  CHECK(y.cols() == 8);
  CHECK(max_abs_diff(y, x) > 1e-3);

  w.attn.phi->value.fill(0.0);
  w.attn.phi_bias->value.fill(0.0);
  w.fc2->value.fill(0.0);
  w.fc2_bias->value.fill(0.0);
  Tape<double> fresh;  // leaves snapshot parameter values per tape
  CHECK(transformer_block(fresh.constant(x), w, spec, {3, 4}).value() == x);

  const auto res = gradchecks::block(5);
  INFO(res.worst_param);
  CHECK(res.max_rel_error <= 1e-4);
}

TEST_CASE("count_params") {
  ParameterStore<double> linear;
  linear.add("w", Tensor<double>({4, 8}));
  linear.add("b", Tensor<double>({8}));
  CHECK(linear.count_elements() == 40);

  Model<float> micro(variant_config("micro", 10), 0);
  CHECK(micro.count_params() == helpers::expected_param_count(micro.config()));
  CHECK(micro.count_params() == 370394);
  for (const char* v : {"T", "S", "B"}) {
    Model<float> m(variant_config(v), 0);
    CHECK(m.count_params() == helpers::expected_param_count(m.config()));
  }
  auto grid = variant_config("micro", 10);
  grid.aggregation = attention::Aggregation::grid;
  grid.combine = attention::ScaleCombine::sum;
  Model<float> g(grid, 0);
  CHECK(g.count_params() == helpers::expected_param_count(g.config()));
}

TEST_CASE("micro forward") {
  CounterRng rng(3, "forward");
  Model<double> m(variant_config("micro", 10), 7);
  const auto img = helpers::random_image(rng, 32, 3);
  Tensor<double> batch({3, 32, 32, 3});
  for (std::size_t b = 0; b < 3; ++b) std::copy(img.data().begin(), img.data().end(), batch.data().begin() + b * img.size());
  std::vector<attention::LayerMacs> macs;
  const auto logits = m.forward(batch, &macs);
  CHECK(logits.rows() == 3);
  CHECK(logits.cols() == 10);
  CHECK(logits.all_finite());
  for (std::size_t k = 0; k < 10; ++k) {
    CHECK(logits(0, k) == logits(1, k));
    CHECK(logits(0, k) == logits(2, k));
  }
  REQUIRE(macs.size() == 12);
  CHECK(macs[0].layer == "stage1.block0.attn");
  CHECK(macs[0].tokens == 64);
  CHECK(macs[0].kv_tokens == std::vector<std::size_t>{1, 4});
  CHECK(macs[3].tokens == 1);
  CHECK_THROWS_AS(m.forward(Tensor<double>({1, 16, 16, 3})), ShapeError);
}

TEST_CASE("micro model gradient") {
  const auto res = gradchecks::micro_model(1, 4);
  INFO(res.worst_param << " " << res.worst_analytic << " " << res.worst_numeric);
  CHECK(res.entries_checked >= 300);
  CHECK(res.max_rel_error <= 1e-4);
}

TEST_CASE("checkpoint round trip") {
  const auto dir = std::filesystem::temp_directory_path() / "clustr_test_checkpoint";
  std::filesystem::remove_all(dir);
  Model<float> a(variant_config("micro", 10), 1);
  save_checkpoint(a, dir);
  Model<float> b(variant_config("micro", 10), 2);
  load_checkpoint(b, dir);
  for (auto* p : a.params().all()) CHECK(b.params().get(p->name).value == p->value);
  CHECK(nlohmann::json(checkpoint_config(dir)) == nlohmann::json(a.config()));
  Model<float> other(variant_config("micro", 5), 1);
  CHECK_THROWS_AS(load_checkpoint(other, dir), ConfigError);
  std::filesystem::remove_all(dir);
}

TEST_CASE("model properties hold across seeds") {
  for (std::uint64_t seed : {1, 2, 3}) {
    CAPTURE(seed);
    for (const auto& check : props::model_checks()) {
      const auto outcome = check.run(seed);
      INFO(check.name << ": " << outcome.detail);
      CHECK(outcome.ok);
    }
  }
}
