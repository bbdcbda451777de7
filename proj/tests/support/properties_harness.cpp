#include <cmath>
#include <sstream>

#include "clustr/harness/run.hpp"
#include "oracles.hpp"
#include "properties.hpp"

namespace props {

using namespace clustr;
using namespace clustr::harness;

namespace {

Outcome fail(const std::string& why) { return Outcome{false, why}; }

/// Tiny micro-model run: a handful of images, few steps, no output files.
RunConfig tiny_run(std::uint64_t seed, std::size_t images_per_class, std::size_t steps) {
  RunConfig run;
  run.seed = seed;
  run.out_dir.clear();
  run.dataset.synthetic = SyntheticSpec{2, images_per_class, 32, 0.3};
  run.optimizer.steps = steps;
  run.optimizer.batch_size = 2 * images_per_class;
  run.optimizer.lr = 3e-3;
  run.eval_every = steps;
  run.save_checkpoint = false;
  return run;
}

std::string metrics_text(const std::vector<MetricsRecord>& records) {
  std::ostringstream out;
  emit_report(records, ReportFormat::csv, out);
  return out.str();
}

Outcome dataset_is_seeded(std::uint64_t seed) {
  const SyntheticSpec spec{3, 4, 16 + 16 * (seed % 2), 0.3};
  const auto a = gen_synthetic_dataset(seed, spec);
  if (!(a == gen_synthetic_dataset(seed, spec))) return fail("same seed gave different datasets");
  if (a == gen_synthetic_dataset(seed + 1, spec)) return fail("different seeds gave the same dataset");
  if (a.count() != 12) return fail("wrong image count");
  for (std::size_t i = 0; i < a.count(); ++i) {
    if (a.labels[i] != i % 3) return fail("labels are not assigned round-robin");
    if (a.images[i].shape() != Shape{spec.size, spec.size, 3}) return fail("wrong image shape");
  }
  return {};
}

Outcome dataset_is_learnable_but_not_trivial(std::uint64_t seed) {
  const auto data = gen_synthetic_dataset(seed, SyntheticSpec{10, 20, 32, 0.3});
  const double acc = oracle::nearest_centroid_accuracy(data.images, data.labels, data.classes);
  if (!(acc > 0.1 && acc < 1.0)) return fail("nearest-centroid accuracy " + std::to_string(acc));
  return {};
}

Outcome schedule_shape(std::uint64_t seed) {
  CounterRng rng(seed, "prop-schedule");
  OptimizerConfig cfg;
  cfg.steps = 10 + rng() % 200;
  cfg.warmup_steps = rng() % 10;
  cfg.lr = 1e-3 * (1.0 + rng.uniform());
  cfg.min_lr = cfg.lr * 0.1 * rng.uniform();
  double prev = 0.0;
  for (std::size_t s = 0; s < cfg.steps; ++s) {
    const double lr = learning_rate(s, cfg);
    if (lr < cfg.min_lr - 1e-15 || lr > cfg.lr + 1e-15) return fail("learning rate left [min_lr, lr]");
    if (s < cfg.warmup_steps && lr < prev) return fail("warmup is not increasing");
    if (s > cfg.warmup_steps && lr > prev + 1e-15) return fail("cosine phase is not decreasing");
    prev = lr;
  }
  if (std::abs(learning_rate(cfg.steps - 1, cfg) - cfg.min_lr) > 1e-15) return fail("schedule does not end at min_lr");
  return {};
}

Outcome zero_lr_freezes_loss(std::uint64_t seed) {
  auto run = tiny_run(seed, 2, 3);
  run.precision = Precision::f64;
  run.optimizer.lr = 0.0;
  run.optimizer.min_lr = 0.0;
  const auto result = train(run, load_dataset(run));
  for (const auto& r : result.records) {
    if (std::abs(r.loss - result.records.front().loss) > 1e-10) return fail("loss moved with a zero learning rate");
  }
  return {};
}

Outcome training_is_deterministic(std::uint64_t seed) {
  const auto run = tiny_run(seed, 2, 3);
  const auto data = load_dataset(run);
  const auto a = train(run, data);
  const auto b = train(run, data);
  std::ostringstream ja, jb;
  emit_report(a.records, ReportFormat::json, ja);
  emit_report(b.records, ReportFormat::json, jb);
  if (ja.str() != jb.str() || metrics_text(a.records) != metrics_text(b.records)) {
    return fail("equal runs wrote different metrics");
  }
  return {};
}

Outcome nan_input_aborts(std::uint64_t seed) {
  const auto run = tiny_run(seed, 2, 2);
  auto data = load_dataset(run);
  data.images[seed % data.count()][0] = std::nan("");
  try {
    train(run, data);
  } catch (const NumericError&) {
    return {};
  }
  return fail("training continued past a non-finite loss");
}

std::vector<MetricsRecord> random_records(CounterRng& rng, std::size_t n) {
  std::vector<MetricsRecord> out;
  for (std::size_t i = 0; i < n; ++i) {
    MetricsRecord r;
    r.step = i + 1;
    r.loss = rng.uniform() * std::pow(10.0, static_cast<double>(rng() % 7) - 3.0);
    r.batch_accuracy = rng.uniform();
    if (rng() % 2) r.train_accuracy = rng.uniform();
    r.learning_rate = rng.uniform() * 1e-3;
    const std::size_t layers = rng() % 4;
    for (std::size_t l = 0; l < layers; ++l) r.layer_macs.emplace_back("stage" + std::to_string(l) + ".attn", rng());
    out.push_back(std::move(r));
  }
  return out;
}

Outcome reports_are_lossless(std::uint64_t seed) {
  CounterRng rng(seed, "prop-report");
  const auto records = random_records(rng, rng() % 12);
  std::ostringstream js, csv;
  emit_report(records, ReportFormat::json, js);
  emit_report(records, ReportFormat::csv, csv);
  if (metrics_from_json(nlohmann::json::parse(js.str())) != records) return fail("JSON lost information");
  std::istringstream in(csv.str());
  if (read_metrics_csv(in) != records) return fail("CSV lost information");
  std::ostringstream again;
  emit_report(metrics_from_json(nlohmann::json::parse(js.str())), ReportFormat::json, again);
  if (again.str() != js.str()) return fail("JSON round trip is not byte-identical");
  std::size_t lines = 0;
  for (char c : csv.str()) lines += c == '\n';
  if (lines != records.size() + 1) return fail("CSV line count is not records + header");
  return {};
}

Outcome bench_counts_agree(std::uint64_t seed) {
  const std::size_t res = 32 * (1 + seed % 2);
  for (const auto& row : bench_complexity(model::variant_config("micro", 10), {res}, seed)) {
    if (row.measured != row.analytic) return fail("measured MACs differ at " + row.layer);
  }
  return {};
}

Outcome ablation_arms_differ_in_one_component(std::uint64_t seed) {
  const auto base = model::variant_config("micro", 10);
  const auto [multi, single] = ablation_arms(base, AblationAxis::single_vs_multi_scale);
  if (!(multi.kv_tokens > single.kv_tokens && multi.attention_macs > single.attention_macs)) {
    return fail("multi-scale arm does not attend to more key/value tokens");
  }
  const auto [cluster, grid] = ablation_arms(base, AblationAxis::grid_vs_cluster);
  if (cluster.attention_macs != grid.attention_macs || cluster.kv_tokens != grid.kv_tokens) {
    return fail("grid and cluster arms differ in attention cost");
  }
  // identity aggregation on every stage makes both arms the same network
  auto identity = base;
  for (auto& s : identity.stages) s.lambdas = {1.0};
  auto run = tiny_run(seed, 2, 2);
  run.model = identity;
  const auto report = ablate(run, load_dataset(run));
  if (report.first.params != report.second.params) return fail("identity arms differ in parameter count");
  if (metrics_text(report.first.result.records) != metrics_text(report.second.result.records)) {
    return fail("identity arms trained differently");
  }
  return {};
}

}  // namespace

std::vector<Check> harness_checks() {
  return {{"harness", "dataset_is_seeded", dataset_is_seeded},
          {"harness", "dataset_is_learnable_but_not_trivial", dataset_is_learnable_but_not_trivial},
          {"harness", "schedule_shape", schedule_shape},
          {"harness", "zero_lr_freezes_loss", zero_lr_freezes_loss},
          {"harness", "training_is_deterministic", training_is_deterministic},
          {"harness", "nan_input_aborts", nan_input_aborts},
          {"harness", "reports_are_lossless", reports_are_lossless},
          {"harness", "bench_counts_agree", bench_counts_agree},
          {"harness", "ablation_arms_differ_in_one_component", ablation_arms_differ_in_one_component}};
}

}  // namespace props
