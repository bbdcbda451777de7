#include <cmath>
#include <fstream>

#include "clustr/harness/run.hpp"
#include "clustr/init.hpp"
#include "clustr/rng.hpp"
#include "clustr/serialize.hpp"

namespace clustr::harness {

using nlohmann::json;

namespace {

Tensor<double> uniform_tensor(Shape shape, std::uint64_t seed, std::string_view stream) {
  CounterRng rng(seed, stream);
  Tensor<double> out(std::move(shape));
  for (auto& v : out.storage()) v = 2.0 * rng.uniform() - 1.0;
  return out;
}

std::string join_counts(const std::vector<std::size_t>& v) {
  std::string out;
  for (std::size_t i = 0; i < v.size(); ++i) out += (i ? ";" : "") + std::to_string(v[i]);
  return out;
}

struct ArmCost {
  std::uint64_t macs = 0;
  std::size_t kv_tokens = 0;
};

ArmCost arm_cost(const model::ModelConfig& cfg) {
  ArmCost cost;
  const auto grids = model::stage_grids(cfg);
  for (std::size_t i = 0; i < cfg.stages.size(); ++i) {
    const auto m = attention::attention_macs(grids[i].tokens(), cfg.attention_spec(i));
    cost.macs += cfg.stages[i].layers * m.clustered;
    for (std::size_t kv : m.kv_tokens) cost.kv_tokens += cfg.stages[i].layers * kv;
  }
  return cost;
}

}  // namespace

std::vector<BenchRow> bench_complexity(const model::ModelConfig& config, const std::vector<std::size_t>& resolutions,
                                       std::uint64_t seed) {
  std::vector<BenchRow> rows;
  for (std::size_t res : resolutions) {
    if (res == 0 || res % 32 != 0) throw ConfigError("bench resolution " + std::to_string(res) + " is not a multiple of 32");
    auto cfg = config;
    cfg.image_size = res;
    model::validate(cfg);
    model::Model<float> net(cfg, seed);
    const auto image = uniform_tensor({res, res, cfg.in_channels}, seed, "bench/image").cast<float>();
    std::vector<attention::LayerMacs> log;
    net.forward(image.reshaped({1, res, res, cfg.in_channels}), &log);
    std::size_t entry = 0;
    for (std::size_t i = 0; i < cfg.stages.size(); ++i) {
      const auto spec = cfg.attention_spec(i);
      for (std::size_t b = 0; b < cfg.stages[i].layers; ++b) {
        const auto& measured = log.at(entry++);
        const auto analytic = attention::attention_macs(measured.tokens, spec);
        rows.push_back({res, measured.layer, measured.tokens, measured.kv_tokens, analytic.clustered, measured.measured,
                        analytic.dense});
      }
    }
  }
  return rows;
}

void write_bench(const std::vector<BenchRow>& rows, const std::filesystem::path& out_dir) {
  std::filesystem::create_directories(out_dir);
  json list = json::array();
  std::ofstream csv(out_dir / "bench.csv");
  csv << "resolution,layer,tokens,kv_tokens,analytic_macs,measured_macs,dense_macs,clustered_over_dense\n";
  for (const auto& r : rows) {
    const double ratio = static_cast<double>(r.analytic) / static_cast<double>(r.dense);
    list.push_back({{"resolution", r.resolution},
                    {"layer", r.layer},
                    {"tokens", r.tokens},
                    {"kv_tokens", r.kv_tokens},
                    {"analytic_macs", r.analytic},
                    {"measured_macs", r.measured},
                    {"dense_macs", r.dense},
                    {"clustered_over_dense", ratio}});
    csv << r.resolution << ',' << r.layer << ',' << r.tokens << ',' << join_counts(r.kv_tokens) << ',' << r.analytic
        << ',' << r.measured << ',' << r.dense << ',' << format_real(ratio) << '\n';
  }
  std::ofstream(out_dir / "bench.json") << json{{"schema", "clustr-bench"}, {"version", 1}, {"rows", list}}.dump(2)
                                        << '\n';
}

std::pair<AblationArm, AblationArm> ablation_arms(const model::ModelConfig& base, AblationAxis axis) {
  AblationArm a, b;
  a.model = base;
  b.model = base;
  if (axis == AblationAxis::grid_vs_cluster) {
    a.name = "cluster";
    b.name = "grid";
    a.model.aggregation = attention::Aggregation::cluster;
    b.model.aggregation = attention::Aggregation::grid;
  } else {
    a.name = "multi_scale";
    b.name = "single_scale";
    for (auto& s : b.model.stages) s.lambdas = {s.lambdas.front()};
  }
  for (auto* arm : {&a, &b}) {
    arm->model.variant = "custom";
    model::validate(arm->model);
    arm->params = model::Model<float>(arm->model, 0).count_params();
    const auto cost = arm_cost(arm->model);
    arm->attention_macs = cost.macs;
    arm->kv_tokens = cost.kv_tokens;
  }
  return {std::move(a), std::move(b)};
}

AblationReport ablate(const RunConfig& run, const Dataset& data) {
  auto [first, second] = ablation_arms(run.model, run.ablation_axis);
  const std::string axis = axis_name(run.ablation_axis);
  for (auto* arm : {&first, &second}) {
    RunConfig r = run;
    r.model = arm->model;
    r.target_accuracy.reset();  // both arms run the full schedule
    r.save_checkpoint = false;
    if (!run.out_dir.empty()) r.out_dir = run.out_dir / axis / arm->name;
    arm->result = train(r, data);
  }
  AblationReport report{run.ablation_axis, run.seed, std::move(first), std::move(second)};
  if (run.out_dir.empty()) return report;

  const auto& a = report.first;
  const auto& b = report.second;
  std::ofstream paired(run.out_dir / ("ablation_" + axis + ".csv"));
  paired << "step," << a.name << "_loss," << b.name << "_loss," << a.name << "_batch_accuracy," << b.name
         << "_batch_accuracy," << a.name << "_train_accuracy," << b.name << "_train_accuracy\n";
  const auto& ra = a.result.records;
  const auto& rb = b.result.records;
  for (std::size_t i = 0; i < std::min(ra.size(), rb.size()); ++i) {
    auto acc = [](const MetricsRecord& r) { return r.train_accuracy ? format_real(*r.train_accuracy) : ""; };
    paired << ra[i].step << ',' << format_real(ra[i].loss) << ',' << format_real(rb[i].loss) << ','
           << format_real(ra[i].batch_accuracy) << ',' << format_real(rb[i].batch_accuracy) << ',' << acc(ra[i]) << ','
           << acc(rb[i]) << '\n';
  }
  std::ofstream summary(run.out_dir / ("ablation_" + axis + "_summary.csv"));
  summary << "arm,params,attention_macs,kv_tokens,steps,seed,final_loss,final_accuracy\n";
  for (const auto* arm : {&a, &b}) {
    summary << arm->name << ',' << arm->params << ',' << arm->attention_macs << ',' << arm->kv_tokens << ','
            << arm->result.steps_run << ',' << run.seed << ',' << format_real(arm->result.final_loss) << ','
            << format_real(arm->result.final_accuracy) << '\n';
  }
  return report;
}

GradcheckResult gradcheck_model(const model::ModelConfig& config, std::uint64_t seed, std::size_t entries) {
  model::Model<double> net(config, seed);
  // Unit-scale weights and spread-out constants keep gradients well above finite-difference round-off.
  for (auto* p : net.params().all()) {
    const bool matrix = p->value.rank() == 2 && p->value.rows() > 1;
    if (matrix) {
      p->value = normal_tensor<double>(p->value.shape(), 1.0 / std::sqrt(static_cast<double>(p->value.rows())),
                                       seed + 2, p->name);
    } else {
      const auto noise = normal_tensor<double>(p->value.shape(), 0.1, seed + 1, p->name);
      for (std::size_t i = 0; i < noise.size(); ++i) p->value[i] += noise[i];
    }
  }
  const auto image = uniform_tensor({config.image_size, config.image_size, config.in_channels}, seed, "gradcheck/image");
  const std::vector<std::size_t> label{seed % config.num_classes};
  attention::ClusterCache cache;
  bool first = true;
  auto loss = [&](Tape<double>& tape) {
    cache.start(first ? attention::ClusterCache::Mode::record : attention::ClusterCache::Mode::replay);
    first = false;
    attention::ForwardContext ctx;
    ctx.cache = &cache;
    return cross_entropy(net.forward_image(tape, image, ctx), label);
  };
  auto params = net.params().all();
  GradcheckOptions opts;
  opts.max_entries_per_param = entries;
  return finite_diff_gradcheck(loss, params, opts);
}

clustering::ClusterResult run_cluster(const RunConfig& run) {
  const auto& c = run.cluster;
  Tensor<double> x;
  if (c.input.empty()) {
    x = uniform_tensor({c.tokens, c.channels}, run.seed, "cluster/tokens");
  } else {
    x = c.input.extension() == ".ctr1" ? load_ctr1(c.input) : load_csv_matrix(c.input);
  }
  if (x.rank() != 2) throw ConfigError("cluster input must be a token matrix");
  if (x.rows() < 2) throw ConfigError("clustering needs at least two tokens");
  if (c.lambda && c.clusters) throw ConfigError("set either lambda or clusters, not both");
  const auto params = c.clusters ? clustering::ClusterParams::with_clusters(*c.clusters, c.neighbors)
                                 : clustering::ClusterParams::with_ratio(c.lambda.value_or(4.0), c.neighbors);
  clustering::ClusterResult result;
  try {
    result = params.is_identity(x.rows()) ? clustering::identity_clusters(x.rows()) : clustering::density_peaks(x, params);
  } catch (const ParameterError& e) {
    throw ConfigError(std::string("cluster: ") + e.what());
  }
  if (!run.out_dir.empty()) {
    std::filesystem::create_directories(run.out_dir);
    const json doc{{"schema", "clustr-cluster"},
                   {"version", 1},
                   {"tokens", x.rows()},
                   {"channels", x.cols()},
                   {"neighbors", params.is_identity(x.rows()) ? 0 : params.resolve_neighbors(x.rows())},
                   {"num_clusters", result.num_clusters()},
                   {"rho", result.rho},
                   {"delta", result.delta},
                   {"gamma", result.gamma},
                   {"peaks", result.peaks},
                   {"labels", result.labels}};
    std::ofstream(run.out_dir / "cluster.json") << doc.dump(2) << '\n';
  }
  return result;
}

}  // namespace clustr::harness
