#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "clustr/clustering.hpp"
#include "clustr/gradcheck.hpp"
#include "clustr/harness/dataset.hpp"
#include "clustr/harness/optim.hpp"
#include "clustr/harness/report.hpp"
#include "clustr/model.hpp"

namespace clustr::harness {

enum class Task { train, cluster, bench, ablate, gradcheck };
enum class Precision { f32, f64 };
enum class AblationAxis { grid_vs_cluster, single_vs_multi_scale };

Task parse_task(const std::string& name);
Precision parse_precision(const std::string& name);
AblationAxis parse_axis(const std::string& name);
std::string axis_name(AblationAxis axis);

struct DatasetConfig {
  std::string kind = "synthetic";  // synthetic | folder
  SyntheticSpec synthetic;
  std::filesystem::path folder;
};

struct ClusterTaskConfig {
  std::filesystem::path input;  // CSV matrix of tokens; random tokens when empty
  std::size_t tokens = 64;
  std::size_t channels = 8;
  std::optional<double> lambda;
  std::optional<std::size_t> clusters;
  std::optional<std::size_t> neighbors;
};

struct RunConfig {
  Task task = Task::train;
  model::ModelConfig model = model::variant_config("micro", 10);
  DatasetConfig dataset;
  OptimizerConfig optimizer;
  std::uint64_t seed = 0;
  std::filesystem::path out_dir = "runs/default";
  Precision precision = Precision::f32;
  std::size_t eval_every = 50;
  std::optional<double> target_accuracy;  // stop at the first evaluation reaching it
  bool save_checkpoint = true;
  std::vector<std::size_t> bench_resolutions{32, 64};
  AblationAxis ablation_axis = AblationAxis::grid_vs_cluster;
  ClusterTaskConfig cluster;
  std::size_t gradcheck_entries = 4;  // per parameter; 0 checks every entry
  double gradcheck_tolerance = 1e-4;
};

/// Parses a run config document; relative paths resolve against `base_dir`. Throws ConfigError.
RunConfig parse_run_config(const nlohmann::json& j, const std::filesystem::path& base_dir = {});
RunConfig load_run_config(const std::filesystem::path& path);

/// Synthetic data from the run seed, or the image folder.
Dataset load_dataset(const RunConfig& run);

struct TrainResult {
  std::vector<MetricsRecord> records;
  double final_accuracy = 0.0;
  double final_loss = 0.0;
  std::size_t steps_run = 0;
  bool reached_target = false;
  std::size_t params = 0;
  double seconds = 0.0;
};

/// Trains run.model on `data`. Writes metrics.csv, metrics.json, timing.csv, summary.json and the checkpoint
/// directory under run.out_dir when it is non-empty. On a non-finite loss writes nan_dump/ and throws NumericError.
template <typename T>
TrainResult train(const RunConfig& run, const Dataset& data);

/// Dispatches on run.precision.
TrainResult train(const RunConfig& run, const Dataset& data);

struct BenchRow {
  std::size_t resolution = 0;
  std::string layer;
  std::size_t tokens = 0;
  std::vector<std::size_t> kv_tokens;
  std::uint64_t analytic = 0;
  std::uint64_t measured = 0;
  std::uint64_t dense = 0;
};

/// Per attention layer of `config` at each resolution: analytic and instrumented score/value multiplies plus
/// the dense counterfactual. Resolutions must be multiples of 32.
std::vector<BenchRow> bench_complexity(const model::ModelConfig& config, const std::vector<std::size_t>& resolutions,
                                       std::uint64_t seed);
void write_bench(const std::vector<BenchRow>& rows, const std::filesystem::path& out_dir);

struct AblationArm {
  std::string name;
  model::ModelConfig model;
  std::size_t params = 0;
  std::uint64_t attention_macs = 0;  // clustered score/value multiplies per image
  std::size_t kv_tokens = 0;         // summed over layers and scales
  TrainResult result;
};

struct AblationReport {
  AblationAxis axis;
  std::uint64_t seed = 0;
  AblationArm first;
  AblationArm second;
};

/// The two model configs compared along `axis`: (cluster, grid) or (multi_scale, single_scale).
std::pair<AblationArm, AblationArm> ablation_arms(const model::ModelConfig& base, AblationAxis axis);

/// Trains both arms with the run's seed, data and schedule; writes per-arm metrics, ablation_<axis>.csv (paired
/// per-step losses) and ablation_<axis>_summary.csv.
AblationReport ablate(const RunConfig& run, const Dataset& data);

/// Finite-difference check of the run's model in double precision on one synthetic image.
GradcheckResult gradcheck_model(const model::ModelConfig& config, std::uint64_t seed, std::size_t entries);

/// Density-peaks clustering of the configured tokens; writes cluster.json.
clustering::ClusterResult run_cluster(const RunConfig& run);

}  // namespace clustr::harness
