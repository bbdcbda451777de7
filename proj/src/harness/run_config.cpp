#include <algorithm>
#include <fstream>

#include "clustr/harness/run.hpp"

namespace clustr::harness {

using nlohmann::json;

namespace {

void check_keys(const json& j, std::initializer_list<const char*> allowed, const std::string& where) {
  if (!j.is_object()) throw ConfigError(where + ": expected a JSON object");
  for (const auto& item : j.items()) {
    if (std::none_of(allowed.begin(), allowed.end(), [&](const char* k) { return item.key() == k; })) {
      throw ConfigError(where + ": unknown key '" + item.key() + "'");
    }
  }
}

std::filesystem::path resolve(const std::filesystem::path& p, const std::filesystem::path& base) {
  return p.is_absolute() || base.empty() ? p : base / p;
}

template <typename V>
void read(const json& j, const char* key, V& into) {
  if (j.contains(key)) into = j.at(key).get<V>();
}

template <typename V>
void read_optional(const json& j, const char* key, std::optional<V>& into) {
  if (j.contains(key) && !j.at(key).is_null()) into = j.at(key).get<V>();
}

}  // namespace

Task parse_task(const std::string& name) {
  if (name == "train") return Task::train;
  if (name == "cluster") return Task::cluster;
  if (name == "bench") return Task::bench;
  if (name == "ablate") return Task::ablate;
  if (name == "gradcheck") return Task::gradcheck;
  throw ConfigError("unknown task '" + name + "'");
}

Precision parse_precision(const std::string& name) {
  if (name == "f32") return Precision::f32;
  if (name == "f64") return Precision::f64;
  throw ConfigError("precision must be f32 or f64, got '" + name + "'");
}

AblationAxis parse_axis(const std::string& name) {
  if (name == "grid_vs_cluster") return AblationAxis::grid_vs_cluster;
  if (name == "single_vs_multi_scale") return AblationAxis::single_vs_multi_scale;
  throw ConfigError("ablation axis must be grid_vs_cluster or single_vs_multi_scale, got '" + name + "'");
}

std::string axis_name(AblationAxis axis) {
  return axis == AblationAxis::grid_vs_cluster ? "grid_vs_cluster" : "single_vs_multi_scale";
}

RunConfig parse_run_config(const json& j, const std::filesystem::path& base_dir) {
  RunConfig run;
  try {
    check_keys(j,
               {"task", "model", "dataset", "optimizer", "seed", "out", "precision", "eval_every", "target_accuracy",
                "checkpoint", "bench", "ablate", "cluster", "gradcheck"},
               "run config");
    if (j.contains("task")) run.task = parse_task(j.at("task").get<std::string>());
    if (j.contains("model")) {
      const auto& m = j.at("model");
      run.model = m.is_string() ? model::load_config(resolve(m.get<std::string>(), base_dir)) : m.get<model::ModelConfig>();
    }
    read(j, "seed", run.seed);
    if (j.contains("out")) run.out_dir = j.at("out").get<std::string>();
    if (j.contains("precision")) run.precision = parse_precision(j.at("precision").get<std::string>());
    read(j, "eval_every", run.eval_every);
    read_optional(j, "target_accuracy", run.target_accuracy);
    read(j, "checkpoint", run.save_checkpoint);

    run.dataset.synthetic.size = run.model.image_size;
    run.dataset.synthetic.classes = std::min<std::size_t>(run.dataset.synthetic.classes, run.model.num_classes);
    if (j.contains("dataset")) {
      const auto& d = j.at("dataset");
      check_keys(d, {"kind", "classes", "n_per_class", "size", "noise", "path"}, "dataset");
      read(d, "kind", run.dataset.kind);
      read(d, "classes", run.dataset.synthetic.classes);
      read(d, "n_per_class", run.dataset.synthetic.n_per_class);
      read(d, "size", run.dataset.synthetic.size);
      read(d, "noise", run.dataset.synthetic.noise);
      if (d.contains("path")) run.dataset.folder = resolve(d.at("path").get<std::string>(), base_dir);
    }
    if (j.contains("optimizer")) {
      const auto& o = j.at("optimizer");
      check_keys(o, {"lr", "min_lr", "weight_decay", "beta1", "beta2", "eps", "steps", "warmup_steps", "batch_size"},
                 "optimizer");
      auto& opt = run.optimizer;
      read(o, "lr", opt.lr);
      read(o, "min_lr", opt.min_lr);
      read(o, "weight_decay", opt.weight_decay);
      read(o, "beta1", opt.beta1);
      read(o, "beta2", opt.beta2);
      read(o, "eps", opt.eps);
      read(o, "steps", opt.steps);
      read(o, "warmup_steps", opt.warmup_steps);
      read(o, "batch_size", opt.batch_size);
    }
    if (j.contains("bench")) {
      check_keys(j.at("bench"), {"resolutions"}, "bench");
      read(j.at("bench"), "resolutions", run.bench_resolutions);
    }
    if (j.contains("ablate")) {
      check_keys(j.at("ablate"), {"axis"}, "ablate");
      if (j.at("ablate").contains("axis")) run.ablation_axis = parse_axis(j.at("ablate").at("axis").get<std::string>());
    }
    if (j.contains("cluster")) {
      const auto& c = j.at("cluster");
      check_keys(c, {"input", "tokens", "channels", "lambda", "clusters", "neighbors"}, "cluster");
      if (c.contains("input")) run.cluster.input = resolve(c.at("input").get<std::string>(), base_dir);
      read(c, "tokens", run.cluster.tokens);
      read(c, "channels", run.cluster.channels);
      read_optional(c, "lambda", run.cluster.lambda);
      read_optional(c, "clusters", run.cluster.clusters);
      read_optional(c, "neighbors", run.cluster.neighbors);
    }
    if (j.contains("gradcheck")) {
      const auto& g = j.at("gradcheck");
      check_keys(g, {"entries_per_param", "tolerance"}, "gradcheck");
      read(g, "entries_per_param", run.gradcheck_entries);
      read(g, "tolerance", run.gradcheck_tolerance);
    }
  } catch (const json::exception& e) {
    throw ConfigError(std::string("run config: ") + e.what());
  }

  const auto& opt = run.optimizer;
  if (!(opt.lr >= 0.0) || !(opt.min_lr >= 0.0) || !(opt.weight_decay >= 0.0)) {
    throw ConfigError("learning rates and weight decay must be non-negative");
  }
  if (!(opt.beta1 >= 0.0 && opt.beta1 < 1.0 && opt.beta2 >= 0.0 && opt.beta2 < 1.0) || !(opt.eps > 0.0)) {
    throw ConfigError("optimizer betas must lie in [0, 1) and eps must be positive");
  }
  if (opt.steps == 0 || opt.batch_size == 0) throw ConfigError("steps and batch_size must be positive");
  if (run.eval_every == 0) throw ConfigError("eval_every must be positive");
  if (run.dataset.kind != "synthetic" && run.dataset.kind != "folder") {
    throw ConfigError("dataset kind must be synthetic or folder");
  }
  if (run.dataset.kind == "folder" && run.dataset.folder.empty()) throw ConfigError("folder dataset needs a path");
  if (run.dataset.kind == "synthetic") {
    if (run.dataset.synthetic.size != run.model.image_size) {
      throw ConfigError("dataset size " + std::to_string(run.dataset.synthetic.size) + " differs from model input " +
                        std::to_string(run.model.image_size));
    }
    if (run.dataset.synthetic.classes > run.model.num_classes) {
      throw ConfigError("dataset has more classes than the model's classifier");
    }
    if (run.model.in_channels != 3) throw ConfigError("synthetic images have 3 channels");
  }
  if (run.target_accuracy && !(*run.target_accuracy > 0.0 && *run.target_accuracy <= 1.0)) {
    throw ConfigError("target_accuracy must lie in (0, 1]");
  }
  for (std::size_t r : run.bench_resolutions) {
    if (r == 0 || r % 32 != 0) throw ConfigError("bench resolutions must be positive multiples of 32");
  }
  if (!(run.gradcheck_tolerance > 0.0)) throw ConfigError("gradcheck tolerance must be positive");
  return run;
}

RunConfig load_run_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open run config " + path.string());
  json j;
  try {
    in >> j;
  } catch (const json::exception& e) {
    throw ConfigError(path.string() + ": " + e.what());
  }
  return parse_run_config(j, path.parent_path());
}

Dataset load_dataset(const RunConfig& run) {
  if (run.dataset.kind == "folder") {
    auto data = load_image_folder(run.dataset.folder, run.model.image_size);
    if (data.classes > run.model.num_classes) throw ConfigError("image folder has more classes than the model");
    return data;
  }
  return gen_synthetic_dataset(run.seed, run.dataset.synthetic);
}

}  // namespace clustr::harness
