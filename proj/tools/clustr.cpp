#include <CLI11.hpp>
#include <fstream>
#include <iostream>
#include <json.hpp>

#include "clustr/harness/run.hpp"
#include "clustr/serialize.hpp"

namespace {

using namespace clustr;
using namespace clustr::harness;

constexpr int exit_config = 2;
constexpr int exit_numeric = 3;

int run_task(const RunConfig& run) {
  switch (run.task) {
    case Task::train: {
      const auto result = train(run, load_dataset(run));
      std::cout << "steps " << result.steps_run << "  loss " << result.final_loss << "  train accuracy "
                << result.final_accuracy << "  (" << result.seconds << " s)\n";
      return 0;
    }
    case Task::cluster: {
      const auto result = run_cluster(run);
      std::cout << result.labels.size() << " tokens in " << result.num_clusters() << " clusters\n";
      return 0;
    }
    case Task::bench: {
      const auto rows = bench_complexity(run.model, run.bench_resolutions, run.seed);
      write_bench(rows, run.out_dir);
      for (const auto& r : rows) {
        std::cout << r.resolution << "  " << r.layer << "  N=" << r.tokens << "  clustered " << r.analytic
                  << "  measured " << r.measured << "  dense " << r.dense << '\n';
        if (r.analytic != r.measured) throw NumericError("measured MACs differ from the analytic count at " + r.layer);
      }
      return 0;
    }
    case Task::ablate: {
      const auto report = ablate(run, load_dataset(run));
      for (const auto* arm : {&report.first, &report.second}) {
        std::cout << arm->name << "  params " << arm->params << "  attention MACs " << arm->attention_macs
                  << "  kv tokens " << arm->kv_tokens << "  accuracy " << arm->result.final_accuracy << '\n';
      }
      return 0;
    }
    case Task::gradcheck: {
      const auto g = gradcheck_model(run.model, run.seed, run.gradcheck_entries);
      std::cout << "checked " << g.entries_checked << " entries, max relative error " << g.max_rel_error << " at "
                << g.worst_param << '\n';
      if (!run.out_dir.empty()) {
        std::filesystem::create_directories(run.out_dir);
        std::ofstream(run.out_dir / "gradcheck.json")
            << nlohmann::json{{"entries_checked", g.entries_checked},
                              {"max_rel_error", g.max_rel_error},
                              {"worst_param", g.worst_param},
                              {"tolerance", run.gradcheck_tolerance}}
                   .dump(2)
            << '\n';
      }
      if (!(g.max_rel_error <= run.gradcheck_tolerance)) {
        std::cerr << "gradcheck failed: tolerance " << run.gradcheck_tolerance << '\n';
        return exit_numeric;
      }
      return 0;
    }
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"clustr: clustered vision transformer harness"};
  app.require_subcommand(1);
  std::string config_path, out_dir, precision, input;
  std::optional<std::uint64_t> seed;
  for (const char* name : {"train", "cluster", "bench", "ablate", "gradcheck"}) {
    auto* sub = app.add_subcommand(name);
    sub->add_option("--config", config_path, "run config JSON");
    sub->add_option("--out", out_dir, "output directory");
    sub->add_option("--seed", seed, "overrides the config seed");
    sub->add_option("--precision", precision, "f32 or f64");
    if (std::string(name) == "cluster") sub->add_option("--input", input, "token matrix (.csv or .ctr1)");
  }
  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : exit_config;
  }

  try {
    RunConfig run = config_path.empty() ? parse_run_config(nlohmann::json::object()) : load_run_config(config_path);
    run.task = parse_task(app.get_subcommands().front()->get_name());
    if (!out_dir.empty()) run.out_dir = out_dir;
    if (seed) run.seed = *seed;
    if (!precision.empty()) run.precision = parse_precision(precision);
    if (!input.empty()) run.cluster.input = input;
    return run_task(run);
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return exit_config;
  } catch (const FormatError& e) {
    std::cerr << "format error: " << e.what() << '\n';
    return exit_config;
  } catch (const ParameterError& e) {
    std::cerr << "invalid parameter: " << e.what() << '\n';
    return exit_config;
  } catch (const NumericError& e) {
    std::cerr << "numeric failure: " << e.what() << '\n';
    return exit_numeric;
  }
}
