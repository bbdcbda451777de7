#include <fstream>

#include "clustr/model.hpp"
#include "clustr/serialize.hpp"

namespace clustr::model {

using nlohmann::json;

namespace {

constexpr const char* kManifest = "manifest.json";

json read_manifest(const std::filesystem::path& dir) {
  std::ifstream in(dir / kManifest);
  if (!in) throw FormatError("no checkpoint manifest in " + dir.string());
  json j;
  try {
    in >> j;
  } catch (const json::exception& e) {
    throw FormatError((dir / kManifest).string() + ": " + e.what());
  }
  if (j.value("format", std::string()) != "clustr-checkpoint" || j.value("version", 0) != 1) {
    throw FormatError((dir / kManifest).string() + ": not a version-1 checkpoint manifest");
  }
  return j;
}

}  // namespace

template <typename T>
void save_checkpoint(const Model<T>& model, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  json tensors = json::object();
  for (const auto* p : model.params().all()) {
    const std::string file = p->name + ".ctr1";
    save_ctr1(dir / file, p->value.template cast<double>());
    tensors[p->name] = file;
  }
  json manifest{{"format", "clustr-checkpoint"}, {"version", 1}, {"config", model.config()}, {"tensors", tensors}};
  std::ofstream out(dir / kManifest);
  out << manifest.dump(2) << '\n';
  if (!out) throw FormatError("failed to write " + (dir / kManifest).string());
}

ModelConfig checkpoint_config(const std::filesystem::path& dir) { return read_manifest(dir).at("config").get<ModelConfig>(); }

template <typename T>
void load_checkpoint(Model<T>& model, const std::filesystem::path& dir) {
  const auto manifest = read_manifest(dir);
  if (manifest.at("config") != json(model.config())) {
    throw ConfigError("checkpoint " + dir.string() + " was written for a different model config");
  }
  const auto& tensors = manifest.at("tensors");
  if (tensors.size() != model.params().size()) throw FormatError("checkpoint parameter count mismatch");
  for (auto* p : model.params().all()) {
    if (!tensors.contains(p->name)) throw FormatError("checkpoint lacks parameter " + p->name);
    auto value = load_ctr1(dir / tensors.at(p->name).template get<std::string>());
    if (value.shape() != p->value.shape()) {
      throw FormatError("checkpoint tensor " + p->name + " has shape " + shape_string(value.shape()) + ", expected " +
                        shape_string(p->value.shape()));
    }
    p->value = value.template cast<T>();
  }
}

template void save_checkpoint<float>(const Model<float>&, const std::filesystem::path&);
template void save_checkpoint<double>(const Model<double>&, const std::filesystem::path&);
template void load_checkpoint<float>(Model<float>&, const std::filesystem::path&);
template void load_checkpoint<double>(Model<double>&, const std::filesystem::path&);

}  // namespace clustr::model
