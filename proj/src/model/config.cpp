#include <algorithm>
#include <cmath>
#include <fstream>
#include <set>

#include "clustr/model.hpp"
#include "clustr/ops.hpp"

namespace clustr::model {

using nlohmann::json;

namespace {

struct VariantRow {
  std::vector<std::size_t> layers;
  std::vector<std::size_t> channels;
  std::vector<std::size_t> heads;
  std::size_t image_size;
};

std::optional<VariantRow> variant_row(const std::string& name) {
  if (name == "T" || name == "tiny") return VariantRow{{1, 2, 6, 1}, {64, 128, 256, 512}, {1, 2, 4, 8}, 224};
  if (name == "S" || name == "small") return VariantRow{{3, 5, 13, 2}, {64, 128, 256, 512}, {1, 2, 4, 8}, 224};
  if (name == "B" || name == "base") return VariantRow{{3, 5, 18, 3}, {64, 128, 320, 512}, {1, 2, 5, 8}, 224};
  if (name == "micro") return VariantRow{{1, 1, 1, 1}, {16, 32, 64, 128}, {1, 1, 2, 4}, 32};
  return std::nullopt;
}

std::string canonical_variant(const std::string& name) {
  if (name == "tiny") return "T";
  if (name == "small") return "S";
  if (name == "base") return "B";
  return name;
}

PatchEmbedConfig default_patch_embed(std::size_t stage) {
  return stage == 0 ? PatchEmbedConfig{7, 4, 3, 0, 0} : PatchEmbedConfig{3, 2, 1, 0, 0};
}

std::string lambdas_string(const std::vector<double>& lambdas) {
  std::string out = "{";
  for (std::size_t i = 0; i < lambdas.size(); ++i) {
    if (i != 0) out += ",";
    const double l = lambdas[i];
    out += l == std::floor(l) ? std::to_string(static_cast<long long>(l)) : std::to_string(l);
  }
  return out + "}";
}

std::string aggregation_name(attention::Aggregation a) { return a == attention::Aggregation::grid ? "grid" : "cluster"; }
std::string combine_name(attention::ScaleCombine c) { return c == attention::ScaleCombine::sum ? "sum" : "concat"; }

void check_keys(const json& j, std::initializer_list<const char*> allowed, const std::string& where) {
  if (!j.is_object()) throw ConfigError(where + ": expected a JSON object");
  for (const auto& item : j.items()) {
    if (std::none_of(allowed.begin(), allowed.end(), [&](const char* k) { return item.key() == k; })) {
      throw ConfigError(where + ": unknown key '" + item.key() + "'");
    }
  }
}

}  // namespace

attention::AttentionSpec ModelConfig::attention_spec(std::size_t stage) const {
  const auto& s = stages.at(stage);
  attention::AttentionSpec spec;
  spec.heads = s.heads;
  spec.channels = s.channels;
  spec.lambdas = s.lambdas;
  spec.neighbors = neighbors;
  spec.aggregation = aggregation;
  spec.combine = combine;
  return spec;
}

std::vector<std::vector<double>> default_lambda_schedule() { return {{64, 16}, {16, 4}, {4, 1}, {1}}; }

ModelConfig variant_config(const std::string& name, std::size_t num_classes, std::size_t image_size) {
  const auto row = variant_row(name);
  if (!row) throw ConfigError("unknown model variant '" + name + "' (expected T, S, B or micro)");
  ModelConfig cfg;
  cfg.variant = canonical_variant(name);
  cfg.num_classes = num_classes;
  cfg.image_size = image_size == 0 ? row->image_size : image_size;
  const auto lambdas = default_lambda_schedule();
  for (std::size_t i = 0; i < 4; ++i) {
    StageConfig s;
    s.layers = row->layers[i];
    s.channels = row->channels[i];
    s.heads = row->heads[i];
    s.lambdas = lambdas[i];
    s.patch_embed = default_patch_embed(i);
    cfg.stages.push_back(s);
  }
  validate(cfg);
  return cfg;
}

std::vector<attention::Grid> stage_grids(const ModelConfig& config) {
  std::vector<attention::Grid> grids;
  std::size_t side = config.image_size;
  for (const auto& s : config.stages) {
    const auto& pe = s.patch_embed;
    if (side + 2 * pe.padding < pe.kernel) {
      throw ConfigError("image of side " + std::to_string(config.image_size) + " is too small for stage " +
                        std::to_string(grids.size() + 1));
    }
    side = conv_output_size(side, pe.kernel, pe.stride, pe.padding);
    grids.push_back({side, side});
  }
  return grids;
}

void validate(ModelConfig& config) {
  if (config.stages.size() != 4) throw ConfigError("model needs exactly 4 stages");
  if (config.num_classes == 0) throw ConfigError("num_classes must be positive");
  if (config.in_channels == 0) throw ConfigError("in_channels must be positive");
  if (config.image_size == 0) throw ConfigError("image_size must be positive");
  if (config.ffn_ratio == 0) throw ConfigError("ffn_ratio must be positive");
  std::size_t in = config.in_channels;
  for (std::size_t i = 0; i < config.stages.size(); ++i) {
    auto& s = config.stages[i];
    const std::string where = "stage " + std::to_string(i + 1);
    if (s.layers == 0) throw ConfigError(where + ": needs at least one layer");
    if (s.ffn_ratio && *s.ffn_ratio == 0) throw ConfigError(where + ": ffn_ratio must be positive");
    auto& pe = s.patch_embed;
    if (pe.kernel == 0 || pe.stride == 0) throw ConfigError(where + ": kernel and stride must be positive");
    if (pe.padding >= pe.kernel) throw ConfigError(where + ": padding must be smaller than the kernel");
    if (pe.in_channels != 0 && pe.in_channels != in) throw ConfigError(where + ": patch embedding input channels");
    if (pe.out_channels != 0 && pe.out_channels != s.channels) {
      throw ConfigError(where + ": patch embedding output channels");
    }
    pe.in_channels = in;
    pe.out_channels = s.channels;
    try {
      config.attention_spec(i).validate();
    } catch (const ParameterError& e) {
      throw ConfigError(where + ": " + e.what());
    }
    in = s.channels;
  }
  const auto grids = stage_grids(config);
  if (config.aggregation == attention::Aggregation::grid) {
    for (std::size_t i = 0; i < grids.size(); ++i) {
      for (double l : config.stages[i].lambdas) {
        const std::size_t r = attention::grid_patch_size(l);
        if (grids[i].height % r != 0 || grids[i].width % r != 0) {
          throw ConfigError("stage " + std::to_string(i + 1) + ": grid patch " + std::to_string(r) +
                            " does not tile the " + std::to_string(grids[i].height) + "x" +
                            std::to_string(grids[i].width) + " token grid");
        }
      }
    }
  }
}

std::vector<std::string> table_deviations(const ModelConfig& config) {
  std::vector<std::string> out;
  const auto lambdas = default_lambda_schedule();
  const auto row = variant_row(config.variant);
  if (!row && config.variant != "custom") out.push_back("unknown variant name '" + config.variant + "'");
  for (std::size_t i = 0; i < config.stages.size() && i < 4; ++i) {
    const auto& s = config.stages[i];
    const std::string where = "stage " + std::to_string(i + 1) + ": ";
    if (row) {
      if (s.layers != row->layers[i]) out.push_back(where + "layers " + std::to_string(s.layers) + " vs " +
                                                    std::to_string(row->layers[i]));
      if (s.channels != row->channels[i]) out.push_back(where + "channels " + std::to_string(s.channels) + " vs " +
                                                        std::to_string(row->channels[i]));
      if (s.heads != row->heads[i]) out.push_back(where + "heads " + std::to_string(s.heads) + " vs " +
                                                  std::to_string(row->heads[i]));
    }
    if (s.lambdas != lambdas[i]) {
      out.push_back(where + "lambdas " + lambdas_string(s.lambdas) + " vs " + lambdas_string(lambdas[i]));
    }
    const auto pe = default_patch_embed(i);
    if (s.patch_embed.kernel != pe.kernel || s.patch_embed.stride != pe.stride ||
        s.patch_embed.padding != pe.padding) {
      out.push_back(where + "patch embedding geometry differs");
    }
  }
  if (!row) {
    const std::vector<std::string> table{"T", "S", "B"};
    const bool matches_any = std::any_of(table.begin(), table.end(), [&](const std::string& v) {
      const auto r = *variant_row(v);
      for (std::size_t i = 0; i < config.stages.size(); ++i) {
        const auto& s = config.stages[i];
        if (s.layers != r.layers[i] || s.channels != r.channels[i] || s.heads != r.heads[i]) return false;
      }
      return config.stages.size() == 4;
    });
    if (!matches_any) out.push_back("stage layers/channels/heads match no table variant");
  }
  if (config.aggregation != attention::Aggregation::cluster) out.push_back("grid aggregation instead of clustering");
  if (config.combine != attention::ScaleCombine::concat) out.push_back("per-scale outputs summed, not concatenated");
  return out;
}

void to_json(json& j, const ModelConfig& config) {
  json stages = json::array();
  for (const auto& s : config.stages) {
    json st{{"layers", s.layers},
            {"channels", s.channels},
            {"heads", s.heads},
            {"lambdas", s.lambdas},
            {"patch_embed",
             {{"kernel", s.patch_embed.kernel},
              {"stride", s.patch_embed.stride},
              {"padding", s.patch_embed.padding},
              {"in_channels", s.patch_embed.in_channels},
              {"out_channels", s.patch_embed.out_channels}}}};
    if (s.ffn_ratio) st["ffn_ratio"] = *s.ffn_ratio;
    stages.push_back(std::move(st));
  }
  j = json{{"variant", config.variant},
           {"num_classes", config.num_classes},
           {"image_size", config.image_size},
           {"in_channels", config.in_channels},
           {"ffn_ratio", config.ffn_ratio},
           {"neighbors", config.neighbors ? json(*config.neighbors) : json(nullptr)},
           {"aggregation", aggregation_name(config.aggregation)},
           {"combine", combine_name(config.combine)},
           {"stages", std::move(stages)}};
}

void from_json(const json& j, ModelConfig& config) {
  try {
    check_keys(j,
               {"variant", "num_classes", "image_size", "in_channels", "ffn_ratio", "neighbors", "aggregation",
                "combine", "stages"},
               "model config");
    const std::string variant = j.value("variant", std::string("custom"));
    const std::size_t classes = j.value("num_classes", std::size_t{1000});
    if (j.contains("stages")) {
      config = ModelConfig{};
      config.variant = canonical_variant(variant);
      config.num_classes = classes;
      config.image_size = j.value("image_size", std::size_t{224});
      std::size_t i = 0;
      for (const auto& st : j.at("stages")) {
        check_keys(st, {"layers", "channels", "heads", "lambdas", "patch_embed", "ffn_ratio"}, "stage config");
        StageConfig s;
        s.layers = st.at("layers").get<std::size_t>();
        s.channels = st.at("channels").get<std::size_t>();
        s.heads = st.at("heads").get<std::size_t>();
        s.lambdas = st.at("lambdas").get<std::vector<double>>();
        s.patch_embed = default_patch_embed(i++);
        if (st.contains("patch_embed")) {
          const auto& pe = st.at("patch_embed");
          check_keys(pe, {"kernel", "stride", "padding", "in_channels", "out_channels"}, "patch_embed");
          s.patch_embed.kernel = pe.value("kernel", s.patch_embed.kernel);
          s.patch_embed.stride = pe.value("stride", s.patch_embed.stride);
          s.patch_embed.padding = pe.value("padding", s.patch_embed.padding);
          s.patch_embed.in_channels = pe.value("in_channels", std::size_t{0});
          s.patch_embed.out_channels = pe.value("out_channels", std::size_t{0});
        }
        if (st.contains("ffn_ratio") && !st.at("ffn_ratio").is_null()) s.ffn_ratio = st.at("ffn_ratio").get<std::size_t>();
        config.stages.push_back(std::move(s));
      }
    } else {
      config = variant_config(variant, classes, j.value("image_size", std::size_t{0}));
    }
    config.in_channels = j.value("in_channels", config.in_channels);
    config.ffn_ratio = j.value("ffn_ratio", config.ffn_ratio);
    config.neighbors.reset();
    if (j.contains("neighbors") && !j.at("neighbors").is_null()) config.neighbors = j.at("neighbors").get<std::size_t>();
    const std::string agg = j.value("aggregation", std::string("cluster"));
    if (agg != "cluster" && agg != "grid") throw ConfigError("aggregation must be 'cluster' or 'grid'");
    config.aggregation = agg == "grid" ? attention::Aggregation::grid : attention::Aggregation::cluster;
    const std::string comb = j.value("combine", std::string("concat"));
    if (comb != "concat" && comb != "sum") throw ConfigError("combine must be 'concat' or 'sum'");
    config.combine = comb == "sum" ? attention::ScaleCombine::sum : attention::ScaleCombine::concat;
  } catch (const json::exception& e) {
    throw ConfigError(std::string("model config: ") + e.what());
  }
  validate(config);
}

ModelConfig load_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open model config " + path.string());
  json j;
  try {
    in >> j;
  } catch (const json::exception& e) {
    throw ConfigError(path.string() + ": " + e.what());
  }
  return j.get<ModelConfig>();
}

}  // namespace clustr::model
