#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "clustr/attention.hpp"
#include "clustr/autodiff.hpp"
#include "clustr/tensor.hpp"

#include "json.hpp"

namespace clustr::model {

struct PatchEmbedConfig {
  std::size_t kernel = 3;
  std::size_t stride = 2;
  std::size_t padding = 1;
  std::size_t in_channels = 0;
  std::size_t out_channels = 0;
};

struct StageConfig {
  std::size_t layers = 1;
  std::size_t channels = 0;
  std::size_t heads = 1;
  std::vector<double> lambdas{1.0};
  PatchEmbedConfig patch_embed;
  std::optional<std::size_t> ffn_ratio;  // overrides ModelConfig::ffn_ratio for this stage
};

struct ModelConfig {
  std::string variant = "custom";
  std::vector<StageConfig> stages;
  std::size_t num_classes = 1000;
  std::size_t image_size = 224;
  std::size_t in_channels = 3;
  std::size_t ffn_ratio = 4;
  std::optional<std::size_t> neighbors;
  attention::Aggregation aggregation = attention::Aggregation::cluster;
  attention::ScaleCombine combine = attention::ScaleCombine::concat;

  std::size_t stage_ffn_ratio(std::size_t stage) const { return stages.at(stage).ffn_ratio.value_or(ffn_ratio); }
  attention::AttentionSpec attention_spec(std::size_t stage) const;
};

/// The {64,16}, {16,4}, {4,1}, {1} reduction-ratio schedule shared by every named variant.
std::vector<std::vector<double>> default_lambda_schedule();

/// Named variants: "T", "S", "B" and "micro" (aliases "tiny", "small", "base").
/// image_size 0 picks the variant's native resolution (224, or 32 for micro).
ModelConfig variant_config(const std::string& name, std::size_t num_classes = 1000, std::size_t image_size = 0);

/// Fills patch-embedding channels, checks structure and geometry; throws ConfigError.
void validate(ModelConfig& config);

/// Human-readable differences between a config and the named variant's architecture table row.
std::vector<std::string> table_deviations(const ModelConfig& config);

/// Token grid produced by each stage's patch embedding.
std::vector<attention::Grid> stage_grids(const ModelConfig& config);

void to_json(nlohmann::json& j, const ModelConfig& config);
void from_json(const nlohmann::json& j, ModelConfig& config);

/// Reads a model config file. A bare {"variant": ...} expands to that variant.
ModelConfig load_config(const std::filesystem::path& path);

template <typename T>
struct BlockWeights {
  Parameter<T>* norm1_gain;
  Parameter<T>* norm1_bias;
  attention::AttentionWeights<T> attn;
  Parameter<T>* norm2_gain;
  Parameter<T>* norm2_bias;
  Parameter<T>* fc1;
  Parameter<T>* fc1_bias;
  Parameter<T>* fc2;
  Parameter<T>* fc2_bias;
};

template <typename T>
struct StageWeights {
  Parameter<T>* embed;  // (k*k*C_in) x C
  Parameter<T>* embed_bias;
  Parameter<T>* embed_norm_gain;
  Parameter<T>* embed_norm_bias;
  std::vector<BlockWeights<T>> blocks;
};

/// Registers one block's parameters under `prefix`.
template <typename T>
BlockWeights<T> make_block_weights(ParameterStore<T>& store, const std::string& prefix,
                                   const attention::AttentionSpec& spec, std::size_t ffn_ratio, std::uint64_t seed);

/// Overlapping-window patch embedding of a (height*width) x C_in token grid, then layer norm.
template <typename T>
Var<T> overlapped_patch_embed(Var<T> x, attention::Grid grid, const PatchEmbedConfig& cfg, const StageWeights<T>& w);

/// z' = attn(LN z) + z; out = FFN(LN z') + z'
template <typename T>
Var<T> transformer_block(Var<T> z, const BlockWeights<T>& w, const attention::AttentionSpec& spec,
                         attention::Grid grid, const attention::ForwardContext& ctx = {});

template <typename T>
class Model {
 public:
  Model(ModelConfig config, std::uint64_t seed);
  Model(const Model&) = delete;
  Model& operator=(const Model&) = delete;

  const ModelConfig& config() const { return config_; }
  ParameterStore<T>& params() { return store_; }
  const ParameterStore<T>& params() const { return store_; }
  const std::vector<StageWeights<T>>& stages() const { return stages_; }

  /// Logits (1 x classes) for one H x W x C_in image.
  Var<T> forward_image(Tape<T>& tape, const Tensor<T>& image, const attention::ForwardContext& ctx = {}) const;

  /// Logits (B x classes) for a B x H x W x C_in batch, without gradients.
  Tensor<T> forward(const Tensor<T>& batch, std::vector<attention::LayerMacs>* mac_log = nullptr) const;

  std::size_t count_params() const { return store_.count_elements(); }

 private:
  ModelConfig config_;
  ParameterStore<T> store_;
  std::vector<StageWeights<T>> stages_;
  Parameter<T>* norm_gain_ = nullptr;
  Parameter<T>* norm_bias_ = nullptr;
  Parameter<T>* head_ = nullptr;
  Parameter<T>* head_bias_ = nullptr;
};

/// Writes one CTR1 file per parameter plus manifest.json (config and name -> file map).
template <typename T>
void save_checkpoint(const Model<T>& model, const std::filesystem::path& dir);

/// Overwrites the model's parameters from a checkpoint; the stored config must match.
template <typename T>
void load_checkpoint(Model<T>& model, const std::filesystem::path& dir);

ModelConfig checkpoint_config(const std::filesystem::path& dir);

}  // namespace clustr::model
