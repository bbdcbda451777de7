#include "clustr/model.hpp"

#include "clustr/init.hpp"
#include "clustr/ops.hpp"

namespace clustr::model {

namespace {

constexpr double kInitStd = 0.02;

template <typename T>
Parameter<T>* normal_param(ParameterStore<T>& store, const std::string& name, Shape shape, std::uint64_t seed) {
  return &store.add(name, normal_tensor<T>(std::move(shape), kInitStd, seed, name));
}

template <typename T>
std::pair<Parameter<T>*, Parameter<T>*> norm_params(ParameterStore<T>& store, const std::string& prefix,
                                                    std::size_t c) {
  return {&store.add(prefix + ".gain", Tensor<T>({c}, T{1})), &store.add(prefix + ".bias", Tensor<T>({c}))};
}

}  // namespace

template <typename T>
BlockWeights<T> make_block_weights(ParameterStore<T>& store, const std::string& prefix,
                                   const attention::AttentionSpec& spec, std::size_t ffn_ratio, std::uint64_t seed) {
  const std::size_t c = spec.channels, hidden = c * ffn_ratio;
  BlockWeights<T> w;
  std::tie(w.norm1_gain, w.norm1_bias) = norm_params(store, prefix + ".norm1", c);
  w.attn = attention::make_attention_weights(store, prefix + ".attn", spec, seed);
  std::tie(w.norm2_gain, w.norm2_bias) = norm_params(store, prefix + ".norm2", c);
  w.fc1 = normal_param(store, prefix + ".ffn.fc1", {c, hidden}, seed);
  w.fc1_bias = &store.add(prefix + ".ffn.fc1_bias", Tensor<T>({hidden}));
  w.fc2 = normal_param(store, prefix + ".ffn.fc2", {hidden, c}, seed);
  w.fc2_bias = &store.add(prefix + ".ffn.fc2_bias", Tensor<T>({c}));
  return w;
}

template <typename T>
Var<T> overlapped_patch_embed(Var<T> x, attention::Grid grid, const PatchEmbedConfig& cfg, const StageWeights<T>& w) {
  auto& tape = x.tape();
  if (x.value().cols() != cfg.in_channels) {
    throw ShapeError("patch embedding expects " + std::to_string(cfg.in_channels) + " input channels, got " +
                     std::to_string(x.value().cols()));
  }
  auto patches = unfold_patches(x, grid.height, grid.width, cfg.kernel, cfg.stride, cfg.padding);
  auto y = linear(patches, tape.parameter(*w.embed), tape.parameter(*w.embed_bias));
  return layer_norm(y, tape.parameter(*w.embed_norm_gain), tape.parameter(*w.embed_norm_bias));
}

template <typename T>
Var<T> transformer_block(Var<T> z, const BlockWeights<T>& w, const attention::AttentionSpec& spec,
                         attention::Grid grid, const attention::ForwardContext& ctx) {
  auto& tape = z.tape();
  auto h = layer_norm(z, tape.parameter(*w.norm1_gain), tape.parameter(*w.norm1_bias));
  auto z1 = add(z, attention::mhms_clus_attention(h, w.attn, spec, grid, ctx));
  auto h2 = layer_norm(z1, tape.parameter(*w.norm2_gain), tape.parameter(*w.norm2_bias));
  auto f = linear(gelu(linear(h2, tape.parameter(*w.fc1), tape.parameter(*w.fc1_bias))), tape.parameter(*w.fc2),
                  tape.parameter(*w.fc2_bias));
  return add(z1, f);
}

template <typename T>
Model<T>::Model(ModelConfig config, std::uint64_t seed) : config_(std::move(config)) {
  validate(config_);
  for (std::size_t i = 0; i < config_.stages.size(); ++i) {
    const auto& sc = config_.stages[i];
    const std::string prefix = "stage" + std::to_string(i + 1);
    const auto& pe = sc.patch_embed;
    StageWeights<T> sw;
    sw.embed = normal_param(store_, prefix + ".embed", {pe.kernel * pe.kernel * pe.in_channels, sc.channels}, seed);
    sw.embed_bias = &store_.add(prefix + ".embed_bias", Tensor<T>({sc.channels}));
    std::tie(sw.embed_norm_gain, sw.embed_norm_bias) = norm_params(store_, prefix + ".embed_norm", sc.channels);
    const auto spec = config_.attention_spec(i);
    for (std::size_t b = 0; b < sc.layers; ++b) {
      sw.blocks.push_back(make_block_weights(store_, prefix + ".block" + std::to_string(b), spec,
                                             config_.stage_ffn_ratio(i), seed));
    }
    stages_.push_back(std::move(sw));
  }
  const std::size_t c = config_.stages.back().channels;
  std::tie(norm_gain_, norm_bias_) = norm_params(store_, "norm", c);
  head_ = normal_param(store_, "head", {c, config_.num_classes}, seed);
  head_bias_ = &store_.add("head_bias", Tensor<T>({config_.num_classes}));
}

template <typename T>
Var<T> Model<T>::forward_image(Tape<T>& tape, const Tensor<T>& image, const attention::ForwardContext& ctx) const {
  const std::size_t side = config_.image_size;
  if (image.shape() != Shape{side, side, config_.in_channels}) {
    throw ShapeError("model expects a " + shape_string({side, side, config_.in_channels}) + " image, got " +
                     shape_string(image.shape()));
  }
  auto x = tape.constant(image.reshaped({side * side, config_.in_channels}));
  attention::Grid grid{side, side};
  const auto grids = stage_grids(config_);
  for (std::size_t i = 0; i < stages_.size(); ++i) {
    x = overlapped_patch_embed(x, grid, config_.stages[i].patch_embed, stages_[i]);
    grid = grids[i];
    const auto spec = config_.attention_spec(i);
    for (std::size_t b = 0; b < stages_[i].blocks.size(); ++b) {
      attention::ForwardContext block_ctx = ctx;
      block_ctx.layer = "stage" + std::to_string(i + 1) + ".block" + std::to_string(b) + ".attn";
      x = transformer_block(x, stages_[i].blocks[b], spec, grid, block_ctx);
    }
  }
  auto pooled = mean_rows(layer_norm(x, tape.parameter(*norm_gain_), tape.parameter(*norm_bias_)));
  return linear(pooled, tape.parameter(*head_), tape.parameter(*head_bias_));
}

template <typename T>
Tensor<T> Model<T>::forward(const Tensor<T>& batch, std::vector<attention::LayerMacs>* mac_log) const {
  const std::size_t side = config_.image_size, cin = config_.in_channels;
  if (batch.rank() != 4 || batch.dim(1) != side || batch.dim(2) != side || batch.dim(3) != cin) {
    throw ShapeError("model expects a B x " + std::to_string(side) + " x " + std::to_string(side) + " x " +
                     std::to_string(cin) + " batch, got " + shape_string(batch.shape()));
  }
  const std::size_t n = batch.dim(0), per = side * side * cin;
  Tensor<T> logits({n, config_.num_classes});
  attention::ForwardContext ctx;
  ctx.mac_log = mac_log;
  for (std::size_t i = 0; i < n; ++i) {
    Tape<T> tape(false);
    const auto data = batch.data().subspan(i * per, per);
    Tensor<T> image({side, side, cin}, std::vector<T>(data.begin(), data.end()));
    const auto out = forward_image(tape, image, ctx).value();
    std::copy(out.data().begin(), out.data().end(), logits.row(i).begin());
  }
  return logits;
}

#define CLUSTR_INSTANTIATE_MODEL(T)                                                                                   \
  template BlockWeights<T> make_block_weights<T>(ParameterStore<T>&, const std::string&,                             \
                                                 const attention::AttentionSpec&, std::size_t, std::uint64_t);       \
  template Var<T> overlapped_patch_embed<T>(Var<T>, attention::Grid, const PatchEmbedConfig&, const StageWeights<T>&); \
  template Var<T> transformer_block<T>(Var<T>, const BlockWeights<T>&, const attention::AttentionSpec&,              \
                                       attention::Grid, const attention::ForwardContext&);                           \
  template class Model<T>;

CLUSTR_INSTANTIATE_MODEL(float)
CLUSTR_INSTANTIATE_MODEL(double)

}  // namespace clustr::model
