#include "cafe/adapted_vit.hpp"

#include <cmath>

namespace cafe {

Activation parse_activation(const std::string& name) {
  if (name == "gelu") return Activation::gelu;
  if (name == "relu") return Activation::relu;
  throw ConfigError("unknown activation '" + name + "' (expected gelu or relu)");
}

std::string to_string(Activation a) { return a == Activation::gelu ? "gelu" : "relu"; }

std::vector<int> default_taps(int depth) {
  auto q = [depth](int num) { return (num * depth + 3) / 4 - 1; };
  return {q(1), q(2), q(3), depth - 1};
}

std::vector<int> BackboneConfig::taps() const { return tap_layers.empty() ? default_taps(depth) : tap_layers; }

std::vector<std::string> validate(const BackboneConfig& cfg) {
  std::vector<std::string> errors;
  if (cfg.embed_dim <= 0 || cfg.depth <= 0 || cfg.num_heads <= 0 || cfg.patch_size <= 0 || cfg.in_channels <= 0 ||
      cfg.mlp_ratio <= 0 || cfg.adapter_bottleneck <= 0) {
    errors.push_back("backbone dimensions must be positive");
    return errors;
  }
  if (cfg.embed_dim % cfg.num_heads != 0) errors.push_back("backbone.embed_dim must be divisible by num_heads");
  if (cfg.embed_dim % 4 != 0) errors.push_back("backbone.embed_dim must be divisible by 4 (2D position table)");
  if (cfg.adapter_bottleneck >= cfg.embed_dim) errors.push_back("backbone.adapter_bottleneck must be < embed_dim");
  const auto taps = cfg.taps();
  if (taps.size() != 4) errors.push_back("backbone.taps must have exactly 4 entries");
  for (std::size_t i = 0; i < taps.size(); ++i) {
    if (taps[i] < 0 || taps[i] >= cfg.depth) errors.push_back("tap layer " + std::to_string(taps[i]) + " out of range");
    if (i > 0 && taps[i] <= taps[i - 1]) errors.push_back("tap layers must be strictly increasing");
  }
  return errors;
}

std::int64_t adapter_parameter_count(std::int64_t d, std::int64_t r) { return d * r + r + r * d + d; }

template <typename T>
AdapterWeights<T> AdapterWeights<T>::make(const ParamBuilder<T>& pb, std::int64_t d, std::int64_t r, Activation act) {
  AdapterWeights a;
  a.down = Linear<T>::make(pb.scope("down"), d, r, true, Init::normal(0.02), Init::zeros());
  a.up = Linear<T>::make(pb.scope("up"), r, d, true, Init::zeros(), Init::zeros());
  a.act = act;
  return a;
}

template <typename T>
Tensor<T> adapter_forward(const Tensor<T>& x, const AdapterWeights<T>& w) {
  if (x.dim(-1) != w.down.w.dim(0))
    throw_shape("adapter expects last dim " + std::to_string(w.down.w.dim(0)) + ", got " + to_string(x.shape()));
  return apply_activation(w.up(apply_activation(w.down(x), w.act)), w.act);
}

template <typename T>
VitBlock<T> VitBlock<T>::make(const ParamBuilder<T>& pb, int d, int heads, int mlp_ratio) {
  const auto lin = [&](const std::string& name, std::int64_t in, std::int64_t out) {
    return Linear<T>::make(pb.scope(name), in, out, true, Init::trunc_normal(0.02), Init::zeros());
  };
  VitBlock b;
  b.norm1 = LayerNorm<T>::make(pb.scope("norm1"), d);
  b.qkv = lin("attn.qkv", d, 3 * d);
  b.proj = lin("attn.proj", d, d);
  b.norm2 = LayerNorm<T>::make(pb.scope("norm2"), d);
  b.fc1 = lin("mlp.fc1", d, std::int64_t{mlp_ratio} * d);
  b.fc2 = lin("mlp.fc2", std::int64_t{mlp_ratio} * d, d);
  b.heads = heads;
  return b;
}

template <typename T>
Tensor<T> VitBlock<T>::operator()(const Tensor<T>& x) const {
  auto h = ops::add(x, proj(ops::attention(qkv(norm1(x)), heads)));
  return ops::add(h, fc2(ops::gelu(fc1(norm2(h)))));
}

template <typename T>
Tensor<T> adapted_block_forward(const Tensor<T>& x, const VitBlock<T>& block, const AdapterWeights<T>* adapter) {
  if (!adapter) return block(x);
  return block(ops::add(x, adapter_forward(x, *adapter)));
}

template <typename T>
Tensor<T> sincos_position_table(int d, int h, int w) {
  if (d % 4 != 0) throw ConfigError("position table needs embed_dim divisible by 4");
  const int quarter = d / 4;
  std::vector<T> v(static_cast<std::size_t>(h) * w * d);
  for (int i = 0; i < h; ++i)
    for (int j = 0; j < w; ++j) {
      T* row = v.data() + (static_cast<std::size_t>(i) * w + j) * d;
      for (int k = 0; k < quarter; ++k) {
        const double omega = 1.0 / std::pow(10000.0, static_cast<double>(k) / quarter);
        row[k] = static_cast<T>(std::sin(i * omega));
        row[quarter + k] = static_cast<T>(std::cos(i * omega));
        row[2 * quarter + k] = static_cast<T>(std::sin(j * omega));
        row[3 * quarter + k] = static_cast<T>(std::cos(j * omega));
      }
    }
  return Tensor<T>::from({1, std::int64_t{h} * w, d}, std::move(v));
}

template <typename T>
Tensor<T> token_to_image(const Tensor<T>& tokens, int h, int w) {
  if (tokens.rank() != 3) throw_shape("token_to_image expects [B,N,d], got " + to_string(tokens.shape()));
  if (tokens.dim(1) != std::int64_t{h} * w)
    throw_shape("token count " + std::to_string(tokens.dim(1)) + " does not match grid " + std::to_string(h) + "x" +
                std::to_string(w));
  return ops::reshape(ops::transpose_last2(tokens), {tokens.dim(0), tokens.dim(2), h, w});
}

template <typename T>
Tensor<T> image_to_tokens(const Tensor<T>& image) {
  if (image.rank() != 4) throw_shape("image_to_tokens expects [B,d,h,w], got " + to_string(image.shape()));
  return ops::transpose_last2(ops::reshape(image, {image.dim(0), image.dim(1), image.dim(2) * image.dim(3)}));
}

template <typename T>
AdaptedViT<T>::AdaptedViT(const BackboneConfig& cfg, const ParamBuilder<T>& trunk,
                          const std::optional<ParamBuilder<T>>& adapters)
    : cfg_(cfg) {
  const auto errors = validate(cfg);
  if (!errors.empty()) throw ConfigError("invalid backbone config: " + errors.front());
  const auto tb = trunk.frozen();
  patch_embed_ = Conv2d<T>::make(tb.scope("patch_embed"), cfg.in_channels, cfg.embed_dim, cfg.patch_size,
                                 cfg.patch_size, true);
  patch_embed_.pad = 0;
  if (cfg.use_class_token) cls_token_ = tb.param("cls_token", {1, 1, cfg.embed_dim}, Init::trunc_normal(0.02));
  for (int i = 0; i < cfg.depth; ++i)
    blocks_.push_back(VitBlock<T>::make(tb.scope("blocks." + std::to_string(i)), cfg.embed_dim, cfg.num_heads,
                                        cfg.mlp_ratio));
  if (adapters)
    for (int i = 0; i < cfg.depth; ++i)
      adapters_.push_back(AdapterWeights<T>::make(adapters->scope(std::to_string(i)), cfg.embed_dim,
                                                  cfg.adapter_bottleneck, cfg.adapter_activation));
}

template <typename T>
std::pair<int, int> AdaptedViT<T>::grid(std::int64_t h, std::int64_t w) const {
  if (h % cfg_.patch_size != 0 || w % cfg_.patch_size != 0)
    throw_shape("input " + std::to_string(h) + "x" + std::to_string(w) + " is not divisible by patch size " +
                std::to_string(cfg_.patch_size));
  return {static_cast<int>(h / cfg_.patch_size), static_cast<int>(w / cfg_.patch_size)};
}

template <typename T>
std::vector<Tensor<T>> AdaptedViT<T>::forward_features(const Tensor<T>& x_ap, bool use_adapters) const {
  if (x_ap.rank() != 4 || x_ap.dim(1) != cfg_.in_channels)
    throw_shape("backbone expects [B," + std::to_string(cfg_.in_channels) + ",H,W], got " + to_string(x_ap.shape()));
  const auto [gh, gw] = grid(x_ap.dim(2), x_ap.dim(3));
  const auto batch = x_ap.dim(0);
  auto x = ops::add(image_to_tokens(patch_embed_(x_ap)), sincos_position_table<T>(cfg_.embed_dim, gh, gw));
  const int offset = cfg_.use_class_token ? 1 : 0;
  if (cfg_.use_class_token)
    x = ops::concat<T>({ops::add(Tensor<T>::zeros({batch, 1, cfg_.embed_dim}), cls_token_), x}, 1);

  const bool adapt = use_adapters && has_adapters();
  const auto taps = cfg_.taps();
  std::vector<Tensor<T>> out;
  for (int i = 0; i < cfg_.depth && out.size() < taps.size(); ++i) {
    x = adapted_block_forward(x, blocks_[static_cast<std::size_t>(i)],
                              adapt ? &adapters_[static_cast<std::size_t>(i)] : nullptr);
    if (i == taps[out.size()]) out.push_back(offset ? ops::slice(x, 1, offset, x.dim(1)) : x);
  }
  return out;
}

#define CAFE_INSTANTIATE_VIT(T)                                                                             \
  template struct AdapterWeights<T>;                                                                        \
  template struct VitBlock<T>;                                                                              \
  template class AdaptedViT<T>;                                                                             \
  template Tensor<T> adapter_forward(const Tensor<T>&, const AdapterWeights<T>&);                           \
  template Tensor<T> adapted_block_forward(const Tensor<T>&, const VitBlock<T>&, const AdapterWeights<T>*); \
  template Tensor<T> sincos_position_table<T>(int, int, int);                                               \
  template Tensor<T> token_to_image(const Tensor<T>&, int, int);                                            \
  template Tensor<T> image_to_tokens(const Tensor<T>&);

CAFE_INSTANTIATE_VIT(float)
CAFE_INSTANTIATE_VIT(double)

}  // namespace cafe
