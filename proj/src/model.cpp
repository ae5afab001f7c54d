#include "cafe/model.hpp"

#include <numeric>
#include <sstream>

namespace cafe {

ModelConfig ModelConfig::resolved() const {
  ModelConfig r = *this;
  r.cnn.in_channels = static_cast<int>(channels.cnn_indices().size());
  return r;
}

std::vector<std::string> validate(const ModelConfig& cfg) {
  std::vector<std::string> errors;
  auto take = [&errors](const std::vector<std::string>& more) { errors.insert(errors.end(), more.begin(), more.end()); };
  take(validate(cfg.channels, cfg.backbone.in_channels));
  take(validate(cfg.backbone));
  if (cfg.backbone.embed_dim % 8 != 0) errors.push_back("backbone.embed_dim must be divisible by 8 for the neck");
  if (cfg.ablation.cnn) {
    take(validate(cfg.cnn));
    if (cfg.cnn.in_channels != static_cast<int>(cfg.channels.cnn_indices().size()))
      errors.push_back("cnn input width does not match the CNN channel subset");
  }
  take(validate(cfg.fusion));
  take(validate(cfg.decoder));
  return errors;
}

ModelConfig paper_scale_config() {
  ModelConfig c;
  c.backbone.embed_dim = 1280;
  c.backbone.depth = 32;
  c.backbone.num_heads = 16;
  c.backbone.patch_size = 16;
  c.backbone.adapter_bottleneck = 32;
  c.cnn.stage_widths = {128, 256, 512, 1024};
  c.decoder.channels = 256;
  c.decoder.ppm_scales = {1, 2, 3, 6};
  return c.resolved();
}

ModelConfig toy_config() { return ModelConfig{}.resolved(); }

namespace {

enum Stream : std::uint64_t { kTrunk = 1, kAdapters, kNeck, kCnn, kFusion, kDecoder };

std::uint64_t stream_seed(std::uint64_t seed, std::uint64_t stream) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(stream)};
  std::uint32_t words[2];
  seq.generate(words, words + 2);
  return (static_cast<std::uint64_t>(words[0]) << 32) | words[1];
}

}  // namespace

template <typename T>
Model<T>::Model(const ModelConfig& cfg_in, std::uint64_t seed, bool meta) : cfg_(cfg_in.resolved()) {
  const auto errors = validate(cfg_);
  if (!errors.empty()) {
    std::ostringstream os;
    os << "invalid model config:";
    for (const auto& e : errors) os << "\n  " << e;
    throw ConfigError(os.str());
  }
  auto builder = [&](std::uint64_t stream, const std::string& scope) {
    rngs_.push_back(std::make_unique<std::mt19937_64>(stream_seed(seed, stream)));
    return ParamBuilder<T>(store_, *rngs_.back(), meta).scope(scope);
  };

  std::optional<ParamBuilder<T>> adapter_pb;
  auto trunk_pb = builder(kTrunk, "backbone.trunk");
  if (cfg_.ablation.adapters) adapter_pb = builder(kAdapters, "backbone.adapters");
  vit_.emplace(cfg_.backbone, trunk_pb, adapter_pb);
  neck_.emplace(cfg_.backbone.embed_dim, cfg_.neck, builder(kNeck, "neck"));
  if (cfg_.ablation.cnn) {
    cnn_.emplace(cfg_.cnn, cfg_.ablation.residual, cfg_.ablation.cam, builder(kCnn, "cnn"));
    fusion_.emplace(cfg_.fusion, cfg_.ablation.m2faf, neck_->channels(), cfg_.cnn.stage_widths,
                    builder(kFusion, "fusion"));
  }
  decoder_.emplace(neck_->channels(), cfg_.decoder, builder(kDecoder, "decoder"));
}

template <typename T>
void Model<T>::check_input(const Tensor<T>& image) const {
  if (image.rank() != 4) throw_shape("model expects [B,C,H,W], got " + to_string(image.shape()));
  if (image.dim(1) != cfg_.channels.total_channels)
    throw_shape("model expects " + std::to_string(cfg_.channels.total_channels) + " input channels, got " +
                std::to_string(image.dim(1)));
  const std::int64_t m = std::lcm<std::int64_t>(cfg_.backbone.patch_size, 16);
  if (image.dim(2) % m != 0 || image.dim(3) % m != 0)
    throw_shape("input size " + std::to_string(image.dim(2)) + "x" + std::to_string(image.dim(3)) +
                " is not divisible by " + std::to_string(m));
}

template <typename T>
ModelFeatures<T> Model<T>::features(const Tensor<T>& image, bool training) const {
  check_input(image);
  auto [x_ap, x_cnn] = split(image, cfg_.channels);
  ModelFeatures<T> f;
  f.taps = vit_->forward_features(x_ap);
  const auto [gh, gw] = vit_->grid(image.dim(2), image.dim(3));
  std::vector<Tensor<T>> maps;
  for (const auto& t : f.taps) maps.push_back(token_to_image(t, gh, gw));
  f.ap = (*neck_)(maps, training);
  if (cnn_) {
    f.cnn = (*cnn_)(x_cnn, training);
    f.fused = (*fusion_)(f.ap, f.cnn, &f.attention);
  } else {
    f.fused = f.ap;
  }
  return f;
}

template <typename T>
Tensor<T> Model<T>::forward(const Tensor<T>& image, bool training) const {
  auto f = features(image, training);
  return (*decoder_)(f.fused, image.dim(2), image.dim(3), training);
}

template <typename T>
Inventory Model<T>::inventory() const {
  Inventory inv;
  const std::vector<std::string> components{"backbone.trunk", "backbone.adapters", "neck", "cnn", "fusion", "decoder"};
  for (const auto& c : components) {
    const auto n = store_.parameter_count(c + ".");
    if (n == 0) continue;
    inv.rows.push_back({c, n, store_.parameter_count(c + ".", true) == n});
  }
  if (vit_->has_adapters()) inv.adapter_per_block = store_.parameter_count("backbone.adapters.0.");
  inv.total = store_.parameter_count();
  inv.trainable = store_.parameter_count("", true);
  return inv;
}

template <typename T>
void Model<T>::set_beta(double beta) {
  cfg_.fusion.beta = beta;
  if (fusion_) fusion_->set_beta(beta);
}

template class Model<float>;
template class Model<double>;

}  // namespace cafe
