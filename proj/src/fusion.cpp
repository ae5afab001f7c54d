#include "cafe/fusion.hpp"

namespace cafe {

MaskArity parse_mask_arity(const std::string& name) {
  if (name == "single") return MaskArity::single;
  if (name == "per_channel") return MaskArity::per_channel;
  throw ConfigError("unknown fusion.mask '" + name + "' (expected single or per_channel)");
}

std::string to_string(MaskArity m) { return m == MaskArity::single ? "single" : "per_channel"; }

std::vector<std::string> validate(const FusionConfig& cfg) {
  if (!(cfg.beta >= 0.0 && cfg.beta <= 1.0)) return {"fusion.beta must lie in [0, 1]"};
  return {};
}

template <typename T>
Tensor<T> align(const Tensor<T>& cnn_level, const Conv2d<T>& projection, std::int64_t h, std::int64_t w) {
  return projection(ops::resize_bilinear(cnn_level, static_cast<int>(h), static_cast<int>(w)));
}

template <typename T>
FusedLevel<T> fuse_level(const Tensor<T>& f_ap, const Tensor<T>& f_cnn_aligned, double beta,
                         const Conv2d<T>& mask_conv) {
  if (f_ap.shape() != f_cnn_aligned.shape())
    throw_shape("fuse_level shapes differ: " + to_string(f_ap.shape()) + " vs " + to_string(f_cnn_aligned.shape()));
  auto attn = ops::sigmoid(mask_conv(ops::concat<T>({f_ap, f_cnn_aligned}, 1)));
  auto biased = ops::affine(attn, static_cast<T>(1.0 - beta), static_cast<T>(beta));
  return {ops::blend(biased, f_ap, f_cnn_aligned), biased};
}

template <typename T>
Fusion<T>::Fusion(const FusionConfig& cfg, bool attention, const std::array<int, 4>& ap_channels,
                  const std::vector<int>& cnn_channels, const ParamBuilder<T>& pb)
    : cfg_(cfg), attention_(attention) {
  const auto errors = validate(cfg);
  if (!errors.empty()) throw ConfigError(errors.front());
  if (cnn_channels.size() != 4) throw ConfigError("fusion expects 4 CNN levels");
  for (std::size_t i = 0; i < 4; ++i) {
    const auto lb = pb.scope("levels." + std::to_string(i));
    align_.push_back(Conv2d<T>::make(lb.scope("align"), cnn_channels[i], ap_channels[i], 1, 1, true));
    if (attention) {
      const int out = cfg.mask == MaskArity::single ? 1 : ap_channels[i];
      mask_.push_back(Conv2d<T>::zeros(lb.scope("mask"), 2 * ap_channels[i], out, 1, true));
    }
  }
}

template <typename T>
void Fusion<T>::set_beta(double beta) {
  if (!(beta >= 0.0 && beta <= 1.0)) throw ConfigError("fusion.beta must lie in [0, 1]");
  cfg_.beta = beta;
}

template <typename T>
FeaturePyramid<T> Fusion<T>::operator()(const FeaturePyramid<T>& ap, const FeaturePyramid<T>& cnn,
                                        std::vector<Tensor<T>>* attention_maps) const {
  if (ap.size() != 4 || cnn.size() != 4)
    throw_shape("fusion expects two 4-level pyramids, got " + std::to_string(ap.size()) + " and " +
                std::to_string(cnn.size()));
  FeaturePyramid<T> out;
  for (std::size_t i = 0; i < 4; ++i) {
    auto aligned = align(cnn[i], align_[i], ap[i].dim(2), ap[i].dim(3));
    if (attention_) {
      auto level = fuse_level(ap[i], aligned, cfg_.beta, mask_[i]);
      if (attention_maps) attention_maps->push_back(level.attention);
      out.push_back(level.fused);
    } else {
      out.push_back(ops::affine(ops::add(ap[i], aligned), T(0.5), T(0)));
    }
  }
  return out;
}

#define CAFE_INSTANTIATE_FUSION(T)                                                                       \
  template class Fusion<T>;                                                                              \
  template Tensor<T> align(const Tensor<T>&, const Conv2d<T>&, std::int64_t, std::int64_t);              \
  template FusedLevel<T> fuse_level(const Tensor<T>&, const Tensor<T>&, double, const Conv2d<T>&);

CAFE_INSTANTIATE_FUSION(float)
CAFE_INSTANTIATE_FUSION(double)

}  // namespace cafe
