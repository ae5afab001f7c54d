#pragma once

// Attention fusion of the transformer and CNN pyramids, level by level:
//
//   aligned = conv1x1(resize(f_cnn, size(f_ap)))
//   attn    = sigmoid(conv1x1([f_ap, aligned]))
//   attn'   = attn * (1 - beta) + beta
//   fused   = attn' * f_ap + (1 - attn') * aligned
//
// With attention fusion disabled the level is mean(f_ap, aligned).

#include <string>
#include <vector>

#include "cafe/fpn_neck.hpp"

namespace cafe {

enum class MaskArity { single, per_channel };

MaskArity parse_mask_arity(const std::string& name);
std::string to_string(MaskArity m);

struct FusionConfig {
  double beta = 0.8;
  MaskArity mask = MaskArity::single;
};

std::vector<std::string> validate(const FusionConfig& cfg);

template <typename T>
Tensor<T> align(const Tensor<T>& cnn_level, const Conv2d<T>& projection, std::int64_t h, std::int64_t w);

template <typename T>
struct FusedLevel {
  Tensor<T> fused;
  Tensor<T> attention;  // attn' after the beta bias
};

template <typename T>
FusedLevel<T> fuse_level(const Tensor<T>& f_ap, const Tensor<T>& f_cnn_aligned, double beta,
                         const Conv2d<T>& mask_conv);

template <typename T>
class Fusion {
 public:
  /// `attention` false selects the mean fallback (no mask convolutions).
  Fusion(const FusionConfig& cfg, bool attention, const std::array<int, 4>& ap_channels,
         const std::vector<int>& cnn_channels, const ParamBuilder<T>& pb);

  FeaturePyramid<T> operator()(const FeaturePyramid<T>& ap, const FeaturePyramid<T>& cnn,
                               std::vector<Tensor<T>>* attention_maps = nullptr) const;

  double beta() const { return cfg_.beta; }
  void set_beta(double beta);

 private:
  FusionConfig cfg_;
  bool attention_;
  std::vector<Conv2d<T>> align_;
  std::vector<Conv2d<T>> mask_;
};

}  // namespace cafe
