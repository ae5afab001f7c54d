#pragma once

// UperNet head: pyramid pooling on the coarsest level, 1x1 laterals on the
// others, top-down addition with 3x3 smoothing, then concatenation at the
// finest resolution, a 3x3 fuse conv, a 1x1 classifier and a bilinear
// resize of the logits to the input size.

#include <string>
#include <vector>

#include "cafe/fpn_neck.hpp"

namespace cafe {

struct DecoderConfig {
  int channels = 32;
  std::vector<int> ppm_scales{1, 2, 3, 4};
  int num_classes = 2;
};

std::vector<std::string> validate(const DecoderConfig& cfg);

template <typename T>
class PyramidPooling {
 public:
  PyramidPooling(int in_channels, const DecoderConfig& cfg, const ParamBuilder<T>& pb);
  Tensor<T> operator()(const Tensor<T>& x, bool training) const;

 private:
  std::vector<int> scales_;
  std::vector<ConvBnRelu<T>> branches_;
  ConvBnRelu<T> bottleneck_;
};

template <typename T>
class UperNetDecoder {
 public:
  UperNetDecoder(const std::array<int, 4>& in_channels, const DecoderConfig& cfg, const ParamBuilder<T>& pb);

  /// Logits [B, K, out_h, out_w].
  Tensor<T> operator()(const FeaturePyramid<T>& fused, std::int64_t out_h, std::int64_t out_w, bool training) const;

  const Conv2d<T>& classifier() const { return classifier_; }

 private:
  DecoderConfig cfg_;
  PyramidPooling<T> ppm_;
  std::vector<ConvBnRelu<T>> laterals_;
  std::vector<ConvBnRelu<T>> smooth_;
  ConvBnRelu<T> fuse_;
  Conv2d<T> classifier_;
};

}  // namespace cafe
