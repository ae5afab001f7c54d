#pragma once

// Four-stage CNN branch. Each stage is one stride-2 residual block followed
// by a channel-then-spatial attention module (CAM).

#include <optional>
#include <string>
#include <vector>

#include "cafe/fpn_neck.hpp"

namespace cafe {

struct CnnConfig {
  int in_channels = 7;
  std::vector<int> stage_widths{16, 32, 64, 128};
  int cam_reduction = 16;
  int cam_kernel = 7;
};

std::vector<std::string> validate(const CnnConfig& cfg);

/// y = relu(shortcut(x) + F(x)), F = conv3x3(stride) -> BN -> ReLU -> conv3x3 -> BN.
/// The shortcut is the identity when shapes allow, else a 1x1 conv with the
/// same stride. With `residual` false the block is a plain
/// conv-BN-ReLU-conv-BN-ReLU stack.
template <typename T>
struct ResidualBlock {
  Conv2d<T> conv1, conv2;
  BatchNorm2d<T> bn1, bn2;
  std::optional<Conv2d<T>> projection;
  bool residual = true;

  static ResidualBlock make(const ParamBuilder<T>& pb, int in, int out, int stride, bool residual);
  Tensor<T> operator()(const Tensor<T>& x, bool training) const;
};

/// Channel attention s = sigmoid(MLP(avgpool x) + MLP(maxpool x)) with a
/// shared C -> C/r -> C MLP, then spatial attention
/// m = sigmoid(conv_kxk([mean_c x', max_c x'])).
template <typename T>
struct Cam {
  Linear<T> fc1, fc2;
  Conv2d<T> spatial;

  static Cam make(const ParamBuilder<T>& pb, int channels, int reduction, int kernel);

  struct Maps {
    Tensor<T> channel;  // [B, C, 1, 1]
    Tensor<T> spatial;  // [B, 1, H, W]
  };
  Tensor<T> operator()(const Tensor<T>& x, Maps* maps = nullptr) const;
};

template <typename T>
class CnnBackbone {
 public:
  CnnBackbone(const CnnConfig& cfg, bool residual, bool cam, const ParamBuilder<T>& pb);

  /// Strides 2/4/8/16, widths = stage_widths, finest first.
  FeaturePyramid<T> operator()(const Tensor<T>& x_cnn, bool training) const;

  const CnnConfig& config() const { return cfg_; }

 private:
  CnnConfig cfg_;
  std::vector<ResidualBlock<T>> blocks_;
  std::vector<Cam<T>> cams_;
};

}  // namespace cafe
