#pragma once

// Per-tap upsampling ladder turning four [B, d, h, w] maps into a pyramid
// with channels {d/8, d/4, d/2, d} at scales {8x, 4x, 2x, 1x}.

#include <array>
#include <optional>
#include <vector>

#include "cafe/layers.hpp"

namespace cafe {

/// Four levels, finest first.
template <typename T>
using FeaturePyramid = std::vector<Tensor<T>>;

/// Checks level count and the halving of spatial size between levels.
template <typename T>
void check_pyramid(const FeaturePyramid<T>& p, const char* what);

struct NeckConfig {
  bool norm = true;
  bool activation = true;
};

template <typename T>
class FpnNeck {
 public:
  FpnNeck(int embed_dim, const NeckConfig& cfg, const ParamBuilder<T>& pb);

  FeaturePyramid<T> operator()(const std::vector<Tensor<T>>& taps, bool training) const;

  /// Channel counts of the produced levels.
  std::array<int, 4> channels() const;

 private:
  struct Up {
    ConvTranspose2x2<T> conv;
    std::optional<BatchNorm2d<T>> bn;
  };
  int d_;
  NeckConfig cfg_;
  std::vector<std::vector<Up>> ladders_;  // ladders_[i] has 3 - i steps
  Conv2d<T> level4_;
};

}  // namespace cafe
