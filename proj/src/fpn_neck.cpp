#include "cafe/fpn_neck.hpp"

namespace cafe {

template <typename T>
void check_pyramid(const FeaturePyramid<T>& p, const char* what) {
  if (p.size() != 4) throw_shape(std::string(what) + ": expected 4 pyramid levels, got " + std::to_string(p.size()));
  for (std::size_t i = 0; i < 4; ++i) {
    if (p[i].rank() != 4) throw_shape(std::string(what) + ": level is not [B,C,H,W]");
    if (i > 0 && (p[i - 1].dim(2) != 2 * p[i].dim(2) || p[i - 1].dim(3) != 2 * p[i].dim(3)))
      throw_shape(std::string(what) + ": spatial size must halve between levels, got " + to_string(p[i - 1].shape()) +
                  " then " + to_string(p[i].shape()));
  }
}

template <typename T>
FpnNeck<T>::FpnNeck(int embed_dim, const NeckConfig& cfg, const ParamBuilder<T>& pb) : d_(embed_dim), cfg_(cfg) {
  if (embed_dim % 8 != 0) throw ConfigError("neck needs embed_dim divisible by 8, got " + std::to_string(embed_dim));
  for (int level = 0; level < 3; ++level) {
    std::vector<Up> ladder;
    int c = embed_dim;
    for (int s = 0; s < 3 - level; ++s) {
      const auto sb = pb.scope("fpn" + std::to_string(level + 1) + "." + std::to_string(s));
      Up u{ConvTranspose2x2<T>::make(sb.scope("deconv"), c, c / 2, !cfg.norm), std::nullopt};
      if (cfg.norm) u.bn = BatchNorm2d<T>::make(sb.scope("bn"), c / 2);
      ladder.push_back(std::move(u));
      c /= 2;
    }
    ladders_.push_back(std::move(ladder));
  }
  level4_ = Conv2d<T>::make(pb.scope("fpn4"), embed_dim, embed_dim, 1, 1, true);
}

template <typename T>
FeaturePyramid<T> FpnNeck<T>::operator()(const std::vector<Tensor<T>>& taps, bool training) const {
  if (taps.size() != 4) throw_shape("neck expects 4 tap maps, got " + std::to_string(taps.size()));
  for (const auto& t : taps)
    if (t.shape() != taps[0].shape() || t.rank() != 4 || t.dim(1) != d_)
      throw_shape("neck tap maps must share shape [B," + std::to_string(d_) + ",h,w], got " + to_string(t.shape()));
  FeaturePyramid<T> out;
  for (std::size_t level = 0; level < 3; ++level) {
    auto x = taps[level];
    for (const auto& up : ladders_[level]) {
      x = up.conv(x);
      if (up.bn) x = (*up.bn)(x, training);
      if (cfg_.activation) x = ops::relu(x);
    }
    out.push_back(x);
  }
  out.push_back(level4_(taps[3]));
  return out;
}

template <typename T>
std::array<int, 4> FpnNeck<T>::channels() const {
  return {d_ / 8, d_ / 4, d_ / 2, d_};
}

template class FpnNeck<float>;
template class FpnNeck<double>;
template void check_pyramid(const FeaturePyramid<float>&, const char*);
template void check_pyramid(const FeaturePyramid<double>&, const char*);

}  // namespace cafe
