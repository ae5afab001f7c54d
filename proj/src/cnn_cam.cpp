#include "cafe/cnn_cam.hpp"

namespace cafe {

std::vector<std::string> validate(const CnnConfig& cfg) {
  std::vector<std::string> errors;
  if (cfg.in_channels <= 0) errors.push_back("cnn input channel count must be positive");
  if (cfg.stage_widths.size() != 4) errors.push_back("cnn.widths must have exactly 4 entries");
  for (int w : cfg.stage_widths) {
    if (w <= 0) errors.push_back("cnn widths must be positive");
    else if (w < cfg.cam_reduction) errors.push_back("cnn width " + std::to_string(w) + " is below cam_reduction");
  }
  if (cfg.cam_reduction <= 0) errors.push_back("cnn.cam_reduction must be positive");
  if (cfg.cam_kernel <= 0 || cfg.cam_kernel % 2 == 0) errors.push_back("cnn.cam_kernel must be odd and positive");
  return errors;
}

template <typename T>
ResidualBlock<T> ResidualBlock<T>::make(const ParamBuilder<T>& pb, int in, int out, int stride, bool residual) {
  ResidualBlock b;
  b.conv1 = Conv2d<T>::make(pb.scope("conv1"), in, out, 3, stride, false);
  b.bn1 = BatchNorm2d<T>::make(pb.scope("bn1"), out);
  b.conv2 = Conv2d<T>::make(pb.scope("conv2"), out, out, 3, 1, false);
  b.bn2 = BatchNorm2d<T>::make(pb.scope("bn2"), out);
  b.residual = residual;
  if (residual && (in != out || stride != 1)) {
    auto p = Conv2d<T>::make(pb.scope("shortcut"), in, out, 1, stride, true);
    b.projection = p;
  }
  return b;
}

template <typename T>
Tensor<T> ResidualBlock<T>::operator()(const Tensor<T>& x, bool training) const {
  auto f = bn2(conv2(ops::relu(bn1(conv1(x), training))), training);
  if (!residual) return ops::relu(f);
  auto s = projection ? (*projection)(x) : x;
  if (s.shape() != f.shape())
    throw_shape("residual branch " + to_string(f.shape()) + " and shortcut " + to_string(s.shape()) + " differ");
  return ops::relu(ops::add(s, f));
}

template <typename T>
Cam<T> Cam<T>::make(const ParamBuilder<T>& pb, int channels, int reduction, int kernel) {
  const int hidden = std::max(1, channels / reduction);
  Cam c;
  c.fc1 = Linear<T>::make(pb.scope("channel.fc1"), channels, hidden);
  c.fc2 = Linear<T>::make(pb.scope("channel.fc2"), hidden, channels);
  c.spatial = Conv2d<T>::make(pb.scope("spatial"), 2, 1, kernel, 1, true, ops::PadMode::replicate);
  return c;
}

template <typename T>
Tensor<T> Cam<T>::operator()(const Tensor<T>& x, Maps* maps) const {
  const auto b = x.dim(0), c = x.dim(1);
  auto mlp = [&](const Tensor<T>& pooled) { return fc2(ops::relu(fc1(ops::reshape(pooled, {b, c})))); };
  auto s = ops::reshape(ops::sigmoid(ops::add(mlp(ops::global_avg_pool(x)), mlp(ops::global_max_pool(x)))),
                        {b, c, 1, 1});
  auto xc = ops::mul(x, s);
  auto m = ops::sigmoid(spatial(ops::concat<T>({ops::channel_mean(xc), ops::channel_max(xc)}, 1)));
  if (maps) *maps = {s, m};
  return ops::mul(xc, m);
}

template <typename T>
CnnBackbone<T>::CnnBackbone(const CnnConfig& cfg, bool residual, bool cam, const ParamBuilder<T>& pb) : cfg_(cfg) {
  const auto errors = validate(cfg);
  if (!errors.empty()) throw ConfigError("invalid cnn config: " + errors.front());
  int in = cfg.in_channels;
  for (std::size_t i = 0; i < 4; ++i) {
    const auto sb = pb.scope("stages." + std::to_string(i));
    const int out = cfg.stage_widths[i];
    blocks_.push_back(ResidualBlock<T>::make(sb.scope("block"), in, out, 2, residual));
    if (cam) cams_.push_back(Cam<T>::make(sb.scope("cam"), out, cfg.cam_reduction, cfg.cam_kernel));
    in = out;
  }
}

template <typename T>
FeaturePyramid<T> CnnBackbone<T>::operator()(const Tensor<T>& x_cnn, bool training) const {
  if (x_cnn.rank() != 4 || x_cnn.dim(1) != cfg_.in_channels)
    throw_shape("cnn branch expects [B," + std::to_string(cfg_.in_channels) + ",H,W], got " +
                to_string(x_cnn.shape()));
  if (x_cnn.dim(2) % 16 != 0 || x_cnn.dim(3) % 16 != 0)
    throw_shape("cnn branch needs H and W divisible by 16, got " + to_string(x_cnn.shape()));
  FeaturePyramid<T> out;
  auto x = x_cnn;
  for (std::size_t i = 0; i < blocks_.size(); ++i) {
    x = blocks_[i](x, training);
    if (!cams_.empty()) x = cams_[i](x);
    out.push_back(x);
  }
  return out;
}

template struct ResidualBlock<float>;
template struct ResidualBlock<double>;
template struct Cam<float>;
template struct Cam<double>;
template class CnnBackbone<float>;
template class CnnBackbone<double>;

}  // namespace cafe
