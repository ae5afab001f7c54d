#include "cafe/upernet.hpp"

namespace cafe {

std::vector<std::string> validate(const DecoderConfig& cfg) {
  std::vector<std::string> errors;
  if (cfg.channels <= 0) errors.push_back("decoder.channels must be positive");
  if (cfg.num_classes < 2) errors.push_back("decoder.classes must be at least 2");
  if (cfg.ppm_scales.empty()) errors.push_back("decoder.ppm_scales must not be empty");
  for (std::size_t i = 0; i < cfg.ppm_scales.size(); ++i) {
    if (cfg.ppm_scales[i] <= 0) errors.push_back("decoder.ppm_scales must be positive");
    if (i > 0 && cfg.ppm_scales[i] <= cfg.ppm_scales[i - 1])
      errors.push_back("decoder.ppm_scales must be strictly increasing");
  }
  return errors;
}

namespace {
constexpr auto kReplicate = ops::PadMode::replicate;
}

template <typename T>
PyramidPooling<T>::PyramidPooling(int in_channels, const DecoderConfig& cfg, const ParamBuilder<T>& pb)
    : scales_(cfg.ppm_scales) {
  for (std::size_t i = 0; i < scales_.size(); ++i)
    branches_.push_back(ConvBnRelu<T>::make(pb.scope("branches." + std::to_string(i)), in_channels, cfg.channels, 1));
  const auto concat_channels = in_channels + static_cast<int>(scales_.size()) * cfg.channels;
  bottleneck_ = ConvBnRelu<T>::make(pb.scope("bottleneck"), concat_channels, cfg.channels, 3, kReplicate);
}

template <typename T>
Tensor<T> PyramidPooling<T>::operator()(const Tensor<T>& x, bool training) const {
  const auto h = static_cast<int>(x.dim(2)), w = static_cast<int>(x.dim(3));
  std::vector<Tensor<T>> parts{x};
  for (std::size_t i = 0; i < scales_.size(); ++i) {
    if (scales_[i] > std::min(h, w))
      throw_shape("pyramid pooling scale " + std::to_string(scales_[i]) + " exceeds feature size " +
                  std::to_string(h) + "x" + std::to_string(w));
    parts.push_back(ops::resize_bilinear(branches_[i](ops::adaptive_avg_pool(x, scales_[i]), training), h, w));
  }
  return bottleneck_(ops::concat(parts, 1), training);
}

template <typename T>
UperNetDecoder<T>::UperNetDecoder(const std::array<int, 4>& in_channels, const DecoderConfig& cfg,
                                  const ParamBuilder<T>& pb)
    : cfg_(cfg), ppm_(in_channels[3], cfg, pb.scope("ppm")) {
  const auto errors = validate(cfg);
  if (!errors.empty()) throw ConfigError("invalid decoder config: " + errors.front());
  for (std::size_t i = 0; i < 3; ++i) {
    laterals_.push_back(ConvBnRelu<T>::make(pb.scope("lateral." + std::to_string(i)), in_channels[i], cfg.channels, 1));
    smooth_.push_back(ConvBnRelu<T>::make(pb.scope("smooth." + std::to_string(i)), cfg.channels, cfg.channels, 3,
                                          kReplicate));
  }
  fuse_ = ConvBnRelu<T>::make(pb.scope("fuse"), 4 * cfg.channels, cfg.channels, 3, kReplicate);
  classifier_ = Conv2d<T>::make(pb.scope("classifier"), cfg.channels, cfg.num_classes, 1, 1, true);
}

template <typename T>
Tensor<T> UperNetDecoder<T>::operator()(const FeaturePyramid<T>& fused, std::int64_t out_h, std::int64_t out_w,
                                        bool training) const {
  check_pyramid(fused, "decoder");
  std::vector<Tensor<T>> nodes(4);
  nodes[3] = ppm_(fused[3], training);
  for (int i = 2; i >= 0; --i) {
    const auto& lat = laterals_[static_cast<std::size_t>(i)](fused[static_cast<std::size_t>(i)], training);
    nodes[static_cast<std::size_t>(i)] =
        ops::add(lat, ops::resize_bilinear(nodes[static_cast<std::size_t>(i) + 1], static_cast<int>(lat.dim(2)),
                                           static_cast<int>(lat.dim(3))));
  }
  const auto h1 = static_cast<int>(fused[0].dim(2)), w1 = static_cast<int>(fused[0].dim(3));
  std::vector<Tensor<T>> outs;
  for (std::size_t i = 0; i < 3; ++i) outs.push_back(ops::resize_bilinear(smooth_[i](nodes[i], training), h1, w1));
  outs.push_back(ops::resize_bilinear(nodes[3], h1, w1));
  auto logits = classifier_(fuse_(ops::concat(outs, 1), training));
  return ops::resize_bilinear(logits, static_cast<int>(out_h), static_cast<int>(out_w));
}

template class PyramidPooling<float>;
template class PyramidPooling<double>;
template class UperNetDecoder<float>;
template class UperNetDecoder<double>;

}  // namespace cafe
