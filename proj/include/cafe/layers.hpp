#pragma once

// Thin parameter holders around the ops. Construction registers weights in
// a ParameterStore through a ParamBuilder; forward calls are const.

#include <cmath>

#include "cafe/ops.hpp"
#include "cafe/param_store.hpp"

namespace cafe {

/// Uniform(+-1/sqrt(fan_in)), the usual default for conv and linear layers.
inline Init fan_in_uniform(std::int64_t fan_in) { return Init::uniform(1.0 / std::sqrt(static_cast<double>(fan_in))); }

template <typename T>
struct Linear {
  Tensor<T> w;  // [in, out]
  Tensor<T> b;

  static Linear make(const ParamBuilder<T>& pb, std::int64_t in, std::int64_t out, bool bias = true) {
    return make(pb, in, out, bias, fan_in_uniform(in), fan_in_uniform(in));
  }
  static Linear make(const ParamBuilder<T>& pb, std::int64_t in, std::int64_t out, bool bias, Init w_init,
                     Init b_init) {
    Linear l;
    l.w = pb.param("weight", {in, out}, w_init);
    if (bias) l.b = pb.param("bias", {out}, b_init);
    return l;
  }
  Tensor<T> operator()(const Tensor<T>& x) const { return ops::linear(x, w, b); }
};

template <typename T>
struct LayerNorm {
  Tensor<T> gamma, beta;

  static LayerNorm make(const ParamBuilder<T>& pb, std::int64_t dim) {
    return {pb.param("weight", {dim}, Init::ones()), pb.param("bias", {dim}, Init::zeros())};
  }
  Tensor<T> operator()(const Tensor<T>& x) const { return ops::layer_norm(x, gamma, beta); }
};

template <typename T>
struct Conv2d {
  Tensor<T> w;  // [out, in, k, k]
  Tensor<T> b;
  int stride = 1;
  int pad = 0;
  ops::PadMode mode = ops::PadMode::zeros;

  static Conv2d make(const ParamBuilder<T>& pb, std::int64_t in, std::int64_t out, int k, int stride, bool bias,
                     ops::PadMode mode = ops::PadMode::zeros) {
    const auto fan_in = in * k * k;
    Conv2d c;
    c.w = pb.param("weight", {out, in, k, k}, fan_in_uniform(fan_in));
    if (bias) c.b = pb.param("bias", {out}, fan_in_uniform(fan_in));
    c.stride = stride;
    c.pad = k / 2;
    c.mode = mode;
    return c;
  }
  static Conv2d zeros(const ParamBuilder<T>& pb, std::int64_t in, std::int64_t out, int k, bool bias,
                      ops::PadMode mode = ops::PadMode::zeros) {
    Conv2d c;
    c.w = pb.param("weight", {out, in, k, k}, Init::zeros());
    if (bias) c.b = pb.param("bias", {out}, Init::zeros());
    c.pad = k / 2;
    c.mode = mode;
    return c;
  }
  Tensor<T> operator()(const Tensor<T>& x) const { return ops::conv2d(x, w, b, stride, pad, mode); }
};

template <typename T>
struct ConvTranspose2x2 {
  Tensor<T> w;  // [in, out, 2, 2]
  Tensor<T> b;

  static ConvTranspose2x2 make(const ParamBuilder<T>& pb, std::int64_t in, std::int64_t out, bool bias) {
    const auto fan_in = out * 4;
    ConvTranspose2x2 c;
    c.w = pb.param("weight", {in, out, 2, 2}, fan_in_uniform(fan_in));
    if (bias) c.b = pb.param("bias", {out}, fan_in_uniform(fan_in));
    return c;
  }
  Tensor<T> operator()(const Tensor<T>& x) const { return ops::conv_transpose2x2(x, w, b); }
};

template <typename T>
struct BatchNorm2d {
  Tensor<T> gamma, beta;
  mutable Tensor<T> running_mean, running_var;

  static BatchNorm2d make(const ParamBuilder<T>& pb, std::int64_t channels) {
    BatchNorm2d n;
    n.gamma = pb.param("weight", {channels}, Init::ones());
    n.beta = pb.param("bias", {channels}, Init::zeros());
    n.running_mean = pb.buffer("running_mean", {channels}, T(0));
    n.running_var = pb.buffer("running_var", {channels}, T(1));
    return n;
  }
  Tensor<T> operator()(const Tensor<T>& x, bool training) const {
    return ops::batch_norm(x, gamma, beta, running_mean, running_var, training);
  }
};

/// conv -> batch norm -> ReLU, the common decoder/neck unit.
template <typename T>
struct ConvBnRelu {
  Conv2d<T> conv;
  BatchNorm2d<T> bn;

  static ConvBnRelu make(const ParamBuilder<T>& pb, std::int64_t in, std::int64_t out, int k,
                         ops::PadMode mode = ops::PadMode::zeros) {
    return {Conv2d<T>::make(pb.scope("conv"), in, out, k, 1, false, mode), BatchNorm2d<T>::make(pb.scope("bn"), out)};
  }
  Tensor<T> operator()(const Tensor<T>& x, bool training) const { return ops::relu(bn(conv(x), training)); }
};

}  // namespace cafe
