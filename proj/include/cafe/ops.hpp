#pragma once

// Differentiable tensor operations. Image tensors are NCHW, token tensors
// are [batch, tokens, features]. Every op accepts meta inputs and then
// returns a meta output after validating shapes.

#include <vector>

#include "cafe/tensor.hpp"

namespace cafe::ops {

enum class PadMode { zeros, replicate };

// Elementwise with numpy-style broadcasting.
template <typename T> Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b);
template <typename T> Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b);
template <typename T> Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b);

/// y = scale * x + shift
template <typename T> Tensor<T> affine(const Tensor<T>& x, T scale, T shift);

template <typename T> Tensor<T> relu(const Tensor<T>& x);
/// Exact (erf) GELU.
template <typename T> Tensor<T> gelu(const Tensor<T>& x);
template <typename T> Tensor<T> sigmoid(const Tensor<T>& x);

template <typename T> Tensor<T> sum(const Tensor<T>& x);
template <typename T> Tensor<T> mean(const Tensor<T>& x);

/// x[..., in] * w[in, out] + bias[out]; bias may be undefined.
template <typename T>
Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& bias);

/// Normalizes over the last dimension.
template <typename T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta,
                     T eps = T(1e-6));

/// Multi-head self-attention core. qkv is [B, N, 3d] laid out as q|k|v;
/// returns softmax(q k^T / sqrt(d/heads)) v as [B, N, d].
template <typename T> Tensor<T> attention(const Tensor<T>& qkv, int heads);

/// 2D cross-correlation; w is [Cout, Cin, k, k]; bias may be undefined.
template <typename T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& bias, int stride,
                 int pad, PadMode mode = PadMode::zeros);

/// Transposed convolution, kernel 2, stride 2, no padding; w is [Cin, Cout, 2, 2].
template <typename T>
Tensor<T> conv_transpose2x2(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& bias);

/// Batch normalization over N,H,W per channel. In training mode batch
/// statistics are used and the running buffers are updated in place.
template <typename T>
Tensor<T> batch_norm(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta,
                     Tensor<T>& running_mean, Tensor<T>& running_var, bool training,
                     T momentum = T(0.1), T eps = T(1e-5));

/// [B,C,H,W] -> [B,C,1,1]
template <typename T> Tensor<T> global_avg_pool(const Tensor<T>& x);
template <typename T> Tensor<T> global_max_pool(const Tensor<T>& x);
/// [B,C,H,W] -> [B,1,H,W]
template <typename T> Tensor<T> channel_mean(const Tensor<T>& x);
template <typename T> Tensor<T> channel_max(const Tensor<T>& x);

/// Adaptive average pooling to size x size (PyTorch bin boundaries).
template <typename T> Tensor<T> adaptive_avg_pool(const Tensor<T>& x, int size);

/// Bilinear resize with half-pixel centers (align_corners = false).
template <typename T> Tensor<T> resize_bilinear(const Tensor<T>& x, int out_h, int out_w);

template <typename T> Tensor<T> concat(const std::vector<Tensor<T>>& xs, int dim);
template <typename T> Tensor<T> slice(const Tensor<T>& x, int dim, std::int64_t begin, std::int64_t end);
/// Gathers dim-1 slices at `indices`, in the given order.
template <typename T>
Tensor<T> gather_channels(const Tensor<T>& x, const std::vector<int>& indices);

template <typename T> Tensor<T> reshape(const Tensor<T>& x, const Shape& shape);
/// [B, A, C] -> [B, C, A]
template <typename T> Tensor<T> transpose_last2(const Tensor<T>& x);

/// out = gate * a + (1 - gate) * b. gate broadcasts over channels when it
/// has a single channel.
template <typename T>
Tensor<T> blend(const Tensor<T>& gate, const Tensor<T>& a, const Tensor<T>& b);

/// Mean softmax cross-entropy over pixels whose target != ignore.
/// logits [B,K,H,W], targets B*H*W labels. When every pixel is ignored the
/// loss is 0 and `all_ignored` (if given) is set.
template <typename T>
Tensor<T> cross_entropy(const Tensor<T>& logits, const std::vector<int>& targets, int ignore,
                        bool* all_ignored = nullptr);

}  // namespace cafe::ops
