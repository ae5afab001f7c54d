#pragma once

// ViT trunk with a residual bottleneck adapter in front of every block:
//
//   f(x) = act(W2 act(W1 x + b1) + b2)
//   y    = blk(x + f(x))
//
// Trunk weights (patch embedding, class token, blocks) are registered as
// frozen; adapters are trainable. W2 and b2 start at zero, so at
// initialization the adapted trunk computes exactly what the plain trunk
// computes.

#include <optional>
#include <string>
#include <vector>

#include "cafe/layers.hpp"

namespace cafe {

enum class Activation { gelu, relu };

Activation parse_activation(const std::string& name);
std::string to_string(Activation a);

struct BackboneConfig {
  int embed_dim = 64;
  int depth = 8;
  int num_heads = 4;
  int patch_size = 16;
  int in_channels = 6;
  int mlp_ratio = 4;
  /// Empty means default_taps(depth).
  std::vector<int> tap_layers;
  int adapter_bottleneck = 16;
  bool use_class_token = false;
  Activation adapter_activation = Activation::gelu;

  std::vector<int> taps() const;
};

/// {ceil(L/4)-1, ceil(L/2)-1, ceil(3L/4)-1, L-1}
std::vector<int> default_taps(int depth);

std::vector<std::string> validate(const BackboneConfig& cfg);

/// d*r + r + r*d + d
std::int64_t adapter_parameter_count(std::int64_t d, std::int64_t r);

template <typename T>
Tensor<T> apply_activation(const Tensor<T>& x, Activation a) {
  return a == Activation::gelu ? ops::gelu(x) : ops::relu(x);
}

template <typename T>
struct AdapterWeights {
  Linear<T> down;  // W1 [d, r], b1 [r]
  Linear<T> up;    // W2 [r, d], b2 [d]
  Activation act = Activation::gelu;

  static AdapterWeights make(const ParamBuilder<T>& pb, std::int64_t d, std::int64_t r, Activation act);
};

/// Low-rank perturbation; x is [..., d].
template <typename T>
Tensor<T> adapter_forward(const Tensor<T>& x, const AdapterWeights<T>& w);

/// Pre-norm transformer block: x + attn(ln1 x), then + mlp(ln2 x).
template <typename T>
struct VitBlock {
  LayerNorm<T> norm1;
  Linear<T> qkv;
  Linear<T> proj;
  LayerNorm<T> norm2;
  Linear<T> fc1;
  Linear<T> fc2;
  int heads = 1;

  static VitBlock make(const ParamBuilder<T>& pb, int d, int heads, int mlp_ratio);
  Tensor<T> operator()(const Tensor<T>& x) const;
};

/// blk(x + f_adapter(x)); a null adapter gives blk(x).
template <typename T>
Tensor<T> adapted_block_forward(const Tensor<T>& x, const VitBlock<T>& block, const AdapterWeights<T>* adapter);

/// Fixed 2D sine-cosine position table for an h x w patch grid, [1, h*w, d].
/// Requires d % 4 == 0.
template <typename T>
Tensor<T> sincos_position_table(int d, int h, int w);

/// [B, N, d] -> [B, d, h, w]; token i*w + j lands at (i, j).
template <typename T>
Tensor<T> token_to_image(const Tensor<T>& tokens, int h, int w);

/// Inverse of token_to_image.
template <typename T>
Tensor<T> image_to_tokens(const Tensor<T>& image);

template <typename T>
class AdaptedViT {
 public:
  /// Trunk entries go under `trunk`, adapters under `adapters`. Pass no
  /// adapter builder to build the trunk alone.
  AdaptedViT(const BackboneConfig& cfg, const ParamBuilder<T>& trunk,
             const std::optional<ParamBuilder<T>>& adapters);

  const BackboneConfig& config() const { return cfg_; }
  bool has_adapters() const { return !adapters_.empty(); }
  const AdapterWeights<T>& adapter(int i) const { return adapters_.at(static_cast<std::size_t>(i)); }

  /// Patch-grid size for an input of h x w pixels; throws ShapeError when
  /// the patch size does not divide it.
  std::pair<int, int> grid(std::int64_t h, std::int64_t w) const;

  /// Token features at the tap layers, class token removed: 4 x [B, N, d].
  /// With use_adapters false the plain trunk is evaluated.
  std::vector<Tensor<T>> forward_features(const Tensor<T>& x_ap, bool use_adapters = true) const;

 private:
  BackboneConfig cfg_;
  Conv2d<T> patch_embed_;
  Tensor<T> cls_token_;
  std::vector<VitBlock<T>> blocks_;
  std::vector<AdapterWeights<T>> adapters_;
};

}  // namespace cafe
