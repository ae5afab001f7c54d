#pragma once

// Full segmentation model: channel split, adapted ViT + neck in parallel
// with the CNN branch, pyramid fusion, UperNet head.

#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "cafe/adapted_vit.hpp"
#include "cafe/channel_router.hpp"
#include "cafe/cnn_cam.hpp"
#include "cafe/fusion.hpp"
#include "cafe/upernet.hpp"

namespace cafe {

/// Module toggles for ablations. `cnn` false removes the CNN branch and the
/// fusion stage entirely; the decoder then reads the transformer pyramid.
struct AblationFlags {
  bool adapters = true;
  bool residual = true;
  bool cam = true;
  bool m2faf = true;
  bool cnn = true;

  bool operator==(const AblationFlags&) const = default;
};

struct ModelConfig {
  ChannelSplitConfig channels;
  BackboneConfig backbone;
  NeckConfig neck;
  CnnConfig cnn;
  FusionConfig fusion;
  DecoderConfig decoder;
  AblationFlags ablation;

  /// Derives the CNN input width from the channel split.
  ModelConfig resolved() const;
};

/// Every cross-module consistency violation, empty when buildable.
std::vector<std::string> validate(const ModelConfig& cfg);

/// Paper-scale dimensions: d=1280, L=32, 16 heads, p=16, r=32, CNN widths
/// 128..1024, decoder 256 channels, PPM [1,2,3,6].
ModelConfig paper_scale_config();
/// Desk-scale dimensions used by the tests and example configs.
ModelConfig toy_config();

struct InventoryRow {
  std::string component;
  std::int64_t parameters = 0;
  bool trainable = false;
};

struct Inventory {
  std::vector<InventoryRow> rows;
  std::int64_t adapter_per_block = 0;
  std::int64_t total = 0;
  std::int64_t trainable = 0;
};

template <typename T>
struct ModelFeatures {
  std::vector<Tensor<T>> taps;      // 4 x [B, N, d]
  FeaturePyramid<T> ap;             // neck output
  FeaturePyramid<T> cnn;            // empty without the CNN branch
  FeaturePyramid<T> fused;          // decoder input
  std::vector<Tensor<T>> attention; // attn' per level when attention fusion is on
};

template <typename T>
class Model {
 public:
  /// Builds and initializes from `seed`. Each component draws from its own
  /// seeded stream, so ablations share the weights of the parts they keep.
  /// With `meta` true no storage is allocated (shape checks and inventory).
  Model(const ModelConfig& cfg, std::uint64_t seed, bool meta = false);
  Model(const Model&) = delete;
  Model& operator=(const Model&) = delete;

  const ModelConfig& config() const { return cfg_; }
  ParameterStore<T>& store() { return store_; }
  const ParameterStore<T>& store() const { return store_; }
  const AdaptedViT<T>& backbone() const { return *vit_; }

  /// Logits [B, K, H, W] for an input [B, C, H, W].
  Tensor<T> forward(const Tensor<T>& image, bool training) const;
  ModelFeatures<T> features(const Tensor<T>& image, bool training) const;

  Inventory inventory() const;

  void set_beta(double beta);

  /// Checks H and W against lcm(patch, 16).
  void check_input(const Tensor<T>& image) const;

 private:
  ModelConfig cfg_;
  ParameterStore<T> store_;
  std::vector<std::unique_ptr<std::mt19937_64>> rngs_;
  std::optional<AdaptedViT<T>> vit_;
  std::optional<FpnNeck<T>> neck_;
  std::optional<CnnBackbone<T>> cnn_;
  std::optional<Fusion<T>> fusion_;
  std::optional<UperNetDecoder<T>> decoder_;
};

}  // namespace cafe
