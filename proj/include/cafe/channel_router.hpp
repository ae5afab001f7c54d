#pragma once

#include <string>
#include <utility>
#include <vector>

#include "cafe/tensor.hpp"

namespace cafe {

/// Partition of the input channel stack between the transformer and CNN
/// branches. Indices are 0-based over the ingested stack.
struct ChannelSplitConfig {
  int total_channels = 13;
  std::vector<int> transformer_indices{1, 2, 3, 7, 11, 12};

  /// Complement of transformer_indices in ascending order.
  std::vector<int> cnn_indices() const;
};

/// All invariant violations; empty when the config is valid. When
/// `expected_transformer` is positive the transformer subset must have
/// exactly that many channels.
std::vector<std::string> validate(const ChannelSplitConfig& cfg, int expected_transformer = 0);

/// Throws ConfigError listing every violation.
void require_valid(const ChannelSplitConfig& cfg, int expected_transformer = 0);

/// Splits [B,C,H,W] into (x_ap, x_cnn). Differentiable gather; no values
/// are altered.
template <typename T>
std::pair<Tensor<T>, Tensor<T>> split(const Tensor<T>& image, const ChannelSplitConfig& cfg);

}  // namespace cafe
