#include "cafe/channel_router.hpp"

#include <algorithm>
#include <set>
#include <sstream>

#include "cafe/ops.hpp"

namespace cafe {

std::vector<int> ChannelSplitConfig::cnn_indices() const {
  std::vector<int> out;
  const std::set<int> ap(transformer_indices.begin(), transformer_indices.end());
  for (int c = 0; c < total_channels; ++c)
    if (!ap.count(c)) out.push_back(c);
  return out;
}

std::vector<std::string> validate(const ChannelSplitConfig& cfg, int expected_transformer) {
  std::vector<std::string> errors;
  if (cfg.total_channels <= 0) errors.push_back("channels.total must be positive");
  if (cfg.transformer_indices.empty()) errors.push_back("channels.transformer must not be empty");
  std::set<int> seen;
  for (int i : cfg.transformer_indices) {
    if (i < 0 || i >= cfg.total_channels)
      errors.push_back("channel index " + std::to_string(i) + " out of range [0, " +
                       std::to_string(cfg.total_channels) + ")");
    if (!seen.insert(i).second) errors.push_back("duplicate channel index " + std::to_string(i));
  }
  if (cfg.total_channels > 0 && cfg.cnn_indices().empty()) errors.push_back("CNN channel subset is empty");
  if (expected_transformer > 0 && static_cast<int>(seen.size()) != expected_transformer)
    errors.push_back("transformer subset has " + std::to_string(seen.size()) + " channels, backbone expects " +
                     std::to_string(expected_transformer));
  return errors;
}

void require_valid(const ChannelSplitConfig& cfg, int expected_transformer) {
  const auto errors = validate(cfg, expected_transformer);
  if (errors.empty()) return;
  std::ostringstream os;
  os << "invalid channel split:";
  for (const auto& e : errors) os << "\n  " << e;
  throw ConfigError(os.str());
}

template <typename T>
std::pair<Tensor<T>, Tensor<T>> split(const Tensor<T>& image, const ChannelSplitConfig& cfg) {
  require_valid(cfg);
  if (image.rank() != 4) throw_shape("split expects [B,C,H,W], got " + to_string(image.shape()));
  if (image.dim(1) != cfg.total_channels)
    throw ConfigError("input has " + std::to_string(image.dim(1)) + " channels, config expects " +
                      std::to_string(cfg.total_channels));
  return {ops::gather_channels(image, cfg.transformer_indices), ops::gather_channels(image, cfg.cnn_indices())};
}

template std::pair<Tensorf, Tensorf> split(const Tensorf&, const ChannelSplitConfig&);
template std::pair<Tensord, Tensord> split(const Tensord&, const ChannelSplitConfig&);

}  // namespace cafe
