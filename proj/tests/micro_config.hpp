#pragma once

#include "cafe/model.hpp"

namespace cafe::testing {

// Smallest configuration that exercises every module; inputs are 32x32.
inline ModelConfig micro_config() {
  ModelConfig cfg;
  cfg.backbone.embed_dim = 16;
  cfg.backbone.depth = 4;
  cfg.backbone.num_heads = 2;
  cfg.backbone.patch_size = 8;
  cfg.backbone.adapter_bottleneck = 4;
  cfg.cnn.stage_widths = {4, 4, 8, 8};
  cfg.cnn.cam_reduction = 2;
  cfg.cnn.cam_kernel = 3;
  cfg.decoder.channels = 4;
  cfg.decoder.ppm_scales = {1, 2};
  return cfg;
}

}  // namespace cafe::testing
