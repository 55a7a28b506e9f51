#pragma once

#include <string>

#include "rigidreg/regnet.hpp"

namespace rigidreg {

// Model checkpoint, little-endian:
//   magic "3DRN", u32 version = 1, u8 config count;
//   per config: u32 blocks, width, conv_channels, conv_kh, conv_kw,
//               conv_stride_row, conv_stride_col, head_hidden,
//               u8 rotation, u8 head, f32 weight_threshold;
//   u32 tensor count; per tensor: u32 name length + bytes, u32 rank,
//               u32 dims..., float32 payload.
// Loading validates every tensor shape against the embedded configs and
// reports the offending tensor by name.
void save_checkpoint(const std::string& path, const ModelParams& params);
ModelParams load_checkpoint(const std::string& path);

}  // namespace rigidreg
