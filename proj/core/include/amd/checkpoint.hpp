// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <string>
#include <utility>
#include <vector>

#include "amd/model.hpp"
#include "amd/optim.hpp"

namespace amd {

// Single-file container for model weights and structural masks.
//
//   bytes 0..3   magic "AMDC"
//   bytes 4..7   format version, u32 little-endian (currently 1)
//   bytes 8..11  header length H, u32 little-endian
//   H bytes      UTF-8 JSON header: model config plus a directory of tensors
//                (name, shape, offset, length) and masks (name, per-layer
//                bit counts, offset, length)
//   rest         payload; offsets in the directory are payload-relative
//
// Tensor payload is raw little-endian float64 in row-major order. Each mask
// is a bitset packed LSB-first, layer by layer with head bits before unit
// bits, zero-padded to a whole byte. The file ends exactly where the
// directory says it does; anything else is reported as corruption.
struct Checkpoint {
  ModelConfig config;
  std::vector<NamedTensor> tensors;
  std::vector<std::pair<std::string, StructuralMask>> masks;

  const Tensor* find(const std::string& name) const;
  const StructuralMask* find_mask(const std::string& name) const;
};

// Writes to a temporary file in the same directory and renames it into
// place, so a crash never leaves a half-written checkpoint behind.
void save_checkpoint(const std::string& path, const Checkpoint& ckpt);

Checkpoint load_checkpoint(const std::string& path);

// Weights-only convenience wrappers.
void save_model(const std::string& path, const MiniViT& model);
MiniViT load_model(const std::string& path);

}  // namespace amd
