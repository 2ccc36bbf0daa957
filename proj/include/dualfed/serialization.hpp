// Copyright 2026 The dualfed Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "dualfed/lora.hpp"
#include "dualfed/numerics.hpp"

namespace dualfed {

using Bytes = std::vector<std::uint8_t>;

// Little-endian layouts:
//   LoRA delta set:  u32 magic, u32 version, u32 count, then per matrix
//                    u32 rows, u32 cols, rows*cols f64 (row-major)
//   embedding batch: u32 count, u32 dim, count x u32 labels,
//                    count*dim f64 (one embedding after another)
inline constexpr std::uint32_t kLoraMagic = 0x524F4C44;  // "DLOR"
inline constexpr std::uint32_t kLoraVersion = 1;

struct EmbeddingBatch {
  Matrix embeddings;  // dim x count
  std::vector<int> labels;

  std::size_t size() const { return labels.size(); }
};

Bytes serialize_lora(const LoraDelta& delta);
// Throws IoError on truncated or malformed input.
LoraDelta deserialize_lora(const Bytes& bytes);

Bytes serialize_embeddings(const EmbeddingBatch& batch);
EmbeddingBatch deserialize_embeddings(const Bytes& bytes);

Bytes serialize_scalar(double value);
double deserialize_scalar(const Bytes& bytes);

void write_file(const std::string& path, const Bytes& bytes);
Bytes read_file(const std::string& path);

}  // namespace dualfed
