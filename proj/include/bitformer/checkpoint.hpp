// SPDX-License-Identifier: Apache-2.0
//
// Binary checkpoint: "BPFT" | u32 version | u64 blob length | blob |
// u32 tensor count | per tensor (u32 name length, name, u32 rank, u64 dims…,
// f32 payload) | u64 FNV-1a over every preceding byte. Little-endian.
// The blob is the canonical config text, optionally followed by a "[vocab]"
// line and one vocabulary token per line.
#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "bitformer/model.hpp"

namespace bitformer {

inline constexpr std::uint32_t kCheckpointVersion = 1;

std::vector<std::uint8_t> serialize_checkpoint(const Model& model, const std::vector<std::string>& vocab = {});
void save_checkpoint(const Model& model, const std::filesystem::path& path,
                     const std::vector<std::string>& vocab = {});

struct LoadedCheckpoint {
  Model model;
  std::vector<std::string> vocab;
};

/// Rebuilds the model from the stored config. With `expected`, the stored
/// tensors are loaded into a model built from that config instead; tensors it
/// needs but the file lacks raise SchemaError naming them.
LoadedCheckpoint deserialize_checkpoint(const std::vector<std::uint8_t>& bytes,
                                        const std::optional<ModelConfig>& expected = std::nullopt);
LoadedCheckpoint load_checkpoint(const std::filesystem::path& path,
                                 const std::optional<ModelConfig>& expected = std::nullopt);

/// Config stored in a checkpoint, without loading tensors.
ModelConfig peek_checkpoint_config(const std::filesystem::path& path);

/// Copies every tensor whose name and shape match into `model` (latent-weight
/// initialization from a full-precision checkpoint). Returns the count copied.
std::size_t init_from_checkpoint(Model& model, const std::filesystem::path& path);

std::uint64_t fnv1a64(const std::uint8_t* data, std::size_t n);

}  // namespace bitformer
