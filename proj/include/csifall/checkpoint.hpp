#pragma once

// Checkpoint archive: "CSFK" | u32 version | u64 config length + config JSON |
// u32 tensor count | per tensor: u16 name length + name, u8 ndim, u32 dims, f32 LE data.

#include <filesystem>

#include "csifall/model.hpp"

namespace csifall {

inline constexpr std::uint32_t kCheckpointVersion = 1;

void save_checkpoint(const FallDetector& model, const std::filesystem::path& path);

// Builds a model from the stored config and fills every parameter.
FallDetector load_checkpoint(const std::filesystem::path& path);

// Fills an existing model; the stored config must equal the model's and every tensor
// must match by name and shape.
void load_checkpoint_into(FallDetector& model, const std::filesystem::path& path);

// Copies every "backbone." tensor of a checkpoint-format weight file into the model.
// Returns the number of tensors copied.
int load_pretrained_backbone(FallDetector& model, const std::filesystem::path& path);

// Fresh model; when config.pretrained is set the backbone is initialised from
// config.pretrained_path (a missing path is a ConfigError).
FallDetector make_model(const ModelConfig& config, std::uint64_t seed);

// Rounds every parameter to float precision, the precision checkpoints store.
void quantize_to_f32(FallDetector& model);

}  // namespace csifall
