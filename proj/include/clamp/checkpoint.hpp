#pragma once

#include <filesystem>
#include <map>
#include <string>

#include <json.hpp>

#include "clamp/model.hpp"

namespace clamp {

inline constexpr std::uint32_t kCheckpointVersion = 1;

/// Binary layout: the 8 bytes "CLAMPCKP", a little-endian u32 format
/// version, a u64 header length, a JSON header (model configuration,
/// tensor table, free-form metadata), then float64 tensor data.
struct CheckpointData {
    std::uint32_t version = kCheckpointVersion;
    ModelConfig config;
    nlohmann::json meta;
    std::map<std::string, Tensor> tensors;
};

/// Writes all parameters and buffers atomically (temporary file + rename).
void save_checkpoint(const std::filesystem::path& path, const ClampModel& model, const nlohmann::json& meta = {});

CheckpointData read_checkpoint(const std::filesystem::path& path);

/// Copies the stored state into `model`. Throws ConfigMismatchError when
/// the stored configuration (keypoints, embedding width, layout) differs.
void apply_checkpoint(const CheckpointData& data, ClampModel& model);

/// Float tensors of a .safetensors file (F16, BF16, F32, F64) as float64.
std::map<std::string, Tensor> read_safetensors(const std::filesystem::path& path);

struct WeightLoadReport {
    std::vector<std::string> loaded;
    std::vector<std::string> unused;   // source names with no destination
    std::vector<std::string> missing;  // model parameters left at init
};

/// Maps released CLIP parameter names onto the model: visual.* to the
/// image encoder and projector (positional embeddings resampled to the
/// model grid), text tower names to the text encoder.
WeightLoadReport load_clip_weights(ClampModel& model, const std::map<std::string, Tensor>& weights);

}  // namespace clamp
