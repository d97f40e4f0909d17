#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include <json.hpp>

#include "clamp/adaptation.hpp"
#include "clamp/augment.hpp"
#include "clamp/model.hpp"

namespace clamp {

struct TrainConfig {
    int epochs = 210;
    double lr = 5e-4;
    std::vector<int> lr_decay_epochs = {170, 200};
    double lr_decay_factor = 0.1;
    double weight_decay = 1e-4;
    int batch_size = 64;
    double backbone_lr_mult = 1.0;
    std::uint64_t seed = 0;
    LossWeights loss_weights;
    AugmentConfig augment;
    int checkpoint_every = 10;
    /// Stop after this many optimizer steps (0 = run every epoch).
    int max_steps = 0;

    /// Throws ConfigMismatchError on the first violated constraint.
    void validate() const;
};

struct DataConfig {
    std::string annotations;
    std::string image_root;
    /// Optional manifest of annotation ids restricting the training set.
    std::string manifest;
    std::string val_annotations;
    std::string val_image_root;
    std::string val_manifest;
    int fewshot_per_species = 20;
    std::vector<std::string> zeroshot_train_families;
    std::vector<std::string> zeroshot_test_families;
};

struct RunConfig {
    ModelConfig model;
    TrainConfig train;
    DataConfig data;
    /// Full-network pretrained weights (CLIP safetensors) and their kind.
    std::string pretrained;
};

using nlohmann::json;

json to_json(const KeypointSchema& s);
KeypointSchema schema_from_json(const json& j);
json to_json(const ModelConfig& c);
ModelConfig model_config_from_json(const json& j);
json to_json(const TrainConfig& c);
TrainConfig train_config_from_json(const json& j);
DataConfig data_config_from_json(const json& j);
json to_json(const RunConfig& c);
RunConfig run_config_from_json(const json& j);

/// Applies `key=value` with a dotted key to `doc`. The key must already
/// exist; the value is parsed as JSON and otherwise taken as a string.
void apply_override(json& doc, const std::string& assignment);

/// `"schema": "dataset"` takes the keypoint list from the annotation file.
inline constexpr const char* kDatasetSchema = "dataset";

/// Defaults, then the file (if any), then overrides. Keys unknown to the
/// defaults are rejected with ConfigMismatchError.
json load_run_config_json(const std::filesystem::path& path, const std::vector<std::string>& overrides);
RunConfig load_run_config(const std::filesystem::path& path, const std::vector<std::string>& overrides);

bool uses_dataset_schema(const json& doc);
/// Replaces a "dataset" model schema with `schema`; other values are kept.
void resolve_dataset_schema(json& doc, const KeypointSchema& schema);

}  // namespace clamp
