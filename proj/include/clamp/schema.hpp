#pragma once

#include <cstdint>
#include <filesystem>
#include <set>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

namespace clamp {

using IndexPair = std::pair<int, int>;

/// Keypoint vocabulary of one dataset.
struct KeypointSchema {
    std::string name;
    std::vector<std::string> keypoint_names;
    std::vector<IndexPair> flip_pairs;
    std::vector<IndexPair> skeleton;
    std::vector<double> oks_sigmas;
    /// Natural-language names filled into the prompts; empty means derived
    /// from keypoint_names (underscores become spaces).
    std::vector<std::string> prompt_names;

    int size() const { return static_cast<int>(keypoint_names.size()); }
    /// Throws SchemaMismatchError describing the first violated invariant.
    void validate() const;
    std::string prompt_text(int index) const;
    int index_of(std::string_view keypoint) const;
    /// Channel permutation applied by a horizontal flip (an involution).
    std::vector<int> flip_permutation() const;

    static KeypointSchema ap10k();
    static KeypointSchema animal_pose();
    /// Schema for an arbitrary name list: flip pairs inferred from
    /// left/right naming, uniform OKS sigma.
    static KeypointSchema from_names(std::string name, std::vector<std::string> names,
                                     double sigma = 0.05);
};

std::vector<IndexPair> infer_flip_pairs(const std::vector<std::string>& names);

/// COCO visibility: 0 unlabeled, 1 labeled but occluded, 2 visible.
struct Keypoint {
    double x = 0.0;
    double y = 0.0;
    int v = 0;

    bool labeled() const { return v > 0; }
};

struct BoundingBox {
    double x = 0.0, y = 0.0, w = 0.0, h = 0.0;
};

struct InstanceRecord {
    std::int64_t id = 0;
    std::int64_t image_id = 0;
    std::string image_path;
    int image_width = 0;
    int image_height = 0;
    BoundingBox bbox;
    std::vector<Keypoint> keypoints;
    std::string species;
    std::string family;
    double area = 0.0;

    int labeled_count() const;
};

enum class SplitKind { supervised, fewshot, zeroshot_train, zeroshot_test };

std::string_view to_string(SplitKind kind);

struct DatasetSplit {
    KeypointSchema schema;
    std::vector<InstanceRecord> records;
    SplitKind kind = SplitKind::supervised;

    std::set<std::string> species() const;
    std::set<std::string> families() const;
    std::vector<std::int64_t> ids() const;
    const InstanceRecord& by_id(std::int64_t id) const;
};

/// Reads a COCO keypoint annotation file. Records come back ordered by
/// annotation id; species is the category name, family its supercategory.
DatasetSplit load_coco_keypoints(const std::filesystem::path& annotation_file,
                                 const std::filesystem::path& image_root);

/// Samples min(per_species, available) records of every species, seeded per
/// (seed, species name). Output is ordered by species, then annotation id.
DatasetSplit build_fewshot_split(const DatasetSplit& full, int per_species, std::uint64_t seed);

std::pair<DatasetSplit, DatasetSplit> build_zeroshot_split(const DatasetSplit& full,
                                                           const std::set<std::string>& train_families,
                                                           const std::set<std::string>& test_families);

/// Manifests are JSON arrays of annotation ids.
void write_manifest(const std::filesystem::path& file, const DatasetSplit& split);
std::vector<std::int64_t> read_manifest(const std::filesystem::path& file);
DatasetSplit select_records(const DatasetSplit& full, const std::vector<std::int64_t>& ids, SplitKind kind);

}  // namespace clamp
