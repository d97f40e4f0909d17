#pragma once

#include <cstdint>
#include <filesystem>

#include "clamp/data.hpp"
#include "clamp/schema.hpp"

namespace clamp {

/// Images of coloured discs on a noisy grey background; keypoint n is the
/// centre of disc n.
struct BlobOptions {
    int count = 8;
    int size = 256;
    int num_keypoints = 5;
    int radius = 7;
    std::uint64_t seed = 0;
};

KeypointSchema blob_schema(int num_keypoints);

/// Generates the dataset in memory; images are registered in `cache` under
/// "synthetic://<seed>/<index>".
DatasetSplit make_blob_dataset(const BlobOptions& options, ImageCache& cache);

/// Writes PNG files and a COCO keypoint annotation file (annotations.json)
/// into `dir`; returns the annotation path.
std::filesystem::path write_blob_dataset(const BlobOptions& options, const std::filesystem::path& dir);

}  // namespace clamp
