#pragma once

#include <map>
#include <span>
#include <string>
#include <vector>

#include <opencv2/core.hpp>

#include "clamp/augment.hpp"
#include "clamp/model.hpp"
#include "clamp/schema.hpp"

namespace clamp {

/// Loads images on first use and keeps them for the lifetime of the cache.
class ImageCache {
public:
    const cv::Mat& get(const std::string& path);
    /// Registers an in-memory image under `path`.
    void put(const std::string& path, cv::Mat image);

private:
    std::map<std::string, cv::Mat> images_;
};

/// One cropped instance in model input coordinates.
struct Sample {
    Tensor image;  // [3, S, S]
    std::vector<Keypoint> keypoints;
    Affine2D transform;  // original image -> crop
};

Sample prepare_sample(const InstanceRecord& record, const cv::Mat& image, int input_size,
                      const AugmentParams& params, const KeypointSchema& schema);

/// Stacks samples and encodes Gaussian targets at stride 4.
Batch collate(std::span<const Sample> samples, int num_keypoints, int input_size);

}  // namespace clamp
