#pragma once

#include <string>
#include <vector>

#include <opencv2/core.hpp>

#include "clamp/heatmap.hpp"
#include "clamp/schema.hpp"
#include "clamp/tensor.hpp"

namespace clamp::render {

/// Score plane [h, w] upsampled to the crop, min-max scaled, coloured with
/// viridis and alpha-blended so brighter, more opaque pixels mean higher
/// scores.
cv::Mat score_overlay(const cv::Mat& crop, const Tensor& plane, const std::string& title);

/// Bones of the schema skeleton and one dot per keypoint; ground truth,
/// when given, is drawn as small crosses.
cv::Mat skeleton(const cv::Mat& crop, const std::vector<Point2>& joints, const KeypointSchema& schema,
                 const std::vector<Keypoint>* ground_truth = nullptr);

/// N x N heat grid of a match matrix, rows labelled with keypoint features
/// and columns with prompts.
cv::Mat match_grid(const Tensor& matrix, const std::vector<std::string>& names);

}  // namespace clamp::render
