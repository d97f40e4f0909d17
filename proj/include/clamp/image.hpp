#pragma once

#include <filesystem>
#include <span>

#include <opencv2/core.hpp>

#include "clamp/tensor.hpp"

namespace clamp {

/// Loads an 8-bit BGR image; throws InputError when unreadable.
cv::Mat load_image(const std::filesystem::path& path);

/// CLIP pixel statistics (RGB order).
inline constexpr double kClipMean[3] = {0.48145466, 0.4578275, 0.40821073};
inline constexpr double kClipStd[3] = {0.26862954, 0.26130258, 0.27577711};

/// 8-bit BGR image to a normalised [3, H, W] RGB tensor.
Tensor image_to_tensor(const cv::Mat& bgr);

/// Stacks [3, H, W] tensors into [B, 3, H, W].
Tensor stack_images(std::span<const Tensor> images);

}  // namespace clamp
