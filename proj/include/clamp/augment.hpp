#pragma once

#include <cstdint>
#include <vector>

#include <opencv2/core.hpp>

#include "clamp/rng.hpp"
#include "clamp/schema.hpp"

namespace clamp {

/// Row-major 2x3 affine map on pixel coordinates.
struct Affine2D {
    double a = 1, b = 0, c = 0;
    double d = 0, e = 1, f = 0;

    double apply_x(double x, double y) const { return a * x + b * y + c; }
    double apply_y(double x, double y) const { return d * x + e * y + f; }
    /// this ∘ other (other applied first)
    Affine2D then_after(const Affine2D& other) const;
    Affine2D inverse() const;
    cv::Mat to_cv() const;
};

struct AugmentConfig {
    bool enabled = true;
    double flip_prob = 0.5;
    double max_rotation_deg = 40.0;
    double scale_min = 0.5;
    double scale_max = 1.5;
    std::uint64_t seed = 0;
};

/// One concrete draw of the augmentation parameters.
struct AugmentParams {
    bool flip = false;
    double rotation_deg = 0.0;
    /// Box size multiplier; > 1 zooms out.
    double scale = 1.0;

    static AugmentParams identity() { return {}; }
};

AugmentParams sample_augment(const AugmentConfig& config, Rng& rng);

/// Maps image pixels to the output window: the box (aspect-padded to the
/// window) is scaled onto the window, rotated about the window centre and
/// optionally mirrored (x -> out_w - 1 - x).
Affine2D crop_transform(const BoundingBox& box, int out_h, int out_w, const AugmentParams& params);

struct CropResult {
    cv::Mat pixels;                  // out_h x out_w, same type as the source image
    std::vector<Keypoint> keypoints; // window coordinates, schema channel order
    Affine2D transform;
};

/// Top-down instance crop. Keypoints follow the same affine; a flip also
/// swaps left/right channels per the schema; labeled keypoints that land
/// outside the window become v = 0.
CropResult crop_instance(const InstanceRecord& record, const cv::Mat& image, int out_h, int out_w,
                         const AugmentParams& params, const KeypointSchema& schema);

std::vector<Keypoint> transform_keypoints(const std::vector<Keypoint>& keypoints, const Affine2D& t,
                                          bool flip, const KeypointSchema& schema, int out_h, int out_w);

}  // namespace clamp
