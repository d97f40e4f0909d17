#pragma once

#include <span>
#include <vector>

#include "clamp/schema.hpp"
#include "clamp/tensor.hpp"

namespace clamp {

struct Point2 {
    double x = 0.0;
    double y = 0.0;
};

/// N-channel spatial map. values has layout [N, H, W]; stride is the number
/// of input pixels per map cell.
struct HeatmapStack {
    Tensor values;
    int stride = 1;

    HeatmapStack() = default;
    HeatmapStack(Tensor v, int s);

    int channels() const { return values.dim(0); }
    int height() const { return values.dim(1); }
    int width() const { return values.dim(2); }
    double at(int n, int i, int j) const { return values.at(n, i, j); }
};

struct GaussianTarget {
    HeatmapStack heatmap;
    /// 1 for labeled keypoints that land on the map, else 0.
    std::vector<double> weights;
};

inline constexpr double kDefaultSigma = 2.0;

/// Unnormalised Gaussians centred on round(keypoint / stride), truncated
/// outside a 3 sigma radius.
GaussianTarget encode_gaussian(std::span<const Keypoint> keypoints, int map_h, int map_w, int stride,
                               double sigma = kDefaultSigma);

/// Per-channel argmax scaled by the stride, (x, y) = (s * j, s * i); ties go
/// to the first cell in row-major order. quarter_offset shifts a quarter
/// cell towards the larger neighbour.
std::vector<Point2> decode_argmax(const HeatmapStack& heatmap, bool quarter_offset = false);

/// Heatmap value at each channel's argmax cell.
std::vector<double> peak_values(const HeatmapStack& heatmap);

/// Channel-wise bilinear resize (pixel-centre alignment). The output stride
/// is rescaled by the height ratio. Shrinking is rejected.
HeatmapStack upsample_map(const HeatmapStack& map, int target_h, int target_w);

}  // namespace clamp
