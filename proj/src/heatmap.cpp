#include "clamp/heatmap.hpp"

#include <cmath>

#include "clamp/autograd.hpp"
#include "clamp/errors.hpp"

namespace clamp {

namespace {

struct Peak {
    int i = 0, j = 0;
    double value = 0.0;
};

Peak argmax_channel(const HeatmapStack& hm, int n) {
    Peak best{0, 0, hm.at(n, 0, 0)};
    for (int i = 0; i < hm.height(); ++i)
        for (int j = 0; j < hm.width(); ++j)
            if (hm.at(n, i, j) > best.value) best = {i, j, hm.at(n, i, j)};
    return best;
}

}  // namespace

HeatmapStack::HeatmapStack(Tensor v, int s) : values(std::move(v)), stride(s) {
    if (values.rank() != 3 || values.dim(0) < 1 || values.dim(1) < 1 || values.dim(2) < 1) {
        throw PreconditionError("heatmap stack must have shape [N, H, W] with all dims >= 1, got " +
                                shape_str(values.shape));
    }
    if (stride < 1) throw PreconditionError("heatmap stride must be >= 1");
}

GaussianTarget encode_gaussian(std::span<const Keypoint> keypoints, int map_h, int map_w, int stride, double sigma) {
    if (!(sigma > 0.0)) throw PreconditionError("sigma must be positive");
    const int n = static_cast<int>(keypoints.size());
    GaussianTarget out{HeatmapStack(Tensor({n, map_h, map_w}, 0.0), stride), std::vector<double>(keypoints.size(), 0.0)};
    const double radius = 3.0 * sigma;
    const int reach = static_cast<int>(std::ceil(radius));
    for (int k = 0; k < n; ++k) {
        const auto& kp = keypoints[static_cast<std::size_t>(k)];
        if (!kp.labeled()) continue;
        const int cx = static_cast<int>(std::floor(kp.x / stride + 0.5));
        const int cy = static_cast<int>(std::floor(kp.y / stride + 0.5));
        if (cx < 0 || cy < 0 || cx >= map_w || cy >= map_h) continue;
        out.weights[static_cast<std::size_t>(k)] = 1.0;
        for (int i = std::max(0, cy - reach); i <= std::min(map_h - 1, cy + reach); ++i) {
            for (int j = std::max(0, cx - reach); j <= std::min(map_w - 1, cx + reach); ++j) {
                const double d2 = static_cast<double>((i - cy) * (i - cy) + (j - cx) * (j - cx));
                if (d2 > radius * radius) continue;
                out.heatmap.values.at(k, i, j) = std::exp(-d2 / (2.0 * sigma * sigma));
            }
        }
    }
    return out;
}

std::vector<Point2> decode_argmax(const HeatmapStack& heatmap, bool quarter_offset) {
    std::vector<Point2> out(static_cast<std::size_t>(heatmap.channels()));
    const double s = heatmap.stride;
    for (int n = 0; n < heatmap.channels(); ++n) {
        const Peak p = argmax_channel(heatmap, n);
        double x = p.j, y = p.i;
        if (quarter_offset) {
            if (p.j > 0 && p.j < heatmap.width() - 1) {
                const double diff = heatmap.at(n, p.i, p.j + 1) - heatmap.at(n, p.i, p.j - 1);
                x += diff > 0 ? 0.25 : (diff < 0 ? -0.25 : 0.0);
            }
            if (p.i > 0 && p.i < heatmap.height() - 1) {
                const double diff = heatmap.at(n, p.i + 1, p.j) - heatmap.at(n, p.i - 1, p.j);
                y += diff > 0 ? 0.25 : (diff < 0 ? -0.25 : 0.0);
            }
        }
        out[static_cast<std::size_t>(n)] = {s * x, s * y};
    }
    return out;
}

std::vector<double> peak_values(const HeatmapStack& heatmap) {
    std::vector<double> out(static_cast<std::size_t>(heatmap.channels()));
    for (int n = 0; n < heatmap.channels(); ++n) out[static_cast<std::size_t>(n)] = argmax_channel(heatmap, n).value;
    return out;
}

HeatmapStack upsample_map(const HeatmapStack& map, int target_h, int target_w) {
    if (target_h < map.height() || target_w < map.width()) {
        throw PreconditionError("upsample_map cannot shrink a " + std::to_string(map.height()) + "x" +
                                std::to_string(map.width()) + " map to " + std::to_string(target_h) + "x" +
                                std::to_string(target_w));
    }
    ag::NoGradGuard guard;
    const ag::Var in(map.values.reshaped({1, map.channels(), map.height(), map.width()}));
    const auto out = ag::upsample_bilinear(in, target_h, target_w);
    const int stride = std::max(1, map.stride * map.height() / target_h);
    return HeatmapStack(out.value().reshaped({map.channels(), target_h, target_w}), stride);
}

}  // namespace clamp
