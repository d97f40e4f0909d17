#include "render.hpp"

#include <algorithm>
#include <cstdio>

#include <opencv2/imgproc.hpp>

namespace clamp::render {

namespace {

cv::Mat unit_scaled(const cv::Mat& values) {
    double lo = 0.0, hi = 0.0;
    cv::minMaxLoc(values, &lo, &hi);
    cv::Mat out;
    if (hi - lo < 1e-12) {
        out = cv::Mat::zeros(values.size(), CV_64F);
    } else {
        values.convertTo(out, CV_64F, 1.0 / (hi - lo), -lo / (hi - lo));
    }
    return out;
}

cv::Mat viridis(const cv::Mat& unit) {
    cv::Mat bytes, colour;
    unit.convertTo(bytes, CV_8U, 255.0);
    cv::applyColorMap(bytes, colour, cv::COLORMAP_VIRIDIS);
    return colour;
}

cv::Scalar palette(int i) {
    static const cv::Scalar colours[] = {{0, 0, 255},   {0, 165, 255}, {0, 255, 255}, {0, 255, 0},
                                         {255, 255, 0}, {255, 0, 0},   {255, 0, 255}, {128, 128, 255}};
    return colours[static_cast<std::size_t>(i) % std::size(colours)];
}

void caption(cv::Mat& img, const std::string& text) {
    cv::putText(img, text, {6, 18}, cv::FONT_HERSHEY_SIMPLEX, 0.5, cv::Scalar::all(0), 3, cv::LINE_AA);
    cv::putText(img, text, {6, 18}, cv::FONT_HERSHEY_SIMPLEX, 0.5, cv::Scalar::all(255), 1, cv::LINE_AA);
}

}  // namespace

cv::Mat score_overlay(const cv::Mat& crop, const Tensor& plane, const std::string& title) {
    const cv::Mat grid(plane.dim(0), plane.dim(1), CV_64F, const_cast<double*>(plane.data.data()));
    cv::Mat up;
    cv::resize(grid, up, crop.size(), 0, 0, cv::INTER_LINEAR);
    const cv::Mat unit = unit_scaled(up);
    const cv::Mat colour = viridis(unit);
    cv::Mat out(crop.size(), CV_8UC3);
    for (int i = 0; i < crop.rows; ++i) {
        for (int j = 0; j < crop.cols; ++j) {
            const double a = 0.2 + 0.6 * unit.at<double>(i, j);
            const auto& base = crop.at<cv::Vec3b>(i, j);
            const auto& tint = colour.at<cv::Vec3b>(i, j);
            for (int c = 0; c < 3; ++c) out.at<cv::Vec3b>(i, j)[c] = cv::saturate_cast<uchar>((1 - a) * base[c] + a * tint[c]);
        }
    }
    caption(out, title);
    return out;
}

cv::Mat skeleton(const cv::Mat& crop, const std::vector<Point2>& joints, const KeypointSchema& schema,
                 const std::vector<Keypoint>* ground_truth) {
    cv::Mat out = crop.clone();
    auto at = [&](int k) { return cv::Point2d(joints[static_cast<std::size_t>(k)].x, joints[static_cast<std::size_t>(k)].y); };
    for (std::size_t e = 0; e < schema.skeleton.size(); ++e) {
        const auto [a, b] = schema.skeleton[e];
        cv::line(out, at(a), at(b), palette(static_cast<int>(e)), 2, cv::LINE_AA);
    }
    for (int k = 0; k < static_cast<int>(joints.size()); ++k) {
        cv::circle(out, at(k), 4, palette(k), cv::FILLED, cv::LINE_AA);
        cv::circle(out, at(k), 4, cv::Scalar::all(0), 1, cv::LINE_AA);
    }
    if (ground_truth) {
        for (const auto& g : *ground_truth) {
            if (!g.labeled()) continue;
            cv::drawMarker(out, cv::Point2d(g.x, g.y), cv::Scalar::all(255), cv::MARKER_CROSS, 8, 1, cv::LINE_AA);
        }
    }
    return out;
}

cv::Mat match_grid(const Tensor& matrix, const std::vector<std::string>& names) {
    const int n = matrix.dim(0);
    constexpr int cell = 32;
    constexpr double font = 0.4;
    int label = 0;
    for (const auto& name : names) {
        int base = 0;
        label = std::max(label, cv::getTextSize(name, cv::FONT_HERSHEY_SIMPLEX, font, 1, &base).width);
    }
    label += 12;
    cv::Mat out(label + n * cell + 4, label + n * cell + 4, CV_8UC3, cv::Scalar::all(255));

    const cv::Mat values(n, n, CV_64F, const_cast<double*>(matrix.data.data()));
    const cv::Mat colour = viridis(unit_scaled(values));
    double lo = 0.0, hi = 0.0;
    cv::minMaxLoc(values, &lo, &hi);
    for (int i = 0; i < n; ++i) {
        for (int j = 0; j < n; ++j) {
            const cv::Rect r(label + j * cell, label + i * cell, cell, cell);
            cv::rectangle(out, r, cv::Scalar(colour.at<cv::Vec3b>(i, j)), cv::FILLED);
            char text[16];
            std::snprintf(text, sizeof text, "%.2f", matrix.at(i, j));
            const bool dark = (matrix.at(i, j) - lo) < 0.5 * (hi - lo);
            cv::putText(out, text, {r.x + 2, r.y + cell / 2 + 4}, cv::FONT_HERSHEY_SIMPLEX, 0.28,
                        dark ? cv::Scalar::all(255) : cv::Scalar::all(0), 1, cv::LINE_AA);
        }
    }
    // row labels on the left, column labels written horizontally on a
    // strip that is then turned upright above the grid
    cv::Mat strip(cell * n, label, CV_8UC3, cv::Scalar::all(255));
    for (int i = 0; i < n; ++i) {
        const auto& name = names[static_cast<std::size_t>(i)];
        cv::putText(out, name, {4, label + i * cell + cell / 2 + 4}, cv::FONT_HERSHEY_SIMPLEX, font, cv::Scalar::all(0), 1,
                    cv::LINE_AA);
        cv::putText(strip, name, {4, i * cell + cell / 2 + 4}, cv::FONT_HERSHEY_SIMPLEX, font,
                    cv::Scalar::all(0), 1, cv::LINE_AA);
    }
    cv::Mat upright;
    cv::rotate(strip, upright, cv::ROTATE_90_COUNTERCLOCKWISE);
    upright.copyTo(out(cv::Rect(label, 0, upright.cols, upright.rows)));
    return out;
}

}  // namespace clamp::render
