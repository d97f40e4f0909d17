#include "clamp/augment.hpp"

#include <cmath>
#include <numbers>

#include <opencv2/imgproc.hpp>

#include "clamp/errors.hpp"

namespace clamp {

Affine2D Affine2D::then_after(const Affine2D& o) const {
    Affine2D r;
    r.a = a * o.a + b * o.d;
    r.b = a * o.b + b * o.e;
    r.c = a * o.c + b * o.f + c;
    r.d = d * o.a + e * o.d;
    r.e = d * o.b + e * o.e;
    r.f = d * o.c + e * o.f + f;
    return r;
}

Affine2D Affine2D::inverse() const {
    const double det = a * e - b * d;
    if (std::abs(det) < 1e-300) throw PreconditionError("affine transform is singular");
    Affine2D r;
    r.a = e / det;
    r.b = -b / det;
    r.d = -d / det;
    r.e = a / det;
    r.c = -(r.a * c + r.b * f);
    r.f = -(r.d * c + r.e * f);
    return r;
}

cv::Mat Affine2D::to_cv() const {
    cv::Mat m(2, 3, CV_64F);
    m.at<double>(0, 0) = a;
    m.at<double>(0, 1) = b;
    m.at<double>(0, 2) = c;
    m.at<double>(1, 0) = d;
    m.at<double>(1, 1) = e;
    m.at<double>(1, 2) = f;
    return m;
}

AugmentParams sample_augment(const AugmentConfig& config, Rng& rng) {
    AugmentParams p;
    if (!config.enabled) return p;
    p.flip = rng.bernoulli(config.flip_prob);
    p.rotation_deg = rng.uniform(-config.max_rotation_deg, config.max_rotation_deg);
    p.scale = rng.uniform(config.scale_min, config.scale_max);
    return p;
}

Affine2D crop_transform(const BoundingBox& box, int out_h, int out_w, const AugmentParams& params) {
    if (!(box.w > 0.0 && box.h > 0.0)) throw PreconditionError("degenerate bounding box");
    if (out_h < 1 || out_w < 1) throw PreconditionError("output window must be non-empty");
    const double cx = box.x + box.w / 2.0;
    const double cy = box.y + box.h / 2.0;
    double w = box.w, h = box.h;
    const double aspect = static_cast<double>(out_w) / out_h;
    if (w > aspect * h) {
        h = w / aspect;
    } else {
        w = h * aspect;
    }
    const double s = out_w / (w * params.scale);
    const double theta = params.rotation_deg * std::numbers::pi / 180.0;
    const double cs = std::cos(theta) * s, sn = std::sin(theta) * s;
    const double ox = out_w / 2.0, oy = out_h / 2.0;

    Affine2D t;
    t.a = cs;
    t.b = -sn;
    t.c = ox - cs * cx + sn * cy;
    t.d = sn;
    t.e = cs;
    t.f = oy - sn * cx - cs * cy;
    if (params.flip) {
        Affine2D mirror;
        mirror.a = -1.0;
        mirror.c = out_w - 1.0;
        t = mirror.then_after(t);
    }
    return t;
}

std::vector<Keypoint> transform_keypoints(const std::vector<Keypoint>& keypoints, const Affine2D& t,
                                          bool flip, const KeypointSchema& schema, int out_h, int out_w) {
    std::vector<Keypoint> mapped(keypoints.size());
    for (std::size_t k = 0; k < keypoints.size(); ++k) {
        const auto& src = keypoints[k];
        mapped[k] = {t.apply_x(src.x, src.y), t.apply_y(src.x, src.y), src.v};
        if (mapped[k].labeled() &&
            (mapped[k].x < 0 || mapped[k].y < 0 || mapped[k].x > out_w - 1 || mapped[k].y > out_h - 1)) {
            mapped[k].v = 0;
        }
    }
    if (!flip) return mapped;
    const auto perm = schema.flip_permutation();
    std::vector<Keypoint> swapped(mapped.size());
    for (std::size_t k = 0; k < mapped.size(); ++k) swapped[static_cast<std::size_t>(perm[k])] = mapped[k];
    return swapped;
}

CropResult crop_instance(const InstanceRecord& record, const cv::Mat& image, int out_h, int out_w,
                         const AugmentParams& params, const KeypointSchema& schema) {
    if (static_cast<int>(record.keypoints.size()) != schema.size()) {
        throw SchemaMismatchError("record " + std::to_string(record.id) + " keypoint count does not match schema");
    }
    CropResult out;
    out.transform = crop_transform(record.bbox, out_h, out_w, params);
    if (!image.empty()) {
        cv::warpAffine(image, out.pixels, out.transform.to_cv(), cv::Size(out_w, out_h), cv::INTER_LINEAR,
                       cv::BORDER_CONSTANT, cv::Scalar::all(0));
    }
    out.keypoints = transform_keypoints(record.keypoints, out.transform, params.flip, schema, out_h, out_w);
    return out;
}

}  // namespace clamp
