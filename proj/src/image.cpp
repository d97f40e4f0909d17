#include "clamp/image.hpp"

#include <opencv2/imgcodecs.hpp>

#include "clamp/errors.hpp"

namespace clamp {

cv::Mat load_image(const std::filesystem::path& path) {
    cv::Mat img = cv::imread(path.string(), cv::IMREAD_COLOR);
    if (img.empty()) throw InputError("cannot read image " + path.string());
    return img;
}

Tensor image_to_tensor(const cv::Mat& bgr) {
    if (bgr.type() != CV_8UC3) throw PreconditionError("expected an 8-bit 3-channel image");
    const int h = bgr.rows, w = bgr.cols;
    Tensor t({3, h, w});
    for (int i = 0; i < h; ++i) {
        const auto* row = bgr.ptr<cv::Vec3b>(i);
        for (int j = 0; j < w; ++j) {
            for (int c = 0; c < 3; ++c) {
                const double v = row[j][2 - c] / 255.0;  // BGR -> RGB
                t.at(c, i, j) = (v - kClipMean[c]) / kClipStd[c];
            }
        }
    }
    return t;
}

Tensor stack_images(std::span<const Tensor> images) {
    if (images.empty()) throw PreconditionError("no images to stack");
    const Shape& s = images[0].shape;
    Tensor out({static_cast<int>(images.size()), s.at(0), s.at(1), s.at(2)});
    std::size_t off = 0;
    for (const auto& im : images) {
        if (im.shape != s) throw PreconditionError("images in a batch must share a shape");
        std::copy(im.data.begin(), im.data.end(), out.data.begin() + static_cast<std::ptrdiff_t>(off));
        off += im.numel();
    }
    return out;
}

}  // namespace clamp
