#include "clamp/data.hpp"

#include "clamp/errors.hpp"
#include "clamp/heatmap.hpp"
#include "clamp/image.hpp"

namespace clamp {

const cv::Mat& ImageCache::get(const std::string& path) {
    auto it = images_.find(path);
    if (it == images_.end()) it = images_.emplace(path, load_image(path)).first;
    return it->second;
}

void ImageCache::put(const std::string& path, cv::Mat image) { images_[path] = std::move(image); }

Sample prepare_sample(const InstanceRecord& record, const cv::Mat& image, int input_size,
                      const AugmentParams& params, const KeypointSchema& schema) {
    auto crop = crop_instance(record, image, input_size, input_size, params, schema);
    return {image_to_tensor(crop.pixels), std::move(crop.keypoints), crop.transform};
}

Batch collate(std::span<const Sample> samples, int num_keypoints, int input_size) {
    if (samples.empty()) throw PreconditionError("cannot collate an empty batch");
    constexpr int kStride = 4;
    const int map = input_size / kStride;
    Batch batch;
    std::vector<Tensor> images;
    batch.targets = Tensor({static_cast<int>(samples.size()), num_keypoints, map, map});
    const std::size_t plane = static_cast<std::size_t>(num_keypoints) * map * map;
    for (std::size_t i = 0; i < samples.size(); ++i) {
        images.push_back(samples[i].image);
        batch.keypoints.push_back(samples[i].keypoints);
        const auto target = encode_gaussian(samples[i].keypoints, map, map, kStride);
        std::copy(target.heatmap.values.data.begin(), target.heatmap.values.data.end(),
                  batch.targets.data.begin() + static_cast<std::ptrdiff_t>(i * plane));
        batch.target_weights.insert(batch.target_weights.end(), target.weights.begin(), target.weights.end());
    }
    batch.images = stack_images(images);
    return batch;
}

}  // namespace clamp
