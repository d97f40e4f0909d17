#include "clamp/synthetic.hpp"

#include <cmath>
#include <fstream>

#include <json.hpp>
#include <opencv2/imgcodecs.hpp>
#include <opencv2/imgproc.hpp>

#include "clamp/errors.hpp"
#include "clamp/rng.hpp"

namespace clamp {

namespace {

struct Colour {
    const char* name;
    cv::Scalar bgr;
};

const Colour kColours[] = {{"red", {40, 40, 230}},    {"green", {40, 200, 40}},   {"blue", {230, 60, 30}},
                           {"yellow", {30, 220, 230}}, {"white", {250, 250, 250}}, {"black", {10, 10, 10}}};
const char* kNumbers[] = {"one", "two", "three", "four", "five", "six", "seven", "eight", "nine", "ten"};

struct Generated {
    cv::Mat image;
    std::vector<Keypoint> keypoints;
};

Generated generate(const BlobOptions& o, int index) {
    Rng rng(mix_seed(o.seed, static_cast<std::uint64_t>(index)));
    Generated g;
    g.image = cv::Mat(o.size, o.size, CV_8UC3);
    for (int i = 0; i < o.size; ++i) {
        auto* row = g.image.ptr<cv::Vec3b>(i);
        for (int j = 0; j < o.size; ++j) {
            const auto v = static_cast<unsigned char>(110 + rng.below(36));
            row[j] = {v, v, v};
        }
    }
    const int margin = 3 * o.radius;
    const double min_dist = 4.0 * o.radius;
    for (int k = 0; k < o.num_keypoints; ++k) {
        Keypoint kp;
        for (int attempt = 0;; ++attempt) {
            kp.x = static_cast<double>(margin + rng.below(static_cast<std::uint64_t>(o.size - 2 * margin)));
            kp.y = static_cast<double>(margin + rng.below(static_cast<std::uint64_t>(o.size - 2 * margin)));
            bool clear = true;
            for (const auto& other : g.keypoints) {
                if (std::hypot(other.x - kp.x, other.y - kp.y) < min_dist) clear = false;
            }
            if (clear || attempt > 1000) break;
        }
        kp.v = 2;
        const auto& colour = kColours[static_cast<std::size_t>(k) % std::size(kColours)];
        cv::circle(g.image, {static_cast<int>(kp.x), static_cast<int>(kp.y)}, o.radius, colour.bgr, cv::FILLED,
                   cv::LINE_8);
        g.keypoints.push_back(kp);
    }
    return g;
}

void check(const BlobOptions& o) {
    if (o.count < 1 || o.num_keypoints < 1 || o.num_keypoints > 10 || o.radius < 1 || o.size < 8 * o.radius) {
        throw PreconditionError("invalid synthetic dataset options");
    }
}

InstanceRecord record_for(const BlobOptions& o, int index, std::vector<Keypoint> keypoints, std::string path) {
    InstanceRecord r;
    r.id = index + 1;
    r.image_id = index + 1;
    r.image_path = std::move(path);
    r.image_width = o.size;
    r.image_height = o.size;
    r.bbox = {0.0, 0.0, static_cast<double>(o.size), static_cast<double>(o.size)};
    r.keypoints = std::move(keypoints);
    r.species = "blob";
    r.family = "synthetic";
    r.area = static_cast<double>(o.size) * o.size;
    return r;
}

}  // namespace

KeypointSchema blob_schema(int num_keypoints) {
    KeypointSchema s;
    s.name = "blobs";
    const bool coloured = num_keypoints <= static_cast<int>(std::size(kColours));
    for (int k = 0; k < num_keypoints; ++k) {
        const std::string word = coloured ? kColours[k].name : kNumbers[k];
        s.keypoint_names.push_back(word + "_blob");
        s.prompt_names.push_back(coloured ? word + " blob" : "blob " + word);
    }
    for (int k = 0; k + 1 < num_keypoints; ++k) s.skeleton.emplace_back(k, k + 1);
    s.oks_sigmas.assign(static_cast<std::size_t>(num_keypoints), 0.05);
    s.validate();
    return s;
}

DatasetSplit make_blob_dataset(const BlobOptions& options, ImageCache& cache) {
    check(options);
    DatasetSplit split;
    split.schema = blob_schema(options.num_keypoints);
    for (int i = 0; i < options.count; ++i) {
        auto g = generate(options, i);
        const std::string path = "synthetic://" + std::to_string(options.seed) + "/" + std::to_string(i);
        cache.put(path, g.image);
        split.records.push_back(record_for(options, i, std::move(g.keypoints), path));
    }
    return split;
}

std::filesystem::path write_blob_dataset(const BlobOptions& options, const std::filesystem::path& dir) {
    check(options);
    std::filesystem::create_directories(dir / "images");
    const auto schema = blob_schema(options.num_keypoints);
    nlohmann::json images = nlohmann::json::array(), annotations = nlohmann::json::array();
    for (int i = 0; i < options.count; ++i) {
        const auto g = generate(options, i);
        const std::string file = "blob_" + std::to_string(i) + ".png";
        if (!cv::imwrite((dir / "images" / file).string(), g.image)) throw Error("cannot write " + file);
        images.push_back({{"id", i + 1}, {"file_name", file}, {"width", options.size}, {"height", options.size}});
        std::vector<double> flat;
        for (const auto& kp : g.keypoints) {
            flat.push_back(kp.x);
            flat.push_back(kp.y);
            flat.push_back(kp.v);
        }
        annotations.push_back({{"id", i + 1},
                               {"image_id", i + 1},
                               {"category_id", 1},
                               {"bbox", {0, 0, options.size, options.size}},
                               {"area", options.size * options.size},
                               {"num_keypoints", options.num_keypoints},
                               {"keypoints", flat}});
    }
    nlohmann::json skeleton = nlohmann::json::array();
    for (const auto& [a, b] : schema.skeleton) skeleton.push_back({a + 1, b + 1});
    const nlohmann::json doc = {
        {"images", images},
        {"annotations", annotations},
        {"categories",
         {{{"id", 1}, {"name", "blob"}, {"supercategory", "synthetic"}, {"keypoints", schema.keypoint_names},
           {"skeleton", skeleton}}}}};
    const auto path = dir / "annotations.json";
    std::ofstream out(path);
    if (!out) throw Error("cannot write " + path.string());
    out << doc.dump(1) << "\n";
    return path;
}

}  // namespace clamp
