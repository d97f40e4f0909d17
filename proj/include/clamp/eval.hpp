#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <vector>

#include <json.hpp>

#include "clamp/data.hpp"
#include "clamp/model.hpp"
#include "clamp/schema.hpp"

namespace clamp {

struct PredictedKeypoint {
    double x = 0.0, y = 0.0, confidence = 0.0;
};

struct PredictionRecord {
    std::int64_t id = 0;  // annotation id of the matched ground truth
    std::vector<PredictedKeypoint> keypoints;
    /// Ranking score; mean keypoint confidence by default.
    double score = 0.0;
};

/// COCO object keypoint similarity over labeled keypoints:
/// mean of exp(-d^2 / (2 * area * (2 sigma)^2)). Throws PreconditionError
/// when the instance has no labeled keypoint or a non-positive area.
double compute_oks(const PredictionRecord& pred, const InstanceRecord& gt, std::span<const double> sigmas);

struct EvalMetrics {
    double ap = 0, ap50 = 0, ap75 = 0, apm = -1, apl = -1, ar = 0;
    nlohmann::json to_json() const;
};

struct InstanceScore {
    std::int64_t id = 0;
    double oks = 0.0;
    double score = 0.0;
    double area = 0.0;
};

struct EvalResult {
    EvalMetrics metrics;
    std::vector<InstanceScore> instances;
    /// Ground truths without labeled keypoints, left out of every metric.
    std::vector<std::int64_t> skipped;
};

inline constexpr double kMediumArea = 32.0 * 32.0;
inline constexpr double kLargeArea = 96.0 * 96.0;

/// One prediction per ground truth, matched by id. AP is the 101-point
/// interpolated precision averaged over OKS thresholds 0.50:0.05:0.95; AR
/// is the recall averaged over the same thresholds. Area ranges without
/// instances report -1. Throws PreconditionError for a prediction whose id
/// has no ground truth.
EvalResult evaluate(const std::vector<PredictionRecord>& preds, const DatasetSplit& gts);
EvalResult evaluate(const std::vector<PredictionRecord>& preds, const DatasetSplit& gts, std::span<const double> sigmas);

/// AP at one threshold for (oks, score) pairs, all counted as ground truths.
double average_precision(std::span<const InstanceScore> instances, double threshold);

/// Crops every record without augmentation, runs the model and maps the
/// decoded keypoints back to image coordinates.
std::vector<PredictionRecord> predict_split(ClampModel& model, const DatasetSplit& split, ImageCache& images,
                                            int batch_size = 16);

/// COCO results style: [{"id", "image_id", "category_id", "keypoints", "score"}].
void write_predictions(const std::filesystem::path& path, const std::vector<PredictionRecord>& preds,
                       const DatasetSplit& split);
std::vector<PredictionRecord> read_predictions(const std::filesystem::path& path);

/// id,oks,score,area per instance.
void write_instance_csv(const std::filesystem::path& path, const EvalResult& result);

}  // namespace clamp
