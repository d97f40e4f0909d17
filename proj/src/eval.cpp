#include "clamp/eval.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>

#include "clamp/errors.hpp"
#include "clamp/image.hpp"

namespace clamp {

double compute_oks(const PredictionRecord& pred, const InstanceRecord& gt, std::span<const double> sigmas) {
    if (pred.keypoints.size() != gt.keypoints.size() || sigmas.size() != gt.keypoints.size()) {
        throw SchemaMismatchError("prediction " + std::to_string(pred.id) + " keypoint count does not match");
    }
    if (!(gt.area > 0)) throw PreconditionError("instance " + std::to_string(gt.id) + " has no area");
    double sum = 0.0;
    int labeled = 0;
    for (std::size_t i = 0; i < gt.keypoints.size(); ++i) {
        if (!gt.keypoints[i].labeled()) continue;
        const double dx = pred.keypoints[i].x - gt.keypoints[i].x;
        const double dy = pred.keypoints[i].y - gt.keypoints[i].y;
        const double k = 2.0 * sigmas[i];
        sum += std::exp(-(dx * dx + dy * dy) / (2.0 * gt.area * k * k));
        ++labeled;
    }
    if (labeled == 0) throw PreconditionError("instance " + std::to_string(gt.id) + " has no labeled keypoints");
    return sum / labeled;
}

nlohmann::json EvalMetrics::to_json() const {
    return {{"AP", ap}, {"AP50", ap50}, {"AP75", ap75}, {"APM", apm}, {"APL", apl}, {"AR", ar}};
}

double average_precision(std::span<const InstanceScore> instances, double threshold) {
    if (instances.empty()) return -1.0;
    std::vector<InstanceScore> ranked(instances.begin(), instances.end());
    std::stable_sort(ranked.begin(), ranked.end(),
                     [](const InstanceScore& a, const InstanceScore& b) { return a.score > b.score; });
    const double total = static_cast<double>(ranked.size());
    std::vector<double> precision(ranked.size()), recall(ranked.size());
    double tp = 0.0;
    for (std::size_t i = 0; i < ranked.size(); ++i) {
        if (ranked[i].oks >= threshold) tp += 1.0;
        precision[i] = tp / static_cast<double>(i + 1);
        recall[i] = tp / total;
    }
    for (std::size_t i = ranked.size() - 1; i > 0; --i) precision[i - 1] = std::max(precision[i - 1], precision[i]);
    double sum = 0.0;
    for (int r = 0; r <= 100; ++r) {
        const double level = r / 100.0;
        const auto it = std::lower_bound(recall.begin(), recall.end(), level);
        if (it != recall.end()) sum += precision[static_cast<std::size_t>(it - recall.begin())];
    }
    return sum / 101.0;
}

namespace {

double recall_at(std::span<const InstanceScore> instances, double threshold) {
    double tp = 0.0;
    for (const auto& s : instances) tp += s.oks >= threshold ? 1.0 : 0.0;
    return tp / static_cast<double>(instances.size());
}

double threshold_at(int i) { return (50 + 5 * i) / 100.0; }

double mean_ap(std::span<const InstanceScore> instances) {
    if (instances.empty()) return -1.0;
    double sum = 0.0;
    for (int i = 0; i < 10; ++i) sum += average_precision(instances, threshold_at(i));
    return sum / 10.0;
}

}  // namespace

EvalResult evaluate(const std::vector<PredictionRecord>& preds, const DatasetSplit& gts) {
    return evaluate(preds, gts, gts.schema.oks_sigmas);
}

EvalResult evaluate(const std::vector<PredictionRecord>& preds, const DatasetSplit& gts, std::span<const double> sigmas) {
    std::map<std::int64_t, const InstanceRecord*> by_id;
    for (const auto& r : gts.records) by_id[r.id] = &r;
    std::map<std::int64_t, const PredictionRecord*> pred_by_id;
    for (const auto& p : preds) {
        if (!by_id.count(p.id)) throw PreconditionError("prediction " + std::to_string(p.id) + " has no ground truth");
        pred_by_id[p.id] = &p;
    }
    EvalResult result;
    for (const auto& gt : gts.records) {
        if (gt.labeled_count() == 0) {
            result.skipped.push_back(gt.id);
            continue;
        }
        InstanceScore s{gt.id, 0.0, 0.0, gt.area};
        auto it = pred_by_id.find(gt.id);
        if (it != pred_by_id.end()) {
            s.oks = compute_oks(*it->second, gt, sigmas);
            s.score = it->second->score;
        } else {
            s.score = -std::numeric_limits<double>::infinity();
        }
        result.instances.push_back(s);
    }
    if (result.instances.empty()) throw PreconditionError("no ground truth with labeled keypoints to evaluate");
    std::vector<InstanceScore> medium, large;
    for (const auto& s : result.instances) {
        if (s.area >= kMediumArea && s.area <= kLargeArea) medium.push_back(s);
        if (s.area > kLargeArea) large.push_back(s);
    }
    auto& m = result.metrics;
    m.ap = mean_ap(result.instances);
    m.ap50 = average_precision(result.instances, 0.5);
    m.ap75 = average_precision(result.instances, 0.75);
    m.apm = mean_ap(medium);
    m.apl = mean_ap(large);
    double recall = 0.0;
    for (int i = 0; i < 10; ++i) recall += recall_at(result.instances, threshold_at(i));
    m.ar = recall / 10.0;
    return result;
}

std::vector<PredictionRecord> predict_split(ClampModel& model, const DatasetSplit& split, ImageCache& images,
                                            int batch_size) {
    if (batch_size < 1) throw PreconditionError("batch size must be >= 1");
    const bool was_training = model.training();
    model.set_training(false);
    std::vector<PredictionRecord> out;
    const int size = model.config().input_size;
    for (std::size_t start = 0; start < split.records.size(); start += static_cast<std::size_t>(batch_size)) {
        const std::size_t end = std::min(split.records.size(), start + static_cast<std::size_t>(batch_size));
        std::vector<Sample> samples;
        std::vector<Tensor> tensors;
        for (std::size_t i = start; i < end; ++i) {
            const auto& r = split.records[i];
            samples.push_back(prepare_sample(r, images.get(r.image_path), size, AugmentParams{}, split.schema));
            tensors.push_back(samples.back().image);
        }
        const auto result = model.forward_infer(stack_images(tensors));
        for (std::size_t i = start; i < end; ++i) {
            const auto& pose = result.poses[i - start];
            const Affine2D back = samples[i - start].transform.inverse();
            PredictionRecord p;
            p.id = split.records[i].id;
            double conf = 0.0;
            for (std::size_t k = 0; k < pose.coords.size(); ++k) {
                const auto& c = pose.coords[k];
                p.keypoints.push_back(PredictedKeypoint{back.apply_x(c.x, c.y), back.apply_y(c.x, c.y), pose.confidence[k]});
                conf += pose.confidence[k];
            }
            p.score = pose.coords.empty() ? 0.0 : conf / static_cast<double>(pose.coords.size());
            out.push_back(std::move(p));
        }
    }
    model.set_training(was_training);
    return out;
}

void write_predictions(const std::filesystem::path& path, const std::vector<PredictionRecord>& preds,
                       const DatasetSplit& split) {
    std::map<std::int64_t, std::int64_t> image_of;
    for (const auto& r : split.records) image_of[r.id] = r.image_id;
    nlohmann::json doc = nlohmann::json::array();
    for (const auto& p : preds) {
        std::vector<double> flat;
        for (const auto& k : p.keypoints) {
            flat.push_back(k.x);
            flat.push_back(k.y);
            flat.push_back(k.confidence);
        }
        const auto it = image_of.find(p.id);
        nlohmann::json entry;
        entry["id"] = p.id;
        entry["image_id"] = it != image_of.end() ? it->second : std::int64_t{0};
        entry["category_id"] = 1;
        entry["keypoints"] = flat;
        entry["score"] = p.score;
        doc.push_back(std::move(entry));
    }
    std::ofstream out(path);
    if (!out) throw Error("cannot write " + path.string());
    out << doc.dump(1) << "\n";
}

std::vector<PredictionRecord> read_predictions(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw InputError("cannot open predictions " + path.string());
    const auto doc = nlohmann::json::parse(in, nullptr, false);
    if (doc.is_discarded() || !doc.is_array()) throw ParseError("predictions file " + path.string() + " is not a JSON array");
    std::vector<PredictionRecord> out;
    for (const auto& e : doc) {
        PredictionRecord p;
        try {
            p.id = e.at("id").get<std::int64_t>();
            p.score = e.at("score").get<double>();
            const auto flat = e.at("keypoints").get<std::vector<double>>();
            if (flat.size() % 3 != 0) throw SchemaMismatchError("prediction " + std::to_string(p.id) + " keypoints are not triples");
            for (std::size_t i = 0; i < flat.size(); i += 3) {
                p.keypoints.push_back(PredictedKeypoint{flat[i], flat[i + 1], flat[i + 2]});
            }
        } catch (const nlohmann::json::exception& ex) {
            throw ParseError("malformed prediction entry in " + path.string() + ": " + ex.what());
        }
        out.push_back(std::move(p));
    }
    return out;
}

void write_instance_csv(const std::filesystem::path& path, const EvalResult& result) {
    std::ofstream out(path);
    if (!out) throw Error("cannot write " + path.string());
    out << "id,oks,score,area\n";
    out.precision(10);
    for (const auto& s : result.instances) out << s.id << ',' << s.oks << ',' << s.score << ',' << s.area << '\n';
}

}  // namespace clamp
