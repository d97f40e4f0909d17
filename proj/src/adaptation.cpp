#include "clamp/adaptation.hpp"

#include <cmath>
#include <memory>
#include <string>

#include "clamp/errors.hpp"

namespace clamp {

namespace {

void check_width(int a, int b, const char* what) {
    if (a != b) {
        throw PreconditionError(std::string(what) + ": width " + std::to_string(a) + " does not match " +
                                std::to_string(b));
    }
}

// std::vector<bool> is not contiguous, so the flags live in a plain array.
struct LabeledFlags {
    explicit LabeledFlags(std::span<const Keypoint> keypoints)
        : flags(new bool[keypoints.size()]), count(keypoints.size()) {
        for (std::size_t i = 0; i < count; ++i) flags[i] = keypoints[i].labeled();
    }
    std::span<const bool> span() const { return {flags.get(), count}; }

    std::unique_ptr<bool[]> flags;
    std::size_t count;
};

}  // namespace

void LossWeights::validate() const {
    if (!std::isfinite(alpha1) || !std::isfinite(alpha2) || !std::isfinite(logit_scale) || alpha1 < 0 ||
        alpha2 < 0 || !(logit_scale > 0)) {
        throw ConfigMismatchError("loss weights must be finite with alpha >= 0 and logit_scale > 0");
    }
}

ag::Var presence_scores(const ag::Var& feature_tokens, const ag::Var& prompts) {
    check_width(feature_tokens.dim(1), prompts.dim(1), "presence_scores");
    return ag::pairwise_dot(ag::l2_normalize_rows(feature_tokens), ag::l2_normalize_rows(prompts));
}

ag::Var spatial_loss(const ag::Var& scores, const Tensor& target, std::span<const double> mask) {
    if (scores.value().rank() != 4 || target.rank() != 4 || scores.dim(0) != target.dim(0) ||
        scores.dim(1) != target.dim(1)) {
        throw PreconditionError("spatial_loss: score map " + shape_str(scores.shape()) + " vs target " +
                                shape_str(target.shape));
    }
    const auto up = ag::upsample_bilinear(scores, target.dim(2), target.dim(3));
    return ag::masked_mse(up, target, mask);
}

ag::GridPoint pixel_to_grid(double x, double y, int stride) {
    return {(x + 0.5) / stride - 0.5, (y + 0.5) / stride - 0.5};
}

ag::Var sample_keypoint_features(const ag::Var& feature_tokens, int height, int width, int stride,
                                 std::span<const Keypoint> keypoints) {
    std::vector<ag::GridPoint> points;
    points.reserve(keypoints.size());
    for (const auto& kp : keypoints) points.push_back(pixel_to_grid(kp.x, kp.y, stride));
    const LabeledFlags keep(keypoints);
    return ag::bilinear_gather(feature_tokens, height, width, points, keep.span());
}

ag::Var match_matrix(const ag::Var& keypoint_features, const ag::Var& prompts, const ag::Var& logit_scale) {
    check_width(keypoint_features.dim(1), prompts.dim(1), "match_matrix");
    const auto m = ag::pairwise_dot(ag::l2_normalize_rows(keypoint_features), ag::l2_normalize_rows(prompts));
    return ag::mul_scalar(m, logit_scale);
}

ag::Var feature_loss(const ag::Var& match, std::span<const Keypoint> keypoints) {
    if (match.value().rank() != 2 || match.dim(0) != match.dim(1) ||
        match.dim(0) != static_cast<int>(keypoints.size())) {
        throw PreconditionError("feature_loss: match matrix " + shape_str(match.shape()) + " for " +
                                std::to_string(keypoints.size()) + " keypoints");
    }
    const LabeledFlags keep(keypoints);
    return ag::symmetric_diagonal_ce(match, keep.span());
}

ag::Var fuse(const ag::Var& feature_map, const ag::Var& scores) {
    if (feature_map.dim(0) != scores.dim(0) || feature_map.dim(2) != scores.dim(2) ||
        feature_map.dim(3) != scores.dim(3)) {
        throw PreconditionError("fuse: feature map " + shape_str(feature_map.shape()) + " vs scores " +
                                shape_str(scores.shape()));
    }
    return ag::concat_channels(feature_map, scores);
}

ag::Var total_loss(const ag::Var& l_pred, const ag::Var& l_spatial, const ag::Var& l_feature, const LossWeights& w) {
    if (!std::isfinite(l_pred.item()) || !std::isfinite(l_spatial.item()) || !std::isfinite(l_feature.item())) {
        throw NumericalError("non-finite loss component (pred " + std::to_string(l_pred.item()) + ", spatial " +
                             std::to_string(l_spatial.item()) + ", feature " + std::to_string(l_feature.item()) + ")");
    }
    return ag::add(ag::add(l_pred, ag::scale(l_spatial, w.alpha1)), ag::scale(l_feature, w.alpha2));
}

HeatmapStack presence_scores(const ProjectedFeature& feature, const PromptEmbedding& prompts) {
    ag::NoGradGuard guard;
    const int h = feature.height(), w = feature.width();
    const ag::Var tokens(feature.values.reshaped({h * w, feature.channels()}));
    const auto s = presence_scores(tokens, ag::Var(prompts.values));
    return HeatmapStack(ag::transpose(s).value().reshaped({prompts.size(), h, w}), feature.stride);
}

double spatial_loss(const HeatmapStack& scores, const HeatmapStack& target, std::span<const double> mask) {
    if (scores.channels() != target.channels()) throw PreconditionError("spatial_loss: channel count mismatch");
    ag::NoGradGuard guard;
    const ag::Var s(scores.values.reshaped({1, scores.channels(), scores.height(), scores.width()}));
    const Tensor t = target.values.reshaped({1, target.channels(), target.height(), target.width()});
    return spatial_loss(s, t, mask).item();
}

Tensor sample_keypoint_features(const ProjectedFeature& feature, std::span<const Keypoint> keypoints) {
    ag::NoGradGuard guard;
    const int h = feature.height(), w = feature.width();
    const ag::Var tokens(feature.values.reshaped({h * w, feature.channels()}));
    return sample_keypoint_features(tokens, h, w, feature.stride, keypoints).value();
}

MatchMatrix match_matrix(const Tensor& keypoint_features, const PromptEmbedding& prompts, double logit_scale) {
    ag::NoGradGuard guard;
    return {match_matrix(ag::Var(keypoint_features), ag::Var(prompts.values), ag::Var::scalar(logit_scale)).value()};
}

double feature_loss(const MatchMatrix& match, std::span<const Keypoint> keypoints) {
    ag::NoGradGuard guard;
    return feature_loss(ag::Var(match.values), keypoints).item();
}

Tensor fuse(const Tensor& feature_map, const HeatmapStack& scores) {
    ag::NoGradGuard guard;
    if (feature_map.rank() != 3) throw PreconditionError("fuse: feature map must be [C, H, W]");
    const int c = feature_map.dim(0), h = feature_map.dim(1), w = feature_map.dim(2);
    const ag::Var f(feature_map.reshaped({1, c, h, w}));
    const ag::Var s(scores.values.reshaped({1, scores.channels(), scores.height(), scores.width()}));
    return fuse(f, s).value().reshaped({c + scores.channels(), h, w});
}

double total_loss(double l_pred, double l_spatial, double l_feature, const LossWeights& w) {
    ag::NoGradGuard guard;
    return total_loss(ag::Var::scalar(l_pred), ag::Var::scalar(l_spatial), ag::Var::scalar(l_feature), w).item();
}

}  // namespace clamp
