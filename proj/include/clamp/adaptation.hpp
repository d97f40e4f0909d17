#pragma once

// Spatial and feature-level alignment between projected image features and
// prompt embeddings, score-map fusion and the combined objective.
//
// The ag:: overloads operate on graph variables and are what the model
// trains through; the Tensor overloads wrap them for inspection and tests.

#include <span>
#include <vector>

#include "clamp/autograd.hpp"
#include "clamp/heatmap.hpp"
#include "clamp/schema.hpp"

namespace clamp {

/// Projected image feature F, layout [H, W, C_emb] (row-major, so the data
/// doubles as a [H * W, C_emb] token matrix).
struct ProjectedFeature {
    Tensor values;
    int stride = 32;

    int height() const { return values.dim(0); }
    int width() const { return values.dim(1); }
    int channels() const { return values.dim(2); }
};

enum class PromptVariant { origin, enhanced };

struct PromptEmbedding {
    Tensor values;  // [N, C_emb]
    PromptVariant variant = PromptVariant::origin;

    int size() const { return values.dim(0); }
};

/// Rows index sampled keypoint features, columns index prompts.
struct MatchMatrix {
    Tensor values;  // [N, N]
};

struct LossWeights {
    double alpha1 = 1.0;
    double alpha2 = 1.0;
    double logit_scale = 1.0;

    /// Throws ConfigMismatchError unless finite, alphas >= 0, scale > 0.
    void validate() const;
};

struct LossParts {
    ag::Var l_pred, l_spatial, l_feature, total;
};

// -- graph variants --------------------------------------------------------

/// Cosine scores [H * W, N] between feature tokens [H * W, C] and prompts
/// [N, C]; both sides are L2-normalised per row first.
ag::Var presence_scores(const ag::Var& feature_tokens, const ag::Var& prompts);

/// Masked MSE of the bilinearly upsampled score map [B, N, H, W] against
/// targets [B, N, h1, w1]; mask holds one flag per (item, keypoint).
ag::Var spatial_loss(const ag::Var& scores, const Tensor& target, std::span<const double> mask);

/// Feature-grid coordinate of an input pixel for a map of stride s0.
ag::GridPoint pixel_to_grid(double x, double y, int stride);

/// Bilinear samples of feature tokens [H * W, C] at the keypoints; rows for
/// unlabeled keypoints are zero.
ag::Var sample_keypoint_features(const ag::Var& feature_tokens, int height, int width, int stride,
                                 std::span<const Keypoint> keypoints);

/// logit_scale * normalise(features) normalise(prompts)^T. The scale is a
/// [1] variable so it may be learnable.
ag::Var match_matrix(const ag::Var& keypoint_features, const ag::Var& prompts, const ag::Var& logit_scale);

ag::Var feature_loss(const ag::Var& match, std::span<const Keypoint> keypoints);

/// Channel concatenation [B, C, H, W] ++ [B, N, H, W].
ag::Var fuse(const ag::Var& feature_map, const ag::Var& scores);

/// l_pred + alpha1 * l_spatial + alpha2 * l_feature; throws NumericalError
/// when any component is not finite.
ag::Var total_loss(const ag::Var& l_pred, const ag::Var& l_spatial, const ag::Var& l_feature, const LossWeights& w);

// -- value variants -----------------------------------------------------------

/// Score map S as [N, H, W] with the feature's stride.
HeatmapStack presence_scores(const ProjectedFeature& feature, const PromptEmbedding& prompts);
/// S is upsampled to the target size before comparison.
double spatial_loss(const HeatmapStack& scores, const HeatmapStack& target, std::span<const double> mask);
Tensor sample_keypoint_features(const ProjectedFeature& feature, std::span<const Keypoint> keypoints);
MatchMatrix match_matrix(const Tensor& keypoint_features, const PromptEmbedding& prompts, double logit_scale);
double feature_loss(const MatchMatrix& match, std::span<const Keypoint> keypoints);
/// [C, H, W] ++ [N, H, W] -> [C + N, H, W].
Tensor fuse(const Tensor& feature_map, const HeatmapStack& scores);
double total_loss(double l_pred, double l_spatial, double l_feature, const LossWeights& w);

}  // namespace clamp
