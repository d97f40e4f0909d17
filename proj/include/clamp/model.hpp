#pragma once

#include <cstdint>
#include <memory>
#include <vector>

#include "clamp/adaptation.hpp"
#include "clamp/backbone.hpp"
#include "clamp/heatmap.hpp"
#include "clamp/predictor.hpp"
#include "clamp/prompt.hpp"
#include "clamp/schema.hpp"
#include "clamp/text_encoder.hpp"
#include "clamp/tokenizer.hpp"

namespace clamp {

struct ModelConfig {
    KeypointSchema schema = KeypointSchema::ap10k();
    int input_size = 256;
    EncoderConfig encoder;
    /// Attention-pool heads; 0 picks C / 64 (at least 1).
    int projector_heads = 0;
    /// "attention" or "value", see DenseMode.
    std::string projector_dense = "attention";
    /// text.vocab_size 0 takes the tokenizer vocabulary size.
    TextEncoderConfig text;
    TokenizerSpec tokenizer;
    int prefix_length = kDefaultPrefixLength;
    int refiner_heads = 8;
    double gamma_init = 1e-4;
    bool refiner_identity_init = false;
    /// stages == 0 derives the count from the encoder stride (output stride 4).
    PredictorConfig predictor{0, 256, true};
    bool learnable_logit_scale = false;
    double logit_scale_init = 10.0;
    /// Plain encoder + predictor without prompts or auxiliary losses.
    bool baseline = false;

    /// Desk-scale defaults: toy-cnn encoder, one-layer random text encoder
    /// over the builtin word vocabulary, narrow predictor.
    static ModelConfig toy(KeypointSchema schema);
};

/// One training batch in crop coordinates.
struct Batch {
    Tensor images;  // [B, 3, h, w]
    std::vector<std::vector<Keypoint>> keypoints;
    Tensor targets;                      // [B, N, h1, w1]
    std::vector<double> target_weights;  // B * N

    int size() const { return images.dim(0); }
};

struct ForwardResult {
    LossParts losses;  // batch means
    std::vector<double> item_pred, item_spatial, item_feature, item_total;
    ag::Var heatmaps;               // [B, N, h1, w1]
    ag::Var scores;                 // [B, N, H, W]; undefined for the baseline
    std::vector<ag::Var> match;     // per item [N, N]
    std::vector<ag::Var> prompts;   // per item enhanced [N, C_emb]
};

struct PosePrediction {
    std::vector<Point2> coords;
    std::vector<double> confidence;
};

struct InferResult {
    std::vector<PosePrediction> poses;
    Tensor heatmaps;  // [B, N, h1, w1]
};

class ClampModel : public nn::Module {
public:
    /// Validates every width and stride before building anything.
    ClampModel(const ModelConfig& config, std::uint64_t seed);

    ForwardResult forward_train(const Batch& batch, const LossWeights& weights);
    /// Runs without recording gradients; call set_training(false) first for
    /// running-statistics normalisation.
    InferResult forward_infer(const Tensor& images);
    /// Score maps, heatmaps and match matrices for given keypoints without
    /// losses or gradients.
    ForwardResult analyze(const Tensor& images, const std::vector<std::vector<Keypoint>>& keypoints,
                          double logit_scale = 1.0);

    const ModelConfig& config() const { return config_; }
    int num_keypoints() const { return config_.schema.size(); }
    int feature_stride() const { return encoder_->stride(); }
    int heatmap_size() const { return config_.input_size / 4; }
    int feature_size() const { return config_.input_size / encoder_->stride(); }

    ImageEncoder& encoder() { return *encoder_; }
    KeypointPredictor& predictor() { return *predictor_; }
    TextEncoder* text_encoder() { return text_.get(); }
    PromptLearner* prompt_learner() { return prompts_.get(); }
    PromptRefiner* refiner() { return refiner_.get(); }
    Projector* projector() { return projector_.get(); }
    const ag::Var& logit_scale() const { return logit_scale_; }

    /// Trainable parameters of the image encoder.
    nn::NamedVars backbone_parameters() const;
    /// Every other trainable parameter.
    nn::NamedVars head_parameters() const;

private:
    struct Trunk {
        EncodedImage encoded;
        std::vector<Projection> projections;
        std::vector<ag::Var> prompts;
        ag::Var scores;
        ag::Var heatmaps;
    };
    Trunk run(const ag::Var& images);

    ModelConfig config_;
    std::unique_ptr<ImageEncoder> encoder_;
    std::unique_ptr<Projector> projector_;
    std::unique_ptr<TextEncoder> text_;
    std::unique_ptr<PromptLearner> prompts_;
    std::unique_ptr<PromptRefiner> refiner_;
    std::unique_ptr<KeypointPredictor> predictor_;
    ag::Var logit_scale_;
};

/// encoder -> predictor, no adaptation path.
ag::Var forward_baseline(ImageEncoder& encoder, KeypointPredictor& predictor, const ag::Var& images);

/// Mean over batch items of the per-item masked heatmap MSE; per-item
/// values are appended to `items` when given.
ag::Var heatmap_loss(const ag::Var& heatmaps, const Batch& batch, std::vector<double>* items = nullptr);

/// Throws ConfigMismatchError describing the first inconsistency.
void validate_model_config(const ModelConfig& config);

}  // namespace clamp
