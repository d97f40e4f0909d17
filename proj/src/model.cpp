#include "clamp/model.hpp"

#include <bit>

#include "clamp/errors.hpp"

namespace clamp {

namespace {

int encoder_stride(const EncoderConfig& e) {
    if (e.kind == "vit") return e.vit_patch;
    if (e.kind == "toy-cnn" || e.kind == "resnet") return 32;
    throw ConfigMismatchError("unknown encoder kind '" + e.kind + "'");
}

int encoder_channels(const EncoderConfig& e) {
    if (e.kind == "vit") return e.vit_width;
    if (e.kind == "resnet") return e.resnet_width * 32;
    return e.toy_channels.empty() ? 0 : e.toy_channels.back();
}

int predictor_stages(const ModelConfig& c) {
    if (c.predictor.stages > 0) return c.predictor.stages;
    const int ratio = encoder_stride(c.encoder) / 4;
    return ratio > 1 && std::has_single_bit(static_cast<unsigned>(ratio)) ? std::countr_zero(static_cast<unsigned>(ratio))
                                                                          : 0;
}

int projector_heads(const ModelConfig& c) {
    if (c.projector_heads > 0) return c.projector_heads;
    return std::max(1, encoder_channels(c.encoder) / 64);
}

// Mean of [1]-shaped scalars.
ag::Var mean_of(const std::vector<ag::Var>& scalars) {
    std::vector<ag::Var> rows;
    for (const auto& s : scalars) rows.push_back(ag::reshape(s, {1, 1}));
    return ag::reshape(ag::mean(ag::concat_rows(rows)), {1});
}

}  // namespace

ModelConfig ModelConfig::toy(KeypointSchema schema) {
    ModelConfig c;
    c.schema = std::move(schema);
    c.encoder.kind = "toy-cnn";
    c.tokenizer = {"word", ""};
    c.text.vocab_size = WordTokenizer::builtin().vocab_size();
    c.text.context_length = 24;
    c.text.width = 32;
    c.text.layers = 1;
    c.text.heads = 4;
    c.text.embed_dim = 32;
    c.refiner_heads = 8;
    c.predictor = {0, 32, true};
    // no pretrained attention to start from
    c.projector_dense = "value";
    return c;
}

void validate_model_config(const ModelConfig& c) {
    c.schema.validate();
    const int stride = encoder_stride(c.encoder);
    const int channels = encoder_channels(c.encoder);
    auto fail = [](const std::string& msg) { throw ConfigMismatchError(msg); };
    if (channels < 1) fail("encoder has no output channels");
    if (c.input_size < stride || c.input_size % stride != 0) {
        fail("input size " + std::to_string(c.input_size) + " is not a multiple of the encoder stride " +
             std::to_string(stride));
    }
    const int stages = predictor_stages(c);
    if (stages < 1 || (stride >> stages) != 4 || (stride % (1 << stages)) != 0) {
        fail("predictor with " + std::to_string(stages) + " deconvolution stages cannot bring stride " +
             std::to_string(stride) + " to 4");
    }
    if (c.baseline) return;
    const int emb = c.text.embed_dim;
    if (emb < 1) fail("embedding width must be positive");
    if (c.refiner_heads < 1 || emb % c.refiner_heads != 0) {
        fail("embedding width " + std::to_string(emb) + " is not divisible by " + std::to_string(c.refiner_heads) +
             " refiner heads");
    }
    if (c.text.width % c.text.heads != 0) fail("text width is not divisible by its heads");
    if (c.encoder.kind != "vit" && channels % projector_heads(c) != 0) {
        fail("encoder width " + std::to_string(channels) + " is not divisible by " +
             std::to_string(projector_heads(c)) + " projector heads");
    }
    parse_dense_mode(c.projector_dense);
    if (c.prefix_length < 1) fail("prefix length must be >= 1");
    if (c.learnable_logit_scale && !(c.logit_scale_init > 0)) fail("logit scale must be positive");
    if (!(c.gamma_init == c.gamma_init)) fail("gamma init is NaN");
}

ClampModel::ClampModel(const ModelConfig& config, std::uint64_t seed) : config_(config) {
    validate_model_config(config_);
    Rng rng(seed);
    const int n = config_.schema.size();
    encoder_ = make_encoder(config_.encoder, config_.input_size, rng);
    register_module("encoder", *encoder_);
    const int c = encoder_->channels();
    PredictorConfig pc = config_.predictor;
    pc.stages = predictor_stages(config_);

    if (!config_.baseline) {
        const int grid = config_.input_size / encoder_->stride();
        const int emb = config_.text.embed_dim;
        if (encoder_->kind() == "vit") {
            projector_ = std::make_unique<VitLinearProjector>(c, emb, rng);
        } else {
            projector_ = std::make_unique<AttnPoolProjector>(grid, grid, c, projector_heads(config_), emb, rng,
                                                             parse_dense_mode(config_.projector_dense));
        }
        register_module("projector", *projector_);

        const auto tokenizer = make_tokenizer(config_.tokenizer);
        if (config_.text.vocab_size == 0) config_.text.vocab_size = tokenizer->vocab_size();
        if (tokenizer->vocab_size() > config_.text.vocab_size) {
            throw ConfigMismatchError("tokenizer has " + std::to_string(tokenizer->vocab_size()) +
                                      " tokens but the text encoder only " + std::to_string(config_.text.vocab_size));
        }
        text_ = std::make_unique<TextEncoder>(config_.text, rng);
        text_->freeze();
        register_module("text_encoder", *text_);
        prompts_ = std::make_unique<PromptLearner>(build_prompts(config_.schema, *tokenizer, config_.prefix_length),
                                                   *text_, rng);
        register_module("prompt_learner", *prompts_);
        refiner_ = std::make_unique<PromptRefiner>(emb, config_.refiner_heads, rng, config_.gamma_init);
        if (config_.refiner_identity_init) refiner_->init_identity();
        register_module("refiner", *refiner_);
        if (config_.learnable_logit_scale) {
            register_parameter("logit_scale", logit_scale_, Tensor({1}, config_.logit_scale_init));
        }
        predictor_ = std::make_unique<KeypointPredictor>(std::vector<int>{c, n}, n, pc, rng);
    } else {
        predictor_ = std::make_unique<KeypointPredictor>(std::vector<int>{c}, n, pc, rng);
    }
    register_module("predictor", *predictor_);
}

ClampModel::Trunk ClampModel::run(const ag::Var& images) {
    if (images.value().rank() != 4 || images.dim(1) != 3 || images.dim(2) != config_.input_size ||
        images.dim(3) != config_.input_size) {
        throw PreconditionError("model expects images [B, 3, " + std::to_string(config_.input_size) + ", " +
                                std::to_string(config_.input_size) + "], got " + shape_str(images.shape()));
    }
    Trunk t;
    t.encoded = encoder_->forward(images);
    if (config_.baseline) {
        t.heatmaps = predictor_->forward(t.encoded.map);
        return t;
    }
    const int h = t.encoded.map.dim(2), w = t.encoded.map.dim(3);
    const auto origin = prompts_->encode();
    const auto related = refiner_->relate(origin);
    std::vector<ag::Var> score_tokens;
    for (int b = 0; b < images.dim(0); ++b) {
        auto proj = projector_->forward(t.encoded, b);
        auto enhanced = refiner_->enhance(related, proj.context);
        score_tokens.push_back(presence_scores(proj.tokens, enhanced));
        t.projections.push_back(std::move(proj));
        t.prompts.push_back(std::move(enhanced));
    }
    t.scores = ag::tokens_to_map(score_tokens, h, w);
    t.heatmaps = predictor_->forward(fuse(t.encoded.map, t.scores));
    return t;
}

ag::Var heatmap_loss(const ag::Var& heatmaps, const Batch& batch, std::vector<double>* items) {
    const int bsz = heatmaps.dim(0), n = heatmaps.dim(1);
    if (batch.targets.shape != heatmaps.shape()) {
        throw PreconditionError("heatmaps " + shape_str(heatmaps.shape()) + " vs targets " +
                                shape_str(batch.targets.shape));
    }
    if (static_cast<int>(batch.target_weights.size()) != bsz * n) throw PreconditionError("target weight count");
    const std::size_t plane = static_cast<std::size_t>(n) * heatmaps.dim(2) * heatmaps.dim(3);
    std::vector<ag::Var> losses;
    for (int b = 0; b < bsz; ++b) {
        Tensor target({1, n, heatmaps.dim(2), heatmaps.dim(3)});
        std::copy_n(batch.targets.data.begin() + static_cast<std::ptrdiff_t>(b * plane), plane, target.data.begin());
        const std::span<const double> mask(batch.target_weights.data() + b * n, static_cast<std::size_t>(n));
        losses.push_back(ag::masked_mse(ag::slice_batch(heatmaps, b), target, mask));
        if (items) items->push_back(losses.back().item());
    }
    return mean_of(losses);
}

ForwardResult ClampModel::forward_train(const Batch& batch, const LossWeights& weights) {
    weights.validate();
    const int bsz = batch.size();
    if (static_cast<int>(batch.keypoints.size()) != bsz) throw PreconditionError("keypoint list does not match batch");
    ForwardResult r;
    Trunk t = run(ag::Var(batch.images));
    r.heatmaps = t.heatmaps;
    r.losses.l_pred = heatmap_loss(t.heatmaps, batch, &r.item_pred);
    if (config_.baseline) {
        r.losses.l_spatial = ag::Var::scalar(0.0);
        r.losses.l_feature = ag::Var::scalar(0.0);
        r.item_spatial.assign(static_cast<std::size_t>(bsz), 0.0);
        r.item_feature.assign(static_cast<std::size_t>(bsz), 0.0);
    } else {
        r.scores = t.scores;
        r.prompts = t.prompts;
        const int n = num_keypoints();
        const int h = t.scores.dim(2), w = t.scores.dim(3);
        const auto scale = logit_scale_.defined() ? logit_scale_ : ag::Var::scalar(weights.logit_scale);
        std::vector<ag::Var> spatial, feature;
        const std::size_t plane = static_cast<std::size_t>(n) * batch.targets.dim(2) * batch.targets.dim(3);
        for (int b = 0; b < bsz; ++b) {
            const auto& kps = batch.keypoints[static_cast<std::size_t>(b)];
            if (static_cast<int>(kps.size()) != n) throw PreconditionError("keypoint count does not match schema");
            Tensor target({1, n, batch.targets.dim(2), batch.targets.dim(3)});
            std::copy_n(batch.targets.data.begin() + static_cast<std::ptrdiff_t>(b * plane), plane, target.data.begin());
            const std::span<const double> mask(batch.target_weights.data() + b * n, static_cast<std::size_t>(n));
            spatial.push_back(spatial_loss(ag::slice_batch(t.scores, b), target, mask));
            const auto sampled = sample_keypoint_features(t.projections[static_cast<std::size_t>(b)].tokens, h, w,
                                                          encoder_->stride(), kps);
            r.match.push_back(match_matrix(sampled, t.prompts[static_cast<std::size_t>(b)], scale));
            feature.push_back(feature_loss(r.match.back(), kps));
            r.item_spatial.push_back(spatial.back().item());
            r.item_feature.push_back(feature.back().item());
        }
        r.losses.l_spatial = mean_of(spatial);
        r.losses.l_feature = mean_of(feature);
    }
    r.losses.total = total_loss(r.losses.l_pred, r.losses.l_spatial, r.losses.l_feature, weights);
    for (int b = 0; b < bsz; ++b) {
        const auto i = static_cast<std::size_t>(b);
        r.item_total.push_back(clamp::total_loss(r.item_pred[i], r.item_spatial[i], r.item_feature[i], weights));
    }
    return r;
}

InferResult ClampModel::forward_infer(const Tensor& images) {
    ag::NoGradGuard guard;
    Trunk t = run(ag::Var(images));
    InferResult out;
    out.heatmaps = t.heatmaps.value();
    const int n = num_keypoints(), h1 = out.heatmaps.dim(2), w1 = out.heatmaps.dim(3);
    const std::size_t plane = static_cast<std::size_t>(n) * h1 * w1;
    for (int b = 0; b < images.dim(0); ++b) {
        Tensor item({n, h1, w1});
        std::copy_n(out.heatmaps.data.begin() + static_cast<std::ptrdiff_t>(b * plane), plane, item.data.begin());
        const HeatmapStack stack(std::move(item), config_.input_size / h1);
        out.poses.push_back({decode_argmax(stack), peak_values(stack)});
    }
    return out;
}

ForwardResult ClampModel::analyze(const Tensor& images, const std::vector<std::vector<Keypoint>>& keypoints,
                                  double logit_scale) {
    ag::NoGradGuard guard;
    if (config_.baseline) throw PreconditionError("a baseline model has no score maps");
    Trunk t = run(ag::Var(images));
    ForwardResult r;
    r.heatmaps = t.heatmaps;
    r.scores = t.scores;
    r.prompts = t.prompts;
    const auto scale = logit_scale_.defined() ? logit_scale_ : ag::Var::scalar(logit_scale);
    for (std::size_t b = 0; b < keypoints.size() && b < t.projections.size(); ++b) {
        const auto sampled = sample_keypoint_features(t.projections[b].tokens, t.scores.dim(2), t.scores.dim(3),
                                                      encoder_->stride(), keypoints[b]);
        r.match.push_back(match_matrix(sampled, t.prompts[b], scale));
    }
    return r;
}

nn::NamedVars ClampModel::backbone_parameters() const {
    nn::NamedVars out;
    for (auto& [name, v] : encoder_->named_parameters("encoder.")) {
        if (v.requires_grad()) out.emplace_back(name, v);
    }
    return out;
}

nn::NamedVars ClampModel::head_parameters() const {
    nn::NamedVars out;
    for (auto& [name, v] : named_parameters()) {
        if (v.requires_grad() && name.rfind("encoder.", 0) != 0) out.emplace_back(name, v);
    }
    return out;
}

ag::Var forward_baseline(ImageEncoder& encoder, KeypointPredictor& predictor, const ag::Var& images) {
    return predictor.forward(encoder.forward(images).map);
}

}  // namespace clamp
