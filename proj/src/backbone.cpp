#include "clamp/backbone.hpp"

#include <cmath>

#include "clamp/errors.hpp"

namespace clamp {

ToyCnnEncoder::ToyCnnEncoder(const std::vector<int>& channels, Rng& rng) {
    if (channels.size() != 4) throw ConfigMismatchError("toy-cnn needs exactly 4 stage widths");
    int in = 3;
    for (std::size_t i = 0; i < channels.size(); ++i) {
        if (channels[i] < 1) throw ConfigMismatchError("toy-cnn stage widths must be positive");
        auto conv = i == 0 ? std::make_unique<nn::Conv2d>(in, channels[i], 4, 4, 0, rng)
                           : std::make_unique<nn::Conv2d>(in, channels[i], 3, 2, 1, rng);
        register_module("stages." + std::to_string(i), *conv);
        stages_.push_back(std::move(conv));
        in = channels[i];
    }
    channels_ = in;
}

EncodedImage ToyCnnEncoder::forward(const ag::Var& images) {
    ag::Var x = images;
    for (std::size_t i = 0; i < stages_.size(); ++i) {
        x = stages_[i]->forward(x);
        if (i + 1 < stages_.size()) x = ag::relu(x);
    }
    return {x, {}};
}

Bottleneck::Bottleneck(int inplanes, int planes, int stride, Rng& rng)
    : conv1(inplanes, planes, 1, 1, 0, rng, false),
      bn1(planes),
      conv2(planes, planes, 3, 1, 1, rng, false),
      bn2(planes),
      conv3(planes, planes * 4, 1, 1, 0, rng, false),
      bn3(planes * 4),
      stride_(stride) {
    register_module("conv1", conv1);
    register_module("bn1", bn1);
    register_module("conv2", conv2);
    register_module("bn2", bn2);
    register_module("conv3", conv3);
    register_module("bn3", bn3);
    if (stride > 1 || inplanes != planes * 4) {
        downsample_conv = std::make_unique<nn::Conv2d>(inplanes, planes * 4, 1, 1, 0, rng, false);
        downsample_bn = std::make_unique<nn::BatchNorm2d>(planes * 4);
        register_module("downsample.1", *downsample_conv);
        register_module("downsample.2", *downsample_bn);
    }
}

ag::Var Bottleneck::forward(const ag::Var& x) {
    auto out = ag::relu(bn1.forward(conv1.forward(x)));
    out = ag::relu(bn2.forward(conv2.forward(out)));
    if (stride_ > 1) out = ag::avg_pool2d(out, stride_);
    out = bn3.forward(conv3.forward(out));
    ag::Var identity = x;
    if (downsample_conv) {
        if (stride_ > 1) identity = ag::avg_pool2d(identity, stride_);
        identity = downsample_bn->forward(downsample_conv->forward(identity));
    }
    return ag::relu(ag::add(out, identity));
}

ModifiedResNetEncoder::ModifiedResNetEncoder(const std::vector<int>& layers, int width, Rng& rng)
    : conv1(3, width / 2, 3, 2, 1, rng, false),
      bn1(width / 2),
      conv2(width / 2, width / 2, 3, 1, 1, rng, false),
      bn2(width / 2),
      conv3(width / 2, width, 3, 1, 1, rng, false),
      bn3(width),
      width_(width) {
    if (layers.size() != 4 || width < 2 || width % 2 != 0) throw ConfigMismatchError("invalid resnet configuration");
    register_module("conv1", conv1);
    register_module("bn1", bn1);
    register_module("conv2", conv2);
    register_module("bn2", bn2);
    register_module("conv3", conv3);
    register_module("bn3", bn3);
    int inplanes = width;
    for (int stage = 0; stage < 4; ++stage) {
        const int planes = width << stage;
        std::vector<std::unique_ptr<Bottleneck>> blocks;
        for (int b = 0; b < layers[static_cast<std::size_t>(stage)]; ++b) {
            const int stride = (b == 0 && stage > 0) ? 2 : 1;
            auto block = std::make_unique<Bottleneck>(inplanes, planes, stride, rng);
            register_module("layer" + std::to_string(stage + 1) + "." + std::to_string(b), *block);
            blocks.push_back(std::move(block));
            inplanes = planes * 4;
        }
        layers_.push_back(std::move(blocks));
    }
}

EncodedImage ModifiedResNetEncoder::forward(const ag::Var& images) {
    auto x = ag::relu(bn1.forward(conv1.forward(images)));
    x = ag::relu(bn2.forward(conv2.forward(x)));
    x = ag::relu(bn3.forward(conv3.forward(x)));
    x = ag::avg_pool2d(x, 2);
    for (auto& stage : layers_)
        for (auto& block : stage) x = block->forward(x);
    return {x, {}};
}

VitEncoder::VitEncoder(int input_size, int patch, int width, int layers, int heads, Rng& rng)
    : conv1(3, width, patch, patch, 0, rng, false),
      ln_pre(width),
      transformer(width, layers, heads, rng),
      patch_(patch),
      width_(width),
      grid_(input_size / patch) {
    if (patch < 1 || input_size % patch != 0) {
        throw ConfigMismatchError("input size " + std::to_string(input_size) + " is not a multiple of the patch size");
    }
    const double scale = 1.0 / std::sqrt(width);
    register_module("conv1", conv1);
    register_parameter("class_embedding", class_embedding, nn::normal_tensor({width}, scale, rng));
    register_parameter("positional_embedding", positional_embedding,
                       nn::normal_tensor({grid_ * grid_ + 1, width}, scale, rng));
    register_module("ln_pre", ln_pre);
    register_module("transformer", transformer);
}

EncodedImage VitEncoder::forward(const ag::Var& images) {
    const auto patches = conv1.forward(images);
    if (patches.dim(2) != grid_ || patches.dim(3) != grid_) {
        throw PreconditionError("vit encoder built for a " + std::to_string(grid_ * patch_) + " px input, got " +
                                shape_str(images.shape()));
    }
    const auto cls_row = ag::reshape(class_embedding, {1, width_});
    std::vector<ag::Var> maps, cls;
    for (int b = 0; b < images.dim(0); ++b) {
        const std::vector<ag::Var> parts{cls_row, ag::map_to_tokens(patches, b)};
        auto x = ag::add(ag::concat_rows(parts), positional_embedding);
        x = transformer.forward(ln_pre.forward(x));
        cls.push_back(ag::slice_rows(x, 0, 1));
        maps.push_back(ag::slice_rows(x, 1, grid_ * grid_));
    }
    return {ag::tokens_to_map(maps, grid_, grid_), ag::concat_rows(cls)};
}

DenseMode parse_dense_mode(const std::string& name) {
    if (name == "attention") return DenseMode::kAttention;
    if (name == "value") return DenseMode::kValue;
    throw ConfigMismatchError("unknown projector dense mode '" + name + "' (expected attention or value)");
}

std::string dense_mode_name(DenseMode mode) { return mode == DenseMode::kValue ? "value" : "attention"; }

AttnPoolProjector::AttnPoolProjector(int grid_h, int grid_w, int in_dim, int heads, int out_dim, Rng& rng,
                                     DenseMode mode)
    : k_proj(in_dim, in_dim, rng),
      q_proj(in_dim, in_dim, rng),
      v_proj(in_dim, in_dim, rng),
      c_proj(in_dim, out_dim, rng),
      heads_(heads),
      out_dim_(out_dim),
      cells_(grid_h * grid_w),
      mode_(mode) {
    if (heads < 1 || in_dim % heads != 0) {
        throw ConfigMismatchError("attention pool width " + std::to_string(in_dim) + " is not divisible by " +
                                  std::to_string(heads) + " heads");
    }
    register_parameter("positional_embedding", positional_embedding,
                       nn::normal_tensor({cells_ + 1, in_dim}, 1.0 / std::sqrt(in_dim), rng));
    register_module("k_proj", k_proj);
    register_module("q_proj", q_proj);
    register_module("v_proj", v_proj);
    register_module("c_proj", c_proj);
}

Projection AttnPoolProjector::forward(const EncodedImage& encoded, int index) const {
    const auto x = ag::map_to_tokens(encoded.map, index);
    if (x.dim(0) != cells_) {
        throw PreconditionError("attention pool expects " + std::to_string(cells_) + " cells, got " +
                                std::to_string(x.dim(0)));
    }
    const std::vector<ag::Var> parts{ag::mean_rows(x), x};
    const auto seq = ag::add(ag::concat_rows(parts), positional_embedding);
    if (mode_ == DenseMode::kValue) {
        const auto tokens = c_proj.forward(v_proj.forward(ag::slice_rows(seq, 1, cells_)));
        return {tokens, tokens};
    }
    const auto attended = nn::attend(q_proj.forward(seq), k_proj.forward(seq), v_proj.forward(seq), heads_, nullptr);
    const auto tokens = ag::slice_rows(c_proj.forward(attended), 1, cells_);
    return {tokens, tokens};
}

VitLinearProjector::VitLinearProjector(int width, int out_dim, Rng& rng) : ln_post(width), out_dim_(out_dim) {
    register_module("ln_post", ln_post);
    register_parameter("proj", proj, nn::normal_tensor({width, out_dim}, 1.0 / std::sqrt(width), rng));
}

Projection VitLinearProjector::forward(const EncodedImage& encoded, int index) const {
    if (!encoded.cls.defined()) throw PreconditionError("vit-linear projector needs a class token");
    const auto tokens = ag::matmul(ln_post.forward(ag::map_to_tokens(encoded.map, index)), proj);
    const auto cls = ag::matmul(ln_post.forward(ag::slice_rows(encoded.cls, index, 1)), proj);
    const std::vector<ag::Var> parts{cls, tokens};
    return {tokens, ag::concat_rows(parts)};
}

std::unique_ptr<ImageEncoder> make_encoder(const EncoderConfig& config, int input_size, Rng& rng) {
    if (config.kind == "toy-cnn") return std::make_unique<ToyCnnEncoder>(config.toy_channels, rng);
    if (config.kind == "resnet") return std::make_unique<ModifiedResNetEncoder>(config.resnet_layers, config.resnet_width, rng);
    if (config.kind == "vit") {
        return std::make_unique<VitEncoder>(input_size, config.vit_patch, config.vit_width, config.vit_layers,
                                            config.vit_heads, rng);
    }
    throw ConfigMismatchError("unknown encoder kind '" + config.kind + "'");
}

}  // namespace clamp
