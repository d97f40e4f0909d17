#pragma once

#include <memory>
#include <string>
#include <vector>

#include "clamp/nn.hpp"

namespace clamp {

struct EncoderConfig {
    std::string kind = "toy-cnn";  // toy-cnn | resnet | vit
    std::vector<int> toy_channels = {16, 32, 64, 64};
    std::vector<int> resnet_layers = {3, 4, 6, 3};
    int resnet_width = 64;
    int vit_patch = 16;
    int vit_width = 768;
    int vit_layers = 12;
    int vit_heads = 12;
};

struct EncodedImage {
    ag::Var map;  // F_origin [B, C, H, W]
    ag::Var cls;  // [B, C] for token-based encoders, else undefined
};

class ImageEncoder : public nn::Module {
public:
    virtual EncodedImage forward(const ag::Var& images) = 0;
    virtual int stride() const = 0;
    virtual int channels() const = 0;
    virtual std::string kind() const = 0;
};

/// Four convolution stages (a stride-4 patchify then three stride-2 3x3
/// convolutions) with ReLU; total stride 32.
class ToyCnnEncoder : public ImageEncoder {
public:
    ToyCnnEncoder(const std::vector<int>& channels, Rng& rng);
    EncodedImage forward(const ag::Var& images) override;
    int stride() const override { return 32; }
    int channels() const override { return channels_; }
    std::string kind() const override { return "toy-cnn"; }

private:
    std::vector<std::unique_ptr<nn::Conv2d>> stages_;
    int channels_;
};

class Bottleneck : public nn::Module {
public:
    Bottleneck(int inplanes, int planes, int stride, Rng& rng);
    ag::Var forward(const ag::Var& x);

    nn::Conv2d conv1;
    nn::BatchNorm2d bn1;
    nn::Conv2d conv2;
    nn::BatchNorm2d bn2;
    nn::Conv2d conv3;
    nn::BatchNorm2d bn3;
    std::unique_ptr<nn::Conv2d> downsample_conv;
    std::unique_ptr<nn::BatchNorm2d> downsample_bn;

private:
    int stride_;
};

/// CLIP ModifiedResNet trunk (3-conv stem, anti-aliased strided
/// bottlenecks) without the attention pool; stride 32, C = 32 * width.
class ModifiedResNetEncoder : public ImageEncoder {
public:
    ModifiedResNetEncoder(const std::vector<int>& layers, int width, Rng& rng);
    EncodedImage forward(const ag::Var& images) override;
    int stride() const override { return 32; }
    int channels() const override { return width_ * 32; }
    std::string kind() const override { return "resnet"; }

    nn::Conv2d conv1;
    nn::BatchNorm2d bn1;
    nn::Conv2d conv2;
    nn::BatchNorm2d bn2;
    nn::Conv2d conv3;
    nn::BatchNorm2d bn3;

private:
    std::vector<std::vector<std::unique_ptr<Bottleneck>>> layers_;
    int width_;
};

/// CLIP VisionTransformer up to (not including) ln_post; patch tokens form
/// F_origin and the class token is returned separately.
class VitEncoder : public ImageEncoder {
public:
    VitEncoder(int input_size, int patch, int width, int layers, int heads, Rng& rng);
    EncodedImage forward(const ag::Var& images) override;
    int stride() const override { return patch_; }
    int channels() const override { return width_; }
    std::string kind() const override { return "vit"; }

    nn::Conv2d conv1;
    ag::Var class_embedding;       // [width]
    ag::Var positional_embedding;  // [grid * grid + 1, width]
    nn::LayerNorm ln_pre;
    nn::Transformer transformer;

private:
    int patch_, width_, grid_;
};

/// Per-item projection to the joint embedding space.
struct Projection {
    ag::Var tokens;   // F as [H * W, C_emb]
    ag::Var context;  // keys/values for prompt enhancement, [T, C_emb]
};

class Projector : public nn::Module {
public:
    virtual Projection forward(const EncodedImage& encoded, int index) const = 0;
    virtual std::string kind() const = 0;
    virtual int out_dim() const = 0;
};

/// CLIP attention pooling kept dense: the mean token is prepended, every
/// position attends over all positions, and the per-position outputs are
/// projected. Context is the H * W projected cells.
/// How per-position outputs of the attention pool are formed. kAttention keeps
/// the full self-attention output at every cell. kValue skips the token mixing
/// and uses c_proj(v_proj(x)) per cell, which stays spatially distinct when
/// q/k are untrained and attention is near uniform.
enum class DenseMode { kAttention, kValue };

DenseMode parse_dense_mode(const std::string& name);
std::string dense_mode_name(DenseMode mode);

class AttnPoolProjector : public Projector {
public:
    AttnPoolProjector(int grid_h, int grid_w, int in_dim, int heads, int out_dim, Rng& rng,
                      DenseMode mode = DenseMode::kAttention);
    Projection forward(const EncodedImage& encoded, int index) const override;
    std::string kind() const override { return "resnet-attnpool"; }
    int out_dim() const override { return out_dim_; }

    ag::Var positional_embedding;  // [H * W + 1, in_dim]
    nn::Linear k_proj, q_proj, v_proj, c_proj;

private:
    int heads_, out_dim_, cells_;
    DenseMode mode_;
};

/// ln_post followed by the linear projection, applied to every patch token;
/// the projected class token is prepended to the context.
class VitLinearProjector : public Projector {
public:
    VitLinearProjector(int width, int out_dim, Rng& rng);
    Projection forward(const EncodedImage& encoded, int index) const override;
    std::string kind() const override { return "vit-linear"; }
    int out_dim() const override { return out_dim_; }

    nn::LayerNorm ln_post;
    ag::Var proj;  // [width, out_dim]

private:
    int out_dim_;
};

std::unique_ptr<ImageEncoder> make_encoder(const EncoderConfig& config, int input_size, Rng& rng);

}  // namespace clamp
