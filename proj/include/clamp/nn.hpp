#pragma once

#include <memory>
#include <string>
#include <utility>
#include <vector>

#include "clamp/autograd.hpp"
#include "clamp/rng.hpp"

namespace clamp::nn {

using NamedVars = std::vector<std::pair<std::string, ag::Var>>;

/// Base for layers with named, checkpointable state. Parameter names follow
/// the PyTorch/CLIP naming scheme so released weights map onto them by name.
/// Modules hold raw pointers to registered children and are therefore
/// neither copyable nor movable.
class Module {
public:
    Module() = default;
    virtual ~Module() = default;
    Module(const Module&) = delete;
    Module& operator=(const Module&) = delete;

    NamedVars named_parameters(const std::string& prefix = "") const;
    NamedVars named_buffers(const std::string& prefix = "") const;
    /// Parameters followed by buffers.
    NamedVars state(const std::string& prefix = "") const;

    void set_training(bool on);
    bool training() const { return training_; }
    /// Marks every parameter as not requiring gradients.
    void freeze();
    void zero_grad();
    std::size_t parameter_count() const;

protected:
    ag::Var& register_parameter(std::string name, ag::Var& slot, Tensor init);
    ag::Var& register_buffer(std::string name, ag::Var& slot, Tensor init);
    void register_module(std::string name, Module& child);

private:
    NamedVars params_;
    NamedVars buffers_;
    std::vector<std::pair<std::string, Module*>> children_;
    bool training_ = true;
};

Tensor normal_tensor(Shape shape, double stddev, Rng& rng);

class Linear : public Module {
public:
    Linear(int in, int out, Rng& rng, bool bias = true);
    ag::Var forward(const ag::Var& x) const { return ag::linear(x, weight, bias); }

    ag::Var weight;  // [out, in]
    ag::Var bias;    // [out]
};

class Conv2d : public Module {
public:
    Conv2d(int in, int out, int kernel, int stride, int pad, Rng& rng, bool bias = true);
    ag::Var forward(const ag::Var& x) const { return ag::conv2d(x, weight, bias, stride_, pad_); }

    ag::Var weight;  // [out, in, k, k]
    ag::Var bias;

private:
    int stride_, pad_;
};

class ConvTranspose2d : public Module {
public:
    ConvTranspose2d(int in, int out, int kernel, int stride, int pad, Rng& rng, bool bias = true);
    ag::Var forward(const ag::Var& x) const {
        return ag::conv_transpose2d(x, weight, bias, stride_, pad_);
    }
    int stride() const { return stride_; }
    int pad() const { return pad_; }

    ag::Var weight;  // [in, out, k, k]
    ag::Var bias;

private:
    int stride_, pad_;
};

class BatchNorm2d : public Module {
public:
    explicit BatchNorm2d(int channels);
    ag::Var forward(const ag::Var& x);

    ag::Var weight, bias;
    ag::Var running_mean, running_var;
};

class LayerNorm : public Module {
public:
    explicit LayerNorm(int width);
    ag::Var forward(const ag::Var& x) const { return ag::layer_norm(x, weight, bias); }

    ag::Var weight, bias;
};

/// Multi-head scaled dot-product attention with a packed input projection.
class MultiheadAttention : public Module {
public:
    MultiheadAttention(int width, int heads, Rng& rng);

    /// query [L, width], memory [S, width]; mask (optional) is added to the
    /// [L, S] logits of every head.
    ag::Var forward(const ag::Var& query, const ag::Var& memory, const Tensor* mask = nullptr) const;

    int width() const { return width_; }
    int heads() const { return heads_; }

    ag::Var in_proj_weight;  // [3 * width, width]: q, k, v stacked
    ag::Var in_proj_bias;    // [3 * width]
    Linear out_proj;

private:
    int width_, heads_;
};

/// Shared attention core used by the packed and the separate-projection
/// variants: splits q/k/v columns into heads and concatenates the outputs.
ag::Var attend(const ag::Var& q, const ag::Var& k, const ag::Var& v, int heads, const Tensor* mask);

class Mlp : public Module {
public:
    Mlp(int width, int hidden, Rng& rng);
    ag::Var forward(const ag::Var& x) const {
        return c_proj.forward(ag::quick_gelu(c_fc.forward(x)));
    }

    Linear c_fc, c_proj;
};

/// Pre-norm transformer layer (CLIP ResidualAttentionBlock).
class ResidualAttentionBlock : public Module {
public:
    ResidualAttentionBlock(int width, int heads, Rng& rng);
    ag::Var forward(const ag::Var& x, const Tensor* mask = nullptr) const;

    /// Zeroes the residual branches so the block starts as the identity.
    void init_identity();

    LayerNorm ln_1;
    MultiheadAttention attn;
    LayerNorm ln_2;
    Mlp mlp;
};

class Transformer : public Module {
public:
    Transformer(int width, int layers, int heads, Rng& rng);
    ag::Var forward(const ag::Var& x, const Tensor* mask = nullptr) const;
    int layers() const { return static_cast<int>(resblocks_.size()); }

private:
    std::vector<std::unique_ptr<ResidualAttentionBlock>> resblocks_;
};

}  // namespace clamp::nn
