#include "clamp/nn.hpp"

#include <cmath>
#include <stdexcept>

namespace clamp::nn {

NamedVars Module::named_parameters(const std::string& prefix) const {
    NamedVars out;
    for (const auto& [name, v] : params_) out.emplace_back(prefix + name, v);
    for (const auto& [name, child] : children_) {
        auto sub = child->named_parameters(prefix + name + ".");
        out.insert(out.end(), sub.begin(), sub.end());
    }
    return out;
}

NamedVars Module::named_buffers(const std::string& prefix) const {
    NamedVars out;
    for (const auto& [name, v] : buffers_) out.emplace_back(prefix + name, v);
    for (const auto& [name, child] : children_) {
        auto sub = child->named_buffers(prefix + name + ".");
        out.insert(out.end(), sub.begin(), sub.end());
    }
    return out;
}

NamedVars Module::state(const std::string& prefix) const {
    auto out = named_parameters(prefix);
    auto bufs = named_buffers(prefix);
    out.insert(out.end(), bufs.begin(), bufs.end());
    return out;
}

void Module::set_training(bool on) {
    training_ = on;
    for (auto& [_, child] : children_) child->set_training(on);
}

void Module::freeze() {
    for (auto& [_, v] : named_parameters()) v.set_requires_grad(false);
}

void Module::zero_grad() {
    for (auto& [_, v] : named_parameters()) v.zero_grad();
}

std::size_t Module::parameter_count() const {
    std::size_t n = 0;
    for (const auto& [_, v] : named_parameters()) n += v.numel();
    return n;
}

ag::Var& Module::register_parameter(std::string name, ag::Var& slot, Tensor init) {
    slot = ag::Var::parameter(std::move(init));
    params_.emplace_back(std::move(name), slot);
    return slot;
}

ag::Var& Module::register_buffer(std::string name, ag::Var& slot, Tensor init) {
    slot = ag::Var(std::move(init), false);
    buffers_.emplace_back(std::move(name), slot);
    return slot;
}

void Module::register_module(std::string name, Module& child) {
    children_.emplace_back(std::move(name), &child);
}

Tensor normal_tensor(Shape shape, double stddev, Rng& rng) {
    Tensor t(std::move(shape));
    for (auto& v : t.data) v = rng.normal(0.0, stddev);
    return t;
}

Linear::Linear(int in, int out, Rng& rng, bool with_bias) {
    register_parameter("weight", weight, normal_tensor({out, in}, 1.0 / std::sqrt(in), rng));
    if (with_bias) register_parameter("bias", bias, Tensor({out}, 0.0));
}

Conv2d::Conv2d(int in, int out, int kernel, int stride, int pad, Rng& rng, bool with_bias)
    : stride_(stride), pad_(pad) {
    const double fan_in = static_cast<double>(in) * kernel * kernel;
    register_parameter("weight", weight, normal_tensor({out, in, kernel, kernel}, std::sqrt(2.0 / fan_in), rng));
    if (with_bias) register_parameter("bias", bias, Tensor({out}, 0.0));
}

ConvTranspose2d::ConvTranspose2d(int in, int out, int kernel, int stride, int pad, Rng& rng,
                                 bool with_bias)
    : stride_(stride), pad_(pad) {
    const double fan_in = static_cast<double>(in) * kernel * kernel / (stride * stride);
    register_parameter("weight", weight, normal_tensor({in, out, kernel, kernel}, std::sqrt(2.0 / fan_in), rng));
    if (with_bias) register_parameter("bias", bias, Tensor({out}, 0.0));
}

BatchNorm2d::BatchNorm2d(int channels) {
    register_parameter("weight", weight, Tensor({channels}, 1.0));
    register_parameter("bias", bias, Tensor({channels}, 0.0));
    register_buffer("running_mean", running_mean, Tensor({channels}, 0.0));
    register_buffer("running_var", running_var, Tensor({channels}, 1.0));
}

ag::Var BatchNorm2d::forward(const ag::Var& x) {
    return ag::batch_norm2d(x, weight, bias, running_mean.value_mut(), running_var.value_mut(), training());
}

LayerNorm::LayerNorm(int width) {
    register_parameter("weight", weight, Tensor({width}, 1.0));
    register_parameter("bias", bias, Tensor({width}, 0.0));
}

MultiheadAttention::MultiheadAttention(int width, int heads, Rng& rng)
    : out_proj(width, width, rng), width_(width), heads_(heads) {
    if (heads < 1 || width % heads != 0) {
        throw std::invalid_argument("attention width " + std::to_string(width) +
                                    " is not divisible by " + std::to_string(heads) + " heads");
    }
    register_parameter("in_proj_weight", in_proj_weight, normal_tensor({3 * width, width}, 1.0 / std::sqrt(width), rng));
    register_parameter("in_proj_bias", in_proj_bias, Tensor({3 * width}, 0.0));
    register_module("out_proj", out_proj);
}

ag::Var attend(const ag::Var& q, const ag::Var& k, const ag::Var& v, int heads, const Tensor* mask) {
    const int width = q.dim(1);
    const int head_dim = width / heads;
    const double s = 1.0 / std::sqrt(static_cast<double>(head_dim));
    std::vector<ag::Var> outs;
    outs.reserve(static_cast<std::size_t>(heads));
    for (int h = 0; h < heads; ++h) {
        const auto qh = ag::slice_cols(q, h * head_dim, head_dim);
        const auto kh = ag::slice_cols(k, h * head_dim, head_dim);
        const auto vh = ag::slice_cols(v, h * head_dim, head_dim);
        auto logits = ag::scale(ag::matmul(qh, kh, false, true), s);
        if (mask) logits = ag::add_const(logits, *mask);
        outs.push_back(ag::matmul(ag::softmax_rows(logits), vh));
    }
    return heads == 1 ? outs.front() : ag::concat_cols(outs);
}

ag::Var MultiheadAttention::forward(const ag::Var& query, const ag::Var& memory, const Tensor* mask) const {
    const auto wq = ag::slice_rows(in_proj_weight, 0, width_);
    const auto wk = ag::slice_rows(in_proj_weight, width_, width_);
    const auto wv = ag::slice_rows(in_proj_weight, 2 * width_, width_);
    const auto b = ag::reshape(in_proj_bias, {3, width_});
    const auto q = ag::linear(query, wq, ag::reshape(ag::slice_rows(b, 0, 1), {width_}));
    const auto k = ag::linear(memory, wk, ag::reshape(ag::slice_rows(b, 1, 1), {width_}));
    const auto v = ag::linear(memory, wv, ag::reshape(ag::slice_rows(b, 2, 1), {width_}));
    return out_proj.forward(attend(q, k, v, heads_, mask));
}

Mlp::Mlp(int width, int hidden, Rng& rng) : c_fc(width, hidden, rng), c_proj(hidden, width, rng) {
    register_module("c_fc", c_fc);
    register_module("c_proj", c_proj);
}

ResidualAttentionBlock::ResidualAttentionBlock(int width, int heads, Rng& rng)
    : ln_1(width), attn(width, heads, rng), ln_2(width), mlp(width, 4 * width, rng) {
    register_module("ln_1", ln_1);
    register_module("attn", attn);
    register_module("ln_2", ln_2);
    register_module("mlp", mlp);
}

ag::Var ResidualAttentionBlock::forward(const ag::Var& x, const Tensor* mask) const {
    const auto h = ln_1.forward(x);
    auto y = ag::add(x, attn.forward(h, h, mask));
    return ag::add(y, mlp.forward(ln_2.forward(y)));
}

void ResidualAttentionBlock::init_identity() {
    attn.out_proj.weight.value_mut().fill(0.0);
    attn.out_proj.bias.value_mut().fill(0.0);
    mlp.c_proj.weight.value_mut().fill(0.0);
    mlp.c_proj.bias.value_mut().fill(0.0);
}

Transformer::Transformer(int width, int layers, int heads, Rng& rng) {
    for (int i = 0; i < layers; ++i) {
        resblocks_.push_back(std::make_unique<ResidualAttentionBlock>(width, heads, rng));
        register_module("resblocks." + std::to_string(i), *resblocks_.back());
    }
}

ag::Var Transformer::forward(const ag::Var& x, const Tensor* mask) const {
    ag::Var y = x;
    for (const auto& block : resblocks_) y = block->forward(y, mask);
    return y;
}

}  // namespace clamp::nn
