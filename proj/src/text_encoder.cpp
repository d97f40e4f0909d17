#include "clamp/text_encoder.hpp"

#include <cmath>
#include <limits>
#include <string>

#include "clamp/errors.hpp"

namespace clamp {

namespace {

Tensor causal_mask(int n) {
    Tensor m({n, n}, 0.0);
    for (int i = 0; i < n; ++i)
        for (int j = i + 1; j < n; ++j) m.at(i, j) = -std::numeric_limits<double>::infinity();
    return m;
}

}  // namespace

TextEncoder::TextEncoder(const TextEncoderConfig& config, Rng& rng)
    : transformer(config.width, config.layers, config.heads, rng), ln_final(config.width), config_(config) {
    if (config.vocab_size < 2 || config.context_length < 3 || config.width < 1 || config.embed_dim < 1) {
        throw ConfigMismatchError("invalid text encoder dimensions");
    }
    register_parameter("token_embedding.weight", token_embedding,
                       nn::normal_tensor({config.vocab_size, config.width}, 0.02, rng));
    register_parameter("positional_embedding", positional_embedding,
                       nn::normal_tensor({config.context_length, config.width}, 0.01, rng));
    register_module("transformer", transformer);
    register_module("ln_final", ln_final);
    register_parameter("text_projection", text_projection,
                       nn::normal_tensor({config.width, config.embed_dim}, 1.0 / std::sqrt(config.width), rng));
}

ag::Var TextEncoder::encode_with_prefix(const ag::Var& prefix, std::span<const int> tokens, int sot, int eot) const {
    const int k = prefix.defined() ? prefix.dim(0) : 0;
    if (k > 0 && (prefix.value().rank() != 2 || prefix.dim(1) != config_.width)) {
        throw ConfigMismatchError("prefix width " + std::to_string(prefix.dim(1)) + " does not match text width " +
                                  std::to_string(config_.width));
    }
    const int length = k + static_cast<int>(tokens.size()) + 2;
    if (length > config_.context_length) {
        throw InputError("prompt of " + std::to_string(length) + " tokens exceeds the context length " +
                         std::to_string(config_.context_length));
    }
    std::vector<int> head{sot};
    std::vector<int> tail(tokens.begin(), tokens.end());
    tail.push_back(eot);
    for (int id : head) {
        if (id < 0 || id >= config_.vocab_size) throw InputError("token id out of range");
    }
    for (int id : tail) {
        if (id < 0 || id >= config_.vocab_size) throw InputError("token id " + std::to_string(id) + " out of range");
    }

    std::vector<ag::Var> parts{ag::gather_rows(token_embedding, head)};
    if (k > 0) parts.push_back(prefix);
    parts.push_back(ag::gather_rows(token_embedding, tail));
    auto x = ag::add(ag::concat_rows(parts), ag::slice_rows(positional_embedding, 0, length));
    const Tensor mask = causal_mask(length);
    x = transformer.forward(x, &mask);
    x = ln_final.forward(ag::slice_rows(x, length - 1, 1));
    return ag::matmul(x, text_projection);
}

}  // namespace clamp
