#pragma once

#include <span>
#include <vector>

#include "clamp/nn.hpp"

namespace clamp {

struct TextEncoderConfig {
    int vocab_size = 49408;
    int context_length = 77;
    int width = 512;
    int layers = 12;
    int heads = 8;
    int embed_dim = 512;  // C_emb
};

/// CLIP text transformer: token embedding, learned positions, causal
/// pre-norm transformer, final LayerNorm and projection of the EOT token.
class TextEncoder : public nn::Module {
public:
    TextEncoder(const TextEncoderConfig& config, Rng& rng);

    /// Encodes SOT, the `prefix` rows [k, width], the `tokens`, then EOT.
    /// Returns a [1, embed_dim] row. Positions after EOT never influence it
    /// under the causal mask, so the sequence stops there.
    ag::Var encode_with_prefix(const ag::Var& prefix, std::span<const int> tokens, int sot, int eot) const;

    const TextEncoderConfig& config() const { return config_; }

    ag::Var token_embedding;      // [vocab, width]
    ag::Var positional_embedding;  // [context, width]
    nn::Transformer transformer;
    nn::LayerNorm ln_final;
    ag::Var text_projection;  // [width, embed_dim]

private:
    TextEncoderConfig config_;
};

}  // namespace clamp
