#pragma once

#include <optional>
#include <string>
#include <vector>

#include "clamp/nn.hpp"
#include "clamp/schema.hpp"
#include "clamp/text_encoder.hpp"
#include "clamp/tokenizer.hpp"

namespace clamp {

/// Token ids of every keypoint name; the k prefix slots are shared and
/// live in PromptLearner.
struct PromptTemplate {
    int k = 8;
    std::vector<std::string> texts;
    std::vector<std::vector<int>> keypoint_token_ids;
    int sot = 0;
    int eot = 0;

    int size() const { return static_cast<int>(keypoint_token_ids.size()); }
};

inline constexpr int kDefaultPrefixLength = 8;
inline constexpr double kPrefixInitStd = 0.02;

/// Throws InputError naming the keypoint whose name cannot be tokenised.
PromptTemplate build_prompts(const KeypointSchema& schema, const Tokenizer& tokenizer, int k = kDefaultPrefixLength);

/// Owns the shared learnable prefix vectors and produces the origin prompt
/// embeddings [N, C_emb] through a frozen text encoder.
class PromptLearner : public nn::Module {
public:
    PromptLearner(PromptTemplate tmpl, const TextEncoder& encoder, Rng& rng);

    /// Cached on the prefix values: re-encodes only after they change, or
    /// when a gradient graph is needed and the cached result has none.
    ag::Var encode();
    void invalidate() { cache_.reset(); }
    int recompute_count() const { return recomputes_; }

    const PromptTemplate& prompt_template() const { return template_; }

    ag::Var prefix;  // [k, text width]

private:
    struct Cache {
        std::vector<double> prefix_values;
        bool has_graph = false;
        ag::Var value;
    };

    PromptTemplate template_;
    const TextEncoder& encoder_;
    std::optional<Cache> cache_;
    int recomputes_ = 0;
};

/// One pre-norm transformer layer across the N prompt rows, then gated
/// cross-attention from the prompts to image tokens:
/// out = step1 + gamma * CrossAttn(step1, context).
class PromptRefiner : public nn::Module {
public:
    PromptRefiner(int width, int heads, Rng& rng, double gamma_init = 1e-4);

    ag::Var relate(const ag::Var& origin) const { return prompt_encoder.forward(origin); }
    ag::Var enhance(const ag::Var& related, const ag::Var& context) const;
    ag::Var forward(const ag::Var& origin, const ag::Var& context) const { return enhance(relate(origin), context); }

    /// Zeroes the self-attention residual branches (identity layer).
    void init_identity() { prompt_encoder.init_identity(); }

    nn::ResidualAttentionBlock prompt_encoder;
    nn::MultiheadAttention cross_attn;
    ag::Var gamma;  // [1]
};

}  // namespace clamp
