#include "clamp/prompt.hpp"

#include "clamp/errors.hpp"

namespace clamp {

PromptTemplate build_prompts(const KeypointSchema& schema, const Tokenizer& tokenizer, int k) {
    if (k < 1) throw PreconditionError("prefix length k must be >= 1");
    schema.validate();
    PromptTemplate t;
    t.k = k;
    t.sot = tokenizer.sot();
    t.eot = tokenizer.eot();
    for (int n = 0; n < schema.size(); ++n) {
        const std::string text = schema.prompt_text(n);
        try {
            t.keypoint_token_ids.push_back(tokenizer.encode(text));
        } catch (const InputError& e) {
            throw InputError("keypoint '" + schema.keypoint_names[static_cast<std::size_t>(n)] +
                             "' cannot be tokenised: " + e.what());
        }
        t.texts.push_back(text);
    }
    return t;
}

PromptLearner::PromptLearner(PromptTemplate tmpl, const TextEncoder& encoder, Rng& rng)
    : template_(std::move(tmpl)), encoder_(encoder) {
    if (template_.k < 1 || template_.size() < 1) throw PreconditionError("empty prompt template");
    for (const auto& ids : template_.keypoint_token_ids) {
        if (template_.k + static_cast<int>(ids.size()) + 2 > encoder.config().context_length) {
            throw ConfigMismatchError("prompt does not fit the text encoder context length");
        }
    }
    register_parameter("prefix", prefix, nn::normal_tensor({template_.k, encoder.config().width}, kPrefixInitStd, rng));
}

ag::Var PromptLearner::encode() {
    const bool want_graph = ag::grad_enabled() && prefix.requires_grad();
    if (cache_ && cache_->prefix_values == prefix.value().data && (cache_->has_graph || !want_graph)) {
        return cache_->value;
    }
    std::vector<ag::Var> rows;
    rows.reserve(template_.keypoint_token_ids.size());
    for (const auto& ids : template_.keypoint_token_ids) {
        rows.push_back(encoder_.encode_with_prefix(prefix, ids, template_.sot, template_.eot));
    }
    cache_ = Cache{prefix.value().data, want_graph, ag::concat_rows(rows)};
    ++recomputes_;
    return cache_->value;
}

PromptRefiner::PromptRefiner(int width, int heads, Rng& rng, double gamma_init)
    : prompt_encoder(width, heads, rng), cross_attn(width, heads, rng) {
    register_module("prompt_encoder", prompt_encoder);
    register_module("cross_attn", cross_attn);
    register_parameter("gamma", gamma, Tensor({1}, gamma_init));
}

ag::Var PromptRefiner::enhance(const ag::Var& related, const ag::Var& context) const {
    if (context.value().rank() != 2 || context.dim(1) != related.dim(1)) {
        throw ConfigMismatchError("image context width does not match the prompt width");
    }
    return ag::add(related, ag::mul_scalar(cross_attn.forward(related, context), gamma));
}

}  // namespace clamp
