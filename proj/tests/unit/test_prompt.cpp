#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <set>

#include "clamp/errors.hpp"
#include "clamp/gradcheck.hpp"
#include "clamp/model.hpp"
#include "clamp/prompt.hpp"
#include "clamp/text_encoder.hpp"
#include "clamp/tokenizer.hpp"

using namespace clamp;

namespace {

TextEncoderConfig small_text(int vocab) {
    TextEncoderConfig c;
    c.vocab_size = vocab;
    c.context_length = 24;
    c.width = 16;
    c.layers = 1;
    c.heads = 2;
    c.embed_dim = 8;
    return c;
}

double max_abs_diff(const Tensor& a, const Tensor& b) {
    double m = 0.0;
    for (std::size_t i = 0; i < a.numel(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
    return m;
}

}  // namespace

TEST_CASE("word tokenizer") {
    const auto tok = WordTokenizer::builtin();
    const auto ids = tok.encode("left eye");
    REQUIRE(ids.size() == 2);
    CHECK(ids[0] != ids[1]);
    for (int id : ids) {
        CHECK(id >= 0);
        CHECK(id < tok.sot());
    }
    CHECK(tok.eot() == tok.sot() + 1);
    CHECK(tok.vocab_size() == tok.eot() + 1);
    CHECK(tok.encode("Left  EYE") == ids);
    CHECK_THROWS_AS(tok.encode("zzqx"), InputError);
}

TEST_CASE("prompts cover every keypoint and name the untokenisable one") {
    const auto tok = WordTokenizer::builtin();
    const auto t = build_prompts(KeypointSchema::ap10k(), tok, 8);
    CHECK(t.size() == 17);
    CHECK(t.k == 8);
    const auto odd = KeypointSchema::from_names("odd", {"nose", "zzqx_spot"});
    try {
        build_prompts(odd, tok, 8);
        FAIL("expected InputError");
    } catch (const InputError& e) {
        CHECK(std::string(e.what()).find("zzqx_spot") != std::string::npos);
    }
}

TEST_CASE("causal mask hides later positions") {
    Rng rng(3);
    nn::Transformer tr(8, 2, 2, rng);
    const int len = 5;
    Tensor mask({len, len}, 0.0);
    for (int i = 0; i < len; ++i)
        for (int j = i + 1; j < len; ++j) mask.at(i, j) = -std::numeric_limits<double>::infinity();
    Tensor x = random_tensor({len, 8}, rng);
    const auto a = tr.forward(ag::Var(x), &mask).value();
    for (int c = 0; c < 8; ++c) x.at(len - 1, c) += 3.0;
    const auto b = tr.forward(ag::Var(x), &mask).value();
    for (int i = 0; i < len - 1; ++i)
        for (int c = 0; c < 8; ++c) CHECK(a.at(i, c) == b.at(i, c));
    double last = 0.0;
    for (int c = 0; c < 8; ++c) last += std::abs(a.at(len - 1, c) - b.at(len - 1, c));
    CHECK(last > 0.0);
}

TEST_CASE("text encoder output depends on the prefix and is deterministic") {
    const auto tok = WordTokenizer::builtin();
    Rng rng(4);
    TextEncoder enc(small_text(tok.vocab_size()), rng);
    const auto ids = tok.encode("right ear");
    Tensor prefix = random_tensor({8, 16}, rng, 0.02);
    const auto a = enc.encode_with_prefix(ag::Var(prefix), ids, tok.sot(), tok.eot()).value();
    const auto again = enc.encode_with_prefix(ag::Var(prefix), ids, tok.sot(), tok.eot()).value();
    CHECK(a.shape == Shape{1, 8});
    CHECK(a.data == again.data);
    prefix.at(0, 0) += 0.5;
    const auto b = enc.encode_with_prefix(ag::Var(prefix), ids, tok.sot(), tok.eot()).value();
    CHECK(max_abs_diff(a, b) > 1e-8);
}

TEST_CASE("prompt learner caches on the prefix values") {
    const auto tok = WordTokenizer::builtin();
    Rng rng(5);
    TextEncoder enc(small_text(tok.vocab_size()), rng);
    enc.freeze();
    PromptLearner learner(build_prompts(KeypointSchema::from_names("s", {"nose", "tail", "left_eye"}), tok, 4), enc, rng);
    {
        ag::NoGradGuard guard;
        const auto a = learner.encode();
        const auto b = learner.encode();
        CHECK(learner.recompute_count() == 1);
        CHECK(a.value().data == b.value().data);
        CHECK(a.shape() == Shape{3, 8});
    }
    // a graph is needed now and the cached value has none
    const auto g = learner.encode();
    CHECK(learner.recompute_count() == 2);
    learner.encode();
    CHECK(learner.recompute_count() == 2);
    learner.prefix.value_mut().at(1, 2) += 0.1;
    const auto changed = learner.encode();
    CHECK(learner.recompute_count() == 3);
    CHECK(max_abs_diff(g.value(), changed.value()) > 0.0);

    // gradients reach the prefix but not the frozen encoder
    ag::sum(changed).backward();
    double norm = 0.0;
    for (double v : learner.prefix.grad().data) norm += v * v;
    CHECK(norm > 0.0);
    for (const auto& [name, p] : enc.named_parameters()) CHECK_FALSE(p.requires_grad());
}

TEST_CASE("single-head attention matches a hand computation") {
    Rng rng(6);
    const int w = 4;
    nn::MultiheadAttention mha(w, 1, rng);
    mha.in_proj_bias.value_mut() = random_tensor({3 * w}, rng);
    const Tensor q = random_tensor({3, w}, rng), m = random_tensor({5, w}, rng);
    const auto got = mha.forward(ag::Var(q), ag::Var(m)).value();

    const Tensor& W = mha.in_proj_weight.value();
    const Tensor& B = mha.in_proj_bias.value();
    auto project = [&](const Tensor& x, int block) {
        Tensor out({x.dim(0), w});
        for (int r = 0; r < x.dim(0); ++r)
            for (int o = 0; o < w; ++o) {
                double s = B[static_cast<std::size_t>(block * w + o)];
                for (int i = 0; i < w; ++i) s += x.at(r, i) * W.at(block * w + o, i);
                out.at(r, o) = s;
            }
        return out;
    };
    const Tensor Q = project(q, 0), K = project(m, 1), V = project(m, 2);
    Tensor ctx({3, w});
    for (int r = 0; r < 3; ++r) {
        std::vector<double> logits(5);
        for (int s = 0; s < 5; ++s) {
            double d = 0.0;
            for (int i = 0; i < w; ++i) d += Q.at(r, i) * K.at(s, i);
            logits[static_cast<std::size_t>(s)] = d / std::sqrt(static_cast<double>(w));
        }
        const double mx = *std::max_element(logits.begin(), logits.end());
        double z = 0.0;
        for (auto& l : logits) z += (l = std::exp(l - mx));
        for (int i = 0; i < w; ++i) {
            double acc = 0.0;
            for (int s = 0; s < 5; ++s) acc += logits[static_cast<std::size_t>(s)] / z * V.at(s, i);
            ctx.at(r, i) = acc;
        }
    }
    const Tensor& Wo = mha.out_proj.weight.value();
    const Tensor& Bo = mha.out_proj.bias.value();
    for (int r = 0; r < 3; ++r)
        for (int o = 0; o < w; ++o) {
            double s = Bo[static_cast<std::size_t>(o)];
            for (int i = 0; i < w; ++i) s += ctx.at(r, i) * Wo.at(o, i);
            CHECK(got.at(r, o) == doctest::Approx(s).epsilon(1e-12));
        }
}

TEST_CASE("refiner starts near its input") {
    Rng rng(7);
    PromptRefiner refiner(8, 2, rng);
    CHECK(refiner.gamma.value()[0] == doctest::Approx(1e-4));
    refiner.init_identity();
    const Tensor origin = random_tensor({4, 8}, rng), context = random_tensor({9, 8}, rng);
    const auto related = refiner.relate(ag::Var(origin)).value();
    CHECK(related.data == origin.data);
    const auto out = refiner.forward(ag::Var(origin), ag::Var(context)).value();
    CHECK(max_abs_diff(out, origin) < 1e-3);
    CHECK_THROWS_AS(refiner.forward(ag::Var(origin), ag::Var(random_tensor({9, 6}, rng))), ConfigMismatchError);
}

TEST_CASE("refiner is equivariant to prompt order") {
    Rng rng(8);
    PromptRefiner refiner(8, 2, rng, 0.7);
    const Tensor origin = random_tensor({5, 8}, rng), context = random_tensor({6, 8}, rng);
    const std::vector<int> perm{3, 0, 4, 1, 2};
    Tensor permuted({5, 8});
    for (int r = 0; r < 5; ++r)
        for (int c = 0; c < 8; ++c) permuted.at(r, c) = origin.at(perm[static_cast<std::size_t>(r)], c);
    const auto a = refiner.forward(ag::Var(origin), ag::Var(context)).value();
    const auto b = refiner.forward(ag::Var(permuted), ag::Var(context)).value();
    for (int r = 0; r < 5; ++r)
        for (int c = 0; c < 8; ++c) CHECK(b.at(r, c) == doctest::Approx(a.at(perm[static_cast<std::size_t>(r)], c)).epsilon(1e-10));
}

TEST_CASE("model keeps the text tower frozen") {
    ClampModel model(ModelConfig::toy(KeypointSchema::from_names("s", {"nose", "tail", "left_eye", "right_eye"})), 1);
    REQUIRE(model.text_encoder() != nullptr);
    for (const auto& [name, p] : model.text_encoder()->named_parameters()) CHECK_FALSE(p.requires_grad());
    std::set<const ag::Node*> frozen;
    for (const auto& [name, p] : model.text_encoder()->named_parameters()) frozen.insert(p.node().get());
    for (const auto& [name, p] : model.head_parameters()) CHECK(frozen.count(p.node().get()) == 0);
    bool has_prefix = false;
    for (const auto& [name, p] : model.head_parameters()) has_prefix |= p.node() == model.prompt_learner()->prefix.node();
    CHECK(has_prefix);
}
