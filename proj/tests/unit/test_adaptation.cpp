#include <doctest.h>

#include <cmath>
#include <limits>

#include "clamp/adaptation.hpp"
#include "clamp/errors.hpp"
#include "clamp/gradcheck.hpp"

using namespace clamp;

namespace {

// Feature [H, W, C] whose token at (i, j) is `fill(i, j)`.
template <typename F>
ProjectedFeature make_feature(int h, int w, int c, int stride, F fill) {
    ProjectedFeature f{Tensor({h, w, c}), stride};
    for (int i = 0; i < h; ++i)
        for (int j = 0; j < w; ++j) {
            const auto v = fill(i, j);
            for (int k = 0; k < c; ++k) f.values.at(i, j, k) = v[static_cast<std::size_t>(k)];
        }
    return f;
}

}  // namespace

TEST_CASE("presence scores are cosines") {
    const auto f = make_feature(2, 2, 2, 32, [](int i, int j) {
        return std::vector<double>{static_cast<double>(i == j) * 3.0 + 1e-3 * (i != j), static_cast<double>(i != j) * 0.5};
    });
    const PromptEmbedding p{Tensor({2, 2}, std::vector<double>{1, 0, 0, 2})};
    const auto s = presence_scores(f, p);
    CHECK(s.channels() == 2);
    CHECK(s.stride == 32);
    CHECK(s.at(0, 0, 0) == doctest::Approx(1.0));
    CHECK(s.at(1, 0, 0) == doctest::Approx(0.0));
    CHECK(s.at(1, 0, 1) == doctest::Approx(1.0).epsilon(1e-5));
    for (double v : s.values.data) {
        CHECK(v <= 1.0 + 1e-12);
        CHECK(v >= -1.0 - 1e-12);
    }
}

TEST_CASE("pixel centres map to grid centres") {
    const auto g = pixel_to_grid(15.5, 47.5, 32);
    CHECK(g.u == doctest::Approx(0.0));
    CHECK(g.v == doctest::Approx(1.0));
}

TEST_CASE("keypoint sampling interpolates and clamps") {
    // token value = column index, so a sample returns its clamped u
    const auto f = make_feature(3, 4, 1, 8, [](int, int j) { return std::vector<double>{static_cast<double>(j)}; });
    const std::vector<Keypoint> kps{{11.5, 3.5, 2}, {-20.0, 0.0, 2}, {200.0, 10.0, 1}, {8.0, 8.0, 0}};
    const auto s = sample_keypoint_features(f, kps);
    CHECK(s.at(0, 0) == doctest::Approx(1.0));
    CHECK(s.at(1, 0) == doctest::Approx(0.0));
    CHECK(s.at(2, 0) == doctest::Approx(3.0));
    CHECK(s.at(3, 0) == 0.0);
}

TEST_CASE("feature loss closed forms") {
    const std::vector<Keypoint> all(4, Keypoint{1.0, 1.0, 2});
    CHECK(feature_loss(MatchMatrix{Tensor({4, 4}, 0.3)}, all) == doctest::Approx(std::log(4.0)));

    Tensor strong({4, 4}, 0.0);
    for (int i = 0; i < 4; ++i) strong.at(i, i) = 60.0;
    CHECK(feature_loss(MatchMatrix{strong}, all) < 1e-20);

    // unlabeled keypoints leave the softmax, so three uniform rows give log 3
    auto masked = all;
    masked[2].v = 0;
    CHECK(feature_loss(MatchMatrix{Tensor({4, 4}, 0.3)}, masked) == doctest::Approx(std::log(3.0)));
}

TEST_CASE("match matrix scales cosine similarity") {
    const Tensor feats({2, 3}, std::vector<double>{2, 0, 0, 0, 0, 5});
    const PromptEmbedding p{Tensor({2, 3}, std::vector<double>{1, 0, 0, 0, 1, 1})};
    const auto m = match_matrix(feats, p, 10.0);
    CHECK(m.values.at(0, 0) == doctest::Approx(10.0));
    CHECK(m.values.at(0, 1) == doctest::Approx(0.0));
    CHECK(m.values.at(1, 1) == doctest::Approx(10.0 / std::sqrt(2.0)));
}

TEST_CASE("spatial loss compares the upsampled map") {
    HeatmapStack s(Tensor({2, 2, 2}, 0.5), 8);
    HeatmapStack t(Tensor({2, 4, 4}, 0.5), 4);
    const std::vector<double> both{1.0, 1.0};
    CHECK(spatial_loss(s, t, both) == doctest::Approx(0.0));
    t.values.at(1, 0, 0) = 1.5;
    CHECK(spatial_loss(s, t, both) > 0.0);
    CHECK(spatial_loss(s, t, std::vector<double>{1.0, 0.0}) == doctest::Approx(0.0));
}

TEST_CASE("fuse concatenates channels") {
    const Tensor feat({3, 2, 2}, 1.0);
    const HeatmapStack s(Tensor({2, 2, 2}, 7.0), 32);
    const auto f = fuse(feat, s);
    CHECK(f.shape == Shape{5, 2, 2});
    CHECK(f.at(2, 1, 1) == 1.0);
    CHECK(f.at(3, 0, 0) == 7.0);
}

TEST_CASE("total loss weights and guards") {
    LossWeights w;
    w.alpha1 = 0.5;
    w.alpha2 = 2.0;
    CHECK(total_loss(1.0, 2.0, 3.0, w) == doctest::Approx(1.0 + 1.0 + 6.0));
    CHECK_THROWS_AS(total_loss(1.0, std::numeric_limits<double>::quiet_NaN(), 0.0, w), NumericalError);
    w.alpha1 = -1.0;
    CHECK_THROWS_AS(w.validate(), ConfigMismatchError);
    LossWeights z;
    z.logit_scale = 0.0;
    CHECK_THROWS_AS(z.validate(), ConfigMismatchError);
}

TEST_CASE("pairwise dot gradients") {
    Rng rng(21);
    const Tensor a = random_tensor({4, 6}, rng), b = random_tensor({5, 6}, rng);
    const Tensor probe = random_tensor({4, 5}, rng);
    const double err = gradcheck(
        [&](const auto& v) { return ag::sum(ag::mul(ag::pairwise_dot(v[0], v[1]), ag::Var(probe))); }, {a, b});
    CHECK(err < 1e-6);
}

TEST_CASE("feature loss and sampling gradients") {
    Rng rng(22);
    const std::vector<Keypoint> kps{{3.0, 5.0, 2}, {12.0, 1.0, 1}, {0.0, 0.0, 0}, {9.5, 14.0, 2}};
    const Tensor tokens = random_tensor({4 * 4, 6}, rng), prompts = random_tensor({4, 6}, rng);
    const double err = gradcheck(
        [&](const auto& v) {
            const auto f = sample_keypoint_features(v[0], 4, 4, 4, kps);
            return feature_loss(match_matrix(f, v[1], ag::Var::scalar(3.0)), kps);
        },
        {tokens, prompts}, 1e-5, 1e-8);
    CHECK(err < 1e-4);
}
