#include <doctest.h>

#include <cmath>

#include "clamp/augment.hpp"
#include "clamp/errors.hpp"
#include "clamp/heatmap.hpp"

using namespace clamp;

TEST_CASE("gaussian target peaks at the rounded keypoint") {
    const std::vector<Keypoint> kps{{20.0, 12.0, 2}, {0.0, 0.0, 0}, {500.0, 8.0, 2}};
    const auto t = encode_gaussian(kps, 16, 16, 4);
    CHECK(t.heatmap.at(0, 3, 5) == doctest::Approx(1.0));
    CHECK(t.heatmap.at(0, 3, 6) == doctest::Approx(std::exp(-0.5 / 4.0)));
    // outside 3 sigma the target is exactly zero
    CHECK(t.heatmap.at(0, 3, 12) == 0.0);
    CHECK(t.weights == std::vector<double>{1.0, 0.0, 0.0});
    for (double v : std::span(t.heatmap.values.data).subspan(256, 256)) CHECK(v == 0.0);
}

TEST_CASE("argmax decode inverts encode on the grid") {
    for (int i = 0; i < 16; ++i) {
        const std::vector<Keypoint> kp{{4.0 * i, 4.0 * (15 - i), 2}};
        const auto t = encode_gaussian(kp, 16, 16, 4);
        const auto p = decode_argmax(t.heatmap);
        CHECK(p[0].x == doctest::Approx(4.0 * i));
        CHECK(p[0].y == doctest::Approx(4.0 * (15 - i)));
        CHECK(peak_values(t.heatmap)[0] == doctest::Approx(1.0));
    }
}

TEST_CASE("argmax ties go to the first cell") {
    HeatmapStack flat(Tensor({1, 3, 3}, 0.5), 4);
    const auto p = decode_argmax(flat);
    CHECK(p[0].x == 0.0);
    CHECK(p[0].y == 0.0);
}

TEST_CASE("upsampling keeps constants and rejects shrinking") {
    HeatmapStack c(Tensor({2, 3, 4}, 0.25), 8);
    const auto up = upsample_map(c, 6, 8);
    CHECK(up.stride == 4);
    for (double v : up.values.data) CHECK(v == doctest::Approx(0.25));
    CHECK_THROWS_AS(upsample_map(c, 2, 2), PreconditionError);
}

TEST_CASE("affine inverse round trip") {
    const BoundingBox box{13.0, 21.0, 80.0, 50.0};
    for (double rot : {0.0, 17.0, -33.0}) {
        for (bool flip : {false, true}) {
            AugmentParams p;
            p.rotation_deg = rot;
            p.scale = 1.2;
            p.flip = flip;
            const auto t = crop_transform(box, 64, 64, p);
            const auto inv = t.inverse();
            for (double x : {0.0, 30.5, 99.0}) {
                for (double y : {5.0, 60.0}) {
                    const double u = t.apply_x(x, y), v = t.apply_y(x, y);
                    CHECK(inv.apply_x(u, v) == doctest::Approx(x));
                    CHECK(inv.apply_y(u, v) == doctest::Approx(y));
                }
            }
        }
    }
}

TEST_CASE("flip mirrors the window and swaps channels") {
    const auto schema = KeypointSchema::from_names("lr", {"left_paw", "right_paw", "nose"});
    const BoundingBox box{0.0, 0.0, 63.0, 63.0};
    AugmentParams p;
    const auto plain = crop_transform(box, 64, 64, p);
    p.flip = true;
    const auto mirrored = crop_transform(box, 64, 64, p);
    const std::vector<Keypoint> kps{{10.0, 20.0, 2}, {50.0, 20.0, 2}, {31.5, 40.0, 1}};
    const auto a = transform_keypoints(kps, plain, false, schema, 64, 64);
    const auto b = transform_keypoints(kps, mirrored, true, schema, 64, 64);
    // the left channel now holds the mirrored right paw
    CHECK(b[0].x == doctest::Approx(63.0 - a[1].x));
    CHECK(b[1].x == doctest::Approx(63.0 - a[0].x));
    CHECK(b[0].y == doctest::Approx(a[1].y));
    CHECK(b[2].x == doctest::Approx(63.0 - a[2].x));
    CHECK(b[2].v == 1);
}

TEST_CASE("keypoints leaving the window become unlabeled") {
    const auto schema = KeypointSchema::from_names("x", {"nose"});
    const BoundingBox box{0.0, 0.0, 32.0, 32.0};
    const auto t = crop_transform(box, 32, 32, AugmentParams::identity());
    const auto out = transform_keypoints({{200.0, 10.0, 2}}, t, false, schema, 32, 32);
    CHECK(out[0].v == 0);
}

TEST_CASE("augment sampling respects its ranges and is seeded") {
    AugmentConfig cfg;
    Rng a(5), b(5);
    for (int i = 0; i < 200; ++i) {
        const auto p = sample_augment(cfg, a);
        const auto q = sample_augment(cfg, b);
        CHECK(p.flip == q.flip);
        CHECK(p.rotation_deg == q.rotation_deg);
        CHECK(std::abs(p.rotation_deg) <= cfg.max_rotation_deg);
        CHECK(p.scale >= cfg.scale_min);
        CHECK(p.scale <= cfg.scale_max);
    }
    cfg.enabled = false;
    const auto off = sample_augment(cfg, a);
    CHECK_FALSE(off.flip);
    CHECK(off.rotation_deg == 0.0);
    CHECK(off.scale == 1.0);
}
