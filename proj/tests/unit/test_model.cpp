#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>

#include "clamp/checkpoint.hpp"
#include "clamp/config.hpp"
#include "clamp/errors.hpp"
#include "clamp/gradcheck.hpp"
#include "clamp/heatmap.hpp"
#include "clamp/model.hpp"

using namespace clamp;
namespace fs = std::filesystem;

namespace {

KeypointSchema four() { return KeypointSchema::from_names("four", {"nose", "tail", "left_eye", "right_eye"}); }

ModelConfig small(KeypointSchema schema = four()) {
    auto c = ModelConfig::toy(std::move(schema));
    c.input_size = 64;
    return c;
}

Batch make_batch(int n, int size, Rng& rng) {
    Batch b;
    b.images = random_tensor({2, 3, size, size}, rng, 0.5);
    const int h1 = size / 4;
    b.targets = Tensor({2, n, h1, h1});
    for (int item = 0; item < 2; ++item) {
        std::vector<Keypoint> kps;
        for (int k = 0; k < n; ++k) kps.push_back({rng.uniform(0, size - 1), rng.uniform(0, size - 1), k == 1 ? 0 : 2});
        const auto t = encode_gaussian(kps, h1, h1, 4);
        std::copy(t.heatmap.values.data.begin(), t.heatmap.values.data.end(),
                  b.targets.data.begin() + static_cast<std::ptrdiff_t>(item) * n * h1 * h1);
        b.target_weights.insert(b.target_weights.end(), t.weights.begin(), t.weights.end());
        b.keypoints.push_back(kps);
    }
    return b;
}

fs::path scratch(const std::string& name) {
    const fs::path dir = fs::temp_directory_path() / ("clamp_unit_" + name);
    fs::remove_all(dir);
    fs::create_directories(dir);
    return dir;
}

}  // namespace

TEST_CASE("model output shapes") {
    ClampModel model(small(), 3);
    CHECK(model.feature_stride() == 32);
    CHECK(model.feature_size() == 2);
    CHECK(model.heatmap_size() == 16);
    Rng rng(1);
    const auto batch = make_batch(4, 64, rng);
    const auto out = model.forward_train(batch, LossWeights{});
    CHECK(out.heatmaps.shape() == Shape{2, 4, 16, 16});
    CHECK(out.scores.shape() == Shape{2, 4, 2, 2});
    REQUIRE(out.match.size() == 2);
    CHECK(out.match[0].shape() == Shape{4, 4});
    CHECK(out.prompts[0].shape() == Shape{4, 32});
    const double recombined = out.losses.l_pred.item() + out.losses.l_spatial.item() + out.losses.l_feature.item();
    CHECK(out.losses.total.item() == doctest::Approx(recombined));
    CHECK(std::isfinite(out.losses.total.item()));

    model.set_training(false);
    const auto inf = model.forward_infer(batch.images);
    CHECK(inf.poses.size() == 2);
    CHECK(inf.poses[0].coords.size() == 4);
    CHECK(inf.heatmaps.shape == Shape{2, 4, 16, 16});
}

TEST_CASE("training step reaches every head parameter group") {
    ClampModel model(small(), 4);
    Rng rng(2);
    const auto out = model.forward_train(make_batch(4, 64, rng), LossWeights{});
    out.losses.total.backward();
    double prefix = 0.0, backbone = 0.0;
    for (double v : model.prompt_learner()->prefix.grad().data) prefix += v * v;
    for (const auto& [name, p] : model.backbone_parameters())
        for (double v : p.grad().data) backbone += v * v;
    CHECK(prefix > 0.0);
    CHECK(backbone > 0.0);
}

TEST_CASE("construction validates widths and strides") {
    auto bad_size = small();
    bad_size.input_size = 70;
    CHECK_THROWS_AS(ClampModel(bad_size, 0), ConfigMismatchError);

    auto bad_heads = small();
    bad_heads.refiner_heads = 5;
    CHECK_THROWS_AS(ClampModel(bad_heads, 0), ConfigMismatchError);

    auto bad_dense = small();
    bad_dense.projector_dense = "bogus";
    CHECK_THROWS_AS(ClampModel(bad_dense, 0), ConfigMismatchError);

    auto bad_stages = small();
    bad_stages.predictor.stages = 2;
    CHECK_THROWS_AS(ClampModel(bad_stages, 0), ConfigMismatchError);
}

TEST_CASE("same seed builds the same model") {
    ClampModel a(small(), 11), b(small(), 11), c(small(), 12);
    const auto sa = a.state(), sb = b.state(), sc = c.state();
    REQUIRE(sa.size() == sb.size());
    bool differs = false;
    for (std::size_t i = 0; i < sa.size(); ++i) {
        CHECK(sa[i].first == sb[i].first);
        CHECK(sa[i].second.value().data == sb[i].second.value().data);
        differs |= sa[i].second.value().data != sc[i].second.value().data;
    }
    CHECK(differs);
}

TEST_CASE("checkpoint round trip") {
    const auto dir = scratch("ckpt");
    ClampModel a(small(), 5);
    ClampModel b(small(), 6);
    save_checkpoint(dir / "a.ckpt", a, {{"epoch", 3}});
    const auto data = read_checkpoint(dir / "a.ckpt");
    CHECK(data.version == kCheckpointVersion);
    CHECK(data.meta["epoch"] == 3);
    CHECK(data.config.schema.keypoint_names == four().keypoint_names);
    apply_checkpoint(data, b);
    const auto sa = a.state(), sb = b.state();
    for (std::size_t i = 0; i < sa.size(); ++i) CHECK(sa[i].second.value().data == sb[i].second.value().data);

    Rng rng(9);
    const Tensor images = random_tensor({1, 3, 64, 64}, rng);
    a.set_training(false);
    b.set_training(false);
    CHECK(a.forward_infer(images).heatmaps.data == b.forward_infer(images).heatmaps.data);
}

TEST_CASE("checkpoint mismatches are rejected") {
    const auto dir = scratch("ckpt_bad");
    ClampModel a(small(), 5);
    save_checkpoint(dir / "a.ckpt", a);
    ClampModel three(small(KeypointSchema::from_names("three", {"nose", "tail", "neck"})), 5);
    CHECK_THROWS_AS(apply_checkpoint(read_checkpoint(dir / "a.ckpt"), three), ConfigMismatchError);

    auto wide = small();
    wide.text.embed_dim = 48;
    ClampModel w(wide, 5);
    CHECK_THROWS_AS(apply_checkpoint(read_checkpoint(dir / "a.ckpt"), w), ConfigMismatchError);

    std::ofstream(dir / "junk.ckpt") << "NOTACKPT and more bytes";
    CHECK_THROWS_AS(read_checkpoint(dir / "junk.ckpt"), InputError);
    CHECK_THROWS_AS(read_checkpoint(dir / "absent.ckpt"), InputError);
}

TEST_CASE("config round trip and overrides") {
    RunConfig rc;
    rc.model = small();
    rc.train.lr = 0.01;
    const auto j = to_json(rc);
    const auto back = run_config_from_json(j);
    CHECK(to_json(back) == j);

    json doc = j;
    apply_override(doc, "train.lr=0.25");
    CHECK(doc["train"]["lr"] == 0.25);
    apply_override(doc, "model.projector_dense=attention");
    CHECK(doc["model"]["projector_dense"] == "attention");
    apply_override(doc, "train.lr_decay_epochs=[1,2]");
    CHECK(doc["train"]["lr_decay_epochs"] == json::array({1, 2}));
    CHECK_THROWS_AS(apply_override(doc, "train.learning_rate=1"), ConfigMismatchError);
    CHECK_THROWS_AS(apply_override(doc, "train.lr"), ConfigMismatchError);
}

TEST_CASE("config files reject unknown keys") {
    const auto dir = scratch("config");
    std::ofstream(dir / "ok.json") << R"({"train": {"epochs": 3, "lr_decay_epochs": [2]}})";
    std::ofstream(dir / "bad.json") << R"({"train": {"epoch": 3}})";
    std::ofstream(dir / "junk.json") << "[1, 2";
    CHECK(load_run_config(dir / "ok.json", {}).train.epochs == 3);
    CHECK(load_run_config(dir / "ok.json", {"train.epochs=5"}).train.epochs == 5);
    CHECK_THROWS_AS(load_run_config(dir / "bad.json", {}), ConfigMismatchError);
    CHECK_THROWS_AS(load_run_config(dir / "junk.json", {}), ParseError);
    CHECK_THROWS_AS(load_run_config(dir / "absent.json", {}), InputError);
}

TEST_CASE("dataset schema is resolved from annotations") {
    json doc = load_run_config_json({}, {});
    doc["model"]["schema"] = kDatasetSchema;
    CHECK(uses_dataset_schema(doc));
    CHECK_THROWS_AS(run_config_from_json(doc), ConfigMismatchError);
    resolve_dataset_schema(doc, four());
    CHECK_FALSE(uses_dataset_schema(doc));
    CHECK(run_config_from_json(doc).model.schema.keypoint_names == four().keypoint_names);

    json named = load_run_config_json({}, {});
    named["model"]["schema"] = "animal_pose";
    resolve_dataset_schema(named, four());
    CHECK(run_config_from_json(named).model.schema.size() == 20);
}
