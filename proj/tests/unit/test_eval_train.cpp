#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>

#include "clamp/data.hpp"
#include "clamp/errors.hpp"
#include "clamp/eval.hpp"
#include "clamp/synthetic.hpp"
#include "clamp/train.hpp"

using namespace clamp;
namespace fs = std::filesystem;

namespace {

InstanceRecord gt_record(std::int64_t id, double area, std::vector<Keypoint> kps) {
    InstanceRecord r;
    r.id = id;
    r.image_id = id;
    r.area = area;
    r.bbox = {0, 0, std::sqrt(area), std::sqrt(area)};
    r.keypoints = std::move(kps);
    return r;
}

PredictionRecord pred_for(const InstanceRecord& gt, double dx, double score) {
    PredictionRecord p;
    p.id = gt.id;
    p.score = score;
    for (const auto& k : gt.keypoints) p.keypoints.push_back({k.x + dx, k.y, score});
    return p;
}

DatasetSplit random_split(Rng& rng, int count) {
    DatasetSplit s;
    s.schema = KeypointSchema::from_names("three", {"nose", "tail", "neck"}, 0.08);
    for (int i = 0; i < count; ++i) {
        std::vector<Keypoint> kps;
        for (int k = 0; k < 3; ++k) kps.push_back({rng.uniform(0, 100), rng.uniform(0, 100), 2});
        s.records.push_back(gt_record(i + 1, rng.uniform(500, 20000), kps));
    }
    return s;
}

fs::path scratch(const std::string& name) {
    const fs::path dir = fs::temp_directory_path() / ("clamp_unit_" + name);
    fs::remove_all(dir);
    fs::create_directories(dir);
    return dir;
}

TrainConfig tiny_train(int epochs) {
    TrainConfig t;
    t.epochs = epochs;
    t.lr = 1e-3;
    t.lr_decay_epochs = {};
    t.batch_size = 2;
    t.checkpoint_every = 1;
    t.seed = 3;
    return t;
}

}  // namespace

TEST_CASE("oks worked example") {
    // d^2 = 4, area 100, sigma 0.1: exp(-4 / (2 * 100 * 0.04)) = exp(-0.5)
    const auto gt = gt_record(1, 100.0, {{10, 10, 2}});
    const std::vector<double> sigma{0.1};
    CHECK(compute_oks(pred_for(gt, 2.0, 1.0), gt, sigma) == doctest::Approx(std::exp(-0.5)));
    CHECK(compute_oks(pred_for(gt, 0.0, 1.0), gt, sigma) == doctest::Approx(1.0));

    const auto blank = gt_record(2, 100.0, {{10, 10, 0}});
    CHECK_THROWS_AS(compute_oks(pred_for(blank, 0.0, 1.0), blank, sigma), PreconditionError);
    const auto flat = gt_record(3, 0.0, {{10, 10, 2}});
    CHECK_THROWS_AS(compute_oks(pred_for(flat, 0.0, 1.0), flat, sigma), PreconditionError);
}

TEST_CASE("oks ignores unlabeled keypoints") {
    const auto gt = gt_record(1, 400.0, {{10, 10, 2}, {50, 50, 0}});
    auto p = pred_for(gt, 0.0, 1.0);
    p.keypoints[1] = {900, 900, 1.0};
    CHECK(compute_oks(p, gt, std::vector<double>{0.1, 0.1}) == doctest::Approx(1.0));
}

TEST_CASE("oks decreases with distance and is scale invariant") {
    const std::vector<double> sigma{0.07, 0.07};
    const auto gt = gt_record(1, 900.0, {{10, 20, 2}, {40, 5, 1}});
    double last = 2.0;
    for (double d = 0.0; d < 20.0; d += 1.5) {
        const double o = compute_oks(pred_for(gt, d, 1.0), gt, sigma);
        CHECK(o < last);
        last = o;
    }
    const double c = 3.5;
    auto big = gt;
    big.area *= c * c;
    for (auto& k : big.keypoints) {
        k.x *= c;
        k.y *= c;
    }
    CHECK(compute_oks(pred_for(big, 4.0 * c, 1.0), big, sigma) ==
          doctest::Approx(compute_oks(pred_for(gt, 4.0, 1.0), gt, sigma)));
}

TEST_CASE("perfect predictions score one and empty ranges report -1") {
    DatasetSplit s;
    s.schema = KeypointSchema::from_names("one", {"nose"}, 0.1);
    s.records = {gt_record(1, 2000.0, {{5, 5, 2}}), gt_record(2, 3000.0, {{7, 9, 2}})};
    std::vector<PredictionRecord> preds{pred_for(s.records[0], 0.0, 0.9), pred_for(s.records[1], 0.0, 0.8)};
    const auto m = evaluate(preds, s).metrics;
    CHECK(m.ap == doctest::Approx(1.0));
    CHECK(m.ap50 == doctest::Approx(1.0));
    CHECK(m.ap75 == doctest::Approx(1.0));
    CHECK(m.apm == doctest::Approx(1.0));
    CHECK(m.apl == -1.0);
    CHECK(m.ar == doctest::Approx(1.0));

    PredictionRecord stray;
    stray.id = 77;
    stray.keypoints = {{0, 0, 1}};
    preds.push_back(stray);
    CHECK_THROWS_AS(evaluate(preds, s), PreconditionError);
}

TEST_CASE("ap properties on random predictions") {
    Rng rng(31);
    for (int trial = 0; trial < 20; ++trial) {
        const auto split = random_split(rng, 30);
        std::vector<PredictionRecord> preds;
        for (const auto& r : split.records) preds.push_back(pred_for(r, rng.uniform(0, 12), rng.uniform()));
        const auto m = evaluate(preds, split).metrics;
        CHECK(m.ap50 >= m.ap75);
        CHECK(m.ap >= 0.0);
        CHECK(m.ap <= 1.0);
        CHECK(m.ar <= 1.0);

        // prediction order is irrelevant
        auto shuffled = preds;
        rng.shuffle(shuffled);
        const auto again = evaluate(shuffled, split).metrics;
        CHECK(again.ap == m.ap);
        CHECK(again.ar == m.ar);
    }
}

TEST_CASE("single threshold ap by hand") {
    // ranked by score: hit, miss, hit -> precision 1 up to recall 1/3,
    // then 2/3 up to recall 2/3; recall 1 is never reached
    const std::vector<InstanceScore> inst{{1, 0.9, 0.9, 1}, {2, 0.2, 0.8, 1}, {3, 0.7, 0.7, 1}};
    const double expected = (34 * 1.0 + 33 * (2.0 / 3.0)) / 101.0;
    CHECK(average_precision(inst, 0.5) == doctest::Approx(expected));
}

TEST_CASE("learning rate schedule") {
    TrainConfig t;
    t.epochs = 210;
    t.lr = 5e-4;
    CHECK(lr_at(t, 0) == doctest::Approx(5e-4));
    CHECK(lr_at(t, 169) == doctest::Approx(5e-4));
    CHECK(lr_at(t, 170) == doctest::Approx(5e-5));
    CHECK(lr_at(t, 200) == doctest::Approx(5e-6));
    CHECK(lr_at(t, 209) == doctest::Approx(5e-6));
    CHECK_THROWS_AS(lr_at(t, 210), PreconditionError);
}

TEST_CASE("adamw first step") {
    auto p = ag::Var::parameter(Tensor({2}, std::vector<double>{1.0, -2.0}));
    AdamW opt({ParamGroup{"all", {p}, 0.5}}, 0.1);
    ag::sum(ag::mul(p, ag::Var(Tensor({2}, std::vector<double>{3.0, -0.5})))).backward();
    opt.step(0.2);
    // lr_eff = 0.1; decay first, then m_hat / (sqrt(v_hat) + eps) = sign(g)
    CHECK(p.value()[0] == doctest::Approx(1.0 * (1 - 0.1 * 0.1) - 0.1 * 3.0 / (3.0 + 1e-8)));
    CHECK(p.value()[1] == doctest::Approx(-2.0 * (1 - 0.1 * 0.1) + 0.1 * 0.5 / (0.5 + 1e-8)));
    CHECK(opt.steps() == 1);
}

TEST_CASE("epoch order is a seeded permutation") {
    const auto a = epoch_order(10, 4, 0), b = epoch_order(10, 4, 0), c = epoch_order(10, 4, 1);
    CHECK(a == b);
    CHECK(a != c);
    auto sorted = a;
    std::sort(sorted.begin(), sorted.end());
    for (std::size_t i = 0; i < sorted.size(); ++i) CHECK(sorted[i] == i);
}

TEST_CASE("training smoke and reproducibility") {
    ImageCache cache;
    BlobOptions opts;
    opts.count = 2;
    opts.size = 96;
    opts.num_keypoints = 3;
    opts.seed = 8;
    const auto split = make_blob_dataset(opts, cache);
    auto cfg = ModelConfig::toy(split.schema);
    cfg.input_size = 64;

    std::vector<std::vector<StepLog>> runs;
    for (int r = 0; r < 2; ++r) {
        const auto dir = scratch("train_" + std::to_string(r));
        ClampModel model(cfg, 1);
        const auto result = train(model, split, tiny_train(2), cache, TrainOptions{dir, nullptr, {}});
        CHECK(result.steps == 2);
        CHECK(result.history.size() == 2);
        CHECK(fs::exists(result.final_checkpoint));
        CHECK(fs::exists(dir / "checkpoints" / "epoch_1.ckpt"));
        std::ifstream log(result.log);
        int lines = 0;
        for (std::string line; std::getline(log, line);) {
            const auto j = nlohmann::json::parse(line);
            CHECK(j.contains("l_feature"));
            ++lines;
        }
        CHECK(lines == 2);
        runs.push_back(result.history);
    }
    for (std::size_t i = 0; i < runs[0].size(); ++i) {
        CHECK(runs[0][i].total == runs[1][i].total);
        CHECK(runs[0][i].epoch == static_cast<int>(i));
    }
}

TEST_CASE("prediction files round trip") {
    const auto dir = scratch("preds");
    Rng rng(4);
    const auto split = random_split(rng, 3);
    std::vector<PredictionRecord> preds;
    for (const auto& r : split.records) preds.push_back(pred_for(r, 1.0, 0.5));
    write_predictions(dir / "p.json", preds, split);
    const auto back = read_predictions(dir / "p.json");
    REQUIRE(back.size() == preds.size());
    for (std::size_t i = 0; i < preds.size(); ++i) {
        CHECK(back[i].id == preds[i].id);
        CHECK(back[i].keypoints[2].x == doctest::Approx(preds[i].keypoints[2].x));
    }
}
