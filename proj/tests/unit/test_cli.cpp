#include <doctest.h>

#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "cli.hpp"
#include "clamp/config.hpp"
#include "clamp/schema.hpp"
#include "clamp/synthetic.hpp"

using namespace clamp;
namespace fs = std::filesystem;
using nlohmann::json;

namespace {

struct Outcome {
    int code;
    std::string out, err;
};

Outcome invoke(std::vector<std::string> args) {
    args.insert(args.begin(), "clamp");
    std::vector<const char*> argv;
    for (const auto& a : args) argv.push_back(a.c_str());
    std::ostringstream out, err;
    const int code = cli::run(static_cast<int>(argv.size()), argv.data(), out, err);
    return {code, out.str(), err.str()};
}

fs::path scratch(const std::string& name) {
    const fs::path dir = fs::temp_directory_path() / ("clamp_cli_" + name);
    fs::remove_all(dir);
    fs::create_directories(dir);
    return dir;
}

std::string slurp(const fs::path& file) {
    std::ifstream in(file, std::ios::binary);
    return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

// Small toy run configuration over a synthetic dataset in `data_dir`.
fs::path write_config(const fs::path& file, const fs::path& data_dir, int keypoints) {
    RunConfig rc;
    rc.model = ModelConfig::toy(blob_schema(keypoints));
    rc.model.input_size = 64;
    rc.train.epochs = 1;
    rc.train.batch_size = 2;
    rc.train.lr_decay_epochs = {};
    rc.train.checkpoint_every = 1;
    rc.data.annotations = (data_dir / "synthetic" / "annotations.json").string();
    rc.data.image_root = (data_dir / "synthetic" / "images").string();
    json doc = to_json(rc);
    doc["model"]["schema"] = kDatasetSchema;
    std::ofstream(file) << doc.dump(2);
    return file;
}

Outcome prepare_synthetic(const fs::path& dir, int keypoints, const std::string& seed = "0") {
    return invoke({"prepare", "--output-dir", dir.string(), "--synthetic", "2", "--synthetic-size", "96",
                   "--synthetic-keypoints", std::to_string(keypoints), "--fewshot", "1", "--seed", seed});
}

// Two families with two species each; no image files are needed to build
// manifests.
fs::path write_family_coco(const fs::path& dir) {
    json doc;
    doc["images"] = json::array();
    doc["annotations"] = json::array();
    doc["categories"] = json::array();
    const std::vector<std::pair<std::string, std::string>> cats{
        {"cat", "Felidae"}, {"lion", "Felidae"}, {"dog", "Canidae"}, {"wolf", "Canidae"}};
    for (std::size_t c = 0; c < cats.size(); ++c) {
        doc["categories"].push_back({{"id", c + 1},
                                     {"name", cats[c].first},
                                     {"supercategory", cats[c].second},
                                     {"keypoints", {"nose", "tail"}}});
        for (int i = 0; i < 3; ++i) {
            const auto id = static_cast<int>(c * 10 + i + 1);
            doc["images"].push_back({{"id", id}, {"file_name", "x.png"}, {"width", 50}, {"height", 50}});
            doc["annotations"].push_back({{"id", id},
                                          {"image_id", id},
                                          {"category_id", c + 1},
                                          {"bbox", {1, 1, 40, 40}},
                                          {"area", 1600},
                                          {"keypoints", {5, 5, 2, 30, 30, 2}}});
        }
    }
    const auto file = dir / "families.json";
    std::ofstream(file) << doc.dump();
    return file;
}

}  // namespace

TEST_CASE("cli rejects bad invocations") {
    CHECK(invoke({}).code == cli::kInputError);
    CHECK(invoke({"frobnicate"}).code == cli::kInputError);
    CHECK(invoke({"prepare"}).code == cli::kInputError);
}

TEST_CASE("cli prepare is deterministic") {
    const auto a = scratch("prep_a"), b = scratch("prep_b");
    const auto ra = prepare_synthetic(a, 3, "5");
    REQUIRE(ra.code == cli::kOk);
    REQUIRE(prepare_synthetic(b, 3, "5").code == cli::kOk);
    CHECK(slurp(a / "fewshot_1_seed5.json") == slurp(b / "fewshot_1_seed5.json"));
    CHECK(slurp(a / "synthetic" / "annotations.json") == slurp(b / "synthetic" / "annotations.json"));
    const auto summary = json::parse(slurp(a / "summary.json"));
    CHECK(summary["full"]["records"] == 2);
}

TEST_CASE("cli prepare reports missing inputs") {
    const auto dir = scratch("prep_missing");
    const auto r = invoke({"prepare", "--output-dir", dir.string(), "--set", "data.annotations=/nonexistent/ann.json"});
    CHECK(r.code == cli::kInputError);
    CHECK(r.err.find("nonexistent") != std::string::npos);
}

TEST_CASE("cli zero-shot manifests are family disjoint") {
    const auto dir = scratch("zeroshot");
    const auto ann = write_family_coco(dir);
    const auto r = invoke({"prepare", "--output-dir", (dir / "out").string(), "--set",
                           "data.annotations=" + ann.string(), "--set", "data.image_root=" + dir.string(),
                           "--zeroshot", "Felidae:Canidae"});
    REQUIRE(r.code == cli::kOk);
    const auto full = load_coco_keypoints(ann, dir);
    const auto train_ids = read_manifest(dir / "out" / "zeroshot_train.json");
    const auto test_ids = read_manifest(dir / "out" / "zeroshot_test.json");
    CHECK(train_ids.size() == 6);
    CHECK(test_ids.size() == 6);
    std::set<std::string> train_fam, test_fam;
    for (auto id : train_ids) train_fam.insert(full.by_id(id).family);
    for (auto id : test_ids) test_fam.insert(full.by_id(id).family);
    CHECK(train_fam == std::set<std::string>{"Felidae"});
    CHECK(test_fam == std::set<std::string>{"Canidae"});

    const auto bad = invoke({"prepare", "--output-dir", (dir / "bad").string(), "--set",
                             "data.annotations=" + ann.string(), "--zeroshot", "Felidae:Ursidae"});
    CHECK(bad.code == cli::kInputError);
}

TEST_CASE("cli train, evaluate and mismatches") {
    const auto dir = scratch("train");
    REQUIRE(prepare_synthetic(dir / "data3", 3).code == cli::kOk);
    REQUIRE(prepare_synthetic(dir / "data4", 4).code == cli::kOk);
    const auto cfg3 = write_config(dir / "toy3.json", dir / "data3", 3);
    const auto cfg4 = write_config(dir / "toy4.json", dir / "data4", 4);

    const auto unknown = invoke({"train", "--config", cfg3.string(), "--output-dir", (dir / "x").string(), "--set",
                                 "train.no_such_key=1"});
    CHECK(unknown.code == cli::kConfigMismatch);

    const auto trained = invoke({"train", "--config", cfg3.string(), "--output-dir", (dir / "run3").string()});
    REQUIRE(trained.code == cli::kOk);
    const auto ckpt = dir / "run3" / "checkpoints" / "final.ckpt";
    CHECK(fs::exists(ckpt));
    CHECK(fs::exists(dir / "run3" / "config.json"));

    const auto eval = invoke({"evaluate", "--config", cfg3.string(), "--output-dir", (dir / "eval").string(),
                              "--checkpoint", ckpt.string(), "--split", "train"});
    CHECK(eval.code == cli::kOk);
    const auto metrics = json::parse(slurp(dir / "eval" / "metrics.json"));
    CHECK(metrics.contains("AP"));
    CHECK(fs::exists(dir / "eval" / "instances.csv"));

    // a 3-keypoint checkpoint cannot start a 4-keypoint run
    const auto resumed = invoke({"train", "--config", cfg4.string(), "--output-dir", (dir / "run4").string(),
                                 "--init", ckpt.string()});
    CHECK(resumed.code == cli::kConfigMismatch);

    const auto vis = invoke({"visualize", "--config", cfg3.string(), "--output-dir", (dir / "vis").string(),
                             "--checkpoint", ckpt.string(), "--mode", "scoremap", "--keypoints", "nose"});
    CHECK(vis.code == cli::kInputError);
    const auto vis_ok = invoke({"visualize", "--config", cfg3.string(), "--output-dir", (dir / "vis").string(),
                                "--checkpoint", ckpt.string(), "--mode", "matchmatrix"});
    CHECK(vis_ok.code == cli::kOk);

    const auto missing = invoke({"evaluate", "--config", cfg3.string(), "--output-dir", (dir / "e2").string(),
                                 "--checkpoint", (dir / "absent.ckpt").string()});
    CHECK(missing.code == cli::kInputError);
}
