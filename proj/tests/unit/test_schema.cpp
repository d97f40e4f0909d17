#include <doctest.h>

#include <filesystem>
#include <fstream>
#include <map>
#include <set>

#include <json.hpp>

#include "clamp/errors.hpp"
#include "clamp/schema.hpp"

using namespace clamp;
namespace fs = std::filesystem;

namespace {

fs::path scratch(const std::string& name) {
    const fs::path dir = fs::temp_directory_path() / ("clamp_unit_" + name);
    fs::remove_all(dir);
    fs::create_directories(dir);
    return dir;
}

// Three species in two families; species a has 5 instances, b 2, c 3.
nlohmann::json tiny_coco() {
    nlohmann::json doc;
    doc["images"] = nlohmann::json::array();
    doc["annotations"] = nlohmann::json::array();
    doc["categories"] = nlohmann::json::array();
    const std::vector<std::string> kps{"left_eye", "right_eye", "nose"};
    const std::vector<std::pair<std::string, std::string>> cats{{"a", "Felidae"}, {"b", "Felidae"}, {"c", "Canidae"}};
    for (std::size_t c = 0; c < cats.size(); ++c) {
        doc["categories"].push_back(
            {{"id", c + 1}, {"name", cats[c].first}, {"supercategory", cats[c].second}, {"keypoints", kps}});
    }
    const int counts[] = {5, 2, 3};
    int id = 1;
    for (int c = 0; c < 3; ++c) {
        for (int i = 0; i < counts[c]; ++i, ++id) {
            doc["images"].push_back({{"id", id}, {"file_name", std::to_string(id) + ".png"}, {"width", 64}, {"height", 64}});
            doc["annotations"].push_back({{"id", 100 + id},
                                          {"image_id", id},
                                          {"category_id", c + 1},
                                          {"bbox", {4, 4, 40, 40}},
                                          {"area", 1600},
                                          {"keypoints", {10, 10, 2, 30, 10, 2, 20, 25, 1}},
                                          {"num_keypoints", 3}});
        }
    }
    return doc;
}

fs::path write_json(const fs::path& file, const nlohmann::json& doc) {
    std::ofstream(file) << doc.dump();
    return file;
}

}  // namespace

TEST_CASE("bundled schemas are valid") {
    const auto ap10k = KeypointSchema::ap10k();
    CHECK(ap10k.size() == 17);
    CHECK_NOTHROW(ap10k.validate());
    CHECK(KeypointSchema::animal_pose().size() == 20);
    CHECK_NOTHROW(KeypointSchema::animal_pose().validate());
    CHECK(ap10k.prompt_text(ap10k.index_of("left_eye")) == "left eye");
}

TEST_CASE("flip permutation is an involution") {
    for (const auto& schema : {KeypointSchema::ap10k(), KeypointSchema::animal_pose()}) {
        const auto p = schema.flip_permutation();
        for (int i = 0; i < schema.size(); ++i) CHECK(p[static_cast<std::size_t>(p[static_cast<std::size_t>(i)])] == i);
    }
}

TEST_CASE("flip pairs are inferred from left and right names") {
    const auto s = KeypointSchema::from_names("x", {"left_paw", "nose", "right_paw"});
    REQUIRE(s.flip_pairs.size() == 1);
    CHECK(((s.flip_pairs[0] == IndexPair{0, 2}) || (s.flip_pairs[0] == IndexPair{2, 0})));
}

TEST_CASE("schema validation rejects broken vocabularies") {
    auto dup = KeypointSchema::from_names("d", {"nose", "tail"});
    dup.keypoint_names[1] = "nose";
    CHECK_THROWS_AS(dup.validate(), SchemaMismatchError);

    auto sigmas = KeypointSchema::from_names("s", {"nose", "tail"});
    sigmas.oks_sigmas.pop_back();
    CHECK_THROWS_AS(sigmas.validate(), SchemaMismatchError);

    auto edge = KeypointSchema::from_names("e", {"nose", "tail"});
    edge.skeleton.push_back({0, 5});
    CHECK_THROWS_AS(edge.validate(), SchemaMismatchError);
}

TEST_CASE("coco loading") {
    const auto dir = scratch("coco");
    const auto file = write_json(dir / "ann.json", tiny_coco());
    const auto split = load_coco_keypoints(file, dir);
    CHECK(split.records.size() == 10);
    CHECK(split.schema.size() == 3);
    CHECK(split.species() == std::set<std::string>{"a", "b", "c"});
    CHECK(split.families() == std::set<std::string>{"Felidae", "Canidae"});
    for (std::size_t i = 1; i < split.records.size(); ++i) CHECK(split.records[i - 1].id < split.records[i].id);

    CHECK_THROWS_AS(load_coco_keypoints(dir / "missing.json", dir), InputError);

    auto bad = tiny_coco();
    bad["annotations"][0]["keypoints"] = {1, 2, 2};
    CHECK_THROWS_AS(load_coco_keypoints(write_json(dir / "bad.json", bad), dir), SchemaMismatchError);

    std::ofstream(dir / "broken.json") << "{ not json";
    CHECK_THROWS_AS(load_coco_keypoints(dir / "broken.json", dir), ParseError);
}

TEST_CASE("few-shot split caps each species and is seeded") {
    const auto dir = scratch("fewshot");
    const auto full = load_coco_keypoints(write_json(dir / "ann.json", tiny_coco()), dir);
    const auto a = build_fewshot_split(full, 3, 7);
    const auto b = build_fewshot_split(full, 3, 7);
    CHECK(a.ids() == b.ids());
    CHECK(a.records.size() == 3 + 2 + 3);
    std::map<std::string, int> per;
    for (const auto& r : a.records) ++per[r.species];
    CHECK(per["a"] == 3);
    CHECK(per["b"] == 2);
    CHECK(per["c"] == 3);

    const auto one = build_fewshot_split(full, 1, 1);
    CHECK(one.records.size() == 3);
    CHECK_THROWS_AS(build_fewshot_split(full, 0, 1), PreconditionError);
}

TEST_CASE("zero-shot split keeps families disjoint") {
    const auto dir = scratch("zeroshot");
    const auto full = load_coco_keypoints(write_json(dir / "ann.json", tiny_coco()), dir);
    const auto [train, test] = build_zeroshot_split(full, {"Felidae"}, {"Canidae"});
    CHECK(train.families() == std::set<std::string>{"Felidae"});
    CHECK(test.families() == std::set<std::string>{"Canidae"});
    CHECK(train.records.size() + test.records.size() == full.records.size());
    for (const auto& s : train.species()) CHECK(test.species().count(s) == 0);
    CHECK_THROWS_AS(build_zeroshot_split(full, {"Felidae"}, {"Felidae"}), PreconditionError);
    CHECK_THROWS_AS(build_zeroshot_split(full, {"Felidae"}, {"Ursidae"}), PreconditionError);
}

TEST_CASE("manifest round trip") {
    const auto dir = scratch("manifest");
    const auto full = load_coco_keypoints(write_json(dir / "ann.json", tiny_coco()), dir);
    const auto few = build_fewshot_split(full, 2, 3);
    write_manifest(dir / "m.json", few);
    const auto ids = read_manifest(dir / "m.json");
    CHECK(ids == few.ids());
    CHECK(select_records(full, ids, SplitKind::fewshot).ids() == few.ids());
    CHECK_THROWS_AS(select_records(full, {999}, SplitKind::fewshot), PreconditionError);
}
