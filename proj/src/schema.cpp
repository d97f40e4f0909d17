#include "clamp/schema.hpp"

#include <algorithm>
#include <cctype>
#include <fstream>
#include <map>
#include <numeric>

#include <json.hpp>

#include "clamp/errors.hpp"
#include "clamp/rng.hpp"

namespace clamp {

using nlohmann::json;

namespace {

std::string lower(std::string s) {
    std::transform(s.begin(), s.end(), s.begin(), [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
    return s;
}

/// Swaps a left/right marker in a lowercased keypoint name; empty if none.
std::string mirrored_name(const std::string& name) {
    static const std::pair<std::string, std::string> markers[] = {
        {"left", "right"}, {"right", "left"}};
    for (const auto& [from, to] : markers) {
        const auto pos = name.find(from);
        if (pos != std::string::npos) return name.substr(0, pos) + to + name.substr(pos + from.size());
    }
    if (name.rfind("l_", 0) == 0) return "r_" + name.substr(2);
    if (name.rfind("r_", 0) == 0) return "l_" + name.substr(2);
    return {};
}

const json& require_key(const json& obj, const char* key, const std::string& where) {
    if (!obj.is_object() || !obj.contains(key)) {
        throw ParseError("missing key '" + std::string(key) + "' in " + where);
    }
    return obj.at(key);
}

template <typename T>
T get_as(const json& obj, const char* key, const std::string& where) {
    const json& v = require_key(obj, key, where);
    try {
        return v.get<T>();
    } catch (const json::exception&) {
        throw ParseError("key '" + std::string(key) + "' in " + where + " has the wrong type");
    }
}

}  // namespace

void KeypointSchema::validate() const {
    const int n = size();
    if (n < 1) throw SchemaMismatchError("schema '" + name + "' has no keypoints");
    std::set<std::string> seen;
    for (const auto& k : keypoint_names) {
        if (k.empty()) throw SchemaMismatchError("schema '" + name + "' has an empty keypoint name");
        if (!seen.insert(k).second) throw SchemaMismatchError("schema '" + name + "' repeats keypoint '" + k + "'");
    }
    auto in_range = [n](const IndexPair& p) { return p.first >= 0 && p.first < n && p.second >= 0 && p.second < n; };
    std::set<int> flipped;
    for (const auto& p : flip_pairs) {
        if (!in_range(p) || p.first == p.second) {
            throw SchemaMismatchError("schema '" + name + "' has an invalid flip pair");
        }
        if (!flipped.insert(p.first).second || !flipped.insert(p.second).second) {
            throw SchemaMismatchError("schema '" + name + "' flip pairs are not disjoint");
        }
    }
    for (const auto& p : skeleton) {
        if (!in_range(p)) throw SchemaMismatchError("schema '" + name + "' has a skeleton edge out of range");
    }
    if (static_cast<int>(oks_sigmas.size()) != n) {
        throw SchemaMismatchError("schema '" + name + "' needs " + std::to_string(n) + " OKS sigmas, has " +
                                  std::to_string(oks_sigmas.size()));
    }
    for (double s : oks_sigmas) {
        if (!(s > 0.0)) throw SchemaMismatchError("schema '" + name + "' has a non-positive OKS sigma");
    }
    if (!prompt_names.empty() && static_cast<int>(prompt_names.size()) != n) {
        throw SchemaMismatchError("schema '" + name + "' prompt names do not match keypoint count");
    }
}

std::string KeypointSchema::prompt_text(int index) const {
    if (!prompt_names.empty()) return prompt_names.at(static_cast<std::size_t>(index));
    std::string s = keypoint_names.at(static_cast<std::size_t>(index));
    std::replace(s.begin(), s.end(), '_', ' ');
    return s;
}

int KeypointSchema::index_of(std::string_view keypoint) const {
    for (int i = 0; i < size(); ++i) {
        if (keypoint_names[static_cast<std::size_t>(i)] == keypoint) return i;
        if (!prompt_names.empty() && prompt_names[static_cast<std::size_t>(i)] == keypoint) return i;
    }
    return -1;
}

std::vector<int> KeypointSchema::flip_permutation() const {
    std::vector<int> perm(static_cast<std::size_t>(size()));
    std::iota(perm.begin(), perm.end(), 0);
    for (const auto& [a, b] : flip_pairs) {
        perm[static_cast<std::size_t>(a)] = b;
        perm[static_cast<std::size_t>(b)] = a;
    }
    return perm;
}

std::vector<IndexPair> infer_flip_pairs(const std::vector<std::string>& names) {
    std::vector<IndexPair> pairs;
    std::vector<bool> used(names.size(), false);
    for (std::size_t i = 0; i < names.size(); ++i) {
        if (used[i]) continue;
        const std::string mirror = mirrored_name(lower(names[i]));
        if (mirror.empty()) continue;
        for (std::size_t j = i + 1; j < names.size(); ++j) {
            if (!used[j] && lower(names[j]) == mirror) {
                pairs.emplace_back(static_cast<int>(i), static_cast<int>(j));
                used[i] = used[j] = true;
                break;
            }
        }
    }
    return pairs;
}

KeypointSchema KeypointSchema::ap10k() {
    KeypointSchema s;
    s.name = "ap10k";
    s.keypoint_names = {"left_eye",      "right_eye",  "nose",           "neck",      "root_of_tail",
                        "left_shoulder", "left_elbow", "left_front_paw", "right_shoulder", "right_elbow",
                        "right_front_paw", "left_hip", "left_knee",      "left_back_paw", "right_hip",
                        "right_knee",    "right_back_paw"};
    s.flip_pairs = {{0, 1}, {5, 8}, {6, 9}, {7, 10}, {11, 14}, {12, 15}, {13, 16}};
    s.skeleton = {{0, 1}, {0, 2}, {1, 2}, {2, 3},  {3, 4},   {3, 5},   {5, 6},   {6, 7},   {3, 8},
                  {8, 9}, {9, 10}, {4, 11}, {11, 12}, {12, 13}, {4, 14}, {14, 15}, {15, 16}};
    s.oks_sigmas = {0.025, 0.025, 0.026, 0.035, 0.035, 0.079, 0.072, 0.062, 0.079,
                    0.072, 0.062, 0.107, 0.087, 0.089, 0.107, 0.087, 0.089};
    s.prompt_names = {"left eye",       "right eye",  "nose",           "neck",           "root of tail",
                      "left shoulder",  "left elbow", "left front paw", "right shoulder", "right elbow",
                      "right front paw", "left hip",  "left knee",      "left back paw",  "right hip",
                      "right knee",     "right back paw"};
    return s;
}

KeypointSchema KeypointSchema::animal_pose() {
    KeypointSchema s;
    s.name = "animal_pose";
    s.keypoint_names = {"L_Eye",     "R_Eye",     "L_EarBase", "R_EarBase", "Nose",     "Throat",   "TailBase",
                        "Withers",   "L_F_Elbow", "R_F_Elbow", "L_B_Elbow", "R_B_Elbow", "L_F_Knee", "R_F_Knee",
                        "L_B_Knee",  "R_B_Knee",  "L_F_Paw",   "R_F_Paw",   "L_B_Paw",  "R_B_Paw"};
    s.flip_pairs = {{0, 1}, {2, 3}, {8, 9}, {10, 11}, {12, 13}, {14, 15}, {16, 17}, {18, 19}};
    s.skeleton = {{0, 1},  {0, 2},   {1, 3},   {0, 4},  {1, 4},   {4, 5},   {5, 7},
                  {6, 7},  {5, 8},   {8, 12},  {12, 16}, {5, 9},  {9, 13},  {13, 17},
                  {6, 10}, {10, 14}, {14, 18}, {6, 11}, {11, 15}, {15, 19}};
    s.oks_sigmas = {0.025, 0.025, 0.026, 0.035, 0.035, 0.10,  0.10,  0.10,  0.107, 0.107,
                    0.107, 0.107, 0.087, 0.087, 0.087, 0.087, 0.089, 0.089, 0.089, 0.089};
    s.prompt_names = {"left eye",        "right eye",        "left ear base",    "right ear base",
                      "nose",            "throat",           "tail base",        "withers",
                      "left front elbow", "right front elbow", "left back elbow", "right back elbow",
                      "left front knee", "right front knee", "left back knee",   "right back knee",
                      "left front paw",  "right front paw",  "left back paw",    "right back paw"};
    return s;
}

KeypointSchema KeypointSchema::from_names(std::string name, std::vector<std::string> names, double sigma) {
    KeypointSchema s;
    s.name = std::move(name);
    s.flip_pairs = infer_flip_pairs(names);
    s.oks_sigmas.assign(names.size(), sigma);
    s.keypoint_names = std::move(names);
    return s;
}

int InstanceRecord::labeled_count() const {
    return static_cast<int>(std::count_if(keypoints.begin(), keypoints.end(), [](const Keypoint& k) { return k.labeled(); }));
}

std::string_view to_string(SplitKind kind) {
    switch (kind) {
        case SplitKind::supervised: return "supervised";
        case SplitKind::fewshot: return "fewshot";
        case SplitKind::zeroshot_train: return "zeroshot-train";
        case SplitKind::zeroshot_test: return "zeroshot-test";
    }
    return "unknown";
}

std::set<std::string> DatasetSplit::species() const {
    std::set<std::string> out;
    for (const auto& r : records) out.insert(r.species);
    return out;
}

std::set<std::string> DatasetSplit::families() const {
    std::set<std::string> out;
    for (const auto& r : records) out.insert(r.family);
    return out;
}

std::vector<std::int64_t> DatasetSplit::ids() const {
    std::vector<std::int64_t> out;
    out.reserve(records.size());
    for (const auto& r : records) out.push_back(r.id);
    return out;
}

const InstanceRecord& DatasetSplit::by_id(std::int64_t id) const {
    for (const auto& r : records)
        if (r.id == id) return r;
    throw PreconditionError("no record with annotation id " + std::to_string(id));
}

DatasetSplit load_coco_keypoints(const std::filesystem::path& annotation_file,
                                 const std::filesystem::path& image_root) {
    std::ifstream in(annotation_file);
    if (!in) throw InputError("cannot open annotation file " + annotation_file.string());
    json doc;
    try {
        doc = json::parse(in);
    } catch (const json::parse_error& e) {
        throw ParseError("invalid JSON in " + annotation_file.string() + ": " + e.what());
    }
    const std::string file = annotation_file.filename().string();
    const json& images = require_key(doc, "images", file);
    const json& annotations = require_key(doc, "annotations", file);
    const json& categories = require_key(doc, "categories", file);
    if (!images.is_array()) throw ParseError("key 'images' in " + file + " must be an array");
    if (!annotations.is_array()) throw ParseError("key 'annotations' in " + file + " must be an array");
    if (!categories.is_array() || categories.empty()) {
        throw ParseError("key 'categories' in " + file + " must be a non-empty array");
    }

    struct Category {
        std::string name, family;
    };
    std::map<std::int64_t, Category> cats;
    std::vector<std::string> names;
    std::vector<IndexPair> skeleton;
    for (const auto& c : categories) {
        const std::string where = "categories entry of " + file;
        const auto id = get_as<std::int64_t>(c, "id", where);
        auto kp_names = get_as<std::vector<std::string>>(c, "keypoints", where);
        if (names.empty()) {
            names = kp_names;
            if (c.contains("skeleton") && c["skeleton"].is_array()) {
                for (const auto& e : c["skeleton"]) {
                    // COCO skeleton indices are 1-based
                    skeleton.emplace_back(e.at(0).get<int>() - 1, e.at(1).get<int>() - 1);
                }
            }
        } else if (kp_names != names) {
            throw SchemaMismatchError("category " + std::to_string(id) + " uses a different keypoint list");
        }
        cats[id] = {get_as<std::string>(c, "name", where), c.value("supercategory", std::string{})};
    }

    DatasetSplit split;
    if (names == KeypointSchema::ap10k().keypoint_names) {
        split.schema = KeypointSchema::ap10k();
    } else if (names == KeypointSchema::animal_pose().keypoint_names) {
        split.schema = KeypointSchema::animal_pose();
    } else {
        split.schema = KeypointSchema::from_names(annotation_file.stem().string(), names);
        split.schema.skeleton = skeleton;
    }
    split.schema.validate();
    const int n = split.schema.size();

    struct ImageInfo {
        std::string file;
        int width, height;
    };
    std::map<std::int64_t, ImageInfo> image_info;
    for (const auto& im : images) {
        const std::string where = "images entry of " + file;
        image_info[get_as<std::int64_t>(im, "id", where)] = {get_as<std::string>(im, "file_name", where),
                                                             im.value("width", 0), im.value("height", 0)};
    }

    for (const auto& a : annotations) {
        const std::string where = "annotations entry of " + file;
        InstanceRecord r;
        r.id = get_as<std::int64_t>(a, "id", where);
        const std::string rec = "annotation " + std::to_string(r.id);
        r.image_id = get_as<std::int64_t>(a, "image_id", rec);
        const auto kps = get_as<std::vector<double>>(a, "keypoints", rec);
        if (static_cast<int>(kps.size()) != 3 * n) {
            throw SchemaMismatchError(rec + " has " + std::to_string(kps.size()) + " keypoint numbers, expected 3*" +
                                      std::to_string(n) + "=" + std::to_string(3 * n));
        }
        const auto box = get_as<std::vector<double>>(a, "bbox", rec);
        if (box.size() != 4) throw ParseError("key 'bbox' in " + rec + " must have 4 numbers");
        r.bbox = {box[0], box[1], box[2], box[3]};
        if (!(r.bbox.w > 0.0 && r.bbox.h > 0.0)) throw SchemaMismatchError(rec + " has a degenerate bbox");

        const auto image = image_info.find(r.image_id);
        if (image == image_info.end()) {
            throw ParseError(rec + " refers to unknown image_id " + std::to_string(r.image_id));
        }
        r.image_path = (image_root / image->second.file).string();
        r.image_width = image->second.width;
        r.image_height = image->second.height;

        const auto cat_id = get_as<std::int64_t>(a, "category_id", rec);
        const auto cat = cats.find(cat_id);
        if (cat == cats.end()) throw ParseError(rec + " refers to unknown category_id " + std::to_string(cat_id));
        r.species = cat->second.name;
        r.family = cat->second.family;

        r.keypoints.resize(static_cast<std::size_t>(n));
        for (int k = 0; k < n; ++k) {
            auto& kp = r.keypoints[static_cast<std::size_t>(k)];
            kp.x = kps[static_cast<std::size_t>(3 * k)];
            kp.y = kps[static_cast<std::size_t>(3 * k + 1)];
            kp.v = static_cast<int>(kps[static_cast<std::size_t>(3 * k + 2)]);
            if (kp.v < 0 || kp.v > 2) throw SchemaMismatchError(rec + " has visibility flag outside {0,1,2}");
            if (kp.labeled() && r.image_width > 0 && r.image_height > 0 &&
                (kp.x < 0 || kp.y < 0 || kp.x > r.image_width || kp.y > r.image_height)) {
                throw SchemaMismatchError(rec + " keypoint '" + split.schema.keypoint_names[static_cast<std::size_t>(k)] +
                                          "' lies outside the image");
            }
        }
        r.area = a.value("area", 0.0);
        if (!(r.area > 0.0)) r.area = r.bbox.w * r.bbox.h;
        split.records.push_back(std::move(r));
    }
    std::sort(split.records.begin(), split.records.end(),
              [](const InstanceRecord& a, const InstanceRecord& b) { return a.id < b.id; });
    return split;
}

DatasetSplit build_fewshot_split(const DatasetSplit& full, int per_species, std::uint64_t seed) {
    if (per_species < 1) throw PreconditionError("per_species must be at least 1");
    if (full.records.empty()) throw PreconditionError("cannot build a few-shot split from an empty dataset");

    std::map<std::string, std::vector<const InstanceRecord*>> by_species;
    for (const auto& r : full.records) by_species[r.species].push_back(&r);

    DatasetSplit out;
    out.schema = full.schema;
    out.kind = SplitKind::fewshot;
    for (auto& [species, recs] : by_species) {
        std::sort(recs.begin(), recs.end(), [](auto* a, auto* b) { return a->id < b->id; });
        Rng rng(mix_seed(seed, stable_hash(species)));
        const std::size_t take = std::min(recs.size(), static_cast<std::size_t>(per_species));
        // partial Fisher-Yates: the first `take` slots become the sample
        for (std::size_t i = 0; i < take; ++i) {
            const std::size_t j = i + static_cast<std::size_t>(rng.below(recs.size() - i));
            std::swap(recs[i], recs[j]);
        }
        std::vector<const InstanceRecord*> picked(recs.begin(), recs.begin() + static_cast<std::ptrdiff_t>(take));
        std::sort(picked.begin(), picked.end(), [](auto* a, auto* b) { return a->id < b->id; });
        for (const auto* r : picked) out.records.push_back(*r);
    }
    return out;
}

std::pair<DatasetSplit, DatasetSplit> build_zeroshot_split(const DatasetSplit& full,
                                                           const std::set<std::string>& train_families,
                                                           const std::set<std::string>& test_families) {
    for (const auto& f : train_families) {
        if (test_families.count(f)) {
            throw PreconditionError("family '" + f + "' appears in both the training and test sets");
        }
    }
    const auto present = full.families();
    for (const auto* set : {&train_families, &test_families}) {
        for (const auto& f : *set) {
            if (!present.count(f)) throw PreconditionError("family '" + f + "' is not present in the dataset");
        }
    }
    DatasetSplit train, test;
    train.schema = test.schema = full.schema;
    train.kind = SplitKind::zeroshot_train;
    test.kind = SplitKind::zeroshot_test;
    for (const auto& r : full.records) {
        if (train_families.count(r.family)) train.records.push_back(r);
        else if (test_families.count(r.family)) test.records.push_back(r);
    }
    return {std::move(train), std::move(test)};
}

void write_manifest(const std::filesystem::path& file, const DatasetSplit& split) {
    std::ofstream out(file, std::ios::binary);
    if (!out) throw InputError("cannot write manifest " + file.string());
    out << json(split.ids()).dump() << '\n';
}

std::vector<std::int64_t> read_manifest(const std::filesystem::path& file) {
    std::ifstream in(file);
    if (!in) throw InputError("cannot open manifest " + file.string());
    try {
        return json::parse(in).get<std::vector<std::int64_t>>();
    } catch (const json::exception& e) {
        throw ParseError("manifest " + file.string() + " is not a JSON list of ids: " + e.what());
    }
}

DatasetSplit select_records(const DatasetSplit& full, const std::vector<std::int64_t>& ids, SplitKind kind) {
    std::map<std::int64_t, const InstanceRecord*> index;
    for (const auto& r : full.records) index[r.id] = &r;
    DatasetSplit out;
    out.schema = full.schema;
    out.kind = kind;
    for (auto id : ids) {
        const auto it = index.find(id);
        if (it == index.end()) throw PreconditionError("manifest id " + std::to_string(id) + " is not in the dataset");
        out.records.push_back(*it->second);
    }
    return out;
}

}  // namespace clamp
