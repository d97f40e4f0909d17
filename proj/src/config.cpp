#include "clamp/config.hpp"

#include <cmath>
#include <fstream>

#include "clamp/errors.hpp"

namespace clamp {

namespace {

// Every key of `given` must exist in `known`; objects recurse, and the
// schema object (free-form) is accepted as a whole.
void check_keys(const json& known, const json& given, const std::string& path) {
    if (!given.is_object()) return;
    for (auto it = given.begin(); it != given.end(); ++it) {
        const std::string key = path.empty() ? it.key() : path + "." + it.key();
        if (!known.contains(it.key())) throw ConfigMismatchError("unknown configuration key '" + key + "'");
        if (it.key() == "schema") continue;
        const json& k = known.at(it.key());
        if (k.is_object()) {
            if (!it.value().is_object()) throw ConfigMismatchError("configuration key '" + key + "' must be an object");
            check_keys(k, it.value(), key);
        }
    }
}

void merge(json& base, const json& patch) {
    for (auto it = patch.begin(); it != patch.end(); ++it) {
        if (it.value().is_object() && base.contains(it.key()) && base[it.key()].is_object() && it.key() != "schema") {
            merge(base[it.key()], it.value());
        } else {
            base[it.key()] = it.value();
        }
    }
}

template <typename T>
void read(const json& j, const char* key, T& out) {
    if (!j.contains(key)) return;
    try {
        out = j.at(key).get<T>();
    } catch (const json::exception& e) {
        throw ConfigMismatchError(std::string("configuration key '") + key + "' has the wrong type: " + e.what());
    }
}

json to_json(const LossWeights& w) {
    return {{"alpha1", w.alpha1}, {"alpha2", w.alpha2}, {"logit_scale", w.logit_scale}};
}

LossWeights weights_from_json(const json& j) {
    LossWeights w;
    read(j, "alpha1", w.alpha1);
    read(j, "alpha2", w.alpha2);
    read(j, "logit_scale", w.logit_scale);
    return w;
}

json to_json(const AugmentConfig& a) {
    return {{"enabled", a.enabled},       {"flip_prob", a.flip_prob}, {"max_rotation_deg", a.max_rotation_deg},
            {"scale_min", a.scale_min},   {"scale_max", a.scale_max}, {"seed", a.seed}};
}

AugmentConfig augment_from_json(const json& j) {
    AugmentConfig a;
    read(j, "enabled", a.enabled);
    read(j, "flip_prob", a.flip_prob);
    read(j, "max_rotation_deg", a.max_rotation_deg);
    read(j, "scale_min", a.scale_min);
    read(j, "scale_max", a.scale_max);
    read(j, "seed", a.seed);
    return a;
}

json to_json(const DataConfig& d) {
    return {{"annotations", d.annotations},
            {"image_root", d.image_root},
            {"manifest", d.manifest},
            {"val_annotations", d.val_annotations},
            {"val_image_root", d.val_image_root},
            {"val_manifest", d.val_manifest},
            {"fewshot_per_species", d.fewshot_per_species},
            {"zeroshot_train_families", d.zeroshot_train_families},
            {"zeroshot_test_families", d.zeroshot_test_families}};
}


json pairs_to_json(const std::vector<IndexPair>& pairs) {
    json out = json::array();
    for (const auto& [a, b] : pairs) out.push_back({a, b});
    return out;
}

std::vector<IndexPair> pairs_from_json(const json& j) {
    std::vector<IndexPair> out;
    for (const auto& p : j) {
        if (!p.is_array() || p.size() != 2) throw ConfigMismatchError("index pairs must be [a, b] arrays");
        out.emplace_back(p[0].get<int>(), p[1].get<int>());
    }
    return out;
}

}  // namespace

void TrainConfig::validate() const {
    auto fail = [](const std::string& m) { throw ConfigMismatchError(m); };
    if (epochs < 1) fail("epochs must be >= 1");
    if (!(lr > 0) || !std::isfinite(lr)) fail("lr must be positive");
    if (!(lr_decay_factor > 0)) fail("lr_decay_factor must be positive");
    if (weight_decay < 0) fail("weight_decay must be >= 0");
    if (batch_size < 1) fail("batch_size must be >= 1");
    if (!(backbone_lr_mult > 0)) fail("backbone_lr_mult must be positive");
    if (checkpoint_every < 1) fail("checkpoint_every must be >= 1");
    if (max_steps < 0) fail("max_steps must be >= 0");
    for (std::size_t i = 0; i < lr_decay_epochs.size(); ++i) {
        if (lr_decay_epochs[i] < 1 || lr_decay_epochs[i] >= epochs) fail("lr decay epochs must lie in [1, epochs)");
        if (i > 0 && lr_decay_epochs[i] <= lr_decay_epochs[i - 1]) fail("lr decay epochs must be strictly increasing");
    }
    if (!(augment.scale_min > 0) || augment.scale_max < augment.scale_min) fail("invalid augmentation scale range");
    if (augment.flip_prob < 0 || augment.flip_prob > 1) fail("flip_prob must lie in [0, 1]");
    loss_weights.validate();
}

json to_json(const KeypointSchema& s) {
    return {{"name", s.name},
            {"keypoint_names", s.keypoint_names},
            {"flip_pairs", pairs_to_json(s.flip_pairs)},
            {"skeleton", pairs_to_json(s.skeleton)},
            {"oks_sigmas", s.oks_sigmas},
            {"prompt_names", s.prompt_names}};
}

KeypointSchema schema_from_json(const json& j) {
    if (j.is_string()) {
        const auto name = j.get<std::string>();
        if (name == "ap10k") return KeypointSchema::ap10k();
        if (name == "animal_pose") return KeypointSchema::animal_pose();
        if (name == kDatasetSchema) {
            throw ConfigMismatchError("schema 'dataset' must be resolved against an annotation file first");
        }
        throw ConfigMismatchError("unknown schema '" + name + "'");
    }
    KeypointSchema s;
    try {
        s.name = j.value("name", std::string("custom"));
        s.keypoint_names = j.at("keypoint_names").get<std::vector<std::string>>();
        if (j.contains("flip_pairs")) s.flip_pairs = pairs_from_json(j.at("flip_pairs"));
        if (j.contains("skeleton")) s.skeleton = pairs_from_json(j.at("skeleton"));
        s.oks_sigmas = j.contains("oks_sigmas") ? j.at("oks_sigmas").get<std::vector<double>>()
                                                : std::vector<double>(s.keypoint_names.size(), 0.05);
        if (j.contains("prompt_names")) s.prompt_names = j.at("prompt_names").get<std::vector<std::string>>();
    } catch (const json::exception& e) {
        throw ConfigMismatchError(std::string("invalid schema description: ") + e.what());
    }
    try {
        s.validate();
    } catch (const SchemaMismatchError& e) {
        throw ConfigMismatchError(e.what());
    }
    return s;
}

json to_json(const ModelConfig& c) {
    const auto& e = c.encoder;
    const auto& t = c.text;
    return {{"schema", to_json(c.schema)},
            {"input_size", c.input_size},
            {"encoder",
             {{"kind", e.kind},
              {"toy_channels", e.toy_channels},
              {"resnet_layers", e.resnet_layers},
              {"resnet_width", e.resnet_width},
              {"vit_patch", e.vit_patch},
              {"vit_width", e.vit_width},
              {"vit_layers", e.vit_layers},
              {"vit_heads", e.vit_heads}}},
            {"projector_heads", c.projector_heads},
            {"projector_dense", c.projector_dense},
            {"text",
             {{"vocab_size", t.vocab_size},
              {"context_length", t.context_length},
              {"width", t.width},
              {"layers", t.layers},
              {"heads", t.heads},
              {"embed_dim", t.embed_dim}}},
            {"tokenizer", {{"kind", c.tokenizer.kind}, {"path", c.tokenizer.path}}},
            {"prefix_length", c.prefix_length},
            {"refiner_heads", c.refiner_heads},
            {"gamma_init", c.gamma_init},
            {"refiner_identity_init", c.refiner_identity_init},
            {"predictor",
             {{"stages", c.predictor.stages}, {"channels", c.predictor.channels}, {"batch_norm", c.predictor.batch_norm}}},
            {"learnable_logit_scale", c.learnable_logit_scale},
            {"logit_scale_init", c.logit_scale_init},
            {"baseline", c.baseline}};
}

ModelConfig model_config_from_json(const json& j) {
    ModelConfig c;
    if (j.contains("schema")) c.schema = schema_from_json(j.at("schema"));
    read(j, "input_size", c.input_size);
    if (j.contains("encoder")) {
        const auto& e = j.at("encoder");
        read(e, "kind", c.encoder.kind);
        read(e, "toy_channels", c.encoder.toy_channels);
        read(e, "resnet_layers", c.encoder.resnet_layers);
        read(e, "resnet_width", c.encoder.resnet_width);
        read(e, "vit_patch", c.encoder.vit_patch);
        read(e, "vit_width", c.encoder.vit_width);
        read(e, "vit_layers", c.encoder.vit_layers);
        read(e, "vit_heads", c.encoder.vit_heads);
    }
    read(j, "projector_heads", c.projector_heads);
    read(j, "projector_dense", c.projector_dense);
    if (j.contains("text")) {
        const auto& t = j.at("text");
        read(t, "vocab_size", c.text.vocab_size);
        read(t, "context_length", c.text.context_length);
        read(t, "width", c.text.width);
        read(t, "layers", c.text.layers);
        read(t, "heads", c.text.heads);
        read(t, "embed_dim", c.text.embed_dim);
    }
    if (j.contains("tokenizer")) {
        read(j.at("tokenizer"), "kind", c.tokenizer.kind);
        read(j.at("tokenizer"), "path", c.tokenizer.path);
    }
    read(j, "prefix_length", c.prefix_length);
    read(j, "refiner_heads", c.refiner_heads);
    read(j, "gamma_init", c.gamma_init);
    read(j, "refiner_identity_init", c.refiner_identity_init);
    if (j.contains("predictor")) {
        read(j.at("predictor"), "stages", c.predictor.stages);
        read(j.at("predictor"), "channels", c.predictor.channels);
        read(j.at("predictor"), "batch_norm", c.predictor.batch_norm);
    }
    read(j, "learnable_logit_scale", c.learnable_logit_scale);
    read(j, "logit_scale_init", c.logit_scale_init);
    read(j, "baseline", c.baseline);
    return c;
}

json to_json(const TrainConfig& c) {
    return {{"epochs", c.epochs},
            {"lr", c.lr},
            {"lr_decay_epochs", c.lr_decay_epochs},
            {"lr_decay_factor", c.lr_decay_factor},
            {"weight_decay", c.weight_decay},
            {"batch_size", c.batch_size},
            {"backbone_lr_mult", c.backbone_lr_mult},
            {"seed", c.seed},
            {"loss_weights", to_json(c.loss_weights)},
            {"augment", to_json(c.augment)},
            {"checkpoint_every", c.checkpoint_every},
            {"max_steps", c.max_steps}};
}

TrainConfig train_config_from_json(const json& j) {
    TrainConfig c;
    read(j, "epochs", c.epochs);
    read(j, "lr", c.lr);
    read(j, "lr_decay_epochs", c.lr_decay_epochs);
    read(j, "lr_decay_factor", c.lr_decay_factor);
    read(j, "weight_decay", c.weight_decay);
    read(j, "batch_size", c.batch_size);
    read(j, "backbone_lr_mult", c.backbone_lr_mult);
    read(j, "seed", c.seed);
    if (j.contains("loss_weights")) c.loss_weights = weights_from_json(j.at("loss_weights"));
    if (j.contains("augment")) c.augment = augment_from_json(j.at("augment"));
    read(j, "checkpoint_every", c.checkpoint_every);
    read(j, "max_steps", c.max_steps);
    return c;
}

json to_json(const RunConfig& c) {
    return {{"model", to_json(c.model)}, {"train", to_json(c.train)}, {"data", to_json(c.data)},
            {"pretrained", c.pretrained}};
}

DataConfig data_config_from_json(const json& j) {
    DataConfig d;
    read(j, "annotations", d.annotations);
    read(j, "image_root", d.image_root);
    read(j, "manifest", d.manifest);
    read(j, "val_annotations", d.val_annotations);
    read(j, "val_image_root", d.val_image_root);
    read(j, "val_manifest", d.val_manifest);
    read(j, "fewshot_per_species", d.fewshot_per_species);
    read(j, "zeroshot_train_families", d.zeroshot_train_families);
    read(j, "zeroshot_test_families", d.zeroshot_test_families);
    return d;
}

RunConfig run_config_from_json(const json& j) {
    RunConfig c;
    if (j.contains("model")) c.model = model_config_from_json(j.at("model"));
    if (j.contains("train")) c.train = train_config_from_json(j.at("train"));
    if (j.contains("data")) c.data = data_config_from_json(j.at("data"));
    read(j, "pretrained", c.pretrained);
    return c;
}

void apply_override(json& doc, const std::string& assignment) {
    const auto eq = assignment.find('=');
    if (eq == std::string::npos || eq == 0) {
        throw ConfigMismatchError("override '" + assignment + "' must have the form key=value");
    }
    const std::string key = assignment.substr(0, eq);
    const std::string raw = assignment.substr(eq + 1);
    json* node = &doc;
    std::size_t start = 0;
    while (true) {
        const auto dot = key.find('.', start);
        const std::string part = key.substr(start, dot == std::string::npos ? std::string::npos : dot - start);
        if (!node->is_object() || !node->contains(part)) {
            throw ConfigMismatchError("unknown configuration key '" + key + "'");
        }
        node = &(*node)[part];
        if (dot == std::string::npos) break;
        start = dot + 1;
    }
    json value = json::parse(raw, nullptr, false);
    if (value.is_discarded()) value = raw;
    *node = value;
}

json load_run_config_json(const std::filesystem::path& path, const std::vector<std::string>& overrides) {
    const json defaults = to_json(RunConfig{});
    json doc = defaults;
    if (!path.empty()) {
        std::ifstream in(path);
        if (!in) throw InputError("cannot open configuration file " + path.string());
        json file = json::parse(in, nullptr, false);
        if (file.is_discarded() || !file.is_object()) throw ParseError("configuration file " + path.string() + " is not a JSON object");
        check_keys(defaults, file, "");
        merge(doc, file);
    }
    for (const auto& o : overrides) apply_override(doc, o);
    return doc;
}

RunConfig load_run_config(const std::filesystem::path& path, const std::vector<std::string>& overrides) {
    RunConfig c = run_config_from_json(load_run_config_json(path, overrides));
    c.train.validate();
    return c;
}

bool uses_dataset_schema(const json& doc) {
    return doc.contains("model") && doc.at("model").contains("schema") && doc.at("model").at("schema") == kDatasetSchema;
}

void resolve_dataset_schema(json& doc, const KeypointSchema& schema) {
    if (uses_dataset_schema(doc)) doc["model"]["schema"] = to_json(schema);
}

}  // namespace clamp
