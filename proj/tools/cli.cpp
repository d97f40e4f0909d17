#include "cli.hpp"

#include <algorithm>
#include <fstream>
#include <map>
#include <set>
#include <sstream>

#include <CLI11.hpp>
#include <opencv2/imgcodecs.hpp>

#include "clamp/checkpoint.hpp"
#include "clamp/config.hpp"
#include "clamp/errors.hpp"
#include "clamp/eval.hpp"
#include "clamp/image.hpp"
#include "clamp/selfcheck.hpp"
#include "clamp/synthetic.hpp"
#include "clamp/train.hpp"
#include "render.hpp"

namespace clamp::cli {

namespace fs = std::filesystem;

namespace {

struct Common {
    std::string config;
    std::vector<std::string> overrides;
    std::string output_dir;
};

void add_common(CLI::App& cmd, Common& c) {
    cmd.add_option("--config", c.config, "JSON run configuration");
    cmd.add_option("--set", c.overrides, "dotted override key=value (repeatable)");
    cmd.add_option("--output-dir", c.output_dir, "directory receiving every output")->required();
}

fs::path make_output_dir(const std::string& dir) {
    const fs::path p(dir);
    std::error_code ec;
    fs::create_directories(p, ec);
    if (ec) throw InputError("cannot create output directory " + p.string() + ": " + ec.message());
    return p;
}

void write_json(const fs::path& path, const json& doc) {
    std::ofstream out(path);
    if (!out) throw InputError("cannot write " + path.string());
    out << doc.dump(2) << "\n";
}

bool touches_model(const Common& c) {
    if (std::any_of(c.overrides.begin(), c.overrides.end(), [](const std::string& o) { return o.rfind("model.", 0) == 0; })) {
        return true;
    }
    if (c.config.empty()) return false;
    std::ifstream in(c.config);
    const json file = json::parse(in, nullptr, false);
    return file.is_object() && file.contains("model");
}

DatasetSplit load_split(const std::string& annotations, const std::string& image_root, const std::string& manifest) {
    if (annotations.empty()) throw InputError("no annotation file configured (set data.annotations)");
    DatasetSplit split = load_coco_keypoints(annotations, image_root);
    if (!manifest.empty()) split = select_records(split, read_manifest(manifest), SplitKind::supervised);
    return split;
}

DatasetSplit load_eval_split(const DataConfig& data, const std::string& which) {
    if (which == "train") return load_split(data.annotations, data.image_root, data.manifest);
    if (which == "val") {
        if (data.val_annotations.empty()) return load_split(data.annotations, data.image_root, data.manifest);
        return load_split(data.val_annotations, data.val_image_root, data.val_manifest);
    }
    throw InputError("unknown split '" + which + "' (expected train or val)");
}

// The dataset's keypoints must line up with the model's; the model schema
// (with its OKS sigmas and flip pairs) then replaces the file's.
void adopt_schema(DatasetSplit& split, const KeypointSchema& schema, std::ostream& err) {
    if (split.schema.size() != schema.size()) {
        throw ConfigMismatchError("dataset has " + std::to_string(split.schema.size()) + " keypoints, model schema '" +
                                  schema.name + "' has " + std::to_string(schema.size()));
    }
    if (split.schema.keypoint_names != schema.keypoint_names) {
        err << "warning: dataset keypoint names differ from schema '" << schema.name << "'; using schema order\n";
    }
    split.schema = schema;
}

std::set<std::string> family_list(const std::string& text) {
    std::set<std::string> out;
    std::stringstream ss(text);
    std::string item;
    while (std::getline(ss, item, ',')) {
        if (!item.empty()) out.insert(item);
    }
    return out;
}

json counts(const DatasetSplit& split) {
    std::map<std::string, int> species, families;
    for (const auto& r : split.records) {
        ++species[r.species];
        ++families[r.family];
    }
    std::set<std::int64_t> images;
    for (const auto& r : split.records) images.insert(r.image_id);
    return {{"records", split.records.size()}, {"images", images.size()}, {"species", species}, {"families", families}};
}

// -- prepare ---------------------------------------------------------------

struct PrepareArgs {
    Common common;
    int fewshot = 0;
    std::uint64_t seed = 0;
    std::string zeroshot;
    int synthetic = 0;
    int synthetic_keypoints = 5;
    int synthetic_size = 256;
};

int cmd_prepare(const PrepareArgs& a, std::ostream& out) {
    const auto dir = make_output_dir(a.common.output_dir);
    DataConfig data = data_config_from_json(load_run_config_json(a.common.config, a.common.overrides).at("data"));
    json summary;
    if (a.synthetic > 0) {
        BlobOptions bo;
        bo.count = a.synthetic;
        bo.num_keypoints = a.synthetic_keypoints;
        bo.size = a.synthetic_size;
        bo.seed = a.seed;
        data.annotations = write_blob_dataset(bo, dir / "synthetic").string();
        data.image_root = (dir / "synthetic" / "images").string();
        out << "wrote " << a.synthetic << " synthetic images to " << data.image_root << "\n";
    }
    const DatasetSplit full = load_split(data.annotations, data.image_root, data.manifest);
    summary["annotations"] = data.annotations;
    summary["image_root"] = data.image_root;
    summary["full"] = counts(full);

    if (a.fewshot > 0) {
        const auto few = build_fewshot_split(full, a.fewshot, a.seed);
        const auto file = dir / ("fewshot_" + std::to_string(a.fewshot) + "_seed" + std::to_string(a.seed) + ".json");
        write_manifest(file, few);
        summary["fewshot"] = counts(few);
        summary["fewshot"]["manifest"] = file.string();
        summary["fewshot"]["per_species"] = a.fewshot;
        summary["fewshot"]["seed"] = a.seed;
        out << "few-shot manifest: " << few.records.size() << " records -> " << file.string() << "\n";
    }
    if (!a.zeroshot.empty()) {
        const auto colon = a.zeroshot.find(':');
        if (colon == std::string::npos) throw InputError("--zeroshot expects TRAIN_FAMILIES:TEST_FAMILIES");
        const auto train_f = family_list(a.zeroshot.substr(0, colon));
        const auto test_f = family_list(a.zeroshot.substr(colon + 1));
        const auto present = full.families();
        for (const auto* side : {&train_f, &test_f}) {
            if (side->empty()) throw InputError("--zeroshot needs at least one family on each side");
            for (const auto& f : *side) {
                if (!present.count(f)) {
                    std::string known;
                    for (const auto& p : present) known += (known.empty() ? "" : ", ") + p;
                    throw InputError("family '" + f + "' is not in the dataset (families: " + known + ")");
                }
            }
        }
        for (const auto& f : train_f) {
            if (test_f.count(f)) throw InputError("family '" + f + "' is on both sides of --zeroshot");
        }
        const auto [train_split, test_split] = build_zeroshot_split(full, train_f, test_f);
        write_manifest(dir / "zeroshot_train.json", train_split);
        write_manifest(dir / "zeroshot_test.json", test_split);
        summary["zeroshot_train"] = counts(train_split);
        summary["zeroshot_test"] = counts(test_split);
        out << "zero-shot manifests: " << train_split.records.size() << " train / " << test_split.records.size()
            << " test records\n";
    }
    write_json(dir / "summary.json", summary);
    out << "summary -> " << (dir / "summary.json").string() << "\n";
    return kOk;
}

// -- train -----------------------------------------------------------------

struct TrainArgs {
    Common common;
    std::string init;
    int log_every = 10;
};

int cmd_train(const TrainArgs& a, std::ostream& out, std::ostream& err) {
    json doc = load_run_config_json(a.common.config, a.common.overrides);
    const DataConfig data = data_config_from_json(doc.at("data"));
    DatasetSplit split = load_split(data.annotations, data.image_root, data.manifest);
    resolve_dataset_schema(doc, split.schema);
    RunConfig cfg = run_config_from_json(doc);
    cfg.train.validate();
    adopt_schema(split, cfg.model.schema, err);

    std::optional<DatasetSplit> val;
    if (!data.val_annotations.empty()) {
        val = load_split(data.val_annotations, data.val_image_root, data.val_manifest);
        adopt_schema(*val, cfg.model.schema, err);
    }
    const auto dir = make_output_dir(a.common.output_dir);

    ClampModel model(cfg.model, cfg.train.seed);
    if (!cfg.pretrained.empty()) {
        const auto report = load_clip_weights(model, read_safetensors(cfg.pretrained));
        write_json(dir / "weights_report.json",
                   {{"loaded", report.loaded}, {"unused", report.unused}, {"missing", report.missing}});
        out << "pretrained weights: " << report.loaded.size() << " tensors loaded, " << report.missing.size()
            << " left at init\n";
    }
    if (!a.init.empty()) apply_checkpoint(read_checkpoint(a.init), model);
    cfg.model = model.config();
    write_json(dir / "config.json", to_json(cfg));

    ImageCache cache;
    TrainOptions opts;
    opts.output_dir = dir;
    opts.validation = val ? &*val : nullptr;
    opts.on_step = [&](const StepLog& s) {
        if (a.log_every > 0 && s.step % a.log_every == 0) {
            out << "step " << s.step << " epoch " << s.epoch << " total " << s.total << " pred " << s.l_pred
                << " spatial " << s.l_spatial << " feature " << s.l_feature << " lr " << s.lr << "\n";
        }
    };
    out << "training on " << split.records.size() << " records\n";
    const auto result = train(model, split, cfg.train, cache, opts);
    out << "finished after " << result.steps << " steps; final checkpoint " << result.final_checkpoint.string() << "\n";
    if (result.best_validation) out << "best validation " << result.best_validation->to_json().dump() << "\n";
    return kOk;
}

// -- evaluate / visualize ----------------------------------------------------

struct Loaded {
    RunConfig cfg;
    DatasetSplit split;
    std::unique_ptr<ClampModel> model;
};

Loaded load_for_inference(const Common& c, const std::string& checkpoint, const std::string& which, std::ostream& err) {
    if (checkpoint.empty()) throw InputError("--checkpoint is required");
    const auto ckpt = read_checkpoint(checkpoint);
    json doc = load_run_config_json(c.config, c.overrides);
    Loaded l;
    const DataConfig data = data_config_from_json(doc.at("data"));
    l.split = load_eval_split(data, which);
    if (touches_model(c)) {
        resolve_dataset_schema(doc, l.split.schema);
    } else {
        doc["model"] = to_json(ckpt.config);
    }
    l.cfg = run_config_from_json(doc);
    l.model = std::make_unique<ClampModel>(l.cfg.model, 0);
    apply_checkpoint(ckpt, *l.model);
    adopt_schema(l.split, l.model->config().schema, err);
    l.model->set_training(false);
    return l;
}

struct EvaluateArgs {
    Common common;
    std::string checkpoint;
    std::string split = "val";
    int batch_size = 16;
};

int cmd_evaluate(const EvaluateArgs& a, std::ostream& out, std::ostream& err) {
    auto l = load_for_inference(a.common, a.checkpoint, a.split, err);
    const auto dir = make_output_dir(a.common.output_dir);
    ImageCache cache;
    const auto preds = predict_split(*l.model, l.split, cache, a.batch_size);
    const auto result = evaluate(preds, l.split, l.model->config().schema.oks_sigmas);
    json metrics = result.metrics.to_json();
    write_json(dir / "metrics.json", metrics);
    write_instance_csv(dir / "instances.csv", result);
    write_predictions(dir / "predictions.json", preds, l.split);
    if (!result.skipped.empty()) err << result.skipped.size() << " instances without labeled keypoints were skipped\n";
    out << metrics.dump() << "\n";
    return kOk;
}

struct VisualizeArgs {
    Common common;
    std::string checkpoint;
    std::string mode;
    std::vector<std::int64_t> ids;
    std::vector<std::string> keypoints;
    std::string split = "val";
};

std::vector<int> selected_keypoints(const KeypointSchema& schema, const std::vector<std::string>& names) {
    std::vector<int> out;
    if (names.empty()) {
        for (int k = 0; k < schema.size(); ++k) out.push_back(k);
        return out;
    }
    for (const auto& n : names) {
        const int k = schema.index_of(n);
        if (k < 0) {
            std::string valid;
            for (const auto& v : schema.keypoint_names) valid += (valid.empty() ? "" : ", ") + v;
            throw InputError("unknown keypoint '" + n + "'; valid names: " + valid);
        }
        out.push_back(k);
    }
    return out;
}

int cmd_visualize(const VisualizeArgs& a, std::ostream& out, std::ostream& err) {
    if (a.mode != "scoremap" && a.mode != "skeleton" && a.mode != "matchmatrix") {
        throw InputError("unknown mode '" + a.mode + "' (expected scoremap, skeleton or matchmatrix)");
    }
    auto l = load_for_inference(a.common, a.checkpoint, a.split, err);
    auto& model = *l.model;
    const auto& schema = model.config().schema;
    const auto channels = selected_keypoints(schema, a.keypoints);
    if (a.mode != "skeleton" && model.config().baseline) {
        throw ConfigMismatchError("a baseline checkpoint has no score maps or match matrices");
    }
    const auto dir = make_output_dir(a.common.output_dir);
    std::vector<std::int64_t> ids = a.ids;
    if (ids.empty()) {
        if (l.split.records.empty()) throw InputError("the split has no records");
        ids.push_back(l.split.records.front().id);
    }

    ImageCache cache;
    const int size = model.config().input_size;
    for (const auto id : ids) {
        const auto it = std::find_if(l.split.records.begin(), l.split.records.end(),
                                     [&](const InstanceRecord& r) { return r.id == id; });
        if (it == l.split.records.end()) throw InputError("no instance with id " + std::to_string(id) + " in the split");
        const auto crop = crop_instance(*it, cache.get(it->image_path), size, size, {}, schema);
        const std::vector<Tensor> one{image_to_tensor(crop.pixels)};
        const Tensor images = stack_images(one);
        const std::string stem = std::to_string(id);

        if (a.mode == "skeleton") {
            const auto pose = model.forward_infer(images).poses.at(0);
            cv::imwrite((dir / ("skeleton_" + stem + ".png")).string(),
                        render::skeleton(crop.pixels, pose.coords, schema, &crop.keypoints));
            json joints = json::array();
            for (int k = 0; k < schema.size(); ++k) {
                const auto& p = pose.coords[static_cast<std::size_t>(k)];
                const auto& g = crop.keypoints[static_cast<std::size_t>(k)];
                joints.push_back({{"name", schema.keypoint_names[static_cast<std::size_t>(k)]},
                                  {"x", p.x},
                                  {"y", p.y},
                                  {"confidence", pose.confidence[static_cast<std::size_t>(k)]},
                                  {"gt", g.labeled() ? json::array({g.x, g.y}) : json()}});
            }
            write_json(dir / ("skeleton_" + stem + ".json"), {{"id", id}, {"joints", joints}});
            out << "skeleton -> " << (dir / ("skeleton_" + stem + ".png")).string() << "\n";
            continue;
        }

        const std::vector<std::vector<Keypoint>> kps{crop.keypoints};
        const auto analysis = model.analyze(images, kps, l.cfg.train.loss_weights.logit_scale);
        if (a.mode == "scoremap") {
            const Tensor& s = analysis.scores.value();  // [1, N, H, W]
            const int h = s.dim(2), w = s.dim(3);
            for (const int k : channels) {
                Tensor plane({h, w});
                std::copy_n(s.data.begin() + static_cast<std::ptrdiff_t>(k) * h * w, h * w, plane.data.begin());
                const auto& name = schema.keypoint_names[static_cast<std::size_t>(k)];
                const auto file = dir / ("scoremap_" + stem + "_" + std::to_string(k) + "_" + name + ".png");
                cv::imwrite(file.string(), render::score_overlay(crop.pixels, plane, name));
            }
            out << channels.size() << " score-map overlays for instance " << id << "\n";
        } else {
            const Tensor& m = analysis.match.at(0).value();
            cv::imwrite((dir / ("matchmatrix_" + stem + ".png")).string(), render::match_grid(m, schema.keypoint_names));
            json rows = json::array();
            for (int i = 0; i < m.dim(0); ++i) {
                std::vector<double> row(m.data.begin() + static_cast<std::ptrdiff_t>(i) * m.dim(1),
                                        m.data.begin() + static_cast<std::ptrdiff_t>(i + 1) * m.dim(1));
                rows.push_back(row);
            }
            std::vector<bool> visible;
            for (const auto& k : crop.keypoints) visible.push_back(k.labeled());
            write_json(dir / ("matchmatrix_" + stem + ".json"),
                       {{"id", id}, {"names", schema.keypoint_names}, {"visible", visible}, {"matrix", rows}});
            out << "match matrix -> " << (dir / ("matchmatrix_" + stem + ".png")).string() << "\n";
        }
    }
    return kOk;
}

// -- selfcheck ---------------------------------------------------------------

struct SelfcheckArgs {
    std::string output_dir;
    std::uint64_t seed = 0;
    bool skip_training = false;
};

int cmd_selfcheck(const SelfcheckArgs& a, std::ostream& out) {
    SelfcheckOptions o;
    o.seed = a.seed;
    o.work_dir = make_output_dir(a.output_dir);
    o.include_training = !a.skip_training;
    json report = json::array();
    int failed = 0;
    for (const auto& check : selfcheck_registry()) {
        if (check.training && !o.include_training) continue;
        const auto r = run_check(check, o);
        out << (r.passed ? "PASS " : "FAIL ") << r.name << ": " << r.detail << "\n" << std::flush;
        report.push_back({{"name", r.name}, {"passed", r.passed}, {"detail", r.detail}, {"seconds", r.seconds}});
        failed += r.passed ? 0 : 1;
    }
    write_json(o.work_dir / "selfcheck.json", report);
    return failed == 0 ? kOk : kInternalError;
}

}  // namespace

int run(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
    CLI::App app{"Pose-specific prompt adaptation for animal pose estimation", "clamp"};
    app.require_subcommand(1);

    PrepareArgs prep;
    auto* prepare = app.add_subcommand("prepare", "write few-shot / zero-shot manifests and a dataset summary");
    add_common(*prepare, prep.common);
    prepare->add_option("--fewshot", prep.fewshot, "records sampled per species");
    prepare->add_option("--seed", prep.seed, "sampling seed");
    prepare->add_option("--zeroshot", prep.zeroshot, "TRAIN:TEST family lists, comma separated on each side");
    prepare->add_option("--synthetic", prep.synthetic, "first generate this many synthetic blob images");
    prepare->add_option("--synthetic-keypoints", prep.synthetic_keypoints, "keypoints per synthetic image");
    prepare->add_option("--synthetic-size", prep.synthetic_size, "synthetic image side in pixels");

    TrainArgs tr;
    auto* train_cmd = app.add_subcommand("train", "train a model; writes checkpoints and a JSON-lines log");
    add_common(*train_cmd, tr.common);
    train_cmd->add_option("--init", tr.init, "checkpoint to start from");
    train_cmd->add_option("--log-every", tr.log_every, "print every N steps (0 = quiet)");

    EvaluateArgs ev;
    auto* eval_cmd = app.add_subcommand("evaluate", "OKS metrics, per-instance CSV and predictions of a checkpoint");
    add_common(*eval_cmd, ev.common);
    eval_cmd->add_option("--checkpoint", ev.checkpoint, "checkpoint file")->required();
    eval_cmd->add_option("--split", ev.split, "train or val (val falls back to train data)");
    eval_cmd->add_option("--batch-size", ev.batch_size, "inference batch size");

    VisualizeArgs vis;
    auto* vis_cmd = app.add_subcommand("visualize", "score-map overlays, skeletons or match-matrix grids");
    add_common(*vis_cmd, vis.common);
    vis_cmd->add_option("--checkpoint", vis.checkpoint, "checkpoint file")->required();
    vis_cmd->add_option("--mode", vis.mode, "scoremap, skeleton or matchmatrix")->required();
    vis_cmd->add_option("--ids", vis.ids, "annotation ids (default: first instance)")->delimiter(',');
    vis_cmd->add_option("--keypoints", vis.keypoints, "keypoint names for scoremap mode")->delimiter(',');
    vis_cmd->add_option("--split", vis.split, "train or val");

    SelfcheckArgs sc;
    auto* self = app.add_subcommand("selfcheck", "run the property suite");
    self->add_option("--output-dir", sc.output_dir, "scratch directory")->required();
    self->add_option("--seed", sc.seed, "seed for the random instances");
    self->add_flag("--skip-training", sc.skip_training, "leave out the overfit run");

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp&) {
        out << app.help();
        return kOk;
    } catch (const CLI::ParseError& e) {
        err << "error: " << e.what() << "\n";
        return kInputError;
    }

    try {
        if (*prepare) return cmd_prepare(prep, out);
        if (*train_cmd) return cmd_train(tr, out, err);
        if (*eval_cmd) return cmd_evaluate(ev, out, err);
        if (*vis_cmd) return cmd_visualize(vis, out, err);
        return cmd_selfcheck(sc, out);
    } catch (const ConfigMismatchError& e) {
        err << "config mismatch: " << e.what() << "\n";
        return kConfigMismatch;
    } catch (const InputError& e) {
        err << "input error: " << e.what() << "\n";
        return kInputError;
    } catch (const ParseError& e) {
        err << "input error: " << e.what() << "\n";
        return kInputError;
    } catch (const SchemaMismatchError& e) {
        err << "input error: " << e.what() << "\n";
        return kInputError;
    } catch (const std::exception& e) {
        err << "internal error: " << e.what() << "\n";
        return kInternalError;
    }
}

}  // namespace clamp::cli
