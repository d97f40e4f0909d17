#include "clamp/train.hpp"

#include <cmath>
#include <fstream>

#include "clamp/checkpoint.hpp"
#include "clamp/errors.hpp"

namespace clamp {

double lr_at(const TrainConfig& config, int epoch) {
    if (epoch < 0 || epoch >= config.epochs) {
        throw PreconditionError("epoch " + std::to_string(epoch) + " outside [0, " + std::to_string(config.epochs) + ")");
    }
    double lr = config.lr;
    for (int e : config.lr_decay_epochs) {
        if (e <= epoch) lr *= config.lr_decay_factor;
    }
    return lr;
}

AdamW::AdamW(std::vector<ParamGroup> groups, double weight_decay, double beta1, double beta2, double eps)
    : groups_(std::move(groups)), weight_decay_(weight_decay), beta1_(beta1), beta2_(beta2), eps_(eps) {
    for (const auto& g : groups_) {
        std::vector<std::vector<double>> m, v;
        for (const auto& p : g.params) {
            m.emplace_back(p.numel(), 0.0);
            v.emplace_back(p.numel(), 0.0);
        }
        m_.push_back(std::move(m));
        v_.push_back(std::move(v));
    }
}

void AdamW::step(double lr) {
    ++steps_;
    const double c1 = 1.0 - std::pow(beta1_, steps_);
    const double c2 = 1.0 - std::pow(beta2_, steps_);
    for (std::size_t gi = 0; gi < groups_.size(); ++gi) {
        const double glr = lr * groups_[gi].lr_mult;
        for (std::size_t pi = 0; pi < groups_[gi].params.size(); ++pi) {
            auto& p = groups_[gi].params[pi];
            if (!p.has_grad()) continue;
            const Tensor g = p.grad();
            auto& w = p.value_mut().data;
            auto& m = m_[gi][pi];
            auto& v = v_[gi][pi];
            for (std::size_t i = 0; i < w.size(); ++i) {
                w[i] *= 1.0 - glr * weight_decay_;
                m[i] = beta1_ * m[i] + (1.0 - beta1_) * g.data[i];
                v[i] = beta2_ * v[i] + (1.0 - beta2_) * g.data[i] * g.data[i];
                w[i] -= glr * (m[i] / c1) / (std::sqrt(v[i] / c2) + eps_);
            }
        }
    }
}

void AdamW::zero_grad() {
    for (auto& g : groups_)
        for (auto& p : g.params) p.zero_grad();
}

std::vector<ParamGroup> parameter_groups(const ClampModel& model, double backbone_lr_mult) {
    ParamGroup backbone{"backbone", {}, backbone_lr_mult};
    ParamGroup head{"head", {}, 1.0};
    for (auto& [name, v] : model.backbone_parameters()) backbone.params.push_back(v);
    for (auto& [name, v] : model.head_parameters()) head.params.push_back(v);
    return {backbone, head};
}

nlohmann::json StepLog::to_json() const {
    return {{"step", step},           {"epoch", epoch}, {"l_pred", l_pred}, {"l_spatial", l_spatial},
            {"l_feature", l_feature}, {"total", total}, {"lr", lr}};
}

std::vector<std::size_t> epoch_order(std::size_t count, std::uint64_t seed, int epoch) {
    std::vector<std::size_t> order(count);
    for (std::size_t i = 0; i < count; ++i) order[i] = i;
    Rng rng(mix_seed(seed, static_cast<std::uint64_t>(epoch)));
    rng.shuffle(order);
    return order;
}

TrainResult train(ClampModel& model, const DatasetSplit& split, const TrainConfig& config, ImageCache& images,
                  const TrainOptions& options) {
    config.validate();
    if (split.records.empty()) throw PreconditionError("training split is empty");
    if (split.schema.size() != model.num_keypoints()) {
        throw ConfigMismatchError("split has " + std::to_string(split.schema.size()) + " keypoints, model " +
                                  std::to_string(model.num_keypoints()));
    }
    std::filesystem::create_directories(options.output_dir / "checkpoints");
    TrainResult result;
    result.log = options.output_dir / "metrics.jsonl";
    std::ofstream log(result.log, std::ios::trunc);
    if (!log) throw Error("cannot write " + result.log.string());

    AdamW optimizer(parameter_groups(model, config.backbone_lr_mult), config.weight_decay);
    model.set_training(true);
    const int size = model.config().input_size;
    const auto batch = static_cast<std::size_t>(config.batch_size);
    int step = 0;
    bool done = false;
    double best_ap = -std::numeric_limits<double>::infinity();

    for (int epoch = 0; epoch < config.epochs && !done; ++epoch) {
        const double lr = lr_at(config, epoch);
        const auto order = epoch_order(split.records.size(), config.seed, epoch);
        for (std::size_t start = 0; start < order.size() && !done; start += batch) {
            std::vector<Sample> samples;
            for (std::size_t i = start; i < std::min(order.size(), start + batch); ++i) {
                const auto& r = split.records[order[i]];
                Rng aug(mix_seed(mix_seed(config.seed ^ config.augment.seed, static_cast<std::uint64_t>(epoch)),
                                 static_cast<std::uint64_t>(r.id)));
                samples.push_back(
                    prepare_sample(r, images.get(r.image_path), size, sample_augment(config.augment, aug), split.schema));
            }
            const Batch b = collate(samples, model.num_keypoints(), size);
            optimizer.zero_grad();
            ForwardResult out;
            try {
                out = model.forward_train(b, config.loss_weights);
            } catch (const NumericalError& e) {
                throw NumericalError("step " + std::to_string(step) + ": " + e.what());
            }
            out.losses.total.backward();
            optimizer.step(lr);
            StepLog entry{step,
                          epoch,
                          out.losses.l_pred.item(),
                          out.losses.l_spatial.item(),
                          out.losses.l_feature.item(),
                          out.losses.total.item(),
                          lr};
            log << entry.to_json().dump() << "\n";
            log.flush();
            if (options.on_step) options.on_step(entry);
            result.history.push_back(entry);
            ++step;
            if (config.max_steps > 0 && step >= config.max_steps) done = true;
        }
        const bool last = done || epoch + 1 == config.epochs;
        if ((epoch + 1) % config.checkpoint_every == 0 && !last) {
            const auto path = options.output_dir / "checkpoints" / ("epoch_" + std::to_string(epoch + 1) + ".ckpt");
            save_checkpoint(path, model, {{"epoch", epoch + 1}, {"step", step}});
            result.checkpoints.push_back(path);
        }
        if (options.validation && ((epoch + 1) % config.checkpoint_every == 0 || last)) {
            const auto metrics = evaluate(predict_split(model, *options.validation, images), *options.validation).metrics;
            model.set_training(true);
            if (metrics.ap > best_ap) {
                best_ap = metrics.ap;
                result.best_validation = metrics;
                save_checkpoint(options.output_dir / "checkpoints" / "best.ckpt", model,
                                {{"epoch", epoch + 1}, {"step", step}, {"validation", metrics.to_json()}});
            }
        }
    }
    result.steps = step;
    result.final_checkpoint = options.output_dir / "checkpoints" / "final.ckpt";
    save_checkpoint(result.final_checkpoint, model, {{"epoch", result.history.back().epoch + 1}, {"step", step}});
    result.checkpoints.push_back(result.final_checkpoint);
    model.set_training(false);
    return result;
}

ZeroShotReport run_zeroshot(const std::function<std::unique_ptr<ClampModel>()>& make_model, const DatasetSplit& full,
                            const std::set<std::string>& train_families, const std::set<std::string>& test_families,
                            const TrainConfig& config, ImageCache& images, const std::filesystem::path& output_dir) {
    const auto [train_split, test_split] = build_zeroshot_split(full, train_families, test_families);
    auto model = make_model();
    ZeroShotReport report;
    report.train_records = train_split.records.size();
    report.test_records = test_split.records.size();
    report.training = train(*model, train_split, config, images, {output_dir, nullptr, {}});
    report.metrics = evaluate(predict_split(*model, test_split, images), test_split).metrics;
    return report;
}

}  // namespace clamp
