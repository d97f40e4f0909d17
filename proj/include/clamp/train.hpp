#pragma once

#include <filesystem>
#include <functional>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "clamp/config.hpp"
#include "clamp/data.hpp"
#include "clamp/eval.hpp"
#include "clamp/model.hpp"

namespace clamp {

/// lr * factor^(number of decay epochs <= epoch). Throws PreconditionError
/// outside [0, epochs).
double lr_at(const TrainConfig& config, int epoch);

struct ParamGroup {
    std::string name;
    std::vector<ag::Var> params;
    double lr_mult = 1.0;
};

/// Adam with decoupled weight decay (PyTorch AdamW update order).
class AdamW {
public:
    AdamW(std::vector<ParamGroup> groups, double weight_decay, double beta1 = 0.9, double beta2 = 0.999,
          double eps = 1e-8);

    void step(double lr);
    void zero_grad();
    int steps() const { return steps_; }
    const std::vector<ParamGroup>& groups() const { return groups_; }

private:
    std::vector<ParamGroup> groups_;
    std::vector<std::vector<std::vector<double>>> m_, v_;
    double weight_decay_, beta1_, beta2_, eps_;
    int steps_ = 0;
};

/// Backbone group (scaled by backbone_lr_mult) and everything else.
std::vector<ParamGroup> parameter_groups(const ClampModel& model, double backbone_lr_mult);

struct StepLog {
    int step = 0;
    int epoch = 0;
    double l_pred = 0, l_spatial = 0, l_feature = 0, total = 0, lr = 0;
    nlohmann::json to_json() const;
};

struct TrainOptions {
    std::filesystem::path output_dir;
    /// Evaluated at each checkpoint epoch to keep best.ckpt when given.
    const DatasetSplit* validation = nullptr;
    std::function<void(const StepLog&)> on_step;
};

struct TrainResult {
    std::filesystem::path final_checkpoint;
    std::filesystem::path log;
    std::vector<std::filesystem::path> checkpoints;
    std::vector<StepLog> history;
    std::optional<EvalMetrics> best_validation;
    int steps = 0;
};

/// Seeded shuffle per epoch, augmentation drawn per (seed, epoch, record),
/// one AdamW step per mini-batch. The metrics log is JSON lines under
/// output_dir; checkpoints go to output_dir/checkpoints. A non-finite loss
/// aborts with NumericalError naming the step.
TrainResult train(ClampModel& model, const DatasetSplit& split, const TrainConfig& config, ImageCache& images,
                  const TrainOptions& options);

/// Epoch order of record indices for a given seed.
std::vector<std::size_t> epoch_order(std::size_t count, std::uint64_t seed, int epoch);

struct ZeroShotReport {
    EvalMetrics metrics;
    std::size_t train_records = 0;
    std::size_t test_records = 0;
    TrainResult training;
};

/// Builds the family split, trains a fresh model on the first part and
/// evaluates it on the second.
ZeroShotReport run_zeroshot(const std::function<std::unique_ptr<ClampModel>()>& make_model, const DatasetSplit& full,
                            const std::set<std::string>& train_families, const std::set<std::string>& test_families,
                            const TrainConfig& config, ImageCache& images, const std::filesystem::path& output_dir);

}  // namespace clamp
