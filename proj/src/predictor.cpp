#include "clamp/predictor.hpp"

#include <numeric>

#include "clamp/errors.hpp"

namespace clamp {

KeypointPredictor::KeypointPredictor(std::vector<int> input_blocks, int num_keypoints, const PredictorConfig& config,
                                     Rng& rng)
    : final_layer(config.channels, num_keypoints, 1, 1, 0, rng), blocks_(std::move(input_blocks)),
      num_keypoints_(num_keypoints) {
    if (blocks_.empty() || config.stages < 1 || config.channels < 1 || num_keypoints < 1) {
        throw ConfigMismatchError("invalid keypoint predictor configuration");
    }
    for (int b : blocks_) {
        if (b < 1) throw ConfigMismatchError("predictor input blocks must be non-empty");
    }
    int in = input_channels();
    for (int s = 0; s < config.stages; ++s) {
        auto deconv = std::make_unique<nn::ConvTranspose2d>(in, config.channels, 4, 2, 1, rng, !config.batch_norm);
        register_module("deconv_layers." + std::to_string(3 * s), *deconv);
        deconvs_.push_back(std::move(deconv));
        if (config.batch_norm) {
            auto bn = std::make_unique<nn::BatchNorm2d>(config.channels);
            register_module("deconv_layers." + std::to_string(3 * s + 1), *bn);
            norms_.push_back(std::move(bn));
        }
        in = config.channels;
    }
    register_module("final_layer", final_layer);
    final_layer.weight.value_mut() = nn::normal_tensor(final_layer.weight.shape(), 0.001, rng);
}

int KeypointPredictor::input_channels() const { return std::accumulate(blocks_.begin(), blocks_.end(), 0); }

ag::Var KeypointPredictor::forward(const ag::Var& x) {
    if (x.value().rank() != 4 || x.dim(1) != input_channels()) {
        throw PreconditionError("predictor expects " + std::to_string(input_channels()) + " input channels, got " +
                                shape_str(x.shape()));
    }
    // The bias rides on the first block; the remaining blocks add exact
    // zeros when their weights are zero.
    const auto& first = *deconvs_.front();
    const Shape wshape = first.weight.shape();
    ag::Var y;
    if (blocks_.size() == 1) {
        y = ag::conv_transpose2d(x, first.weight, first.bias, first.stride(), first.pad());
    } else {
        const auto flat = ag::reshape(first.weight, {wshape[0], wshape[1] * wshape[2] * wshape[3]});
        int offset = 0;
        for (int b : blocks_) {
            const auto w = ag::reshape(ag::slice_rows(flat, offset, b), {b, wshape[1], wshape[2], wshape[3]});
            const auto part = ag::conv_transpose2d(ag::slice_channels(x, offset, b), w,
                                                   offset == 0 ? first.bias : ag::Var(), first.stride(), first.pad());
            y = y.defined() ? ag::add(y, part) : part;
            offset += b;
        }
    }
    for (std::size_t s = 0; s < deconvs_.size(); ++s) {
        if (s > 0) y = deconvs_[s]->forward(y);
        if (!norms_.empty()) y = norms_[s]->forward(y);
        y = ag::relu(y);
    }
    return final_layer.forward(y);
}

void KeypointPredictor::copy_from(const KeypointPredictor& other) {
    const auto mine = state();
    const auto theirs = other.state();
    if (mine.size() != theirs.size()) throw ConfigMismatchError("predictor layouts differ");
    const std::string first = "deconv_layers.0.weight";
    for (std::size_t i = 0; i < mine.size(); ++i) {
        auto dst = mine[i].second;
        const auto& src = theirs[i].second.value();
        if (mine[i].first != theirs[i].first) throw ConfigMismatchError("predictor layouts differ");
        if (mine[i].first == first) {
            if (src.dim(0) < dst.dim(0)) throw ConfigMismatchError("source predictor has fewer input channels");
            const std::size_t n = dst.numel();
            std::copy(src.data.begin(), src.data.begin() + static_cast<std::ptrdiff_t>(n), dst.value_mut().data.begin());
        } else {
            if (src.shape != dst.shape()) throw ConfigMismatchError("predictor tensor " + mine[i].first + " differs");
            dst.value_mut() = src;
        }
    }
}

void KeypointPredictor::zero_input_block(int block) {
    if (block < 0 || block >= static_cast<int>(blocks_.size())) throw PreconditionError("no such input block");
    const int offset = std::accumulate(blocks_.begin(), blocks_.begin() + block, 0);
    auto& w = deconvs_.front()->weight.value_mut();
    const std::size_t row = w.numel() / static_cast<std::size_t>(w.dim(0));
    std::fill(w.data.begin() + static_cast<std::ptrdiff_t>(row * offset),
              w.data.begin() + static_cast<std::ptrdiff_t>(row * (offset + blocks_[static_cast<std::size_t>(block)])),
              0.0);
}

}  // namespace clamp
